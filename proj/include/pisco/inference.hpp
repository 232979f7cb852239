#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pisco/model.hpp"

namespace pisco {
inline namespace PISCO_ABI {

/// Counts multiply-accumulates performed by the inference kernels.
struct MacCounter {
  std::uint64_t macs = 0;
  std::uint64_t flops() const noexcept { return 2 * macs; }
};

/// Read-only base weights with one adapter role merged in
/// (W + alpha/rank * B A). Safe to share between concurrent sessions.
class InferenceWeights {
 public:
  explicit InferenceWeights(const Transformer& base, const LoraAdapterSet* adapters = nullptr);

  struct Layer {
    Tensor ln1_gain, ln1_bias, q, k, v, o, ln2_gain, ln2_bias, fc1, fc2;
  };

  const ModelConfig& config() const noexcept { return config_; }
  const Tensor& token_embedding() const noexcept { return tok_emb_; }
  Scalar embedding_scale() const noexcept { return embedding_scale_; }
  const Tensor& position_embedding() const noexcept { return pos_emb_; }
  const Tensor& head() const noexcept { return head_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  const Tensor& final_gain() const noexcept { return lnf_gain_; }
  const Tensor& final_bias() const noexcept { return lnf_bias_; }
  std::size_t bytes() const noexcept;

 private:
  ModelConfig config_;
  Scalar embedding_scale_;
  Tensor tok_emb_, pos_emb_, head_;
  std::vector<Layer> layers_;
  Tensor lnf_gain_, lnf_bias_;
};

/// Incremental forward pass with a key/value cache.
class DecodeSession {
 public:
  explicit DecodeSession(const InferenceWeights& weights, MacCounter* counter = nullptr);

  /// Appends positions and returns their final (post-norm) hidden states,
  /// [items, d_model].
  Tensor append(std::span<const InputItem> items);
  /// Appends one token and returns next-token logits.
  std::vector<Scalar> step(TokenId token);
  /// LM-head logits for the most recent position.
  std::vector<Scalar> logits_last();

  std::size_t length() const noexcept { return length_; }
  /// Bytes held by the key/value cache.
  std::size_t cache_bytes() const noexcept;

 private:
  const InferenceWeights& w_;
  MacCounter* counter_;
  std::size_t length_ = 0;
  std::vector<Tensor> keys_;    // per layer [max_seq_len, d]
  std::vector<Tensor> values_;  // per layer [max_seq_len, d]
  std::vector<Scalar> last_hidden_;
};

struct GenerateOptions {
  std::size_t max_new_tokens = 128;
  TokenId eos = 3;
  /// Ignore EOS and always emit max_new_tokens tokens (benchmarking).
  bool force_length = false;
};

/// Greedy decoding; ties resolve to the lowest token id.
std::vector<TokenId> greedy_generate(const InferenceWeights& weights, std::span<const InputItem> prompt,
                                     const GenerateOptions& options = {}, MacCounter* counter = nullptr);

/// Index of the largest value, lowest index on ties.
std::size_t argmax(std::span<const Scalar> values);

}  // namespace PISCO_ABI
}  // namespace pisco
