#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "pisco/autograd.hpp"

namespace pisco {
inline namespace PISCO_ABI {

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t vocab_size = 2048;
  std::size_t max_seq_len = 1024;
  bool tie_lm_head = true;
  /// Rotary positions on queries and keys; false adds a learned absolute
  /// position table to the inputs instead.
  bool rope = true;

  void validate() const;
};

/// One decoder input position: a vocabulary id or a raw embedding vector that
/// bypasses the token table.
struct InputItem {
  std::variant<TokenId, std::vector<Scalar>> value;

  static InputItem token(TokenId id) { return InputItem{id}; }
  static InputItem embedding(std::vector<Scalar> v) { return InputItem{std::move(v)}; }
  bool is_token() const noexcept { return std::holds_alternative<TokenId>(value); }
  TokenId token_id() const { return std::get<TokenId>(value); }
  const std::vector<Scalar>& vector() const { return std::get<std::vector<Scalar>>(value); }
};

std::vector<InputItem> token_items(std::span<const TokenId> ids);

enum class AdapterRole { compressor, decoder };
std::string_view to_string(AdapterRole role);

struct LoraConfig {
  std::size_t rank = 16;
  double alpha = 32.0;
  double dropout = 0.1;
};

class Transformer;

/// Low-rank deltas for every linear projection of one role. B starts at
/// zero so a fresh set leaves the base model unchanged; the applied delta is
/// (alpha / rank) * B * A.
class LoraAdapterSet {
 public:
  struct Pair {
    Parameter a;  // [rank, in]
    Parameter b;  // [out, rank]
  };

  LoraAdapterSet(AdapterRole role, const Transformer& base, LoraConfig config, std::uint64_t seed);

  AdapterRole role() const noexcept { return role_; }
  const LoraConfig& config() const noexcept { return config_; }
  Scalar scale() const noexcept {
    return static_cast<Scalar>(config_.alpha / static_cast<double>(config_.rank));
  }
  Pair* find(const std::string& target);
  const Pair* find(const std::string& target) const;
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;

 private:
  AdapterRole role_;
  LoraConfig config_;
  std::map<std::string, Pair> pairs_;
};

struct LayerParams {
  Parameter ln1_gain, ln1_bias;
  Parameter q, k, v, o;
  Parameter ln2_gain, ln2_bias;
  Parameter fc1, fc2;
};

struct GraphOptions {
  LoraAdapterSet* adapters = nullptr;
  bool compute_logits = true;
  /// First row for which logits are produced.
  std::size_t logits_from = 0;
  /// Enables adapter dropout when set.
  std::mt19937_64* dropout_rng = nullptr;
};

struct GraphOutput {
  Var hidden;                 // [T, d_model], after the final norm
  std::optional<Var> logits;  // [T - logits_from, vocab]
};

/// Pre-norm GPT-style decoder with a tied head and rotary positions.
class Transformer {
 public:
  Transformer(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;
  void set_trainable(bool trainable);

  Parameter& token_embedding() noexcept { return tok_emb_; }
  const Parameter& token_embedding() const noexcept { return tok_emb_; }
  const Parameter& position_embedding() const noexcept { return pos_emb_; }
  /// LM head matrix [vocab, d_model]; the token table when tied.
  const Parameter& head() const noexcept { return config_.tie_lm_head ? tok_emb_ : lm_head_; }
  Parameter& head() noexcept { return config_.tie_lm_head ? tok_emb_ : lm_head_; }
  const std::vector<LayerParams>& layers() const noexcept { return layers_; }
  const Parameter& final_gain() const noexcept { return lnf_gain_; }
  const Parameter& final_bias() const noexcept { return lnf_bias_; }
  /// Look up a linear weight by adapter target name ("layers.0.q", "lm_head").
  const Parameter& linear_weight(const std::string& target) const;
  std::vector<std::string> linear_targets() const;

  /// Factor applied to token-table rows on lookup (sqrt(d_model)).
  Scalar embedding_scale() const noexcept;
  /// Scaled token-table rows for ids.
  Var embed_tokens(Tape& tape, std::span<const TokenId> ids);
  /// Input rows are [T, d_model] item embeddings; positions are applied here.
  GraphOutput forward(Tape& tape, Var inputs, const GraphOptions& options);

 private:
  Var project(Tape& tape, Var x, Parameter& weight, const std::string& target,
              const GraphOptions& options);

  ModelConfig config_;
  Parameter tok_emb_;
  Parameter pos_emb_;
  std::vector<LayerParams> layers_;
  Parameter lnf_gain_, lnf_bias_;
  Parameter lm_head_;
};

}  // namespace PISCO_ABI
}  // namespace pisco
