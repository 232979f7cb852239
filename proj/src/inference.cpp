#include "pisco/inference.hpp"

#include <algorithm>
#include <cmath>

#include "kernels.hpp"

namespace pisco {
inline namespace PISCO_ABI {

using kernels::view;

namespace {

Tensor merged(const Transformer& base, const LoraAdapterSet* adapters, const std::string& target) {
  Tensor w = base.linear_weight(target).value;
  if (adapters == nullptr) return w;
  const LoraAdapterSet::Pair* pair = adapters->find(target);
  if (pair == nullptr) return w;
  if (pair->a.value.cols() != w.cols() || pair->b.value.rows() != w.rows()) {
    fail(ErrorCode::shape_mismatch, "adapter " + target + " does not match base weight " + to_string(w.shape()));
  }
  view(w).noalias() += adapters->scale() * (view(pair->b.value) * view(pair->a.value));
  return w;
}

void layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, Tensor& out) {
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const Scalar* xr = x.data() + r * n;
    Scalar* o = out.data() + r * n;
    Scalar mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= Scalar(n);
    Scalar var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= Scalar(n);
    const Scalar rs = Scalar(1) / std::sqrt(var + Scalar(1e-5));
    for (std::size_t j = 0; j < n; ++j) o[j] = (xr[j] - mean) * rs * gain[j] + bias[j];
  }
}

// out = a * w^T, counting rows(a) * rows(w) * cols(a) multiply-accumulates.
void project(const Tensor& a, const Tensor& w, Tensor& out, MacCounter* counter) {
  view(out).noalias() = view(a) * view(w).transpose();
  if (counter != nullptr) counter->macs += static_cast<std::uint64_t>(a.rows() * w.rows() * a.cols());
}

}  // namespace

InferenceWeights::InferenceWeights(const Transformer& base, const LoraAdapterSet* adapters)
    : config_(base.config()),
      embedding_scale_(base.embedding_scale()),
      tok_emb_(base.token_embedding().value),
      pos_emb_(base.position_embedding().value),
      lnf_gain_(base.final_gain().value),
      lnf_bias_(base.final_bias().value) {
  head_ = config_.tie_lm_head ? tok_emb_ : merged(base, adapters, "lm_head");
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    const LayerParams& l = base.layers()[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    layers_.push_back(Layer{l.ln1_gain.value, l.ln1_bias.value, merged(base, adapters, p + "q"),
                            merged(base, adapters, p + "k"), merged(base, adapters, p + "v"),
                            merged(base, adapters, p + "o"), l.ln2_gain.value, l.ln2_bias.value,
                            merged(base, adapters, p + "fc1"), merged(base, adapters, p + "fc2")});
  }
}

std::size_t InferenceWeights::bytes() const noexcept {
  std::size_t n = tok_emb_.size() + (config_.rope ? 0 : pos_emb_.size()) + lnf_gain_.size() + lnf_bias_.size();
  if (!config_.tie_lm_head) n += head_.size();
  for (const Layer& l : layers_) {
    n += l.ln1_gain.size() + l.ln1_bias.size() + l.q.size() + l.k.size() + l.v.size() + l.o.size() +
         l.ln2_gain.size() + l.ln2_bias.size() + l.fc1.size() + l.fc2.size();
  }
  return n * sizeof(Scalar);
}

// ---------------------------------------------------------------------------

DecodeSession::DecodeSession(const InferenceWeights& weights, MacCounter* counter)
    : w_(weights), counter_(counter) {
  const auto& c = w_.config();
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    keys_.emplace_back(Shape{c.max_seq_len, c.d_model});
    values_.emplace_back(Shape{c.max_seq_len, c.d_model});
  }
}

std::size_t DecodeSession::cache_bytes() const noexcept {
  return 2 * keys_.size() * w_.config().max_seq_len * w_.config().d_model * sizeof(Scalar);
}

Tensor DecodeSession::append(std::span<const InputItem> items) {
  const auto& c = w_.config();
  const std::size_t n = items.size();
  const std::size_t d = c.d_model;
  if (n == 0) fail(ErrorCode::invalid_argument, "append: no input items");
  if (length_ + n > c.max_seq_len) {
    fail(ErrorCode::overflow, "sequence of " + std::to_string(length_ + n) + " positions exceeds max_seq_len " +
                                  std::to_string(c.max_seq_len));
  }
  Tensor x = Tensor::matrix(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    Scalar* row = x.data() + i * d;
    if (items[i].is_token()) {
      const TokenId t = items[i].token_id();
      if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) {
        fail(ErrorCode::invalid_argument, "token id " + std::to_string(t) + " outside vocabulary");
      }
      const Scalar* src = w_.token_embedding().data() + static_cast<std::size_t>(t) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] = src[j] * w_.embedding_scale();
    } else {
      const auto& v = items[i].vector();
      if (v.size() != d) {
        fail(ErrorCode::shape_mismatch, "embedding item of width " + std::to_string(v.size()) +
                                            " != d_model " + std::to_string(d));
      }
      std::copy(v.begin(), v.end(), row);
    }
    if (!c.rope) {
      const Scalar* pos = w_.position_embedding().data() + (length_ + i) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += pos[j];
    }
  }

  const std::size_t heads = c.n_heads;
  const std::size_t dh = d / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  Tensor h = Tensor::matrix(n, d);
  Tensor q = Tensor::matrix(n, d);
  Tensor k = Tensor::matrix(n, d);
  Tensor v = Tensor::matrix(n, d);
  Tensor att = Tensor::matrix(n, d);
  Tensor proj = Tensor::matrix(n, d);
  Tensor ff = Tensor::matrix(n, c.d_ff);
  kernels::Vec scores;

  for (std::size_t li = 0; li < c.n_layers; ++li) {
    const auto& L = w_.layers()[li];
    layer_norm_rows(x, L.ln1_gain, L.ln1_bias, h);
    project(h, L.q, q, counter_);
    project(h, L.k, k, counter_);
    project(h, L.v, v, counter_);
    if (c.rope) {
      for (std::size_t i = 0; i < n; ++i) {
        kernels::rope_row(q.data() + i * d, d, heads, length_ + i, Scalar(10000));
        kernels::rope_row(k.data() + i * d, d, heads, length_ + i, Scalar(10000));
      }
    }
    std::copy_n(k.data(), n * d, keys_[li].data() + length_ * d);
    std::copy_n(v.data(), n * d, values_[li].data() + length_ * d);
    const auto keys = view(keys_[li]);
    const auto vals = view(values_[li]);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t span = length_ + i + 1;
      const auto si = static_cast<Eigen::Index>(span);
      for (std::size_t hd = 0; hd < heads; ++hd) {
        const auto col = static_cast<Eigen::Index>(hd * dh);
        const auto dhi = static_cast<Eigen::Index>(dh);
        const auto qrow = view(q).row(static_cast<Eigen::Index>(i)).segment(col, dhi);
        scores.noalias() = keys.block(0, col, si, dhi) * qrow.transpose();
        scores *= inv_sqrt;
        const Scalar mx = scores.maxCoeff();
        scores = (scores.array() - mx).exp();
        scores /= scores.sum();
        view(att).row(static_cast<Eigen::Index>(i)).segment(col, dhi).noalias() =
            scores.transpose() * vals.block(0, col, si, dhi);
      }
      if (counter_ != nullptr) counter_->macs += static_cast<std::uint64_t>(2 * span * d);
    }
    project(att, L.o, proj, counter_);
    view(x) += view(proj);
    layer_norm_rows(x, L.ln2_gain, L.ln2_bias, h);
    project(h, L.fc1, ff, counter_);
    for (Scalar& e : ff.values()) e = kernels::gelu(e);
    project(ff, L.fc2, proj, counter_);
    view(x) += view(proj);
  }
  Tensor out = Tensor::matrix(n, d);
  layer_norm_rows(x, w_.final_gain(), w_.final_bias(), out);
  last_hidden_.assign(out.data() + (n - 1) * d, out.data() + n * d);
  length_ += n;
  return out;
}

std::vector<Scalar> DecodeSession::logits_last() {
  if (length_ == 0) fail(ErrorCode::invalid_argument, "logits_last: empty session");
  const Tensor& head = w_.head();
  std::vector<Scalar> logits(head.rows());
  kernels::MatMap(logits.data(), static_cast<Eigen::Index>(head.rows()), 1).noalias() =
      view(head) * kernels::view(last_hidden_.data(), last_hidden_.size(), 1);
  if (counter_ != nullptr) counter_->macs += static_cast<std::uint64_t>(head.rows() * head.cols());
  return logits;
}

std::vector<Scalar> DecodeSession::step(TokenId token) {
  const InputItem item = InputItem::token(token);
  append(std::span<const InputItem>(&item, 1));
  return logits_last();
}

std::size_t argmax(std::span<const Scalar> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

std::vector<TokenId> greedy_generate(const InferenceWeights& weights, std::span<const InputItem> prompt,
                                     const GenerateOptions& options, MacCounter* counter) {
  if (prompt.empty()) fail(ErrorCode::invalid_argument, "greedy_generate: empty prompt");
  if (prompt.size() > weights.config().max_seq_len) {
    fail(ErrorCode::overflow, "greedy_generate: prompt of " + std::to_string(prompt.size()) +
                                  " positions exceeds context window " +
                                  std::to_string(weights.config().max_seq_len));
  }
  DecodeSession session(weights, counter);
  session.append(prompt);
  std::vector<TokenId> out;
  if (options.max_new_tokens == 0) return out;
  auto logits = session.logits_last();
  while (true) {
    const auto next = static_cast<TokenId>(argmax(logits));
    out.push_back(next);
    if (next == options.eos && !options.force_length) break;
    if (out.size() >= options.max_new_tokens) break;
    if (session.length() >= weights.config().max_seq_len) break;
    logits = session.step(next);
  }
  return out;
}

}  // namespace PISCO_ABI
}  // namespace pisco
