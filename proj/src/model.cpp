#include "pisco/model.hpp"

#include <cmath>

namespace pisco {
inline namespace PISCO_ABI {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) fail(ErrorCode::config, std::string("model config: ") + name + " must be positive");
  };
  positive(n_layers, "n_layers");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (rope && (d_model / n_heads) % 2 != 0) {
    fail(ErrorCode::config, "model config: rotary positions need an even head width");
  }
  if (d_model % n_heads != 0) {
    fail(ErrorCode::config, "model config: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
}

std::vector<InputItem> token_items(std::span<const TokenId> ids) {
  std::vector<InputItem> out;
  out.reserve(ids.size());
  for (TokenId t : ids) out.push_back(InputItem::token(t));
  return out;
}

std::string_view to_string(AdapterRole role) {
  return role == AdapterRole::compressor ? "compressor" : "decoder";
}

namespace {

Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (Scalar& v : t.values()) v = static_cast<Scalar>(dist(rng));
  return t;
}

Tensor ones(std::size_t n) { return Tensor(Shape{n}, Scalar(1)); }
Tensor zeros(std::size_t n) { return Tensor(Shape{n}, Scalar(0)); }

}  // namespace

// ---------------------------------------------------------------------------

Transformer::Transformer(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_model;
  const double proj_std = 0.02 / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  tok_emb_ = Parameter("tok_emb", normal({config_.vocab_size, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng));
  if (!config_.rope) pos_emb_ = Parameter("pos_emb", normal({config_.max_seq_len, d}, 0.01, rng));
  layers_.resize(config_.n_layers);
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    LayerParams& l = layers_[i];
    l.ln1_gain = Parameter(p + "ln1.gain", ones(d), false);
    l.ln1_bias = Parameter(p + "ln1.bias", zeros(d), false);
    l.q = Parameter(p + "q", normal({d, d}, 0.02, rng));
    l.k = Parameter(p + "k", normal({d, d}, 0.02, rng));
    l.v = Parameter(p + "v", normal({d, d}, 0.02, rng));
    l.o = Parameter(p + "o", normal({d, d}, proj_std, rng));
    l.ln2_gain = Parameter(p + "ln2.gain", ones(d), false);
    l.ln2_bias = Parameter(p + "ln2.bias", zeros(d), false);
    l.fc1 = Parameter(p + "fc1", normal({config_.d_ff, d}, 0.02, rng));
    l.fc2 = Parameter(p + "fc2", normal({d, config_.d_ff}, proj_std, rng));
  }
  lnf_gain_ = Parameter("lnf.gain", ones(d), false);
  lnf_bias_ = Parameter("lnf.bias", zeros(d), false);
  if (!config_.tie_lm_head) lm_head_ = Parameter("lm_head", normal({config_.vocab_size, d}, 0.02, rng));
}

std::vector<Parameter*> Transformer::parameters() {
  std::vector<Parameter*> out{&tok_emb_};
  if (!config_.rope) out.push_back(&pos_emb_);
  for (auto& l : layers_) {
    for (Parameter* p : {&l.ln1_gain, &l.ln1_bias, &l.q, &l.k, &l.v, &l.o, &l.ln2_gain, &l.ln2_bias,
                         &l.fc1, &l.fc2}) {
      out.push_back(p);
    }
  }
  out.push_back(&lnf_gain_);
  out.push_back(&lnf_bias_);
  if (!config_.tie_lm_head) out.push_back(&lm_head_);
  return out;
}

std::vector<const Parameter*> Transformer::parameters() const {
  auto mut = const_cast<Transformer*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::size_t Transformer::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->value.size();
  return n;
}

void Transformer::set_trainable(bool trainable) {
  for (Parameter* p : parameters()) p->trainable = trainable;
}

std::vector<std::string> Transformer::linear_targets() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    for (const char* n : {"q", "k", "v", "o", "fc1", "fc2"}) out.push_back(p + n);
  }
  if (!config_.tie_lm_head) out.push_back("lm_head");
  return out;
}

const Parameter& Transformer::linear_weight(const std::string& target) const {
  if (target == "lm_head" && !config_.tie_lm_head) return lm_head_;
  constexpr std::string_view prefix = "layers.";
  if (target.rfind(prefix, 0) == 0) {
    const auto dot = target.find('.', prefix.size());
    if (dot != std::string::npos) {
      const std::size_t i = std::stoul(target.substr(prefix.size(), dot - prefix.size()));
      const std::string leaf = target.substr(dot + 1);
      if (i < layers_.size()) {
        const LayerParams& l = layers_[i];
        if (leaf == "q") return l.q;
        if (leaf == "k") return l.k;
        if (leaf == "v") return l.v;
        if (leaf == "o") return l.o;
        if (leaf == "fc1") return l.fc1;
        if (leaf == "fc2") return l.fc2;
      }
    }
  }
  fail(ErrorCode::invalid_argument, "unknown linear target " + target);
}

Var Transformer::embed_tokens(Tape& tape, std::span<const TokenId> ids) {
  for (TokenId t : ids) {
    if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size) {
      fail(ErrorCode::invalid_argument, "token id " + std::to_string(t) + " outside vocabulary of " +
                                            std::to_string(config_.vocab_size));
    }
  }
  return scale(embedding(tape.param(tok_emb_), ids), embedding_scale());
}

Scalar Transformer::embedding_scale() const noexcept {
  return std::sqrt(static_cast<Scalar>(config_.d_model));
}

Var Transformer::project(Tape& tape, Var x, Parameter& weight, const std::string& target,
                         const GraphOptions& options) {
  Var out = linear(x, tape.param(weight));
  if (options.adapters == nullptr) return out;
  LoraAdapterSet::Pair* pair = options.adapters->find(target);
  if (pair == nullptr) return out;
  if (pair->a.value.cols() != weight.value.cols() || pair->b.value.rows() != weight.value.rows()) {
    fail(ErrorCode::shape_mismatch, "adapter " + target + " shapes " + to_string(pair->a.value.shape()) +
                                        "/" + to_string(pair->b.value.shape()) +
                                        " do not match base weight " + to_string(weight.value.shape()));
  }
  Var in = x;
  if (options.dropout_rng != nullptr) {
    in = dropout(x, static_cast<Scalar>(options.adapters->config().dropout), *options.dropout_rng);
  }
  Var low = linear(in, tape.param(pair->a));
  Var delta = linear(low, tape.param(pair->b));
  return add(out, scale(delta, options.adapters->scale()));
}

GraphOutput Transformer::forward(Tape& tape, Var inputs, const GraphOptions& options) {
  const std::size_t T = inputs.rows();
  if (inputs.cols() != config_.d_model) {
    fail(ErrorCode::shape_mismatch, "forward: input width " + std::to_string(inputs.cols()) +
                                        " != d_model " + std::to_string(config_.d_model));
  }
  if (T == 0 || T > config_.max_seq_len) {
    fail(ErrorCode::overflow, "forward: sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                                  std::to_string(config_.max_seq_len));
  }
  Var x = config_.rope ? inputs : add(inputs, slice_rows(tape.param(pos_emb_), 0, T));
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    LayerParams& l = layers_[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    Var h = layer_norm(x, tape.param(l.ln1_gain), tape.param(l.ln1_bias));
    Var q = project(tape, h, l.q, p + "q", options);
    Var k = project(tape, h, l.k, p + "k", options);
    Var v = project(tape, h, l.v, p + "v", options);
    if (config_.rope) {
      q = rope(q, config_.n_heads);
      k = rope(k, config_.n_heads);
    }
    Var att = causal_attention(q, k, v, config_.n_heads);
    x = add(x, project(tape, att, l.o, p + "o", options));
    Var h2 = layer_norm(x, tape.param(l.ln2_gain), tape.param(l.ln2_bias));
    Var f = gelu(project(tape, h2, l.fc1, p + "fc1", options));
    x = add(x, project(tape, f, l.fc2, p + "fc2", options));
  }
  GraphOutput out{layer_norm(x, tape.param(lnf_gain_), tape.param(lnf_bias_)), std::nullopt};
  if (options.compute_logits) {
    if (options.logits_from >= T) fail(ErrorCode::invalid_argument, "forward: logits_from beyond sequence");
    Var rows = options.logits_from == 0 ? out.hidden : slice_rows(out.hidden, options.logits_from, T);
    if (config_.tie_lm_head) {
      out.logits = linear(rows, tape.param(tok_emb_));
    } else {
      out.logits = project(tape, rows, lm_head_, "lm_head", options);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

LoraAdapterSet::LoraAdapterSet(AdapterRole role, const Transformer& base, LoraConfig config,
                               std::uint64_t seed)
    : role_(role), config_(config) {
  if (config_.rank == 0) fail(ErrorCode::config, "lora rank must be positive");
  std::mt19937_64 rng(seed);
  const std::string prefix = role == AdapterRole::compressor ? "lora_c." : "lora_d.";
  for (const std::string& target : base.linear_targets()) {
    const Parameter& w = base.linear_weight(target);
    const std::size_t out = w.value.rows();
    const std::size_t in = w.value.cols();
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> uni(-bound, bound);
    Tensor a(Shape{config_.rank, in});
    for (Scalar& v : a.values()) v = static_cast<Scalar>(uni(rng));
    Pair pair{Parameter(prefix + target + ".A", std::move(a)),
              Parameter(prefix + target + ".B", Tensor(Shape{out, config_.rank}))};
    pairs_.emplace(target, std::move(pair));
  }
}

LoraAdapterSet::Pair* LoraAdapterSet::find(const std::string& target) {
  auto it = pairs_.find(target);
  return it == pairs_.end() ? nullptr : &it->second;
}

const LoraAdapterSet::Pair* LoraAdapterSet::find(const std::string& target) const {
  auto it = pairs_.find(target);
  return it == pairs_.end() ? nullptr : &it->second;
}

std::vector<Parameter*> LoraAdapterSet::parameters() {
  std::vector<Parameter*> out;
  for (auto& [name, pair] : pairs_) {
    out.push_back(&pair.a);
    out.push_back(&pair.b);
  }
  return out;
}

std::vector<const Parameter*> LoraAdapterSet::parameters() const {
  auto mut = const_cast<LoraAdapterSet*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::size_t LoraAdapterSet::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->value.size();
  return n;
}

}  // namespace PISCO_ABI
}  // namespace pisco
