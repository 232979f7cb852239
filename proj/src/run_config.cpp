#include "pisco/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <type_traits>
#include <variant>

namespace pisco {
inline namespace PISCO_ABI {

namespace {

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "seed shares the size_t alternative");

using Member = std::variant<std::size_t RunConfig::*, double RunConfig::*,
                            bool RunConfig::*, std::string RunConfig::*, std::filesystem::path RunConfig::*,
                            std::vector<std::size_t> RunConfig::*, std::vector<double> RunConfig::*>;

struct Field {
  std::string key;
  Member member;
  std::string help;
  bool hashed = true;
};

template <typename T>
Member member_of(T RunConfig::*m) {
  return Member(m);
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    using C = RunConfig;
    std::vector<Field> f{
        {"run.dir", member_of(&C::run_dir), "directory for every artifact of the run", false},
        {"run.seed", member_of(&C::seed), "single seed for data, initialisation and batch order"},
        {"run.workers", member_of(&C::workers), "worker threads for labelling, compression and evaluation", false},
        {"data.entities", member_of(&C::entities), "entities in the synthetic world"},
        {"data.extra_worlds", member_of(&C::extra_worlds), "additional training-only worlds"},
        {"data.filler_rate", member_of(&C::filler_rate), "filler sentences per fact sentence"},
        {"data.test_fraction", member_of(&C::test_fraction), "share of questions held out"},
        {"data.k", member_of(&C::k), "retrieved documents per question"},
        {"model.layers", member_of(&C::layers), "transformer layers"},
        {"model.d_model", member_of(&C::d_model), "hidden width"},
        {"model.heads", member_of(&C::heads), "attention heads"},
        {"model.d_ff", member_of(&C::d_ff), "MLP width"},
        {"model.max_seq_len", member_of(&C::max_seq_len), "context window in positions"},
        {"optim.weight_decay", member_of(&C::weight_decay), "AdamW weight decay"},
        {"optim.clip_norm", member_of(&C::clip_norm), "global gradient norm cap"},
        {"optim.warmup_ratio", member_of(&C::warmup_ratio), "share of steps spent warming up"},
        {"teacher.warm_epochs", member_of(&C::teacher_warm_epochs), "epochs with only the top document"},
        {"teacher.warm_lr", member_of(&C::teacher_warm_lr), "peak rate of the warm start"},
        {"teacher.epochs", member_of(&C::teacher_epochs), "epochs with all k documents"},
        {"teacher.lr", member_of(&C::teacher_lr), "peak rate with all k documents"},
        {"teacher.batch", member_of(&C::teacher_batch), "teacher batch size"},
        {"compress.l", member_of(&C::l), "memory embeddings per document"},
        {"lora.rank", member_of(&C::lora_rank), "adapter rank"},
        {"lora.alpha", member_of(&C::lora_alpha), "adapter scale numerator"},
        {"lora.dropout", member_of(&C::lora_dropout), "dropout on the adapter input"},
        {"distill.name", member_of(&C::distill_name), "output model name"},
        {"distill.init", member_of(&C::distill_init), "pretrained model to start from (empty: none)"},
        {"distill.frozen_decoder", member_of(&C::frozen_decoder), "train only the compressor and memory"},
        {"distill.epochs", member_of(&C::distill_epochs), "distillation epochs"},
        {"distill.lr", member_of(&C::distill_lr), "distillation peak rate"},
        {"distill.batch", member_of(&C::distill_batch), "distillation batch size"},
        {"sft.name", member_of(&C::sft_name), "output model name for raw-label training"},
        {"pretrain.name", member_of(&C::pretrain_name), "output model name"},
        {"pretrain.mixture", member_of(&C::mixture), "task mixture: ae, mix1..mix5 or ae=0.5,tc=0.5"},
        {"pretrain.steps", member_of(&C::pretrain_steps), "optimizer steps"},
        {"pretrain.lr", member_of(&C::pretrain_lr), "peak rate"},
        {"pretrain.batch", member_of(&C::pretrain_batch), "batch size"},
        {"pretrain.eval_docs", member_of(&C::pretrain_eval_docs), "held-out documents scored per task"},
        {"eval.model", member_of(&C::model), "model to evaluate; teacher means uncompressed"},
        {"eval.use_store", member_of(&C::use_store), "read embeddings from the compressed store"},
        {"eval.max_new_tokens", member_of(&C::max_new_tokens), "answer budget"},
        {"eval.limit", member_of(&C::eval_limit), "held-out questions scored (0: all)"},
        {"nih.sizes", member_of(&C::nih_sizes), "documents per haystack, comma separated"},
        {"nih.depths", member_of(&C::nih_depths), "needle depths in [0,1], comma separated"},
        {"nih.trials", member_of(&C::nih_trials), "trials per grid cell (at least 20)"},
        {"analysis.docs", member_of(&C::analysis_docs), "held-out documents analysed"},
        {"bench.doc_tokens", member_of(&C::bench_doc_tokens), "tokens per benchmark document"},
        {"bench.query_tokens", member_of(&C::bench_query_tokens), "benchmark query length"},
        {"bench.answer_tokens", member_of(&C::bench_answer_tokens), "forced answer length"},
        {"bench.warmup", member_of(&C::bench_warmup), "untimed runs"},
        {"bench.repetitions", member_of(&C::bench_repetitions), "timed runs (at least 10)"},
        {"bench.memory_mb", member_of(&C::bench_memory_mb), "memory cap for the batch estimate"},
    };
    std::sort(f.begin(), f.end(), [](const Field& a, const Field& b) { return a.key < b.key; });
    return f;
  }();
  return table;
}

const Field& field(std::string_view key) {
  const auto& f = fields();
  const auto it = std::lower_bound(f.begin(), f.end(), key, [](const Field& a, std::string_view k) { return a.key < k; });
  if (it == f.end() || it->key != key) fail(ErrorCode::config, "unknown config key '" + std::string(key) + "'");
  return *it;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    fail(ErrorCode::config, "config key '" + std::string(key) + "': cannot parse '" + std::string(text) + "'");
  }
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  fail(ErrorCode::config, "config key '" + std::string(key) + "': expected true or false, got '" + std::string(text) + "'");
}

template <typename T>
std::vector<T> parse_list(std::string_view key, std::string_view text) {
  std::vector<T> out;
  while (!text.empty()) {
    const auto comma = text.find(',');
    out.push_back(parse_number<T>(key, trim(text.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  return out;
}

std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    if constexpr (std::is_floating_point_v<T>) {
      s += format_double(v[i]);
    } else {
      s += std::to_string(v[i]);
    }
  }
  return s;
}

struct Setter {
  RunConfig& c;
  std::string_view key, text;
  void operator()(std::size_t RunConfig::*m) const { c.*m = parse_number<std::size_t>(key, text); }
  void operator()(double RunConfig::*m) const { c.*m = parse_number<double>(key, text); }
  void operator()(bool RunConfig::*m) const { c.*m = parse_bool(key, text); }
  void operator()(std::string RunConfig::*m) const { c.*m = std::string(text); }
  void operator()(std::filesystem::path RunConfig::*m) const { c.*m = std::filesystem::path(std::string(text)); }
  void operator()(std::vector<std::size_t> RunConfig::*m) const { c.*m = parse_list<std::size_t>(key, text); }
  void operator()(std::vector<double> RunConfig::*m) const { c.*m = parse_list<double>(key, text); }
};

struct Getter {
  const RunConfig& c;
  std::string operator()(std::size_t RunConfig::*m) const { return std::to_string(c.*m); }
  std::string operator()(double RunConfig::*m) const { return format_double(c.*m); }
  std::string operator()(bool RunConfig::*m) const { return c.*m ? "true" : "false"; }
  std::string operator()(std::string RunConfig::*m) const { return c.*m; }
  std::string operator()(std::filesystem::path RunConfig::*m) const { return (c.*m).string(); }
  std::string operator()(std::vector<std::size_t> RunConfig::*m) const { return join(c.*m); }
  std::string operator()(std::vector<double> RunConfig::*m) const { return join(c.*m); }
};

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  std::visit(Setter{*this, key, trim(value)}, field(key).member);
}

std::string RunConfig::get(std::string_view key) const { return std::visit(Getter{*this}, field(key).member); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return k;
}

std::string_view RunConfig::help(std::string_view key) { return field(key).help; }

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open config file " + path.string());
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    std::string_view s = line;
    if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) {
      fail(ErrorCode::config, path.string() + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    try {
      set(trim(s.substr(0, eq)), s.substr(eq + 1));
    } catch (const Error& e) {
      fail(ErrorCode::config, path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
}

std::string RunConfig::env_name(std::string_view key) {
  std::string name = "PISCO_";
  for (char ch : key) name += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return name;
}

void RunConfig::apply_env(const std::function<std::optional<std::string>(const std::string&)>& lookup) {
  for (const auto& key : keys()) {
    if (const auto v = lookup(env_name(key))) {
      try {
        set(key, *v);
      } catch (const Error& e) {
        fail(ErrorCode::config, env_name(key) + ": " + e.what());
      }
    }
  }
}

void RunConfig::apply_process_env() {
  apply_env([](const std::string& name) -> std::optional<std::string> {
    const char* v = std::getenv(name.c_str());
    if (!v) return std::nullopt;
    return std::string(v);
  });
}

void RunConfig::validate() const {
  auto positive = [](std::string_view key, double v) {
    if (!(v > 0)) fail(ErrorCode::config, std::string(key) + " must be positive");
  };
  positive("run.workers", static_cast<double>(workers));
  positive("data.entities", static_cast<double>(entities));
  positive("data.k", static_cast<double>(k));
  positive("teacher.batch", static_cast<double>(teacher_batch));
  positive("distill.batch", static_cast<double>(distill_batch));
  positive("pretrain.batch", static_cast<double>(pretrain_batch));
  positive("teacher.lr", teacher_lr);
  positive("teacher.warm_lr", teacher_warm_lr);
  positive("distill.lr", distill_lr);
  positive("pretrain.lr", pretrain_lr);
  positive("eval.max_new_tokens", static_cast<double>(max_new_tokens));
  if (!(test_fraction > 0 && test_fraction < 1)) fail(ErrorCode::config, "data.test_fraction must lie in (0, 1)");
  if (l == 0 || l > special::max_memory_tokens) {
    fail(ErrorCode::config, "compress.l must lie in [1, " + std::to_string(special::max_memory_tokens) + "]");
  }
  if (lora_dropout < 0 || lora_dropout >= 1) fail(ErrorCode::config, "lora.dropout must lie in [0, 1)");
  if (distill_name.empty() || sft_name.empty() || pretrain_name.empty() || model.empty()) {
    fail(ErrorCode::config, "model names must not be empty");
  }
  for (const auto* name : {&distill_name, &sft_name, &pretrain_name, &model, &distill_init}) {
    if (name->find_first_of("/\\ ") != std::string::npos) fail(ErrorCode::config, "model name '" + *name + "' has a path separator or space");
  }
  if (distill_name == "teacher" || sft_name == "teacher" || pretrain_name == "teacher") {
    fail(ErrorCode::config, "'teacher' is reserved for the uncompressed model");
  }
  Mixture::parse(mixture).validate();
  model_config(special::first_word + 1).validate();
  synth_spec().validate();
  nih_config().validate();
  bench_config().validate();
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + get(f.key) + "\n";
  return out;
}

std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string RunConfig::hash() const {
  std::vector<std::string> k;
  for (const auto& f : fields()) {
    if (f.hashed) k.push_back(f.key);
  }
  return hash(k);
}

std::string RunConfig::hash(std::span<const std::string> selected) const {
  std::string text;
  for (const auto& key : selected) text += key + "=" + get(key) + "\n";
  return fnv1a_hex(text);
}

SynthSpec RunConfig::synth_spec(std::size_t world) const {
  SynthSpec s;
  s.entity_count = entities;
  s.filler_rate = filler_rate;
  s.test_fraction = test_fraction;
  s.seed = seed + world;
  return s;
}

ModelConfig RunConfig::model_config(std::size_t vocab_size) const {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d_model;
  c.n_heads = heads;
  c.d_ff = d_ff;
  c.vocab_size = vocab_size;
  c.max_seq_len = max_seq_len;
  return c;
}

LoraConfig RunConfig::lora_config() const {
  LoraConfig c;
  c.rank = lora_rank;
  c.alpha = lora_alpha;
  c.dropout = lora_dropout;
  return c;
}

AdamWConfig RunConfig::adamw() const {
  AdamWConfig c;
  c.weight_decay = weight_decay;
  c.max_grad_norm = clip_norm;
  return c;
}

NihConfig RunConfig::nih_config() const {
  NihConfig c;
  c.context_sizes = nih_sizes;
  c.depths = nih_depths;
  c.trials = nih_trials;
  c.seed = seed;
  c.max_new_tokens = max_new_tokens;
  c.workers = workers;
  return c;
}

BenchConfig RunConfig::bench_config() const {
  BenchConfig c;
  c.k = k;
  c.doc_tokens = bench_doc_tokens;
  c.l = l;
  c.query_tokens = bench_query_tokens;
  c.answer_tokens = bench_answer_tokens;
  c.warmup = bench_warmup;
  c.repetitions = bench_repetitions;
  c.memory_cap_bytes = bench_memory_mb << 20;
  c.seed = seed;
  return c;
}

}  // namespace PISCO_ABI
}  // namespace pisco
