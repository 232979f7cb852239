#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pisco/distill.hpp"
#include "pisco/evalsuite.hpp"
#include "pisco/synth.hpp"

namespace pisco {
inline namespace PISCO_ABI {

/// Everything a run depends on. Keys are "section.name"; the text form is one
/// "key = value" per line with '#' comments.
struct RunConfig {
  std::filesystem::path run_dir = "runs/default";
  std::uint64_t seed = 1;
  std::size_t workers = 1;

  // data
  std::size_t entities = 200;
  std::size_t extra_worlds = 2;  // training-only worlds for teacher and student
  double filler_rate = 2.0;
  double test_fraction = 0.2;
  std::size_t k = 5;

  // model
  std::size_t layers = 3;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 1024;

  // optimizer, shared by every stage
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  double warmup_ratio = 0.05;

  // teacher: a single-document warm start, then full k
  std::size_t teacher_warm_epochs = 8;
  double teacher_warm_lr = 2e-3;
  std::size_t teacher_epochs = 2;
  double teacher_lr = 1e-3;
  std::size_t teacher_batch = 16;

  // compression model
  std::size_t l = 8;
  std::size_t lora_rank = 16;
  double lora_alpha = 32;
  double lora_dropout = 0.1;

  // distill and sft-raw
  std::string distill_name = "skd";
  std::string distill_init;  // pretrained model name, empty for none
  bool frozen_decoder = false;
  std::size_t distill_epochs = 10;
  double distill_lr = 1e-3;
  std::size_t distill_batch = 16;
  std::string sft_name = "sft";

  // pretrain
  std::string pretrain_name = "pretrain";
  std::string mixture = "ae";
  std::size_t pretrain_steps = 6000;
  double pretrain_lr = 2e-3;
  std::size_t pretrain_batch = 16;
  std::size_t pretrain_eval_docs = 64;

  // eval, compress, nih, analyze
  std::string model = "skd";  // "teacher" selects the uncompressed path
  bool use_store = true;
  std::size_t max_new_tokens = 32;
  std::size_t eval_limit = 0;  // 0 = every held-out question
  std::vector<std::size_t> nih_sizes{1, 2, 3, 4, 5};
  std::vector<double> nih_depths{0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t nih_trials = 20;
  std::size_t analysis_docs = 64;

  // bench
  std::size_t bench_doc_tokens = 128;
  std::size_t bench_query_tokens = 128;
  std::size_t bench_answer_tokens = 32;
  std::size_t bench_warmup = 2;
  std::size_t bench_repetitions = 10;
  std::size_t bench_memory_mb = 1024;

  /// Sets one key from text. Unknown keys and malformed values throw config.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;
  static const std::vector<std::string>& keys();
  static std::string_view help(std::string_view key);

  /// Reads "key = value" lines; later lines win.
  void load_file(const std::filesystem::path& path);
  /// Applies PISCO_<KEY> variables, with dots as underscores and upper case
  /// ("PISCO_DISTILL_LR"). lookup returns the variable or nothing.
  void apply_env(const std::function<std::optional<std::string>(const std::string&)>& lookup);
  void apply_process_env();
  static std::string env_name(std::string_view key);

  void validate() const;
  /// Sorted "key = value" lines, loadable by load_file.
  std::string serialize() const;
  /// FNV-1a of the serialized subset that affects results (run_dir and
  /// workers excluded), as 16 hex digits.
  std::string hash() const;
  std::string hash(std::span<const std::string> keys) const;

  SynthSpec synth_spec(std::size_t world = 0) const;
  ModelConfig model_config(std::size_t vocab_size) const;
  LoraConfig lora_config() const;
  AdamWConfig adamw() const;
  NihConfig nih_config() const;
  BenchConfig bench_config() const;
};

/// FNV-1a 64-bit as 16 lower-case hex digits.
std::string fnv1a_hex(std::string_view text);

}  // namespace PISCO_ABI
}  // namespace pisco
