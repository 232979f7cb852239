#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pisco/analysis.hpp"
#include "pisco/distill.hpp"
#include "pisco/evalsuite.hpp"
#include "pisco/run_config.hpp"

namespace pisco {
inline namespace PISCO_ABI {

/// Build identification written into every manifest.
std::string_view code_version();

/// Stage record written next to every artifact. config_hash covers the keys
/// the stage reads plus the hashes of its inputs, so an artifact is reused
/// exactly when nothing upstream changed.
struct Manifest {
  std::string stage;
  std::string name;
  std::string config_hash;
  std::string code_version;
  std::uint64_t seed = 0;
  std::string config;                         // serialized RunConfig
  std::map<std::string, std::string> inputs;  // artifact -> config hash
  std::map<std::string, double> metrics;
  double seconds = 0.0;

  void write(const std::filesystem::path& path) const;
  static Manifest read(const std::filesystem::path& path);
};

/// The generated worlds with retrieval results. World 0 holds the held-out
/// questions; extra worlds are training-only and retrieve within themselves.
struct Dataset {
  SynthSpec spec;
  Vocabulary vocab;
  CompiledPrompt prompt;
  std::vector<DocumentChunk> chunks;       // global ids
  std::vector<QAPair> qa;                  // id == index
  std::vector<TrainingExample> examples;   // aligned with qa, answers empty
  std::size_t world0_chunks = 0;           // chunks [0, world0_chunks) belong to world 0

  std::vector<TrainingExample> train_examples() const;
  std::vector<TrainingExample> test_examples(std::size_t limit = 0) const;
};

using LogFn = std::function<void(std::string_view)>;

struct EvalResult {
  MetricReport report;
  MetricSummary summary;
};

struct AnalysisResult {
  SpatialSpecialization spatial;
  double lens_coverage = 0.0;  // mean over analysed docs
  CentroidSeparation separation;
  std::size_t docs = 0;
};

/// Stage runner over one run directory. Every stage validates the config
/// first, checks its prerequisites, and writes a manifest. A stage whose
/// manifest hash matches is skipped unless force is set.
class Pipeline {
 public:
  explicit Pipeline(RunConfig config, LogFn log = {});

  const RunConfig& config() const noexcept { return config_; }
  bool force = false;

  // Artifact locations.
  std::filesystem::path data_dir() const;
  std::filesystem::path model_path(std::string_view name) const;
  std::filesystem::path manifest_path(std::string_view name) const;
  std::filesystem::path loss_log_path(std::string_view name) const;
  std::filesystem::path labels_path() const;
  std::filesystem::path store_path(std::string_view name) const;
  std::filesystem::path report_dir() const;

  /// Hash of a stage's output given the current config and inputs on disk.
  std::string stage_hash(std::string_view stage, std::string_view name) const;
  /// True when the manifest for name exists with the expected hash.
  bool up_to_date(std::string_view stage, std::string_view name) const;

  Manifest gen_data();
  Manifest train_teacher();
  Manifest pretrain();
  Manifest distill();
  Manifest sft_raw();
  Manifest compress();
  EvalResult eval();
  NIHGrid nih();
  AnalysisResult analyze();
  EfficiencyReport bench();

  const Dataset& dataset();
  Transformer load_teacher();
  PiscoModel load_student(std::string_view name);
  /// Test-set pretraining documents: a fresh world never used for training.
  std::vector<DocumentChunk> heldout_documents() const;

 private:
  void log(const std::string& message) const;
  void require(std::string_view stage, std::string_view name, std::string_view command) const;
  Manifest start(std::string_view stage, std::string_view name) const;
  void finish(Manifest& m, double seconds, std::string_view name) const;
  Manifest train_student(bool raw_labels);

  RunConfig config_;
  LogFn log_;
  std::optional<Dataset> dataset_;
};

}  // namespace PISCO_ABI
}  // namespace pisco
