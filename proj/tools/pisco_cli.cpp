// pisco: command-line driver for the compression pipeline.

#include <cstdlib>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "pisco/pipeline.hpp"

namespace {

using namespace pisco;

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;  // config key -> value
  bool force = false;
  bool quiet = false;
};

// Options shared by every subcommand.
void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config_file, "key = value config file")->check(CLI::ExistingFile);
  sub->add_option("--set", c.sets, "override one config key, as key=value (repeatable)");
  sub->add_option_function<std::string>(
      "--run-dir", [&c](const std::string& v) { c.flags["run.dir"] = v; }, "artifact directory (run.dir)");
  sub->add_option_function<std::string>(
      "--seed", [&c](const std::string& v) { c.flags["run.seed"] = v; }, "global seed (run.seed)");
  sub->add_option_function<std::string>(
      "-j,--workers", [&c](const std::string& v) { c.flags["run.workers"] = v; }, "worker threads (run.workers)");
  sub->add_flag("--force", c.force, "rerun even when the stage manifest is current");
  sub->add_flag("-q,--quiet", c.quiet, "only warnings and errors");
}

void key_option(CLI::App* sub, Common& c, const std::string& flag, const std::string& key) {
  sub->add_option_function<std::string>(
      flag, [&c, key](const std::string& v) { c.flags[key] = v; },
      std::string(RunConfig::help(key)) + " (" + key + ")");
}

void key_flag(CLI::App* sub, Common& c, const std::string& flag, const std::string& key, const std::string& value,
              const std::string& help) {
  sub->add_flag_callback(flag, [&c, key, value] { c.flags[key] = value; }, help + " (" + key + "=" + value + ")");
}

// Defaults, then the config file, then PISCO_* variables, then flags.
RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config_file.empty()) cfg.load_file(c.config_file);
  cfg.apply_process_env();
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) fail(ErrorCode::config, "--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& [key, value] : c.flags) cfg.set(key, value);
  cfg.validate();
  return cfg;
}

std::string key_table() {
  std::string out = "\nConfig keys (file: key = value; environment: PISCO_<KEY>, e.g. PISCO_DISTILL_LR):\n";
  const RunConfig defaults;
  for (const auto& key : RunConfig::keys()) {
    std::string line = "  " + key;
    line.resize(std::max<std::size_t>(line.size() + 1, 28), ' ');
    out += line + std::string(RunConfig::help(key)) + " [" + defaults.get(key) + "]\n";
  }
  return out;
}

int exit_code(const Error& e) {
  switch (e.code()) {
    case ErrorCode::config:
      return 2;
    case ErrorCode::missing_artifact:
      return 3;
    default:
      return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Document compression for retrieval-augmented generation: data, training, evaluation."};
  app.footer(key_table());
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("gen-data", "generate synthetic worlds, chunk, index and retrieve");
  add_common(gen, common);
  key_option(gen, common, "--entities", "data.entities");
  key_option(gen, common, "-k,--k", "data.k");

  auto* teacher = app.add_subcommand("train-teacher", "train the uncompressed teacher and label the training set");
  add_common(teacher, common);

  auto* pre = app.add_subcommand("pretrain", "pretrain compressor and decoder adapters on auto-encoding tasks");
  add_common(pre, common);
  key_option(pre, common, "--name", "pretrain.name");
  key_option(pre, common, "--mixture", "pretrain.mixture");
  key_option(pre, common, "--steps", "pretrain.steps");
  key_option(pre, common, "--l", "compress.l");

  auto* dist = app.add_subcommand("distill", "train a compression model on teacher labels");
  add_common(dist, common);
  key_option(dist, common, "--name", "distill.name");
  key_option(dist, common, "--l", "compress.l");
  key_option(dist, common, "--init", "distill.init");
  key_option(dist, common, "--epochs", "distill.epochs");
  key_flag(dist, common, "--frozen-decoder", "distill.frozen_decoder", "true", "keep decoder adapters fixed");

  auto* sft = app.add_subcommand("sft-raw", "train a compression model on bare gold answers");
  add_common(sft, common);
  key_option(sft, common, "--name", "sft.name");
  key_option(sft, common, "--l", "compress.l");
  key_option(sft, common, "--init", "distill.init");
  key_option(sft, common, "--epochs", "distill.epochs");

  auto* comp = app.add_subcommand("compress", "compress the corpus once into an embedding store");
  add_common(comp, common);
  key_option(comp, common, "-m,--model", "eval.model");

  auto* ev = app.add_subcommand("eval", "score held-out questions");
  add_common(ev, common);
  key_option(ev, common, "-m,--model", "eval.model");
  key_option(ev, common, "--limit", "eval.limit");
  key_flag(ev, common, "--no-compress", "eval.model", "teacher", "evaluate the uncompressed teacher");
  key_flag(ev, common, "--no-store", "eval.use_store", "false", "compress documents on the fly");

  auto* nih = app.add_subcommand("nih", "needle-in-a-haystack grid");
  add_common(nih, common);
  key_option(nih, common, "-m,--model", "eval.model");
  key_option(nih, common, "--trials", "nih.trials");
  key_flag(nih, common, "--no-compress", "eval.model", "teacher", "evaluate the uncompressed teacher");

  auto* an = app.add_subcommand("analyze", "cosine maps, logit lens and 2-D projection of compressed documents");
  add_common(an, common);
  key_option(an, common, "-m,--model", "eval.model");
  key_option(an, common, "--docs", "analysis.docs");

  auto* bench = app.add_subcommand("bench", "FLOPs, latency and batch capacity, compressed against uncompressed");
  add_common(bench, common);
  key_option(bench, common, "-m,--model", "eval.model");
  key_option(bench, common, "--repetitions", "bench.repetitions");

  auto* show = app.add_subcommand("config", "print the resolved config and its hash");
  add_common(show, common);

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig cfg = resolve(common);
    spdlog::set_pattern("[%H:%M:%S] %v");
    if (common.quiet) spdlog::set_level(spdlog::level::warn);
    Pipeline p(cfg, [](std::string_view msg) { spdlog::info("{}", msg); });
    p.force = common.force;

    if (show->parsed()) {
      std::cout << cfg.serialize() << "# hash " << cfg.hash() << "\n";
    } else if (gen->parsed()) {
      const Manifest m = p.gen_data();
      spdlog::info("{} chunks, {} questions ({} held out), top-1 retrieval {:.3f}", m.metrics.at("chunks"),
                   m.metrics.at("questions"), m.metrics.at("test_questions"), m.metrics.at("retrieval_top1"));
    } else if (teacher->parsed()) {
      const Manifest m = p.train_teacher();
      spdlog::info("teacher eval loss {:.4f}, label match on training questions {:.3f}",
                   m.metrics.at("final_eval_loss"), m.metrics.at("label_train_match"));
    } else if (pre->parsed()) {
      const Manifest m = p.pretrain();
      for (const auto& [k, v] : m.metrics) spdlog::info("{} {:.4f}", k, v);
    } else if (dist->parsed()) {
      const Manifest m = p.distill();
      spdlog::info("eval loss {:.4f} -> {:.4f}", m.metrics.at("initial_eval_loss"), m.metrics.at("final_eval_loss"));
    } else if (sft->parsed()) {
      const Manifest m = p.sft_raw();
      spdlog::info("eval loss {:.4f} -> {:.4f}", m.metrics.at("initial_eval_loss"), m.metrics.at("final_eval_loss"));
    } else if (comp->parsed()) {
      const Manifest m = p.compress();
      spdlog::info("{} documents in {}", m.metrics.at("documents"), p.store_path(cfg.model).string());
    } else if (ev->parsed()) {
      const EvalResult r = p.eval();
      std::cout << cfg.model << " match " << r.summary.match << " f1 " << r.summary.f1 << " recall "
                << r.summary.recall << " recall3gram " << r.summary.recall3gram << " n " << r.summary.count << "\n";
    } else if (nih->parsed()) {
      const NIHGrid g = p.nih();
      for (std::size_t s = 0; s < g.context_sizes.size(); ++s) {
        std::cout << g.context_sizes[s] << " docs:";
        for (std::size_t d = 0; d < g.depths.size(); ++d) std::cout << ' ' << g.at(s, d);
        std::cout << '\n';
      }
      std::cout << "mean " << g.mean() << '\n';
    } else if (an->parsed()) {
      const AnalysisResult r = p.analyze();
      std::cout << "spatial spearman " << r.spatial.spearman << "\nlens coverage " << r.lens_coverage
                << "\ncentroid distance " << r.separation.centroid_distance << " token spread "
                << r.separation.token_spread << '\n';
    } else if (bench->parsed()) {
      const EfficiencyReport r = p.bench();
      std::cout << "flops ratio " << r.flops_ratio() << "\ntime ratio " << r.time_ratio() << "\ncount mismatch "
                << r.count_mismatch() << "\nmax batch " << r.uncompressed.max_batch << " -> "
                << r.compressed.max_batch << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "pisco: " << to_string(e.code()) << ": " << e.what() << '\n';
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "pisco: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
