// Acceptance run: one PASS/FAIL line per criterion. Trained artifacts live in
// a run directory and are reused while their manifests are current, so a
// second invocation only re-scores.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "../oracles.hpp"
#include "outcome.hpp"
#include "pisco/pipeline.hpp"

namespace {

using namespace pisco;
namespace fs = std::filesystem;

std::string fixed(double v, int digits = 3) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

class Context {
 public:
  Context(RunConfig base, bool verbose) : base_(std::move(base)), verbose_(verbose) {}

  const RunConfig& base() const { return base_; }

  RunConfig variant(const std::map<std::string, std::string>& overrides) const {
    RunConfig c = base_;
    for (const auto& [k, v] : overrides) c.set(k, v);
    c.validate();
    return c;
  }

  Pipeline pipeline(const RunConfig& c) const {
    LogFn log;
    if (verbose_) log = [](std::string_view msg) { std::cerr << "  " << msg << '\n'; };
    return Pipeline(c, log);
  }

  // Trains everything a student eval needs and returns its metrics. A
  // current eval manifest is reused.
  std::map<std::string, double> eval_metrics(const RunConfig& c) const {
    Pipeline p = pipeline(c);
    p.gen_data();
    p.train_teacher();
    if (c.model != "teacher") {
      if (c.model == c.sft_name) {
        p.sft_raw();
      } else {
        if (!c.distill_init.empty()) p.pretrain();
        p.distill();
      }
      p.compress();
    }
    if (!p.up_to_date("eval", "eval_" + c.model)) p.eval();
    return Manifest::read(p.manifest_path("eval_" + c.model)).metrics;
  }

  std::map<std::string, double> nih_metrics(const RunConfig& c) const {
    eval_metrics(c);
    Pipeline p = pipeline(c);
    if (!p.up_to_date("nih", "nih_" + c.model)) p.nih();
    return Manifest::read(p.manifest_path("nih_" + c.model)).metrics;
  }

  Manifest manifest(const RunConfig& c, const std::string& name) const {
    return Manifest::read(pipeline(c).manifest_path(name));
  }

  RunConfig teacher() const { return variant({{"eval.model", "teacher"}}); }
  RunConfig skd() const { return variant({{"eval.model", base_.distill_name}}); }
  RunConfig sft() const { return variant({{"eval.model", base_.sft_name}}); }
  RunConfig frozen() const {
    const std::string name = base_.distill_name + "_frozen";
    return variant({{"distill.name", name}, {"distill.frozen_decoder", "true"}, {"eval.model", name}});
  }
  RunConfig pretrained() const {
    const std::string name = base_.distill_name + "_pt";
    return variant({{"distill.name", name}, {"distill.init", base_.pretrain_name}, {"eval.model", name}});
  }

 private:
  RunConfig base_;
  bool verbose_;
};

Tensor graph_logits(Transformer& m, std::span<const TokenId> ids, LoraAdapterSet* lora) {
  Tape tape(false);
  GraphOptions go;
  go.adapters = lora;
  return m.forward(tape, m.embed_tokens(tape, ids), go).logits->value();
}

Outcome adapter_identity(const Context& ctx) {
  const Vocabulary vocab = build_vocabulary(ctx.base().synth_spec());
  Transformer model(ctx.base().model_config(vocab.size()), ctx.base().seed);
  std::mt19937_64 rng(ctx.base().seed + 17);
  std::uniform_int_distribution<TokenId> tok(0, static_cast<TokenId>(vocab.size() - 1));
  std::uniform_int_distribution<std::size_t> len(1, 64);
  double worst = 0;
  for (AdapterRole role : {AdapterRole::compressor, AdapterRole::decoder}) {
    LoraAdapterSet lora(role, model, ctx.base().lora_config(), ctx.base().seed + 3);
    for (int i = 0; i < 100; ++i) {
      std::vector<TokenId> ids(len(rng));
      for (auto& t : ids) t = tok(rng);
      const Tensor a = graph_logits(model, ids, nullptr);
      const Tensor b = graph_logits(model, ids, &lora);
      for (std::size_t j = 0; j < a.size(); ++j) worst = std::max(worst, std::abs(double(a[j]) - double(b[j])));
    }
  }
  return {worst <= 1e-6, "max |delta logit| " + sci(worst) + " over 100 inputs per adapter role"};
}

Outcome metric_oracles() {
  std::size_t mismatches = 0, checks = 0;
  for (const auto& c : oracle::random_cases(11, 200)) {
    const std::string pred = oracle::text(c.prediction);
    auto same = [&](bool ok) {
      ++checks;
      mismatches += ok ? 0 : 1;
    };
    same(normalize(pred) == oracle::normalize(c.prediction));
    same(match_accuracy(pred, c.label_text) == oracle::match(c.prediction, c.labels));
    same(token_f1(pred, c.label_text) == oracle::f1(c.prediction, c.labels));
    same(token_recall(pred, c.label_text) == oracle::recall(c.prediction, c.labels));
    same(recall_3gram(pred, c.label_text) == oracle::recall_3gram(c.prediction, c.labels));
  }
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> len(0, 14), tok(0, 5);
  std::size_t rouge_bad = 0;
  for (int i = 0; i < 200; ++i) {
    std::vector<TokenId> a(static_cast<std::size_t>(len(rng))), b(static_cast<std::size_t>(len(rng)));
    for (auto& t : a) t = tok(rng);
    for (auto& t : b) t = tok(rng);
    rouge_bad += rouge_l(a, b) == oracle::rouge_l(a, b) ? 0 : 1;
  }
  return {mismatches == 0 && rouge_bad == 0, std::to_string(mismatches) + "/" + std::to_string(checks) +
                                                 " metric mismatches, " + std::to_string(rouge_bad) +
                                                 "/200 Rouge-L mismatches against LCS"};
}

Outcome efficiency(const Context& ctx) {
  const Vocabulary vocab = build_vocabulary(ctx.base().synth_spec());
  const Transformer model(ctx.base().model_config(vocab.size()), ctx.base().seed);
  const InferenceWeights weights(model);
  BenchConfig bc = ctx.base().bench_config();
  bc.k = 5;
  bc.doc_tokens = 128;
  bc.l = 8;
  bc.query_tokens = 128;
  bc.answer_tokens = 32;
  const EfficiencyReport r =
      latency_bench(weights, weights, CompiledPrompt::compile(PromptTemplate{}, vocab), bc);
  const bool pass = r.flops_ratio() >= 3.0 && r.count_mismatch() <= 0.02 && r.time_ratio() > 1.5;
  return {pass, "FLOPs ratio " + fixed(r.flops_ratio(), 2) + ", count mismatch " + fixed(r.count_mismatch(), 5) +
                    ", time ratio " + fixed(r.time_ratio(), 2) + ", max batch " +
                    std::to_string(r.uncompressed.max_batch) + " -> " + std::to_string(r.compressed.max_batch)};
}

Outcome teacher_and_student(const Context& ctx) {
  const auto teacher = ctx.eval_metrics(ctx.teacher());
  const auto student = ctx.eval_metrics(ctx.skd());
  double seconds = 0;
  const std::string skd = ctx.base().distill_name;
  for (const std::string& name :
       std::vector<std::string>{"data", "teacher", skd, "store_" + skd, "eval_teacher", "eval_" + skd}) {
    seconds += ctx.manifest(ctx.base(), name).seconds;
  }
  const double t = teacher.at("match"), s = student.at("match");
  const bool pass = t >= 0.95 && s >= t - 0.10 && seconds <= 4 * 3600.0;
  return {pass, "teacher match " + fixed(t) + " (k=" + std::to_string(ctx.base().k) + "), student l=" +
                    std::to_string(ctx.base().l) + " match " + fixed(s) + ", CPU time " + fixed(seconds / 3600, 2) +
                    " h"};
}

Outcome autoencoding(const Context& ctx) {
  const RunConfig c = ctx.variant({{"pretrain.mixture", "ae"}});
  Pipeline p = ctx.pipeline(c);
  p.gen_data();
  p.train_teacher();
  const Manifest m = p.pretrain();
  double tokens = 0;
  const auto docs = p.heldout_documents();
  for (const auto& d : docs) tokens += static_cast<double>(d.tokens.size());
  const double rate = tokens / static_cast<double>(docs.size()) / static_cast<double>(c.l);
  const double rouge = m.metrics.at("rouge_l_ae");
  return {rouge >= 0.9, "held-out Rouge-L " + fixed(rouge) + " at l=" + std::to_string(c.l) +
                            " (128-token chunks; mean held-out document rate " + fixed(rate, 1) + ")"};
}

Outcome skd_vs_sft(const Context& ctx) {
  const auto skd = ctx.nih_metrics(ctx.skd());
  const auto sft = ctx.nih_metrics(ctx.sft());
  const double skd_acc = ctx.eval_metrics(ctx.skd()).at("match");
  const double sft_acc = ctx.eval_metrics(ctx.sft()).at("match");
  const bool pass = skd.at("mean") >= sft.at("mean") && skd_acc >= sft_acc;
  return {pass, "NIH mean " + fixed(skd.at("mean")) + " vs " + fixed(sft.at("mean")) + ", held-out match " +
                    fixed(skd_acc) + " vs " + fixed(sft_acc)};
}

Outcome frozen_decoder(const Context& ctx) {
  const double full_acc = ctx.eval_metrics(ctx.skd()).at("match");
  const double frozen_acc = ctx.eval_metrics(ctx.frozen()).at("match");
  const double full_loss = ctx.manifest(ctx.base(), ctx.base().distill_name).metrics.at("final_eval_loss");
  const double frozen_loss = ctx.manifest(ctx.base(), ctx.frozen().distill_name).metrics.at("final_eval_loss");
  const bool pass = frozen_loss > full_loss && frozen_acc < full_acc;
  return {pass, "eval loss frozen " + fixed(frozen_loss, 4) + " vs full " + fixed(full_loss, 4) + ", match " +
                    fixed(frozen_acc) + " vs " + fixed(full_acc)};
}

Outcome embedding_analyses(const Context& ctx) {
  const RunConfig c = ctx.skd();
  ctx.eval_metrics(c);
  Pipeline p = ctx.pipeline(c);
  const AnalysisResult a = p.analyze();
  const PiscoModel model = p.load_student(c.model);

  // Logit lens on two independently merged runtimes.
  bool deterministic = true;
  const StudentRuntime r1(model), r2(model);
  const auto docs = p.heldout_documents();
  for (std::size_t i = 0; i < std::min<std::size_t>(8, docs.size()); ++i) {
    const LensAttribution x = lens_topk(r1.compress(docs[i].id, docs[i].tokens).vectors, model.base.head().value);
    const LensAttribution y = lens_topk(r2.compress(docs[i].id, docs[i].tokens).vectors, model.base.head().value);
    for (std::size_t s = 0; s < x.top.size(); ++s) {
      for (std::size_t j = 0; j < x.top[s].size(); ++j) {
        deterministic = deterministic && x.top[s][j].token == y.top[s][j].token && x.top[s][j].logit == y.top[s][j].logit;
      }
    }
  }

  // Every input embedding through the tied head.
  const Tensor& table = model.base.token_embedding().value;
  Tensor scaled = table;
  for (auto& v : scaled.values()) v = static_cast<Scalar>(v * model.base.embedding_scale());
  const LensAttribution self = lens_topk(scaled, model.base.head().value, 1);
  std::size_t first = 0;
  for (std::size_t t = 0; t < self.top.size(); ++t) first += self.top[t][0].token == static_cast<TokenId>(t) ? 1 : 0;

  const bool pass = deterministic && first == self.top.size() && a.spatial.spearman > 0 &&
                    std::isfinite(a.separation.centroid_distance) && std::isfinite(a.separation.token_spread);
  return {pass, std::string("lens ") + (deterministic ? "deterministic" : "NOT deterministic") + ", self-rank first " +
                    std::to_string(first) + "/" + std::to_string(self.top.size()) + ", spatial Spearman " +
                    fixed(a.spatial.spearman) + ", centroid distance " + fixed(a.separation.centroid_distance) +
                    " vs token spread " + fixed(a.separation.token_spread) + " (" +
                    (a.separation.outside() ? "outside" : "inside") + ")"};
}

Outcome pretraining_transfer(const Context& ctx) {
  const RunConfig pc = ctx.pretrained();
  const double with = ctx.eval_metrics(pc).at("match");
  const double without = ctx.eval_metrics(ctx.skd()).at("match");
  const Manifest pre = ctx.manifest(pc, pc.distill_init);
  Pipeline p = ctx.pipeline(pc);
  const fs::path csv = p.report_dir() / "pretrain_transfer.csv";
  fs::create_directories(csv.parent_path());
  std::ofstream out(csv, std::ios::trunc);
  out << "# config_hash " << pre.config_hash << "\nmodel,mixture,task,rouge_l,downstream_match\n";
  std::string tasks;
  for (const auto& [key, value] : pre.metrics) {
    if (key.rfind("rouge_l_", 0) != 0) continue;
    out << pc.model << ',' << pc.mixture << ',' << key.substr(8) << ',' << value << ',' << with << '\n';
    tasks += " " + key.substr(8) + "=" + fixed(value);
  }
  out << ctx.base().distill_name << ",none,,," << without << '\n';
  const double gap = std::abs(with - without);
  return {gap <= 0.02, "match with pretraining " + fixed(with) + ", without " + fixed(without) + ", gap " +
                           fixed(gap) + "; pretraining Rouge-L" + tasks + " (" + csv.string() + ")"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks, one line per criterion."};
  std::string run_dir = "acceptance_run", config_file;
  std::vector<int> only;
  bool verbose = false;
  app.add_option("--run-dir", run_dir, "artifact directory, reused between runs");
  app.add_option("-c,--config", config_file, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--only", only, "criteria to run (default all)")->check(CLI::Range(1, 10));
  app.add_flag("-v,--verbose", verbose, "log pipeline progress to stderr");
  CLI11_PARSE(app, argc, argv);

  std::unique_ptr<Context> ctx;
  try {
    RunConfig cfg;
    if (!config_file.empty()) cfg.load_file(config_file);
    cfg.apply_process_env();
    cfg.run_dir = run_dir;
    cfg.validate();
    ctx = std::make_unique<Context>(cfg, verbose);
  } catch (const std::exception& e) {
    std::cerr << "acceptance: " << e.what() << '\n';
    return 2;
  }

  const std::vector<std::function<Outcome()>> criteria{
      [] { return gradient_criterion(); },
      [&] { return adapter_identity(*ctx); },
      [] { return metric_oracles(); },
      [&] { return efficiency(*ctx); },
      [&] { return teacher_and_student(*ctx); },
      [&] { return autoencoding(*ctx); },
      [&] { return skd_vs_sft(*ctx); },
      [&] { return frozen_decoder(*ctx); },
      [&] { return embedding_analyses(*ctx); },
      [&] { return pretraining_transfer(*ctx); },
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(n)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i]();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << "  [" << fixed(s, 1)
              << " s]" << std::endl;
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
