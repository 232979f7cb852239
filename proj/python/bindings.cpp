#include <iostream>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "pisco/pipeline.hpp"

namespace py = pybind11;
using namespace pisco;

namespace {

py::dict manifest_dict(const Manifest& m) {
  py::dict d;
  d["stage"] = m.stage;
  d["name"] = m.name;
  d["config_hash"] = m.config_hash;
  d["code_version"] = m.code_version;
  d["seed"] = m.seed;
  d["inputs"] = m.inputs;
  d["metrics"] = m.metrics;
  d["seconds"] = m.seconds;
  return d;
}

py::dict summary_dict(const MetricSummary& s) {
  py::dict d;
  d["count"] = s.count;
  d["match"] = s.match;
  d["f1"] = s.f1;
  d["recall"] = s.recall;
  d["recall3gram"] = s.recall3gram;
  return d;
}

// Runs a long C++ call without the GIL; the result is converted after it
// is reacquired.
template <typename F>
auto released(F f) {
  py::gil_scoped_release r;
  return f();
}

std::vector<std::string> labels_of(const py::object& labels) {
  if (py::isinstance<py::str>(labels)) return {labels.cast<std::string>()};
  return labels.cast<std::vector<std::string>>();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the pisco compression library.";

  static py::exception<Error> error(m, "PiscoError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, (std::string(to_string(e.code())) + ": " + e.what()).c_str());
    }
  });

  m.def("version", [] { return std::string(code_version()); });

  m.def("normalize", [](const std::string& s) { return normalize(s); }, py::arg("text"));
  m.def(
      "match_accuracy", [](const std::string& p, const py::object& l) { return match_accuracy(p, labels_of(l)); },
      py::arg("prediction"), py::arg("labels"));
  m.def(
      "token_f1", [](const std::string& p, const py::object& l) { return token_f1(p, labels_of(l)); },
      py::arg("prediction"), py::arg("labels"));
  m.def(
      "token_recall", [](const std::string& p, const py::object& l) { return token_recall(p, labels_of(l)); },
      py::arg("prediction"), py::arg("labels"));
  m.def(
      "recall_3gram", [](const std::string& p, const py::object& l) { return recall_3gram(p, labels_of(l)); },
      py::arg("prediction"), py::arg("labels"));
  m.def(
      "rouge_l", [](const std::string& p, const std::string& r) { return rouge_l(std::string_view(p), std::string_view(r)); },
      py::arg("prediction"), py::arg("reference"));

  py::class_<SyntheticWorld>(m, "SyntheticWorld")
      .def_readonly("entities", &SyntheticWorld::entities)
      .def_readonly("documents", &SyntheticWorld::documents)
      .def_property_readonly("questions", [](const SyntheticWorld& w) {
        py::list out;
        for (const auto& q : w.qa) {
          py::dict d;
          d["id"] = q.id;
          d["question"] = q.question;
          d["answers"] = q.answers;
          d["long_answer"] = q.long_answer;
          d["gold_docs"] = q.gold_docs;
          d["test"] = q.test;
          out.append(d);
        }
        return out;
      });
  m.def(
      "gen_synthetic",
      [](std::size_t entities, std::uint64_t seed) {
        SynthSpec s;
        s.entity_count = entities;
        s.seed = seed;
        return gen_synthetic(s);
      },
      py::arg("entities") = 200, py::arg("seed") = 0);

  py::class_<Vocabulary>(m, "Vocabulary")
      .def("__len__", &Vocabulary::size)
      .def("tokenize", [](const Vocabulary& v, const std::string& s) { return v.tokenize(s); })
      .def("detokenize", [](const Vocabulary& v, const std::vector<TokenId>& ids) { return v.detokenize(ids); });
  m.def(
      "synthetic_vocabulary",
      [](std::size_t entities) {
        SynthSpec s;
        s.entity_count = entities;
        return build_vocabulary(s);
      },
      py::arg("entities") = 200);

  m.def(
      "bm25_retrieve",
      [](const std::vector<std::string>& docs, const std::string& query, std::size_t k, const Vocabulary& vocab) {
        const auto chunks = chunk_corpus(docs, vocab);
        const Bm25Index index(chunks);
        std::vector<std::pair<std::size_t, double>> out;
        for (const auto& hit : index.retrieve(vocab.tokenize(query), k)) out.emplace_back(hit.doc_id, hit.score);
        return out;
      },
      py::arg("documents"), py::arg("query"), py::arg("k"), py::arg("vocab"),
      "Top-k (chunk id, score) pairs. Documents longer than 128 tokens are chunked first.");

  m.def(
      "flops",
      [](std::size_t layers, std::size_t d_model, std::size_t d_ff, std::size_t vocab, std::size_t tokens,
         std::size_t embeddings, std::size_t answer) {
        ModelConfig c;
        c.n_layers = layers;
        c.d_model = d_model;
        c.d_ff = d_ff;
        c.vocab_size = vocab;
        return flops_count(c, {tokens, embeddings}, answer).flops();
      },
      py::arg("layers"), py::arg("d_model"), py::arg("d_ff"), py::arg("vocab"), py::arg("prompt_tokens"),
      py::arg("prompt_embeddings"), py::arg("answer_tokens"));

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def(py::init([](const py::kwargs& kw) {
        RunConfig c;
        for (const auto& [k, v] : kw) c.set(py::str(k).cast<std::string>(), py::str(v).cast<std::string>());
        return c;
      }))
      .def("set", [](RunConfig& c, const std::string& k, const py::object& v) { c.set(k, py::str(v).cast<std::string>()); })
      .def("get", &RunConfig::get)
      .def("load_file", &RunConfig::load_file)
      .def("validate", &RunConfig::validate)
      .def("serialize", &RunConfig::serialize)
      .def("hash", py::overload_cast<>(&RunConfig::hash, py::const_))
      .def_static("keys", &RunConfig::keys)
      .def_static("help", [](const std::string& k) { return std::string(RunConfig::help(k)); })
      .def("__getitem__", &RunConfig::get)
      .def("__setitem__", [](RunConfig& c, const std::string& k, const py::object& v) {
        c.set(k, py::str(v).cast<std::string>());
      });

  py::class_<Pipeline>(m, "Pipeline")
      .def(py::init([](const RunConfig& c, bool verbose) {
             LogFn log;
             if (verbose) log = [](std::string_view msg) { std::cerr << msg << '\n'; };
             return std::make_unique<Pipeline>(c, log);
           }),
           py::arg("config"), py::arg("verbose") = false)
      .def_readwrite("force", &Pipeline::force)
      .def_property_readonly("config", &Pipeline::config)
      .def("gen_data", [](Pipeline& p) { return manifest_dict(released([&] { return p.gen_data(); })); })
      .def("train_teacher", [](Pipeline& p) { return manifest_dict(released([&] { return p.train_teacher(); })); })
      .def("pretrain", [](Pipeline& p) { return manifest_dict(released([&] { return p.pretrain(); })); })
      .def("distill", [](Pipeline& p) { return manifest_dict(released([&] { return p.distill(); })); })
      .def("sft_raw", [](Pipeline& p) { return manifest_dict(released([&] { return p.sft_raw(); })); })
      .def("compress", [](Pipeline& p) { return manifest_dict(released([&] { return p.compress(); })); })
      .def("eval", [](Pipeline& p) {
        return summary_dict(released([&] { return p.eval(); }).summary);
      })
      .def("nih", [](Pipeline& p) {
        const NIHGrid g = released([&] { return p.nih(); });
        py::dict d;
        d["context_sizes"] = g.context_sizes;
        d["depths"] = g.depths;
        d["accuracy"] = g.accuracy;
        d["mean"] = g.mean();
        return d;
      })
      .def("analyze", [](Pipeline& p) {
        const AnalysisResult a = released([&] { return p.analyze(); });
        py::dict d;
        d["spatial_spearman"] = a.spatial.spearman;
        d["mean_peak"] = a.spatial.mean_peak;
        d["lens_coverage"] = a.lens_coverage;
        d["centroid_distance"] = a.separation.centroid_distance;
        d["token_spread"] = a.separation.token_spread;
        d["docs"] = a.docs;
        return d;
      })
      .def("bench", [](Pipeline& p) {
        const EfficiencyReport e = released([&] { return p.bench(); });
        py::dict d;
        d["flops_ratio"] = e.flops_ratio();
        d["time_ratio"] = e.time_ratio();
        d["count_mismatch"] = e.count_mismatch();
        d["max_batch_uncompressed"] = e.uncompressed.max_batch;
        d["max_batch_compressed"] = e.compressed.max_batch;
        return d;
      });
}
