#include "pisco/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "pisco/error.hpp"

namespace pisco {
inline namespace PISCO_ABI {

std::vector<Attribute> SynthSpec::default_attributes() {
  return {
      {"color", {"red", "blue", "green", "yellow", "purple", "orange", "black", "white", "gray", "pink"}},
      {"shape", {"round", "square", "flat", "long", "oval", "curved", "pointed", "hollow", "narrow", "wide"}},
      {"material", {"wood", "steel", "glass", "stone", "paper", "cotton", "clay", "silver", "copper", "plastic"}},
      {"city", {"paris", "rome", "oslo", "lima", "cairo", "delhi", "tokyo", "quito", "dakar", "hanoi"}},
      {"owner", {"alice", "bruno", "chen", "dana", "emil", "farah", "goran", "hana", "ivan", "julia"}},
  };
}

void SynthSpec::validate() const {
  if (entity_count == 0) fail(ErrorCode::config, "synth spec: entity_count must be positive");
  if (attributes.empty()) fail(ErrorCode::config, "synth spec: no attributes");
  for (const auto& a : attributes) {
    if (a.values.empty()) fail(ErrorCode::config, "synth spec: attribute " + a.name + " has no values");
  }
  if (filler_rate < 0) fail(ErrorCode::config, "synth spec: filler_rate must be non-negative");
  if (multi_hop_fraction < 0 || multi_hop_fraction > 1) {
    fail(ErrorCode::config, "synth spec: multi_hop_fraction must lie in [0, 1]");
  }
  if (multi_hop_fraction > 0 && entity_count < 2) {
    fail(ErrorCode::config, "synth spec: multi-hop questions need at least two entities");
  }
  if (test_fraction < 0 || test_fraction > 1) fail(ErrorCode::config, "synth spec: test_fraction must lie in [0, 1]");
  // Longest possible article: every fact plus the partner sentence.
  const std::size_t needed = 7 * (attributes.size() + (multi_hop_fraction > 0 ? 1 : 0));
  if (doc_max_tokens < needed) {
    fail(ErrorCode::config, "synth spec: doc_max_tokens " + std::to_string(doc_max_tokens) + " cannot hold " +
                                std::to_string(needed) + " fact tokens");
  }
}

std::string entity_name(std::size_t i) { return "obj" + std::to_string(i); }

std::string fact_sentence(const std::string& attribute, const std::string& entity, const std::string& value) {
  return "the " + attribute + " of " + entity + " is " + value + " .";
}

std::string question_text(const std::string& attribute, const std::string& entity) {
  return "what is the " + attribute + " of " + entity + " ?";
}

std::string answer_sentence(const std::string& attribute, const std::string& entity, const std::string& value) {
  return "the " + attribute + " of " + entity + " is " + value;
}

const std::vector<std::string>& filler_sentences() {
  static const std::vector<std::string> pool{
      "it was seen in many places over the years .",
      "nobody could remember when it first appeared .",
      "people often talked about it during long winters .",
      "some reports describe it in great detail .",
      "a few visitors wrote letters about it .",
      "it was mentioned once in an old book .",
      "many questions remain open to this day .",
      "local guides still tell stories about it .",
      "it rarely changed hands in recent times .",
      "experts disagree on most of its history .",
      "it appears in several museum records .",
      "children sometimes drew pictures of it .",
      "the archive keeps a short note on it .",
      "travelers noticed it on their way north .",
      "it survived two floods and a fire .",
      "its story was told at the market .",
  };
  return pool;
}

namespace {

std::size_t token_count(const std::string& s) { return split_whitespace(s).size(); }

std::string join(const std::vector<std::string>& sentences) {
  std::string out;
  for (const auto& s : sentences) {
    if (!out.empty()) out += ' ';
    out += s;
  }
  return out;
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

std::size_t filler_count(double rate, std::size_t facts, std::mt19937_64& rng) {
  const double expected = rate * static_cast<double>(facts);
  const double whole = std::floor(expected);
  std::bernoulli_distribution extra(expected - whole);
  return static_cast<std::size_t>(whole) + (extra(rng) ? 1 : 0);
}

}  // namespace

SyntheticWorld gen_synthetic(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  SyntheticWorld world;
  const std::size_t n_attr = spec.attributes.size();
  for (std::size_t e = 0; e < spec.entity_count; ++e) world.entities.push_back(entity_name(e));
  for (std::size_t e = 0; e < spec.entity_count; ++e) {
    for (std::size_t a = 0; a < n_attr; ++a) {
      world.facts.push_back(Fact{e, a, uniform_index(rng, spec.attributes[a].values.size())});
    }
  }
  const bool multi_hop = spec.multi_hop_fraction > 0;
  if (multi_hop) {
    for (std::size_t e = 0; e < spec.entity_count; ++e) {
      std::size_t p = uniform_index(rng, spec.entity_count - 1);
      if (p >= e) ++p;
      world.partners.push_back(p);
    }
  }

  const auto& pool = filler_sentences();
  for (std::size_t e = 0; e < spec.entity_count; ++e) {
    std::vector<std::string> facts;
    for (std::size_t a = 0; a < n_attr; ++a) {
      const Fact& f = world.facts[e * n_attr + a];
      facts.push_back(fact_sentence(spec.attributes[a].name, world.entities[e], spec.attributes[a].values[f.value]));
    }
    if (multi_hop) facts.push_back(fact_sentence("partner", world.entities[e], world.entities[world.partners[e]]));
    std::shuffle(facts.begin(), facts.end(), rng);
    std::size_t used = 0;
    for (const auto& s : facts) used += token_count(s);
    std::vector<std::string> filler;
    const std::size_t want = filler_count(spec.filler_rate, facts.size(), rng);
    for (std::size_t i = 0; i < want; ++i) {
      const std::string& s = pool[uniform_index(rng, pool.size())];
      if (used + token_count(s) > spec.doc_max_tokens) break;
      used += token_count(s);
      filler.push_back(s);
    }
    // Interleave: each filler sentence goes into a random gap.
    std::vector<std::string> sentences = facts;
    for (const auto& s : filler) {
      const std::size_t at = uniform_index(rng, sentences.size() + 1);
      sentences.insert(sentences.begin() + static_cast<std::ptrdiff_t>(at), s);
    }
    world.documents.push_back(join(sentences));
  }

  std::vector<QAPair> single;
  for (const Fact& f : world.facts) {
    const Attribute& attr = spec.attributes[f.attribute];
    QAPair qa;
    qa.question = question_text(attr.name, world.entities[f.entity]);
    qa.answers = {attr.values[f.value]};
    qa.long_answer = answer_sentence(attr.name, world.entities[f.entity], attr.values[f.value]);
    qa.gold_docs = {f.entity};
    single.push_back(std::move(qa));
  }
  std::vector<QAPair> multi;
  if (multi_hop) {
    const auto count = static_cast<std::size_t>(std::llround(spec.multi_hop_fraction * static_cast<double>(single.size())));
    std::vector<std::size_t> order(world.facts.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t host = order[i] / n_attr;
      const Fact& f = world.facts[world.partners[host] * n_attr + order[i] % n_attr];
      const Attribute& attr = spec.attributes[f.attribute];
      const std::string subject = "the partner of " + world.entities[host];
      QAPair qa;
      qa.question = "what is the " + attr.name + " of " + subject + " ?";
      qa.answers = {attr.values[f.value]};
      qa.long_answer = "the " + attr.name + " of " + subject + " is " + attr.values[f.value];
      qa.gold_docs = {host, f.entity};
      qa.hops = 2;
      multi.push_back(std::move(qa));
    }
  }

  auto assign_split = [&](std::vector<QAPair>& set) {
    const auto n_test = static_cast<std::size_t>(std::llround(spec.test_fraction * static_cast<double>(set.size())));
    std::vector<std::size_t> order(set.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < n_test; ++i) set[order[i]].test = true;
  };
  assign_split(single);
  assign_split(multi);
  for (auto& qa : single) world.qa.push_back(std::move(qa));
  for (auto& qa : multi) world.qa.push_back(std::move(qa));
  for (std::size_t i = 0; i < world.qa.size(); ++i) world.qa[i].id = i;
  return world;
}

Vocabulary build_vocabulary(const SynthSpec& spec) {
  Vocabulary v;
  for (const char* w : {"the", "of", "is", ".", "what", "?", ":", "partner", "you", "are", "a", "helpful",
                        "assistant", "background", "question", "answer"}) {
    v.add(w);
  }
  for (const auto& a : spec.attributes) v.add(a.name);
  for (const auto& a : spec.attributes) {
    for (const auto& val : a.values) v.add(val);
  }
  for (const auto& s : filler_sentences()) {
    for (auto w : split_whitespace(s)) v.add(w);
  }
  for (std::size_t e = 0; e < spec.entity_count; ++e) v.add(entity_name(e));
  return v;
}

Haystack make_haystack(const SynthSpec& spec, std::size_t doc_count, double depth, std::uint64_t seed) {
  spec.validate();
  if (doc_count == 0) fail(ErrorCode::invalid_argument, "haystack needs at least one document");
  if (depth < 0 || depth > 1) fail(ErrorCode::invalid_argument, "needle depth must lie in [0, 1]");
  std::mt19937_64 rng(seed);
  const std::size_t entity = uniform_index(rng, spec.entity_count);
  const std::size_t attr_index = uniform_index(rng, spec.attributes.size());
  const Attribute& attr = spec.attributes[attr_index];
  const std::string value = attr.values[uniform_index(rng, attr.values.size())];
  const std::string needle = fact_sentence(attr.name, entity_name(entity), value);
  const std::size_t needle_len = token_count(needle);

  const auto& pool = filler_sentences();
  std::vector<std::vector<std::string>> docs(doc_count);
  std::size_t total = 0;
  for (auto& doc : docs) {
    std::size_t used = 0;
    while (true) {
      const std::string& s = pool[uniform_index(rng, pool.size())];
      if (used + token_count(s) + needle_len > spec.doc_max_tokens) break;
      used += token_count(s);
      doc.push_back(s);
    }
    total += used;
  }
  // Sentence boundary whose token offset is closest to the requested depth.
  const double target = depth * static_cast<double>(total);
  std::size_t best_doc = 0, best_pos = 0;
  double best_gap = std::numeric_limits<double>::infinity();
  std::size_t offset = 0;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    for (std::size_t i = 0; i <= docs[d].size(); ++i) {
      const double gap = std::abs(static_cast<double>(offset) - target);
      if (gap < best_gap) {
        best_gap = gap;
        best_doc = d;
        best_pos = i;
      }
      if (i < docs[d].size()) offset += token_count(docs[d][i]);
    }
  }
  docs[best_doc].insert(docs[best_doc].begin() + static_cast<std::ptrdiff_t>(best_pos), needle);

  Haystack h;
  for (const auto& d : docs) h.documents.push_back(join(d));
  h.needle_doc = best_doc;
  h.qa.question = question_text(attr.name, entity_name(entity));
  h.qa.answers = {value};
  h.qa.long_answer = answer_sentence(attr.name, entity_name(entity), value);
  h.qa.gold_docs = {best_doc};
  h.qa.test = true;
  return h;
}

}  // namespace PISCO_ABI
}  // namespace pisco
