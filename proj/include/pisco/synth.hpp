#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pisco/vocab.hpp"

namespace pisco {
inline namespace PISCO_ABI {

struct Attribute {
  std::string name;
  std::vector<std::string> values;
};

/// Parameters of the synthetic entity world.
struct SynthSpec {
  std::size_t entity_count = 200;
  std::vector<Attribute> attributes = default_attributes();
  /// Expected filler sentences per fact sentence.
  double filler_rate = 2.0;
  /// Multi-hop questions added, as a fraction of single-hop ones.
  double multi_hop_fraction = 0.0;
  /// Share of facts whose question goes to the test split.
  double test_fraction = 0.2;
  std::size_t doc_max_tokens = 128;
  std::uint64_t seed = 0;

  static std::vector<Attribute> default_attributes();
  void validate() const;
};

struct Fact {
  std::size_t entity = 0;
  std::size_t attribute = 0;
  std::size_t value = 0;
};

struct QAPair {
  std::size_t id = 0;
  std::string question;
  std::vector<std::string> answers;
  /// Teacher-style answer sentence used as the gold training target.
  std::string long_answer;
  std::vector<std::size_t> gold_docs;
  bool test = false;
  int hops = 1;
};

struct SyntheticWorld {
  std::vector<std::string> entities;
  std::vector<Fact> facts;                 // entity-major
  std::vector<std::size_t> partners;       // empty unless multi-hop
  std::vector<std::string> documents;      // one article per entity
  std::vector<QAPair> qa;
};

SyntheticWorld gen_synthetic(const SynthSpec& spec);

/// Every word the generator and prompt templates can emit, in a fixed order.
Vocabulary build_vocabulary(const SynthSpec& spec);

std::string entity_name(std::size_t i);
std::string fact_sentence(const std::string& attribute, const std::string& entity, const std::string& value);
std::string question_text(const std::string& attribute, const std::string& entity);
std::string answer_sentence(const std::string& attribute, const std::string& entity, const std::string& value);
/// Sentences that carry no facts.
const std::vector<std::string>& filler_sentences();

/// A filler-only passage with one fact sentence placed at a relative token
/// depth in [0, 1].
struct Haystack {
  std::vector<std::string> documents;  // each <= doc_max_tokens tokens
  std::size_t needle_doc = 0;
  QAPair qa;
};

Haystack make_haystack(const SynthSpec& spec, std::size_t doc_count, double depth, std::uint64_t seed);

}  // namespace PISCO_ABI
}  // namespace pisco
