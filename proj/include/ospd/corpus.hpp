#pragma once

#include <string>
#include <vector>

#include "ospd/obfuscation.hpp"

namespace ospd {

/// One enumerable sensitive category of the synthetic corpus. Every corpus
/// sentence is prefix + member + suffix.
struct Category {
  std::string name;
  TokenSeq prefix;
  std::vector<TokenSeq> members;
  TokenSeq suffix;

  /// prefix + members[i] + suffix, with the member span tagged.
  TaggedPrompt prompt(std::size_t i) const;
};

/// Small corpus with enumerable categories: `date` (12 months x 30 days, every
/// date equally frequent), `city` (40 names, Zipf counts) and `age` (18..90,
/// peaked counts).
struct SyntheticCorpus {
  Vocab vocab;
  std::vector<TokenSeq> sentences;
  std::vector<Category> categories;
  std::string text;   // one sentence per line
  std::string rules;  // tag rules covering every category

  const Category& category(const std::string& name) const;
  /// Vocabulary size plus one slot for EOS, so a model can cover the corpus.
  int model_vocab() const { return vocab.size() + 1; }
};

SyntheticCorpus synthetic_corpus();

}  // namespace ospd
