#include "ospd/corpus.hpp"

#include <cmath>
#include <sstream>

namespace ospd {

namespace {

const char* const kMonths[] = {"jan", "feb", "mar", "apr", "may", "jun",
                               "jul", "aug", "sep", "oct", "nov", "dec"};

struct Draft {
  std::string name;
  std::string prefix;
  std::vector<std::string> members;
  std::vector<int> counts;
  std::string suffix;
};

std::vector<Draft> drafts() {
  std::vector<Draft> out;

  Draft date{"date", "patient seen on", {}, {}, "for checkup ."};
  for (const char* month : kMonths) {
    for (int day = 1; day <= 30; ++day) {
      date.members.push_back(std::string(month) + " " + std::to_string(day));
      date.counts.push_back(2);
    }
  }
  out.push_back(std::move(date));

  Draft city{"city", "patient lives in", {}, {}, "."};
  for (int i = 0; i < 40; ++i) {
    city.members.push_back("city" + std::to_string(i));
    city.counts.push_back(static_cast<int>(std::ceil(120.0 / (i + 1))));
  }
  out.push_back(std::move(city));

  Draft age{"age", "patient aged", {}, {}, "years ."};
  for (int a = 18; a <= 90; ++a) {
    age.members.push_back(std::to_string(a));
    const double z = (a - 45) / 12.0;
    age.counts.push_back(1 + static_cast<int>(std::lround(40.0 * std::exp(-0.5 * z * z))));
  }
  out.push_back(std::move(age));
  return out;
}

}  // namespace

TaggedPrompt Category::prompt(std::size_t i) const {
  TaggedPrompt p;
  p.tokens = prefix;
  p.tokens.insert(p.tokens.end(), members.at(i).begin(), members.at(i).end());
  p.tokens.insert(p.tokens.end(), suffix.begin(), suffix.end());
  p.spans.push_back({prefix.size(), members.at(i).size(), name});
  return p;
}

const Category& SyntheticCorpus::category(const std::string& name) const {
  for (const auto& c : categories) {
    if (c.name == name) return c;
  }
  throw CorpusError("no category " + name);
}

SyntheticCorpus synthetic_corpus() {
  SyntheticCorpus corpus;
  std::ostringstream text;
  const auto all = drafts();
  for (const auto& d : all) {
    for (std::size_t i = 0; i < d.members.size(); ++i) {
      for (int c = 0; c < d.counts[i]; ++c) text << d.prefix << ' ' << d.members[i] << ' ' << d.suffix << '\n';
    }
  }
  corpus.text = text.str();
  corpus.sentences = tokenize_corpus(corpus.text, corpus.vocab);
  for (const auto& d : all) {
    Category cat{d.name, corpus.vocab.encode(d.prefix), {}, corpus.vocab.encode(d.suffix)};
    for (const auto& m : d.members) cat.members.push_back(corpus.vocab.encode(m));
    corpus.categories.push_back(std::move(cat));
  }

  std::string months;
  for (const char* m : kMonths) months += (months.empty() ? "" : "|") + std::string(m);
  corpus.rules = "month\t/(" + months + ")/\nday\t/([1-9]|[12][0-9]|30)/\n";
  return corpus;
}

}  // namespace ospd
