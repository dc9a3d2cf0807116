#include <algorithm>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "minidistill/data.hpp"

namespace minidistill {
namespace {

struct Inflected {
  const char* singular;
  const char* plural;
};

// Subjects are animate; objects and places come from every noun class.
const std::vector<Inflected> kAnimals = {
    {"dog", "dogs"},     {"cat", "cats"},       {"horse", "horses"}, {"bird", "birds"},
    {"fox", "foxes"},    {"wolf", "wolves"},    {"mouse", "mice"},   {"rabbit", "rabbits"},
    {"sheep", "sheep"},  {"goat", "goats"},     {"bear", "bears"},   {"duck", "ducks"}};
const std::vector<Inflected> kPeople = {
    {"farmer", "farmers"},   {"child", "children"}, {"teacher", "teachers"}, {"doctor", "doctors"},
    {"singer", "singers"},   {"baker", "bakers"},   {"pilot", "pilots"},     {"student", "students"},
    {"king", "kings"},       {"queen", "queens"},   {"sailor", "sailors"},   {"painter", "painters"}};
const std::vector<Inflected> kObjects = {
    {"ball", "balls"},   {"book", "books"},   {"apple", "apples"}, {"box", "boxes"},
    {"stone", "stones"}, {"cup", "cups"},     {"key", "keys"},     {"letter", "letters"},
    {"song", "songs"},   {"map", "maps"},     {"coin", "coins"},   {"bell", "bells"}};
const std::vector<Inflected> kPlaces = {
    {"house", "houses"}, {"garden", "gardens"}, {"river", "rivers"}, {"forest", "forests"},
    {"field", "fields"}, {"bridge", "bridges"}, {"market", "markets"}, {"hill", "hills"}};

const std::vector<Inflected> kIntransitive = {
    {"runs", "run"},     {"sleeps", "sleep"}, {"sings", "sing"},   {"waits", "wait"},
    {"jumps", "jump"},   {"walks", "walk"},   {"smiles", "smile"}, {"falls", "fall"},
    {"dances", "dance"}, {"rests", "rest"},   {"hides", "hide"},   {"swims", "swim"}};
const std::vector<Inflected> kTransitive = {
    {"sees", "see"},       {"finds", "find"},   {"likes", "like"},     {"carries", "carry"},
    {"holds", "hold"},     {"takes", "take"},   {"wants", "want"},     {"watches", "watch"},
    {"follows", "follow"}, {"keeps", "keep"},   {"loses", "lose"},     {"drops", "drop"}};

const std::vector<const char*> kSingularDet = {"a", "this", "that", "every", "each", "one"};
const std::vector<const char*> kPluralDet = {"these", "those", "many", "few", "two", "three", "several", "all"};
const std::vector<const char*> kSharedDet = {"the", "my", "our", "his", "her", "some"};

const std::vector<const char*> kAdjectives = {
    "big",   "small", "old",   "young", "happy", "sad",   "quick", "slow",  "red",
    "green", "brown", "white", "black", "quiet", "loud",  "tall",  "short", "brave",
    "lazy",  "wild",  "calm",  "clever", "gentle", "tired", "hungry"};
const std::vector<const char*> kAdverbs = {"quickly", "slowly", "often", "rarely", "quietly",
                                           "loudly",  "today",  "again", "there",  "together"};
const std::vector<const char*> kPrepositions = {"near", "in", "under", "behind", "beside",
                                                "across", "by", "over"};
const std::vector<const char*> kConjunctions = {"and", "but", "because", "while"};

class Grammar {
 public:
  explicit Grammar(std::uint64_t seed) : rng_(seed) {}

  std::string sentence() {
    std::vector<std::string> out;
    const bool plural = coin(0.45);
    const auto& subject_class = coin(0.5) ? kAnimals : kPeople;
    noun_phrase(out, plural, subject_class);
    if (coin(0.3)) prepositional_phrase(out);
    verb_phrase(out, plural);
    if (coin(0.35)) {
      out.emplace_back(pick(kConjunctions));
      // Pronoun agrees with the subject's number.
      out.emplace_back(plural ? "they" : (&subject_class == &kAnimals ? "it" : pick_of({"he", "she"})));
      verb_phrase(out, plural);
    }
    out.emplace_back(".");
    std::string s;
    for (const auto& w : out) {
      if (!s.empty()) s += ' ';
      s += w;
    }
    return s;
  }

 private:
  bool coin(double p) { return std::bernoulli_distribution(p)(rng_); }

  template <typename Seq>
  auto pick(const Seq& items) -> decltype(items[0]) {
    std::uniform_int_distribution<std::size_t> d(0, items.size() - 1);
    return items[d(rng_)];
  }

  const char* pick_of(std::initializer_list<const char*> items) {
    std::uniform_int_distribution<std::size_t> d(0, items.size() - 1);
    return *(items.begin() + d(rng_));
  }

  void noun_phrase(std::vector<std::string>& out, bool plural, const std::vector<Inflected>& nouns) {
    const auto& own = plural ? kPluralDet : kSingularDet;
    out.emplace_back(coin(0.5) ? pick(kSharedDet) : pick(own));
    if (coin(0.5)) out.emplace_back(pick(kAdjectives));
    if (coin(0.15)) out.emplace_back(pick(kAdjectives));
    const Inflected& n = pick(nouns);
    out.emplace_back(plural ? n.plural : n.singular);
  }

  void object_phrase(std::vector<std::string>& out) {
    const int cls = std::uniform_int_distribution<int>(0, 2)(rng_);
    noun_phrase(out, coin(0.45), cls == 0 ? kObjects : (cls == 1 ? kAnimals : kPeople));
  }

  void prepositional_phrase(std::vector<std::string>& out) {
    out.emplace_back(pick(kPrepositions));
    noun_phrase(out, coin(0.4), kPlaces);
  }

  void verb_phrase(std::vector<std::string>& out, bool plural) {
    if (coin(0.5)) {
      const Inflected& v = pick(kIntransitive);
      out.emplace_back(plural ? v.plural : v.singular);
      if (coin(0.4)) out.emplace_back(pick(kAdverbs));
    } else {
      const Inflected& v = pick(kTransitive);
      out.emplace_back(plural ? v.plural : v.singular);
      object_phrase(out);
    }
    if (coin(0.2)) prepositional_phrase(out);
  }

  std::mt19937_64 rng_;
};

}  // namespace

std::vector<std::string> synth_corpus(std::uint64_t seed, std::size_t num_documents) {
  Grammar grammar(seed);
  std::vector<std::string> docs;
  docs.reserve(num_documents);
  for (std::size_t i = 0; i < num_documents; ++i) docs.push_back(grammar.sentence());
  return docs;
}

std::vector<std::string> grammar_vocabulary() {
  std::set<std::string> words{".", "they", "it", "he", "she"};
  for (const auto* group : {&kAnimals, &kPeople, &kObjects, &kPlaces, &kIntransitive, &kTransitive}) {
    for (const auto& w : *group) {
      words.insert(w.singular);
      words.insert(w.plural);
    }
  }
  for (const auto* group : {&kSingularDet, &kPluralDet, &kSharedDet, &kAdjectives, &kAdverbs,
                            &kPrepositions, &kConjunctions}) {
    words.insert(group->begin(), group->end());
  }
  return {words.begin(), words.end()};
}

}  // namespace minidistill
