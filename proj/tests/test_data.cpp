#include <algorithm>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "minidistill/data.hpp"
#include "minidistill/errors.hpp"

using namespace minidistill;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("minidistill_test_" + name)).string();
}

}  // namespace

TEST_CASE("split_words") {
  CHECK(split_words("  the dog, sleeps.\n") == std::vector<std::string>{"the", "dog", ",", "sleeps", "."});
  CHECK(split_words("").empty());
}

TEST_CASE("vocab ranks by frequency after the reserved ids") {
  const Vocab v = Vocab::build({"a b a"}, 7);
  REQUIRE(v.size() == 7);
  CHECK(v.token(kPadId) == "[PAD]");
  CHECK(v.token(kMaskId) == "[MASK]");
  CHECK(v.id("a") == 5);
  CHECK(v.id("b") == 6);
  CHECK(v.id("zebra") == kUnkId);
  CHECK(Vocab::build({"a b a"}, 7) == v);

  const Vocab truncated = Vocab::build({"c b a b c c"}, 6);
  CHECK(truncated.size() == 6);
  CHECK(truncated.id("c") == 5);
  CHECK(truncated.id("b") == kUnkId);

  // ties are broken lexicographically
  const Vocab ties = Vocab::build({"y x z"}, 10);
  CHECK(ties.id("x") == 5);
  CHECK(ties.id("y") == 6);
  CHECK(ties.id("z") == 7);

  CHECK_THROWS_AS(Vocab::build({"a"}, 3), ConfigError);
}

TEST_CASE("vocab encode, decode and file round trip") {
  const Vocab v = Vocab::build({"the dog sleeps .", "the cat eats ."}, 100);
  const auto ids = v.encode("the cat sleeps .");
  CHECK(v.decode(ids) == "the cat sleeps .");
  CHECK(v.encode("the unicorn") == std::vector<int>{v.id("the"), kUnkId});

  const std::string path = temp_path("vocab.txt");
  v.save(path);
  CHECK(Vocab::load(path) == v);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(Vocab::load(temp_path("missing_vocab.txt")), IoError);
}

TEST_CASE("mlm batch layout") {
  const Vocab v = Vocab::build({"a b c d e f"}, 20);
  const std::vector<TextPair> seqs{{{5, 6, 7}, {8, 9}}, {{10}, {}}};
  const MaskedBatch b = make_mlm_batch(v, seqs, 16, MaskingOptions{}, 3);
  CHECK(b.batch == 2);
  CHECK(b.seq_len == 8);
  CHECK(b.valid_len == std::vector<std::size_t>{8, 3});
  CHECK(b.token_ids[0] == kClsId);
  CHECK(b.token_ids[4] == kSepId);
  CHECK(b.token_ids[7] == kSepId);
  CHECK(b.segment_ids[5] == 1);
  CHECK(b.segment_ids[4] == 0);
  CHECK(b.attn_mask == std::vector<int>{1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0});
  CHECK(b.token_ids[8 + 3] == kPadId);
  for (const auto& p : b.masked_positions) CHECK_FALSE(p.empty());

  const std::vector<TextPair> too_long{{std::vector<int>(15, 5), {}}};
  CHECK_THROWS_AS(make_mlm_batch(v, too_long, 16, MaskingOptions{}, 1), ShapeError);
  const std::vector<TextPair> empty{{{}, {}}};
  CHECK_THROWS_AS(make_mlm_batch(v, empty, 16, MaskingOptions{}, 1), ShapeError);
}

TEST_CASE("masking is deterministic, never touches specials and hits the target rate") {
  const auto words = grammar_vocabulary();
  const Vocab v = Vocab::from_tokens([&] {
    std::vector<std::string> t{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
    t.insert(t.end(), words.begin(), words.end());
    return t;
  }());
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> tok(kNumReserved, static_cast<int>(v.size()) - 1);
  std::uniform_int_distribution<int> len(5, 40);
  std::vector<std::vector<int>> seqs;
  std::size_t positions = 0;
  while (positions < 10000) {
    std::vector<int> s(len(rng));
    for (int& t : s) t = tok(rng);
    positions += s.size();
    seqs.push_back(std::move(s));
  }

  const MaskedBatch a = make_mlm_batch(v, seqs, 64, 0.15, 42);
  const MaskedBatch b = make_mlm_batch(v, seqs, 64, 0.15, 42);
  CHECK(a.token_ids == b.token_ids);
  CHECK(a.masked_positions == b.masked_positions);

  std::size_t masked = 0, as_mask = 0, unchanged = 0;
  for (std::size_t s = 0; s < a.batch; ++s) {
    std::set<int> chosen(a.masked_positions[s].begin(), a.masked_positions[s].end());
    for (std::size_t k = 0; k < a.masked_positions[s].size(); ++k) {
      const int pos = a.masked_positions[s][k];
      const int original = a.labels[s][k];
      CHECK(original >= kNumReserved);
      CHECK(pos > 0);
      CHECK(static_cast<std::size_t>(pos) < a.valid_len[s] - 1);
      const int now = a.token_ids[s * a.seq_len + pos];
      as_mask += now == kMaskId;
      unchanged += now == original;
    }
    masked += chosen.size();
    // specials and padding are untouched
    CHECK(a.token_ids[s * a.seq_len] == kClsId);
    CHECK(a.token_ids[s * a.seq_len + a.valid_len[s] - 1] == kSepId);
    for (std::size_t j = a.valid_len[s]; j < a.seq_len; ++j) CHECK(a.token_ids[s * a.seq_len + j] == kPadId);
  }
  const double fraction = static_cast<double>(masked) / static_cast<double>(positions);
  CHECK(fraction >= 0.13);
  CHECK(fraction <= 0.17);
  const double mask_share = static_cast<double>(as_mask) / static_cast<double>(masked);
  CHECK(mask_share == doctest::Approx(0.8).epsilon(0.08));
  CHECK(unchanged > 0);

  const MaskedBatch c = make_mlm_batch(v, seqs, 64, 0.15, 43);
  CHECK(c.token_ids != a.token_ids);
}

TEST_CASE("synthetic corpus") {
  const auto a = synth_corpus(5, 200), b = synth_corpus(5, 200), c = synth_corpus(6, 200);
  CHECK(a == b);
  CHECK(a != c);
  CHECK(a.size() == 200);
  const auto grammar = grammar_vocabulary();
  const std::set<std::string> allowed(grammar.begin(), grammar.end());
  std::set<std::string> seen;
  for (const auto& doc : a) {
    for (const auto& w : split_words(doc)) {
      CHECK(allowed.count(w) == 1);
      seen.insert(w);
    }
  }
  CHECK(seen.size() <= allowed.size());
  CHECK(seen.size() > 50);
}

TEST_CASE("corpus files") {
  const std::string path = temp_path("corpus.txt");
  write_corpus(path, {"one line", "", "two line"});
  CHECK(read_corpus(path) == std::vector<std::string>{"one line", "two line"});
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_corpus(path), IoError);
}
