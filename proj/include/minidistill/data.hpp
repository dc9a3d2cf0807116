#pragma once

#include <cstdint>
#include <istream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "minidistill/model.hpp"

namespace minidistill {

// Reserved ids shared by every vocabulary.
inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kMaskId = 4;
inline constexpr int kNumReserved = 5;

// Whitespace separates words; every punctuation character is its own token.
std::vector<std::string> split_words(std::string_view text);

class Vocab {
 public:
  // Word tokens ranked by frequency (ties broken lexicographically) and
  // truncated so that reserved + words <= max_size.
  static Vocab build(const std::vector<std::string>& documents, std::size_t max_size);
  static Vocab from_tokens(std::vector<std::string> tokens);
  // One token per line, line number - 1 == id.
  static Vocab load(const std::string& path);
  void save(const std::string& path) const;

  std::size_t size() const { return tokens_.size(); }
  int id(std::string_view token) const;  // kUnkId when absent
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(std::string_view text) const;
  // Joins the non-special tokens of `ids` with single spaces.
  std::string decode(const std::vector<int>& ids) const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// One input sequence before special tokens are added. A non-empty `second`
// produces "[CLS] first [SEP] second [SEP]" with segment ids 0/1.
struct TextPair {
  std::vector<int> first;
  std::vector<int> second;
};

struct MaskedBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> token_ids;    // batch x seq_len, after masking
  std::vector<int> segment_ids;  // batch x seq_len
  std::vector<int> attn_mask;    // batch x seq_len, 0 exactly at [PAD]
  std::vector<std::vector<int>> masked_positions;  // per sequence, ascending
  std::vector<std::vector<int>> labels;            // original ids at masked_positions
  std::vector<std::size_t> valid_len;

  EncoderInput encoder_input() const;
  // Masked positions as row indices into the flattened (batch * seq_len) hidden matrix.
  std::vector<int> flat_masked_rows() const;
  std::vector<int> flat_labels() const;
};

struct MaskingOptions {
  double mask_rate = 0.15;
  double replace_with_mask = 0.8;
  double replace_with_random = 0.1;  // remainder stays unchanged
};

// BERT-style masking. Each non-special position is selected with probability
// mask_rate; at least one position per sequence is always selected.
// Deterministic for a given seed.
MaskedBatch make_mlm_batch(const Vocab& vocab, const std::vector<TextPair>& sequences,
                           std::size_t max_seq_len, const MaskingOptions& options, std::uint64_t seed);

MaskedBatch make_mlm_batch(const Vocab& vocab, const std::vector<std::vector<int>>& sequences,
                           std::size_t max_seq_len, double mask_rate, std::uint64_t seed);

// Documents (one sentence per line) drawn from a small probabilistic grammar
// with determiner/noun/verb number agreement and pronoun back-reference.
std::vector<std::string> synth_corpus(std::uint64_t seed, std::size_t num_documents);
// Every word the grammar can emit.
std::vector<std::string> grammar_vocabulary();

// One document per non-empty line.
std::vector<std::string> read_corpus(const std::string& path);
void write_corpus(const std::string& path, const std::vector<std::string>& documents);

}  // namespace minidistill
