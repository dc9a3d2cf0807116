#include "minidistill/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>

#include "minidistill/errors.hpp"

namespace minidistill {

namespace {
const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> tokens{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  return tokens;
}
}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isspace(u)) {
      flush();
    } else if (std::ispunct(u)) {
      flush();
      words.emplace_back(1, c);
    } else {
      current.push_back(c);
    }
  }
  flush();
  return words;
}

Vocab Vocab::build(const std::vector<std::string>& documents, std::size_t max_size) {
  if (max_size < static_cast<std::size_t>(kNumReserved)) {
    throw ConfigError("vocabulary size must be at least " + std::to_string(kNumReserved));
  }
  std::map<std::string, std::size_t> counts;
  for (const auto& doc : documents) {
    for (auto& w : split_words(doc)) ++counts[w];
  }
  if (counts.empty()) throw ConfigError("cannot build a vocabulary from an empty corpus");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens = reserved_tokens();
  for (const auto& [word, count] : ranked) {
    if (tokens.size() >= max_size) break;
    if (std::find(reserved_tokens().begin(), reserved_tokens().end(), word) != reserved_tokens().end()) {
      continue;
    }
    tokens.push_back(word);
  }
  return from_tokens(std::move(tokens));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < static_cast<std::size_t>(kNumReserved) ||
      !std::equal(reserved_tokens().begin(), reserved_tokens().end(), tokens.begin())) {
    throw ConfigError("vocabulary must start with [PAD] [UNK] [CLS] [SEP] [MASK]");
  }
  Vocab v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
      throw ConfigError("duplicate vocabulary token '" + v.tokens_[i] + "'");
    }
  }
  return v;
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary file " + path);
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write vocabulary file " + path);
  for (const auto& t : tokens_) out << t << '\n';
}

int Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) ids.push_back(id(w));
  return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int i : ids) {
    if (i == kPadId || i == kClsId || i == kSepId || i == kMaskId) continue;
    if (!out.empty()) out += ' ';
    out += token(i);
  }
  return out;
}

EncoderInput MaskedBatch::encoder_input() const {
  EncoderInput in;
  in.batch = batch;
  in.seq_len = seq_len;
  in.token_ids = token_ids;
  in.segment_ids = segment_ids;
  in.attn_mask = attn_mask;
  return in;
}

std::vector<int> MaskedBatch::flat_masked_rows() const {
  std::vector<int> rows;
  for (std::size_t b = 0; b < batch; ++b) {
    for (int p : masked_positions[b]) rows.push_back(static_cast<int>(b * seq_len) + p);
  }
  return rows;
}

std::vector<int> MaskedBatch::flat_labels() const {
  std::vector<int> out;
  for (const auto& l : labels) out.insert(out.end(), l.begin(), l.end());
  return out;
}

MaskedBatch make_mlm_batch(const Vocab& vocab, const std::vector<TextPair>& sequences,
                           std::size_t max_seq_len, const MaskingOptions& options, std::uint64_t seed) {
  if (sequences.empty()) throw ShapeError("make_mlm_batch: no sequences");
  if (!(options.mask_rate > 0.0 && options.mask_rate < 1.0)) {
    throw ConfigError("make_mlm_batch: mask_rate must be in (0, 1)");
  }
  if (vocab.size() <= static_cast<std::size_t>(kNumReserved)) {
    throw ConfigError("make_mlm_batch: vocabulary has no word tokens");
  }
  MaskedBatch out;
  out.batch = sequences.size();
  std::vector<std::vector<int>> ids(sequences.size()), segs(sequences.size());
  for (std::size_t b = 0; b < sequences.size(); ++b) {
    const auto& s = sequences[b];
    if (s.first.empty()) throw ShapeError("make_mlm_batch: sequence " + std::to_string(b) + " is empty");
    ids[b].push_back(kClsId);
    ids[b].insert(ids[b].end(), s.first.begin(), s.first.end());
    ids[b].push_back(kSepId);
    segs[b].assign(ids[b].size(), 0);
    if (!s.second.empty()) {
      ids[b].insert(ids[b].end(), s.second.begin(), s.second.end());
      ids[b].push_back(kSepId);
      segs[b].resize(ids[b].size(), 1);
    }
    if (ids[b].size() > max_seq_len) {
      throw ShapeError("make_mlm_batch: sequence " + std::to_string(b) + " needs " +
                       std::to_string(ids[b].size()) + " positions, max_seq_len is " +
                       std::to_string(max_seq_len));
    }
    out.seq_len = std::max(out.seq_len, ids[b].size());
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> random_word(kNumReserved, static_cast<int>(vocab.size()) - 1);
  const std::size_t n = out.seq_len;
  out.token_ids.assign(out.batch * n, kPadId);
  out.segment_ids.assign(out.batch * n, 0);
  out.attn_mask.assign(out.batch * n, 0);
  out.masked_positions.resize(out.batch);
  out.labels.resize(out.batch);
  for (std::size_t b = 0; b < out.batch; ++b) {
    std::vector<int>& seq = ids[b];
    std::vector<int> candidates;
    for (std::size_t t = 0; t < seq.size(); ++t) {
      if (seq[t] != kClsId && seq[t] != kSepId && seq[t] != kPadId) candidates.push_back(static_cast<int>(t));
    }
    std::vector<int> chosen;
    for (int t : candidates) {
      if (unit(rng) < options.mask_rate) chosen.push_back(t);
    }
    if (chosen.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
      chosen.push_back(candidates[pick(rng)]);
    }
    for (int t : chosen) {
      out.masked_positions[b].push_back(t);
      out.labels[b].push_back(seq[static_cast<std::size_t>(t)]);
      const double r = unit(rng);
      if (r < options.replace_with_mask) {
        seq[static_cast<std::size_t>(t)] = kMaskId;
      } else if (r < options.replace_with_mask + options.replace_with_random) {
        seq[static_cast<std::size_t>(t)] = random_word(rng);
      }
    }
    for (std::size_t t = 0; t < seq.size(); ++t) {
      out.token_ids[b * n + t] = seq[t];
      out.segment_ids[b * n + t] = segs[b][t];
      out.attn_mask[b * n + t] = 1;
    }
    out.valid_len.push_back(seq.size());
  }
  return out;
}

MaskedBatch make_mlm_batch(const Vocab& vocab, const std::vector<std::vector<int>>& sequences,
                           std::size_t max_seq_len, double mask_rate, std::uint64_t seed) {
  std::vector<TextPair> pairs;
  pairs.reserve(sequences.size());
  for (const auto& s : sequences) pairs.push_back({s, {}});
  MaskingOptions options;
  options.mask_rate = mask_rate;
  return make_mlm_batch(vocab, pairs, max_seq_len, options, seed);
}

std::vector<std::string> read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus file " + path);
  std::vector<std::string> docs;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") != std::string::npos) docs.push_back(line);
  }
  if (docs.empty()) throw ConfigError("corpus file " + path + " is empty");
  return docs;
}

void write_corpus(const std::string& path, const std::vector<std::string>& documents) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write corpus file " + path);
  for (const auto& d : documents) out << d << '\n';
}

}  // namespace minidistill
