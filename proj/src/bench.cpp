#include "minidistill/bench.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>
#include <sstream>

#include "minidistill/checkpoint.hpp"
#include "minidistill/errors.hpp"

namespace minidistill {

std::vector<BenchEntry> run_bench(const std::vector<ModelConfig>& configs, const BenchOptions& options) {
  if (options.batches <= 0 || options.batch_size <= 0 || options.seq_len <= 0) {
    throw ConfigError("bench: batches, batch size and sequence length must be positive");
  }
  std::vector<BenchEntry> entries;
  for (const ModelConfig& base : configs) {
    ModelConfig config = base;
    config.max_seq_len = std::max(config.max_seq_len, options.seq_len);
    config.validate();
    const auto model = TransformerModel<float>::init(config, options.seed);
    std::mt19937_64 rng(options.seed);
    std::uniform_int_distribution<int> token(0, config.vocab_size - 1);
    EncoderInput input;
    input.batch = static_cast<std::size_t>(options.batch_size);
    input.seq_len = static_cast<std::size_t>(options.seq_len);
    const std::size_t n = input.batch * input.seq_len;
    for (std::size_t i = 0; i < n; ++i) input.token_ids.push_back(token(rng));
    input.segment_ids.assign(n, 0);
    input.attn_mask.assign(n, 1);

    for (int i = 0; i < options.warmup_batches; ++i) model.encode(input);
    const auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < options.batches; ++i) model.encode(input);
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;

    BenchEntry e;
    e.config = config;
    e.params = count_params(config);
    e.mean_seconds = elapsed.count() / options.batches;
    entries.push_back(e);
  }
  for (auto& e : entries) e.speedup = entries.front().mean_seconds / e.mean_seconds;
  return entries;
}

std::vector<ModelConfig> load_bench_configs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open bench config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bench config " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_array() || j.empty()) throw ConfigError("bench config must be a non-empty JSON array");
  std::vector<ModelConfig> configs;
  for (auto item : j) {
    if (!item.contains("heads")) item["heads"] = 12;
    if (!item.contains("vocab_size")) item["vocab_size"] = 30522;
    if (!item.contains("max_seq_len")) item["max_seq_len"] = 512;
    configs.push_back(config_from_json(item));
  }
  return configs;
}

std::string format_count(std::int64_t n) {
  std::string digits = std::to_string(n);
  std::string grouped;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i > 0 && (digits.size() - i) % 3 == 0) grouped += ',';
    grouped += digits[i];
  }
  char approx[32];
  std::snprintf(approx, sizeof approx, "%.1fM", static_cast<double>(n) / 1e6);
  return grouped + " (" + approx + ")";
}

std::string format_bench(const std::vector<BenchEntry>& entries) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%7s %7s %24s %24s %14s %9s\n", "layers", "hidden", "emd params",
                "trm params", "sec/batch", "speedup");
  os << line;
  for (const auto& e : entries) {
    std::snprintf(line, sizeof line, "%7d %7d %24s %24s %14.4f %8.2fx\n", e.config.num_layers,
                  e.config.hidden, format_count(e.params.embedding).c_str(),
                  format_count(e.params.transformer).c_str(), e.mean_seconds, e.speedup);
    os << line;
  }
  return os.str();
}

}  // namespace minidistill
