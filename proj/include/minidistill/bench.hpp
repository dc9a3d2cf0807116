#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "minidistill/model.hpp"

namespace minidistill {

struct BenchOptions {
  int seq_len = 128;
  int batches = 100;
  int batch_size = 1;
  int warmup_batches = 1;
  std::uint64_t seed = 0;
};

struct BenchEntry {
  ModelConfig config;
  ParamCount params;
  double mean_seconds = 0.0;  // per batch
  double speedup = 1.0;       // first entry's time / this entry's time
};

// Times float32 encoder forwards (no tape, no dropout) on random token ids.
std::vector<BenchEntry> run_bench(const std::vector<ModelConfig>& configs, const BenchOptions& options);

// JSON array of objects with "layers"/"num_layers", "hidden" and optional
// "heads", "vocab_size", "ffn_dim" (defaults: 12 heads, vocab 30522).
std::vector<ModelConfig> load_bench_configs(const std::string& path);

std::string format_bench(const std::vector<BenchEntry>& entries);

// "85,054,464 (85.1M)"
std::string format_count(std::int64_t n);

}  // namespace minidistill
