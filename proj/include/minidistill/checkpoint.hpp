#pragma once

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "minidistill/data.hpp"
#include "minidistill/model.hpp"

namespace minidistill {

inline constexpr int kCheckpointVersion = 1;

nlohmann::json config_to_json(const ModelConfig& config);
// Missing keys keep their ModelConfig defaults; "layers" is accepted as an
// alias for "num_layers".
ModelConfig config_from_json(const nlohmann::json& j);
ModelConfig load_config_file(const std::string& path);

// On-disk layout:
//   line 1  "MINIDISTILL-CKPT"
//   line 2  byte length of the JSON header
//   header  {"format_version", "config", "vocab", "tensors": [{name, shape,
//            dtype: "f32le", offset, nbytes}], "payload_bytes", "payload_crc32"}
//   payload concatenated little-endian float32 arrays, row-major, in
//           manifest order with offsets relative to the payload start
struct Checkpoint {
  ModelConfig config;
  std::vector<std::string> vocab;  // may be empty
  std::vector<ParamState> params;
};

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
// Throws IoError on unreadable files, unknown versions, manifest problems or
// a payload checksum mismatch.
Checkpoint load_checkpoint(const std::string& path);

template <typename T>
void save_model(const std::string& path, const TransformerModel<T>& model, const Vocab* vocab = nullptr);

template <typename T>
TransformerModel<T> load_model(const std::string& path, Vocab* vocab = nullptr);

// CRC-32 of a whole file as 8 hex digits.
std::string file_digest(const std::string& path);

}  // namespace minidistill
