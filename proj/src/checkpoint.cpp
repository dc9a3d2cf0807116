#include "minidistill/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "minidistill/errors.hpp"

namespace minidistill {

namespace {

constexpr const char* kMagic = "MINIDISTILL-CKPT";

std::uint32_t crc32_of(const std::string& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

void append_f32le(std::string& out, float value) {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

float read_f32le(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers},     {"hidden", c.hidden},
          {"heads", c.heads},               {"ffn_dim", c.ffn_dim},
          {"vocab_size", c.vocab_size},     {"max_seq_len", c.max_seq_len},
          {"num_segments", c.num_segments}, {"dropout", c.dropout},
          {"layernorm_eps", c.layernorm_eps}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    if (j.contains("layers")) c.num_layers = j.at("layers").get<int>();
    c.num_layers = j.value("num_layers", c.num_layers);
    c.hidden = j.value("hidden", c.hidden);
    c.heads = j.value("heads", c.heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.num_segments = j.value("num_segments", c.num_segments);
    c.dropout = j.value("dropout", c.dropout);
    c.layernorm_eps = j.value("layernorm_eps", c.layernorm_eps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j.contains("model") ? j.at("model") : j);
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string payload;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& p : ckpt.params) {
    const std::size_t offset = payload.size();
    for (double v : p.values) append_f32le(payload, static_cast<float>(v));
    tensors.push_back({{"name", p.name},
                       {"shape", p.shape},
                       {"dtype", "f32le"},
                       {"offset", offset},
                       {"nbytes", payload.size() - offset}});
  }
  nlohmann::json header = {{"format_version", kCheckpointVersion},
                           {"config", config_to_json(ckpt.config)},
                           {"vocab", ckpt.vocab},
                           {"tensors", tensors},
                           {"payload_bytes", payload.size()},
                           {"payload_crc32", hex32(crc32_of(payload))}};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out << kMagic << '\n' << text.size() << '\n' << text;
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::string magic, size_line;
  std::getline(in, magic);
  if (magic != kMagic) throw IoError(path + " is not a checkpoint (bad magic)");
  std::getline(in, size_line);
  std::size_t header_size = 0;
  try {
    header_size = std::stoull(size_line);
  } catch (const std::exception&) {
    throw IoError(path + ": malformed header length");
  }
  std::string text(header_size, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_size));
  if (static_cast<std::size_t>(in.gcount()) != header_size) throw IoError(path + ": truncated header");
  const std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Checkpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(text);
    const int version = header.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw IoError(path + ": unsupported checkpoint format version " + std::to_string(version));
    }
    if (header.at("payload_bytes").get<std::size_t>() != payload.size()) {
      throw IoError(path + ": payload size does not match the header");
    }
    if (header.at("payload_crc32").get<std::string>() != hex32(crc32_of(payload))) {
      throw IoError(path + ": payload checksum mismatch");
    }
    ckpt.config = config_from_json(header.at("config"));
    ckpt.vocab = header.value("vocab", std::vector<std::string>{});
    std::size_t expected_offset = 0;
    for (const auto& t : header.at("tensors")) {
      if (t.at("dtype").get<std::string>() != "f32le") throw IoError(path + ": unsupported dtype");
      ParamState p;
      p.name = t.at("name").get<std::string>();
      p.shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto nbytes = t.at("nbytes").get<std::size_t>();
      if (offset != expected_offset || nbytes != 4 * shape_numel(p.shape) || offset + nbytes > payload.size()) {
        throw IoError(path + ": manifest entry " + p.name + " is inconsistent");
      }
      expected_offset = offset + nbytes;
      p.values.resize(nbytes / 4);
      for (std::size_t i = 0; i < p.values.size(); ++i) p.values[i] = read_f32le(payload.data() + offset + 4 * i);
      ckpt.params.push_back(std::move(p));
    }
    if (expected_offset != payload.size()) throw IoError(path + ": payload has trailing bytes");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": malformed header: " + e.what());
  }
  return ckpt;
}

template <typename T>
void save_model(const std::string& path, const TransformerModel<T>& model, const Vocab* vocab) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  ckpt.params = model.state();
  if (vocab) ckpt.vocab = vocab->tokens();
  save_checkpoint(path, ckpt);
}

template <typename T>
TransformerModel<T> load_model(const std::string& path, Vocab* vocab) {
  const Checkpoint ckpt = load_checkpoint(path);
  if (vocab && !ckpt.vocab.empty()) *vocab = Vocab::from_tokens(ckpt.vocab);
  return TransformerModel<T>::from_state(ckpt.config, ckpt.params);
}

std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex32(crc32_of(bytes));
}

template void save_model(const std::string&, const TransformerModel<float>&, const Vocab*);
template void save_model(const std::string&, const TransformerModel<double>&, const Vocab*);
template TransformerModel<float> load_model(const std::string&, Vocab*);
template TransformerModel<double> load_model(const std::string&, Vocab*);

}  // namespace minidistill
