#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "minidistill/tensor.hpp"

namespace minidistill {

struct ModelConfig {
  int num_layers = 2;
  int hidden = 64;
  int heads = 4;
  int ffn_dim = 0;  // 0 means 4 * hidden
  int vocab_size = 256;
  int max_seq_len = 64;
  int num_segments = 2;
  double dropout = 0.1;
  double layernorm_eps = 1e-12;

  int head_dim() const { return hidden / heads; }
  int ffn() const { return ffn_dim > 0 ? ffn_dim : 4 * hidden; }
  // Throws ConfigError naming the offending field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// Parameter census. `embedding` is the token embedding table only (vocab x
// hidden); `transformer` covers the stacked layers; `other` holds position
// and segment embeddings, the embedding layer norm and the MLM head.
struct ParamCount {
  std::int64_t embedding = 0;
  std::int64_t transformer = 0;
  std::int64_t other = 0;

  std::int64_t total() const { return embedding + transformer + other; }
};

ParamCount count_params(const ModelConfig& config);

// Forward FLOPs per token for the encoder stack (multiply-add = 2 FLOPs):
// L * (8 d^2 + 4 seq_len d + 4 d d_ff).
std::int64_t flops_per_token(const ModelConfig& config, int seq_len);

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool decay = true;  // false for biases and layer-norm parameters
};

// Portable, precision-independent copy of one parameter.
struct ParamState {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

// A batch of B sequences padded to a common length. Padding must be a
// suffix: attn_mask is 1 for the first valid_len(b) positions and 0 after.
struct EncoderInput {
  std::size_t batch = 1;
  std::size_t seq_len = 0;
  std::vector<int> token_ids;
  std::vector<int> segment_ids;
  std::vector<int> attn_mask;

  static EncoderInput single(std::vector<int> token_ids, std::vector<int> segment_ids = {},
                             std::vector<int> attn_mask = {});
  std::size_t valid_len(std::size_t b) const;
};

inline constexpr int kLastLayer = -1;

// Which layers (1-based; kLastLayer for the final one) to record.
struct CaptureRequest {
  std::vector<int> layers;
  bool hidden = false;

  static CaptureRequest none() { return {}; }
  static CaptureRequest last(bool hidden = false) { return {{kLastLayer}, hidden}; }
  static CaptureRequest all(bool hidden = false) { return {{0}, hidden}; }  // 0 = every layer
};

template <typename T>
struct HeadCapture {
  Tensor<T> queries;    // |x| x d_k
  Tensor<T> keys;       // |x| x d_k
  Tensor<T> values;     // |x| x d_k
  Tensor<T> scores;     // |x| x |x|, Q K^T / sqrt(d_k) before masking
  Tensor<T> attention;  // |x| x |x|, masked softmax of scores (pre-dropout)
};

template <typename T>
struct LayerCapture {
  int layer = 0;  // 1-based
  std::vector<HeadCapture<T>> heads;
  Tensor<T> hidden;  // H^l, |x| x d_h; set when requested

  std::vector<Tensor<T>> values() const;
};

// Per-sequence record of a forward pass.
template <typename T>
struct AttentionCapture {
  int model_layers = 0;
  std::vector<LayerCapture<T>> layers;

  const LayerCapture<T>& layer(int index) const;  // 1-based
  const LayerCapture<T>& last() const { return layer(model_layers); }
};

template <typename T>
struct EncodeResult {
  Tensor<T> hidden;  // H^L for the whole batch, (B |x|) x d_h
  std::vector<AttentionCapture<T>> captures;  // one per sequence
};

template <typename T>
struct LayerParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> w1, b1, w2, b2;
  Tensor<T> ln2_gamma, ln2_beta;
};

// Post-LN BERT encoder with a tied MLM head.
template <typename T>
class TransformerModel {
 public:
  // Weights ~ normal(0, 0.02) truncated at two standard deviations, biases 0,
  // layer-norm gains 1. Deterministic per seed.
  static TransformerModel init(const ModelConfig& config, std::uint64_t seed);
  // Rebuilds a model from a saved state; every parameter must be present with
  // the expected shape.
  static TransformerModel from_state(const ModelConfig& config, const std::vector<ParamState>& state);

  const ModelConfig& config() const { return config_; }
  std::vector<NamedParam<T>> parameters() const;
  std::vector<ParamState> state() const;
  std::size_t transformer_param_count() const;  // by traversal of "layers.*"
  std::size_t param_count() const;

  void set_trainable(bool trainable);
  void zero_grad();
  TransformerModel clone() const;

  // Encoder forward. `rng` enables dropout at config().dropout; nullptr runs
  // deterministically.
  EncodeResult<T> encode(const EncoderInput& input, const CaptureRequest& capture = {},
                         std::mt19937_64* rng = nullptr) const;

  // MLM logits (rows x vocab) for the given hidden rows.
  Tensor<T> mlm_logits(const Tensor<T>& hidden) const;

  // Zeroes the position embedding table (used by symmetry tests).
  void zero_position_embeddings();

 private:
  TransformerModel() = default;

  ModelConfig config_;
  Tensor<T> token_embedding_, position_embedding_, segment_embedding_;
  Tensor<T> embed_ln_gamma_, embed_ln_beta_;
  std::vector<LayerParams<T>> layers_;
  Tensor<T> mlm_dense_w_, mlm_dense_b_, mlm_ln_gamma_, mlm_ln_beta_, mlm_decoder_bias_;
};

// Precision conversion via the portable state.
template <typename To, typename From>
TransformerModel<To> convert_model(const TransformerModel<From>& model) {
  return TransformerModel<To>::from_state(model.config(), model.state());
}

}  // namespace minidistill
