#include "minidistill/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "minidistill/errors.hpp"
#include "minidistill/ops.hpp"

namespace minidistill {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid model config: " + what); };
  if (num_layers <= 0) fail("num_layers must be positive");
  if (hidden <= 0) fail("hidden must be positive");
  if (heads <= 0) fail("heads must be positive");
  if (hidden % heads != 0) {
    fail("hidden (" + std::to_string(hidden) + ") is not divisible by heads (" +
         std::to_string(heads) + ")");
  }
  if (ffn_dim < 0) fail("ffn_dim must be positive (or 0 for 4 * hidden)");
  if (vocab_size <= 0) fail("vocab_size must be positive");
  if (max_seq_len <= 0) fail("max_seq_len must be positive");
  if (num_segments <= 0) fail("num_segments must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (!(layernorm_eps >= 0.0)) fail("layernorm_eps must be non-negative");
}

ParamCount count_params(const ModelConfig& config) {
  config.validate();
  const std::int64_t d = config.hidden, ff = config.ffn(), v = config.vocab_size;
  ParamCount count;
  count.embedding = v * d;
  const std::int64_t per_layer = 4 * (d * d + d) + (d * ff + ff) + (ff * d + d) + 4 * d;
  count.transformer = config.num_layers * per_layer;
  // positions + segments + embedding LN + MLM transform (dense + LN) + decoder bias
  count.other = static_cast<std::int64_t>(config.max_seq_len) * d +
                static_cast<std::int64_t>(config.num_segments) * d + 2 * d + (d * d + d) + 2 * d + v;
  return count;
}

std::int64_t flops_per_token(const ModelConfig& config, int seq_len) {
  config.validate();
  const std::int64_t d = config.hidden, ff = config.ffn(), n = seq_len;
  return config.num_layers * (8 * d * d + 4 * n * d + 4 * d * ff);
}

EncoderInput EncoderInput::single(std::vector<int> token_ids, std::vector<int> segment_ids,
                                  std::vector<int> attn_mask) {
  EncoderInput in;
  in.batch = 1;
  in.seq_len = token_ids.size();
  if (segment_ids.empty()) segment_ids.assign(token_ids.size(), 0);
  if (attn_mask.empty()) attn_mask.assign(token_ids.size(), 1);
  in.token_ids = std::move(token_ids);
  in.segment_ids = std::move(segment_ids);
  in.attn_mask = std::move(attn_mask);
  return in;
}

std::size_t EncoderInput::valid_len(std::size_t b) const {
  std::size_t len = 0;
  for (std::size_t t = 0; t < seq_len; ++t) {
    if (attn_mask[b * seq_len + t] != 0) len = t + 1;
  }
  return len;
}

template <typename T>
std::vector<Tensor<T>> LayerCapture<T>::values() const {
  std::vector<Tensor<T>> out;
  out.reserve(heads.size());
  for (const auto& h : heads) out.push_back(h.values);
  return out;
}

template <typename T>
const LayerCapture<T>& AttentionCapture<T>::layer(int index) const {
  for (const auto& l : layers) {
    if (l.layer == index) return l;
  }
  throw std::out_of_range("layer " + std::to_string(index) + " was not captured");
}

namespace {

template <typename T>
Tensor<T> truncated_normal(Shape shape, std::mt19937_64& rng, double stddev = 0.02) {
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<T> values(shape_numel(shape));
  for (T& v : values) {
    double x;
    do {
      x = normal(rng);
    } while (std::abs(x) > 2.0 * stddev);
    v = static_cast<T>(x);
  }
  return Tensor<T>::from(std::move(shape), std::move(values), true);
}

template <typename T>
Tensor<T> zeros_param(std::size_t n) {
  return Tensor<T>::zeros({n}, true);
}

template <typename T>
Tensor<T> ones_param(std::size_t n) {
  return Tensor<T>::full({n}, T(1), true);
}

}  // namespace

template <typename T>
TransformerModel<T> TransformerModel<T>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.hidden, ff = config.ffn();
  TransformerModel m;
  m.config_ = config;
  m.token_embedding_ = truncated_normal<T>({static_cast<std::size_t>(config.vocab_size), d}, rng);
  m.position_embedding_ = truncated_normal<T>({static_cast<std::size_t>(config.max_seq_len), d}, rng);
  m.segment_embedding_ = truncated_normal<T>({static_cast<std::size_t>(config.num_segments), d}, rng);
  m.embed_ln_gamma_ = ones_param<T>(d);
  m.embed_ln_beta_ = zeros_param<T>(d);
  for (int l = 0; l < config.num_layers; ++l) {
    LayerParams<T> p;
    p.wq = truncated_normal<T>({d, d}, rng);
    p.bq = zeros_param<T>(d);
    p.wk = truncated_normal<T>({d, d}, rng);
    p.bk = zeros_param<T>(d);
    p.wv = truncated_normal<T>({d, d}, rng);
    p.bv = zeros_param<T>(d);
    p.wo = truncated_normal<T>({d, d}, rng);
    p.bo = zeros_param<T>(d);
    p.ln1_gamma = ones_param<T>(d);
    p.ln1_beta = zeros_param<T>(d);
    p.w1 = truncated_normal<T>({d, ff}, rng);
    p.b1 = zeros_param<T>(ff);
    p.w2 = truncated_normal<T>({ff, d}, rng);
    p.b2 = zeros_param<T>(d);
    p.ln2_gamma = ones_param<T>(d);
    p.ln2_beta = zeros_param<T>(d);
    m.layers_.push_back(std::move(p));
  }
  m.mlm_dense_w_ = truncated_normal<T>({d, d}, rng);
  m.mlm_dense_b_ = zeros_param<T>(d);
  m.mlm_ln_gamma_ = ones_param<T>(d);
  m.mlm_ln_beta_ = zeros_param<T>(d);
  m.mlm_decoder_bias_ = zeros_param<T>(static_cast<std::size_t>(config.vocab_size));
  return m;
}

template <typename T>
std::vector<NamedParam<T>> TransformerModel<T>::parameters() const {
  std::vector<NamedParam<T>> out;
  auto add = [&out](std::string name, const Tensor<T>& t, bool decay) {
    out.push_back({std::move(name), t, decay});
  };
  add("embeddings.token", token_embedding_, true);
  add("embeddings.position", position_embedding_, true);
  add("embeddings.segment", segment_embedding_, true);
  add("embeddings.ln.gamma", embed_ln_gamma_, false);
  add("embeddings.ln.beta", embed_ln_beta_, false);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& p = layers_[l];
    const std::string pre = "layers." + std::to_string(l + 1) + ".";
    add(pre + "attn.wq", p.wq, true);
    add(pre + "attn.bq", p.bq, false);
    add(pre + "attn.wk", p.wk, true);
    add(pre + "attn.bk", p.bk, false);
    add(pre + "attn.wv", p.wv, true);
    add(pre + "attn.bv", p.bv, false);
    add(pre + "attn.wo", p.wo, true);
    add(pre + "attn.bo", p.bo, false);
    add(pre + "ln1.gamma", p.ln1_gamma, false);
    add(pre + "ln1.beta", p.ln1_beta, false);
    add(pre + "ffn.w1", p.w1, true);
    add(pre + "ffn.b1", p.b1, false);
    add(pre + "ffn.w2", p.w2, true);
    add(pre + "ffn.b2", p.b2, false);
    add(pre + "ln2.gamma", p.ln2_gamma, false);
    add(pre + "ln2.beta", p.ln2_beta, false);
  }
  add("mlm.dense.w", mlm_dense_w_, true);
  add("mlm.dense.b", mlm_dense_b_, false);
  add("mlm.ln.gamma", mlm_ln_gamma_, false);
  add("mlm.ln.beta", mlm_ln_beta_, false);
  add("mlm.decoder_bias", mlm_decoder_bias_, false);
  return out;
}

template <typename T>
std::vector<ParamState> TransformerModel<T>::state() const {
  std::vector<ParamState> out;
  for (const auto& p : parameters()) {
    auto v = p.tensor.values();
    out.push_back({p.name, p.tensor.shape(), std::vector<double>(v.begin(), v.end())});
  }
  return out;
}

template <typename T>
TransformerModel<T> TransformerModel<T>::from_state(const ModelConfig& config,
                                                    const std::vector<ParamState>& state) {
  auto m = init(config, 0);
  std::map<std::string, const ParamState*> by_name;
  for (const auto& s : state) by_name[s.name] = &s;
  for (auto& p : m.parameters()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ConfigError("state is missing parameter " + p.name);
    const ParamState& s = *it->second;
    if (s.shape != p.tensor.shape() || s.values.size() != p.tensor.size()) {
      throw ShapeError("parameter " + p.name + " has shape " + shape_to_string(s.shape) +
                       ", model expects " + shape_to_string(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(s.values[i]);
  }
  if (by_name.size() != m.parameters().size()) throw ConfigError("state has unexpected parameters");
  return m;
}

template <typename T>
std::size_t TransformerModel<T>::transformer_param_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) {
    if (p.name.rfind("layers.", 0) == 0) n += p.tensor.size();
  }
  return n;
}

template <typename T>
std::size_t TransformerModel<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.size();
  return n;
}

template <typename T>
void TransformerModel<T>::set_trainable(bool trainable) {
  for (auto& p : parameters()) p.tensor.set_requires_grad(trainable);
}

template <typename T>
void TransformerModel<T>::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

template <typename T>
TransformerModel<T> TransformerModel<T>::clone() const {
  auto copy = from_state(config_, state());
  if (!token_embedding_.requires_grad()) copy.set_trainable(false);
  return copy;
}

template <typename T>
void TransformerModel<T>::zero_position_embeddings() {
  for (T& v : position_embedding_.mutable_values()) v = T(0);
}

template <typename T>
EncodeResult<T> TransformerModel<T>::encode(const EncoderInput& input, const CaptureRequest& capture,
                                            std::mt19937_64* rng) const {
  const std::size_t batch = input.batch, n = input.seq_len;
  const std::size_t d = config_.hidden, heads = config_.heads, dk = config_.head_dim();
  const std::size_t rows = batch * n;
  if (n == 0 || batch == 0) throw ShapeError("encode: empty input");
  if (n > static_cast<std::size_t>(config_.max_seq_len)) {
    throw ShapeError("encode: sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                     std::to_string(config_.max_seq_len));
  }
  if (input.token_ids.size() != rows || input.segment_ids.size() != rows ||
      input.attn_mask.size() != rows) {
    throw ShapeError("encode: token/segment/mask arrays must each hold batch * seq_len entries");
  }
  for (std::size_t i = 0; i < rows; ++i) {
    if (input.token_ids[i] < 0 || input.token_ids[i] >= config_.vocab_size) {
      throw std::out_of_range("encode: token id " + std::to_string(input.token_ids[i]) +
                              " outside vocabulary of " + std::to_string(config_.vocab_size));
    }
    if (input.segment_ids[i] < 0 || input.segment_ids[i] >= config_.num_segments) {
      throw std::out_of_range("encode: segment id " + std::to_string(input.segment_ids[i]) +
                              " out of range");
    }
  }

  const double rate = rng ? config_.dropout : 0.0;
  std::mt19937_64 unused;
  std::mt19937_64& gen = rng ? *rng : unused;

  // Key masks, one n x n tensor per sequence.
  std::vector<Tensor<T>> masks;
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<T> mv(n * n);
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      const T keep = input.attn_mask[b * n + j] != 0 ? T(1) : T(0);
      any = any || keep != T(0);
      for (std::size_t i = 0; i < n; ++i) mv[i * n + j] = keep;
    }
    if (!any) throw DegenerateMaskError("encode: sequence " + std::to_string(b) + " is fully masked");
    masks.push_back(Tensor<T>::matrix(n, n, std::move(mv)));
  }

  std::vector<int> positions(rows);
  for (std::size_t i = 0; i < rows; ++i) positions[i] = static_cast<int>(i % n);
  Tensor<T> x = add(add(embedding_lookup(token_embedding_, input.token_ids),
                        embedding_lookup(position_embedding_, positions)),
                    embedding_lookup(segment_embedding_, input.segment_ids));
  const T eps = static_cast<T>(config_.layernorm_eps);
  x = dropout(layernorm(x, embed_ln_gamma_, embed_ln_beta_, eps), rate, gen);

  const int num_layers = config_.num_layers;
  auto wanted = [&](int layer) {
    for (int l : capture.layers) {
      if (l == 0 || l == layer || (l == kLastLayer && layer == num_layers)) return true;
    }
    return false;
  };

  EncodeResult<T> result;
  result.captures.resize(batch);
  for (auto& c : result.captures) c.model_layers = num_layers;

  const T inv_sqrt_dk = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
  for (int l = 1; l <= num_layers; ++l) {
    const LayerParams<T>& p = layers_[l - 1];
    const bool record = wanted(l);
    const Tensor<T> q = add_bias(matmul(x, p.wq), p.bq);
    const Tensor<T> k = add_bias(matmul(x, p.wk), p.bk);
    const Tensor<T> v = add_bias(matmul(x, p.wv), p.bv);
    std::vector<Tensor<T>> contexts;
    contexts.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      LayerCapture<T> layer_capture;
      layer_capture.layer = l;
      std::vector<Tensor<T>> head_outputs;
      head_outputs.reserve(heads);
      for (std::size_t a = 0; a < heads; ++a) {
        const Tensor<T> qa = block(q, b * n, n, a * dk, dk);
        const Tensor<T> ka = block(k, b * n, n, a * dk, dk);
        const Tensor<T> va = block(v, b * n, n, a * dk, dk);
        const Tensor<T> scores = scale(matmul(qa, transpose(ka)), inv_sqrt_dk);
        const Tensor<T> attn = softmax_rows(scores, &masks[b]);
        head_outputs.push_back(matmul(dropout(attn, rate, gen), va));
        if (record) layer_capture.heads.push_back({qa, ka, va, scores, attn});
      }
      contexts.push_back(concat_cols(head_outputs));
      if (record) result.captures[b].layers.push_back(std::move(layer_capture));
    }
    const Tensor<T> context = batch == 1 ? contexts.front() : concat_rows(contexts);
    const Tensor<T> attn_out = dropout(add_bias(matmul(context, p.wo), p.bo), rate, gen);
    x = layernorm(add(x, attn_out), p.ln1_gamma, p.ln1_beta, eps);
    const Tensor<T> inner = gelu(add_bias(matmul(x, p.w1), p.b1));
    const Tensor<T> ffn_out = dropout(add_bias(matmul(inner, p.w2), p.b2), rate, gen);
    x = layernorm(add(x, ffn_out), p.ln2_gamma, p.ln2_beta, eps);
    if (record && capture.hidden) {
      for (std::size_t b = 0; b < batch; ++b) {
        result.captures[b].layers.back().hidden = batch == 1 ? x : block(x, b * n, n, 0, d);
      }
    }
  }
  result.hidden = x;
  return result;
}

template <typename T>
Tensor<T> TransformerModel<T>::mlm_logits(const Tensor<T>& hidden) const {
  if (hidden.rank() != 2 || hidden.cols() != static_cast<std::size_t>(config_.hidden)) {
    throw ShapeError("mlm_logits: hidden " + shape_to_string(hidden.shape()) +
                     " does not match hidden size " + std::to_string(config_.hidden));
  }
  const Tensor<T> t = layernorm(gelu(add_bias(matmul(hidden, mlm_dense_w_), mlm_dense_b_)),
                                mlm_ln_gamma_, mlm_ln_beta_, static_cast<T>(config_.layernorm_eps));
  return add_bias(matmul(t, transpose(token_embedding_)), mlm_decoder_bias_);
}

template struct LayerCapture<float>;
template struct LayerCapture<double>;
template struct AttentionCapture<float>;
template struct AttentionCapture<double>;
template class TransformerModel<float>;
template class TransformerModel<double>;

}  // namespace minidistill
