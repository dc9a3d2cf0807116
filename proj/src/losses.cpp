#include "minidistill/losses.hpp"

#include <cmath>

#include "minidistill/errors.hpp"
#include "minidistill/ops.hpp"

namespace minidistill {

std::string_view to_string(LossMode mode) {
  switch (mode) {
    case LossMode::minilm: return "minilm";
    case LossMode::att_only: return "att-only";
    case LossMode::soft_label: return "soft-label";
    case LossMode::layer_to_layer: return "layer2layer";
    case LossMode::value_mse: return "value-mse";
    case LossMode::hidden_relation: return "hidden-relation";
  }
  return "unknown";
}

LossMode parse_loss_mode(std::string_view name) {
  std::string s(name);
  for (char& c : s) {
    if (c == '_') c = '-';
  }
  if (s == "minilm") return LossMode::minilm;
  if (s == "att-only") return LossMode::att_only;
  if (s == "soft-label") return LossMode::soft_label;
  if (s == "layer2layer" || s == "layer-to-layer") return LossMode::layer_to_layer;
  if (s == "value-mse") return LossMode::value_mse;
  if (s == "hidden-relation") return LossMode::hidden_relation;
  throw ConfigError("unknown loss mode '" + std::string(name) + "'");
}

bool needs_matching_heads(LossMode mode) {
  return mode != LossMode::soft_label;
}

std::vector<std::pair<int, int>> uniform_layer_map(int teacher_layers, int student_layers) {
  if (teacher_layers <= 0 || student_layers <= 0) throw ConfigError("layer counts must be positive");
  if (teacher_layers % student_layers != 0) {
    throw ConfigError("layer counts not divisible: teacher has " + std::to_string(teacher_layers) +
                      " layers, student has " + std::to_string(student_layers));
  }
  const int stride = teacher_layers / student_layers;
  std::vector<std::pair<int, int>> map;
  for (int i = 1; i <= student_layers; ++i) map.emplace_back(i, i * stride);
  return map;
}

void DistillSpec::validate(const ModelConfig& teacher, const ModelConfig& student) const {
  teacher.validate();
  student.validate();
  if (teacher.vocab_size != student.vocab_size) {
    throw ConfigError("teacher and student vocabularies differ (" + std::to_string(teacher.vocab_size) +
                      " vs " + std::to_string(student.vocab_size) + ")");
  }
  if (needs_matching_heads(mode) && teacher.heads != student.heads) {
    throw ConfigError("head counts differ: teacher " + std::to_string(teacher.heads) + ", student " +
                      std::to_string(student.heads) + " (" + std::string(to_string(mode)) +
                      " compares per-head relations)");
  }
  if (mode == LossMode::layer_to_layer) uniform_layer_map(teacher.num_layers, student.num_layers);
  if (mode == LossMode::soft_label && !(temperature > 0.0)) {
    throw ConfigError("soft-label temperature must be positive");
  }
}

namespace {

void check_valid_len(std::size_t valid_len, std::size_t seq_len, const char* op) {
  if (valid_len == 0) throw ShapeError(std::string(op) + ": valid_len must be positive");
  if (valid_len > seq_len) {
    throw ShapeError(std::string(op) + ": valid_len " + std::to_string(valid_len) +
                     " exceeds sequence length " + std::to_string(seq_len));
  }
}

template <typename T>
void check_head_counts(std::size_t teacher, std::size_t student, const char* op) {
  if (teacher != student) {
    throw ConfigError(std::string(op) + ": head counts differ (" + std::to_string(teacher) + " vs " +
                      std::to_string(student) + ")");
  }
  if (teacher == 0) throw ConfigError(std::string(op) + ": no heads captured");
}

// Teacher distributions are plain constants; student log-probabilities keep
// their tape history. Returns (1/heads) sum_a kl_div_log_rows(p_a, log_q_a).
template <typename T>
Tensor<T> mean_head_kl(const std::vector<Tensor<T>>& teacher_probs,
                       const std::vector<Tensor<T>>& student_log_probs) {
  Tensor<T> total;
  for (std::size_t a = 0; a < teacher_probs.size(); ++a) {
    Tensor<T> term = kl_div_log_rows(teacher_probs[a], student_log_probs[a]);
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, static_cast<T>(1.0 / static_cast<double>(teacher_probs.size())));
}

template <typename T>
Tensor<T> renormalized_rows(const Tensor<T>& x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> v(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < m; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += v[i * n + j];
    if (s <= T(0)) throw NormalizationError("teacher attention row " + std::to_string(i) + " has no mass");
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] /= s;
  }
  return Tensor<T>::from({m, n}, std::move(v));
}

// Scaled self dot products of the first valid_len rows, per head.
template <typename T>
std::vector<Tensor<T>> relation_logits(const std::vector<Tensor<T>>& vectors, double scale_dim,
                                       std::size_t valid_len) {
  const T factor = static_cast<T>(1.0 / std::sqrt(scale_dim));
  std::vector<Tensor<T>> out;
  out.reserve(vectors.size());
  for (const auto& v : vectors) {
    const Tensor<T> rows = block(v, 0, valid_len, 0, v.cols());
    out.push_back(scale(matmul(rows, transpose(rows)), factor));
  }
  return out;
}

template <typename T>
Tensor<T> relation_kl(const std::vector<Tensor<T>>& teacher_vectors,
                      const std::vector<Tensor<T>>& student_vectors, std::size_t teacher_scale,
                      std::size_t student_scale, std::size_t valid_len) {
  std::vector<Tensor<T>> teacher_probs;
  {
    typename Tape<T>::Pause constant;
    std::vector<Tensor<T>> detached;
    for (const auto& v : teacher_vectors) detached.push_back(v.detach());
    for (const auto& logits : relation_logits(detached, static_cast<double>(teacher_scale), valid_len)) {
      teacher_probs.push_back(softmax_rows(logits));
    }
  }
  std::vector<Tensor<T>> student_log_probs;
  for (const auto& logits : relation_logits(student_vectors, static_cast<double>(student_scale), valid_len)) {
    student_log_probs.push_back(log_softmax_rows(logits));
  }
  return mean_head_kl(teacher_probs, student_log_probs);
}

template <typename T>
std::size_t common_rows(const std::vector<Tensor<T>>& a, const std::vector<Tensor<T>>& b, const char* op) {
  const std::size_t n = a.front().rows();
  for (const auto& t : a) {
    if (t.rows() != n) throw ShapeError(std::string(op) + ": inconsistent sequence lengths");
  }
  for (const auto& t : b) {
    if (t.rows() != n) {
      throw ShapeError(std::string(op) + ": teacher length " + std::to_string(n) +
                       " differs from student length " + std::to_string(t.rows()));
    }
  }
  return n;
}

}  // namespace

template <typename T>
Tensor<T> attention_transfer_loss(const LayerCapture<T>& teacher, const LayerCapture<T>& student,
                                  std::size_t valid_len) {
  check_head_counts<T>(teacher.heads.size(), student.heads.size(), "attention_transfer_loss");
  const std::size_t n = teacher.heads.front().attention.rows();
  for (const auto& h : student.heads) {
    if (h.scores.rows() != n) {
      throw ShapeError("attention_transfer_loss: teacher length " + std::to_string(n) +
                       " differs from student length " + std::to_string(h.scores.rows()));
    }
  }
  check_valid_len(valid_len, n, "attention_transfer_loss");
  std::vector<Tensor<T>> teacher_probs, student_log_probs;
  {
    typename Tape<T>::Pause constant;
    for (const auto& h : teacher.heads) {
      teacher_probs.push_back(renormalized_rows(block(h.attention.detach(), 0, valid_len, 0, valid_len)));
    }
  }
  for (const auto& h : student.heads) {
    student_log_probs.push_back(log_softmax_rows(block(h.scores, 0, valid_len, 0, valid_len)));
  }
  return mean_head_kl(teacher_probs, student_log_probs);
}

template <typename T>
std::vector<Tensor<T>> value_relation(const std::vector<Tensor<T>>& values, int scale_dim,
                                      std::size_t valid_len) {
  if (scale_dim <= 0) throw ConfigError("value_relation: scale_dim must be positive");
  if (values.empty()) throw ConfigError("value_relation: no heads");
  check_valid_len(valid_len, values.front().rows(), "value_relation");
  std::vector<Tensor<T>> out;
  for (const auto& logits : relation_logits(values, static_cast<double>(scale_dim), valid_len)) {
    out.push_back(softmax_rows(logits));
  }
  return out;
}

template <typename T>
Tensor<T> value_relation_loss(const std::vector<Tensor<T>>& teacher_values,
                              const std::vector<Tensor<T>>& student_values, std::size_t valid_len) {
  check_head_counts<T>(teacher_values.size(), student_values.size(), "value_relation_loss");
  const std::size_t n = common_rows(teacher_values, student_values, "value_relation_loss");
  check_valid_len(valid_len, n, "value_relation_loss");
  return relation_kl(teacher_values, student_values, teacher_values.front().cols(),
                     student_values.front().cols(), valid_len);
}

template <typename T>
LossTerms<T> minilm_loss(const LayerCapture<T>& teacher, const LayerCapture<T>& student,
                         std::size_t valid_len, bool with_value_relation) {
  LossTerms<T> terms;
  const Tensor<T> at = attention_transfer_loss(teacher, student, valid_len);
  terms.attention = static_cast<double>(at.item());
  if (!with_value_relation) {
    terms.total = at;
    return terms;
  }
  const Tensor<T> vr = value_relation_loss(teacher.values(), student.values(), valid_len);
  terms.value_relation = static_cast<double>(vr.item());
  terms.total = add(at, vr);
  return terms;
}

template <typename T>
Tensor<T> soft_label_loss(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits,
                          std::span<const int> masked_positions, double temperature) {
  if (masked_positions.empty()) throw ShapeError("soft_label_loss: no masked positions");
  if (!(temperature > 0.0)) throw ConfigError("soft_label_loss: temperature must be positive");
  if (teacher_logits.shape() != student_logits.shape()) {
    throw ShapeError("soft_label_loss: logits shapes differ " + shape_to_string(teacher_logits.shape()) +
                     " vs " + shape_to_string(student_logits.shape()));
  }
  const T inv_t = static_cast<T>(1.0 / temperature);
  Tensor<T> p;
  {
    typename Tape<T>::Pause constant;
    p = softmax_rows(scale(embedding_lookup(teacher_logits.detach(), masked_positions), inv_t));
  }
  const Tensor<T> log_q = log_softmax_rows(scale(embedding_lookup(student_logits, masked_positions), inv_t));
  return scale(kl_div_log_rows(p, log_q), static_cast<T>(temperature * temperature));
}

template <typename T>
LossTerms<T> layer_to_layer_loss(const AttentionCapture<T>& teacher,
                                 const AttentionCapture<T>& student, std::size_t valid_len) {
  const auto map = uniform_layer_map(teacher.model_layers, student.model_layers);
  LossTerms<T> terms;
  Tensor<T> total;
  for (const auto& [s, t] : map) {
    LossTerms<T> pair = minilm_loss(teacher.layer(t), student.layer(s), valid_len);
    terms.attention += pair.attention;
    terms.value_relation += pair.value_relation;
    total = total.defined() ? add(total, pair.total) : pair.total;
  }
  const double inv = 1.0 / static_cast<double>(map.size());
  terms.total = scale(total, static_cast<T>(inv));
  terms.attention *= inv;
  terms.value_relation *= inv;
  return terms;
}

template <typename T>
Tensor<T> value_mse_loss(const std::vector<Tensor<T>>& teacher_values,
                         const std::vector<Tensor<T>>& student_values, const Tensor<T>* projection,
                         std::size_t valid_len) {
  check_head_counts<T>(teacher_values.size(), student_values.size(), "value_mse_loss");
  const std::size_t n = common_rows(teacher_values, student_values, "value_mse_loss");
  check_valid_len(valid_len, n, "value_mse_loss");
  const std::size_t dk = teacher_values.front().cols(), dk_student = student_values.front().cols();
  if (projection) {
    if (projection->rank() != 2 || projection->rows() != dk_student || projection->cols() != dk) {
      throw ShapeError("value_mse_loss: projection " + shape_to_string(projection->shape()) +
                       " cannot map " + std::to_string(dk_student) + " to " + std::to_string(dk));
    }
  } else if (dk != dk_student) {
    throw ConfigError("value_mse_loss: student head dim " + std::to_string(dk_student) +
                      " differs from teacher head dim " + std::to_string(dk) +
                      " and no projection was given");
  }
  Tensor<T> total;
  for (std::size_t a = 0; a < teacher_values.size(); ++a) {
    const Tensor<T> target = block(teacher_values[a].detach(), 0, valid_len, 0, dk);
    Tensor<T> mapped = block(student_values[a], 0, valid_len, 0, dk_student);
    if (projection) mapped = matmul(mapped, *projection);
    const Tensor<T> term = mse(mapped, target);
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, static_cast<T>(1.0 / static_cast<double>(teacher_values.size())));
}

template <typename T>
Tensor<T> hidden_relation_loss(const Tensor<T>& teacher_hidden, const Tensor<T>& student_hidden,
                               int heads, std::size_t valid_len) {
  if (heads <= 0) throw ConfigError("hidden_relation_loss: heads must be positive");
  const std::size_t h = static_cast<std::size_t>(heads);
  if (teacher_hidden.cols() % h != 0 || student_hidden.cols() % h != 0) {
    throw ConfigError("hidden_relation_loss: hidden sizes must be divisible by the head count");
  }
  if (teacher_hidden.rows() != student_hidden.rows()) {
    throw ShapeError("hidden_relation_loss: sequence lengths differ");
  }
  check_valid_len(valid_len, teacher_hidden.rows(), "hidden_relation_loss");
  auto split = [h](const Tensor<T>& x) {
    const std::size_t w = x.cols() / h;
    std::vector<Tensor<T>> parts;
    for (std::size_t a = 0; a < h; ++a) parts.push_back(block(x, 0, x.rows(), a * w, w));
    return parts;
  };
  std::vector<Tensor<T>> teacher_parts;
  {
    typename Tape<T>::Pause constant;
    teacher_parts = split(teacher_hidden.detach());
  }
  return relation_kl(teacher_parts, split(student_hidden), teacher_hidden.cols() / h,
                     student_hidden.cols() / h, valid_len);
}

#define MINIDISTILL_INSTANTIATE_LOSSES(T)                                                           \
  template Tensor<T> attention_transfer_loss(const LayerCapture<T>&, const LayerCapture<T>&,       \
                                             std::size_t);                                        \
  template std::vector<Tensor<T>> value_relation(const std::vector<Tensor<T>>&, int, std::size_t); \
  template Tensor<T> value_relation_loss(const std::vector<Tensor<T>>&,                            \
                                         const std::vector<Tensor<T>>&, std::size_t);             \
  template LossTerms<T> minilm_loss(const LayerCapture<T>&, const LayerCapture<T>&, std::size_t,   \
                                    bool);                                                         \
  template Tensor<T> soft_label_loss(const Tensor<T>&, const Tensor<T>&, std::span<const int>,     \
                                     double);                                                      \
  template LossTerms<T> layer_to_layer_loss(const AttentionCapture<T>&,                            \
                                            const AttentionCapture<T>&, std::size_t);              \
  template Tensor<T> value_mse_loss(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&,  \
                                    const Tensor<T>*, std::size_t);                                \
  template Tensor<T> hidden_relation_loss(const Tensor<T>&, const Tensor<T>&, int, std::size_t);

MINIDISTILL_INSTANTIATE_LOSSES(float)
MINIDISTILL_INSTANTIATE_LOSSES(double)

}  // namespace minidistill
