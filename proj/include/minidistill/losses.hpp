#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "minidistill/model.hpp"
#include "minidistill/tensor.hpp"

namespace minidistill {

enum class LossMode { minilm, att_only, soft_label, layer_to_layer, value_mse, hidden_relation };

// CLI spelling: minilm, att-only, soft-label, layer2layer, value-mse,
// hidden-relation. parse_loss_mode also accepts underscores.
std::string_view to_string(LossMode mode);
LossMode parse_loss_mode(std::string_view name);

// True for modes that compare per-head relation matrices between teacher and
// student and therefore need equal head counts.
bool needs_matching_heads(LossMode mode);

struct DistillSpec {
  LossMode mode = LossMode::minilm;
  double temperature = 1.0;          // soft_label only
  std::uint64_t projection_seed = 0;  // value_mse only

  // Throws ConfigError when the spec cannot be applied to this pair.
  void validate(const ModelConfig& teacher, const ModelConfig& student) const;
};

template <typename T>
struct LossTerms {
  Tensor<T> total;
  double attention = 0.0;       // L_AT component (0 when unused)
  double value_relation = 0.0;  // L_VR component (0 when unused)
};

// KL between the teacher's and the student's attention distributions of one
// layer, averaged over heads and the first `valid_len` query rows. Keys are
// restricted to valid positions and renormalised; the teacher is constant.
template <typename T>
Tensor<T> attention_transfer_loss(const LayerCapture<T>& teacher, const LayerCapture<T>& student,
                                  std::size_t valid_len);

// Per head softmax(V V^T / sqrt(scale_dim)) over the first valid_len positions.
template <typename T>
std::vector<Tensor<T>> value_relation(const std::vector<Tensor<T>>& values, int scale_dim,
                                      std::size_t valid_len);

// KL between teacher and student value relations; each side is scaled by its
// own head dimension, so d_k and d_k' may differ and no parameters are added.
template <typename T>
Tensor<T> value_relation_loss(const std::vector<Tensor<T>>& teacher_values,
                              const std::vector<Tensor<T>>& student_values, std::size_t valid_len);

// L_AT + L_VR on each model's captured layer (att-only drops L_VR).
template <typename T>
LossTerms<T> minilm_loss(const LayerCapture<T>& teacher, const LayerCapture<T>& student,
                         std::size_t valid_len, bool with_value_relation = true);

// T^2 * mean over masked positions of KL(softmax(t / T) || softmax(s / T)).
template <typename T>
Tensor<T> soft_label_loss(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits,
                          std::span<const int> masked_positions, double temperature);

// Uniform layer map: student layer i -> teacher layer i * (L / M), 1-based.
// Throws ConfigError when L is not a multiple of M.
std::vector<std::pair<int, int>> uniform_layer_map(int teacher_layers, int student_layers);

// Mean over mapped layer pairs of the attention + value-relation KL terms.
template <typename T>
LossTerms<T> layer_to_layer_loss(const AttentionCapture<T>& teacher,
                                 const AttentionCapture<T>& student, std::size_t valid_len);

// MSE between teacher values and student values mapped through `projection`
// (d_k' x d_k, shared by all heads). A null projection is only accepted when
// d_k' == d_k.
template <typename T>
Tensor<T> value_mse_loss(const std::vector<Tensor<T>>& teacher_values,
                         const std::vector<Tensor<T>>& student_values, const Tensor<T>* projection,
                         std::size_t valid_len);

// Relation KL over last-layer hidden states split into `heads` column groups.
template <typename T>
Tensor<T> hidden_relation_loss(const Tensor<T>& teacher_hidden, const Tensor<T>& student_hidden,
                               int heads, std::size_t valid_len);

}  // namespace minidistill
