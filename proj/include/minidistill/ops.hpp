#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "minidistill/tensor.hpp"

namespace minidistill {

// Additive logit used for masked positions; exp() of it underflows to an
// exact zero in both float and double.
inline constexpr double kMaskedLogit = -1e30;

// Tolerance on row sums for inputs that must be probability distributions.
inline constexpr double kDistributionTolerance = 1e-6;

// FLOPs (2 per multiply-add) executed by forward matmul() calls on this
// thread since the last reset.
std::int64_t matmul_flops();
void reset_matmul_flops();

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

// x[m x n] + bias[n] broadcast over rows.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// Per-row normalisation to zero mean / unit (population) variance followed
// by gamma * y + beta.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

// Row softmax. With a {0,1} mask, kMaskedLogit is added where mask == 0 so
// masked entries come out as exact zeros. A row with no 1 in the mask throws
// DegenerateMaskError.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, const Tensor<T>* mask = nullptr);

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x);

// (1/m) sum_rows sum_j p_j ln(p_j / q_j), natural log, 0 ln 0 = 0. Gradient
// flows into q only.
template <typename T>
Tensor<T> kl_div_rows(const Tensor<T>& p, const Tensor<T>& q);

// Same divergence with q given as log-probabilities. Entries of log_q at or
// below kMaskedLogit / 2 count as zero probability.
template <typename T>
Tensor<T> kl_div_log_rows(const Tensor<T>& p, const Tensor<T>& log_q);

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

// Mean over rows of -log_probs[i, targets[i]].
template <typename T>
Tensor<T> nll_rows(const Tensor<T>& log_probs, std::span<const int> targets);

// Rows of `table` selected by `ids`; also used to gather hidden rows.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids);

// Sub-matrix x[row0 : row0+rows, col0 : col0+cols].
template <typename T>
Tensor<T> block(const Tensor<T>& x, std::size_t row0, std::size_t rows, std::size_t col0,
                std::size_t cols);

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);

// Inverted dropout; identity when rate == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::mt19937_64& rng);

}  // namespace minidistill
