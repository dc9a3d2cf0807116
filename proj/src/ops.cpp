#include "minidistill/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "minidistill/errors.hpp"

namespace minidistill {
namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMatrix<T>>;

template <typename T>
ConstMap<T> as_matrix(std::span<const T> data, std::size_t rows, std::size_t cols) {
  return ConstMap<T>(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
MutMap<T> as_matrix(std::span<T> data, std::size_t rows, std::size_t cols) {
  return MutMap<T>(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_to_string(t.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

template <typename T>
bool tracks(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::recording()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t->requires_grad(); });
}

// Builds an op output and, when any input is traced, records `backward`
// (which receives the output) on the active tape.
template <typename T, typename Backward>
Tensor<T> emit(const char* op, Shape shape, std::vector<T> values,
               std::initializer_list<const Tensor<T>*> inputs, Backward backward) {
  auto out = Tensor<T>::from(std::move(shape), std::move(values));
  if (tracks<T>(inputs)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(op, [out, backward = std::move(backward)]() { backward(out); });
  }
  return out;
}

template <typename T>
void check_distribution_rows(const Tensor<T>& p, const char* what) {
  const std::size_t m = p.rows(), n = p.cols();
  auto v = p.values();
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (v[i * n + j] < T(0)) throw NormalizationError(std::string(what) + " has a negative entry");
      s += v[i * n + j];
    }
    if (std::abs(s - 1.0) > kDistributionTolerance) {
      throw NormalizationError(std::string(what) + " row " + std::to_string(i) + " sums to " +
                               std::to_string(s));
    }
  }
}

thread_local std::int64_t matmul_flop_counter = 0;

}  // namespace

std::int64_t matmul_flops() { return matmul_flop_counter; }
void reset_matmul_flops() { matmul_flop_counter = 0; }

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()));
  }
  matmul_flop_counter += static_cast<std::int64_t>(2 * m * k * n);
  std::vector<T> out(m * n);
  as_matrix(std::span<T>(out), m, n).noalias() = as_matrix(a.values(), m, k) * as_matrix(b.values(), k, n);
  return emit<T>("matmul", {m, n}, std::move(out), {&a, &b}, [a, b, m, k, n](const Tensor<T>& o) {
    auto g = as_matrix(o.grad(), m, n);
    if (a.requires_grad()) {
      auto ga = as_matrix(Tensor<T>(a).mutable_grad(), m, k);
      ga.noalias() += g * as_matrix(b.values(), k, n).transpose();
    }
    if (b.requires_grad()) {
      auto gb = as_matrix(Tensor<T>(b).mutable_grad(), k, n);
      gb.noalias() += as_matrix(a.values(), m, k).transpose() * g;
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  as_matrix(std::span<T>(out), n, m) = as_matrix(a.values(), m, n).transpose();
  return emit<T>("transpose", {n, m}, std::move(out), {&a}, [a, m, n](const Tensor<T>& o) {
    as_matrix(Tensor<T>(a).mutable_grad(), m, n) += as_matrix(o.grad(), n, m).transpose();
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return emit<T>("add", a.shape(), std::move(out), {&a, &b}, [a, b](const Tensor<T>& o) {
    auto g = o.grad();
    for (Tensor<T> t : {a, b}) {
      if (!t.requires_grad()) continue;
      auto gt = t.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.size() != n) {
    throw ShapeError("add_bias: bias " + shape_to_string(bias.shape()) + " does not match " +
                     shape_to_string(x.shape()));
  }
  std::vector<T> out(x.values().begin(), x.values().end());
  auto bv = bias.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  return emit<T>("add_bias", x.shape(), std::move(out), {&x, &bias},
                 [x, bias, m, n](const Tensor<T>& o) {
                   auto g = o.grad();
                   if (x.requires_grad()) {
                     auto gx = Tensor<T>(x).mutable_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                   }
                   if (bias.requires_grad()) {
                     auto gb = Tensor<T>(bias).mutable_grad();
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                   }
                 });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.values().begin(), x.values().end());
  for (T& v : out) v *= factor;
  return emit<T>("scale", x.shape(), std::move(out), {&x}, [x, factor](const Tensor<T>& o) {
    auto g = o.grad();
    auto gx = Tensor<T>(x).mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.values()) total += v;
  return emit<T>("sum", {1}, {total}, {&x}, [x](const Tensor<T>& o) {
    const T g = o.grad()[0];
    for (T& gx : Tensor<T>(x).mutable_grad()) gx += g;
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T k = static_cast<T>(0.044715);
  auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T v = xv[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v)));
  }
  return emit<T>("gelu", x.shape(), std::move(out), {&x}, [x, c, k](const Tensor<T>& o) {
    auto g = o.grad();
    auto xv = x.values();
    auto gx = Tensor<T>(x).mutable_grad();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const T v = xv[i];
      const T th = std::tanh(c * (v + k * v * v * v));
      const T dinner = c * (T(1) + T(3) * k * v * v);
      gx[i] += g[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * dinner);
    }
  });
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t m = x.rows(), d = x.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layernorm: parameters " + shape_to_string(gamma.shape()) + "/" +
                     shape_to_string(beta.shape()) + " do not match " + shape_to_string(x.shape()));
  }
  auto xv = x.values(), gv = gamma.values(), bv = beta.values();
  std::vector<T> out(m * d), normalized(m * d), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xv[i * d + j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T c = xv[i * d + j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T y = (xv[i * d + j] - mean) * inv_std[i];
      normalized[i * d + j] = y;
      out[i * d + j] = gv[j] * y + bv[j];
    }
  }
  return emit<T>(
      "layernorm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [x, gamma, beta, m, d, normalized = std::move(normalized),
       inv_std = std::move(inv_std)](const Tensor<T>& o) {
        auto g = o.grad();
        auto gv = gamma.values();
        if (gamma.requires_grad() || beta.requires_grad()) {
          auto gg = Tensor<T>(gamma).mutable_grad();
          auto gb = Tensor<T>(beta).mutable_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) {
              if (gamma.requires_grad()) gg[j] += g[i * d + j] * normalized[i * d + j];
              if (beta.requires_grad()) gb[j] += g[i * d + j];
            }
        }
        if (!x.requires_grad()) return;
        auto gx = Tensor<T>(x).mutable_grad();
        for (std::size_t i = 0; i < m; ++i) {
          T mean_gy = 0, mean_gyy = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const T gy = g[i * d + j] * gv[j];
            mean_gy += gy;
            mean_gyy += gy * normalized[i * d + j];
          }
          mean_gy /= static_cast<T>(d);
          mean_gyy /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T gy = g[i * d + j] * gv[j];
            gx[i * d + j] += inv_std[i] * (gy - mean_gy - normalized[i * d + j] * mean_gyy);
          }
        }
      });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, const Tensor<T>* mask) {
  require_matrix(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (mask) require_same_shape(x, *mask, "softmax_rows mask");
  auto xv = x.values();
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      const bool keep = !mask || mask->values()[i * n + j] != T(0);
      any = any || keep;
      row[j] = keep ? xv[i * n + j] : xv[i * n + j] + static_cast<T>(kMaskedLogit);
    }
    if (!any) throw DegenerateMaskError("softmax_rows: row " + std::to_string(i) + " is fully masked");
    const T mx = *std::max_element(row, row + n);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    for (std::size_t j = 0; j < n; ++j) row[j] /= total;
  }
  return emit<T>("softmax_rows", x.shape(), std::move(out), {&x}, [x, m, n](const Tensor<T>& o) {
    auto y = o.values();
    auto g = o.grad();
    auto gx = Tensor<T>(x).mutable_grad();
    for (std::size_t i = 0; i < m; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  require_matrix(x, "log_softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  auto xv = x.values();
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* in = xv.data() + i * n;
    const T mx = *std::max_element(in, in + n);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(in[j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = in[j] - lse;
  }
  return emit<T>("log_softmax_rows", x.shape(), std::move(out), {&x},
                 [x, m, n](const Tensor<T>& o) {
                   auto y = o.values();
                   auto g = o.grad();
                   auto gx = Tensor<T>(x).mutable_grad();
                   for (std::size_t i = 0; i < m; ++i) {
                     T gsum = 0;
                     for (std::size_t j = 0; j < n; ++j) gsum += g[i * n + j];
                     for (std::size_t j = 0; j < n; ++j)
                       gx[i * n + j] += g[i * n + j] - std::exp(y[i * n + j]) * gsum;
                   }
                 });
}

template <typename T>
Tensor<T> kl_div_rows(const Tensor<T>& p, const Tensor<T>& q) {
  require_matrix(p, "kl_div_rows");
  require_same_shape(p, q, "kl_div_rows");
  check_distribution_rows(p, "kl_div_rows: p");
  check_distribution_rows(q, "kl_div_rows: q");
  const std::size_t m = p.rows();
  auto pv = p.values(), qv = q.values();
  T total = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (pv[i] == T(0)) continue;
    if (qv[i] == T(0)) {
      throw SupportError("kl_div_rows: p > 0 where q == 0 at flat index " + std::to_string(i));
    }
    total += pv[i] * std::log(pv[i] / qv[i]);
  }
  total /= static_cast<T>(m);
  return emit<T>("kl_div_rows", {1}, {total}, {&q}, [p, q, m](const Tensor<T>& o) {
    const T g = o.grad()[0] / static_cast<T>(m);
    auto pv = p.values(), qv = q.values();
    auto gq = Tensor<T>(q).mutable_grad();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      if (pv[i] != T(0)) gq[i] -= g * pv[i] / qv[i];
    }
  });
}

template <typename T>
Tensor<T> kl_div_log_rows(const Tensor<T>& p, const Tensor<T>& log_q) {
  require_matrix(p, "kl_div_log_rows");
  require_same_shape(p, log_q, "kl_div_log_rows");
  check_distribution_rows(p, "kl_div_log_rows: p");
  const std::size_t m = p.rows();
  const T floor = static_cast<T>(kMaskedLogit / 2);
  auto pv = p.values(), lq = log_q.values();
  T total = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (pv[i] == T(0)) continue;
    if (lq[i] <= floor) {
      throw SupportError("kl_div_log_rows: p > 0 where q == 0 at flat index " + std::to_string(i));
    }
    total += pv[i] * (std::log(pv[i]) - lq[i]);
  }
  total /= static_cast<T>(m);
  return emit<T>("kl_div_log_rows", {1}, {total}, {&log_q}, [p, log_q, m](const Tensor<T>& o) {
    const T g = o.grad()[0] / static_cast<T>(m);
    auto pv = p.values();
    auto gq = Tensor<T>(log_q).mutable_grad();
    for (std::size_t i = 0; i < pv.size(); ++i) gq[i] -= g * pv[i];
  });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mse");
  auto av = a.values(), bv = b.values();
  T total = 0;
  for (std::size_t i = 0; i < av.size(); ++i) total += (av[i] - bv[i]) * (av[i] - bv[i]);
  const T n = static_cast<T>(av.size());
  return emit<T>("mse", {1}, {total / n}, {&a, &b}, [a, b, n](const Tensor<T>& o) {
    const T g = T(2) * o.grad()[0] / n;
    auto av = a.values(), bv = b.values();
    if (a.requires_grad()) {
      auto ga = Tensor<T>(a).mutable_grad();
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * (av[i] - bv[i]);
    }
    if (b.requires_grad()) {
      auto gb = Tensor<T>(b).mutable_grad();
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= g * (av[i] - bv[i]);
    }
  });
}

template <typename T>
Tensor<T> nll_rows(const Tensor<T>& log_probs, std::span<const int> targets) {
  require_matrix(log_probs, "nll_rows");
  const std::size_t m = log_probs.rows(), n = log_probs.cols();
  if (targets.size() != m) {
    throw ShapeError("nll_rows: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(m) + " rows");
  }
  auto lp = log_probs.values();
  T total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= n) {
      throw std::out_of_range("nll_rows: target " + std::to_string(targets[i]) + " out of range");
    }
    total -= lp[i * n + targets[i]];
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  return emit<T>("nll_rows", {1}, {total / static_cast<T>(m)}, {&log_probs},
                 [log_probs, tgt = std::move(tgt), m, n](const Tensor<T>& o) {
                   const T g = o.grad()[0] / static_cast<T>(m);
                   auto gl = Tensor<T>(log_probs).mutable_grad();
                   for (std::size_t i = 0; i < m; ++i) gl[i * n + tgt[i]] -= g;
                 });
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids) {
  require_matrix(table, "embedding_lookup");
  const std::size_t rows = table.rows(), d = table.cols();
  auto tv = table.values();
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw std::out_of_range("embedding_lookup: id " + std::to_string(ids[i]) +
                              " outside table of " + std::to_string(rows) + " rows");
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return emit<T>("embedding_lookup", {ids.size(), d}, std::move(out), {&table},
                 [table, idv = std::move(idv), d](const Tensor<T>& o) {
                   auto g = o.grad();
                   auto gt = Tensor<T>(table).mutable_grad();
                   for (std::size_t i = 0; i < idv.size(); ++i)
                     for (std::size_t j = 0; j < d; ++j) gt[idv[i] * d + j] += g[i * d + j];
                 });
}

template <typename T>
Tensor<T> block(const Tensor<T>& x, std::size_t row0, std::size_t rows, std::size_t col0,
                std::size_t cols) {
  require_matrix(x, "block");
  const std::size_t n = x.cols();
  if (row0 + rows > x.rows() || col0 + cols > n || rows == 0 || cols == 0) {
    throw ShapeError("block: [" + std::to_string(row0) + "+" + std::to_string(rows) + ", " +
                     std::to_string(col0) + "+" + std::to_string(cols) + "] outside " +
                     shape_to_string(x.shape()));
  }
  auto xv = x.values();
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((row0 + i) * n + col0), cols,
                out.begin() + static_cast<std::ptrdiff_t>(i * cols));
  return emit<T>("block", {rows, cols}, std::move(out), {&x},
                 [x, row0, rows, col0, cols, n](const Tensor<T>& o) {
                   auto g = o.grad();
                   auto gx = Tensor<T>(x).mutable_grad();
                   for (std::size_t i = 0; i < rows; ++i)
                     for (std::size_t j = 0; j < cols; ++j)
                       gx[(row0 + i) * n + col0 + j] += g[i * cols + j];
                 });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  bool traced = false;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != m) throw ShapeError("concat_cols: row counts differ");
    n += p.cols();
    traced = traced || p.requires_grad();
  }
  std::vector<T> out(m * n);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    auto pv = p.values();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(i * c), c,
                  out.begin() + static_cast<std::ptrdiff_t>(i * n + offset));
    offset += c;
  }
  const Tensor<T> witness = traced ? *std::find_if(parts.begin(), parts.end(), [](const auto& p) {
    return p.requires_grad();
  }) : parts.front();
  return emit<T>("concat_cols", {m, n}, std::move(out), {&witness}, [parts, m, n](const Tensor<T>& o) {
    auto g = o.grad();
    std::size_t offset = 0;
    for (Tensor<T> p : parts) {
      const std::size_t c = p.cols();
      if (p.requires_grad()) {
        auto gp = p.mutable_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * n + offset + j];
      }
      offset += c;
    }
  });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  bool traced = false;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != n) throw ShapeError("concat_rows: column counts differ");
    m += p.rows();
    traced = traced || p.requires_grad();
  }
  std::vector<T> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  const Tensor<T> witness = traced ? *std::find_if(parts.begin(), parts.end(), [](const auto& p) {
    return p.requires_grad();
  }) : parts.front();
  return emit<T>("concat_rows", {m, n}, std::move(out), {&witness}, [parts](const Tensor<T>& o) {
    auto g = o.grad();
    std::size_t offset = 0;
    for (Tensor<T> p : parts) {
      if (p.requires_grad()) {
        auto gp = p.mutable_grad();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
      }
      offset += p.size();
    }
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const T factor = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> multiplier(x.size());
  for (T& mval : multiplier) mval = keep(rng) ? factor : T(0);
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * multiplier[i];
  return emit<T>("dropout", x.shape(), std::move(out), {&x},
                 [x, multiplier = std::move(multiplier)](const Tensor<T>& o) {
                   auto g = o.grad();
                   auto gx = Tensor<T>(x).mutable_grad();
                   for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * multiplier[i];
                 });
}

#define MINIDISTILL_INSTANTIATE_OPS(T)                                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> transpose(const Tensor<T>&);                                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> gelu(const Tensor<T>&);                                                    \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> softmax_rows(const Tensor<T>&, const Tensor<T>*);                          \
  template Tensor<T> log_softmax_rows(const Tensor<T>&);                                        \
  template Tensor<T> kl_div_rows(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> kl_div_log_rows(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> nll_rows(const Tensor<T>&, std::span<const int>);                          \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const int>);                  \
  template Tensor<T> block(const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t); \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                                \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                                \
  template Tensor<T> dropout(const Tensor<T>&, double, std::mt19937_64&);

MINIDISTILL_INSTANTIATE_OPS(float)
MINIDISTILL_INSTANTIATE_OPS(double)

}  // namespace minidistill
