#pragma once

// Independent scalar-loop references for the relation losses. Nothing here
// calls into the library's ops; captures are assembled by hand.

#include <cmath>
#include <random>
#include <vector>

#include "minidistill/model.hpp"

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double lo = -2.0,
                            double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, std::vector<double>(cols));
  for (auto& r : m)
    for (double& v : r) v = u(rng);
  return m;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Row i: softmax over j < n of a_i . b_j / sqrt(scale_dim), using only the
// first n rows of a and b.
inline Matrix relation(const Matrix& a, const Matrix& b, double scale_dim, std::size_t n) {
  Matrix out(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      out[i][j] = dot(a[i], b[j]) / std::sqrt(scale_dim);
      mx = std::max(mx, out[i][j]);
    }
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(out[i][j] - mx);
    for (std::size_t j = 0; j < n; ++j) out[i][j] = std::exp(out[i][j] - mx) / z;
  }
  return out;
}

// (1/rows) sum_i sum_j p ln(p/q)
inline double kl(const Matrix& p, const Matrix& q) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = 0; j < p[i].size(); ++j)
      if (p[i][j] > 0) s += p[i][j] * std::log(p[i][j] / q[i][j]);
  return s / static_cast<double>(p.size());
}

struct Head {
  Matrix q, k, v;
};

// Attention KL over heads: (1 / (heads * n)) sum_a sum_i KL(A_t || A_s).
inline double attention_loss(const std::vector<Head>& t, const std::vector<Head>& s, std::size_t n) {
  double total = 0;
  for (std::size_t a = 0; a < t.size(); ++a) {
    const Matrix at = relation(t[a].q, t[a].k, static_cast<double>(t[a].q[0].size()), n);
    const Matrix as = relation(s[a].q, s[a].k, static_cast<double>(s[a].q[0].size()), n);
    total += kl(at, as);
  }
  return total / static_cast<double>(t.size());
}

inline Matrix value_relation(const Matrix& v, std::size_t n) {
  return relation(v, v, static_cast<double>(v[0].size()), n);
}

inline double value_relation_loss(const std::vector<Head>& t, const std::vector<Head>& s, std::size_t n) {
  double total = 0;
  for (std::size_t a = 0; a < t.size(); ++a) total += kl(value_relation(t[a].v, n), value_relation(s[a].v, n));
  return total / static_cast<double>(t.size());
}

inline double minilm_loss(const std::vector<Head>& t, const std::vector<Head>& s, std::size_t n) {
  return attention_loss(t, s, n) + value_relation_loss(t, s, n);
}

// Hidden rows split into `heads` column groups; relation KL averaged over groups.
inline double hidden_relation_loss(const Matrix& th, const Matrix& sh, std::size_t heads, std::size_t n) {
  double total = 0;
  const std::size_t wt = th[0].size() / heads, ws = sh[0].size() / heads;
  for (std::size_t a = 0; a < heads; ++a) {
    Matrix tp(n), sp(n);
    for (std::size_t i = 0; i < n; ++i) {
      tp[i].assign(th[i].begin() + a * wt, th[i].begin() + (a + 1) * wt);
      sp[i].assign(sh[i].begin() + a * ws, sh[i].begin() + (a + 1) * ws);
    }
    total += kl(relation(tp, tp, static_cast<double>(wt), n), relation(sp, sp, static_cast<double>(ws), n));
  }
  return total / static_cast<double>(heads);
}

inline std::vector<Head> random_heads(std::size_t heads, std::size_t len, std::size_t dk, std::mt19937_64& rng) {
  std::vector<Head> out;
  for (std::size_t a = 0; a < heads; ++a) {
    out.push_back({random_matrix(len, dk, rng), random_matrix(len, dk, rng), random_matrix(len, dk, rng)});
  }
  return out;
}

inline minidistill::Tensor<double> to_tensor(const Matrix& m, bool requires_grad = false) {
  std::vector<double> flat;
  for (const auto& r : m) flat.insert(flat.end(), r.begin(), r.end());
  return minidistill::Tensor<double>::matrix(m.size(), m[0].size(), std::move(flat), requires_grad);
}

// Builds the capture a model would record for these heads: scores over the
// whole length, attention softmaxed over keys < valid_len (rows >= valid_len
// also attend to valid keys only).
inline minidistill::LayerCapture<double> capture(const std::vector<Head>& heads, std::size_t valid_len) {
  minidistill::LayerCapture<double> cap;
  cap.layer = 1;
  for (const auto& h : heads) {
    const std::size_t len = h.q.size();
    const double dk = static_cast<double>(h.q[0].size());
    Matrix scores(len, std::vector<double>(len)), att(len, std::vector<double>(len, 0.0));
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = 0; j < len; ++j) scores[i][j] = dot(h.q[i], h.k[j]) / std::sqrt(dk);
      double mx = -1e300, z = 0;
      for (std::size_t j = 0; j < valid_len; ++j) mx = std::max(mx, scores[i][j]);
      for (std::size_t j = 0; j < valid_len; ++j) z += std::exp(scores[i][j] - mx);
      for (std::size_t j = 0; j < valid_len; ++j) att[i][j] = std::exp(scores[i][j] - mx) / z;
    }
    cap.heads.push_back({to_tensor(h.q), to_tensor(h.k), to_tensor(h.v), to_tensor(scores), to_tensor(att)});
  }
  return cap;
}

}  // namespace oracle
