#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "minidistill/errors.hpp"
#include "minidistill/gradcheck.hpp"
#include "minidistill/ops.hpp"

using namespace minidistill;
using D = Tensor<double>;

namespace {

D uniform(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return D::from(std::move(shape), std::move(v), true);
}

std::vector<double> naive_matmul(const D& a, const D& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a.at(i, p) * b.at(p, j);
  return out;
}

GradCheckResult fd(std::string name, std::function<GradProblem()> build) {
  return run_gradcheck({std::move(name), "ops", std::move(build)});
}

}  // namespace

TEST_CASE("matmul examples") {
  D eye = D::matrix(2, 2, {1, 0, 0, 1});
  D m = D::matrix(2, 2, {1, 2, 3, 4});
  D out = matmul(eye, m);
  CHECK(std::vector<double>(out.values().begin(), out.values().end()) == std::vector<double>{1, 2, 3, 4});
  CHECK(matmul(D::matrix(1, 2, {1, 2}), D::matrix(2, 1, {3, 4})).item() == 11.0);
  CHECK_THROWS_AS(matmul(D::matrix(1, 2, {1, 2}), D::matrix(1, 2, {1, 2})), ShapeError);
}

TEST_CASE("matmul agrees with a triple loop") {
  std::mt19937_64 rng(3);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, std::tuple{3, 4, 2}, std::tuple{17, 9, 23}, std::tuple{64, 33, 5}}) {
    D a = uniform({std::size_t(m), std::size_t(k)}, rng), b = uniform({std::size_t(k), std::size_t(n)}, rng);
    const auto ref = naive_matmul(a, b);
    const D got = matmul(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("matmul gradient on a random 3x4 by 4x2") {
  auto r = fd("matmul", [] {
    std::mt19937_64 rng(11);
    D a = uniform({3, 4}, rng), b = uniform({4, 2}, rng), w = uniform({3, 2}, rng).detach();
    return GradProblem{{a, b}, [a, b, w] { return mse(matmul(a, b), w); }};
  });
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("matmul flop counter") {
  reset_matmul_flops();
  matmul(D::zeros({3, 4}), D::zeros({4, 5}));
  CHECK(matmul_flops() == 2 * 3 * 4 * 5);
}

TEST_CASE("softmax_rows examples") {
  D s = softmax_rows(D::matrix(1, 2, {0, 0}));
  CHECK(s[0] == doctest::Approx(0.5));
  CHECK(s[1] == doctest::Approx(0.5));

  s = softmax_rows(D::matrix(1, 2, {1, 0}));
  CHECK(s[0] == doctest::Approx(0.73106).epsilon(1e-4));
  CHECK(s[1] == doctest::Approx(0.26894).epsilon(1e-4));

  D mask = D::matrix(1, 3, {1, 1, 0});
  s = softmax_rows(D::matrix(1, 3, {5, 5, 5}), &mask);
  CHECK(s[0] == doctest::Approx(0.5));
  CHECK(s[1] == doctest::Approx(0.5));
  CHECK(s[2] == 0.0);

  D none = D::matrix(1, 3, {0, 0, 0});
  CHECK_THROWS_AS(softmax_rows(D::matrix(1, 3, {1, 2, 3}), &none), DegenerateMaskError);
}

TEST_CASE("softmax rows sum to one and masked entries are exact zeros") {
  std::mt19937_64 rng(5);
  D x = uniform({6, 7}, rng, -20, 20);
  std::vector<double> m(42);
  std::bernoulli_distribution keep(0.6);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 7; ++j) m[i * 7 + j] = keep(rng) ? 1 : 0;
    m[i * 7 + i] = 1;
  }
  D mask = D::matrix(6, 7, m);
  D s = softmax_rows(x, &mask);
  for (std::size_t i = 0; i < 6; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      if (m[i * 7 + j] == 0) CHECK(s.at(i, j) == 0.0);
      total += s.at(i, j);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("log_softmax matches log of softmax") {
  std::mt19937_64 rng(6);
  D x = uniform({3, 5}, rng, -6, 6);
  D a = log_softmax_rows(x), b = softmax_rows(x);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(std::log(b[i])).epsilon(1e-12));
}

TEST_CASE("kl_div_rows examples") {
  D p = D::matrix(2, 3, {0.2, 0.3, 0.5, 0.1, 0.1, 0.8});
  CHECK(kl_div_rows(p, p).item() == doctest::Approx(0.0));
  CHECK(kl_div_rows(D::matrix(1, 2, {1, 0}), D::matrix(1, 2, {0.5, 0.5})).item() ==
        doctest::Approx(0.69315).epsilon(1e-5));
  CHECK(kl_div_log_rows(D::matrix(1, 2, {1, 0}), D::matrix(1, 2, {std::log(0.5), std::log(0.5)})).item() ==
        doctest::Approx(std::log(2.0)));
}

TEST_CASE("kl_div_rows rejects bad distributions") {
  CHECK_THROWS_AS(kl_div_rows(D::matrix(1, 2, {0.5, 0.6}), D::matrix(1, 2, {0.5, 0.5})), NormalizationError);
  CHECK_THROWS_AS(kl_div_rows(D::matrix(1, 2, {0.5, 0.5}), D::matrix(1, 2, {0.7, 0.5})), NormalizationError);
  CHECK_THROWS_AS(kl_div_rows(D::matrix(1, 2, {0.5, 0.5}), D::matrix(1, 2, {1.0, 0.0})), SupportError);
  CHECK_THROWS_AS(kl_div_rows(D::matrix(1, 2, {0.5, 0.5}), D::matrix(2, 1, {0.5, 0.5})), ShapeError);
  // zero teacher mass where q is zero is fine (0 ln 0 = 0)
  CHECK(kl_div_rows(D::matrix(1, 2, {1, 0}), D::matrix(1, 2, {1, 0})).item() == 0.0);
}

TEST_CASE("kl_div_rows gradient on random 4x5 distributions") {
  auto r = fd("kl_div_rows", [] {
    std::mt19937_64 rng(12);
    D p = softmax_rows(uniform({4, 5}, rng).detach());
    D z = uniform({4, 5}, rng);
    return GradProblem{{z}, [p, z] { return kl_div_rows(p, softmax_rows(z)); }};
  });
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("layernorm examples") {
  D one = D::full({2}, 1.0), zero = D::zeros({2});
  D c = layernorm(D::matrix(1, 2, {3, 3}), one, zero, 1e-12);
  CHECK(c[0] == 0.0);
  CHECK(c[1] == 0.0);
  D y = layernorm(D::matrix(1, 2, {1, 3}), one, zero, 0.0);
  CHECK(y[0] == doctest::Approx(-1.0));
  CHECK(y[1] == doctest::Approx(1.0));
}

TEST_CASE("layernorm gradient on random 2x6 input") {
  auto r = fd("layernorm", [] {
    std::mt19937_64 rng(13);
    D x = uniform({2, 6}, rng), g = uniform({6}, rng, 0.5, 1.5), b = uniform({6}, rng);
    D w = uniform({2, 6}, rng).detach();
    return GradProblem{{x, g, b}, [x, g, b, w] { return mse(layernorm(x, g, b, 1e-12), w); }};
  });
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("gelu and mse examples") {
  CHECK(gelu(D::scalar(0.0)).item() == 0.0);
  CHECK(gelu(D::scalar(1.0)).item() == doctest::Approx(0.841192).epsilon(1e-5));
  D x = D::from({3}, {1, -2, 3});
  CHECK(mse(x, x).item() == 0.0);
  CHECK(mse(D::from({2}, {0, 2}), D::from({2}, {0, 0})).item() == doctest::Approx(2.0));
}

TEST_CASE("indexing ops") {
  D table = D::matrix(3, 2, {0, 1, 10, 11, 20, 21});
  const std::vector<int> ids{2, 0, 2};
  D rows = embedding_lookup(table, ids);
  CHECK(rows.at(0, 1) == 21);
  CHECK(rows.at(1, 0) == 0);
  const std::vector<int> bad{3};
  CHECK_THROWS_AS(embedding_lookup(table, bad), std::out_of_range);

  D blk = block(D::matrix(3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9}), 1, 2, 1, 2);
  CHECK(std::vector<double>(blk.values().begin(), blk.values().end()) == std::vector<double>{5, 6, 8, 9});

  D lp = log_softmax_rows(D::matrix(2, 2, {0, 0, 0, 0}));
  const std::vector<int> targets{0, 1};
  CHECK(nll_rows(lp, targets).item() == doctest::Approx(std::log(2.0)));

  D cc = concat_cols<double>({D::matrix(2, 1, {1, 2}), D::matrix(2, 2, {3, 4, 5, 6})});
  CHECK(cc.at(1, 0) == 2);
  CHECK(cc.at(1, 2) == 6);
  D cr = concat_rows<double>({D::matrix(1, 2, {1, 2}), D::matrix(1, 2, {3, 4})});
  CHECK(cr.at(1, 1) == 4);
  CHECK(transpose(cc).at(2, 1) == 6);
}

TEST_CASE("dropout") {
  std::mt19937_64 rng(1);
  D x = D::full({1000}, 1.0);
  D same = dropout(x, 0.0, rng);
  CHECK(same.same_storage(x));
  D d = dropout(x, 0.25, rng);
  int zeros = 0;
  double total = 0;
  for (double v : d.values()) {
    zeros += v == 0.0;
    total += v;
  }
  CHECK(zeros > 200);
  CHECK(zeros < 300);
  CHECK(total / 1000 == doctest::Approx(1.0).epsilon(0.1));
}
