#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "minidistill/errors.hpp"
#include "minidistill/ops.hpp"
#include "minidistill/tensor.hpp"

using namespace minidistill;
using D = Tensor<double>;

TEST_CASE("tensor construction validates shape and values") {
  CHECK_THROWS_AS(D::from({2, 3}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(D::from({2}, {1.0, std::numeric_limits<double>::quiet_NaN()}), NumericError);
  CHECK_THROWS_AS(D::from({1}, {std::numeric_limits<double>::infinity()}), NumericError);

  D t = D::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.at(1, 2) == 6);
  CHECK(shape_numel(t.shape()) == t.size());
  CHECK(t.grad().empty());

  t.set_requires_grad(true);
  CHECK(t.grad().size() == t.size());
  CHECK(shape_to_string(t.shape()) == "[2x3]");
}

TEST_CASE("detach and clone copy values") {
  D a = D::from({3}, {1, 2, 3}, true);
  D d = a.detach();
  CHECK_FALSE(d.requires_grad());
  CHECK_FALSE(d.same_storage(a));
  D c = a.clone();
  CHECK(c.requires_grad());
  c.mutable_values()[0] = 9;
  CHECK(a[0] == 1);
}

TEST_CASE("backward of sum gives ones") {
  D w = D::from({2, 3}, {0.5, -1, 2, 3, 4, -7}, true);
  Tape<double> tape;
  D loss = sum(w);
  tape.backward(loss);
  for (double g : w.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward through mse of a 1x1 product") {
  D w = D::matrix(1, 1, {2}, true);
  D x = D::matrix(1, 1, {3});
  D y = D::matrix(1, 1, {0});
  Tape<double> tape;
  D loss = mse(matmul(w, x), y);
  tape.backward(loss);
  CHECK(loss.item() == doctest::Approx(36.0));
  CHECK(w.grad()[0] == doctest::Approx(36.0));
}

TEST_CASE("tape replays in reverse order") {
  std::vector<int> order;
  Tape<double> tape;
  D x = D::scalar(1.0, true);
  for (int i = 0; i < 4; ++i) tape.record("op" + std::to_string(i), [&order, i] { order.push_back(i); });
  D loss = scale(x, 2.0);
  tape.backward(loss);
  REQUIRE(order.size() == 4);
  CHECK(order == std::vector<int>{3, 2, 1, 0});
  CHECK(tape.op_names().back() == "scale");
}

TEST_CASE("each ancestor is updated once per backward") {
  D a = D::from({2}, {1, 2}, true);
  Tape<double> tape;
  D b = scale(a, 3.0);
  D loss = sum(add(b, b));
  tape.backward(loss);
  CHECK(a.grad()[0] == doctest::Approx(6.0));
  CHECK(a.grad()[1] == doctest::Approx(6.0));
}

TEST_CASE("backward error surfaces") {
  SUBCASE("non-scalar loss") {
    D a = D::from({2}, {1, 2}, true);
    Tape<double> tape;
    D b = scale(a, 2.0);
    CHECK_THROWS_AS(tape.backward(b), AutodiffError);
  }
  SUBCASE("second backward without reset") {
    D a = D::from({2}, {1, 2}, true);
    Tape<double> tape;
    D loss = sum(a);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), AutodiffError);
    tape.reset();
    a.zero_grad();
    D again = sum(a);
    tape.backward(again);
    CHECK(a.grad()[0] == 1.0);
  }
  SUBCASE("loss not produced on the tape") {
    D a = D::scalar(1.0);
    Tape<double> tape;
    CHECK_THROWS_AS(tape.backward(a), AutodiffError);
  }
}

TEST_CASE("no recording without a tape or while paused") {
  D a = D::from({2}, {1, 2}, true);
  D out = scale(a, 2.0);
  CHECK_FALSE(out.requires_grad());

  Tape<double> tape;
  {
    Tape<double>::Pause pause;
    CHECK_FALSE(Tape<double>::recording());
    D paused = scale(a, 2.0);
    CHECK_FALSE(paused.requires_grad());
  }
  CHECK(Tape<double>::recording());
  CHECK(tape.size() == 0);
}

TEST_CASE("nested tapes restore the outer tape") {
  Tape<double> outer;
  CHECK(Tape<double>::active() == &outer);
  {
    Tape<double> inner;
    CHECK(Tape<double>::active() == &inner);
  }
  CHECK(Tape<double>::active() == &outer);
  CHECK(Tape<float>::active() == nullptr);
}
