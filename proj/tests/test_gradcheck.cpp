#include <set>
#include <string>

#include "doctest.h"
#include "minidistill/gradcheck.hpp"

using namespace minidistill;

TEST_CASE("suite covers every differentiable op and loss mode exactly once") {
  const auto checks = default_gradchecks("all");
  std::multiset<std::string> names;
  for (const auto& c : checks) names.insert(c.name);
  const std::set<std::string> expected{
      "matmul", "transpose", "add", "add_bias", "scale", "sum", "gelu", "layernorm", "softmax_rows",
      "log_softmax_rows", "kl_div_rows", "kl_div_log_rows", "mse", "nll_rows", "embedding_lookup", "block",
      "concat_cols", "concat_rows", "dropout", "loss:minilm", "loss:att-only", "loss:soft-label",
      "loss:layer2layer", "loss:value-mse", "loss:hidden-relation", "model:mlm_cross_entropy",
      "model:encode_hidden"};
  CHECK(names.size() == expected.size());
  for (const auto& n : expected) CHECK(names.count(n) == 1);

  CHECK(default_gradchecks("losses").size() == 6);
  CHECK(default_gradchecks("model").size() == 2);
  CHECK_THROWS(default_gradchecks("everything"));
}

TEST_CASE("op and model checks pass") {
  for (const char* group : {"ops", "model"}) {
    const auto results = run_gradchecks(default_gradchecks(group));
    for (const auto& r : results) {
      CAPTURE(r.name);
      CAPTURE(r.error);
      CHECK(r.passed);
      CHECK(r.max_rel_error < 1e-4);
      CHECK(r.checked > 0);
    }
    CHECK(gradcheck_exit_code(results) == 0);
  }
}

TEST_CASE("a sign-flipped KL backward is caught") {
  const auto results = run_gradchecks({sign_flipped_kl_check()});
  REQUIRE(results.size() == 1);
  CHECK_FALSE(results[0].passed);
  CHECK(results[0].name == "kl_div_rows");
  CHECK(gradcheck_exit_code(results) == 1);
  CHECK(format_gradcheck(results).find("FAIL") != std::string::npos);
  CHECK(gradcheck_exit_code({}) == 1);
}

TEST_CASE("a throwing problem is reported as a failure") {
  const GradCheck broken{"broken", "ops", []() -> GradProblem { throw std::runtime_error("boom"); }};
  const auto r = run_gradcheck(broken);
  CHECK_FALSE(r.passed);
  CHECK(r.error == "boom");
}
