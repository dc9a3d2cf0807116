#pragma once

#include <functional>
#include <string>
#include <vector>

#include "minidistill/tensor.hpp"

namespace minidistill {

// A scalar function of some float64 inputs. `loss` is evaluated once under a
// tape for the analytic gradient and repeatedly without one for central
// differences.
struct GradProblem {
  std::vector<Tensor<double>> inputs;
  std::function<Tensor<double>()> loss;
};

struct GradCheck {
  std::string name;   // op or loss mode being checked
  std::string group;  // "ops", "losses" or "model"
  std::function<GradProblem()> build;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-5;
};

struct GradCheckResult {
  std::string name;
  std::string group;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  bool passed = false;
  std::string error;  // exception text when the check could not run
};

GradCheckResult run_gradcheck(const GradCheck& check, const GradCheckOptions& options = {});

// Every differentiable op, every distillation loss mode and the MLM model
// path; `group` is "all", "ops", "losses" or "model" ("losses" and "model"
// imply nothing else).
std::vector<GradCheck> default_gradchecks(const std::string& group = "all");

// A kl_div_rows check whose backward has its sign flipped; exists to show
// that the harness notices broken gradients.
GradCheck sign_flipped_kl_check();

std::vector<GradCheckResult> run_gradchecks(const std::vector<GradCheck>& checks,
                                            const GradCheckOptions& options = {});

// 0 when every result passed, 1 otherwise.
int gradcheck_exit_code(const std::vector<GradCheckResult>& results);

std::string format_gradcheck(const std::vector<GradCheckResult>& results);

}  // namespace minidistill
