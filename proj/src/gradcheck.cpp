#include "minidistill/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "minidistill/data.hpp"
#include "minidistill/losses.hpp"
#include "minidistill/model.hpp"
#include "minidistill/ops.hpp"
#include "minidistill/trainer.hpp"

namespace minidistill {

GradCheckResult run_gradcheck(const GradCheck& check, const GradCheckOptions& options) {
  GradCheckResult result;
  result.name = check.name;
  result.group = check.group;
  try {
    GradProblem problem = check.build();
    for (auto& t : problem.inputs) {
      if (!t.requires_grad()) t.set_requires_grad(true);
      t.zero_grad();
    }
    {
      Tape<double> tape;
      Tensor<double> loss = problem.loss();
      tape.backward(loss);
    }
    typename Tape<double>::Pause numeric;
    for (auto& t : problem.inputs) {
      auto values = t.mutable_values();
      auto grad = t.grad();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + options.step;
        const double plus = problem.loss().item();
        values[i] = saved - options.step;
        const double minus = problem.loss().item();
        values[i] = saved;
        const double numeric_grad = (plus - minus) / (2.0 * options.step);
        const double denom = std::max({std::abs(grad[i]), std::abs(numeric_grad), options.floor});
        result.max_rel_error = std::max(result.max_rel_error, std::abs(grad[i] - numeric_grad) / denom);
        ++result.checked;
      }
    }
    result.passed = result.checked > 0 && result.max_rel_error < options.tolerance;
  } catch (const std::exception& e) {
    result.error = e.what();
    result.passed = false;
  }
  return result;
}

std::vector<GradCheckResult> run_gradchecks(const std::vector<GradCheck>& checks,
                                            const GradCheckOptions& options) {
  std::vector<GradCheckResult> out;
  out.reserve(checks.size());
  for (const auto& c : checks) out.push_back(run_gradcheck(c, options));
  return out;
}

int gradcheck_exit_code(const std::vector<GradCheckResult>& results) {
  const bool ok = !results.empty() &&
                  std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
  return ok ? 0 : 1;
}

std::string format_gradcheck(const std::vector<GradCheckResult>& results) {
  std::ostringstream os;
  char line[256];
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-6s %-8s %-28s checked=%-6zu max_rel_err=%.3e", r.passed ? "PASS" : "FAIL",
                  r.group.c_str(), r.name.c_str(), r.checked, r.max_rel_error);
    os << line;
    if (!r.error.empty()) os << "  error: " << r.error;
    os << '\n';
  }
  return os.str();
}

namespace {

using D = Tensor<double>;

D random_tensor(Shape shape, std::mt19937_64& rng, double lo = -6.0, double hi = 6.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return D::from(std::move(shape), std::move(v), true);
}

// Reduces a non-scalar output to a scalar with a non-trivial upstream gradient.
D probe(const D& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> target(out.size());
  for (double& x : target) x = u(rng);
  return mse(out, D::from(out.shape(), std::move(target)));
}

GradCheck op_check(std::string name, std::function<GradProblem(std::mt19937_64&)> make) {
  return {std::move(name), "ops", [make] {
            std::mt19937_64 rng(1234);
            return make(rng);
          }};
}

std::vector<GradCheck> op_checks() {
  std::vector<GradCheck> checks;
  checks.push_back(op_check("matmul", [](std::mt19937_64& rng) {
    D a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    return GradProblem{{a, b}, [a, b] { return probe(matmul(a, b), 1); }};
  }));
  checks.push_back(op_check("transpose", [](std::mt19937_64& rng) {
    D a = random_tensor({3, 5}, rng);
    return GradProblem{{a}, [a] { return probe(transpose(a), 2); }};
  }));
  checks.push_back(op_check("add", [](std::mt19937_64& rng) {
    D a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    return GradProblem{{a, b}, [a, b] { return probe(add(a, b), 3); }};
  }));
  checks.push_back(op_check("add_bias", [](std::mt19937_64& rng) {
    D x = random_tensor({4, 3}, rng), b = random_tensor({3}, rng);
    return GradProblem{{x, b}, [x, b] { return probe(add_bias(x, b), 4); }};
  }));
  checks.push_back(op_check("scale", [](std::mt19937_64& rng) {
    D x = random_tensor({2, 5}, rng);
    return GradProblem{{x}, [x] { return probe(scale(x, 0.37), 5); }};
  }));
  checks.push_back(op_check("sum", [](std::mt19937_64& rng) {
    D x = random_tensor({3, 3}, rng);
    return GradProblem{{x}, [x] { return sum(x); }};
  }));
  checks.push_back(op_check("gelu", [](std::mt19937_64& rng) {
    D x = random_tensor({3, 6}, rng);
    return GradProblem{{x}, [x] { return probe(gelu(x), 6); }};
  }));
  checks.push_back(op_check("layernorm", [](std::mt19937_64& rng) {
    D x = random_tensor({2, 6}, rng), g = random_tensor({6}, rng, 0.5, 1.5), b = random_tensor({6}, rng);
    return GradProblem{{x, g, b}, [x, g, b] { return probe(layernorm(x, g, b, 1e-12), 7); }};
  }));
  checks.push_back(op_check("softmax_rows", [](std::mt19937_64& rng) {
    D x = random_tensor({3, 4}, rng);
    D mask = D::matrix(3, 4, {1, 1, 0, 1, 1, 1, 1, 1, 0, 1, 1, 0});
    return GradProblem{{x}, [x, mask] { return probe(softmax_rows(x, &mask), 8); }};
  }));
  checks.push_back(op_check("log_softmax_rows", [](std::mt19937_64& rng) {
    D x = random_tensor({3, 5}, rng);
    return GradProblem{{x}, [x] { return probe(log_softmax_rows(x), 9); }};
  }));
  checks.push_back(op_check("kl_div_rows", [](std::mt19937_64& rng) {
    D p = softmax_rows(random_tensor({4, 5}, rng).detach());
    D z = random_tensor({4, 5}, rng);
    return GradProblem{{z}, [p, z] { return kl_div_rows(p, softmax_rows(z)); }};
  }));
  checks.push_back(op_check("kl_div_log_rows", [](std::mt19937_64& rng) {
    D p = softmax_rows(random_tensor({4, 5}, rng).detach());
    D z = random_tensor({4, 5}, rng);
    return GradProblem{{z}, [p, z] { return kl_div_log_rows(p, log_softmax_rows(z)); }};
  }));
  checks.push_back(op_check("mse", [](std::mt19937_64& rng) {
    D a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    return GradProblem{{a, b}, [a, b] { return mse(a, b); }};
  }));
  checks.push_back(op_check("nll_rows", [](std::mt19937_64& rng) {
    D x = random_tensor({4, 6}, rng);
    return GradProblem{{x}, [x] {
                         const std::vector<int> targets{0, 5, 2, 2};
                         return nll_rows(x, targets);
                       }};
  }));
  checks.push_back(op_check("embedding_lookup", [](std::mt19937_64& rng) {
    D table = random_tensor({6, 3}, rng);
    return GradProblem{{table}, [table] {
                         const std::vector<int> ids{1, 4, 1, 0, 5};
                         return probe(embedding_lookup(table, ids), 10);
                       }};
  }));
  checks.push_back(op_check("block", [](std::mt19937_64& rng) {
    D x = random_tensor({5, 6}, rng);
    return GradProblem{{x}, [x] { return probe(block(x, 1, 3, 2, 3), 11); }};
  }));
  checks.push_back(op_check("concat_cols", [](std::mt19937_64& rng) {
    D a = random_tensor({3, 2}, rng), b = random_tensor({3, 4}, rng);
    return GradProblem{{a, b}, [a, b] { return probe(concat_cols<double>({a, b}), 12); }};
  }));
  checks.push_back(op_check("concat_rows", [](std::mt19937_64& rng) {
    D a = random_tensor({2, 3}, rng), b = random_tensor({4, 3}, rng);
    return GradProblem{{a, b}, [a, b] { return probe(concat_rows<double>({a, b}), 13); }};
  }));
  checks.push_back(op_check("dropout", [](std::mt19937_64& rng) {
    D x = random_tensor({4, 5}, rng);
    return GradProblem{{x}, [x] {
                         std::mt19937_64 mask_rng(99);
                         return probe(dropout(x, 0.3, mask_rng), 14);
                       }};
  }));
  return checks;
}

ModelConfig toy_config(int layers, int hidden, int heads) {
  ModelConfig c;
  c.num_layers = layers;
  c.hidden = hidden;
  c.heads = heads;
  c.ffn_dim = 2 * hidden;
  c.vocab_size = 14;
  c.max_seq_len = 8;
  c.dropout = 0.0;
  c.layernorm_eps = 1e-12;
  return c;
}

// Two sequences of 6 and 4 tokens (the second padded) with a few masked slots.
MaskedBatch toy_batch() {
  MaskedBatch b;
  b.batch = 2;
  b.seq_len = 6;
  b.token_ids = {kClsId, 7, kMaskId, 9, 11, kSepId, kClsId, 12, kMaskId, kSepId, kPadId, kPadId};
  b.segment_ids.assign(12, 0);
  b.attn_mask = {1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0};
  b.masked_positions = {{2, 4}, {2}};
  b.labels = {{8, 11}, {6}};
  b.valid_len = {6, 4};
  return b;
}

// Default init (std 0.02) leaves the toy losses almost flat and the gradients
// near the finite-difference noise floor; redraw every parameter at a larger
// scale instead.
std::shared_ptr<TransformerModel<double>> toy_model(const ModelConfig& config, std::uint64_t seed) {
  auto model = std::make_shared<TransformerModel<double>>(TransformerModel<double>::init(config, seed));
  std::mt19937_64 rng(seed * 7919 + 1);
  std::uniform_real_distribution<double> weight(-0.5, 0.5), gain(0.5, 1.5);
  for (const auto& p : model->parameters()) {
    const bool is_gain = p.name.ends_with(".gamma");
    for (double& v : D(p.tensor).mutable_values()) v = is_gain ? gain(rng) : weight(rng);
  }
  return model;
}

std::vector<D> param_tensors(const TransformerModel<double>& m) {
  std::vector<D> out;
  for (const auto& p : m.parameters()) out.push_back(p.tensor);
  return out;
}

GradCheck loss_check(LossMode mode) {
  return {"loss:" + std::string(to_string(mode)), "losses", [mode] {
            const auto teacher = toy_model(toy_config(2, 12, 2), 17);
            teacher->set_trainable(false);
            const auto student = toy_model(toy_config(2, 8, 2), 29);
            DistillSpec spec;
            spec.mode = mode;
            spec.temperature = 2.0;
            GradProblem problem;
            problem.inputs = param_tensors(*student);
            std::shared_ptr<D> projection;
            if (mode == LossMode::value_mse) {
              projection = std::make_shared<D>(
                  make_value_projection<double>(teacher->config(), student->config(), 5));
              problem.inputs.push_back(*projection);
            }
            const MaskedBatch batch = toy_batch();
            problem.loss = [teacher, student, spec, batch, projection] {
              return distill_objective(*teacher, *student, spec, batch, projection.get()).total;
            };
            return problem;
          }};
}

std::vector<GradCheck> loss_checks() {
  std::vector<GradCheck> checks;
  for (LossMode mode : {LossMode::minilm, LossMode::att_only, LossMode::soft_label,
                        LossMode::layer_to_layer, LossMode::value_mse, LossMode::hidden_relation}) {
    checks.push_back(loss_check(mode));
  }
  return checks;
}

std::vector<GradCheck> model_checks() {
  std::vector<GradCheck> checks;
  checks.push_back({"model:mlm_cross_entropy", "model", [] {
                      const auto model = toy_model(toy_config(2, 8, 2), 41);
                      const MaskedBatch batch = toy_batch();
                      return GradProblem{param_tensors(*model),
                                         [model, batch] { return mlm_loss(*model, batch).loss; }};
                    }});
  checks.push_back({"model:encode_hidden", "model", [] {
                      const auto model = toy_model(toy_config(1, 8, 2), 43);
                      const MaskedBatch batch = toy_batch();
                      return GradProblem{param_tensors(*model), [model, batch] {
                                           return probe(model->encode(batch.encoder_input()).hidden, 15);
                                         }};
                    }});
  return checks;
}

}  // namespace

std::vector<GradCheck> default_gradchecks(const std::string& group) {
  std::vector<GradCheck> checks;
  const bool all = group == "all";
  if (!all && group != "ops" && group != "losses" && group != "model") {
    throw std::invalid_argument("unknown gradcheck group '" + group + "'");
  }
  auto append = [&checks](std::vector<GradCheck> more) {
    checks.insert(checks.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
  };
  if (all || group == "ops") append(op_checks());
  if (all || group == "losses") append(loss_checks());
  if (all || group == "model") append(model_checks());
  return checks;
}

GradCheck sign_flipped_kl_check() {
  return op_check("kl_div_rows", [](std::mt19937_64& rng) {
    D p = softmax_rows(random_tensor({4, 5}, rng).detach());
    D z = random_tensor({4, 5}, rng);
    auto broken_kl = [](const D& p, const D& q) {
      D out = kl_div_rows(p.detach(), q.detach());
      if (Tape<double>::recording() && q.requires_grad()) {
        out.set_requires_grad(true);
        Tape<double>::active()->record("kl_div_rows", [p, q, out] {
          const double g = out.grad()[0] / static_cast<double>(p.rows());
          auto gq = D(q).mutable_grad();
          for (std::size_t i = 0; i < gq.size(); ++i) {
            if (p[i] != 0.0) gq[i] += g * p[i] / q[i];  // wrong sign
          }
        });
      }
      return out;
    };
    return GradProblem{{z}, [p, z, broken_kl] { return broken_kl(p, softmax_rows(z)); }};
  });
}

}  // namespace minidistill
