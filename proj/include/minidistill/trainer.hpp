#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "minidistill/data.hpp"
#include "minidistill/losses.hpp"
#include "minidistill/model.hpp"

namespace minidistill {

// Linear warmup to peak_lr, then linear decay to zero at total_steps.
struct Schedule {
  double peak_lr = 5e-4;
  int warmup_steps = 4000;
  int total_steps = 400000;

  void validate() const;
  double lr_at(int step) const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.01;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::int64_t step = 0;
};

// Bias-corrected Adam with decoupled weight decay (skipped for parameters
// whose `decay` flag is false). Throws NumericError on a non-finite gradient.
template <typename T>
void adam_step(std::span<const NamedParam<T>> params, AdamState<T>& state, double lr);

// Rescales gradients so their global L2 norm is at most max_norm (no-op when
// max_norm <= 0). Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<const NamedParam<T>> params, double max_norm);

struct StepMetrics {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double loss_at = 0.0;
  double loss_vr = 0.0;
  std::optional<double> mlm_acc;

  // {"step":..,"lr":..,"loss":..,"loss_at":..,"loss_vr":..[,"mlm_acc":..]}
  std::string to_json() const;
};

using MetricsSink = std::function<void(const StepMetrics&)>;

struct TrainOptions {
  int steps = 1000;
  int batch_size = 16;
  double peak_lr = 5e-4;
  int warmup_steps = -1;  // -1: min(4000, steps / 10)
  AdamConfig adam;
  double clip_norm = 1.0;
  double mask_rate = 0.15;
  std::uint64_t seed = 0;

  Schedule schedule() const;
};

// Tokenised documents sharing one vocabulary; documents longer than
// max_seq_len - 2 are truncated.
struct TrainingData {
  Vocab vocab;
  std::vector<std::vector<int>> documents;
  std::size_t max_seq_len = 0;

  static TrainingData from_documents(const std::vector<std::string>& docs, Vocab vocab,
                                     std::size_t max_seq_len);
};

// Seeded stream of masked batches drawn uniformly from the documents.
class BatchSampler {
 public:
  BatchSampler(const TrainingData& data, int batch_size, double mask_rate, std::uint64_t seed);
  MaskedBatch next();

 private:
  const TrainingData* data_;
  int batch_size_;
  double mask_rate_;
  std::mt19937_64 rng_;
};

template <typename T>
struct TrainResult {
  TransformerModel<T> model;
  std::vector<StepMetrics> metrics;
};

// Masked-LM cross entropy on masked positions; also reports top-1 accuracy.
template <typename T>
struct MlmOutput {
  Tensor<T> loss;
  double accuracy = 0.0;
};

template <typename T>
MlmOutput<T> mlm_loss(const TransformerModel<T>& model, const MaskedBatch& batch,
                      std::mt19937_64* dropout_rng = nullptr);

// Trains a teacher from scratch; config.vocab_size must equal data.vocab.size().
template <typename T>
TrainResult<T> pretrain_teacher(const ModelConfig& config, const TrainingData& data,
                                const TrainOptions& options, const MetricsSink& sink = {});

template <typename T>
struct StageResult {
  TransformerModel<T> student;
  std::vector<StepMetrics> metrics;
  Tensor<T> projection;  // value-mse only
};

// Distillation objective evaluated on one batch. The teacher runs without a
// tape and without dropout; only student tensors (and `projection`) receive
// gradients.
template <typename T>
LossTerms<T> distill_objective(const TransformerModel<T>& teacher, const TransformerModel<T>& student,
                               const DistillSpec& spec, const MaskedBatch& batch,
                               const Tensor<T>* projection = nullptr,
                               std::mt19937_64* student_dropout = nullptr);

// Builds the value-mse projection (identity when head dims match).
template <typename T>
Tensor<T> make_value_projection(const ModelConfig& teacher, const ModelConfig& student,
                                std::uint64_t seed);

template <typename T>
StageResult<T> distill_stage(const TransformerModel<T>& teacher, TransformerModel<T> student,
                             const DistillSpec& spec, const TrainingData& data,
                             const TrainOptions& options, const MetricsSink& sink = {});

// Convenience overload: student initialised with init(student_config, options.seed).
template <typename T>
StageResult<T> distill_stage(const TransformerModel<T>& teacher, const ModelConfig& student_config,
                             const DistillSpec& spec, const TrainingData& data,
                             const TrainOptions& options, const MetricsSink& sink = {});

// Mean last-layer attention KL of `student` against `teacher` over `batches`
// batches from `data`.
template <typename T>
double attention_kl(const TransformerModel<T>& teacher, const TransformerModel<T>& student,
                    const TrainingData& data, int batches, int batch_size, std::uint64_t seed);

// --- teacher-assistant plans -------------------------------------------------

struct TaRequest {
  enum class Mode { automatic, off, fixed };
  Mode mode = Mode::automatic;
  int layers = 0;
  int hidden = 0;

  // "auto", "off", or "<layers>x<hidden>".
  static TaRequest parse(std::string_view text);
};

struct PlanStage {
  std::string name;
  ModelConfig teacher;
  ModelConfig student;
  DistillSpec spec;
  TrainOptions options;
};

struct DistillPlan {
  std::vector<PlanStage> stages;

  // Throws ConfigError when a stage's teacher is not the previous stage's
  // student or a stage spec does not fit its models.
  void validate(const ModelConfig& teacher) const;
};

// Student with M <= L/2 and d' <= d/2 gets an assistant with L layers and d'
// hidden under Mode::automatic.
bool wants_assistant(const ModelConfig& teacher, const ModelConfig& student);

// The assistant stage reuses `options` (same step budget as the final stage).
DistillPlan make_plan(const ModelConfig& teacher, const ModelConfig& student, const DistillSpec& spec,
                      const TrainOptions& options, const TaRequest& ta = {});

struct StageReport {
  std::string name;
  ModelConfig teacher;
  ModelConfig student;
  int steps = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

template <typename T>
struct PlanResult {
  std::vector<TransformerModel<T>> stage_models;  // output of every stage, in order
  std::vector<StageReport> reports;
  std::vector<std::vector<StepMetrics>> metrics;

  const TransformerModel<T>& final_model() const { return stage_models.back(); }
};

using StageCallback = std::function<void(std::size_t stage_index, const PlanStage&)>;

template <typename T>
PlanResult<T> run_plan(const DistillPlan& plan, const TransformerModel<T>& teacher,
                       const TrainingData& data, const MetricsSink& sink = {},
                       const StageCallback& on_stage_start = {});

}  // namespace minidistill
