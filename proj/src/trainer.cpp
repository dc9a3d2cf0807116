#include "minidistill/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <sstream>

#include "minidistill/errors.hpp"
#include "minidistill/ops.hpp"

namespace minidistill {

void Schedule::validate() const {
  if (total_steps <= 0) throw ConfigError("schedule: total_steps must be positive");
  if (warmup_steps < 0 || warmup_steps > total_steps) {
    throw ConfigError("schedule: warmup_steps must lie in [0, total_steps]");
  }
  if (!(peak_lr >= 0.0)) throw ConfigError("schedule: peak_lr must be non-negative");
}

double Schedule::lr_at(int step) const {
  if (step < 0 || step > total_steps) {
    throw std::out_of_range("schedule: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + "]");
  }
  if (warmup_steps > 0 && step <= warmup_steps) {
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (total_steps == warmup_steps) return step == total_steps ? 0.0 : peak_lr;
  return peak_lr * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup_steps);
}

template <typename T>
void adam_step(std::span<const NamedParam<T>> params, AdamState<T>& state, double lr) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.tensor.size(), T(0));
      state.second_moment.emplace_back(p.tensor.size(), T(0));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ConfigError("adam_step: optimizer state tracks " + std::to_string(state.first_moment.size()) +
                      " parameters, got " + std::to_string(params.size()));
  }
  for (const auto& p : params) {
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in " + p.name);
    }
  }
  ++state.step;
  const AdamConfig& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> tensor = params[i].tensor;
    auto values = tensor.mutable_values();
    auto grad = tensor.grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != values.size()) throw ShapeError("adam_step: moment size mismatch for " + params[i].name);
    const double decay = params[i].decay ? c.weight_decay : 0.0;
    for (std::size_t j = 0; j < values.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * grad[j];
      v[j] = b2 * v[j] + (T(1) - b2) * grad[j] * grad[j];
      const double m_hat = static_cast<double>(m[j]) / bc1;
      const double v_hat = static_cast<double>(v[j]) / bc2;
      const double w = static_cast<double>(values[j]);
      values[j] = static_cast<T>(w - lr * (m_hat / (std::sqrt(v_hat) + c.eps) + decay * w));
    }
  }
}

template <typename T>
double clip_grad_norm(std::span<const NamedParam<T>> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (const auto& p : params) {
      for (T& g : Tensor<T>(p.tensor).mutable_grad()) g *= factor;
    }
  }
  return norm;
}

std::string StepMetrics::to_json() const {
  nlohmann::json j;
  j["step"] = step;
  j["lr"] = lr;
  j["loss"] = loss;
  j["loss_at"] = loss_at;
  j["loss_vr"] = loss_vr;
  if (mlm_acc) j["mlm_acc"] = *mlm_acc;
  return j.dump();
}

Schedule TrainOptions::schedule() const {
  Schedule s;
  s.peak_lr = peak_lr;
  s.total_steps = steps;
  s.warmup_steps = warmup_steps >= 0 ? warmup_steps : std::min(4000, steps / 10);
  s.validate();
  return s;
}

TrainingData TrainingData::from_documents(const std::vector<std::string>& docs, Vocab vocab,
                                          std::size_t max_seq_len) {
  if (max_seq_len < 3) throw ConfigError("max_seq_len must leave room for [CLS] and [SEP]");
  TrainingData data;
  data.max_seq_len = max_seq_len;
  for (const auto& d : docs) {
    auto ids = vocab.encode(d);
    if (ids.empty()) continue;
    if (ids.size() > max_seq_len - 2) ids.resize(max_seq_len - 2);
    data.documents.push_back(std::move(ids));
  }
  if (data.documents.empty()) throw ConfigError("training data has no non-empty documents");
  data.vocab = std::move(vocab);
  return data;
}

BatchSampler::BatchSampler(const TrainingData& data, int batch_size, double mask_rate, std::uint64_t seed)
    : data_(&data), batch_size_(batch_size), mask_rate_(mask_rate), rng_(seed) {
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
}

MaskedBatch BatchSampler::next() {
  std::uniform_int_distribution<std::size_t> pick(0, data_->documents.size() - 1);
  std::vector<std::vector<int>> seqs;
  seqs.reserve(static_cast<std::size_t>(batch_size_));
  for (int i = 0; i < batch_size_; ++i) seqs.push_back(data_->documents[pick(rng_)]);
  return make_mlm_batch(data_->vocab, seqs, data_->max_seq_len, mask_rate_, rng_());
}

template <typename T>
MlmOutput<T> mlm_loss(const TransformerModel<T>& model, const MaskedBatch& batch,
                      std::mt19937_64* dropout_rng) {
  const auto encoded = model.encode(batch.encoder_input(), CaptureRequest::none(), dropout_rng);
  const auto rows = batch.flat_masked_rows();
  const auto labels = batch.flat_labels();
  const Tensor<T> logits = model.mlm_logits(embedding_lookup(encoded.hidden, rows));
  MlmOutput<T> out;
  out.loss = nll_rows(log_softmax_rows(logits), labels);
  const std::size_t vocab = logits.cols();
  auto lv = logits.values();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = lv.subspan(i * vocab, vocab);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    if (best == labels[i]) ++correct;
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  return out;
}

template <typename T>
TrainResult<T> pretrain_teacher(const ModelConfig& config, const TrainingData& data,
                                const TrainOptions& options, const MetricsSink& sink) {
  if (static_cast<std::size_t>(config.vocab_size) != data.vocab.size()) {
    throw ConfigError("model vocab_size " + std::to_string(config.vocab_size) +
                      " does not match vocabulary size " + std::to_string(data.vocab.size()));
  }
  if (static_cast<std::size_t>(config.max_seq_len) < data.max_seq_len) {
    throw ConfigError("model max_seq_len is shorter than the training sequences");
  }
  const Schedule schedule = options.schedule();
  TrainResult<T> result{TransformerModel<T>::init(config, options.seed), {}};
  auto params = result.model.parameters();
  AdamState<T> adam;
  adam.config = options.adam;
  BatchSampler sampler(data, options.batch_size, options.mask_rate, options.seed ^ 0x9e3779b97f4a7c15ULL);
  std::mt19937_64 dropout_rng(options.seed + 1);
  for (int step = 1; step <= options.steps; ++step) {
    const MaskedBatch batch = sampler.next();
    Tape<T> tape;
    result.model.zero_grad();
    MlmOutput<T> out = mlm_loss(result.model, batch, &dropout_rng);
    if (!out.loss.all_finite()) throw NumericError("pretraining diverged at step " + std::to_string(step));
    tape.backward(out.loss);
    clip_grad_norm<T>(params, options.clip_norm);
    const double lr = schedule.lr_at(step);
    adam_step<T>(params, adam, lr);
    StepMetrics m;
    m.step = step;
    m.lr = lr;
    m.loss = static_cast<double>(out.loss.item());
    m.mlm_acc = out.accuracy;
    result.metrics.push_back(m);
    if (sink) sink(m);
  }
  return result;
}

template <typename T>
Tensor<T> make_value_projection(const ModelConfig& teacher, const ModelConfig& student,
                                std::uint64_t seed) {
  const std::size_t dk = teacher.head_dim(), dks = student.head_dim();
  std::vector<T> values(dks * dk, T(0));
  if (dk == dks) {
    for (std::size_t i = 0; i < dk; ++i) values[i * dk + i] = T(1);
  } else {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(dks)));
    for (T& v : values) v = static_cast<T>(normal(rng));
  }
  return Tensor<T>::matrix(dks, dk, std::move(values), true);
}

template <typename T>
LossTerms<T> distill_objective(const TransformerModel<T>& teacher, const TransformerModel<T>& student,
                               const DistillSpec& spec, const MaskedBatch& batch,
                               const Tensor<T>* projection, std::mt19937_64* student_dropout) {
  const EncoderInput input = batch.encoder_input();
  CaptureRequest request = CaptureRequest::last();
  if (spec.mode == LossMode::layer_to_layer) request = CaptureRequest::all();
  if (spec.mode == LossMode::hidden_relation) request = CaptureRequest::last(true);
  if (spec.mode == LossMode::soft_label) request = CaptureRequest::none();

  EncodeResult<T> teacher_out;
  Tensor<T> teacher_logits;
  const auto masked_rows = batch.flat_masked_rows();
  {
    typename Tape<T>::Pause frozen;
    teacher_out = teacher.encode(input, request);
    if (spec.mode == LossMode::soft_label) {
      teacher_logits = teacher.mlm_logits(embedding_lookup(teacher_out.hidden, masked_rows));
    }
  }
  const EncodeResult<T> student_out = student.encode(input, request, student_dropout);

  LossTerms<T> terms;
  if (spec.mode == LossMode::soft_label) {
    const Tensor<T> student_logits = student.mlm_logits(embedding_lookup(student_out.hidden, masked_rows));
    std::vector<int> all_rows(masked_rows.size());
    for (std::size_t i = 0; i < all_rows.size(); ++i) all_rows[i] = static_cast<int>(i);
    terms.total = soft_label_loss(teacher_logits, student_logits, all_rows, spec.temperature);
    return terms;
  }

  Tensor<T> total;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    const auto& tc = teacher_out.captures[b];
    const auto& sc = student_out.captures[b];
    const std::size_t valid = batch.valid_len[b];
    LossTerms<T> seq;
    switch (spec.mode) {
      case LossMode::minilm: seq = minilm_loss(tc.last(), sc.last(), valid, true); break;
      case LossMode::att_only: seq = minilm_loss(tc.last(), sc.last(), valid, false); break;
      case LossMode::layer_to_layer: seq = layer_to_layer_loss(tc, sc, valid); break;
      case LossMode::value_mse:
        seq.total = value_mse_loss(tc.last().values(), sc.last().values(), projection, valid);
        break;
      case LossMode::hidden_relation:
        seq.total = hidden_relation_loss(tc.last().hidden, sc.last().hidden, student.config().heads, valid);
        break;
      case LossMode::soft_label: break;
    }
    terms.attention += seq.attention;
    terms.value_relation += seq.value_relation;
    total = total.defined() ? add(total, seq.total) : seq.total;
  }
  const double inv = 1.0 / static_cast<double>(batch.batch);
  terms.total = scale(total, static_cast<T>(inv));
  terms.attention *= inv;
  terms.value_relation *= inv;
  return terms;
}

template <typename T>
StageResult<T> distill_stage(const TransformerModel<T>& teacher, TransformerModel<T> student,
                             const DistillSpec& spec, const TrainingData& data,
                             const TrainOptions& options, const MetricsSink& sink) {
  spec.validate(teacher.config(), student.config());
  if (static_cast<std::size_t>(student.config().vocab_size) != data.vocab.size()) {
    throw ConfigError("student vocab_size does not match the training vocabulary");
  }
  const Schedule schedule = options.schedule();
  student.set_trainable(true);
  StageResult<T> result{std::move(student), {}, {}};
  auto params = result.student.parameters();
  if (spec.mode == LossMode::value_mse) {
    result.projection = make_value_projection<T>(teacher.config(), result.student.config(), spec.projection_seed);
    params.push_back({"distill.value_projection", result.projection, true});
  }
  const Tensor<T>* projection = result.projection.defined() ? &result.projection : nullptr;
  AdamState<T> adam;
  adam.config = options.adam;
  BatchSampler sampler(data, options.batch_size, options.mask_rate, options.seed ^ 0x5851f42d4c957f2dULL);
  std::mt19937_64 dropout_rng(options.seed + 2);
  for (int step = 1; step <= options.steps; ++step) {
    const MaskedBatch batch = sampler.next();
    Tape<T> tape;
    for (auto& p : params) p.tensor.zero_grad();
    LossTerms<T> terms = distill_objective(teacher, result.student, spec, batch, projection, &dropout_rng);
    if (!terms.total.all_finite()) throw NumericError("distillation diverged at step " + std::to_string(step));
    tape.backward(terms.total);
    clip_grad_norm<T>(params, options.clip_norm);
    const double lr = schedule.lr_at(step);
    adam_step<T>(params, adam, lr);
    StepMetrics m;
    m.step = step;
    m.lr = lr;
    m.loss = static_cast<double>(terms.total.item());
    m.loss_at = terms.attention;
    m.loss_vr = terms.value_relation;
    result.metrics.push_back(m);
    if (sink) sink(m);
  }
  return result;
}

template <typename T>
StageResult<T> distill_stage(const TransformerModel<T>& teacher, const ModelConfig& student_config,
                             const DistillSpec& spec, const TrainingData& data,
                             const TrainOptions& options, const MetricsSink& sink) {
  spec.validate(teacher.config(), student_config);
  return distill_stage(teacher, TransformerModel<T>::init(student_config, options.seed), spec, data,
                       options, sink);
}

template <typename T>
double attention_kl(const TransformerModel<T>& teacher, const TransformerModel<T>& student,
                    const TrainingData& data, int batches, int batch_size, std::uint64_t seed) {
  typename Tape<T>::Pause no_grad;
  BatchSampler sampler(data, batch_size, 0.15, seed);
  DistillSpec spec;
  spec.mode = LossMode::att_only;
  double total = 0.0;
  for (int i = 0; i < batches; ++i) {
    total += distill_objective(teacher, student, spec, sampler.next()).attention;
  }
  return total / static_cast<double>(batches);
}

// --- plans -------------------------------------------------------------------

TaRequest TaRequest::parse(std::string_view text) {
  TaRequest r;
  if (text == "auto") return r;
  if (text == "off") {
    r.mode = Mode::off;
    return r;
  }
  const std::string s(text);
  std::size_t pos = s.find('x');
  std::size_t skip = 1;
  if (pos == std::string::npos) {
    pos = s.find("\xC3\x97");  // multiplication sign
    skip = 2;
  }
  if (pos == std::string::npos) throw ConfigError("--ta expects auto, off or <layers>x<hidden>, got '" + s + "'");
  try {
    std::size_t used = 0;
    r.layers = std::stoi(s.substr(0, pos), &used);
    if (used != pos) throw std::invalid_argument("layers");
    const std::string rest = s.substr(pos + skip);
    r.hidden = std::stoi(rest, &used);
    if (used != rest.size()) throw std::invalid_argument("hidden");
  } catch (const std::exception&) {
    throw ConfigError("--ta expects auto, off or <layers>x<hidden>, got '" + s + "'");
  }
  if (r.layers <= 0 || r.hidden <= 0) throw ConfigError("teacher assistant size must be positive");
  r.mode = Mode::fixed;
  return r;
}

bool wants_assistant(const ModelConfig& teacher, const ModelConfig& student) {
  return 2 * student.num_layers <= teacher.num_layers && 2 * student.hidden <= teacher.hidden;
}

DistillPlan make_plan(const ModelConfig& teacher, const ModelConfig& student, const DistillSpec& spec,
                      const TrainOptions& options, const TaRequest& ta) {
  DistillPlan plan;
  std::optional<ModelConfig> assistant;
  if (ta.mode == TaRequest::Mode::automatic && wants_assistant(teacher, student)) {
    assistant = student;
    assistant->num_layers = teacher.num_layers;
  } else if (ta.mode == TaRequest::Mode::fixed) {
    assistant = student;
    assistant->num_layers = ta.layers;
    assistant->hidden = ta.hidden;
  }
  auto describe = [](const ModelConfig& c) {
    return std::to_string(c.num_layers) + "x" + std::to_string(c.hidden);
  };
  if (assistant) {
    plan.stages.push_back({"assistant " + describe(teacher) + " -> " + describe(*assistant), teacher,
                           *assistant, spec, options});
    TrainOptions final_options = options;
    final_options.seed = options.seed + 1;
    plan.stages.push_back({"student " + describe(*assistant) + " -> " + describe(student), *assistant,
                           student, spec, final_options});
  } else {
    plan.stages.push_back({"student " + describe(teacher) + " -> " + describe(student), teacher,
                           student, spec, options});
  }
  plan.validate(teacher);
  return plan;
}

void DistillPlan::validate(const ModelConfig& teacher) const {
  if (stages.empty()) throw ConfigError("distillation plan has no stages");
  const ModelConfig* expected = &teacher;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (!(stages[i].teacher == *expected)) {
      throw ConfigError("plan stage " + std::to_string(i + 1) +
                        " declares a teacher that is not the previous stage's output");
    }
    stages[i].spec.validate(stages[i].teacher, stages[i].student);
    expected = &stages[i].student;
  }
}

template <typename T>
PlanResult<T> run_plan(const DistillPlan& plan, const TransformerModel<T>& teacher,
                       const TrainingData& data, const MetricsSink& sink,
                       const StageCallback& on_stage_start) {
  plan.validate(teacher.config());
  PlanResult<T> result;
  for (std::size_t i = 0; i < plan.stages.size(); ++i) {
    const PlanStage& stage = plan.stages[i];
    if (on_stage_start) on_stage_start(i, stage);
    const TransformerModel<T>& current_teacher = i == 0 ? teacher : result.stage_models.back();
    StageResult<T> out = distill_stage(current_teacher, stage.student, stage.spec, data, stage.options, sink);
    StageReport report;
    report.name = stage.name;
    report.teacher = stage.teacher;
    report.student = stage.student;
    report.steps = static_cast<int>(out.metrics.size());
    if (!out.metrics.empty()) {
      report.initial_loss = out.metrics.front().loss;
      report.final_loss = out.metrics.back().loss;
    }
    result.reports.push_back(report);
    result.metrics.push_back(std::move(out.metrics));
    result.stage_models.push_back(std::move(out.student));
  }
  return result;
}

#define MINIDISTILL_INSTANTIATE_TRAINER(T)                                                            \
  template void adam_step(std::span<const NamedParam<T>>, AdamState<T>&, double);                   \
  template double clip_grad_norm(std::span<const NamedParam<T>>, double);                           \
  template MlmOutput<T> mlm_loss(const TransformerModel<T>&, const MaskedBatch&, std::mt19937_64*); \
  template TrainResult<T> pretrain_teacher(const ModelConfig&, const TrainingData&,                 \
                                           const TrainOptions&, const MetricsSink&);                \
  template Tensor<T> make_value_projection<T>(const ModelConfig&, const ModelConfig&, std::uint64_t); \
  template LossTerms<T> distill_objective(const TransformerModel<T>&, const TransformerModel<T>&,   \
                                          const DistillSpec&, const MaskedBatch&, const Tensor<T>*, \
                                          std::mt19937_64*);                                        \
  template StageResult<T> distill_stage(const TransformerModel<T>&, TransformerModel<T>,            \
                                        const DistillSpec&, const TrainingData&,                    \
                                        const TrainOptions&, const MetricsSink&);                   \
  template StageResult<T> distill_stage(const TransformerModel<T>&, const ModelConfig&,             \
                                        const DistillSpec&, const TrainingData&,                    \
                                        const TrainOptions&, const MetricsSink&);                   \
  template double attention_kl(const TransformerModel<T>&, const TransformerModel<T>&,              \
                               const TrainingData&, int, int, std::uint64_t);                       \
  template PlanResult<T> run_plan(const DistillPlan&, const TransformerModel<T>&,                   \
                                  const TrainingData&, const MetricsSink&, const StageCallback&);

MINIDISTILL_INSTANTIATE_TRAINER(float)
MINIDISTILL_INSTANTIATE_TRAINER(double)

}  // namespace minidistill
