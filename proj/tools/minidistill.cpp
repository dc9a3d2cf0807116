// minidistill: pretrain, distill, params, bench, gradcheck.
//
// Exit codes: 0 success, 1 check or validation failure, 2 I/O or argument error.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <string>

#include "CLI11.hpp"
#include "minidistill/bench.hpp"
#include "minidistill/checkpoint.hpp"
#include "minidistill/errors.hpp"
#include "minidistill/gradcheck.hpp"
#include "minidistill/trainer.hpp"

namespace md = minidistill;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitIo = 2;

bool deterministic_mode() {
  const char* v = std::getenv("MINIDISTILL_DETERMINISTIC");
  return v != nullptr && std::string(v) == "1";
}

std::string metrics_path_for(const std::string& out) { return out + ".metrics.jsonl"; }

std::string fmt_loss(double v) { return nlohmann::json(v).dump(); }

std::string describe(const md::ModelConfig& c) {
  return std::to_string(c.num_layers) + "x" + std::to_string(c.hidden);
}

void require_file(const std::string& path, const std::string& what) {
  if (!std::filesystem::is_regular_file(path)) throw md::IoError(what + " not found: " + path);
}

class JsonlWriter {
 public:
  explicit JsonlWriter(const std::string& path) : out_(path) {
    if (!out_) throw md::IoError("cannot write metrics file " + path);
  }
  void write(const std::string& line) {
    out_ << line << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

struct PretrainArgs {
  std::string config, corpus, out;
  int steps = 1000;
  std::uint64_t seed = 0;
  int batch_size = 16;
  double lr = 5e-4;
  int warmup = -1;
  double clip = 1.0;
};

// Optional "train" object in the config file overrides the command-line
// defaults: batch_size, peak_lr, warmup_steps, clip_norm, mask_rate.
md::TrainOptions train_options_from(const nlohmann::json& j, md::TrainOptions o) {
  if (!j.contains("train")) return o;
  const auto& t = j.at("train");
  o.batch_size = t.value("batch_size", o.batch_size);
  o.peak_lr = t.value("peak_lr", o.peak_lr);
  o.warmup_steps = t.value("warmup_steps", o.warmup_steps);
  o.clip_norm = t.value("clip_norm", o.clip_norm);
  o.mask_rate = t.value("mask_rate", o.mask_rate);
  return o;
}

template <typename T>
int run_pretrain(const PretrainArgs& a) {
  require_file(a.config, "config file");
  require_file(a.corpus, "corpus file");
  md::ModelConfig config = md::load_config_file(a.config);
  nlohmann::json raw;
  std::ifstream(a.config) >> raw;

  md::TrainOptions options;
  options.steps = a.steps;
  options.seed = a.seed;
  options.batch_size = a.batch_size;
  options.peak_lr = a.lr;
  options.warmup_steps = a.warmup;
  options.clip_norm = a.clip;
  options = train_options_from(raw, options);

  const auto docs = md::read_corpus(a.corpus);
  md::Vocab vocab = md::Vocab::build(docs, static_cast<std::size_t>(config.vocab_size));
  if (static_cast<int>(vocab.size()) != config.vocab_size) {
    std::cerr << "note: corpus yields " << vocab.size() << " tokens; vocab_size set to " << vocab.size()
              << " (was " << config.vocab_size << ")\n";
    config.vocab_size = static_cast<int>(vocab.size());
  }
  const auto data = md::TrainingData::from_documents(docs, vocab, static_cast<std::size_t>(config.max_seq_len));

  const std::string metrics_path = metrics_path_for(a.out);
  JsonlWriter metrics(metrics_path);
  const auto result = md::pretrain_teacher<T>(config, data, options, [&](const md::StepMetrics& m) {
    metrics.write(m.to_json());
    if (m.step % 100 == 0 || m.step == options.steps) {
      std::printf("step %6d  lr %.3e  loss %.4f  mlm_acc %.3f\n", m.step, m.lr, m.loss, m.mlm_acc.value_or(0.0));
      std::fflush(stdout);
    }
  });
  md::save_model(a.out, result.model, &data.vocab);
  std::printf("wrote %s (%s) and %s\n", a.out.c_str(), md::file_digest(a.out).c_str(), metrics_path.c_str());
  return 0;
}

struct DistillArgs {
  std::string teacher, out, loss = "minilm", ta = "auto", corpus;
  int student_layers = 0, student_hidden = 0, student_heads = 0;
  int steps = 1000;
  std::uint64_t seed = 0;
  int batch_size = 16;
  double lr = 5e-4;
  int warmup = -1;
  double clip = 1.0;
  double temperature = 1.0;
  int docs = 4000;
};

template <typename T>
int run_distill(const DistillArgs& a) {
  require_file(a.teacher, "teacher checkpoint");
  if (!a.corpus.empty()) require_file(a.corpus, "corpus file");

  md::Vocab vocab;
  const auto teacher = md::load_model<T>(a.teacher, &vocab);
  const md::ModelConfig& tc = teacher.config();
  if (vocab.size() == 0) throw md::IoError(a.teacher + ": checkpoint carries no vocabulary");

  md::ModelConfig sc = tc;
  sc.num_layers = a.student_layers;
  sc.hidden = a.student_hidden;
  sc.heads = a.student_heads > 0 ? a.student_heads : tc.heads;
  sc.ffn_dim = 0;
  sc.validate();

  md::DistillSpec spec;
  spec.mode = md::parse_loss_mode(a.loss);
  spec.temperature = a.temperature;
  spec.projection_seed = a.seed;

  md::TrainOptions options;
  options.steps = a.steps;
  options.seed = a.seed;
  options.batch_size = a.batch_size;
  options.peak_lr = a.lr;
  options.warmup_steps = a.warmup;
  options.clip_norm = a.clip;

  const md::DistillPlan plan = md::make_plan(tc, sc, spec, options, md::TaRequest::parse(a.ta));

  const auto docs = a.corpus.empty() ? md::synth_corpus(a.seed, static_cast<std::size_t>(a.docs))
                                     : md::read_corpus(a.corpus);
  const auto data = md::TrainingData::from_documents(docs, vocab, static_cast<std::size_t>(tc.max_seq_len));

  const std::string metrics_path = metrics_path_for(a.out);
  JsonlWriter metrics(metrics_path);
  std::size_t stage_index = 0;
  const auto result = md::run_plan<T>(
      plan, teacher, data,
      [&](const md::StepMetrics& m) {
        auto j = nlohmann::json::parse(m.to_json());
        j["stage"] = stage_index + 1;
        metrics.write(j.dump());
        if (m.step % 100 == 0 || m.step == options.steps) {
          std::printf("stage %zu step %6d  lr %.3e  loss %.5f\n", stage_index + 1, m.step, m.lr, m.loss);
          std::fflush(stdout);
        }
      },
      [&](std::size_t i, const md::PlanStage& stage) {
        stage_index = i;
        std::printf("== stage %zu/%zu: %s (%s)\n", i + 1, plan.stages.size(), stage.name.c_str(),
                    std::string(md::to_string(stage.spec.mode)).c_str());
        std::fflush(stdout);
      });

  md::save_model(a.out, result.final_model(), &vocab);

  std::printf("\n%-5s %-28s %-8s %-8s %6s %22s %22s\n", "stage", "name", "teacher", "student", "steps",
              "initial loss", "final loss");
  for (std::size_t i = 0; i < result.reports.size(); ++i) {
    const auto& r = result.reports[i];
    std::printf("%-5zu %-28s %-8s %-8s %6d %22s %22s\n", i + 1, r.name.c_str(), describe(r.teacher).c_str(),
                describe(r.student).c_str(), r.steps, fmt_loss(r.initial_loss).c_str(),
                fmt_loss(r.final_loss).c_str());
  }
  std::printf("wrote %s and %s\n", a.out.c_str(), metrics_path.c_str());
  return 0;
}

int run_params(int layers, int hidden, int vocab, int heads, int ffn, int seq_len) {
  md::ModelConfig c;
  c.num_layers = layers;
  c.hidden = hidden;
  c.heads = heads;
  c.ffn_dim = ffn;
  c.vocab_size = vocab;
  c.max_seq_len = std::max(seq_len, 512);
  c.validate();
  const md::ParamCount p = md::count_params(c);
  std::printf("config     %dx%d, %d heads, ffn %d, vocab %d\n", layers, hidden, heads, c.ffn(), vocab);
  std::printf("Emd        %s\n", md::format_count(p.embedding).c_str());
  std::printf("Trm        %s\n", md::format_count(p.transformer).c_str());
  std::printf("other      %s\n", md::format_count(p.other).c_str());
  std::printf("total      %s\n", md::format_count(p.total()).c_str());
  std::printf("flops/tok  %s (seq %d)\n", md::format_count(md::flops_per_token(c, seq_len)).c_str(), seq_len);
  return 0;
}

int run_bench_cmd(const std::string& configs_path, const md::BenchOptions& options) {
  std::vector<md::ModelConfig> configs;
  if (configs_path.empty()) {
    for (auto [l, d] : {std::pair{12, 768}, std::pair{6, 768}, std::pair{6, 384}}) {
      md::ModelConfig c;
      c.num_layers = l;
      c.hidden = d;
      c.heads = 12;
      c.vocab_size = 30522;
      c.max_seq_len = 512;
      configs.push_back(c);
    }
  } else {
    require_file(configs_path, "bench config file");
    configs = md::load_bench_configs(configs_path);
  }
  std::fputs(md::format_bench(md::run_bench(configs, options)).c_str(), stdout);
  return 0;
}

int run_gradcheck_cmd(const std::string& module, const std::string& fault) {
  std::vector<md::GradCheck> checks;
  if (fault == "kl-sign") {
    checks.push_back(md::sign_flipped_kl_check());
  } else if (!fault.empty()) {
    throw md::ConfigError("unknown fault '" + fault + "'");
  } else {
    checks = md::default_gradchecks(module);
  }
  const auto results = md::run_gradchecks(checks);
  std::fputs(md::format_gradcheck(results).c_str(), stdout);
  const int code = md::gradcheck_exit_code(results);
  if (code != 0) {
    std::string failed;
    for (const auto& r : results) {
      if (!r.passed) failed += (failed.empty() ? "" : ", ") + r.name;
    }
    std::fprintf(stderr, "gradcheck failed: %s\n", failed.c_str());
  }
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"minidistill: self-attention distillation toolkit"};
  app.require_subcommand(1);

  PretrainArgs pa;
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain a masked-LM teacher");
  pretrain->add_option("--config", pa.config, "Model config JSON")->required();
  pretrain->add_option("--corpus", pa.corpus, "Corpus file, one document per line")->required();
  pretrain->add_option("--steps", pa.steps, "Training steps")->capture_default_str();
  pretrain->add_option("--seed", pa.seed, "Random seed")->capture_default_str();
  pretrain->add_option("--out", pa.out, "Output checkpoint")->required();
  pretrain->add_option("--batch-size", pa.batch_size)->capture_default_str();
  pretrain->add_option("--lr", pa.lr, "Peak learning rate")->capture_default_str();
  pretrain->add_option("--warmup", pa.warmup, "Warmup steps (-1: min(4000, steps/10))")->capture_default_str();
  pretrain->add_option("--clip-norm", pa.clip, "Global gradient norm clip (0 disables)")->capture_default_str();

  DistillArgs da;
  auto* distill = app.add_subcommand("distill", "Distill a teacher checkpoint into a smaller student");
  distill->add_option("--teacher", da.teacher, "Teacher checkpoint")->required();
  distill->add_option("--student-layers", da.student_layers)->required();
  distill->add_option("--student-hidden", da.student_hidden)->required();
  distill->add_option("--student-heads", da.student_heads, "Default: teacher heads");
  distill->add_option("--loss", da.loss, "minilm|att-only|soft-label|layer2layer|value-mse|hidden-relation")
      ->capture_default_str();
  distill->add_option("--ta", da.ta, "Teacher assistant: auto|off|LxD")->capture_default_str();
  distill->add_option("--steps", da.steps, "Steps per stage")->capture_default_str();
  distill->add_option("--seed", da.seed)->capture_default_str();
  distill->add_option("--out", da.out, "Output student checkpoint")->required();
  distill->add_option("--corpus", da.corpus, "Corpus file (default: synthetic grammar corpus)");
  distill->add_option("--docs", da.docs, "Synthetic documents when no corpus is given")->capture_default_str();
  distill->add_option("--batch-size", da.batch_size)->capture_default_str();
  distill->add_option("--lr", da.lr, "Peak learning rate")->capture_default_str();
  distill->add_option("--warmup", da.warmup)->capture_default_str();
  distill->add_option("--clip-norm", da.clip)->capture_default_str();
  distill->add_option("--temperature", da.temperature, "Soft-label temperature")->capture_default_str();

  int p_layers = 0, p_hidden = 0, p_vocab = 30522, p_heads = 12, p_ffn = 0, p_seq = 128;
  auto* params = app.add_subcommand("params", "Embedding/Transformer parameter counts");
  params->add_option("--layers", p_layers)->required();
  params->add_option("--hidden", p_hidden)->required();
  params->add_option("--vocab", p_vocab)->capture_default_str();
  params->add_option("--heads", p_heads)->capture_default_str();
  params->add_option("--ffn", p_ffn, "FFN width (0: 4*hidden)")->capture_default_str();
  params->add_option("--seqlen", p_seq, "Sequence length for the FLOP estimate")->capture_default_str();

  std::string bench_configs;
  md::BenchOptions bo;
  auto* bench = app.add_subcommand("bench", "Time encoder forwards");
  bench->add_option("--configs", bench_configs, "JSON array of configs (default 12x768, 6x768, 6x384)");
  bench->add_option("--seqlen", bo.seq_len)->capture_default_str();
  bench->add_option("--batches", bo.batches)->capture_default_str();
  bench->add_option("--batch-size", bo.batch_size)->capture_default_str();
  bench->add_option("--seed", bo.seed)->capture_default_str();

  std::string gc_module = "all", gc_fault;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks (float64)");
  gradcheck->add_option("--module", gc_module, "all|ops|losses|model")
      ->check(CLI::IsMember({"all", "ops", "losses", "model"}))
      ->capture_default_str();
  gradcheck->add_option("--inject-fault", gc_fault)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitIo;
  }

  const bool f64 = deterministic_mode();
  try {
    if (*pretrain) return f64 ? run_pretrain<double>(pa) : run_pretrain<float>(pa);
    if (*distill) return f64 ? run_distill<double>(da) : run_distill<float>(da);
    if (*params) return run_params(p_layers, p_hidden, p_vocab, p_heads, p_ffn, p_seq);
    if (*bench) return run_bench_cmd(bench_configs, bo);
    if (*gradcheck) return run_gradcheck_cmd(gc_module, gc_fault);
  } catch (const md::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitFailure;
}
