#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "sscan/checkpoint.hpp"
#include "sscan/model.hpp"
#include "sscan/tasks.hpp"

namespace sscan {

// Flat key=value run configuration (see parse_run_config / render_run_config
// for the file format: one key per line, '#' comments).
struct RunConfig {
  // task
  std::string task = "selective_copying";
  index_t seq_len = 256;
  index_t vocab = 16;
  index_t n_memorize = 8;
  std::uint64_t task_seed = 0;
  // model
  index_t d_model = 64;
  index_t state_dim = 16;
  index_t expand = 2;
  index_t delta_rank = 0;  // 0 = derived from d_model
  index_t n_blocks = 2;
  index_t conv_width = 4;
  std::string inner_layer = "s6";  // s6 | s4lti
  bool selective_dt = true, selective_b = true, selective_c = true;
  std::string precision = "f32";  // f32 | f64
  std::uint64_t seed = 42;
  // optimizer
  index_t steps = 20000;
  index_t batch_size = 32;
  double lr_peak = 1e-3;
  std::string lr_schedule = "constant";  // constant | cosine
  double warmup_frac = 0.1;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  // engine
  std::string engine = "chunked";
  index_t chunk_len = kDefaultChunkLen;
  index_t threads = 0;  // 0 = environment default
  // harness
  std::string out_dir = "runs";
  std::string run_name;  // empty = timestamped
  index_t log_every = 100;
  index_t eval_every = 1000;
  index_t eval_batches = 8;
  double early_stop_acc = 0.0;  // 0 = disabled

  bool operator==(const RunConfig&) const = default;

  TaskSpec task_spec() const {
    TaskSpec s;
    s.kind = task_from_name(task);
    s.seq_len = seq_len;
    s.vocab = vocab;
    s.n_memorize = n_memorize;
    s.seed = task_seed;
    return s;
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.vocab = vocab;
    m.D = d_model;
    m.N = state_dim;
    m.E = expand;
    m.R = delta_rank;
    m.n_blocks = n_blocks;
    m.conv_width = conv_width;
    m.inner_layer = inner_layer == "s4lti" ? InnerLayer::S4Lti : InnerLayer::S6;
    m.selective_dt = selective_dt;
    m.selective_B = selective_b;
    m.selective_C = selective_c;
    m.seed = seed;
    return m;
  }

  ScanEngine scan_engine() const {
    if (engine == "sequential") return ScanEngine::Sequential;
    if (engine == "parallel") return ScanEngine::Parallel;
    if (engine == "chunked") return ScanEngine::Chunked;
    if (engine == "conv") return ScanEngine::Conv;
    throw DataError("unknown engine: " + engine);
  }

  AdamWHyper adamw_hyper() const {
    AdamWHyper h;
    h.lr_peak = lr_peak;
    h.beta1 = beta1;
    h.beta2 = beta2;
    h.weight_decay = weight_decay;
    h.grad_clip = grad_clip;
    h.warmup_frac = warmup_frac;
    h.schedule = lr_schedule == "cosine" ? LrSchedule::WarmupCosine : LrSchedule::Constant;
    h.total_steps = steps;
    return h;
  }
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string render_run_config(const RunConfig& cfg);

// Disjoint seed streams: training consumes batch indices [0, steps), eval
// consumes indices starting at this offset.
inline constexpr std::uint64_t kEvalBatchOffset = 1ull << 40;

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Accuracy = fraction of supervised positions where the logit argmax equals
// the target (ties toward the lowest id).
template <typename T>
double evaluate_accuracy(const Model<T>& model, const TaskSpec& spec,
                         index_t eval_len, index_t n_batches, index_t batch_size,
                         ScanEngine engine = ScanEngine::Chunked,
                         index_t chunk_len = kDefaultChunkLen,
                         std::uint64_t seed_base = kEvalBatchOffset) {
  index_t hits = 0, total = 0;
  for (index_t i = 0; i < n_batches; ++i) {
    const TaskBatch batch = generate_batch(spec, batch_size, seed_base + static_cast<std::uint64_t>(i),
                                           eval_len);
    const Tensor<T> logits =
        model.forward(batch.tokens, batch.batch, batch.len, engine, chunk_len);
    const index_t V = model.cfg.vocab;
    for (index_t r = 0; r < batch.batch * batch.len; ++r) {
      if (!batch.mask[static_cast<size_t>(r)]) continue;
      const T* row = logits.data() + r * V;
      index_t arg = 0;
      T best = row[0];
      for (index_t v = 1; v < V; ++v)
        if (row[v] > best) {
          best = row[v];
          arg = v;
        }
      hits += (arg == batch.targets[static_cast<size_t>(r)]);
      ++total;
    }
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
  index_t steps_run = 0;
  double final_loss = 0.0;
  double final_train_acc = 0.0;  // running accuracy over the last log window
  double final_eval_acc = 0.0;
  std::string run_dir;
  std::string checkpoint_path;
};

std::string make_run_dir(const RunConfig& cfg, bool force);

template <typename T>
TrainResult train_run(const RunConfig& cfg, const std::string& run_dir,
                      bool quiet = false) {
  if (cfg.steps < 1) throw DataError("train: steps must be >= 1");
  if (cfg.threads > 0) set_threads(static_cast<int>(cfg.threads));
  const TaskSpec spec = cfg.task_spec();
  spec.validate();
  Model<T> model;
  model.init(cfg.model_config());
  AdamW<T> opt(cfg.adamw_hyper());
  const std::vector<Param<T>*> params = model.param_list();
  const ScanEngine engine = cfg.scan_engine();

  std::ofstream metrics(run_dir + "/metrics.csv");
  metrics << "step,loss,accuracy,tokens_per_s,lr\n";
  {
    std::ofstream snap(run_dir + "/config.txt");
    snap << render_run_config(cfg);
  }
  const std::string ckpt_path = run_dir + "/checkpoint.bin";

  TrainResult result;
  result.run_dir = run_dir;
  result.checkpoint_path = ckpt_path;
  double window_loss = 0.0;
  index_t window_hits = 0, window_count = 0, window_steps = 0;
  auto window_start = std::chrono::steady_clock::now();

  for (index_t step = 0; step < cfg.steps; ++step) {
    const TaskBatch batch =
        generate_batch(spec, cfg.batch_size, static_cast<std::uint64_t>(step));
    model.zero_grad();
    ModelSaved<T> saved;
    const Tensor<T> logits =
        model.forward(batch.tokens, batch.batch, batch.len, engine, cfg.chunk_len,
                      /*want_grad=*/true, &saved);
    CrossEntropyResult<T> ce = cross_entropy(logits, batch.targets, batch.mask);
    if (!std::isfinite(ce.loss)) {
      std::cerr << "train: non-finite loss at step " << step << "\n";
      model.visit_params([&](const std::string& name, Param<T>& p) {
        double sq = 0;
        for (index_t i = 0; i < p.value.numel(); ++i)
          sq += static_cast<double>(p.value[i]) * static_cast<double>(p.value[i]);
        std::cerr << "  " << name << " norm=" << std::sqrt(sq) << "\n";
      });
      throw DataError("train: NaN loss at step " + std::to_string(step));
    }
    model.backward(saved, ce.dlogits);
    opt.step(params);

    window_loss += ce.loss;
    window_hits += ce.correct;
    window_count += ce.count;
    ++window_steps;
    result.final_loss = ce.loss;
    result.steps_run = step + 1;

    const bool log_now = ((step + 1) % cfg.log_every == 0) || step + 1 == cfg.steps;
    if (log_now) {
      const auto now = std::chrono::steady_clock::now();
      const double secs =
          std::chrono::duration<double>(now - window_start).count();
      const double tokens =
          static_cast<double>(window_steps) * static_cast<double>(batch.batch * batch.len);
      const double acc = window_count
                             ? static_cast<double>(window_hits) / static_cast<double>(window_count)
                             : 0.0;
      result.final_train_acc = acc;
      char line[160];
      std::snprintf(line, sizeof line, "%lld,%.6f,%.4f,%.1f,%.6g",
                    static_cast<long long>(step + 1), window_loss / window_steps,
                    acc, secs > 0 ? tokens / secs : 0.0,
                    lr_at_step(opt.hyper(), step));
      metrics << line << "\n";
      metrics.flush();
      if (!quiet) std::cout << "step " << line << std::endl;
      window_loss = 0;
      window_hits = window_count = window_steps = 0;
      window_start = now;
    }
    const bool eval_now =
        ((step + 1) % cfg.eval_every == 0) || step + 1 == cfg.steps;
    if (eval_now) {
      result.final_eval_acc = evaluate_accuracy(model, spec, spec.seq_len,
                                                cfg.eval_batches, cfg.batch_size,
                                                engine, cfg.chunk_len);
      if (!quiet)
        std::cout << "eval step " << (step + 1) << " acc " << result.final_eval_acc
                  << std::endl;
      save_model(ckpt_path, model, render_run_config(cfg));
      if (cfg.early_stop_acc > 0 && result.final_eval_acc >= cfg.early_stop_acc)
        break;
    }
  }
  save_model(ckpt_path, model, render_run_config(cfg));
  return result;
}

// Dispatch on the configured precision.
TrainResult run_train(const RunConfig& cfg, const std::string& run_dir,
                      bool quiet = false);

// ---------------------------------------------------------------------------
// Eval command
// ---------------------------------------------------------------------------

struct EvalRow {
  index_t length;
  double accuracy;
  index_t n_samples;
};

std::vector<EvalRow> cmd_eval(const std::string& ckpt_path,
                              const std::vector<index_t>& lengths,
                              index_t n_batches, const std::string& csv_out);

// ---------------------------------------------------------------------------
// Gradient-check battery
// ---------------------------------------------------------------------------

struct GradCheckCase {
  std::string name;
  GradCheckReport report;
  double tol;
  bool passed() const { return report.ok(tol); }
};

// Finite-difference checks for every layer and the full model at tiny
// shapes, in f64. full=true adds slower whole-model configurations.
std::vector<GradCheckCase> gradcheck_battery(bool full);

// ---------------------------------------------------------------------------
// Bench command
// ---------------------------------------------------------------------------

struct BenchRow {
  std::string engine;
  index_t B, L, D, N;
  int threads;
  double wall_ms = 0.0;
  std::uint64_t flops = 0;
  index_t bytes_persistent = 0;
  std::string reason;  // nonempty = skipped
};

struct BenchShape {
  index_t B, L, D, N;
};

std::vector<BenchShape> load_bench_grid(const std::string& path);

std::vector<BenchRow> cmd_bench(const std::vector<BenchShape>& shapes,
                                const std::vector<std::string>& engines,
                                const std::vector<int>& thread_counts,
                                const std::string& csv_out);

}  // namespace sscan
