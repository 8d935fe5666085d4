#include <CLI11.hpp>
#include <iostream>

#include "sscan/trainer.hpp"

using namespace sscan;

int main(int argc, char** argv) {
  CLI::App app{"selective state space scan: train / eval / gradcheck / bench"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train a model from a config file");
  std::string config_path;
  std::int64_t seed_override = -1;
  int threads_override = 0;
  bool force = false, quiet = false;
  train->add_option("--config", config_path, "key=value run config")->required();
  train->add_option("--seed", seed_override, "override the config seed");
  train->add_option("--threads", threads_override, "override the thread count");
  train->add_flag("--force", force, "overwrite an existing run directory");
  train->add_flag("--quiet", quiet, "suppress per-window console logging");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint at given lengths");
  std::string ckpt_path, eval_csv;
  std::vector<std::int64_t> lengths;
  std::int64_t eval_batches = 32;
  eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  eval->add_option("--lengths", lengths, "sequence lengths to evaluate")->required();
  eval->add_option("--batches", eval_batches, "batches per length");
  eval->add_option("--out", eval_csv, "CSV output path");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient battery");
  bool full = false;
  gradcheck->add_flag("--full", full, "include the slow whole-model cases");

  // bench
  auto* bench = app.add_subcommand("bench", "scan-engine benchmark over a shape grid");
  std::string grid_path, bench_csv = "bench.csv";
  std::vector<std::string> engines = {"sequential", "parallel", "chunked"};
  std::vector<int> thread_counts = {1};
  bench->add_option("--grid", grid_path, "grid file: 'B L D N' per line")->required();
  bench->add_option("--out", bench_csv, "CSV output path");
  bench->add_option("--engines", engines, "engines to run");
  bench->add_option("--threads", thread_counts, "thread counts to sweep");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      RunConfig cfg = load_run_config(config_path);
      if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
      if (threads_override > 0) cfg.threads = threads_override;
      const std::string run_dir = make_run_dir(cfg, force);
      std::cout << "run dir: " << run_dir << "\n";
      const TrainResult res = run_train(cfg, run_dir, quiet);
      std::cout << "done: steps=" << res.steps_run << " loss=" << res.final_loss
                << " eval_acc=" << res.final_eval_acc << "\n"
                << "checkpoint: " << res.checkpoint_path << "\n";
    } else if (*eval) {
      std::vector<index_t> ls(lengths.begin(), lengths.end());
      const auto rows = cmd_eval(ckpt_path, ls, eval_batches, eval_csv);
      std::cout << "length,accuracy,n_samples\n";
      for (const EvalRow& r : rows)
        std::cout << r.length << "," << r.accuracy << "," << r.n_samples << "\n";
    } else if (*gradcheck) {
      bool all_ok = true;
      for (const GradCheckCase& c : gradcheck_battery(full)) {
        const bool ok = c.passed();
        all_ok = all_ok && ok;
        std::cout << (ok ? "PASS" : "FAIL") << " " << c.name
                  << " max_rel_err=" << c.report.max_rel_err;
        if (!ok) std::cout << " worst=" << c.report.worst;
        std::cout << "\n";
      }
      return all_ok ? 0 : 1;
    } else if (*bench) {
      const auto rows = cmd_bench(load_bench_grid(grid_path), engines,
                                  thread_counts, bench_csv);
      for (const BenchRow& r : rows)
        std::cout << r.engine << " B=" << r.B << " L=" << r.L << " D=" << r.D
                  << " N=" << r.N << " t=" << r.threads << " " << r.wall_ms
                  << " ms" << (r.reason.empty() ? "" : " SKIP: " + r.reason)
                  << "\n";
      std::cout << "wrote " << bench_csv << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
