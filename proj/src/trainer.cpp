#include "sscan/trainer.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <ctime>
#include <map>
#include <sstream>

#include "sscan/instrument.hpp"

namespace sscan {

// ---------------------------------------------------------------------------
// Config file format
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// One row per config key; getters/setters keep parse and render in lockstep
// so parse(render(cfg)) == cfg by construction.
struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::vector<Field> config_fields() {
  std::vector<Field> f;
  auto str = [&](const char* key, std::string RunConfig::* m) {
    f.push_back({key, [m](const RunConfig& c) { return c.*m; },
                 [m](RunConfig& c, const std::string& v) { c.*m = v; }});
  };
  auto num = [&](const char* key, index_t RunConfig::* m) {
    f.push_back({key,
                 [m](const RunConfig& c) { return std::to_string(c.*m); },
                 [m, key](RunConfig& c, const std::string& v) {
                   size_t pos = 0;
                   c.*m = static_cast<index_t>(std::stoll(v, &pos));
                   if (pos != v.size())
                     throw DataError(std::string("config: bad integer for ") + key +
                                     ": " + v);
                 }});
  };
  auto u64 = [&](const char* key, std::uint64_t RunConfig::* m) {
    f.push_back({key,
                 [m](const RunConfig& c) { return std::to_string(c.*m); },
                 [m](RunConfig& c, const std::string& v) { c.*m = std::stoull(v); }});
  };
  auto dbl = [&](const char* key, double RunConfig::* m) {
    f.push_back({key, [m](const RunConfig& c) { return fmt_double(c.*m); },
                 [m](RunConfig& c, const std::string& v) { c.*m = std::stod(v); }});
  };
  auto flag = [&](const char* key, bool RunConfig::* m) {
    f.push_back({key,
                 [m](const RunConfig& c) { return (c.*m) ? "true" : "false"; },
                 [m, key](RunConfig& c, const std::string& v) {
                   if (v == "true" || v == "1")
                     c.*m = true;
                   else if (v == "false" || v == "0")
                     c.*m = false;
                   else
                     throw DataError(std::string("config: bad boolean for ") + key +
                                     ": " + v);
                 }});
  };
  str("task", &RunConfig::task);
  num("seq_len", &RunConfig::seq_len);
  num("vocab", &RunConfig::vocab);
  num("n_memorize", &RunConfig::n_memorize);
  u64("task_seed", &RunConfig::task_seed);
  num("d_model", &RunConfig::d_model);
  num("state_dim", &RunConfig::state_dim);
  num("expand", &RunConfig::expand);
  num("delta_rank", &RunConfig::delta_rank);
  num("n_blocks", &RunConfig::n_blocks);
  num("conv_width", &RunConfig::conv_width);
  str("inner_layer", &RunConfig::inner_layer);
  flag("selective_dt", &RunConfig::selective_dt);
  flag("selective_b", &RunConfig::selective_b);
  flag("selective_c", &RunConfig::selective_c);
  str("precision", &RunConfig::precision);
  u64("seed", &RunConfig::seed);
  num("steps", &RunConfig::steps);
  num("batch_size", &RunConfig::batch_size);
  dbl("lr_peak", &RunConfig::lr_peak);
  str("lr_schedule", &RunConfig::lr_schedule);
  dbl("warmup_frac", &RunConfig::warmup_frac);
  dbl("weight_decay", &RunConfig::weight_decay);
  dbl("grad_clip", &RunConfig::grad_clip);
  dbl("beta1", &RunConfig::beta1);
  dbl("beta2", &RunConfig::beta2);
  str("engine", &RunConfig::engine);
  num("chunk_len", &RunConfig::chunk_len);
  num("threads", &RunConfig::threads);
  str("out_dir", &RunConfig::out_dir);
  str("run_name", &RunConfig::run_name);
  num("log_every", &RunConfig::log_every);
  num("eval_every", &RunConfig::eval_every);
  num("eval_batches", &RunConfig::eval_batches);
  dbl("early_stop_acc", &RunConfig::early_stop_acc);
  return f;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  static const std::vector<Field> fields = config_fields();
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  index_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError("config line " + std::to_string(lineno) +
                      ": expected key=value, got: " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    auto it = std::find_if(fields.begin(), fields.end(),
                           [&](const Field& f) { return f.key == key; });
    if (it == fields.end())
      throw DataError("config line " + std::to_string(lineno) +
                      ": unknown key: " + key);
    it->set(cfg, val);
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("config: cannot open " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_run_config(buf.str());
}

std::string render_run_config(const RunConfig& cfg) {
  static const std::vector<Field> fields = config_fields();
  std::ostringstream os;
  for (const Field& f : fields) os << f.key << " = " << f.get(cfg) << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Training dispatch
// ---------------------------------------------------------------------------

std::string make_run_dir(const RunConfig& cfg, bool force) {
  std::string name = cfg.run_name;
  if (name.empty()) {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    localtime_r(&t, &tm);
    char buf[64];
    std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
    name = cfg.task + "-" + buf;
  }
  const std::string dir = cfg.out_dir + "/" + name;
  if (std::filesystem::exists(dir) && !force)
    throw DataError("run dir already exists (use --force to overwrite): " + dir);
  std::filesystem::create_directories(dir);
  return dir;
}

TrainResult run_train(const RunConfig& cfg, const std::string& run_dir,
                      bool quiet) {
  if (cfg.precision == "f32") return train_run<float>(cfg, run_dir, quiet);
  if (cfg.precision == "f64") return train_run<double>(cfg, run_dir, quiet);
  throw DataError("unknown precision: " + cfg.precision);
}

// ---------------------------------------------------------------------------
// Eval command
// ---------------------------------------------------------------------------

namespace {

template <typename T>
std::pair<index_t, index_t> eval_counts(const Model<T>& model,
                                        const TaskSpec& spec, index_t eval_len,
                                        index_t n_batches, index_t batch_size,
                                        ScanEngine engine, index_t chunk_len) {
  index_t hits = 0, total = 0;
  for (index_t i = 0; i < n_batches; ++i) {
    const TaskBatch batch = generate_batch(
        spec, batch_size, kEvalBatchOffset + static_cast<std::uint64_t>(i), eval_len);
    const Tensor<T> logits =
        model.forward(batch.tokens, batch.batch, batch.len, engine, chunk_len);
    const index_t V = model.cfg.vocab;
    for (index_t r = 0; r < batch.batch * batch.len; ++r) {
      if (!batch.mask[static_cast<size_t>(r)]) continue;
      const T* row = logits.data() + r * V;
      index_t arg = 0;
      for (index_t v = 1; v < V; ++v)
        if (row[v] > row[arg]) arg = v;
      hits += (arg == batch.targets[static_cast<size_t>(r)]);
      ++total;
    }
  }
  return {hits, total};
}

template <typename T>
std::vector<EvalRow> eval_with_model(const CheckpointFile& ckpt,
                                     const RunConfig& cfg,
                                     const std::vector<index_t>& lengths,
                                     index_t n_batches) {
  Model<T> model;
  model.init(cfg.model_config());
  load_model_params(model, ckpt);
  const TaskSpec spec = cfg.task_spec();
  std::vector<EvalRow> rows;
  for (index_t len : lengths) {
    auto [hits, total] =
        eval_counts(model, spec, len, n_batches, cfg.batch_size,
                    cfg.scan_engine(), cfg.chunk_len);
    rows.push_back({len, total ? static_cast<double>(hits) / total : 0.0, total});
  }
  return rows;
}

}  // namespace

std::vector<EvalRow> cmd_eval(const std::string& ckpt_path,
                              const std::vector<index_t>& lengths,
                              index_t n_batches, const std::string& csv_out) {
  const CheckpointFile ckpt = read_checkpoint(ckpt_path);
  const RunConfig cfg = parse_run_config(ckpt.config_text);
  std::vector<EvalRow> rows =
      cfg.precision == "f64"
          ? eval_with_model<double>(ckpt, cfg, lengths, n_batches)
          : eval_with_model<float>(ckpt, cfg, lengths, n_batches);
  if (!csv_out.empty()) {
    std::ofstream os(csv_out);
    os << "length,accuracy,n_samples\n";
    for (const EvalRow& r : rows)
      os << r.length << "," << r.accuracy << "," << r.n_samples << "\n";
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Gradient-check battery
// ---------------------------------------------------------------------------

namespace {

constexpr double kFdEps = 1e-6;
constexpr double kFdTol = 1e-5;

double weighted_sum(const Tensor<double>& y, const Tensor<double>& r) {
  double s = 0;
  for (index_t i = 0; i < y.numel(); ++i) s += static_cast<double>(y[i]) * r[i];
  return s;
}

GradCheckCase check_linear(Rng& rng) {
  LinearLayer<double> lin;
  lin.init(5, 3, rng, /*with_bias=*/true);
  Param<double> px;
  px.init(Tensor<double>::normal({4, 5}, rng, 1.0));
  const Tensor<double> r = Tensor<double>::normal({4, 3}, rng, 1.0);
  lin.weight.zero_grad();
  lin.bias.zero_grad();
  px.grad = lin.backward(px.value, r);
  auto loss = [&] { return weighted_sum(lin.forward(px.value), r); };
  std::vector<std::pair<std::string, Param<double>*>> params = {
      {"weight", &lin.weight}, {"bias", &lin.bias}, {"x", &px}};
  return {"linear", grad_check<double>(loss, params, kFdEps, rng), kFdTol};
}

GradCheckCase check_conv(Rng& rng) {
  CausalConv1d<double> conv;
  conv.init(3, 3, rng);
  Param<double> px;
  px.init(Tensor<double>::normal({2, 5, 3}, rng, 1.0));
  const Tensor<double> r = Tensor<double>::normal({2, 5, 3}, rng, 1.0);
  conv.weight.zero_grad();
  conv.bias.zero_grad();
  px.grad = conv.backward(px.value, r);
  auto loss = [&] { return weighted_sum(conv.forward(px.value), r); };
  std::vector<std::pair<std::string, Param<double>*>> params = {
      {"weight", &conv.weight}, {"bias", &conv.bias}, {"x", &px}};
  return {"conv1d", grad_check<double>(loss, params, kFdEps, rng), kFdTol};
}

GradCheckCase check_rmsnorm(Rng& rng) {
  Param<double> gain, px;
  gain.init(Tensor<double>::uniform({6}, rng, 0.5, 1.5));
  px.init(Tensor<double>::normal({4, 6}, rng, 1.0));
  const Tensor<double> r = Tensor<double>::normal({4, 6}, rng, 1.0);
  gain.zero_grad();
  px.grad = rmsnorm_backward(px.value, gain.value, r, gain.grad);
  auto loss = [&] { return weighted_sum(rmsnorm(px.value, gain.value), r); };
  std::vector<std::pair<std::string, Param<double>*>> params = {
      {"gain", &gain}, {"x", &px}};
  return {"rmsnorm", grad_check<double>(loss, params, kFdEps, rng), kFdTol};
}

GradCheckCase check_cross_entropy(Rng& rng) {
  const index_t M = 6, V = 7;
  LinearLayer<double> lin;
  lin.init(5, V, rng);
  Param<double> px;
  px.init(Tensor<double>::normal({M, 5}, rng, 1.0));
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> mask;
  for (index_t i = 0; i < M; ++i) {
    targets.push_back(static_cast<std::int32_t>(rng.uniform_int(V)));
    mask.push_back(i % 3 == 2 ? 0 : 1);  // exercise masked-out rows too
  }
  auto loss = [&] {
    return cross_entropy(lin.forward(px.value), targets, mask).loss;
  };
  lin.weight.zero_grad();
  auto ce = cross_entropy(lin.forward(px.value), targets, mask);
  px.grad = lin.backward(px.value, ce.dlogits);
  std::vector<std::pair<std::string, Param<double>*>> params = {
      {"weight", &lin.weight}, {"x", &px}};
  return {"cross_entropy", grad_check<double>(loss, params, kFdEps, rng), kFdTol};
}

GradCheckCase check_s6(const std::string& name, bool sdt, bool sb, bool sc,
                       Rng& rng) {
  const index_t B = 2, L = 7, D = 3, N = 4, R = 2, chunk = 3;
  SsmLayerParams<double> p;
  p.init(D, N, R, rng);
  p.selective_dt = sdt;
  p.selective_B = sb;
  p.selective_C = sc;
  Param<double> px;
  px.init(Tensor<double>::normal({B, L, D}, rng, 1.0));
  const Tensor<double> r = Tensor<double>::normal({B, L, D}, rng, 1.0);
  std::vector<std::pair<std::string, Param<double>*>> params;
  p.visit("ssm", [&](const std::string& n, Param<double>& pr) {
    pr.zero_grad();
    params.emplace_back(n, &pr);
  });
  params.emplace_back("x", &px);
  S6Output<double> out =
      s6_forward(px.value, p, ScanEngine::Chunked, chunk, /*want_grad=*/true);
  px.grad = s6_backward(p, out.saved, r);
  auto loss = [&] {
    return weighted_sum(s6_forward(px.value, p, ScanEngine::Chunked, chunk).y, r);
  };
  return {name, grad_check<double>(loss, params, kFdEps, rng), kFdTol};
}

GradCheckCase check_model(const std::string& name, const ModelConfig& mc,
                          index_t B, index_t L, index_t chunk, Rng& rng) {
  Model<double> model;
  model.init(mc);
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> mask;
  for (index_t i = 0; i < B * L; ++i) {
    tokens.push_back(static_cast<std::int32_t>(rng.uniform_int(mc.vocab)));
    targets.push_back(static_cast<std::int32_t>(rng.uniform_int(mc.vocab)));
    mask.push_back(1);
  }
  model.zero_grad();
  ModelSaved<double> saved;
  const Tensor<double> logits = model.forward(tokens, B, L, ScanEngine::Chunked,
                                              chunk, /*want_grad=*/true, &saved);
  auto ce = cross_entropy(logits, targets, mask);
  model.backward(saved, ce.dlogits);
  auto loss = [&] {
    return cross_entropy(model.forward(tokens, B, L, ScanEngine::Chunked, chunk),
                         targets, mask)
        .loss;
  };
  std::vector<std::pair<std::string, Param<double>*>> params;
  model.visit_params(
      [&](const std::string& n, Param<double>& p) { params.emplace_back(n, &p); });
  return {name, grad_check<double>(loss, params, kFdEps, rng, /*max_coords=*/40),
          kFdTol};
}

}  // namespace

std::vector<GradCheckCase> gradcheck_battery(bool full) {
  Rng rng(0x5eedull);
  std::vector<GradCheckCase> cases;
  cases.push_back(check_linear(rng));
  cases.push_back(check_conv(rng));
  cases.push_back(check_rmsnorm(rng));
  cases.push_back(check_cross_entropy(rng));
  cases.push_back(check_s6("s6_selective", true, true, true, rng));
  cases.push_back(check_s6("s6_lti", false, false, false, rng));
  cases.push_back(check_s6("s6_dt_only", true, false, false, rng));
  {
    ModelConfig mc;
    mc.vocab = 8;
    mc.D = 4;
    mc.N = 3;
    mc.E = 2;
    mc.R = 2;
    mc.n_blocks = 1;
    mc.conv_width = 2;
    mc.seed = 7;
    cases.push_back(check_model("model_1block", mc, 2, 6, 3, rng));
  }
  if (full) {
    cases.push_back(check_s6("s6_bc_only", false, true, true, rng));
    ModelConfig mc;
    mc.vocab = 8;
    mc.D = 4;
    mc.N = 3;
    mc.E = 2;
    mc.R = 2;
    mc.n_blocks = 2;
    mc.conv_width = 3;
    mc.seed = 11;
    cases.push_back(check_model("model_2block", mc, 2, 10, 4, rng));
    mc.inner_layer = InnerLayer::S4Lti;
    mc.seed = 13;
    cases.push_back(check_model("model_s4lti", mc, 2, 10, 4, rng));
  }
  return cases;
}

// ---------------------------------------------------------------------------
// Bench command
// ---------------------------------------------------------------------------

std::vector<BenchShape> load_bench_grid(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("bench: cannot open grid file " + path);
  std::vector<BenchShape> shapes;
  std::string line;
  index_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    std::istringstream row(line);
    BenchShape s{};
    if (!(row >> s.B >> s.L >> s.D >> s.N))
      throw DataError("bench: grid line " + std::to_string(lineno) +
                      ": expected 'B L D N', got: " + line);
    shapes.push_back(s);
  }
  return shapes;
}

namespace {

ScanEngine engine_from_name(const std::string& name) {
  RunConfig c;
  c.engine = name;
  return c.scan_engine();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0;
  for (index_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace

std::vector<BenchRow> cmd_bench(const std::vector<BenchShape>& shapes,
                                const std::vector<std::string>& engines,
                                const std::vector<int>& thread_counts,
                                const std::string& csv_out) {
  constexpr int kWarmups = 2, kReps = 5;
  std::vector<BenchRow> rows;
  for (const BenchShape& s : shapes) {
    Rng rng(0xbe7c4ull ^ static_cast<std::uint64_t>(s.L * 131 + s.D));
    SsmLayerParams<float> sel, lti;
    sel.init(s.D, s.N, std::max<index_t>(1, (s.D + 15) / 16), rng);
    lti = sel;
    lti.selective_dt = lti.selective_B = lti.selective_C = false;
    const Tensor<float> x = Tensor<float>::normal({s.B, s.L, s.D}, rng, 1.0f);
    set_threads(1);
    const Tensor<float> ref = s6_forward(x, sel, ScanEngine::Sequential).y;
    const Tensor<float> ref_lti = s6_forward(x, lti, ScanEngine::Sequential).y;
    for (const std::string& engine_str : engines) {
      const ScanEngine engine = engine_from_name(engine_str);
      const bool is_conv = engine == ScanEngine::Conv;
      const SsmLayerParams<float>& p = is_conv ? lti : sel;
      for (int threads : thread_counts) {
        BenchRow row;
        row.engine = engine_str;
        row.B = s.B;
        row.L = s.L;
        row.D = s.D;
        row.N = s.N;
        row.threads = threads;
        set_threads(threads);
        // Cross-check against the single-threaded sequential reference.
        const Tensor<float> got = s6_forward(x, p, engine).y;
        const double diff = max_abs_diff(got, is_conv ? ref_lti : ref);
        if (diff > 1e-3) {  // f32 accumulation-order slack; exactness is
                            // asserted separately in f64
          row.reason = "mismatch vs sequential: " + std::to_string(diff);
          rows.push_back(row);
          continue;
        }
        for (int i = 0; i < kWarmups; ++i) (void)s6_forward(x, p, engine);
        FlopCounter::reset();
        (void)s6_forward(x, p, engine);
        row.flops = FlopCounter::get();
        if (engine == ScanEngine::Chunked) {
          S6Output<float> out = s6_forward(x, p, engine, kDefaultChunkLen, true);
          row.bytes_persistent = out.saved.persistent_bytes();
        } else if (!is_conv) {
          // Materializing paths would have to keep A_bar, Bx_bar and h.
          row.bytes_persistent =
              3 * s.B * s.L * s.D * s.N * static_cast<index_t>(sizeof(float));
        }
        std::vector<double> times;
        for (int i = 0; i < kReps; ++i) {
          const auto t0 = std::chrono::steady_clock::now();
          (void)s6_forward(x, p, engine);
          const auto t1 = std::chrono::steady_clock::now();
          times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        row.wall_ms = median(times);
        rows.push_back(row);
      }
    }
  }
  if (!csv_out.empty()) {
    std::ofstream os(csv_out);
    os << "engine,B,L,D,N,threads,wall_ms,flops,bytes_persistent,reason\n";
    for (const BenchRow& r : rows)
      os << r.engine << "," << r.B << "," << r.L << "," << r.D << "," << r.N << ","
         << r.threads << "," << r.wall_ms << "," << r.flops << ","
         << r.bytes_persistent << "," << r.reason << "\n";
  }
  return rows;
}

}  // namespace sscan
