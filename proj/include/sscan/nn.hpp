#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sscan/ops.hpp"
#include "sscan/param.hpp"
#include "sscan/rng.hpp"
#include "sscan/threads.hpp"

namespace sscan {

// Multi-accumulator dot product; the independent chains let the compiler
// vectorize without reassociating a single serial reduction.
template <typename T>
inline T fast_dot(const T* a, const T* b, index_t n) {
  constexpr index_t W = 16;
  T acc[W] = {};
  index_t i = 0;
  for (; i + W <= n; i += W)
    for (index_t k = 0; k < W; ++k) acc[k] += a[i + k] * b[i + k];
  T s = 0;
  for (index_t k = 0; k < W; ++k) s += acc[k];
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

// y = x . W^T (+ bias). Weight is (out, in); bias is disabled by default.
template <typename T>
struct LinearLayer {
  index_t in = 0, out = 0;
  bool has_bias = false;
  Param<T> weight;  // (out, in)
  Param<T> bias;    // (out), only when has_bias

  void init(index_t in_dim, index_t out_dim, Rng& rng, bool with_bias = false) {
    in = in_dim;
    out = out_dim;
    has_bias = with_bias;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight.init(Tensor<T>::uniform({out, in}, rng, -bound, bound));
    if (has_bias) bias.init(Tensor<T>({out}));
  }

  // x: (M, in) -> (M, out).
  Tensor<T> forward(const Tensor<T>& x) const {
    const index_t M = x.numel() / in;
    if (x.dim(x.rank() - 1) != in)
      throw ShapeError("linear: input extent " + shape_str(x.shape()) +
                       " does not end in " + std::to_string(in));
    Tensor<T> y({M, out});
    parallel_for(M, [&](index_t lo, index_t hi) {
      for (index_t m = lo; m < hi; ++m) {
        const T* xr = x.data() + m * in;
        T* yr = y.data() + m * out;
        for (index_t o = 0; o < out; ++o)
          yr[o] = fast_dot(xr, weight.value.data() + o * in, in) +
                  (has_bias ? bias.value[o] : T(0));
      }
    });
    return y;
  }

  // Accumulates dW (and dbias); returns dx of shape (M, in).
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) {
    const index_t M = x.numel() / in;
    Tensor<T> dx({M, in});
    // dx[m,:] += sum_o dy[m,o] * W[o,:]
    parallel_for(M, [&](index_t lo, index_t hi) {
      for (index_t m = lo; m < hi; ++m) {
        const T* dyr = dy.data() + m * out;
        T* dxr = dx.data() + m * in;
        for (index_t o = 0; o < out; ++o) {
          const T g = dyr[o];
          const T* wr = weight.value.data() + o * in;
          for (index_t i = 0; i < in; ++i) dxr[i] += g * wr[i];
        }
      }
    });
    // dW[o,:] += sum_m dy[m,o] * x[m,:] (fixed m order).
    for (index_t m = 0; m < M; ++m) {
      const T* dyr = dy.data() + m * out;
      const T* xr = x.data() + m * in;
      for (index_t o = 0; o < out; ++o) {
        const T g = dyr[o];
        if (g == T(0)) continue;
        T* wr = weight.grad.data() + o * in;
        for (index_t i = 0; i < in; ++i) wr[i] += g * xr[i];
      }
    }
    if (has_bias)
      for (index_t m = 0; m < M; ++m)
        for (index_t o = 0; o < out; ++o) bias.grad[o] += dy[m * out + o];
    return dx;
  }

  void visit(const std::string& prefix,
             const std::function<void(const std::string&, Param<T>&)>& fn) {
    fn(prefix + ".weight", weight);
    if (has_bias) fn(prefix + ".bias", bias);
  }
};

// ---------------------------------------------------------------------------
// Causal depthwise 1-D convolution
// ---------------------------------------------------------------------------

// y[b,t,d] = sum_{w<W} weight[d,w] * x[b,t-W+1+w,d] + bias[d], zeros beyond
// the left edge. Output at t depends only on inputs <= t.
template <typename T>
struct CausalConv1d {
  index_t channels = 0, width = 0;
  Param<T> weight;  // (D, W)
  Param<T> bias;    // (D)

  void init(index_t d, index_t w, Rng& rng) {
    if (w < 1) throw ShapeError("conv1d: width must be >= 1");
    channels = d;
    width = w;
    const double bound = 1.0 / std::sqrt(static_cast<double>(w));
    weight.init(Tensor<T>::uniform({d, w}, rng, -bound, bound));
    bias.init(Tensor<T>({d}));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    const index_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
    Tensor<T> y(x.shape());
    parallel_for(B, [&](index_t lo, index_t hi) {
      for (index_t b = lo; b < hi; ++b)
        for (index_t t = 0; t < L; ++t) {
          T* yr = y.data() + (b * L + t) * D;
          for (index_t d = 0; d < D; ++d) yr[d] = bias.value[d];
          for (index_t w = 0; w < width; ++w) {
            const index_t s = t - width + 1 + w;
            if (s < 0) continue;
            const T* xr = x.data() + (b * L + s) * D;
            for (index_t d = 0; d < D; ++d) yr[d] += weight.value(d, w) * xr[d];
          }
        }
    });
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) {
    const index_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
    Tensor<T> dx(x.shape());
    parallel_for(B, [&](index_t lo, index_t hi) {
      for (index_t b = lo; b < hi; ++b)
        for (index_t t = 0; t < L; ++t) {
          const T* dyr = dy.data() + (b * L + t) * D;
          for (index_t w = 0; w < width; ++w) {
            const index_t s = t - width + 1 + w;
            if (s < 0) continue;
            T* dxr = dx.data() + (b * L + s) * D;
            for (index_t d = 0; d < D; ++d) dxr[d] += weight.value(d, w) * dyr[d];
          }
        }
    });
    for (index_t b = 0; b < B; ++b)
      for (index_t t = 0; t < L; ++t) {
        const T* dyr = dy.data() + (b * L + t) * D;
        for (index_t w = 0; w < width; ++w) {
          const index_t s = t - width + 1 + w;
          if (s < 0) continue;
          const T* xr = x.data() + (b * L + s) * D;
          for (index_t d = 0; d < D; ++d) weight.grad(d, w) += dyr[d] * xr[d];
        }
        for (index_t d = 0; d < D; ++d) bias.grad[d] += dyr[d];
      }
    return dx;
  }

  void visit(const std::string& prefix,
             const std::function<void(const std::string&, Param<T>&)>& fn) {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
  }
};

// ---------------------------------------------------------------------------
// RMSNorm
// ---------------------------------------------------------------------------

inline constexpr double kRmsNormEps = 1e-5;

// y = x / sqrt(mean(x^2) + eps) * gain, normalizing over the last axis.
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain) {
  const index_t D = x.dim(x.rank() - 1);
  const index_t rows = x.numel() / D;
  Tensor<T> y(x.shape());
  parallel_for(rows, [&](index_t lo, index_t hi) {
    for (index_t r = lo; r < hi; ++r) {
      const T* xr = x.data() + r * D;
      T* yr = y.data() + r * D;
      T ms = 0;
      for (index_t d = 0; d < D; ++d) ms += xr[d] * xr[d];
      const T inv = T(1) / std::sqrt(ms / T(D) + T(kRmsNormEps));
      for (index_t d = 0; d < D; ++d) yr[d] = xr[d] * inv * gain[d];
    }
  });
  return y;
}

// Accumulates dgain; returns dx.
template <typename T>
Tensor<T> rmsnorm_backward(const Tensor<T>& x, const Tensor<T>& gain,
                           const Tensor<T>& dy, Tensor<T>& dgain) {
  const index_t D = x.dim(x.rank() - 1);
  const index_t rows = x.numel() / D;
  Tensor<T> dx(x.shape());
  for (index_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * D;
    const T* dyr = dy.data() + r * D;
    T* dxr = dx.data() + r * D;
    T ms = 0;
    for (index_t d = 0; d < D; ++d) ms += xr[d] * xr[d];
    const T inv = T(1) / std::sqrt(ms / T(D) + T(kRmsNormEps));
    T dot = 0;  // sum_d dy*gain*x
    for (index_t d = 0; d < D; ++d) {
      dgain[d] += dyr[d] * xr[d] * inv;
      dot += dyr[d] * gain[d] * xr[d];
    }
    const T k = dot * inv * inv * inv / T(D);
    for (index_t d = 0; d < D; ++d) dxr[d] = dyr[d] * gain[d] * inv - xr[d] * k;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Cross entropy
// ---------------------------------------------------------------------------

template <typename T>
struct CrossEntropyResult {
  double loss;         // mean NLL over unmasked positions
  Tensor<T> dlogits;   // (rows, V), zero on masked-out rows
  index_t count;       // number of supervised positions
  index_t correct;     // argmax hits among supervised positions
};

// logits: (.., V); targets/mask flat over the leading rows. Loss is averaged
// over mask-on rows; dlogits = (softmax - onehot)/count there, zero elsewhere.
// Argmax ties break toward the lowest token id.
template <typename T>
CrossEntropyResult<T> cross_entropy(const Tensor<T>& logits,
                                    const std::vector<std::int32_t>& targets,
                                    const std::vector<std::uint8_t>& mask) {
  const index_t V = logits.dim(logits.rank() - 1);
  const index_t rows = logits.numel() / V;
  if (static_cast<index_t>(targets.size()) != rows ||
      static_cast<index_t>(mask.size()) != rows)
    throw ShapeError("cross_entropy: targets/mask length != logit rows");
  CrossEntropyResult<T> res{0.0, Tensor<T>(logits.shape()), 0, 0};
  for (index_t r = 0; r < rows; ++r)
    if (mask[static_cast<size_t>(r)]) ++res.count;
  if (res.count == 0) return res;
  double loss = 0.0;
  const T invc = T(1) / T(res.count);
  for (index_t r = 0; r < rows; ++r) {
    if (!mask[static_cast<size_t>(r)]) continue;
    const index_t tgt = targets[static_cast<size_t>(r)];
    if (tgt < 0 || tgt >= V)
      throw DataError("cross_entropy: target " + std::to_string(tgt) +
                      " out of range [0," + std::to_string(V) + ")");
    const T* in = logits.data() + r * V;
    T* out = res.dlogits.data() + r * V;
    T m = in[0];
    index_t arg = 0;
    for (index_t i = 1; i < V; ++i)
      if (in[i] > m) {
        m = in[i];
        arg = i;
      }
    if (arg == tgt) ++res.correct;
    T z = 0;
    for (index_t i = 0; i < V; ++i) {
      out[i] = std::exp(in[i] - m);
      z += out[i];
    }
    loss += -(static_cast<double>(in[tgt]) - static_cast<double>(m) -
              std::log(static_cast<double>(z)));
    const T invz = T(1) / z;
    for (index_t i = 0; i < V; ++i) out[i] *= invz * invc;
    out[tgt] -= invc;
  }
  res.loss = loss / static_cast<double>(res.count);
  return res;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

enum class LrSchedule { Constant, WarmupCosine };

struct AdamWHyper {
  double lr_peak = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  double lr_floor = 1e-5;
  double warmup_frac = 0.1;
  LrSchedule schedule = LrSchedule::WarmupCosine;
  index_t total_steps = 1;
};

// Linear warmup over warmup_frac of the budget, then cosine decay to the
// floor. Constant mode returns the peak throughout.
inline double lr_at_step(const AdamWHyper& h, index_t step) {
  if (h.schedule == LrSchedule::Constant) return h.lr_peak;
  const index_t warmup = std::max<index_t>(1, static_cast<index_t>(
                                                  h.warmup_frac * static_cast<double>(h.total_steps)));
  if (step < warmup)
    return h.lr_peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double t = static_cast<double>(step - warmup) /
                   static_cast<double>(std::max<index_t>(1, h.total_steps - warmup));
  return h.lr_floor + (h.lr_peak - h.lr_floor) * 0.5 * (1.0 + std::cos(3.141592653589793 * std::min(1.0, t)));
}

template <typename T>
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWHyper hyper) : hyper_(hyper) {}

  const AdamWHyper& hyper() const { return hyper_; }
  index_t step_count() const { return step_; }

  // Clips the global gradient norm, then applies one decoupled-weight-decay
  // Adam step to every parameter. Moment slots are keyed by position in the
  // (stable) parameter list.
  void step(const std::vector<Param<T>*>& params) {
    if (m_.empty()) {
      for (const Param<T>* p : params) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
      }
    }
    const double lr = lr_at_step(hyper_, step_);
    ++step_;
    double sq = 0.0;
    for (const Param<T>* p : params)
      for (index_t i = 0; i < p->grad.numel(); ++i)
        sq += static_cast<double>(p->grad[i]) * static_cast<double>(p->grad[i]);
    const double norm = std::sqrt(sq);
    const double clip =
        (hyper_.grad_clip > 0 && norm > hyper_.grad_clip) ? hyper_.grad_clip / norm : 1.0;
    const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(step_));
    for (size_t k = 0; k < params.size(); ++k) {
      Param<T>& p = *params[k];
      Tensor<T>& m = m_[k];
      Tensor<T>& v = v_[k];
      for (index_t i = 0; i < p.value.numel(); ++i) {
        const double g = static_cast<double>(p.grad[i]) * clip;
        const double mi = hyper_.beta1 * static_cast<double>(m[i]) + (1.0 - hyper_.beta1) * g;
        const double vi = hyper_.beta2 * static_cast<double>(v[i]) + (1.0 - hyper_.beta2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double update = (mi / bc1) / (std::sqrt(vi / bc2) + hyper_.eps);
        double val = static_cast<double>(p.value[i]);
        val -= lr * hyper_.weight_decay * val;  // decoupled decay
        val -= lr * update;
        p.value[i] = static_cast<T>(val);
      }
    }
  }

 private:
  AdamWHyper hyper_;
  index_t step_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checker
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst;
  bool aborted = false;

  bool ok(double tol) const { return !aborted && max_rel_err <= tol; }
};

// Central differences on a random subsample of coordinates (at most
// max_coords per tensor). Analytic gradients must already be accumulated in
// each Param's grad; loss_fn re-evaluates the loss at the current values.
template <typename T>
GradCheckReport grad_check(
    const std::function<double()>& loss_fn,
    const std::vector<std::pair<std::string, Param<T>*>>& params, double eps,
    Rng& rng, index_t max_coords = 200) {
  GradCheckReport report;
  for (const auto& [name, param] : params) {
    const index_t n = param->value.numel();
    std::vector<index_t> coords;
    if (n <= max_coords) {
      coords.resize(static_cast<size_t>(n));
      for (index_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      for (index_t i = 0; i < max_coords; ++i)
        coords.push_back(static_cast<index_t>(rng.uniform_int(static_cast<std::uint64_t>(n))));
    }
    for (index_t c : coords) {
      const T orig = param->value[c];
      const double h = eps * std::max(1.0, std::abs(static_cast<double>(orig)));
      param->value[c] = static_cast<T>(static_cast<double>(orig) + h);
      const double lp = loss_fn();
      param->value[c] = static_cast<T>(static_cast<double>(orig) - h);
      const double lm = loss_fn();
      param->value[c] = orig;
      if (!std::isfinite(lp) || !std::isfinite(lm)) {
        report.aborted = true;
        report.worst = name + "[" + std::to_string(c) + "]: non-finite loss";
        return report;
      }
      const double fd = (lp - lm) / (2.0 * h);
      const double an = static_cast<double>(param->grad[c]);
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      const double rel = std::abs(fd - an) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = name + "[" + std::to_string(c) + "] fd=" + std::to_string(fd) +
                       " an=" + std::to_string(an);
      }
    }
  }
  return report;
}

}  // namespace sscan
