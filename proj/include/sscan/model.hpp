#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sscan/nn.hpp"
#include "sscan/ssm.hpp"

namespace sscan {

enum class InnerLayer { S6, S4Lti };

struct ModelConfig {
  index_t vocab = 16;
  index_t D = 64;         // model dimension
  index_t N = 16;         // SSM state dimension
  index_t E = 2;          // expansion factor; inner dimension is E*D
  index_t R = 0;          // delta rank; 0 means max(1, ceil(D/16))
  index_t n_blocks = 2;
  index_t conv_width = 4;
  InnerLayer inner_layer = InnerLayer::S6;
  bool selective_dt = true, selective_B = true, selective_C = true;
  std::uint64_t seed = 42;

  index_t inner_dim() const { return E * D; }
  index_t delta_rank() const {
    return R > 0 ? R : std::max<index_t>(1, (D + 15) / 16);
  }
  // The S4-LTI baseline is the same block with every selection toggle off.
  bool dt_on() const { return inner_layer == InnerLayer::S6 && selective_dt; }
  bool b_on() const { return inner_layer == InnerLayer::S6 && selective_B; }
  bool c_on() const { return inner_layer == InnerLayer::S6 && selective_C; }
};

// ---------------------------------------------------------------------------
// Mamba block
// ---------------------------------------------------------------------------

template <typename T>
struct BlockSaved {
  Tensor<T> x;          // block input (B,L,D)
  Tensor<T> u;          // rmsnorm(x)
  Tensor<T> conv_in;    // u . in_proj_a, (B,L,ED)
  Tensor<T> conv_pre;   // conv output before SiLU
  Tensor<T> a;          // silu(conv_pre), SSM input
  Tensor<T> gate_pre;   // u . in_proj_b
  Tensor<T> y_ssm;      // SSM output
  S6Saved<T> ssm_saved;
};

// Pre-norm residual block: the SSM branch (proj -> conv -> SiLU -> SSM)
// multiplied by a SiLU gate branch, projected back to D and added to the
// input.
template <typename T>
struct MambaBlock {
  index_t D = 0, ED = 0;
  Param<T> norm_gain;       // (D)
  LinearLayer<T> in_proj_a;  // D -> ED
  LinearLayer<T> in_proj_b;  // D -> ED
  CausalConv1d<T> conv;      // depthwise on ED
  SsmLayerParams<T> ssm;     // on ED channels
  LinearLayer<T> out_proj;   // ED -> D

  void init(const ModelConfig& cfg, Rng& rng) {
    D = cfg.D;
    ED = cfg.inner_dim();
    norm_gain.init(Tensor<T>::full({D}, T(1)));
    in_proj_a.init(D, ED, rng);
    in_proj_b.init(D, ED, rng);
    conv.init(ED, cfg.conv_width, rng);
    ssm.init(ED, cfg.N, cfg.delta_rank(), rng);
    ssm.selective_dt = cfg.dt_on();
    ssm.selective_B = cfg.b_on();
    ssm.selective_C = cfg.c_on();
    out_proj.init(ED, D, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, ScanEngine engine, index_t chunk_len,
                    bool want_grad, BlockSaved<T>* saved) const {
    const index_t B = x.dim(0), L = x.dim(1);
    Tensor<T> u = rmsnorm(x, norm_gain.value);
    Tensor<T> conv_in = in_proj_a.forward(u).reshaped({B, L, ED});
    Tensor<T> conv_pre = conv.forward(conv_in);
    Tensor<T> a = silu(conv_pre);
    Tensor<T> gate_pre = in_proj_b.forward(u).reshaped({B, L, ED});
    S6Output<T> ssm_out = s6_forward(a, ssm, engine, chunk_len, want_grad);
    Tensor<T> gated({B, L, ED});
    for (index_t i = 0; i < gated.numel(); ++i)
      gated[i] = ssm_out.y[i] * silu_scalar(gate_pre[i]);
    Tensor<T> y = out_proj.forward(gated).reshaped({B, L, D});
    for (index_t i = 0; i < y.numel(); ++i) y[i] += x[i];
    if (want_grad && saved) {
      saved->x = x;
      saved->u = std::move(u);
      saved->conv_in = std::move(conv_in);
      saved->conv_pre = std::move(conv_pre);
      saved->a = std::move(a);
      saved->gate_pre = std::move(gate_pre);
      saved->y_ssm = std::move(ssm_out.y);
      saved->ssm_saved = std::move(ssm_out.saved);
    }
    return y;
  }

  Tensor<T> backward(const BlockSaved<T>& s, const Tensor<T>& dy) {
    const index_t B = s.x.dim(0), L = s.x.dim(1);
    // out = x + out_proj(gated)
    Tensor<T> gated({B, L, ED});
    for (index_t i = 0; i < gated.numel(); ++i)
      gated[i] = s.y_ssm[i] * silu_scalar(s.gate_pre[i]);
    Tensor<T> dgated =
        out_proj.backward(gated.reshaped({B * L, ED}), dy.reshaped({B * L, D}))
            .reshaped({B, L, ED});
    Tensor<T> dyssm({B, L, ED}), dgate_pre({B, L, ED});
    for (index_t i = 0; i < dgated.numel(); ++i) {
      dyssm[i] = dgated[i] * silu_scalar(s.gate_pre[i]);
      dgate_pre[i] = dgated[i] * s.y_ssm[i] * silu_grad_scalar(s.gate_pre[i]);
    }
    Tensor<T> da = s6_backward(ssm, s.ssm_saved, dyssm);
    Tensor<T> dconv_pre({B, L, ED});
    for (index_t i = 0; i < da.numel(); ++i)
      dconv_pre[i] = da[i] * silu_grad_scalar(s.conv_pre[i]);
    Tensor<T> dconv_in = conv.backward(s.conv_in, dconv_pre);
    Tensor<T> du =
        in_proj_a.backward(s.u.reshaped({B * L, D}), dconv_in.reshaped({B * L, ED}));
    Tensor<T> du_b =
        in_proj_b.backward(s.u.reshaped({B * L, D}), dgate_pre.reshaped({B * L, ED}));
    for (index_t i = 0; i < du.numel(); ++i) du[i] += du_b[i];
    Tensor<T> dx = rmsnorm_backward(s.x, norm_gain.value,
                                    du.reshaped({B, L, D}), norm_gain.grad);
    for (index_t i = 0; i < dx.numel(); ++i) dx[i] += dy[i];
    return dx;
  }

  void visit(const std::string& prefix,
             const std::function<void(const std::string&, Param<T>&)>& fn) {
    fn(prefix + ".norm_gain", norm_gain);
    in_proj_a.visit(prefix + ".in_proj_a", fn);
    in_proj_b.visit(prefix + ".in_proj_b", fn);
    conv.visit(prefix + ".conv", fn);
    ssm.visit(prefix + ".ssm", fn);
    out_proj.visit(prefix + ".out_proj", fn);
  }
};

// ---------------------------------------------------------------------------
// Full sequence model
// ---------------------------------------------------------------------------

template <typename T>
struct ModelSaved {
  Tensor<T> embedded;  // (B,L,D)
  std::vector<BlockSaved<T>> blocks;
  Tensor<T> pre_head;       // input of the final norm
  Tensor<T> head_in;        // rmsnorm output fed to the head
  std::vector<std::int32_t> tokens;
  index_t B = 0, L = 0;
};

// embed -> n_blocks x MambaBlock -> RMSNorm -> untied LM head.
template <typename T>
struct Model {
  ModelConfig cfg;
  Param<T> embed;  // (vocab, D)
  std::vector<MambaBlock<T>> blocks;
  Param<T> final_gain;    // (D)
  LinearLayer<T> head;    // D -> vocab

  void init(const ModelConfig& config) {
    cfg = config;
    Rng rng(cfg.seed);
    embed.init(Tensor<T>::normal({cfg.vocab, cfg.D}, rng, 0.02));
    blocks.assign(static_cast<size_t>(cfg.n_blocks), MambaBlock<T>());
    for (auto& b : blocks) b.init(cfg, rng);
    final_gain.init(Tensor<T>::full({cfg.D}, T(1)));
    head.init(cfg.D, cfg.vocab, rng);
  }

  // tokens: B*L ids, row-major. Returns logits (B,L,vocab).
  Tensor<T> forward(const std::vector<std::int32_t>& tokens, index_t B, index_t L,
                    ScanEngine engine = ScanEngine::Chunked,
                    index_t chunk_len = kDefaultChunkLen, bool want_grad = false,
                    ModelSaved<T>* saved = nullptr) const {
    if (static_cast<index_t>(tokens.size()) != B * L)
      throw ShapeError("model_forward: token count != B*L");
    Tensor<T> x({B, L, cfg.D});
    for (index_t i = 0; i < B * L; ++i) {
      const std::int32_t t = tokens[static_cast<size_t>(i)];
      if (t < 0 || t >= cfg.vocab)
        throw DataError("model_forward: token " + std::to_string(t) +
                        " out of range [0," + std::to_string(cfg.vocab) + ")");
      std::copy(embed.value.data() + t * cfg.D, embed.value.data() + (t + 1) * cfg.D,
                x.data() + i * cfg.D);
    }
    if (saved) {
      saved->tokens = tokens;
      saved->B = B;
      saved->L = L;
      saved->embedded = x;
      saved->blocks.assign(blocks.size(), BlockSaved<T>());
    }
    for (size_t i = 0; i < blocks.size(); ++i)
      x = blocks[i].forward(x, engine, chunk_len, want_grad,
                            saved ? &saved->blocks[i] : nullptr);
    if (saved) saved->pre_head = x;
    Tensor<T> u = rmsnorm(x, final_gain.value);
    if (saved) saved->head_in = u;
    return head.forward(u.reshaped({B * L, cfg.D})).reshaped({B, L, cfg.vocab});
  }

  // Accumulates all parameter gradients from dlogits.
  void backward(ModelSaved<T>& s, const Tensor<T>& dlogits) {
    const index_t B = s.B, L = s.L;
    Tensor<T> du = head.backward(s.head_in.reshaped({B * L, cfg.D}),
                                 dlogits.reshaped({B * L, cfg.vocab}));
    Tensor<T> dx = rmsnorm_backward(s.pre_head, final_gain.value,
                                    du.reshaped({B, L, cfg.D}), final_gain.grad);
    for (index_t i = static_cast<index_t>(blocks.size()) - 1; i >= 0; --i)
      dx = blocks[static_cast<size_t>(i)].backward(s.blocks[static_cast<size_t>(i)], dx);
    for (index_t i = 0; i < B * L; ++i) {
      const std::int32_t t = s.tokens[static_cast<size_t>(i)];
      T* row = embed.grad.data() + t * cfg.D;
      const T* g = dx.data() + i * cfg.D;
      for (index_t d = 0; d < cfg.D; ++d) row[d] += g[d];
    }
  }

  void visit_params(const std::function<void(const std::string&, Param<T>&)>& fn) {
    fn("embed", embed);
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit("block" + std::to_string(i), fn);
    fn("final_gain", final_gain);
    head.visit("head", fn);
  }

  std::vector<Param<T>*> param_list() {
    std::vector<Param<T>*> out;
    visit_params([&](const std::string&, Param<T>& p) { out.push_back(&p); });
    return out;
  }

  void zero_grad() {
    visit_params([](const std::string&, Param<T>& p) { p.zero_grad(); });
  }

  template <typename U>
  Model<U> cast() const {
    Model<U> other;
    other.init(cfg);
    std::vector<Param<U>*> dst;
    other.visit_params([&](const std::string&, Param<U>& p) { dst.push_back(&p); });
    size_t k = 0;
    const_cast<Model<T>*>(this)->visit_params([&](const std::string&, Param<T>& p) {
      dst[k]->value = p.value.template cast<U>();
      ++k;
    });
    return other;
  }
};

// Per-module parameter counts plus the grand total.
template <typename T>
std::vector<std::pair<std::string, index_t>> count_params(Model<T>& model) {
  std::vector<std::pair<std::string, index_t>> table;
  index_t total = 0;
  model.visit_params([&](const std::string& name, Param<T>& p) {
    table.emplace_back(name, p.numel());
    total += p.numel();
  });
  table.emplace_back("total", total);
  return table;
}

// Parameters of one block (the 3*E*D^2 budget check).
template <typename T>
index_t count_block_params(MambaBlock<T>& block) {
  index_t total = 0;
  block.visit("b", [&](const std::string&, Param<T>& p) { total += p.numel(); });
  return total;
}

}  // namespace sscan
