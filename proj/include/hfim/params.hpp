#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hfim/errors.hpp"
#include "hfim/fim.hpp"
#include "hfim/rng.hpp"
#include "hfim/vocab.hpp"

namespace hfim {

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int vocab_size = Vocab::kSize;
  int max_seq = 256;
  std::uint64_t init_seed = 0;
  HlpConvention hlp_convention = HlpConvention::Eq3Literal;

  int head_dim() const { return d_model / n_heads; }
};

inline void validate(const ModelConfig& c) {
  if (c.n_layers < 1) throw ConfigError("ModelConfig: n_layers must be >= 1");
  if (c.n_heads < 1) throw ConfigError("ModelConfig: n_heads must be >= 1");
  if (c.d_model < 1 || c.d_ff < 1) {
    throw ConfigError("ModelConfig: d_model and d_ff must be >= 1");
  }
  if (c.d_model % c.n_heads != 0) {
    throw ConfigError("ModelConfig: d_model must be divisible by n_heads");
  }
  if (c.vocab_size < Vocab::kFirstChar + 1) {
    throw ConfigError("ModelConfig: vocab_size too small for the sentinel ids");
  }
  if (c.max_seq < 12) {
    throw ConfigError("ModelConfig: max_seq must be >= 12 (shortest document plus sentinels)");
  }
}

// Decoder weights. Layout is pre-norm: x + Attn(LN1(x)), then x + FFN(LN2(x)),
// a final LayerNorm, an untied unembedding, and optional bias-free scalar
// heads read from the post-final-norm hidden state.
template <typename S>
struct ParamsT {
  struct Layer {
    VecX<S> ln1_gain, ln1_bias;        // [d]
    MatX<S> w_qkv;                     // [d, 3d]
    VecX<S> b_qkv;                     // [3d]
    MatX<S> w_attn_out;                // [d, d]
    VecX<S> b_attn_out;                // [d]
    VecX<S> ln2_gain, ln2_bias;        // [d]
    MatX<S> w_ff_up;                   // [d, d_ff]
    VecX<S> b_ff_up;                   // [d_ff]
    MatX<S> w_ff_down;                 // [d_ff, d]
    VecX<S> b_ff_down;                 // [d]
  };

  MatX<S> tok_embed;                   // [V, d]
  MatX<S> pos_embed;                   // [max_seq, d]
  std::vector<Layer> layers;
  VecX<S> lnf_gain, lnf_bias;          // [d]
  MatX<S> w_unembed;                   // [d, V]
  bool has_heads = false;
  VecX<S> w_hlp_fim;                   // [d], present iff has_heads
  VecX<S> w_hlp_l2r;                   // [d], present iff has_heads
};

using Params = ParamsT<float>;

namespace detail {

// Visits every tensor in manifest order: the serialization order of
// checkpoints, and the flattening order for gradient checks. f is called as
// f(name, eigen_ref) where eigen_ref is MatX<S>& or VecX<S>& (const if P is).
template <typename P, typename F>
void visit_tensors(P& p, F&& f) {
  f("tok_embed", p.tok_embed);
  f("pos_embed", p.pos_embed);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& ly = p.layers[l];
    const std::string pre = "layer." + std::to_string(l) + ".";
    f(pre + "ln1.gain", ly.ln1_gain);
    f(pre + "ln1.bias", ly.ln1_bias);
    f(pre + "attn.w_qkv", ly.w_qkv);
    f(pre + "attn.b_qkv", ly.b_qkv);
    f(pre + "attn.w_out", ly.w_attn_out);
    f(pre + "attn.b_out", ly.b_attn_out);
    f(pre + "ln2.gain", ly.ln2_gain);
    f(pre + "ln2.bias", ly.ln2_bias);
    f(pre + "ffn.w_up", ly.w_ff_up);
    f(pre + "ffn.b_up", ly.b_ff_up);
    f(pre + "ffn.w_down", ly.w_ff_down);
    f(pre + "ffn.b_down", ly.b_ff_down);
  }
  f("lnf.gain", p.lnf_gain);
  f("lnf.bias", p.lnf_bias);
  f("w_unembed", p.w_unembed);
  if (p.has_heads) {
    f("w_hlp_fim", p.w_hlp_fim);
    f("w_hlp_l2r", p.w_hlp_l2r);
  }
}

}  // namespace detail

template <typename S, typename F>
void visit_tensors(ParamsT<S>& p, F&& f) {
  detail::visit_tensors(p, std::forward<F>(f));
}
template <typename S, typename F>
void visit_tensors(const ParamsT<S>& p, F&& f) {
  detail::visit_tensors(p, std::forward<F>(f));
}

// Allocates every tensor at its configured shape, zero-filled.
template <typename S>
ParamsT<S> zero_params(const ModelConfig& cfg, bool with_heads) {
  validate(cfg);
  const int d = cfg.d_model;
  ParamsT<S> p;
  p.tok_embed = MatX<S>::Zero(cfg.vocab_size, d);
  p.pos_embed = MatX<S>::Zero(cfg.max_seq, d);
  p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& ly : p.layers) {
    ly.ln1_gain = VecX<S>::Zero(d);
    ly.ln1_bias = VecX<S>::Zero(d);
    ly.w_qkv = MatX<S>::Zero(d, 3 * d);
    ly.b_qkv = VecX<S>::Zero(3 * d);
    ly.w_attn_out = MatX<S>::Zero(d, d);
    ly.b_attn_out = VecX<S>::Zero(d);
    ly.ln2_gain = VecX<S>::Zero(d);
    ly.ln2_bias = VecX<S>::Zero(d);
    ly.w_ff_up = MatX<S>::Zero(d, cfg.d_ff);
    ly.b_ff_up = VecX<S>::Zero(cfg.d_ff);
    ly.w_ff_down = MatX<S>::Zero(cfg.d_ff, d);
    ly.b_ff_down = VecX<S>::Zero(d);
  }
  p.lnf_gain = VecX<S>::Zero(d);
  p.lnf_bias = VecX<S>::Zero(d);
  p.w_unembed = MatX<S>::Zero(d, cfg.vocab_size);
  p.has_heads = with_heads;
  if (with_heads) {
    p.w_hlp_fim = VecX<S>::Zero(d);
    p.w_hlp_l2r = VecX<S>::Zero(d);
  }
  return p;
}

// Draws weight matrices N(0, 0.02^2) from Rng(cfg.init_seed) in a fixed order
// (tok_embed, pos_embed, then per layer w_qkv, w_attn_out, w_ff_up, w_ff_down,
// then w_unembed; each row-major elementwise). Residual-path projections
// (attn.w_out, ffn.w_down) are scaled by 1/sqrt(2 * n_layers). Gains start at
// 1, biases at 0, and both HLP heads at exactly zero so an untrained head
// predicts sigma(0) = 0.5 everywhere.
template <typename S>
ParamsT<S> init_params(const ModelConfig& cfg, bool with_heads = true) {
  ParamsT<S> p = zero_params<S>(cfg, with_heads);
  Rng rng(cfg.init_seed);
  const double base_std = 0.02;
  const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  auto fill = [&rng](MatX<S>& m, double std) {
    S* ptr = m.data();  // row-major storage, so this order is row-by-row
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      ptr[i] = static_cast<S>(rng.normal(0.0, std));
    }
  };
  fill(p.tok_embed, base_std);
  fill(p.pos_embed, base_std);
  for (auto& ly : p.layers) {
    fill(ly.w_qkv, base_std);
    fill(ly.w_attn_out, base_std * resid_scale);
    fill(ly.w_ff_up, base_std);
    fill(ly.w_ff_down, base_std * resid_scale);
    ly.ln1_gain.setOnes();
    ly.ln2_gain.setOnes();
  }
  p.lnf_gain.setOnes();
  fill(p.w_unembed, base_std);
  return p;
}

// Closed-form parameter count:
//   V*d + max_seq*d
//   + n_layers * (4*d           (two LayerNorms)
//                 + 3*d*d + 3*d (qkv)
//                 + d*d + d     (attn out)
//                 + 2*d*d_ff + d_ff + d)  (ffn)
//   + 2*d + d*V
//   + (with_heads ? 2*d : 0)
inline std::int64_t param_count(const ModelConfig& cfg, bool with_heads) {
  validate(cfg);
  const std::int64_t d = cfg.d_model;
  const std::int64_t dff = cfg.d_ff;
  const std::int64_t v = cfg.vocab_size;
  std::int64_t per_layer = 4 * d + 3 * d * d + 3 * d + d * d + d + 2 * d * dff + dff + d;
  std::int64_t n = v * d + cfg.max_seq * d + cfg.n_layers * per_layer + 2 * d + d * v;
  if (with_heads) n += 2 * d;
  return n;
}

template <typename S>
std::int64_t param_count(const ParamsT<S>& p) {
  std::int64_t n = 0;
  visit_tensors(p, [&n](const std::string&, const auto& t) { n += t.size(); });
  return n;
}

// Copy with both HLP heads removed; the result predicts logits only.
template <typename S>
ParamsT<S> strip_heads(const ParamsT<S>& p) {
  ParamsT<S> out = p;
  out.has_heads = false;
  out.w_hlp_fim.resize(0);
  out.w_hlp_l2r.resize(0);
  return out;
}

}  // namespace hfim
