#pragma once

// Decoder-only causal transformer over packed variable-length rows, with
// hand-written reverse-mode gradients. Activations for a batch are stored as
// [sum_of_lengths, width] matrices; attention runs per (instance, head) on
// row blocks, so PAD positions are never computed. All loss reductions
// accumulate in double; tensor math runs in the Scalar template parameter
// (float for training, double for finite-difference checks).

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "hfim/errors.hpp"
#include "hfim/fim.hpp"
#include "hfim/objectives.hpp"
#include "hfim/params.hpp"

namespace hfim {

// Selects which terms of the combined objective contribute loss and
// gradients. lambda weights both HLP terms.
struct LossSpec {
  bool ntp = true;
  bool hlp_fim = false;
  bool hlp_l2r = false;
  double lambda = 0.1;
};

template <typename S>
struct ForwardOutputT {
  int batch = 0;
  int max_len = 0;
  int vocab = 0;
  int d_model = 0;
  bool has_hlp = false;
  std::vector<int> lengths;
  // Row-major [batch, max_len, vocab] / [batch, max_len, d_model] /
  // [batch, max_len]; PAD tails hold zeros (logits, hidden) or 0.5 (preds).
  std::vector<S> logits;
  std::vector<S> hidden;
  std::vector<S> hlp_fim_pred;
  std::vector<S> hlp_l2r_pred;

  const S* logits_at(int b, int t) const {
    check_index(b, t);
    return logits.data() + (static_cast<std::ptrdiff_t>(b) * max_len + t) * vocab;
  }
  const S* hidden_at(int b, int t) const {
    check_index(b, t);
    return hidden.data() + (static_cast<std::ptrdiff_t>(b) * max_len + t) * d_model;
  }
  S hlp_fim_at(int b, int t) const {
    require_hlp();
    check_index(b, t);
    return hlp_fim_pred[static_cast<std::size_t>(b) * max_len + t];
  }
  S hlp_l2r_at(int b, int t) const {
    require_hlp();
    check_index(b, t);
    return hlp_l2r_pred[static_cast<std::size_t>(b) * max_len + t];
  }

 private:
  void require_hlp() const {
    if (!has_hlp) {
      throw CapabilityError("ForwardOutput: hlp predictions requested from a model without heads");
    }
  }
  void check_index(int b, int t) const {
    if (b < 0 || b >= batch || t < 0 || t >= max_len) {
      throw ModelError("ForwardOutput: index out of range");
    }
  }
};

using ForwardOutput = ForwardOutputT<float>;

template <typename S>
struct BackwardResultT {
  ParamsT<S> grads;
  LossBreakdown losses;
};

namespace detail {

struct RowRef {
  const TokenId* ids = nullptr;
  int len = 0;
  int offset = 0;  // first row index in the packed activation matrices
};

template <typename S>
struct LayerActs {
  MatX<S> ln1_out;                 // [N, d]
  VecX<S> ln1_rstd;                // [N]
  MatX<S> qkv;                     // [N, 3d]
  std::vector<MatX<S>> probs;      // per instance: [H*L, L] causal softmax rows
  MatX<S> ctx;                     // [N, d] heads concatenated
  MatX<S> x_mid;                   // [N, d] after attention residual
  MatX<S> ln2_out;                 // [N, d]
  VecX<S> ln2_rstd;                // [N]
  MatX<S> ff_pre;                  // [N, d_ff]
  MatX<S> ff_tanh;                 // [N, d_ff] tanh(k0*(u + k1*u^3)), reused in backward
  MatX<S> ff_act;                  // [N, d_ff]
  MatX<S> x_out;                   // [N, d]
};

template <typename S>
struct Activations {
  int n = 0;
  std::vector<RowRef> rows;
  MatX<S> x0;                      // [N, d] token + position embeddings
  std::vector<LayerActs<S>> layers;
  MatX<S> hidden;                  // [N, d] post-final-norm
  VecX<S> lnf_rstd;                // [N]
  MatX<S> logits;                  // [N, V]
  VecX<S> z_fim, z_l2r;            // [N] pre-sigmoid head outputs (if heads)
};

constexpr double kLnEps = 1e-5;
constexpr double kGeluK0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK1 = 0.044715;

// y = gain .* (x - mean)/sqrt(var + eps) + bias, per row; stats in double.
template <typename S>
void layer_norm(const MatX<S>& x, const VecX<S>& gain, const VecX<S>& bias,
                MatX<S>& out, VecX<S>& rstd) {
  const Eigen::Index n = x.rows(), d = x.cols();
  out.resize(n, d);
  rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mean = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) mean += static_cast<double>(x(i, j));
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const double c = static_cast<double>(x(i, j)) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + kLnEps);
    rstd(i) = static_cast<S>(r);
    const S mean_s = static_cast<S>(mean);
    const S r_s = static_cast<S>(r);
    out.row(i) = (((x.row(i).array() - mean_s) * r_s) * gain.transpose().array() +
                  bias.transpose().array())
                     .matrix();
  }
}

// dx for y = gain .* xhat + bias with xhat = (x - mean) * rstd. Accumulates
// dgain/dbias; returns dx added into dx_out.
template <typename S>
void layer_norm_backward(const MatX<S>& x, const VecX<S>& gain,
                         const VecX<S>& rstd, const MatX<S>& dy,
                         MatX<S>& dx_out, VecX<S>& dgain, VecX<S>& dbias) {
  const Eigen::Index n = x.rows(), d = x.cols();
  Eigen::Array<S, 1, Eigen::Dynamic> xhat(d), dxhat(d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S r = rstd(i);
    double mean = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) mean += static_cast<double>(x(i, j));
    mean /= static_cast<double>(d);
    xhat = (x.row(i).array() - static_cast<S>(mean)) * r;
    dxhat = dy.row(i).array() * gain.transpose().array();
    dgain.array() += (dy.row(i).array() * xhat).transpose();
    dbias.array() += dy.row(i).transpose().array();
    double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat .* xhat)
    for (Eigen::Index j = 0; j < d; ++j) {
      m1 += static_cast<double>(dxhat(j));
      m2 += static_cast<double>(dxhat(j)) * static_cast<double>(xhat(j));
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    dx_out.row(i).array() +=
        r * (dxhat - static_cast<S>(m1) - xhat * static_cast<S>(m2));
  }
}

template <typename S>
std::vector<RowRef> pack_rows(const ModelConfig& cfg,
                              const std::vector<std::pair<const TokenId*, int>>& seqs) {
  if (seqs.empty()) throw ModelError("forward: empty batch");
  std::vector<RowRef> rows;
  rows.reserve(seqs.size());
  int offset = 0;
  for (const auto& [ids, len] : seqs) {
    if (len < 1) throw ModelError("forward: empty sequence");
    if (len > cfg.max_seq) {
      throw ModelError("forward: sequence length " + std::to_string(len) +
                       " exceeds max_seq " + std::to_string(cfg.max_seq));
    }
    for (int t = 0; t < len; ++t) {
      if (ids[t] < 0 || ids[t] >= cfg.vocab_size) {
        throw ModelError("forward: token id " + std::to_string(ids[t]) +
                         " out of range at position " + std::to_string(t));
      }
    }
    rows.push_back(RowRef{ids, len, offset});
    offset += len;
  }
  return rows;
}

template <typename S>
void forward_core(const ModelConfig& cfg, const ParamsT<S>& params,
                  const std::vector<RowRef>& rows, Activations<S>& acts) {
  const int d = cfg.d_model;
  const int hs = cfg.head_dim();
  const int nh = cfg.n_heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hs)));

  int n = 0;
  for (const auto& r : rows) n += r.len;
  acts.n = n;
  acts.rows = rows;

  acts.x0.resize(n, d);
  for (const auto& r : rows) {
    for (int t = 0; t < r.len; ++t) {
      acts.x0.row(r.offset + t) =
          params.tok_embed.row(r.ids[t]) + params.pos_embed.row(t);
    }
  }

  acts.layers.resize(params.layers.size());
  const MatX<S>* x = &acts.x0;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& w = params.layers[l];
    auto& a = acts.layers[l];

    layer_norm(*x, w.ln1_gain, w.ln1_bias, a.ln1_out, a.ln1_rstd);

    a.qkv.resize(n, 3 * d);
    a.qkv.noalias() = a.ln1_out * w.w_qkv;
    a.qkv.rowwise() += w.b_qkv.transpose();

    a.ctx.resize(n, d);
    a.probs.assign(rows.size(), MatX<S>());
    for (std::size_t b = 0; b < rows.size(); ++b) {
      const int off = rows[b].offset, len = rows[b].len;
      MatX<S>& p = a.probs[b];
      p.setZero(nh * len, len);
      for (int h = 0; h < nh; ++h) {
        auto q = a.qkv.block(off, h * hs, len, hs);
        auto k = a.qkv.block(off, d + h * hs, len, hs);
        auto v = a.qkv.block(off, 2 * d + h * hs, len, hs);
        auto ph = p.middleRows(h * len, len);
        ph.noalias() = q * k.transpose();
        ph *= scale;
        for (int i = 0; i < len; ++i) {
          auto row = ph.row(i).head(i + 1);
          const S mx = row.maxCoeff();
          row = (row.array() - mx).exp();
          row /= row.sum();
          if (i + 1 < len) ph.row(i).tail(len - i - 1).setZero();
        }
        a.ctx.block(off, h * hs, len, hs).noalias() = ph * v;
      }
    }

    a.x_mid.resize(n, d);
    a.x_mid.noalias() = a.ctx * w.w_attn_out;
    a.x_mid.rowwise() += w.b_attn_out.transpose();
    a.x_mid += *x;

    layer_norm(a.x_mid, w.ln2_gain, w.ln2_bias, a.ln2_out, a.ln2_rstd);

    a.ff_pre.resize(n, cfg.d_ff);
    a.ff_pre.noalias() = a.ln2_out * w.w_ff_up;
    a.ff_pre.rowwise() += w.b_ff_up.transpose();
    const S k0 = static_cast<S>(kGeluK0), k1 = static_cast<S>(kGeluK1);
    a.ff_tanh = (k0 * (a.ff_pre.array() + k1 * a.ff_pre.array().cube())).tanh();
    a.ff_act = (S(0.5) * a.ff_pre.array() * (S(1) + a.ff_tanh.array())).matrix();

    a.x_out.resize(n, d);
    a.x_out.noalias() = a.ff_act * w.w_ff_down;
    a.x_out.rowwise() += w.b_ff_down.transpose();
    a.x_out += a.x_mid;

    x = &a.x_out;
  }

  layer_norm(*x, params.lnf_gain, params.lnf_bias, acts.hidden, acts.lnf_rstd);

  acts.logits.resize(n, cfg.vocab_size);
  acts.logits.noalias() = acts.hidden * params.w_unembed;

  if (params.has_heads) {
    acts.z_fim.noalias() = acts.hidden * params.w_hlp_fim;
    acts.z_l2r.noalias() = acts.hidden * params.w_hlp_l2r;
  } else {
    acts.z_fim.resize(0);
    acts.z_l2r.resize(0);
  }
}

// sigma(z) computed in double, clamped to the open unit interval of S so the
// advertised (0,1) range survives float rounding at saturation.
template <typename S>
S sigmoid_pred(S z) {
  const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(z)));
  const S lo = std::nextafter(S(0), S(1));
  const S hi = std::nextafter(S(1), S(0));
  return std::clamp(static_cast<S>(p), lo, hi);
}

template <typename S>
ForwardOutputT<S> collect_output(const ModelConfig& cfg, const Activations<S>& acts,
                                 bool has_heads) {
  ForwardOutputT<S> out;
  out.batch = static_cast<int>(acts.rows.size());
  out.max_len = 0;
  for (const auto& r : acts.rows) out.max_len = std::max(out.max_len, r.len);
  out.vocab = cfg.vocab_size;
  out.d_model = cfg.d_model;
  out.has_hlp = has_heads;
  out.lengths.reserve(acts.rows.size());
  for (const auto& r : acts.rows) out.lengths.push_back(r.len);

  const std::size_t bt = static_cast<std::size_t>(out.batch) * out.max_len;
  out.logits.assign(bt * out.vocab, S(0));
  out.hidden.assign(bt * out.d_model, S(0));
  if (has_heads) {
    out.hlp_fim_pred.assign(bt, S(0.5));
    out.hlp_l2r_pred.assign(bt, S(0.5));
  }
  for (int b = 0; b < out.batch; ++b) {
    const auto& r = acts.rows[static_cast<std::size_t>(b)];
    for (int t = 0; t < r.len; ++t) {
      const std::size_t flat = static_cast<std::size_t>(b) * out.max_len + t;
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(
          out.logits.data() + flat * out.vocab, out.vocab) =
          acts.logits.row(r.offset + t);
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(
          out.hidden.data() + flat * out.d_model, out.d_model) =
          acts.hidden.row(r.offset + t);
      if (has_heads) {
        out.hlp_fim_pred[flat] = sigmoid_pred(acts.z_fim(r.offset + t));
        out.hlp_l2r_pred[flat] = sigmoid_pred(acts.z_l2r(r.offset + t));
      }
    }
  }
  return out;
}

// Computes the LossBreakdown for a batch and, when grad buffers are given,
// fills d(total)/d(logits) and d(total)/d(head logit z). Means are taken over
// all masked positions across the whole batch.
template <typename S>
LossBreakdown loss_and_grads(const ModelConfig& cfg, const Batch& batch,
                             const LossSpec& spec, bool has_heads,
                             const Activations<S>& acts, MatX<S>* dlogits,
                             VecX<S>* dz_fim, VecX<S>* dz_l2r) {
  if ((spec.hlp_fim || spec.hlp_l2r) && !has_heads) {
    throw CapabilityError("loss: hlp term requested from a model without heads");
  }
  if (spec.lambda < 0.0) throw ConfigError("loss: lambda must be >= 0");

  long n_ntp = 0, n_fim = 0, n_l2r = 0;
  for (const auto& inst : batch.items) {
    if (spec.ntp) n_ntp += std::max(0, inst.length() - 1);
    if (spec.hlp_fim) {
      for (auto m : inst.hlp_fim_mask) n_fim += m ? 1 : 0;
    }
    if (spec.hlp_l2r) {
      for (auto m : inst.hlp_l2r_mask) n_l2r += m ? 1 : 0;
    }
  }
  if (spec.ntp && n_ntp == 0) throw ObjectiveError("ntp_loss: empty mask");

  if (dlogits) dlogits->setZero(acts.n, cfg.vocab_size);
  if (dz_fim) dz_fim->setZero(acts.n);
  if (dz_l2r) dz_l2r->setZero(acts.n);

  double sum_ntp = 0.0, sum_fim = 0.0, sum_l2r = 0.0;
  for (std::size_t b = 0; b < batch.items.size(); ++b) {
    const auto& inst = batch.items[b];
    const auto& r = acts.rows[b];
    for (int t = 0; t < r.len; ++t) {
      const int i = r.offset + t;
      if (spec.ntp && t < r.len - 1) {
        const TokenId target = inst.ntp_target[static_cast<std::size_t>(t)];
        const S* row = acts.logits.data() + static_cast<std::ptrdiff_t>(i) * cfg.vocab_size;
        const double lse = log_sum_exp(row, cfg.vocab_size);
        sum_ntp += lse - static_cast<double>(row[target]);
        if (dlogits) {
          const double inv = 1.0 / static_cast<double>(n_ntp);
          for (int j = 0; j < cfg.vocab_size; ++j) {
            (*dlogits)(i, j) =
                static_cast<S>(std::exp(static_cast<double>(row[j]) - lse) * inv);
          }
          (*dlogits)(i, target) -= static_cast<S>(inv);
        }
      }
      if (spec.hlp_fim && inst.hlp_fim_mask[static_cast<std::size_t>(t)]) {
        const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(acts.z_fim(i))));
        const double y = static_cast<double>(inst.hlp_fim_target[static_cast<std::size_t>(t)]);
        sum_fim += std::abs(p - y);
        if (dz_fim && n_fim > 0) {
          const double sgn = p > y ? 1.0 : (p < y ? -1.0 : 0.0);
          (*dz_fim)(i) = static_cast<S>(spec.lambda * sgn * p * (1.0 - p) /
                                        static_cast<double>(n_fim));
        }
      }
      if (spec.hlp_l2r && inst.hlp_l2r_mask[static_cast<std::size_t>(t)]) {
        const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(acts.z_l2r(i))));
        const double y = static_cast<double>(inst.hlp_l2r_target[static_cast<std::size_t>(t)]);
        sum_l2r += std::abs(p - y);
        if (dz_l2r && n_l2r > 0) {
          const double sgn = p > y ? 1.0 : (p < y ? -1.0 : 0.0);
          (*dz_l2r)(i) = static_cast<S>(spec.lambda * sgn * p * (1.0 - p) /
                                        static_cast<double>(n_l2r));
        }
      }
    }
  }

  const double l_ntp = spec.ntp ? sum_ntp / static_cast<double>(n_ntp) : 0.0;
  const double l_fim = n_fim > 0 ? sum_fim / static_cast<double>(n_fim) : 0.0;
  const double l_l2r = n_l2r > 0 ? sum_l2r / static_cast<double>(n_l2r) : 0.0;
  if (!std::isfinite(l_ntp)) throw NumericalError("loss: l_ntp is non-finite");
  if (!std::isfinite(l_fim)) throw NumericalError("loss: l_hlp_fim is non-finite");
  if (!std::isfinite(l_l2r)) throw NumericalError("loss: l_hlp_l2r is non-finite");
  LossBreakdown lb = combined_loss(l_ntp, l_fim, l_l2r, spec.lambda);
  lb.ntp_count = n_ntp;
  lb.hlp_fim_count = n_fim;
  lb.hlp_l2r_count = n_l2r;
  return lb;
}

template <typename S>
void backward_core(const ModelConfig& cfg, const ParamsT<S>& params,
                   const Activations<S>& acts, const MatX<S>& dlogits,
                   const VecX<S>& dz_fim, const VecX<S>& dz_l2r,
                   ParamsT<S>& grads) {
  const int d = cfg.d_model;
  const int hs = cfg.head_dim();
  const int nh = cfg.n_heads;
  const int n = acts.n;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hs)));

  grads.w_unembed.noalias() = acts.hidden.transpose() * dlogits;
  MatX<S> dhidden(n, d);
  dhidden.noalias() = dlogits * params.w_unembed.transpose();
  if (params.has_heads) {
    grads.w_hlp_fim.noalias() = acts.hidden.transpose() * dz_fim;
    grads.w_hlp_l2r.noalias() = acts.hidden.transpose() * dz_l2r;
    dhidden.noalias() += dz_fim * params.w_hlp_fim.transpose();
    dhidden.noalias() += dz_l2r * params.w_hlp_l2r.transpose();
  }

  const MatX<S>& x_last =
      params.layers.empty() ? acts.x0 : acts.layers.back().x_out;
  MatX<S> dx = MatX<S>::Zero(n, d);
  layer_norm_backward(x_last, params.lnf_gain, acts.lnf_rstd, dhidden, dx,
                      grads.lnf_gain, grads.lnf_bias);

  MatX<S> dff_act, dff_pre, dln2, dctx, dqkv, dln1;
  for (int l = static_cast<int>(params.layers.size()) - 1; l >= 0; --l) {
    const auto& w = params.layers[static_cast<std::size_t>(l)];
    const auto& a = acts.layers[static_cast<std::size_t>(l)];
    auto& g = grads.layers[static_cast<std::size_t>(l)];
    const MatX<S>& x_in = l == 0 ? acts.x0 : acts.layers[static_cast<std::size_t>(l - 1)].x_out;

    // FFN block: x_out = x_mid + gelu(ln2(x_mid) W_up + b) W_down + b
    g.w_ff_down.noalias() = a.ff_act.transpose() * dx;
    g.b_ff_down.noalias() = dx.colwise().sum().transpose();
    dff_act.resize(n, cfg.d_ff);
    dff_act.noalias() = dx * w.w_ff_down.transpose();

    const S k0 = static_cast<S>(kGeluK0), k1 = static_cast<S>(kGeluK1);
    // d gelu(u)/du with t = tanh(k0 (u + k1 u^3)) already stored
    dff_pre = (dff_act.array() *
               (S(0.5) * (S(1) + a.ff_tanh.array()) +
                S(0.5) * a.ff_pre.array() * (S(1) - a.ff_tanh.array().square()) *
                    k0 * (S(1) + S(3) * k1 * a.ff_pre.array().square())))
                  .matrix();

    g.w_ff_up.noalias() = a.ln2_out.transpose() * dff_pre;
    g.b_ff_up.noalias() = dff_pre.colwise().sum().transpose();
    dln2.resize(n, d);
    dln2.noalias() = dff_pre * w.w_ff_up.transpose();

    // dx currently holds d(loss)/d(x_out); residual passes it to x_mid.
    layer_norm_backward(a.x_mid, w.ln2_gain, a.ln2_rstd, dln2, dx, g.ln2_gain,
                        g.ln2_bias);

    // Attention block: x_mid = x_in + attn(ln1(x_in)) W_out + b
    g.w_attn_out.noalias() = a.ctx.transpose() * dx;
    g.b_attn_out.noalias() = dx.colwise().sum().transpose();
    dctx.resize(n, d);
    dctx.noalias() = dx * w.w_attn_out.transpose();

    dqkv.setZero(n, 3 * d);
    for (std::size_t b = 0; b < acts.rows.size(); ++b) {
      const int off = acts.rows[b].offset, len = acts.rows[b].len;
      const MatX<S>& p = a.probs[b];
      for (int h = 0; h < nh; ++h) {
        auto q = a.qkv.block(off, h * hs, len, hs);
        auto k = a.qkv.block(off, d + h * hs, len, hs);
        auto v = a.qkv.block(off, 2 * d + h * hs, len, hs);
        auto ph = p.middleRows(h * len, len);
        auto dch = dctx.block(off, h * hs, len, hs);

        dqkv.block(off, 2 * d + h * hs, len, hs).noalias() = ph.transpose() * dch;

        MatX<S> dp(len, len);
        dp.noalias() = dch * v.transpose();
        // softmax backward per causal row, then fold in the 1/sqrt(hs) scale
        for (int i = 0; i < len; ++i) {
          auto pi = ph.row(i).head(i + 1).array();
          auto di = dp.row(i).head(i + 1).array();
          const S dot = (pi * di).sum();
          dp.row(i).head(i + 1) = (pi * (di - dot) * scale).matrix();
          if (i + 1 < len) dp.row(i).tail(len - i - 1).setZero();
        }
        dqkv.block(off, h * hs, len, hs).noalias() = dp * k;
        dqkv.block(off, d + h * hs, len, hs).noalias() = dp.transpose() * q;
      }
    }

    g.w_qkv.noalias() = a.ln1_out.transpose() * dqkv;
    g.b_qkv.noalias() = dqkv.colwise().sum().transpose();
    dln1.resize(n, d);
    dln1.noalias() = dqkv * w.w_qkv.transpose();

    // dx currently holds d/d(x_mid); residual passes it straight to x_in.
    layer_norm_backward(x_in, w.ln1_gain, a.ln1_rstd, dln1, dx, g.ln1_gain,
                        g.ln1_bias);
  }

  for (const auto& r : acts.rows) {
    for (int t = 0; t < r.len; ++t) {
      grads.tok_embed.row(r.ids[t]) += dx.row(r.offset + t);
      grads.pos_embed.row(t) += dx.row(r.offset + t);
    }
  }
}

template <typename S>
std::vector<std::pair<const TokenId*, int>> batch_seqs(const Batch& batch) {
  std::vector<std::pair<const TokenId*, int>> seqs;
  seqs.reserve(batch.items.size());
  for (const auto& inst : batch.items) {
    seqs.emplace_back(inst.tokens.data(), inst.length());
  }
  return seqs;
}

}  // namespace detail

template <typename S>
ForwardOutputT<S> forward(const ModelConfig& cfg, const ParamsT<S>& params,
                          const Batch& batch) {
  validate(cfg);
  detail::Activations<S> acts;
  detail::forward_core(cfg, params, detail::pack_rows<S>(cfg, detail::batch_seqs<S>(batch)), acts);
  return detail::collect_output(cfg, acts, params.has_heads);
}

// Forward over raw token sequences (generation, probing on arbitrary text).
template <typename S>
ForwardOutputT<S> forward_rows(const ModelConfig& cfg, const ParamsT<S>& params,
                               const std::vector<std::vector<TokenId>>& seqs) {
  validate(cfg);
  std::vector<std::pair<const TokenId*, int>> refs;
  refs.reserve(seqs.size());
  for (const auto& s : seqs) refs.emplace_back(s.data(), static_cast<int>(s.size()));
  detail::Activations<S> acts;
  detail::forward_core(cfg, params, detail::pack_rows<S>(cfg, refs), acts);
  return detail::collect_output(cfg, acts, params.has_heads);
}

// Exact reverse-mode gradients of the scalar total loss selected by spec,
// together with the loss values themselves (one fused pass).
template <typename S>
BackwardResultT<S> backward(const ModelConfig& cfg, const ParamsT<S>& params,
                            const Batch& batch, const LossSpec& spec) {
  validate(cfg);
  detail::Activations<S> acts;
  detail::forward_core(cfg, params, detail::pack_rows<S>(cfg, detail::batch_seqs<S>(batch)), acts);

  MatX<S> dlogits;
  VecX<S> dz_fim, dz_l2r;
  BackwardResultT<S> result;
  result.losses = detail::loss_and_grads(cfg, batch, spec, params.has_heads,
                                         acts, &dlogits, &dz_fim, &dz_l2r);
  result.grads = zero_params<S>(cfg, params.has_heads);
  detail::backward_core(cfg, params, acts, dlogits, dz_fim, dz_l2r, result.grads);
  return result;
}

// Loss values only (evaluation passes); same masked-mean semantics.
template <typename S>
LossBreakdown batch_losses(const ModelConfig& cfg, const ParamsT<S>& params,
                           const Batch& batch, const LossSpec& spec) {
  validate(cfg);
  detail::Activations<S> acts;
  detail::forward_core(cfg, params, detail::pack_rows<S>(cfg, detail::batch_seqs<S>(batch)), acts);
  return detail::loss_and_grads<S>(cfg, batch, spec, params.has_heads, acts,
                                   nullptr, nullptr, nullptr);
}

}  // namespace hfim
