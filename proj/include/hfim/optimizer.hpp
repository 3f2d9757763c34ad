#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hfim/errors.hpp"
#include "hfim/params.hpp"

namespace hfim {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

inline void validate(const AdamConfig& c) {
  if (c.beta1 < 0.0 || c.beta1 >= 1.0 || c.beta2 < 0.0 || c.beta2 >= 1.0) {
    throw ConfigError("AdamConfig: betas must lie in [0, 1)");
  }
  if (c.eps < 0.0) throw ConfigError("AdamConfig: eps must be >= 0");
  if (c.weight_decay < 0.0) throw ConfigError("AdamConfig: weight_decay must be >= 0");
}

// First/second-moment estimates shaped like the parameters, plus the
// bias-correction step count.
template <typename S>
struct AdamStateT {
  long t = 0;
  ParamsT<S> m;
  ParamsT<S> v;
};

using AdamState = AdamStateT<float>;

template <typename S>
AdamStateT<S> make_adam_state(const ModelConfig& cfg, bool with_heads) {
  AdamStateT<S> st;
  st.m = zero_params<S>(cfg, with_heads);
  st.v = zero_params<S>(cfg, with_heads);
  return st;
}

// Decoupled weight decay applies to projection matrices only — never to
// embeddings, normalization gains, biases, or the hlp heads.
inline bool decays(const std::string& tensor_name) {
  return tensor_name == "w_unembed" ||
         tensor_name.find("attn.w_") != std::string::npos ||
         tensor_name.find("ffn.w_") != std::string::npos;
}

// Scales all gradients so their joint L2 norm is at most max_norm; returns
// the pre-clip norm. Accumulates in double, fixed tensor order.
template <typename S>
double clip_global_norm(ParamsT<S>& grads, double max_norm) {
  if (max_norm <= 0.0) throw ConfigError("clip_global_norm: max_norm must be > 0");
  double sq = 0.0;
  visit_tensors(grads, [&sq](const std::string&, const auto& t) {
    const S* p = t.data();
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      sq += static_cast<double>(p[i]) * static_cast<double>(p[i]);
    }
  });
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const S s = static_cast<S>(max_norm / norm);
    visit_tensors(grads, [s](const std::string&, auto& t) { t *= s; });
  }
  return norm;
}

// One AdamW update, in place. Bias correction uses the incremented step
// count; decay is decoupled (applied to the parameter directly, not the
// gradient) and masked by decays().
template <typename S>
void adamw_step(ParamsT<S>& params, const ParamsT<S>& grads,
                AdamStateT<S>& state, double lr, const AdamConfig& acfg) {
  validate(acfg);
  if (lr < 0.0) throw ConfigError("adamw_step: negative learning rate");

  struct Slot {
    std::string name;
    S* p;
    const S* g;
    S* m;
    S* v;
    Eigen::Index size;
  };
  std::vector<Slot> slots;
  visit_tensors(params, [&slots](const std::string& n, auto& t) {
    slots.push_back(Slot{n, t.data(), nullptr, nullptr, nullptr, t.size()});
  });
  std::size_t i = 0;
  visit_tensors(grads, [&slots, &i](const std::string& n, const auto& t) {
    if (i >= slots.size() || slots[i].name != n || slots[i].size != t.size()) {
      throw ConfigError("adamw_step: gradient tensors do not match parameters");
    }
    slots[i++].g = t.data();
  });
  if (i != slots.size()) throw ConfigError("adamw_step: gradient tensors do not match parameters");
  i = 0;
  visit_tensors(state.m, [&slots, &i](const std::string&, auto& t) { slots[i++].m = t.data(); });
  if (i != slots.size()) throw ConfigError("adamw_step: optimizer state does not match parameters");
  i = 0;
  visit_tensors(state.v, [&slots, &i](const std::string&, auto& t) { slots[i++].v = t.data(); });
  if (i != slots.size()) throw ConfigError("adamw_step: optimizer state does not match parameters");

  for (const auto& s : slots) {
    for (Eigen::Index k = 0; k < s.size; ++k) {
      if (!std::isfinite(static_cast<double>(s.g[k]))) {
        throw NumericalError("adamw_step: non-finite gradient in " + s.name);
      }
    }
  }

  state.t += 1;
  const double bc1 = 1.0 - std::pow(acfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(acfg.beta2, static_cast<double>(state.t));
  const S b1 = static_cast<S>(acfg.beta1), b2 = static_cast<S>(acfg.beta2);

  for (const auto& s : slots) {
    const double decay_factor = decays(s.name) ? lr * acfg.weight_decay : 0.0;
    for (Eigen::Index k = 0; k < s.size; ++k) {
      const double g = static_cast<double>(s.g[k]);
      const double m = static_cast<double>(b1) * static_cast<double>(s.m[k]) +
                       (1.0 - static_cast<double>(b1)) * g;
      const double v = static_cast<double>(b2) * static_cast<double>(s.v[k]) +
                       (1.0 - static_cast<double>(b2)) * g * g;
      s.m[k] = static_cast<S>(m);
      s.v[k] = static_cast<S>(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      const double p_old = static_cast<double>(s.p[k]);
      const double p_new =
          p_old - lr * mhat / (std::sqrt(vhat) + acfg.eps) - decay_factor * p_old;
      s.p[k] = static_cast<S>(p_new);
    }
  }
}

}  // namespace hfim
