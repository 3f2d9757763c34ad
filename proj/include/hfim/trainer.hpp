#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "hfim/corpus.hpp"
#include "hfim/errors.hpp"
#include "hfim/fim.hpp"
#include "hfim/model.hpp"
#include "hfim/optimizer.hpp"
#include "hfim/rng.hpp"

namespace hfim {

// Gradient global-norm clip threshold; a constant of the training recipe
// rather than a configuration knob.
inline constexpr double kGradClip = 1.0;

struct TrainConfig {
  long steps = 8000;
  long warmup_steps = 240;
  double peak_lr = 3e-4;
  double min_lr = 3e-5;
  int batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double lambda = 0.1;
  double fim_rate = 0.5;
  std::uint64_t init_seed = 1;
  std::uint64_t data_seed = 2;
  bool hlp_enabled = false;
  bool l2r_hlp_enabled = false;
};

inline void validate(const TrainConfig& c) {
  if (c.steps < 1) throw ConfigError("TrainConfig: steps must be >= 1");
  if (c.warmup_steps < 0 || c.warmup_steps > c.steps) {
    throw ConfigError("TrainConfig: need 0 <= warmup_steps <= steps");
  }
  if (!(c.min_lr > 0.0) || c.min_lr > c.peak_lr) {
    throw ConfigError("TrainConfig: need 0 < min_lr <= peak_lr");
  }
  if (c.batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
  if (c.beta1 < 0.0 || c.beta1 >= 1.0 || c.beta2 < 0.0 || c.beta2 >= 1.0) {
    throw ConfigError("TrainConfig: betas must lie in [0, 1)");
  }
  if (c.eps < 0.0) throw ConfigError("TrainConfig: eps must be >= 0");
  if (c.weight_decay < 0.0) throw ConfigError("TrainConfig: weight_decay must be >= 0");
  if (c.lambda < 0.0) throw ConfigError("TrainConfig: lambda must be >= 0");
  if (c.fim_rate < 0.0 || c.fim_rate > 1.0) {
    throw ConfigError("TrainConfig: fim_rate must lie in [0, 1]");
  }
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return nlohmann::json{{"steps", c.steps},
                        {"warmup_steps", c.warmup_steps},
                        {"peak_lr", c.peak_lr},
                        {"min_lr", c.min_lr},
                        {"batch_size", c.batch_size},
                        {"beta1", c.beta1},
                        {"beta2", c.beta2},
                        {"eps", c.eps},
                        {"weight_decay", c.weight_decay},
                        {"lambda", c.lambda},
                        {"fim_rate", c.fim_rate},
                        {"init_seed", c.init_seed},
                        {"data_seed", c.data_seed},
                        {"hlp_enabled", c.hlp_enabled},
                        {"l2r_hlp_enabled", c.l2r_hlp_enabled}};
}

// Parses a TrainConfig from JSON. Keys may be omitted (defaults apply) but
// any key outside the TrainConfig field set is rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("TrainConfig: expected a JSON object");
  TrainConfig c;
  const nlohmann::json known = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) {
      throw ConfigError("TrainConfig: unknown key \"" + key + "\"");
    }
    (void)value;
  }
  try {
    c.steps = j.value("steps", c.steps);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.min_lr = j.value("min_lr", c.min_lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lambda = j.value("lambda", c.lambda);
    c.fim_rate = j.value("fim_rate", c.fim_rate);
    c.init_seed = j.value("init_seed", c.init_seed);
    c.data_seed = j.value("data_seed", c.data_seed);
    c.hlp_enabled = j.value("hlp_enabled", c.hlp_enabled);
    c.l2r_hlp_enabled = j.value("l2r_hlp_enabled", c.l2r_hlp_enabled);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("TrainConfig: ") + e.what());
  }
  validate(c);
  return c;
}

// Linear ramp 0 -> peak over warmup_steps, then cosine decay peak -> min_lr
// at cfg.steps. Continuous at the junction.
inline double lr_at(long step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.steps) {
    throw ConfigError("lr_at: step " + std::to_string(step) + " outside [0, " +
                      std::to_string(cfg.steps) + "]");
  }
  if (step < cfg.warmup_steps) {
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const long span = cfg.steps - cfg.warmup_steps;
  if (span == 0) return step < cfg.steps ? cfg.peak_lr : cfg.min_lr;
  const double progress = static_cast<double>(step - cfg.warmup_steps) /
                          static_cast<double>(span);
  return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) *
                          (1.0 + std::cos(std::numbers::pi * progress));
}

struct MetricsRecord {
  long step = 0;  // 1-based optimizer step count
  double lr = 0.0;
  LossBreakdown losses;
  double grad_norm = 0.0;  // pre-clip global norm
  double wall_ms = 0.0;
  long tokens_seen = 0;
};

inline nlohmann::json to_json(const MetricsRecord& r) {
  return nlohmann::json{{"step", r.step},
                        {"lr", r.lr},
                        {"l_ntp", r.losses.l_ntp},
                        {"l_hlp_fim", r.losses.l_hlp_fim},
                        {"l_hlp_l2r", r.losses.l_hlp_l2r},
                        {"lambda", r.losses.lambda},
                        {"total", r.losses.total},
                        {"ntp_count", r.losses.ntp_count},
                        {"hlp_fim_count", r.losses.hlp_fim_count},
                        {"hlp_l2r_count", r.losses.hlp_l2r_count},
                        {"grad_norm", r.grad_norm},
                        {"wall_ms", r.wall_ms},
                        {"tokens_seen", r.tokens_seen}};
}

struct TrainHooks {
  std::function<void(const MetricsRecord&)> on_step;
  long checkpoint_interval = 0;  // 0: no periodic checkpoints
  std::function<void(long step, const Params&, const AdamState&, long tokens_seen)>
      on_checkpoint;
};

struct TrainResult {
  Params params;
  AdamState opt_state;
  std::vector<MetricsRecord> metrics;
  long completed_steps = 0;
  long tokens_seen = 0;
  bool diverged = false;
  std::string divergence_reason;
};

// Samples batch_size documents uniformly with replacement, then formats each
// as FIM (probability fim_rate) or L2R. The per-step rng depends only on
// (data_seed, step), so resumed runs see identical batches, and the sampling
// never consults hlp flags: paired runs share their token streams exactly.
inline Batch sample_batch(const std::vector<Document>& corpus,
                          const TrainConfig& tcfg, const ModelConfig& mcfg,
                          long step) {
  Rng rng(mix_seed(tcfg.data_seed, static_cast<std::uint64_t>(step)));
  std::vector<Document> picked;
  picked.reserve(static_cast<std::size_t>(tcfg.batch_size));
  for (int b = 0; b < tcfg.batch_size; ++b) {
    picked.push_back(corpus[rng.below(corpus.size())]);
  }
  return make_batch(picked, tcfg.fim_rate, rng, mcfg.max_seq, mcfg.hlp_convention);
}

// Runs optimizer steps start_step+1 .. cfg.steps. Pass start_step > 0 along
// with params/opt_state/tokens_seen from a checkpoint to resume. On a
// non-finite loss or gradient the loop stops before mutating parameters, so
// the returned params are those of the last good step.
inline TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg,
                         const std::vector<Document>& corpus, Params params,
                         const TrainHooks& hooks = {}, long start_step = 0,
                         AdamState opt_state = {}, long tokens_seen = 0) {
  validate(mcfg);
  validate(tcfg);
  if (corpus.empty()) throw ConfigError("train: empty corpus");
  if (start_step < 0 || start_step > tcfg.steps) {
    throw ConfigError("train: start_step outside [0, steps]");
  }
  if (start_step == 0) {
    opt_state = make_adam_state<float>(mcfg, params.has_heads);
    tokens_seen = 0;
  } else if (opt_state.t != start_step) {
    throw ConfigError("train: optimizer state step count does not match start_step");
  }
  if (tcfg.hlp_enabled && !params.has_heads) {
    throw CapabilityError("train: hlp_enabled requires a model with heads");
  }

  AdamConfig acfg;
  acfg.beta1 = tcfg.beta1;
  acfg.beta2 = tcfg.beta2;
  acfg.eps = tcfg.eps;
  acfg.weight_decay = tcfg.weight_decay;

  LossSpec spec;
  spec.ntp = true;
  spec.hlp_fim = tcfg.hlp_enabled;
  spec.hlp_l2r = tcfg.l2r_hlp_enabled;
  spec.lambda = tcfg.lambda;

  TrainResult result;
  result.metrics.reserve(static_cast<std::size_t>(tcfg.steps - start_step));

  for (long step = start_step + 1; step <= tcfg.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const Batch batch = sample_batch(corpus, tcfg, mcfg, step);

    MetricsRecord rec;
    try {
      BackwardResultT<float> bw = backward(mcfg, params, batch, spec);
      rec.grad_norm = clip_global_norm(bw.grads, kGradClip);
      const double lr = lr_at(step, tcfg);
      adamw_step(params, bw.grads, opt_state, lr, acfg);
      rec.step = step;
      rec.lr = lr;
      rec.losses = bw.losses;
    } catch (const NumericalError& e) {
      result.diverged = true;
      result.divergence_reason = e.what();
      break;
    }

    long batch_tokens = 0;
    for (const auto& inst : batch.items) batch_tokens += inst.length();
    tokens_seen += batch_tokens;
    rec.tokens_seen = tokens_seen;
    rec.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count();

    result.metrics.push_back(rec);
    if (hooks.on_step) hooks.on_step(rec);
    result.completed_steps = step;
    if (hooks.checkpoint_interval > 0 && hooks.on_checkpoint &&
        step % hooks.checkpoint_interval == 0 && step != tcfg.steps) {
      hooks.on_checkpoint(step, params, opt_state, tokens_seen);
    }
  }

  result.params = std::move(params);
  result.opt_state = std::move(opt_state);
  result.tokens_seen = tokens_seen;
  return result;
}

}  // namespace hfim
