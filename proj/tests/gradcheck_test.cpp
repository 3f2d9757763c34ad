#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "hfim/corpus.hpp"
#include "hfim/fim.hpp"
#include "hfim/model.hpp"
#include "hfim/params.hpp"

namespace hfim {
namespace {

// 1-layer, d=8, V=12 model in f64: small enough to difference every
// coordinate, large enough to exercise every tensor.
ModelConfig check_config() {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.vocab_size = 12;
  cfg.max_seq = 12;
  cfg.init_seed = 3;
  return cfg;
}

// Token ids must stay below V=12, so documents are assembled by hand.
Document small_vocab_doc(std::vector<TokenId> tokens) {
  Document doc;
  doc.doc_id = "tiny";
  doc.tokens = std::move(tokens);
  doc.line_starts = {0};
  return doc;
}

Batch check_batch() {
  Batch batch;
  batch.items.push_back(
      reorder_psm(small_vocab_doc({5, 6, 7, 8, 9, 10, 11, 5}), FimSplit{3, 2}));
  batch.items.push_back(format_l2r(small_vocab_doc({7, 5, 9, 11, 6})));
  return batch;
}

struct FlatView {
  std::vector<std::string> names;   // one per coordinate
  std::vector<double*> coords;
};

FlatView flatten(ParamsT<double>& p) {
  FlatView view;
  visit_tensors(p, [&view](const std::string& name, auto& t) {
    for (Eigen::Index k = 0; k < t.size(); ++k) {
      view.names.push_back(name + "[" + std::to_string(k) + "]");
      view.coords.push_back(t.data() + k);
    }
  });
  return view;
}

std::vector<double> flat_grads(const ParamsT<double>& g) {
  std::vector<double> out;
  visit_tensors(g, [&out](const std::string&, const auto& t) {
    for (Eigen::Index k = 0; k < t.size(); ++k) out.push_back(t.data()[k]);
  });
  return out;
}

// Heads start at exactly zero, which cuts the HLP losses off from the trunk
// (z = 0 regardless of hidden state). Noisy heads restore full coverage.
ParamsT<double> params_with_noisy_heads(const ModelConfig& cfg) {
  ParamsT<double> params = init_params<double>(cfg, true);
  Rng rng(cfg.init_seed + 101);
  for (int j = 0; j < cfg.d_model; ++j) {
    params.w_hlp_fim(j) = rng.normal(0.0, 0.5);
    params.w_hlp_l2r(j) = rng.normal(0.0, 0.5);
  }
  return params;
}

// max relative error between analytic gradients and central differences,
// checked at every parameter coordinate. The step 1e-5 sits near the f64
// sweet spot (truncation ~h^2 vs roundoff ~eps/h); the 1e-3 floor in the
// denominator keeps roundoff-dominated near-zero coordinates from reading
// as large relative errors while still enforcing the bound wherever the
// gradient has meaningful magnitude.
double max_rel_error(const ModelConfig& cfg, const Batch& batch, const LossSpec& spec,
                     std::string* where = nullptr, double h = 1e-5) {
  ParamsT<double> params = params_with_noisy_heads(cfg);
  const auto analytic = flat_grads(backward(cfg, params, batch, spec).grads);
  FlatView view = flatten(params);
  EXPECT_EQ(analytic.size(), view.coords.size());

  double worst = 0.0;
  for (std::size_t i = 0; i < view.coords.size(); ++i) {
    double* x = view.coords[i];
    const double saved = *x;
    *x = saved + h;
    const double up = batch_losses(cfg, params, batch, spec).total;
    *x = saved - h;
    const double down = batch_losses(cfg, params, batch, spec).total;
    *x = saved;
    const double fd = (up - down) / (2.0 * h);
    const double a = analytic[i];
    const double scale = std::max({std::abs(a), std::abs(fd), 1e-3});
    const double rel = std::abs(a - fd) / scale;
    if (rel > worst) {
      worst = rel;
      if (where) *where = view.names[i];
    }
  }
  return worst;
}

// worst absolute disagreement with central differences at a given step
double max_abs_error(const ModelConfig& cfg, const Batch& batch, const LossSpec& spec,
                     double h) {
  ParamsT<double> params = params_with_noisy_heads(cfg);
  const auto analytic = flat_grads(backward(cfg, params, batch, spec).grads);
  FlatView view = flatten(params);
  double worst = 0.0;
  for (std::size_t i = 0; i < view.coords.size(); ++i) {
    double* x = view.coords[i];
    const double saved = *x;
    *x = saved + h;
    const double up = batch_losses(cfg, params, batch, spec).total;
    *x = saved - h;
    const double down = batch_losses(cfg, params, batch, spec).total;
    *x = saved;
    worst = std::max(worst, std::abs(analytic[i] - (up - down) / (2.0 * h)));
  }
  return worst;
}

TEST(GradCheck, NtpOnly) {
  LossSpec spec;
  spec.ntp = true;
  std::string where;
  const double err = max_rel_error(check_config(), check_batch(), spec, &where);
  EXPECT_LT(err, 1e-4) << "worst coordinate: " << where;
}

TEST(GradCheck, FimHeadOnly) {
  LossSpec spec;
  spec.ntp = false;
  spec.hlp_fim = true;
  spec.lambda = 1.0;
  std::string where;
  const double err = max_rel_error(check_config(), check_batch(), spec, &where);
  EXPECT_LT(err, 1e-4) << "worst coordinate: " << where;
}

TEST(GradCheck, L2rHeadOnly) {
  LossSpec spec;
  spec.ntp = false;
  spec.hlp_l2r = true;
  spec.lambda = 1.0;
  std::string where;
  const double err = max_rel_error(check_config(), check_batch(), spec, &where);
  EXPECT_LT(err, 1e-4) << "worst coordinate: " << where;
}

TEST(GradCheck, CombinedObjective) {
  LossSpec spec;
  spec.ntp = true;
  spec.hlp_fim = true;
  spec.hlp_l2r = true;
  spec.lambda = 0.1;
  std::string where;
  const double err = max_rel_error(check_config(), check_batch(), spec, &where);
  EXPECT_LT(err, 1e-4) << "worst coordinate: " << where;
}

// If the analytic gradient is the true derivative, the central-difference
// error is pure truncation and shrinks as h^2: shrinking h tenfold must
// shrink the worst absolute disagreement by about 100x. A bias anywhere in
// the backward pass would leave a floor the refinement cannot pass.
TEST(GradCheck, FiniteDifferencesConvergeToTheAnalyticGradient) {
  const ModelConfig cfg = check_config();
  const Batch batch = check_batch();
  const LossSpec ntp_only;
  const double coarse = max_abs_error(cfg, batch, ntp_only, 1e-3);
  const double fine = max_abs_error(cfg, batch, ntp_only, 1e-4);
  EXPECT_LT(fine * 30.0, coarse) << "coarse=" << coarse << " fine=" << fine;
}

TEST(GradCheck, GradientsAreAffineInLambda) {
  const ModelConfig cfg = check_config();
  const Batch batch = check_batch();
  const ParamsT<double> params = params_with_noisy_heads(cfg);
  auto grads_at = [&](double lambda) {
    LossSpec spec;
    spec.ntp = true;
    spec.hlp_fim = true;
    spec.hlp_l2r = true;
    spec.lambda = lambda;
    return flat_grads(backward(cfg, params, batch, spec).grads);
  };
  const auto g0 = grads_at(0.0);
  const auto g1 = grads_at(0.1);
  const auto g2 = grads_at(0.2);
  ASSERT_EQ(g0.size(), g1.size());
  for (std::size_t i = 0; i < g0.size(); ++i) {
    EXPECT_NEAR(g2[i] - g0[i], 2.0 * (g1[i] - g0[i]), 1e-10);
  }
}

TEST(GradCheck, LambdaZeroMatchesNtpOnlyExactly) {
  const ModelConfig cfg = check_config();
  const Batch batch = check_batch();
  const ParamsT<double> params = params_with_noisy_heads(cfg);
  LossSpec combined;
  combined.ntp = true;
  combined.hlp_fim = true;
  combined.hlp_l2r = true;
  combined.lambda = 0.0;
  LossSpec ntp_only;
  const auto gc = flat_grads(backward(cfg, params, batch, combined).grads);
  const auto gn = flat_grads(backward(cfg, params, batch, ntp_only).grads);
  ASSERT_EQ(gc.size(), gn.size());
  for (std::size_t i = 0; i < gc.size(); ++i) {
    EXPECT_NEAR(gc[i], gn[i], 1e-300) << i;  // bitwise-level agreement
  }
}

}  // namespace
}  // namespace hfim
