#include "hfim/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "hfim/corpus.hpp"
#include "hfim/errors.hpp"
#include "hfim/fim.hpp"
#include "hfim/params.hpp"
#include "hfim/rng.hpp"

namespace hfim {
namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_model = 32;
  cfg.d_ff = 64;
  cfg.vocab_size = Vocab::kSize;
  cfg.max_seq = 32;
  cfg.init_seed = 5;
  return cfg;
}

Batch tiny_batch() {
  const Document a = make_document("a", "abcdefgh");
  const Document b = make_document("b", "let x = 1;\n");
  Batch batch;
  batch.items.push_back(reorder_psm(a, FimSplit{3, 2}));
  batch.items.push_back(format_l2r(b));
  return batch;
}

template <typename S>
bool params_bitwise_equal(const ParamsT<S>& a, const ParamsT<S>& b) {
  bool equal = a.has_heads == b.has_heads;
  visit_tensors(a, [&](const std::string& name, const auto& ta) {
    visit_tensors(b, [&](const std::string& nb, const auto& tb) {
      if (name != nb) return;
      if (ta.size() != tb.size()) {
        equal = false;
        return;
      }
      if (std::memcmp(ta.data(), tb.data(), sizeof(S) * static_cast<std::size_t>(ta.size())) != 0) {
        equal = false;
      }
    });
  });
  return equal;
}

TEST(Params, InitIsDeterministic) {
  const ModelConfig cfg = tiny_config();
  const Params a = init_params<float>(cfg);
  const Params b = init_params<float>(cfg);
  EXPECT_TRUE(params_bitwise_equal(a, b));
  ModelConfig other = cfg;
  other.init_seed = 6;
  const Params c = init_params<float>(other);
  EXPECT_FALSE(params_bitwise_equal(a, c));
}

TEST(Params, CountClosedFormMatchesTally) {
  for (bool heads : {true, false}) {
    const ModelConfig desk;  // 2 layers, 4 heads, d=128, d_ff=512
    const Params p = init_params<float>(desk, heads);
    EXPECT_EQ(param_count(desk, heads), param_count(p));

    const ModelConfig cfg = tiny_config();
    const Params q = init_params<float>(cfg, heads);
    EXPECT_EQ(param_count(cfg, heads), param_count(q));
  }
}

TEST(Params, HeadsCostExactlyTwoDModel) {
  const ModelConfig cfg;
  EXPECT_EQ(param_count(cfg, true) - param_count(cfg, false), 2 * cfg.d_model);
}

TEST(Params, HeadFractionIsNegligibleAtScale) {
  // with d_model=128, a model of >= 2.56M parameters keeps the two heads
  // under 0.01% of the total
  ModelConfig cfg;
  cfg.n_layers = 14;
  const double total = static_cast<double>(param_count(cfg, true));
  ASSERT_GE(total, 2.56e6);
  EXPECT_LE(2.0 * cfg.d_model / total, 1e-4);
}

TEST(Params, StripHeadsDropsOnlyTheHeads) {
  const ModelConfig cfg = tiny_config();
  const Params full = init_params<float>(cfg, true);
  const Params bare = strip_heads(full);
  EXPECT_FALSE(bare.has_heads);
  EXPECT_EQ(bare.w_hlp_fim.size(), 0);
  EXPECT_EQ(bare.w_hlp_l2r.size(), 0);
  EXPECT_EQ(param_count(full) - param_count(bare), 2 * cfg.d_model);
}

TEST(Params, ConfigValidation) {
  ModelConfig bad = tiny_config();
  bad.d_model = 30;  // not divisible by n_heads=2? it is; use heads=4
  bad.n_heads = 4;
  EXPECT_THROW(validate(bad), ConfigError);
  bad = tiny_config();
  bad.vocab_size = 5;
  EXPECT_THROW(validate(bad), ConfigError);
  bad = tiny_config();
  bad.max_seq = 11;
  EXPECT_THROW(validate(bad), ConfigError);
  bad = tiny_config();
  bad.n_layers = 0;
  EXPECT_THROW(validate(bad), ConfigError);
}

TEST(Forward, ShapesAndPadTails) {
  const ModelConfig cfg = tiny_config();
  const Params params = init_params<float>(cfg);
  const Batch batch = tiny_batch();
  const ForwardOutput out = forward(cfg, params, batch);
  EXPECT_EQ(out.batch, 2);
  EXPECT_EQ(out.max_len, 12);  // FIM instance: 8+4; L2R instance: 11+1
  EXPECT_EQ(out.vocab, cfg.vocab_size);
  EXPECT_EQ(out.d_model, cfg.d_model);
  EXPECT_TRUE(out.has_hlp);
  EXPECT_EQ(out.lengths, (std::vector<int>{12, 12}));
  EXPECT_EQ(out.logits.size(),
            static_cast<std::size_t>(2) * 12 * static_cast<std::size_t>(cfg.vocab_size));
  EXPECT_EQ(out.hidden.size(), static_cast<std::size_t>(2) * 12 * 32);
}

TEST(Forward, PadTailsAreInert) {
  const ModelConfig cfg = tiny_config();
  const Params params = init_params<float>(cfg);
  Batch batch;
  batch.items.push_back(reorder_psm(make_document("a", "abcdefgh"), FimSplit{3, 2}));  // len 12
  batch.items.push_back(format_l2r(make_document("b", "abcdefgh")));                   // len 9
  const ForwardOutput out = forward(cfg, params, batch);
  ASSERT_EQ(out.max_len, 12);
  for (int t = 9; t < 12; ++t) {
    for (int v = 0; v < cfg.vocab_size; ++v) EXPECT_EQ(out.logits_at(1, t)[v], 0.0f);
    for (int j = 0; j < cfg.d_model; ++j) EXPECT_EQ(out.hidden_at(1, t)[j], 0.0f);
    EXPECT_EQ(out.hlp_fim_at(1, t), 0.5f);
    EXPECT_EQ(out.hlp_l2r_at(1, t), 0.5f);
  }
}

TEST(Forward, DeterministicAcrossCalls) {
  const ModelConfig cfg = tiny_config();
  const Params params = init_params<float>(cfg);
  const Batch batch = tiny_batch();
  const ForwardOutput a = forward(cfg, params, batch);
  const ForwardOutput b = forward(cfg, params, batch);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(a.hidden, b.hidden);
  EXPECT_EQ(a.hlp_fim_pred, b.hlp_fim_pred);
}

TEST(Forward, CausalityHoldsBitwise) {
  const ModelConfig cfg = tiny_config();
  const Params params = init_params<float>(cfg);
  std::vector<TokenId> seq = tokenize("let a = 1;\n let b");
  const int n = static_cast<int>(seq.size());
  const ForwardOutput base = forward_rows(cfg, params, {seq});

  std::vector<TokenId> bumped = seq;
  const int j = 9;
  bumped[j] = bumped[j] == 70 ? 71 : 70;
  const ForwardOutput pert = forward_rows(cfg, params, {bumped});

  for (int t = 0; t < n; ++t) {
    const bool before = t < j;
    bool same = true;
    for (int v = 0; v < cfg.vocab_size; ++v) {
      if (base.logits_at(0, t)[v] != pert.logits_at(0, t)[v]) same = false;
    }
    if (before) {
      EXPECT_TRUE(same) << "position " << t << " saw a future token";
    } else if (t == j) {
      // same input prefix including position j's own embedding changed
      EXPECT_FALSE(same);
    }
  }
}

TEST(Forward, ZeroHeadsPredictOneHalfEverywhere) {
  const ModelConfig cfg = tiny_config();
  const Params params = init_params<float>(cfg);  // heads start at exactly zero
  const Batch batch = tiny_batch();
  const ForwardOutput out = forward(cfg, params, batch);
  for (int b = 0; b < out.batch; ++b) {
    for (int t = 0; t < out.lengths[static_cast<std::size_t>(b)]; ++t) {
      EXPECT_EQ(out.hlp_fim_at(b, t), 0.5f);
      EXPECT_EQ(out.hlp_l2r_at(b, t), 0.5f);
    }
  }
}

TEST(Forward, CraftedHeadHitsSigmaLnThree) {
  const ModelConfig cfg = tiny_config();
  Params params = init_params<float>(cfg);
  const Batch batch = tiny_batch();
  const ForwardOutput base = forward(cfg, params, batch);

  const int b = 0, t = 6;
  const float* h = base.hidden_at(b, t);
  double hh = 0.0;
  for (int j = 0; j < cfg.d_model; ++j) hh += static_cast<double>(h[j]) * h[j];
  ASSERT_GT(hh, 0.0);
  for (int j = 0; j < cfg.d_model; ++j) {
    params.w_hlp_fim(j) = static_cast<float>(std::log(3.0) * h[j] / hh);
  }
  const ForwardOutput out = forward(cfg, params, batch);
  EXPECT_NEAR(out.hlp_fim_at(b, t), 0.75, 1e-6);  // sigma(ln 3) = 3/4
}

TEST(Forward, HeadsNeverTouchTheTrunk) {
  const ModelConfig cfg = tiny_config();
  Params params = init_params<float>(cfg);
  const Batch batch = tiny_batch();
  const ForwardOutput with = forward(cfg, params, batch);

  const Params bare = strip_heads(params);
  const ForwardOutput without = forward(cfg, bare, batch);
  EXPECT_EQ(with.logits, without.logits);
  EXPECT_EQ(with.hidden, without.hidden);
  EXPECT_FALSE(without.has_hlp);
  EXPECT_THROW(without.hlp_fim_at(0, 0), CapabilityError);

  // filling the heads with noise must still leave logits and hidden identical
  Rng rng(77);
  for (int j = 0; j < cfg.d_model; ++j) {
    params.w_hlp_fim(j) = static_cast<float>(rng.normal(0.0, 3.0));
    params.w_hlp_l2r(j) = static_cast<float>(rng.normal(0.0, 3.0));
  }
  const ForwardOutput noisy = forward(cfg, params, batch);
  EXPECT_EQ(noisy.logits, with.logits);
  EXPECT_EQ(noisy.hidden, with.hidden);
}

TEST(Forward, PredictionsStayInsideTheOpenUnitInterval) {
  const ModelConfig cfg = tiny_config();
  Params params = init_params<float>(cfg);
  for (int j = 0; j < cfg.d_model; ++j) {
    params.w_hlp_fim(j) = 1000.0f;
    params.w_hlp_l2r(j) = -1000.0f;
  }
  const Batch batch = tiny_batch();
  const ForwardOutput out = forward(cfg, params, batch);
  for (int b = 0; b < out.batch; ++b) {
    for (int t = 0; t < out.lengths[static_cast<std::size_t>(b)]; ++t) {
      EXPECT_GT(out.hlp_fim_at(b, t), 0.0f);
      EXPECT_LT(out.hlp_fim_at(b, t), 1.0f);
      EXPECT_GT(out.hlp_l2r_at(b, t), 0.0f);
      EXPECT_LT(out.hlp_l2r_at(b, t), 1.0f);
    }
  }
}

TEST(Forward, RejectsMalformedInput) {
  const ModelConfig cfg = tiny_config();
  const Params params = init_params<float>(cfg);
  EXPECT_THROW(forward(cfg, params, Batch{}), ModelError);
  EXPECT_THROW(forward_rows(cfg, params, {std::vector<TokenId>{}}), ModelError);
  EXPECT_THROW(forward_rows(cfg, params, {std::vector<TokenId>(33, 70)}), ModelError);
  EXPECT_THROW(forward_rows(cfg, params, {{70, 101, 71}}), ModelError);
  EXPECT_THROW(forward_rows(cfg, params, {{70, -1, 71}}), ModelError);
}

TEST(Forward, IndexAccessorsAreBoundsChecked) {
  const ModelConfig cfg = tiny_config();
  const Params params = init_params<float>(cfg);
  const ForwardOutput out = forward(cfg, params, tiny_batch());
  EXPECT_THROW(out.logits_at(2, 0), ModelError);
  EXPECT_THROW(out.logits_at(0, 12), ModelError);
  EXPECT_THROW(out.hidden_at(-1, 0), ModelError);
}

TEST(Backward, LossesMatchBatchLosses) {
  const ModelConfig cfg = tiny_config();
  const Params params = init_params<float>(cfg);
  const Batch batch = tiny_batch();
  LossSpec spec;
  spec.hlp_fim = true;
  spec.hlp_l2r = true;
  const auto bw = backward(cfg, params, batch, spec);
  const LossBreakdown fwd = batch_losses(cfg, params, batch, spec);
  EXPECT_DOUBLE_EQ(bw.losses.total, fwd.total);
  EXPECT_DOUBLE_EQ(bw.losses.l_ntp, fwd.l_ntp);
  EXPECT_EQ(bw.losses.ntp_count, fwd.ntp_count);
  EXPECT_EQ(bw.losses.hlp_fim_count, 2);  // M=2 middle positions
  EXPECT_EQ(bw.losses.hlp_l2r_count, 11);
}

TEST(Backward, PureL2rBatchLeavesFimHeadUntouched) {
  const ModelConfig cfg = tiny_config();
  const Params params = init_params<float>(cfg);
  Batch batch;
  batch.items.push_back(format_l2r(make_document("b", "let x = 1;\n")));
  LossSpec spec;
  spec.hlp_fim = true;
  spec.hlp_l2r = true;
  const auto bw = backward(cfg, params, batch, spec);
  EXPECT_EQ(bw.losses.hlp_fim_count, 0);
  EXPECT_DOUBLE_EQ(bw.losses.l_hlp_fim, 0.0);
  for (int j = 0; j < cfg.d_model; ++j) {
    EXPECT_EQ(bw.grads.w_hlp_fim(j), 0.0f);
  }
}

TEST(Backward, HlpWithoutHeadsIsRejected) {
  const ModelConfig cfg = tiny_config();
  const Params bare = strip_heads(init_params<float>(cfg));
  LossSpec spec;
  spec.hlp_fim = true;
  EXPECT_THROW(backward(cfg, bare, tiny_batch(), spec), CapabilityError);
  EXPECT_THROW(batch_losses(cfg, bare, tiny_batch(), spec), CapabilityError);
  // NTP-only loss works fine without heads
  LossSpec ntp_only;
  EXPECT_NO_THROW(batch_losses(cfg, bare, tiny_batch(), ntp_only));
}

TEST(Backward, UntrainedLossesSitAtTheirTheoreticalStarts) {
  // fresh init: logits near zero => l_ntp near ln(vocab); zero heads =>
  // sigma(0) = 0.5 predictions
  const ModelConfig cfg = tiny_config();
  const Params params = init_params<float>(cfg);
  LossSpec spec;
  spec.hlp_fim = true;
  spec.hlp_l2r = true;
  const LossBreakdown lb = batch_losses(cfg, params, tiny_batch(), spec);
  EXPECT_NEAR(lb.l_ntp, std::log(101.0), 0.35);
  // fim targets for M=2 are {0.5, 0.0}: mean |0.5 - y| = 0.25
  EXPECT_NEAR(lb.l_hlp_fim, 0.25, 1e-7);
  EXPECT_DOUBLE_EQ(lb.total, lb.l_ntp + spec.lambda * (lb.l_hlp_fim + lb.l_hlp_l2r));
}

}  // namespace
}  // namespace hfim
