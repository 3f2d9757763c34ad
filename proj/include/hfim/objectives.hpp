#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "hfim/errors.hpp"
#include "hfim/fim.hpp"
#include "hfim/vocab.hpp"

namespace hfim {

// Per-batch loss components. total = l_ntp + lambda * (l_hlp_fim + l_hlp_l2r).
struct LossBreakdown {
  double l_ntp = 0.0;
  double l_hlp_fim = 0.0;
  double l_hlp_l2r = 0.0;
  double lambda = 0.0;
  double total = 0.0;
  long ntp_count = 0;
  long hlp_fim_count = 0;
  long hlp_l2r_count = 0;
};

inline LossBreakdown combined_loss(double l_ntp, double l_hlp_fim,
                                   double l_hlp_l2r, double lambda) {
  if (lambda < 0.0) throw ConfigError("combined_loss: lambda must be >= 0");
  if (!std::isfinite(l_ntp) || !std::isfinite(l_hlp_fim) || !std::isfinite(l_hlp_l2r)) {
    throw NumericalError("combined_loss: non-finite loss component");
  }
  LossBreakdown lb;
  lb.l_ntp = l_ntp;
  lb.l_hlp_fim = l_hlp_fim;
  lb.l_hlp_l2r = l_hlp_l2r;
  lb.lambda = lambda;
  lb.total = l_ntp + lambda * (l_hlp_fim + l_hlp_l2r);
  return lb;
}

namespace detail {

// log(sum_j exp(row[j])) via the max-shifted form; accumulates in double.
template <typename S>
double log_sum_exp(const S* row, int vocab) {
  double mx = static_cast<double>(row[0]);
  for (int j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
  double sum = 0.0;
  for (int j = 0; j < vocab; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
  return mx + std::log(sum);
}

}  // namespace detail

// Mean cross-entropy -log softmax(logits)[target] over masked positions.
// logits is row-major [n_positions, vocab].
template <typename S>
double ntp_loss(const S* logits, int n_positions, int vocab,
                const TokenId* targets, const std::uint8_t* mask) {
  double sum = 0.0;
  long count = 0;
  for (int i = 0; i < n_positions; ++i) {
    if (!mask[i]) continue;
    const S* row = logits + static_cast<std::ptrdiff_t>(i) * vocab;
    sum += detail::log_sum_exp(row, vocab) - static_cast<double>(row[targets[i]]);
    ++count;
  }
  if (count == 0) throw ObjectiveError("ntp_loss: empty mask");
  return sum / static_cast<double>(count);
}

// Mean L1 distance |pred - target| over masked positions. An empty mask is
// not an error: a pure-L2R batch has no FIM-HLP positions.
template <typename S, typename T>
double hlp_loss(const S* preds, const T* targets, const std::uint8_t* mask,
                int n_positions, long* count_out = nullptr) {
  double sum = 0.0;
  long count = 0;
  for (int i = 0; i < n_positions; ++i) {
    if (!mask[i]) continue;
    sum += std::abs(static_cast<double>(preds[i]) - static_cast<double>(targets[i]));
    ++count;
  }
  if (count_out) *count_out = count;
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

// Cross-entropy of predicting <eoi> at the final middle position; checks that
// the Eq.-(2) boundary term is part of the NTP sum.
template <typename S>
double eoi_term_check(const FimInstance& inst, int pos, const S* logits_row,
                      int vocab) {
  if (pos < 0 || pos >= inst.length() ||
      inst.roles[static_cast<std::size_t>(pos)] != Role::Middle ||
      inst.ntp_target[static_cast<std::size_t>(pos)] != Vocab::kEoi) {
    throw ObjectiveError("eoi_term_check: position is not the last middle token");
  }
  return detail::log_sum_exp(logits_row, vocab) -
         static_cast<double>(logits_row[Vocab::kEoi]);
}

}  // namespace hfim
