#pragma once

// Linear probing of remaining-horizon information in frozen hidden states:
// FIM-format held-out documents with fresh random splits, collect the
// middle-token hidden states, fit an OLS probe (intercept + tiny ridge) to
// the normalized remaining-token targets, and report R-squared plus the
// predicted-fraction-vs-position curve.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "hfim/corpus.hpp"
#include "hfim/errors.hpp"
#include "hfim/fim.hpp"
#include "hfim/model.hpp"

namespace hfim {

struct ProbeDataset {
  int d_model = 0;
  MatX<double> hidden;               // [n, d_model]
  VecX<double> target;               // [n], Eq.-(3) literal targets
  VecX<double> pos_frac;             // [n], t/M with t 1-based
  std::vector<std::string> doc_ids;  // [n]
  long rows() const { return hidden.rows(); }
};

struct ProbeFit {
  VecX<double> weights;  // [d_model]
  double intercept = 0.0;
  double r2_train = 0.0;
  double r2_test = 0.0;
};

// FIM-formats each document with a fresh random split drawn from rng and
// collects one row per middle-token hidden state. Targets always follow the
// literal Eq.-(3) convention so probes of differently-trained models share
// one target definition. The model is read-only.
template <typename S>
ProbeDataset collect_hidden_states(const ModelConfig& cfg,
                                   const ParamsT<S>& params,
                                   const std::vector<Document>& docs, Rng& rng,
                                   int docs_per_batch = 16) {
  validate(cfg);
  if (docs.empty()) throw ProbeError("collect_hidden_states: empty document set");
  if (docs_per_batch < 1) throw ConfigError("collect_hidden_states: docs_per_batch must be >= 1");

  // Splits are drawn in document order first so batching is a pure
  // implementation detail that cannot perturb the rng stream.
  std::vector<FimInstance> instances;
  instances.reserve(docs.size());
  long total_rows = 0;
  for (const auto& doc : docs) {
    const FimSplit split = split_document(doc, rng);
    instances.push_back(reorder_psm(doc, split, HlpConvention::Eq3Literal));
    total_rows += split.middle_len;
  }

  ProbeDataset ds;
  ds.d_model = cfg.d_model;
  ds.hidden.resize(total_rows, cfg.d_model);
  ds.target.resize(total_rows);
  ds.pos_frac.resize(total_rows);
  ds.doc_ids.reserve(static_cast<std::size_t>(total_rows));

  long row = 0;
  for (std::size_t begin = 0; begin < instances.size(); begin += static_cast<std::size_t>(docs_per_batch)) {
    Batch batch;
    const std::size_t end = std::min(instances.size(), begin + static_cast<std::size_t>(docs_per_batch));
    batch.items.assign(instances.begin() + static_cast<std::ptrdiff_t>(begin),
                       instances.begin() + static_cast<std::ptrdiff_t>(end));
    const ForwardOutputT<S> out = forward(cfg, params, batch);
    for (std::size_t b = 0; b < batch.items.size(); ++b) {
      const FimInstance& inst = batch.items[b];
      const long m = inst.split->middle_len;
      long t_mid = 0;  // 1-based index of the middle token
      for (int t = 0; t < inst.length(); ++t) {
        if (inst.roles[static_cast<std::size_t>(t)] != Role::Middle) continue;
        ++t_mid;
        const S* h = out.hidden_at(static_cast<int>(b), t);
        for (int j = 0; j < cfg.d_model; ++j) {
          ds.hidden(row, j) = static_cast<double>(h[j]);
        }
        ds.target(row) = static_cast<double>(m - t_mid) / static_cast<double>(m);
        ds.pos_frac(row) = static_cast<double>(t_mid) / static_cast<double>(m);
        ds.doc_ids.push_back(inst.source_doc_id);
        ++row;
      }
    }
  }
  if (row != total_rows) throw ProbeError("collect_hidden_states: row count mismatch");
  return ds;
}

// Per-line horizon analogue: L2R-formats each document (tokens + EOI) and
// collects one row per BODY position with its l2r_line_targets value.
// pos_frac is the within-line offset fraction k/L.
template <typename S>
ProbeDataset collect_hidden_states_l2r(const ModelConfig& cfg,
                                       const ParamsT<S>& params,
                                       const std::vector<Document>& docs,
                                       int docs_per_batch = 16) {
  validate(cfg);
  if (docs.empty()) throw ProbeError("collect_hidden_states_l2r: empty document set");
  if (docs_per_batch < 1) throw ConfigError("collect_hidden_states_l2r: docs_per_batch must be >= 1");

  long total_rows = 0;
  for (const auto& doc : docs) total_rows += doc.length();

  ProbeDataset ds;
  ds.d_model = cfg.d_model;
  ds.hidden.resize(total_rows, cfg.d_model);
  ds.target.resize(total_rows);
  ds.pos_frac.resize(total_rows);
  ds.doc_ids.reserve(static_cast<std::size_t>(total_rows));

  long row = 0;
  for (std::size_t begin = 0; begin < docs.size(); begin += static_cast<std::size_t>(docs_per_batch)) {
    Batch batch;
    const std::size_t end = std::min(docs.size(), begin + static_cast<std::size_t>(docs_per_batch));
    for (std::size_t i = begin; i < end; ++i) batch.items.push_back(format_l2r(docs[i]));
    const ForwardOutputT<S> out = forward(cfg, params, batch);
    for (std::size_t b = 0; b < batch.items.size(); ++b) {
      const Document& doc = docs[begin + b];
      const std::vector<double> y = l2r_line_targets(doc);
      for (int t = 0; t < doc.length(); ++t) {
        const S* h = out.hidden_at(static_cast<int>(b), t);
        for (int j = 0; j < cfg.d_model; ++j) {
          ds.hidden(row, j) = static_cast<double>(h[j]);
        }
        ds.target(row) = y[static_cast<std::size_t>(t)];
        ds.pos_frac(row) = 1.0 - y[static_cast<std::size_t>(t)];
        ds.doc_ids.push_back(doc.doc_id);
        ++row;
      }
    }
  }
  if (row != total_rows) throw ProbeError("collect_hidden_states_l2r: row count mismatch");
  return ds;
}

// Partitions rows by document: ceil(test_fraction * n_docs) documents, chosen
// by shuffling the distinct doc_ids with rng, form the test side.
inline std::pair<ProbeDataset, ProbeDataset> split_train_test(
    const ProbeDataset& ds, double test_fraction, Rng& rng) {
  if (test_fraction <= 0.0 || test_fraction >= 1.0) {
    throw ConfigError("split_train_test: test_fraction must lie in (0, 1)");
  }
  std::vector<std::string> ids;  // distinct, in first-appearance order
  std::unordered_map<std::string, int> seen;
  for (const auto& id : ds.doc_ids) {
    if (seen.emplace(id, 1).second) ids.push_back(id);
  }
  if (ids.size() < 2) {
    throw ProbeError("split_train_test: need at least 2 distinct documents");
  }
  for (std::size_t i = ids.size() - 1; i > 0; --i) {
    std::swap(ids[i], ids[rng.below(i + 1)]);
  }
  const std::size_t n_test = static_cast<std::size_t>(
      std::ceil(test_fraction * static_cast<double>(ids.size())));
  std::unordered_map<std::string, bool> is_test;
  for (std::size_t i = 0; i < ids.size(); ++i) is_test[ids[i]] = i < n_test;

  std::vector<long> train_rows, test_rows;
  for (long r = 0; r < ds.rows(); ++r) {
    (is_test[ds.doc_ids[static_cast<std::size_t>(r)]] ? test_rows : train_rows).push_back(r);
  }
  auto take = [&ds](const std::vector<long>& rows) {
    ProbeDataset out;
    out.d_model = ds.d_model;
    out.hidden.resize(static_cast<long>(rows.size()), ds.d_model);
    out.target.resize(static_cast<long>(rows.size()));
    out.pos_frac.resize(static_cast<long>(rows.size()));
    out.doc_ids.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out.hidden.row(static_cast<long>(i)) = ds.hidden.row(rows[i]);
      out.target(static_cast<long>(i)) = ds.target(rows[i]);
      out.pos_frac(static_cast<long>(i)) = ds.pos_frac(rows[i]);
      out.doc_ids.push_back(ds.doc_ids[static_cast<std::size_t>(rows[i])]);
    }
    return out;
  };
  return {take(train_rows), take(test_rows)};
}

inline constexpr double kRidgeEps = 1e-6;

inline double r_squared(const ProbeFit& fit, const MatX<double>& x,
                        const VecX<double>& y) {
  const VecX<double> pred = (x * fit.weights).array() + fit.intercept;
  const double mean = y.mean();
  const double ss_tot = (y.array() - mean).square().sum();
  if (ss_tot <= 0.0) throw ProbeError("r_squared: constant target (SS_tot = 0)");
  const double ss_res = (y - pred).array().square().sum();
  return 1.0 - ss_res / ss_tot;
}

// Intercept-augmented normal equations with ridge kRidgeEps on the full
// diagonal, solved by LDLT. Deterministic; no iteration.
inline ProbeFit fit_ols(const MatX<double>& x, const VecX<double>& y) {
  const long n = x.rows();
  const long d = x.cols();
  if (y.size() != n) throw ProbeError("fit_ols: X and y row counts differ");
  if (n <= d + 1) {
    throw ProbeError("fit_ols: underdetermined (need n > d+1, got n=" +
                     std::to_string(n) + ", d=" + std::to_string(d) + ")");
  }
  const double y_mean = y.mean();
  if ((y.array() - y_mean).square().sum() <= 0.0) {
    throw ProbeError("fit_ols: constant target (SS_tot = 0)");
  }

  MatX<double> a(d + 1, d + 1);
  a.topLeftCorner(d, d).noalias() = x.transpose() * x;
  a.topRightCorner(d, 1) = x.colwise().sum().transpose();
  a.bottomLeftCorner(1, d) = x.colwise().sum();
  a(d, d) = static_cast<double>(n);
  a.diagonal().array() += kRidgeEps;

  VecX<double> b(d + 1);
  b.head(d).noalias() = x.transpose() * y;
  b(d) = y.sum();

  const VecX<double> theta = a.ldlt().solve(b);
  ProbeFit fit;
  fit.weights = theta.head(d);
  fit.intercept = theta(d);
  fit.r2_train = r_squared(fit, x, y);
  return fit;
}

struct CurveBin {
  double bin_center = 0.0;
  double pred_mean = 0.0;
  double true_mean = 0.0;
  long count = 0;
};

// Buckets rows by pos_frac into n_bins equal-width bins over [0,1]; per-bin
// means of the probe prediction and the true target.
inline std::vector<CurveBin> binned_curve(const ProbeFit& fit,
                                          const ProbeDataset& ds, int n_bins) {
  if (n_bins < 2) throw ConfigError("binned_curve: n_bins must be >= 2");
  const VecX<double> pred = (ds.hidden * fit.weights).array() + fit.intercept;
  std::vector<CurveBin> bins(static_cast<std::size_t>(n_bins));
  for (int i = 0; i < n_bins; ++i) {
    bins[static_cast<std::size_t>(i)].bin_center = (i + 0.5) / static_cast<double>(n_bins);
  }
  for (long r = 0; r < ds.rows(); ++r) {
    int i = static_cast<int>(ds.pos_frac(r) * n_bins);
    i = std::clamp(i, 0, n_bins - 1);
    auto& bin = bins[static_cast<std::size_t>(i)];
    bin.pred_mean += pred(r);
    bin.true_mean += ds.target(r);
    bin.count += 1;
  }
  for (auto& bin : bins) {
    if (bin.count > 0) {
      bin.pred_mean /= static_cast<double>(bin.count);
      bin.true_mean /= static_cast<double>(bin.count);
    }
  }
  return bins;
}

// CSV with one row per bin; empty bins carry the explicit marker "NA".
inline std::string curve_to_csv(const std::vector<CurveBin>& bins) {
  std::ostringstream out;
  out << "bin_center,pred_mean,true_mean,count\n";
  out.precision(10);
  for (const auto& b : bins) {
    out << b.bin_center << ',';
    if (b.count > 0) {
      out << b.pred_mean << ',' << b.true_mean;
    } else {
      out << "NA,NA";
    }
    out << ',' << b.count << '\n';
  }
  return out.str();
}

// What the probe reads out: remaining-middle fraction at MIDDLE positions of
// FIM-formatted docs, or remaining-line fraction at BODY positions of
// L2R-formatted docs.
enum class ProbeMode { FimHorizon, L2rLineHorizon };

inline const char* probe_mode_name(ProbeMode mode) {
  return mode == ProbeMode::FimHorizon ? "fim_horizon" : "l2r_line_horizon";
}

struct ProbeResult {
  ProbeFit fit;
  long n_rows = 0;
  long n_docs = 0;
  std::vector<CurveBin> curve;  // over the test rows
  ProbeMode mode = ProbeMode::FimHorizon;
};

// End-to-end probe: collect rows from held-out docs, split by document, fit
// on the train side, score both sides, bin the test-side curve.
template <typename S>
ProbeResult run_probe(const ModelConfig& cfg, const ParamsT<S>& params,
                      const std::vector<Document>& docs, std::uint64_t seed,
                      double test_fraction = 0.2, int n_bins = 10,
                      ProbeMode mode = ProbeMode::FimHorizon) {
  Rng rng(seed);
  const ProbeDataset ds = mode == ProbeMode::FimHorizon
                              ? collect_hidden_states(cfg, params, docs, rng)
                              : collect_hidden_states_l2r(cfg, params, docs);
  auto [train, test] = split_train_test(ds, test_fraction, rng);
  ProbeResult res;
  res.fit = fit_ols(train.hidden, train.target);
  res.fit.r2_test = r_squared(res.fit, test.hidden, test.target);
  res.n_rows = ds.rows();
  res.n_docs = static_cast<long>(docs.size());
  res.curve = binned_curve(res.fit, test, n_bins);
  res.mode = mode;
  return res;
}

inline nlohmann::json probe_report_json(const ProbeResult& res,
                                        HlpConvention convention) {
  return nlohmann::json{{"r2_train", res.fit.r2_train},
                        {"r2_test", res.fit.r2_test},
                        {"n_rows", res.n_rows},
                        {"n_docs", res.n_docs},
                        {"mode", probe_mode_name(res.mode)},
                        {"convention", convention_name(convention)}};
}

}  // namespace hfim
