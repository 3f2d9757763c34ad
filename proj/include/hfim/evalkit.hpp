#pragma once

// Infilling evaluation: greedy decoding from the PSM prompt with
// <eoi>-stopping, exact-match / edit-similarity scoring of raw and
// line-truncated generations, and stop-position diagnostics.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "hfim/corpus.hpp"
#include "hfim/errors.hpp"
#include "hfim/fim.hpp"
#include "hfim/model.hpp"
#include "hfim/vocab.hpp"

namespace hfim {

struct InfillTask {
  std::string doc_id;
  std::vector<TokenId> prefix;
  std::vector<TokenId> middle;  // reference completion
  std::vector<TokenId> suffix;
};

inline void validate(const InfillTask& t) {
  if (t.prefix.empty() || t.middle.empty() || t.suffix.empty()) {
    throw EvalError("InfillTask: prefix, middle, and suffix must all be nonempty");
  }
}

// One task per document. The reference middle is a contiguous run of whole
// lines (one to three), mirroring how infilling benchmarks carve code; at
// least one line stays on each side so prefix and suffix are nonempty.
// Line-aligned references end in a newline, which keeps the line-truncation
// rule able to act on overgenerated completions. Documents with fewer than
// three lines fall back to a character-level split.
inline std::vector<InfillTask> make_infill_tasks(const std::vector<Document>& docs,
                                                 Rng& rng) {
  if (docs.empty()) throw EvalError("make_infill_tasks: empty document set");
  constexpr int kMaxMiddleLines = 3;
  std::vector<InfillTask> tasks;
  tasks.reserve(docs.size());
  for (const auto& doc : docs) {
    const int n_lines = static_cast<int>(doc.line_starts.size());
    int begin = 0;
    int end = 0;
    if (n_lines >= 3) {
      const int s = static_cast<int>(rng.uniform_int(1, n_lines - 2));
      const int max_m = std::min(kMaxMiddleLines, n_lines - 1 - s);
      const int m = static_cast<int>(rng.uniform_int(1, max_m));
      begin = doc.line_starts[s];
      end = doc.line_starts[s + m];
    } else {
      const FimSplit split = split_document(doc, rng);
      begin = split.prefix_len;
      end = split.prefix_len + split.middle_len;
    }
    InfillTask t;
    t.doc_id = doc.doc_id;
    t.prefix.assign(doc.tokens.begin(), doc.tokens.begin() + begin);
    t.middle.assign(doc.tokens.begin() + begin, doc.tokens.begin() + end);
    t.suffix.assign(doc.tokens.begin() + end, doc.tokens.end());
    validate(t);
    tasks.push_back(std::move(t));
  }
  return tasks;
}

struct GenResult {
  std::vector<TokenId> tokens;  // never contains sentinel or PAD ids
  bool hit_max = false;
};

// Greedy decoding driven by a next-logits callback (so stub models exercise
// the same loop as the transformer). Stops on EOI or after max_new tokens.
// Sentinel/PAD continuations other than EOI are excluded from the argmax:
// the decode alphabet is characters plus the stop symbol.
template <typename NextLogits>
GenResult generate_greedy(NextLogits&& next_logits, int vocab, int max_seq,
                          const std::vector<TokenId>& prompt, int max_new) {
  if (max_new < 0) throw EvalError("generate_greedy: max_new must be >= 0");
  if (static_cast<int>(prompt.size()) + 1 > max_seq) {
    throw EvalError("generate_greedy: prompt of " + std::to_string(prompt.size()) +
                    " tokens leaves no room under max_seq=" + std::to_string(max_seq));
  }
  std::vector<TokenId> seq = prompt;
  GenResult res;
  const int budget = std::min<int>(max_new, max_seq - static_cast<int>(prompt.size()));
  for (int i = 0; i < budget; ++i) {
    const std::vector<float> logits = next_logits(seq);
    if (static_cast<int>(logits.size()) != vocab) {
      throw EvalError("generate_greedy: logits size mismatch");
    }
    TokenId best = Vocab::kEoi;
    float best_val = -std::numeric_limits<float>::infinity();
    for (TokenId id = 0; id < vocab; ++id) {
      if (Vocab::is_sentinel(id) && id != Vocab::kEoi) continue;
      if (id == Vocab::kPad) continue;
      if (logits[static_cast<std::size_t>(id)] > best_val) {
        best_val = logits[static_cast<std::size_t>(id)];
        best = id;
      }
    }
    if (best == Vocab::kEoi) return res;
    res.tokens.push_back(best);
    seq.push_back(best);
  }
  res.hit_max = true;
  return res;
}

// [PRE] prefix [SUF] suffix [MID] prompt, Eq.-(1) order.
inline std::vector<TokenId> infill_prompt(const InfillTask& task) {
  std::vector<TokenId> prompt;
  prompt.reserve(task.prefix.size() + task.suffix.size() + 3);
  prompt.push_back(Vocab::kPre);
  prompt.insert(prompt.end(), task.prefix.begin(), task.prefix.end());
  prompt.push_back(Vocab::kSuf);
  prompt.insert(prompt.end(), task.suffix.begin(), task.suffix.end());
  prompt.push_back(Vocab::kMid);
  return prompt;
}

template <typename S>
GenResult generate_infill(const ModelConfig& cfg, const ParamsT<S>& params,
                          const InfillTask& task, int max_new) {
  validate(task);
  auto next_logits = [&](const std::vector<TokenId>& seq) {
    const ForwardOutputT<S> out = forward_rows(cfg, params, {seq});
    const S* row = out.logits_at(0, static_cast<int>(seq.size()) - 1);
    std::vector<float> logits(static_cast<std::size_t>(cfg.vocab_size));
    for (int j = 0; j < cfg.vocab_size; ++j) logits[static_cast<std::size_t>(j)] = static_cast<float>(row[j]);
    return logits;
  };
  return generate_greedy(next_logits, cfg.vocab_size, cfg.max_seq,
                         infill_prompt(task), max_new);
}

inline bool exact_match(const std::vector<TokenId>& gen,
                        const std::vector<TokenId>& ref) {
  return detokenize(gen) == detokenize(ref);  // raw equality, no normalization
}

inline long levenshtein(const std::string& a, const std::string& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<long> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<long>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<long>(i);
    for (std::size_t j = 1; j <= m; ++j) {
      const long sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

// 1 - Levenshtein / max length, over detokenized characters.
inline double edit_similarity(const std::vector<TokenId>& gen,
                              const std::vector<TokenId>& ref) {
  const std::string a = detokenize(gen);
  const std::string b = detokenize(ref);
  const std::size_t denom = std::max(a.size(), b.size());
  if (denom == 0) return 1.0;
  return 1.0 - static_cast<double>(levenshtein(a, b)) / static_cast<double>(denom);
}

// Keeps tokens up to and including the ref_line_count-th newline; a
// generation with fewer complete lines is returned unchanged (truncation
// only ever removes content).
inline std::vector<TokenId> postprocess_line_truncate(const std::vector<TokenId>& gen,
                                                      int ref_line_count) {
  if (ref_line_count < 1) {
    throw EvalError("postprocess_line_truncate: ref_line_count must be >= 1");
  }
  int seen = 0;
  for (std::size_t i = 0; i < gen.size(); ++i) {
    if (gen[i] == Vocab::kNewline && ++seen == ref_line_count) {
      return std::vector<TokenId>(gen.begin(), gen.begin() + static_cast<std::ptrdiff_t>(i) + 1);
    }
  }
  return gen;
}

// Line count of a reference middle: full newline-terminated lines, plus one
// for a trailing partial line. Chosen so truncating a correct generation at
// this count leaves it intact.
inline int reference_line_count(const std::vector<TokenId>& ref) {
  int newlines = 0;
  for (TokenId t : ref) newlines += t == Vocab::kNewline ? 1 : 0;
  const bool ends_nl = !ref.empty() && ref.back() == Vocab::kNewline;
  return std::max(1, newlines + (ends_nl ? 0 : 1));
}

struct TaskResult {
  std::string doc_id;
  bool ok = false;
  std::string error;  // nonempty iff !ok
  bool em_raw = false;
  bool em_post = false;
  double es_raw = 0.0;
  double es_post = 0.0;
  long stop_error = 0;  // |gen| - |ref|, raw generation, tokens
  bool hit_max = false;
};

struct EvalReport {
  std::vector<TaskResult> tasks;
  long n_ok = 0;
  long n_failed = 0;
  double em_raw = 0.0;   // means over ok tasks
  double em_post = 0.0;
  double es_raw = 0.0;
  double es_post = 0.0;
  double mean_stop_error = 0.0;
  double mean_abs_stop_error = 0.0;
  double hit_max_rate = 0.0;
  double concealment_gap() const { return em_post - em_raw; }
};

template <typename NextLogitsForTask>
EvalReport eval_suite_fn(NextLogitsForTask&& gen_for_task,
                         const std::vector<InfillTask>& tasks) {
  if (tasks.empty()) throw EvalError("eval_suite: empty task set");
  EvalReport report;
  report.tasks.reserve(tasks.size());
  double em_raw = 0, em_post = 0, es_raw = 0, es_post = 0;
  double stop = 0, stop_abs = 0, hit = 0;
  for (const auto& task : tasks) {
    TaskResult row;
    row.doc_id = task.doc_id;
    try {
      const GenResult gen = gen_for_task(task);
      const std::vector<TokenId> post =
          postprocess_line_truncate(gen.tokens, reference_line_count(task.middle));
      row.em_raw = exact_match(gen.tokens, task.middle);
      row.em_post = exact_match(post, task.middle);
      row.es_raw = edit_similarity(gen.tokens, task.middle);
      row.es_post = edit_similarity(post, task.middle);
      row.stop_error = static_cast<long>(gen.tokens.size()) -
                       static_cast<long>(task.middle.size());
      row.hit_max = gen.hit_max;
      row.ok = true;
    } catch (const HfimError& e) {
      row.ok = false;
      row.error = e.what();
    }
    if (row.ok) {
      report.n_ok += 1;
      em_raw += row.em_raw ? 1.0 : 0.0;
      em_post += row.em_post ? 1.0 : 0.0;
      es_raw += row.es_raw;
      es_post += row.es_post;
      stop += static_cast<double>(row.stop_error);
      stop_abs += std::abs(static_cast<double>(row.stop_error));
      hit += row.hit_max ? 1.0 : 0.0;
    } else {
      report.n_failed += 1;
    }
    report.tasks.push_back(std::move(row));
  }
  if (report.n_ok > 0) {
    const double n = static_cast<double>(report.n_ok);
    report.em_raw = em_raw / n;
    report.em_post = em_post / n;
    report.es_raw = es_raw / n;
    report.es_post = es_post / n;
    report.mean_stop_error = stop / n;
    report.mean_abs_stop_error = stop_abs / n;
    report.hit_max_rate = hit / n;
  }
  return report;
}

template <typename S>
EvalReport eval_suite(const ModelConfig& cfg, const ParamsT<S>& params,
                      const std::vector<InfillTask>& tasks, int max_new) {
  return eval_suite_fn(
      [&](const InfillTask& task) { return generate_infill(cfg, params, task, max_new); },
      tasks);
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& t : r.tasks) {
    nlohmann::json row{{"doc_id", t.doc_id}, {"ok", t.ok}};
    if (t.ok) {
      row["em_raw"] = t.em_raw;
      row["em_post"] = t.em_post;
      row["es_raw"] = t.es_raw;
      row["es_post"] = t.es_post;
      row["stop_error"] = t.stop_error;
      row["hit_max"] = t.hit_max;
    } else {
      row["error"] = t.error;
    }
    rows.push_back(std::move(row));
  }
  return nlohmann::json{{"n_ok", r.n_ok},
                        {"n_failed", r.n_failed},
                        {"em_raw", r.em_raw},
                        {"em_post", r.em_post},
                        {"es_raw", r.es_raw},
                        {"es_post", r.es_post},
                        {"mean_stop_error", r.mean_stop_error},
                        {"mean_abs_stop_error", r.mean_abs_stop_error},
                        {"hit_max_rate", r.hit_max_rate},
                        {"concealment_gap", r.concealment_gap()},
                        {"tasks", std::move(rows)}};
}

}  // namespace hfim
