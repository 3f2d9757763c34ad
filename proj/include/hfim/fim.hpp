#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hfim/corpus.hpp"
#include "hfim/errors.hpp"
#include "hfim/rng.hpp"
#include "hfim/vocab.hpp"

namespace hfim {

enum class Role : std::uint8_t { Sentinel, Prefix, Suffix, Middle, Body };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::Sentinel: return "S";
    case Role::Prefix: return "PFX";
    case Role::Suffix: return "SFX";
    case Role::Middle: return "MID";
    case Role::Body: return "BODY";
  }
  return "?";
}

// Which positions carry the horizon target and what value they get.
//
// Eq3Literal: the t-th middle token carries (M-t)/M, so the final middle
// token (whose next prediction is <eoi>) carries 0.
// IncludeNext: (M-t+1)/M sits on the position whose *next* prediction is the
// t-th middle token, i.e. the <mid> sentinel plus middle tokens 1..M-1; the
// maximum target is then exactly 1.
enum class HlpConvention { Eq3Literal, IncludeNext };

inline const char* convention_name(HlpConvention c) {
  return c == HlpConvention::Eq3Literal ? "eq3_literal" : "include_next";
}

inline HlpConvention parse_convention(const std::string& s) {
  if (s == "eq3_literal") return HlpConvention::Eq3Literal;
  if (s == "include_next") return HlpConvention::IncludeNext;
  throw ConfigError("unknown hlp convention: " + s);
}

struct FimSplit {
  int prefix_len = 0;  // P
  int middle_len = 0;  // M

  bool valid_for(int doc_len) const {
    return prefix_len >= 1 && middle_len >= 1 &&
           prefix_len + middle_len <= doc_len - 1;
  }
};

// One training sequence. FIM-formatted instances are the PSM reordering
//   <pre> prefix <suf> suffix <mid> middle <eoi>        (length T+4);
// L2R-formatted instances are the document plus a trailing <eoi> (length T+1).
struct FimInstance {
  std::vector<TokenId> tokens;
  std::vector<Role> roles;
  std::vector<TokenId> ntp_target;    // tokens[i+1]; PAD at the final position
  std::vector<float> hlp_fim_target;  // valid where hlp_fim_mask
  std::vector<std::uint8_t> hlp_fim_mask;
  std::vector<float> hlp_l2r_target;  // valid where hlp_l2r_mask
  std::vector<std::uint8_t> hlp_l2r_mask;
  std::string source_doc_id;
  std::optional<FimSplit> split;
  bool is_fim = false;

  int length() const { return static_cast<int>(tokens.size()); }
};

struct Batch {
  std::vector<FimInstance> items;

  int size() const { return static_cast<int>(items.size()); }
  int max_len() const {
    int m = 0;
    for (const auto& it : items) m = std::max(m, it.length());
    return m;
  }
  // Right-padded view; PAD beyond each instance's true length.
  TokenId token_at(int b, int t) const {
    const auto& it = items[static_cast<std::size_t>(b)];
    return t < it.length() ? it.tokens[static_cast<std::size_t>(t)] : Vocab::kPad;
  }
};

// P ~ U[1, T-2], M ~ U[1, T-P-1]; prefix, middle, and suffix are all nonempty.
inline FimSplit split_document(const Document& doc, Rng& rng) {
  const int t = doc.length();
  if (t < 8) {
    throw PipelineError("split_document: document " + doc.doc_id +
                        " has fewer than 8 tokens");
  }
  FimSplit s;
  s.prefix_len = static_cast<int>(rng.uniform_int(1, t - 2));
  s.middle_len = static_cast<int>(rng.uniform_int(1, t - s.prefix_len - 1));
  return s;
}

// Normalized remaining-horizon targets for a middle of M tokens:
// y_t = (M - t) / M for t = 1..M.
inline std::vector<double> hlp_targets(const FimSplit& split) {
  const int m = split.middle_len;
  std::vector<double> y(static_cast<std::size_t>(m));
  for (int t = 1; t <= m; ++t) {
    y[static_cast<std::size_t>(t - 1)] = static_cast<double>(m - t) / m;
  }
  return y;
}

// Per-line analogue used by the L2R head: a token at 1-based offset k within
// a line of L tokens carries (L - k) / L. The newline is its line's final
// token. Every document token is masked in.
inline std::vector<double> l2r_line_targets(const Document& doc) {
  if (doc.line_starts.empty() || doc.line_starts[0] != 0) {
    throw PipelineError("l2r_line_targets: document has invalid line_starts");
  }
  const int t_len = doc.length();
  std::vector<double> y(static_cast<std::size_t>(t_len));
  const int n_lines = static_cast<int>(doc.line_starts.size());
  for (int li = 0; li < n_lines; ++li) {
    const int start = doc.line_starts[static_cast<std::size_t>(li)];
    const int end = li + 1 < n_lines ? doc.line_starts[static_cast<std::size_t>(li + 1)]
                                     : t_len;
    const int line_len = end - start;
    for (int k = 1; k <= line_len; ++k) {
      y[static_cast<std::size_t>(start + k - 1)] =
          static_cast<double>(line_len - k) / line_len;
    }
  }
  return y;
}

namespace detail {

inline void fill_ntp_targets(FimInstance& inst) {
  const int n = inst.length();
  inst.ntp_target.resize(static_cast<std::size_t>(n));
  for (int i = 0; i + 1 < n; ++i) {
    inst.ntp_target[static_cast<std::size_t>(i)] =
        inst.tokens[static_cast<std::size_t>(i + 1)];
  }
  inst.ntp_target[static_cast<std::size_t>(n - 1)] = Vocab::kPad;
}

}  // namespace detail

// Eq-(1)-style PSM reordering with roles, NTP targets, and horizon targets.
inline FimInstance reorder_psm(const Document& doc, const FimSplit& split,
                               HlpConvention convention = HlpConvention::Eq3Literal) {
  if (!split.valid_for(doc.length())) {
    throw PipelineError("reorder_psm: split (P=" + std::to_string(split.prefix_len) +
                        ", M=" + std::to_string(split.middle_len) +
                        ") invalid for document of length " +
                        std::to_string(doc.length()));
  }
  const int t_len = doc.length();
  const int p = split.prefix_len;
  const int m = split.middle_len;
  const int s = t_len - p - m;

  FimInstance inst;
  inst.source_doc_id = doc.doc_id;
  inst.split = split;
  inst.is_fim = true;
  const int n = t_len + 4;
  inst.tokens.reserve(static_cast<std::size_t>(n));
  inst.roles.reserve(static_cast<std::size_t>(n));

  auto push = [&inst](TokenId id, Role role) {
    inst.tokens.push_back(id);
    inst.roles.push_back(role);
  };
  push(Vocab::kPre, Role::Sentinel);
  for (int i = 0; i < p; ++i)
    push(doc.tokens[static_cast<std::size_t>(i)], Role::Prefix);
  push(Vocab::kSuf, Role::Sentinel);
  for (int i = p + m; i < t_len; ++i)
    push(doc.tokens[static_cast<std::size_t>(i)], Role::Suffix);
  push(Vocab::kMid, Role::Sentinel);
  for (int i = p; i < p + m; ++i)
    push(doc.tokens[static_cast<std::size_t>(i)], Role::Middle);
  push(Vocab::kEoi, Role::Sentinel);

  detail::fill_ntp_targets(inst);

  inst.hlp_fim_target.assign(static_cast<std::size_t>(n), 0.0f);
  inst.hlp_fim_mask.assign(static_cast<std::size_t>(n), 0);
  inst.hlp_l2r_target.assign(static_cast<std::size_t>(n), 0.0f);
  inst.hlp_l2r_mask.assign(static_cast<std::size_t>(n), 0);

  const int mid_sentinel = 1 + p + 1 + s;  // position of <mid>
  const int mid_start = mid_sentinel + 1;  // first middle token
  if (convention == HlpConvention::Eq3Literal) {
    const auto y = hlp_targets(split);
    for (int t = 1; t <= m; ++t) {
      const int pos = mid_start + t - 1;
      inst.hlp_fim_mask[static_cast<std::size_t>(pos)] = 1;
      inst.hlp_fim_target[static_cast<std::size_t>(pos)] =
          static_cast<float>(y[static_cast<std::size_t>(t - 1)]);
    }
  } else {
    // (M-t+1)/M on the position whose next prediction is middle token t
    for (int t = 1; t <= m; ++t) {
      const int pos = mid_sentinel + t - 1;
      inst.hlp_fim_mask[static_cast<std::size_t>(pos)] = 1;
      inst.hlp_fim_target[static_cast<std::size_t>(pos)] =
          static_cast<float>(static_cast<double>(m - t + 1) / m);
    }
  }
  return inst;
}

// Document tokens plus a trailing <eoi>; per-line horizon targets on every
// document position for the L2R head.
inline FimInstance format_l2r(const Document& doc) {
  FimInstance inst;
  inst.source_doc_id = doc.doc_id;
  inst.is_fim = false;
  const int t_len = doc.length();
  const int n = t_len + 1;
  inst.tokens = doc.tokens;
  inst.tokens.push_back(Vocab::kEoi);
  inst.roles.assign(static_cast<std::size_t>(t_len), Role::Body);
  inst.roles.push_back(Role::Sentinel);

  detail::fill_ntp_targets(inst);

  inst.hlp_fim_target.assign(static_cast<std::size_t>(n), 0.0f);
  inst.hlp_fim_mask.assign(static_cast<std::size_t>(n), 0);
  inst.hlp_l2r_target.assign(static_cast<std::size_t>(n), 0.0f);
  inst.hlp_l2r_mask.assign(static_cast<std::size_t>(n), 0);
  const auto y = l2r_line_targets(doc);
  for (int i = 0; i < t_len; ++i) {
    inst.hlp_l2r_mask[static_cast<std::size_t>(i)] = 1;
    inst.hlp_l2r_target[static_cast<std::size_t>(i)] =
        static_cast<float>(y[static_cast<std::size_t>(i)]);
  }
  return inst;
}

// Each document is independently FIM-formatted with probability fim_rate,
// else L2R-formatted. Instances keep input order.
inline Batch make_batch(const std::vector<Document>& docs, double fim_rate,
                        Rng& rng, int max_seq,
                        HlpConvention convention = HlpConvention::Eq3Literal) {
  Batch batch;
  batch.items.reserve(docs.size());
  for (const auto& doc : docs) {
    if (doc.length() + 4 > max_seq) {
      throw PipelineError("make_batch: document " + doc.doc_id + " of length " +
                          std::to_string(doc.length()) +
                          " does not fit max_seq=" + std::to_string(max_seq));
    }
    if (rng.bernoulli(fim_rate)) {
      const FimSplit split = split_document(doc, rng);
      batch.items.push_back(reorder_psm(doc, split, convention));
    } else {
      batch.items.push_back(format_l2r(doc));
    }
  }
  return batch;
}

// Inverse of reorder_psm: prefix + middle + suffix in original order.
inline std::vector<TokenId> reconstruct_original(const FimInstance& inst) {
  if (!inst.is_fim) throw PipelineError("reconstruct_original: not a FIM instance");
  const int n = inst.length();
  // sentinel sequence must be exactly <pre> ... <suf> ... <mid> ... <eoi>
  std::vector<TokenId> sentinels;
  for (int i = 0; i < n; ++i) {
    if (inst.roles[static_cast<std::size_t>(i)] == Role::Sentinel) {
      sentinels.push_back(inst.tokens[static_cast<std::size_t>(i)]);
    }
  }
  const std::vector<TokenId> expected = {Vocab::kPre, Vocab::kSuf, Vocab::kMid,
                                         Vocab::kEoi};
  if (sentinels != expected) {
    throw PipelineError("reconstruct_original: malformed sentinel structure");
  }
  std::vector<TokenId> prefix, middle, suffix;
  for (int i = 0; i < n; ++i) {
    const TokenId tok = inst.tokens[static_cast<std::size_t>(i)];
    switch (inst.roles[static_cast<std::size_t>(i)]) {
      case Role::Prefix: prefix.push_back(tok); break;
      case Role::Middle: middle.push_back(tok); break;
      case Role::Suffix: suffix.push_back(tok); break;
      case Role::Sentinel: break;
      case Role::Body:
        throw PipelineError("reconstruct_original: BODY role in FIM instance");
    }
  }
  std::vector<TokenId> out;
  out.reserve(prefix.size() + middle.size() + suffix.size());
  out.insert(out.end(), prefix.begin(), prefix.end());
  out.insert(out.end(), middle.begin(), middle.end());
  out.insert(out.end(), suffix.begin(), suffix.end());
  return out;
}

}  // namespace hfim
