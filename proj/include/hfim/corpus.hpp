#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hfim/errors.hpp"
#include "hfim/rng.hpp"
#include "hfim/vocab.hpp"

namespace hfim {

// A tokenized source file with line boundaries; the unit of corpus,
// splitting, and probing. Contains character ids only (no sentinels, no PAD).
struct Document {
  std::string doc_id;
  std::vector<TokenId> tokens;
  std::vector<int> line_starts;  // ascending, line_starts[0] == 0

  int length() const { return static_cast<int>(tokens.size()); }
};

struct GenParams {
  int max_depth = 2;   // nesting levels, >= 1
  int max_lines = 10;  // total lines per document, in [4, 12]
};

inline void validate(const GenParams& p) {
  if (p.max_depth < 1 || p.max_depth > 4)
    throw ConfigError("GenParams.max_depth must be in [1, 4]");
  if (p.max_lines < 4 || p.max_lines > 12)
    throw ConfigError("GenParams.max_lines must be in [4, 12]");
}

inline Document make_document(std::string doc_id, const std::string& text) {
  Document doc;
  doc.doc_id = std::move(doc_id);
  doc.tokens = tokenize(text);
  doc.line_starts.push_back(0);
  for (int p = 1; p < doc.length(); ++p) {
    if (doc.tokens[p - 1] == Vocab::kNewline) doc.line_starts.push_back(p);
  }
  return doc;
}

namespace detail {

// Deterministic nested-block program generator. All identifiers, literals,
// and references are fixed functions of the declaration counter and scope,
// so the only entropy is the block structure itself. Declaration lines are
// all distinct (names encode their order); counted accumulator runs step a
// variable upward for a declared number of lines, and every step invites
// one more — where a run ends is recoverable from the document, but only
// by holding the declared bound against the current step.
class ProgramWriter {
 public:
  ProgramWriter(Rng& rng, const GenParams& params) : rng_(rng), params_(params) {}

  std::string write() {
    const int total = static_cast<int>(rng_.uniform_int(4, params_.max_lines));
    block(0, total);
    return std::move(text_);
  }

 private:
  std::string fresh_name() {
    std::string name;
    int i = counter_++;
    name.push_back(static_cast<char>('a' + i % 26));
    while (i >= 26) {
      i = i / 26 - 1;
      name.insert(name.begin(), static_cast<char>('a' + i % 26));
    }
    return name;
  }

  char literal() {
    // digit derived from the declaration counter, not from the rng
    return static_cast<char>('0' + (counter_ * 7 + 3) % 10);
  }

  void indent(int depth) { text_.append(static_cast<std::size_t>(depth), ' '); }

  void let_line(int depth) {
    indent(depth);
    const char lit = literal();
    const std::string name = fresh_name();
    text_ += "let " + name + " = ";
    if (!lets_.empty()) {
      text_ += lets_.back() + " + ";
    }
    text_ += lit;
    text_ += ";\n";
    lets_.push_back(name);
    scope_sizes_.back()++;
  }

  // A counted accumulator: "let x = k;" followed by exactly k update lines
  // that count upward step by step. The declared digit pins the run length:
  // "let x = 3;" is followed by exactly "x = x + 1;", "x = x + 2;",
  // "x = x + 3;". Each step makes the next increment locally plausible, so
  // the only way to place the run's end is to recall the declared bound —
  // position within the run alone does not reveal how much remains.
  // (Bare-literal declarations cannot be confused with ordinary lets: every
  // ordinary let after the first links to the previous name, and the first
  // is always "= 0".)
  void update_run(int depth, int& remaining) {
    const int k = static_cast<int>(
        rng_.uniform_int(2, std::min<std::int64_t>(remaining - 1, 5)));
    const std::string name = fresh_name();
    indent(depth);
    text_ += "let " + name + " = ";
    text_ += static_cast<char>('0' + k);
    text_ += ";\n";
    for (int i = 0; i < k; ++i) {
      indent(depth);
      text_ += name + " = " + name + " + ";
      text_ += static_cast<char>('0' + i + 1);
      text_ += ";\n";
    }
    lets_.push_back(name);
    scope_sizes_.back()++;
    remaining -= k + 1;
  }

  // Emits a block spanning exactly `budget` lines (header, body, ret, brace).
  void block(int depth, int budget) {
    indent(depth);
    text_ += "fn " + fresh_name() + " {\n";
    scope_sizes_.push_back(0);

    int remaining = budget - 3;  // header, ret, closing brace
    let_line(depth + 1);
    --remaining;
    while (remaining > 0) {
      if (depth + 1 < params_.max_depth && remaining >= 4 && rng_.bernoulli(0.3)) {
        const int sub =
            static_cast<int>(rng_.uniform_int(4, std::min<std::int64_t>(remaining, 7)));
        block(depth + 1, sub);
        remaining -= sub;
      } else if (remaining >= 3 && rng_.bernoulli(0.5)) {
        update_run(depth + 1, remaining);
      } else {
        let_line(depth + 1);
        --remaining;
      }
    }

    indent(depth + 1);
    text_ += "ret " + lets_.back() + ";\n";
    indent(depth);
    text_ += "}\n";

    // names declared in this block go out of scope
    lets_.resize(lets_.size() - static_cast<std::size_t>(scope_sizes_.back()));
    scope_sizes_.pop_back();
  }

  Rng& rng_;
  const GenParams& params_;
  std::string text_;
  int counter_ = 0;
  std::vector<std::string> lets_;   // visible let names, innermost last
  std::vector<int> scope_sizes_;    // lets declared per open block
};

}  // namespace detail

inline std::string generate_program(Rng& rng, const GenParams& params) {
  return detail::ProgramWriter(rng, params).write();
}

// Pure function of (seed, n_docs, params); document i depends only on
// (seed, i), so generation shards cleanly.
inline std::vector<Document> generate_corpus(std::uint64_t seed, int n_docs,
                                             const GenParams& params = {}) {
  if (n_docs < 1) throw ConfigError("generate_corpus: n_docs must be >= 1");
  validate(params);
  std::vector<Document> docs;
  docs.reserve(static_cast<std::size_t>(n_docs));
  for (int i = 0; i < n_docs; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    const std::string text = generate_program(rng, params);
    docs.push_back(make_document(
        "s" + std::to_string(seed) + "-" + std::to_string(i), text));
  }
  return docs;
}

}  // namespace hfim
