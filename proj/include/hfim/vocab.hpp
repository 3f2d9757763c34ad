#pragma once

#include <string>
#include <vector>

#include "hfim/errors.hpp"

namespace hfim {

using TokenId = int;

// Fixed character-level codec: 4 sentinels + PAD + printable ASCII + newline.
//
// id 0       PAD
// id 1..4    <pre> <suf> <mid> <eoi>
// id 5..99   printable ASCII 32..126  (id = codepoint - 32 + 5)
// id 100     newline
struct Vocab {
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kPre = 1;
  static constexpr TokenId kSuf = 2;
  static constexpr TokenId kMid = 3;
  static constexpr TokenId kEoi = 4;
  static constexpr TokenId kNewline = 100;
  static constexpr int kSize = 101;
  static constexpr TokenId kFirstChar = 5;  // ids 5..100 are character ids

  static bool is_sentinel(TokenId id) { return id >= kPre && id <= kEoi; }
  static bool is_char(TokenId id) { return id >= kFirstChar && id <= kNewline; }

  static TokenId char_to_id(char c) {
    if (c == '\n') return kNewline;
    const unsigned char u = static_cast<unsigned char>(c);
    if (u >= 32 && u <= 126) return static_cast<TokenId>(u) - 32 + kFirstChar;
    return -1;
  }

  static char id_to_char(TokenId id) {
    if (id == kNewline) return '\n';
    return static_cast<char>(id - kFirstChar + 32);
  }
};

inline std::vector<TokenId> tokenize(const std::string& text) {
  std::vector<TokenId> out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const TokenId id = Vocab::char_to_id(text[i]);
    if (id < 0) {
      throw CodecError("tokenize: unmappable byte 0x" +
                       std::to_string(static_cast<unsigned char>(text[i])) +
                       " at offset " + std::to_string(i));
    }
    out.push_back(id);
  }
  return out;
}

inline std::string detokenize(const std::vector<TokenId>& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const TokenId id = tokens[i];
    if (!Vocab::is_char(id)) {
      throw CodecError("detokenize: non-character id " + std::to_string(id) +
                       " at position " + std::to_string(i));
    }
    out.push_back(Vocab::id_to_char(id));
  }
  return out;
}

}  // namespace hfim
