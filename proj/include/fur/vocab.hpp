// Closed word-level vocabulary. One token per whitespace-delimited word,
// newline is its own token, round trips are exact.
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fur/common.hpp"

namespace fur {

struct UnknownToken : std::runtime_error {
  explicit UnknownToken(const std::string& word)
      : std::runtime_error("unknown token: '" + word + "'"), word(word) {}
  std::string word;
};

class Vocab {
 public:
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kBos = "<bos>";
  static constexpr std::string_view kEos = "<eos>";
  static constexpr std::string_view kNewline = "<nl>";

  Vocab() = default;

  // Words are deduplicated; specials always occupy ids 0..3.
  static Vocab build(const std::vector<std::string>& words) {
    Vocab v;
    v.add(std::string(kPad));
    v.add(std::string(kBos));
    v.add(std::string(kEos));
    v.add(std::string(kNewline));
    for (const auto& w : words) {
      if (w.empty()) continue;
      v.add(w);
    }
    return v;
  }

  TokenId pad() const { return 0; }
  TokenId bos() const { return 1; }
  TokenId eos() const { return 2; }
  TokenId newline() const { return 3; }

  int size() const { return static_cast<int>(tokens_.size()); }

  bool contains(std::string_view w) const {
    return id_of_.find(std::string(w)) != id_of_.end();
  }

  TokenId id(std::string_view w) const {
    auto it = id_of_.find(std::string(w));
    if (it == id_of_.end()) throw UnknownToken(std::string(w));
    return it->second;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  bool is_special(TokenId id) const { return id >= 0 && id <= 3; }

  // Splits on single spaces within lines and emits <nl> for every '\n'.
  Ids tokenize(std::string_view text) const {
    Ids out;
    std::size_t i = 0;
    std::string word;
    auto flush = [&]() {
      if (!word.empty()) {
        out.push_back(id(word));
        word.clear();
      }
    };
    for (; i < text.size(); ++i) {
      const char c = text[i];
      if (c == ' ') {
        flush();
      } else if (c == '\n') {
        flush();
        out.push_back(newline());
      } else {
        word.push_back(c);
      }
    }
    flush();
    return out;
  }

  // Inverse of tokenize for canonical text: words joined by single spaces,
  // <nl> rendered as '\n' with no surrounding spaces. <bos>/<eos>/<pad> are
  // dropped so decoded model output detokenizes cleanly.
  std::string detokenize(const Ids& ids) const {
    std::string out;
    bool at_boundary = true;  // start of string or just after a newline
    for (TokenId id : ids) {
      if (id == bos() || id == eos() || id == pad()) continue;
      if (id == newline()) {
        out.push_back('\n');
        at_boundary = true;
        continue;
      }
      if (!at_boundary) out.push_back(' ');
      out += token(id);
      at_boundary = false;
    }
    return out;
  }

 private:
  void add(const std::string& w) {
    if (id_of_.count(w)) return;
    id_of_.emplace(w, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(w);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> id_of_;
};

}  // namespace fur
