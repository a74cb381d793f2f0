#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace sedkit {

using TokenId = std::size_t;

/// Word-level split: runs of letters/digits (and any non-ASCII byte) form
/// words, each ASCII punctuation character is a token of its own, and
/// whitespace separates. ASCII letters are lower-cased.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (u >= 0x80 || (u >= '0' && u <= '9') || (u >= 'a' && u <= 'z')) {
      current.push_back(ch);
    } else if (u >= 'A' && u <= 'Z') {
      current.push_back(static_cast<char>(u - 'A' + 'a'));
    } else if (u == ' ' || u == '\t' || u == '\n' || u == '\r' || u == '\f' || u == '\v') {
      flush();
    } else if (u < 0x20 || u == 0x7f) {
      flush();
    } else {
      flush();
      words.emplace_back(1, ch);
    }
  }
  flush();
  return words;
}

/// Dense token-to-id map with reserved padding, unknown and mask ids.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kMask = 2;
  static constexpr std::size_t kReserved = 3;

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  /// Builds from a corpus keeping words seen at least `min_count` times,
  /// most frequent first (ties alphabetical), up to `max_size` ids total.
  static Vocabulary build(const std::vector<std::string>& corpus, std::size_t min_count = 1,
                          std::size_t max_size = 0) {
    std::map<std::string, std::size_t> counts;
    for (const auto& sentence : corpus)
      for (auto& w : split_words(sentence)) ++counts[w];
    std::vector<std::pair<std::string, std::size_t>> ranked;
    for (auto& [w, c] : counts)
      if (c >= min_count) ranked.emplace_back(w, c);
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> words;
    for (auto& [w, c] : ranked) {
      if (max_size && words.size() + kReserved >= max_size) break;
      words.push_back(w);
    }
    return Vocabulary(std::move(words));
  }

  /// Reconstructs from the full id-ordered token list including the reserved
  /// entries (the checkpoint layout).
  static Vocabulary from_id_order(const std::vector<std::string>& tokens) {
    if (tokens.size() < kReserved || tokens[kPad] != "[PAD]" || tokens[kUnk] != "[UNK]" ||
        tokens[kMask] != "[MASK]") {
      throw std::invalid_argument("vocabulary: reserved tokens missing or out of order");
    }
    return Vocabulary(std::vector<std::string>(tokens.begin() + kReserved, tokens.end()));
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  TokenId pad_id() const noexcept { return kPad; }
  TokenId unk_id() const noexcept { return kUnk; }
  TokenId mask_id() const noexcept { return kMask; }

  TokenId id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  /// Token ids for a sentence; empty text yields a single unknown id.
  std::vector<TokenId> tokenize(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& w : split_words(text)) ids.push_back(id(w));
    if (ids.empty()) ids.push_back(kUnk);
    return ids;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  explicit Vocabulary(std::vector<std::string> words) {
    tokens_ = {"[PAD]", "[UNK]", "[MASK]"};
    for (auto& w : words) {
      if (index_.count(w) || w == "[PAD]" || w == "[UNK]" || w == "[MASK]") {
        throw std::invalid_argument("vocabulary: duplicate token '" + w + "'");
      }
      index_.emplace(w, tokens_.size());
      tokens_.push_back(std::move(w));
    }
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace sedkit
