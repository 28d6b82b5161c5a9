#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace pairaug::text {

/// Fixed token count used for padded report encodings. Reports cap at 50
/// words plus one "." per sentence, which fits in 64 tokens.
inline constexpr int kMaxTokens = 64;

/// Word-level tokenizer over the closed report grammar. Ids 0 and 1 are
/// reserved for padding and unknown words; "." is a regular token.
class Tokenizer {
 public:
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kUnk = 1;

  Tokenizer();

  int32_t vocab_size() const { return static_cast<int32_t>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  int32_t id(const std::string& word) const;
  bool in_vocab(const std::string& word) const { return index_.count(word) > 0; }

  /// Splits on whitespace, maps to ids, truncates to max_len and pads with
  /// kPad. Empty text encodes to an all-padding sequence.
  std::vector<int32_t> encode(const std::string& text, int max_len = kMaxTokens) const;

  /// One byte per id: 1 where the token is not padding.
  static std::vector<uint8_t> valid_mask(const std::vector<int32_t>& ids);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int32_t> index_;
};

}  // namespace pairaug::text
