#include "pairaug/tokenizer.hpp"

#include <sstream>

#include "pairaug/common.hpp"
#include "pairaug/corpus.hpp"

namespace pairaug::text {

Tokenizer::Tokenizer() {
  words_ = {"<pad>", "<unk>", "."};
  for (const auto& w : corpus::grammar_words()) words_.push_back(w);
  for (size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int32_t>(i);
  PAIRAUG_CHECK(index_.size() == words_.size(), StateError, "duplicate words in vocabulary");
}

int32_t Tokenizer::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<int32_t> Tokenizer::encode(const std::string& text, int max_len) const {
  PAIRAUG_VALIDATE(max_len > 0, "encode: max_len must be positive");
  std::vector<int32_t> ids;
  ids.reserve(static_cast<size_t>(max_len));
  std::istringstream in(text);
  std::string w;
  while (in >> w && static_cast<int>(ids.size()) < max_len) ids.push_back(id(w));
  ids.resize(static_cast<size_t>(max_len), kPad);
  return ids;
}

std::vector<uint8_t> Tokenizer::valid_mask(const std::vector<int32_t>& ids) {
  std::vector<uint8_t> mask(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) mask[i] = ids[i] != kPad ? 1 : 0;
  return mask;
}

}  // namespace pairaug::text
