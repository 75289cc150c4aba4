#include "xsalab/tokenizer.hpp"

#include <fstream>
#include <stdexcept>

namespace xsalab {

Tokenizer Tokenizer::bytes() { return Tokenizer{}; }

Tokenizer Tokenizer::from_vocab_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open vocab file: " + path);
  Tokenizer t;
  t.byte_level_ = false;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) t.tokens_.push_back(line);
  }
  if (t.tokens_.empty()) throw std::runtime_error("vocab file is empty: " + path);
  return t;
}

std::vector<int32_t> Tokenizer::encode(const std::string& text) const {
  std::vector<int32_t> ids;
  if (byte_level_) {
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int32_t>(c));
    return ids;
  }
  size_t pos = 0;
  while (pos < text.size()) {
    int32_t best = -1;
    size_t best_len = 0;
    for (size_t i = 0; i < tokens_.size(); ++i) {
      const std::string& tok = tokens_[i];
      if (tok.size() > best_len && text.compare(pos, tok.size(), tok) == 0) {
        best = static_cast<int32_t>(i);
        best_len = tok.size();
      }
    }
    if (best < 0)
      throw std::runtime_error("tokenizer: no vocab token matches input at byte " +
                               std::to_string(pos));
    ids.push_back(best);
    pos += best_len;
  }
  return ids;
}

std::string Tokenizer::decode(const std::vector<int32_t>& ids) const {
  std::string out;
  for (int32_t id : ids) {
    if (id < 0 || id >= vocab_size())
      throw std::runtime_error("tokenizer: id " + std::to_string(id) + " outside vocab");
    if (byte_level_)
      out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    else
      out += tokens_[static_cast<size_t>(id)];
  }
  return out;
}

}  // namespace xsalab
