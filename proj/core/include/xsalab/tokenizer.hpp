#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace xsalab {

/// Byte-level tokenizer (vocab 256) by default; optionally a custom vocab
/// from a newline-delimited token file, encoded by greedy longest-prefix
/// match.
class Tokenizer {
 public:
  static Tokenizer bytes();
  static Tokenizer from_vocab_file(const std::string& path);

  std::vector<int32_t> encode(const std::string& text) const;
  std::string decode(const std::vector<int32_t>& ids) const;
  int64_t vocab_size() const { return byte_level_ ? 256 : static_cast<int64_t>(tokens_.size()); }

 private:
  bool byte_level_ = true;
  std::vector<std::string> tokens_;
};

}  // namespace xsalab
