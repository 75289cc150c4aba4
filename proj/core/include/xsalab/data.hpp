#pragma once

#include <fstream>

#include "xsalab/model.hpp"
#include "xsalab/rng.hpp"
#include "xsalab/tokenizer.hpp"

namespace xsalab {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return s;
}

enum class Split { kTrain, kVal };

/// Token stream with a contiguous tail reserved for validation.
struct Corpus {
  std::vector<int32_t> ids;
  int64_t val_begin = 0;  // ids[val_begin..) is the validation range

  int64_t train_len() const { return val_begin; }
  int64_t val_len() const { return static_cast<int64_t>(ids.size()) - val_begin; }
};

inline Corpus make_corpus(std::vector<int32_t> ids, double val_frac) {
  if (val_frac < 0 || val_frac >= 1) throw std::invalid_argument("val_frac must be in [0, 1)");
  Corpus c;
  c.ids = std::move(ids);
  const int64_t n = static_cast<int64_t>(c.ids.size());
  int64_t val = static_cast<int64_t>(std::ceil(val_frac * static_cast<double>(n)));
  if (val_frac == 0) val = 0;
  c.val_begin = n - val;
  return c;
}

inline Corpus load_corpus(const std::string& path, const Tokenizer& tok, double val_frac) {
  return make_corpus(tok.encode(read_file(path)), val_frac);
}

/// Samples random seq_len+1 windows (with replacement) from one split;
/// targets are inputs shifted by one. Deterministic per seed.
class BatchSampler {
 public:
  BatchSampler(const Corpus& corpus, Split split, int64_t seq_len, int64_t batch_size,
               uint64_t seed)
      : corpus_(&corpus), seq_len_(seq_len), batch_size_(batch_size), rng_(seed) {
    if (seq_len <= 0 || batch_size <= 0)
      throw std::invalid_argument("batch sampler: seq_len and batch_size must be positive");
    begin_ = split == Split::kTrain ? 0 : corpus.val_begin;
    const int64_t end = split == Split::kTrain ? corpus.val_begin
                                               : static_cast<int64_t>(corpus.ids.size());
    // a window consumes seq_len + 1 tokens
    n_offsets_ = end - begin_ - seq_len_;
    if (n_offsets_ < 1)
      throw std::runtime_error("corpus split too small: need more than " +
                               std::to_string(seq_len_ + 1) + " tokens, have " +
                               std::to_string(end - begin_));
  }

  /// One (inputs, targets) pair, both [batch, seq_len].
  std::pair<TokenBatch, TokenBatch> next() {
    TokenBatch in{batch_size_, seq_len_, {}};
    TokenBatch tgt{batch_size_, seq_len_, {}};
    in.ids.reserve(static_cast<size_t>(batch_size_ * seq_len_));
    tgt.ids.reserve(static_cast<size_t>(batch_size_ * seq_len_));
    for (int64_t b = 0; b < batch_size_; ++b) {
      const int64_t off = begin_ + static_cast<int64_t>(rng_.below(static_cast<uint64_t>(n_offsets_)));
      for (int64_t i = 0; i < seq_len_; ++i) {
        in.ids.push_back(corpus_->ids[static_cast<size_t>(off + i)]);
        tgt.ids.push_back(corpus_->ids[static_cast<size_t>(off + i + 1)]);
      }
    }
    return {std::move(in), std::move(tgt)};
  }

 private:
  const Corpus* corpus_;
  int64_t seq_len_, batch_size_;
  int64_t begin_ = 0, n_offsets_ = 0;
  Rng rng_;
};

}  // namespace xsalab
