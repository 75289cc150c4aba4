#pragma once

#include <span>

#include "xsalab/attention.hpp"
#include "xsalab/rng.hpp"

namespace xsalab {

struct ModelConfig {
  int64_t n_layers = 2;
  int64_t d_model = 64;
  int64_t n_heads = 4;
  int64_t d_head = 16;
  int64_t vocab_size = 256;
  int64_t max_seq_len = 128;
  AttnMode mode = AttnMode::kSA;
  int64_t n_sinks = 0;
  int64_t ffn_mult = 4;
  bool tie_embeddings = true;
  double rope_theta = 10000.0;
  double rejection_eps = 1e-12;
  uint64_t init_seed = 1;

  void validate() const {
    if (n_layers <= 0 || d_model <= 0 || vocab_size <= 0 || max_seq_len <= 0 || ffn_mult <= 0)
      throw std::invalid_argument("model config: dims must be positive");
    attention_config().validate();
  }

  AttentionConfig attention_config() const {
    return AttentionConfig{d_model, n_heads, d_head, mode, rope_theta, n_sinks, rejection_eps};
  }
};

inline constexpr double kLayerNormEps = 1e-5;

/// Parameters of one attention + FFN block, excluding the embedding stack.
/// Everything here is counted by nonembedding_param_count.
template <class S>
struct BlockT {
  TensorT<S> ln1_gain, ln1_bias;
  AttentionWeightsT<S> attn;
  TensorT<S> ln2_gain, ln2_bias;
  TensorT<S> ffn_w1;  // [d_model, ffn_mult * d_model]
  TensorT<S> ffn_w2;  // [ffn_mult * d_model, d_model]
};

template <class S>
struct TraceT {
  std::vector<LayerTraceT<S>> layers;
};

template <class S>
struct Param {
  std::string name;
  TensorT<S> tensor;
  bool decay = false;  // AdamW weight decay applies only to matmul weights
};

/// Token ids arranged [batch, seq]; ids stored row-major.
struct TokenBatch {
  int64_t batch = 0;
  int64_t seq_len = 0;
  std::vector<int32_t> ids;
};

/// Pre-LN residual block: x + attn(LN(x)); then x + FFN(LN(x)).
template <class S>
TensorT<S> block_forward(const TensorT<S>& x, const BlockT<S>& blk, const AttentionConfig& cfg,
                         LayerTraceT<S>* trace = nullptr, bool trace_rows = false) {
  TensorT<S> h = add(x, attend(layernorm(x, blk.ln1_gain, blk.ln1_bias, static_cast<S>(kLayerNormEps)),
                               blk.attn, cfg, trace, trace_rows));
  TensorT<S> f = layernorm(h, blk.ln2_gain, blk.ln2_bias, static_cast<S>(kLayerNormEps));
  f = matmul(gelu(matmul(f, blk.ffn_w1)), blk.ffn_w2);
  return add(h, f);
}

template <class S>
TensorT<S> normal_init(Rng& rng, Shape shape, S stddev) {
  TensorT<S> t = TensorT<S>::zeros(std::move(shape));
  for (S& x : *t.data) x = static_cast<S>(rng.normal()) * stddev;
  t.set_requires_grad(true);
  return t;
}

template <class S>
TensorT<S> ones_param(Shape shape) {
  TensorT<S> t = TensorT<S>::full(std::move(shape), S(1));
  t.set_requires_grad(true);
  return t;
}

template <class S>
TensorT<S> zeros_param(Shape shape) {
  TensorT<S> t = TensorT<S>::zeros(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

/// Standalone randomly initialized block (benchmark fixture and tests).
template <class S>
BlockT<S> make_random_block(int64_t d_model, int64_t n_heads, int64_t d_head, int64_t ffn_mult,
                            uint64_t seed) {
  Rng rng(seed);
  const int64_t hd = n_heads * d_head;
  BlockT<S> blk;
  blk.ln1_gain = ones_param<S>({d_model});
  blk.ln1_bias = zeros_param<S>({d_model});
  blk.attn.wq = normal_init(rng, {d_model, hd}, S(0.02));
  blk.attn.wk = normal_init(rng, {d_model, hd}, S(0.02));
  blk.attn.wv = normal_init(rng, {d_model, hd}, S(0.02));
  blk.attn.wo = normal_init(rng, {hd, d_model}, S(0.02));
  blk.ln2_gain = ones_param<S>({d_model});
  blk.ln2_bias = zeros_param<S>({d_model});
  blk.ffn_w1 = normal_init(rng, {d_model, ffn_mult * d_model}, S(0.02));
  blk.ffn_w2 = normal_init(rng, {ffn_mult * d_model, d_model}, S(0.02));
  return blk;
}

/// Closed-form count of trainable parameters outside the embedding table
/// (and outside the tied/untied logits head).
inline int64_t nonembedding_param_count(const ModelConfig& cfg) {
  const int64_t hd = cfg.n_heads * cfg.d_head;
  const int64_t ffn = cfg.ffn_mult * cfg.d_model;
  const int64_t per_block = 3 * cfg.d_model * hd  // wq, wk, wv
                            + hd * cfg.d_model    // wo
                            + 2 * cfg.d_model * ffn  // ffn in/out
                            + 4 * cfg.d_model;       // two LayerNorms
  return cfg.n_layers * per_block + 2 * cfg.d_model  // post-embedding LN
         + 2 * cfg.d_model                           // final LN
         + cfg.n_sinks * cfg.d_model;                // learned sink embeddings
}

/// Decoder-only LM: embed -> LN -> n_layers pre-LN blocks -> LN -> logits.
/// Optional learned sink tokens are prepended before the first block and
/// stripped from the returned logits.
template <class S>
class ModelT {
 public:
  static ModelT build(const ModelConfig& cfg) {
    cfg.validate();
    ModelT m;
    m.cfg_ = cfg;
    Rng rng(cfg.init_seed);
    const int64_t hd = cfg.n_heads * cfg.d_head;
    const S resid_std = static_cast<S>(0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers)));

    m.embed_ = normal_init(rng, {cfg.vocab_size, cfg.d_model}, S(0.02));
    if (cfg.n_sinks > 0) m.sinks_ = normal_init(rng, {cfg.n_sinks, cfg.d_model}, S(0.02));
    m.post_ln_gain_ = ones_param<S>({cfg.d_model});
    m.post_ln_bias_ = zeros_param<S>({cfg.d_model});
    m.blocks_.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& blk : m.blocks_) {
      blk.ln1_gain = ones_param<S>({cfg.d_model});
      blk.ln1_bias = zeros_param<S>({cfg.d_model});
      blk.attn.wq = normal_init(rng, {cfg.d_model, hd}, S(0.02));
      blk.attn.wk = normal_init(rng, {cfg.d_model, hd}, S(0.02));
      blk.attn.wv = normal_init(rng, {cfg.d_model, hd}, S(0.02));
      blk.attn.wo = normal_init(rng, {hd, cfg.d_model}, resid_std);
      blk.ln2_gain = ones_param<S>({cfg.d_model});
      blk.ln2_bias = zeros_param<S>({cfg.d_model});
      blk.ffn_w1 = normal_init(rng, {cfg.d_model, cfg.ffn_mult * cfg.d_model}, S(0.02));
      blk.ffn_w2 = normal_init(rng, {cfg.ffn_mult * cfg.d_model, cfg.d_model}, resid_std);
    }
    m.final_ln_gain_ = ones_param<S>({cfg.d_model});
    m.final_ln_bias_ = zeros_param<S>({cfg.d_model});
    if (!cfg.tie_embeddings) m.head_ = normal_init(rng, {cfg.d_model, cfg.vocab_size}, S(0.02));
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<BlockT<S>>& blocks() { return blocks_; }
  const std::vector<BlockT<S>>& blocks() const { return blocks_; }

  /// Logits [B, T, vocab]. Sink rows never appear in the output.
  TensorT<S> forward(const TokenBatch& batch, TraceT<S>* trace = nullptr,
                     bool trace_rows = false) const {
    if (batch.batch <= 0 || batch.seq_len <= 0)
      throw std::invalid_argument("forward: empty batch");
    if (batch.seq_len > cfg_.max_seq_len)
      throw std::invalid_argument("forward: sequence of " + std::to_string(batch.seq_len) +
                                  " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    if (static_cast<int64_t>(batch.ids.size()) != batch.batch * batch.seq_len)
      throw std::invalid_argument("forward: id count does not match batch x seq");

    const int64_t b = batch.batch, t = batch.seq_len, k = cfg_.n_sinks;
    TensorT<S> h = reshape(embedding(embed_, batch.ids), {b, t, cfg_.d_model});
    if (k > 0) h = concat(tile_leading(sinks_, b), h, 1);  // [B, k+T, d]
    h = layernorm(h, post_ln_gain_, post_ln_bias_, static_cast<S>(kLayerNormEps));

    const AttentionConfig acfg = cfg_.attention_config();
    if (trace) trace->layers.assign(static_cast<size_t>(cfg_.n_layers), {});
    for (size_t i = 0; i < blocks_.size(); ++i)
      h = block_forward(h, blocks_[i], acfg, trace ? &trace->layers[i] : nullptr, trace_rows);

    h = layernorm(h, final_ln_gain_, final_ln_bias_, static_cast<S>(kLayerNormEps));
    if (k > 0) h = slice(h, 1, k, t);
    return cfg_.tie_embeddings ? matmul(h, transpose(embed_, 0, 1)) : matmul(h, head_);
  }

  /// Single-sequence convenience: logits [T, vocab].
  TensorT<S> forward(std::span<const int32_t> tokens, TraceT<S>* trace = nullptr) const {
    TokenBatch batch{1, static_cast<int64_t>(tokens.size()),
                     std::vector<int32_t>(tokens.begin(), tokens.end())};
    TensorT<S> logits = forward(batch, trace);
    return reshape(logits, {batch.seq_len, cfg_.vocab_size});
  }

  /// Autoregressive sampling; temperature 0 means greedy argmax. Deterministic
  /// for a fixed seed. The context window slides once generation passes
  /// max_seq_len.
  std::vector<int32_t> sample(std::span<const int32_t> prompt, int64_t n_new, double temperature,
                              uint64_t seed) const {
    if (temperature < 0) throw std::invalid_argument("sample: temperature must be >= 0");
    if (prompt.empty()) throw std::invalid_argument("sample: empty prompt");
    if (static_cast<int64_t>(prompt.size()) > cfg_.max_seq_len)
      throw std::invalid_argument("sample: prompt longer than max_seq_len");
    NoGradScope<S> ng;
    Rng rng(seed);
    std::vector<int32_t> ids(prompt.begin(), prompt.end());
    for (int64_t step = 0; step < n_new; ++step) {
      const int64_t ctx = std::min<int64_t>(static_cast<int64_t>(ids.size()), cfg_.max_seq_len);
      std::span<const int32_t> window(ids.data() + ids.size() - static_cast<size_t>(ctx),
                                      static_cast<size_t>(ctx));
      TensorT<S> logits = forward(window);
      const S* row = logits.ptr() + (ctx - 1) * cfg_.vocab_size;
      ids.push_back(sample_from_logits(row, cfg_.vocab_size, temperature, rng));
    }
    return ids;
  }

  /// Parameter registry; order is the checkpoint blob order.
  std::vector<Param<S>> parameters() const {
    std::vector<Param<S>> ps;
    ps.push_back({"embed.weight", embed_, false});
    if (cfg_.n_sinks > 0) ps.push_back({"sinks.weight", sinks_, false});
    ps.push_back({"post_ln.gain", post_ln_gain_, false});
    ps.push_back({"post_ln.bias", post_ln_bias_, false});
    for (size_t i = 0; i < blocks_.size(); ++i) {
      const std::string p = "block" + std::to_string(i) + ".";
      ps.push_back({p + "ln1.gain", blocks_[i].ln1_gain, false});
      ps.push_back({p + "ln1.bias", blocks_[i].ln1_bias, false});
      ps.push_back({p + "attn.wq", blocks_[i].attn.wq, true});
      ps.push_back({p + "attn.wk", blocks_[i].attn.wk, true});
      ps.push_back({p + "attn.wv", blocks_[i].attn.wv, true});
      ps.push_back({p + "attn.wo", blocks_[i].attn.wo, true});
      ps.push_back({p + "ln2.gain", blocks_[i].ln2_gain, false});
      ps.push_back({p + "ln2.bias", blocks_[i].ln2_bias, false});
      ps.push_back({p + "ffn.w1", blocks_[i].ffn_w1, true});
      ps.push_back({p + "ffn.w2", blocks_[i].ffn_w2, true});
    }
    ps.push_back({"final_ln.gain", final_ln_gain_, false});
    ps.push_back({"final_ln.bias", final_ln_bias_, false});
    if (!cfg_.tie_embeddings) ps.push_back({"head.weight", head_, true});
    return ps;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  /// Same weights at a different precision (e.g. float checkpoint probed in
  /// double).
  template <class T2>
  ModelT<T2> cast() const {
    ModelT<T2> out = ModelT<T2>::build(cfg_);
    auto src = parameters();
    auto dst = out.parameters();
    for (size_t i = 0; i < src.size(); ++i) {
      const auto& sv = *src[i].tensor.data;
      auto& dv = *dst[i].tensor.data;
      for (size_t j = 0; j < sv.size(); ++j) dv[j] = static_cast<T2>(sv[j]);
    }
    return out;
  }

 private:
  static int32_t sample_from_logits(const S* row, int64_t vocab, double temperature, Rng& rng) {
    if (temperature == 0.0) {
      int64_t best = 0;
      for (int64_t j = 1; j < vocab; ++j)
        if (row[j] > row[best]) best = j;
      return static_cast<int32_t>(best);
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < vocab; ++j)
      mx = std::max(mx, static_cast<double>(row[j]) / temperature);
    std::vector<double> p(static_cast<size_t>(vocab));
    double sum = 0.0;
    for (int64_t j = 0; j < vocab; ++j) {
      p[static_cast<size_t>(j)] = std::exp(static_cast<double>(row[j]) / temperature - mx);
      sum += p[static_cast<size_t>(j)];
    }
    double u = rng.uniform() * sum;
    for (int64_t j = 0; j < vocab; ++j) {
      u -= p[static_cast<size_t>(j)];
      if (u <= 0.0) return static_cast<int32_t>(j);
    }
    return static_cast<int32_t>(vocab - 1);
  }

  template <class T2>
  friend class ModelT;

  ModelConfig cfg_;
  TensorT<S> embed_, sinks_;
  TensorT<S> post_ln_gain_, post_ln_bias_;
  std::vector<BlockT<S>> blocks_;
  TensorT<S> final_ln_gain_, final_ln_bias_;
  TensorT<S> head_;  // only when untied
};

using Model = ModelT<float>;

}  // namespace xsalab
