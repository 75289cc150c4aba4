#pragma once

#include <cctype>
#include <optional>
#include <string>

#include "xsalab/ops.hpp"

namespace xsalab {

enum class AttnMode { kSA, kXSA };

inline std::string mode_name(AttnMode m) { return m == AttnMode::kSA ? "sa" : "xsa"; }

inline AttnMode mode_from_name(const std::string& s) {
  std::string t;
  for (char c : s) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (t == "sa") return AttnMode::kSA;
  if (t == "xsa") return AttnMode::kXSA;
  throw std::invalid_argument("unknown attention mode '" + s + "' (expected sa or xsa)");
}

struct AttentionConfig {
  int64_t d_model = 0;
  int64_t n_heads = 0;
  int64_t d_head = 0;  // may differ from d_model / n_heads
  AttnMode mode = AttnMode::kSA;
  double rope_theta = 10000.0;
  int64_t n_sinks = 0;
  double rejection_eps = 1e-12;

  void validate() const {
    if (d_model <= 0 || n_heads <= 0 || d_head <= 0)
      throw std::invalid_argument("attention config: dims must be positive");
    if (d_head % 2 != 0)
      throw std::invalid_argument("attention config: d_head must be even for rotary embedding");
    if (n_sinks < 0) throw std::invalid_argument("attention config: n_sinks must be >= 0");
    if (rejection_eps <= 0)
      throw std::invalid_argument("attention config: rejection_eps must be positive");
    if (rope_theta <= 0) throw std::invalid_argument("attention config: rope_theta must be positive");
  }
};

template <class S>
struct AttentionWeightsT {
  TensorT<S> wq, wk, wv;  // [d_model, n_heads * d_head]
  TensorT<S> wo;          // [n_heads * d_head, d_model]
};

/// Per-layer capture for the similarity probe: value vectors, pre- and
/// post-rejection outputs, the attention diagonal, and (opt-in) full rows.
template <class S>
struct LayerTraceT {
  TensorT<S> v;     // [B, H, T, d_head]
  TensorT<S> y;     // [B, H, T, d_head] pre-rejection
  TensorT<S> out;   // [B, H, T, d_head] what feeds W_o (== y in SA mode)
  TensorT<S> diag;  // [B, H, T]
  TensorT<S> rows;  // [B, H, T, T] only when full capture requested
  bool has_rows = false;
};

struct TraceOptions {
  bool enabled = false;
  bool full_rows = false;
};

namespace detail {

template <class S>
TensorT<S> detach_diag(const TensorT<S>& probs) {
  const int64_t b = probs.dim(0), h = probs.dim(1), t = probs.dim(2);
  TensorT<S> d = TensorT<S>::zeros({b, h, t});
  const S* p = probs.ptr();
  S* q = d.ptr();
  for (int64_t i = 0; i < b * h; ++i)
    for (int64_t j = 0; j < t; ++j) q[i * t + j] = p[(i * t + j) * t + j];
  return d;
}

}  // namespace detail

/// Multi-head causal attention over x[B,T,d_model] (or [T,d_model]).
/// SA mode projects the softmax-weighted value mix straight through W_o;
/// XSA mode first strips each position's output of its own-value direction.
template <class S>
TensorT<S> attend(const TensorT<S>& x, const AttentionWeightsT<S>& w, const AttentionConfig& cfg,
                  LayerTraceT<S>* trace = nullptr, bool trace_rows = false) {
  cfg.validate();
  const bool flat = x.rank() == 2;
  TensorT<S> xb = flat ? reshape(x, {1, x.dim(0), x.dim(1)}) : x;
  if (xb.rank() != 3 || xb.dim(2) != cfg.d_model)
    throw std::invalid_argument("attend: expected [batch, seq, d_model] input, got " +
                                shape_str(x.shape));
  const int64_t b = xb.dim(0), t = xb.dim(1), hd = cfg.n_heads * cfg.d_head;
  if (t < 1) throw std::invalid_argument("attend: empty sequence");

  auto split_heads = [&](const TensorT<S>& m) {
    return transpose(reshape(m, {b, t, cfg.n_heads, cfg.d_head}), 1, 2);  // [B,H,T,dh]
  };
  std::vector<int64_t> positions(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i) positions[static_cast<size_t>(i)] = i;

  // intermediates are dropped as soon as they are consumed, so the transient
  // peak is the scores+probs moment in both modes (the tape keeps what
  // backward needs alive when recording)
  TensorT<S> v = split_heads(matmul(xb, w.wv));
  TensorT<S> probs;
  {
    TensorT<S> q = rope_apply(split_heads(matmul(xb, w.wq)), positions, cfg.rope_theta);
    q = scale(q, static_cast<S>(1.0 / std::sqrt(static_cast<double>(cfg.d_head))));
    TensorT<S> k = rope_apply(split_heads(matmul(xb, w.wk)), positions, cfg.rope_theta);
    probs = softmax_causal(matmul(q, transpose(k, 2, 3)));  // [B,H,T,T]
  }
  if (trace) {
    trace->diag = detail::detach_diag(probs);
    trace->has_rows = trace_rows;
    if (trace_rows) trace->rows = probs.detached_copy();
  }
  TensorT<S> y = matmul(probs, v);  // [B,H,T,dh]
  probs = TensorT<S>();

  TensorT<S> heads_out =
      cfg.mode == AttnMode::kXSA ? xsa_reject(y, v, cfg.rejection_eps) : y;
  if (trace) {
    trace->v = v.detached_copy();
    trace->y = y.detached_copy();
    trace->out = heads_out.detached_copy();
  }
  v = TensorT<S>();
  y = TensorT<S>();

  TensorT<S> out = matmul(reshape(transpose(heads_out, 1, 2), {b, t, hd}), w.wo);
  return flat ? reshape(out, {t, cfg.d_model}) : out;
}

}  // namespace xsalab
