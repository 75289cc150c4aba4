#pragma once

#include "xsalab/data.hpp"

namespace xsalab {

struct ProbeOptions {
  int64_t n_sequences = 1024;
  int64_t seq_len = 128;
  uint64_t seed = 0;
  bool full_rows = false;  // capture full attention rows (debugging); stats need only the diagonal
};

struct ProbeLayerStats {
  int64_t layer = 0;
  double mean_vv = 0.0;    // pairwise cosine of value vectors, i != j
  double mean_diag = 0.0;  // attention weight a_{i,i}
  double mean_yv = 0.0;    // cosine of the head output (y in SA, z in XSA) with its own v
};

struct ProbeReport {
  std::vector<ProbeLayerStats> layers;
  int64_t n_sequences = 0;
  int64_t n_heads = 0;
  int64_t n_positions = 0;
  std::string mode;
  int64_t seq_len = 0;
  int64_t n_sinks = 0;
};

namespace detail {

// Accumulators for one layer; everything pools flat across sequences, heads
// and positions/pairs.
struct ProbeAccum {
  double vv_sum = 0.0;
  int64_t vv_pairs = 0;
  double diag_sum = 0.0;
  int64_t diag_count = 0;
  double yv_sum = 0.0;
  int64_t yv_count = 0;
};

// Vectors with norms this small (relative to a same-layer reference) are
// treated as exact zeros and skipped; covers the T=1-style rejection residual
// whose direction is pure rounding noise.
template <class S>
constexpr double near_zero_rel() {
  return static_cast<double>(std::numeric_limits<S>::epsilon()) * 1000.0;
}

template <class S>
void accumulate_layer(const LayerTraceT<S>& tr, int64_t n_sinks, ProbeAccum& acc) {
  const int64_t b = tr.v.dim(0), h = tr.v.dim(1), t_total = tr.v.dim(2), d = tr.v.dim(3);
  const S* pv = tr.v.ptr();
  const S* py = tr.y.ptr();
  const S* po = tr.out.ptr();
  const S* pd = tr.diag.ptr();
  const double zero_abs = 1e-30;
  for (int64_t bh = 0; bh < b * h; ++bh) {
    // sum of unit value vectors: sum of off-diagonal cosines == |s|^2 - m
    std::vector<double> s(static_cast<size_t>(d), 0.0);
    int64_t m = 0;
    for (int64_t t = n_sinks; t < t_total; ++t) {
      const S* v = pv + (bh * t_total + t) * d;
      double n2 = 0.0;
      for (int64_t j = 0; j < d; ++j) n2 += static_cast<double>(v[j]) * v[j];
      const double n = std::sqrt(n2);
      if (n <= zero_abs) continue;
      for (int64_t j = 0; j < d; ++j) s[static_cast<size_t>(j)] += static_cast<double>(v[j]) / n;
      ++m;
    }
    double s2 = 0.0;
    for (double x : s) s2 += x * x;
    if (m > 1) {
      acc.vv_sum += s2 - static_cast<double>(m);
      acc.vv_pairs += m * (m - 1);
    }

    for (int64_t t = n_sinks; t < t_total; ++t) {
      acc.diag_sum += static_cast<double>(pd[bh * t_total + t]);
      ++acc.diag_count;

      const S* v = pv + (bh * t_total + t) * d;
      const S* y = py + (bh * t_total + t) * d;
      const S* o = po + (bh * t_total + t) * d;
      double nv2 = 0.0, ny2 = 0.0, no2 = 0.0, dot = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        nv2 += static_cast<double>(v[j]) * v[j];
        ny2 += static_cast<double>(y[j]) * y[j];
        no2 += static_cast<double>(o[j]) * o[j];
        dot += static_cast<double>(o[j]) * v[j];
      }
      const double nv = std::sqrt(nv2), ny = std::sqrt(ny2), no = std::sqrt(no2);
      if (nv <= zero_abs || no <= zero_abs) continue;
      if (no <= near_zero_rel<S>() * ny) continue;  // rejection residual, direction is noise
      double cosv = dot / (no * nv);
      cosv = std::min(1.0, std::max(-1.0, cosv));
      acc.yv_sum += cosv;
      ++acc.yv_count;
    }
  }
}

}  // namespace detail

/// Runs the model over random corpus windows with trace capture and averages
/// the three per-layer statistics across heads, positions and sequences.
/// Sink positions are excluded. Deterministic per seed.
template <class S>
ProbeReport probe_run(const ModelT<S>& model, const std::vector<int32_t>& corpus_ids,
                      const ProbeOptions& opts) {
  const ModelConfig& cfg = model.config();
  if (opts.seq_len > cfg.max_seq_len)
    throw std::invalid_argument("probe: seq_len exceeds the model's max_seq_len");
  if (opts.n_sequences <= 0) throw std::invalid_argument("probe: n_sequences must be positive");
  const int64_t n_offsets = static_cast<int64_t>(corpus_ids.size()) - opts.seq_len;
  if (n_offsets < 1)
    throw std::invalid_argument("probe: corpus admits no windows of seq_len " +
                                std::to_string(opts.seq_len));

  NoGradScope<S> ng;
  Rng rng(opts.seed);
  std::vector<detail::ProbeAccum> acc(static_cast<size_t>(cfg.n_layers));

  const int64_t chunk = std::min<int64_t>(opts.n_sequences, 8);
  int64_t done = 0;
  while (done < opts.n_sequences) {
    const int64_t b = std::min(chunk, opts.n_sequences - done);
    TokenBatch batch{b, opts.seq_len, {}};
    batch.ids.reserve(static_cast<size_t>(b * opts.seq_len));
    for (int64_t i = 0; i < b; ++i) {
      const int64_t off = static_cast<int64_t>(rng.below(static_cast<uint64_t>(n_offsets)));
      for (int64_t j = 0; j < opts.seq_len; ++j)
        batch.ids.push_back(corpus_ids[static_cast<size_t>(off + j)]);
    }
    TraceT<S> trace;
    model.forward(batch, &trace, opts.full_rows);
    for (int64_t l = 0; l < cfg.n_layers; ++l)
      detail::accumulate_layer(trace.layers[static_cast<size_t>(l)], cfg.n_sinks,
                               acc[static_cast<size_t>(l)]);
    done += b;
  }

  ProbeReport report;
  report.n_sequences = opts.n_sequences;
  report.n_heads = cfg.n_heads;
  report.n_positions = opts.seq_len;
  report.mode = mode_name(cfg.mode);
  report.seq_len = opts.seq_len;
  report.n_sinks = cfg.n_sinks;
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const auto& a = acc[static_cast<size_t>(l)];
    if (a.diag_count == 0) throw std::runtime_error("probe: layer with no samples");
    ProbeLayerStats st;
    st.layer = l;
    st.mean_vv = a.vv_pairs > 0 ? a.vv_sum / static_cast<double>(a.vv_pairs) : 0.0;
    st.mean_diag = a.diag_sum / static_cast<double>(a.diag_count);
    st.mean_yv = a.yv_count > 0 ? a.yv_sum / static_cast<double>(a.yv_count) : 0.0;
    report.layers.push_back(st);
  }
  return report;
}

inline const char* kProbeCsvHeader = "layer,mean_vv,mean_diag,mean_yv,n_sequences,n_heads,n_positions";

void probe_emit_csv(const ProbeReport& report, const std::string& path);
void probe_emit_json(const ProbeReport& report, const std::string& path);
ProbeReport probe_parse_csv(const std::string& path);
ProbeReport probe_parse_json(const std::string& path);

}  // namespace xsalab
