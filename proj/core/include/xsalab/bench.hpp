#pragma once

#include <chrono>

#include "xsalab/model.hpp"

namespace xsalab {

struct BenchOptions {
  std::vector<int64_t> seq_lens{256, 512, 1024, 2048};
  std::vector<int64_t> d_models{256, 512};
  std::vector<AttnMode> modes{AttnMode::kSA, AttnMode::kXSA};
  int64_t batch = 4;
  int64_t repeats = 20;
  int64_t warmup = 2;
  int64_t d_head = 64;
  bool with_backward = false;
  std::string precision = "f32";  // f32 | f64
  uint64_t seed = 2024;

  void validate() const {
    if (repeats < 5) throw std::invalid_argument("bench: repeats must be >= 5");
    if (warmup < 2) throw std::invalid_argument("bench: warmup must be >= 2");
    if (batch <= 0) throw std::invalid_argument("bench: batch must be positive");
    if (precision != "f32" && precision != "f64")
      throw std::invalid_argument("bench: precision must be f32 or f64");
    if (seq_lens.empty() || d_models.empty() || modes.empty())
      throw std::invalid_argument("bench: empty grid");
    for (int64_t d : d_models)
      if (d % d_head != 0)
        throw std::invalid_argument("bench: d_model " + std::to_string(d) +
                                    " is not a multiple of d_head " + std::to_string(d_head));
  }
};

struct BenchCell {
  std::string mode;
  int64_t seq_len = 0;
  int64_t d_model = 0;
  double median_ms = 0.0;
  double p10_ms = 0.0;
  double p90_ms = 0.0;
  int64_t peak_bytes = 0;
  bool skipped = false;  // out-of-memory cells are recorded, not fatal
};

struct BenchRatio {
  int64_t seq_len = 0;
  int64_t d_model = 0;
  double time_ratio = 0.0;  // XSA / SA medians
  double mem_ratio = 0.0;
};

struct BenchReport {
  BenchOptions options;
  std::string host;
  std::string measure;  // "forward" or "forward_backward"
  int threads = 1;
  std::vector<BenchCell> cells;
  std::vector<BenchRatio> ratios;
};

namespace detail {

inline double percentile(std::vector<double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const size_t lo = static_cast<size_t>(pos);
  const size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

template <class S>
BenchCell bench_cell(AttnMode mode, int64_t seq_len, int64_t d_model, const BenchOptions& o) {
  BenchCell cell{mode_name(mode), seq_len, d_model, 0, 0, 0, 0, false};
  try {
    const int64_t heads = d_model / o.d_head;
    AttentionConfig cfg{d_model, heads, o.d_head, mode, 10000.0, 0, 1e-12};
    // weights and inputs depend only on (seq_len, d_model): both modes see
    // identical bits, so the difference isolates the rejection step
    BlockT<S> blk = make_random_block<S>(d_model, heads, o.d_head, 4, Rng::mix(o.seed, static_cast<uint64_t>(d_model)));
    Rng xr(Rng::mix(o.seed, static_cast<uint64_t>(seq_len * 131071 + d_model)));
    TensorT<S> x = TensorT<S>::zeros({o.batch, seq_len, d_model});
    for (S& v : *x.data) v = static_cast<S>(xr.normal());

    auto run_once = [&]() {
      if (o.with_backward) {
        TapeT<S> tape;
        {
          RecordScope<S> rec(tape);
          x.set_requires_grad(true);
          TensorT<S> loss = reduce_sum(block_forward(x, blk, cfg));
          backward(loss);
        }
        tape.clear();
      } else {
        NoGradScope<S> ng;
        block_forward(x, blk, cfg);
      }
    };

    for (int64_t i = 0; i < o.warmup; ++i) run_once();
    std::vector<double> times;
    times.reserve(static_cast<size_t>(o.repeats));
    int64_t peak = 0;
    for (int64_t i = 0; i < o.repeats; ++i) {
      const int64_t baseline = memstat::current_bytes();
      memstat::reset_peak();
      const auto t0 = std::chrono::steady_clock::now();
      run_once();
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      peak = std::max(peak, memstat::peak_bytes() - baseline);
    }
    std::sort(times.begin(), times.end());
    cell.median_ms = percentile(times, 0.5);
    cell.p10_ms = percentile(times, 0.1);
    cell.p90_ms = percentile(times, 0.9);
    cell.peak_bytes = peak;
  } catch (const std::bad_alloc&) {
    cell.skipped = true;
  }
  return cell;
}

template <class S>
BenchReport bench_block_typed(const BenchOptions& o) {
  BenchReport report;
  report.options = o;
  report.measure = o.with_backward ? "forward_backward" : "forward";
  report.threads = num_threads();
  for (int64_t d : o.d_models)
    for (int64_t t : o.seq_lens)
      for (AttnMode m : o.modes) report.cells.push_back(bench_cell<S>(m, t, d, o));

  auto find_cell = [&](const std::string& mode, int64_t t, int64_t d) -> const BenchCell* {
    for (const auto& c : report.cells)
      if (c.mode == mode && c.seq_len == t && c.d_model == d && !c.skipped) return &c;
    return nullptr;
  };
  const bool both = o.modes.size() >= 2;
  if (both) {
    for (int64_t d : o.d_models)
      for (int64_t t : o.seq_lens) {
        const BenchCell* sa = find_cell("sa", t, d);
        const BenchCell* xsa = find_cell("xsa", t, d);
        if (sa && xsa && sa->median_ms > 0 && sa->peak_bytes > 0)
          report.ratios.push_back(BenchRatio{
              t, d, xsa->median_ms / sa->median_ms,
              static_cast<double>(xsa->peak_bytes) / static_cast<double>(sa->peak_bytes)});
      }
  }
  return report;
}

}  // namespace detail

std::string host_description();

/// Times one pre-LN block (attention + FFN) over the grid, warmup discarded,
/// and derives the XSA/SA overhead ratios per cell.
inline BenchReport bench_block(const BenchOptions& opts) {
  opts.validate();
  BenchReport r = opts.precision == "f64" ? detail::bench_block_typed<double>(opts)
                                          : detail::bench_block_typed<float>(opts);
  r.host = host_description();
  return r;
}

void bench_emit_json(const BenchReport& report, const std::string& path);

}  // namespace xsalab
