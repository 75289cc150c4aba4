#pragma once

// Naive per-position reference for multi-head causal attention, written with
// plain double loops and no batched ops. Kept deliberately independent of the
// library's tensor path; the two are compared to 1e-10.

#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

struct AttnSpec {
  int64_t t = 0;        // sequence length
  int64_t d_model = 0;
  int64_t heads = 0;
  int64_t d_head = 0;
  double theta = 10000.0;
  bool exclusive = false;  // apply the rejection step
  double eps = 1e-12;
};

inline void rope_rotate(std::vector<double>& vec, int64_t pos, int64_t d_head, double theta) {
  for (int64_t m = 0; m < d_head / 2; ++m) {
    const double freq = std::pow(theta, -2.0 * static_cast<double>(m) / static_cast<double>(d_head));
    const double ang = static_cast<double>(pos) * freq;
    const double c = std::cos(ang), s = std::sin(ang);
    const double x0 = vec[static_cast<size_t>(2 * m)], x1 = vec[static_cast<size_t>(2 * m + 1)];
    vec[static_cast<size_t>(2 * m)] = x0 * c - x1 * s;
    vec[static_cast<size_t>(2 * m + 1)] = x0 * s + x1 * c;
  }
}

/// x: [T, d_model]; wq/wk/wv: [d_model, H*d_head]; wo: [H*d_head, d_model].
/// Returns [T, d_model].
inline std::vector<double> attend(const std::vector<double>& x, const std::vector<double>& wq,
                                  const std::vector<double>& wk, const std::vector<double>& wv,
                                  const std::vector<double>& wo, const AttnSpec& spec) {
  const int64_t t_n = spec.t, d = spec.d_model, h_n = spec.heads, dh = spec.d_head;
  const int64_t hd = h_n * dh;
  auto project = [&](const std::vector<double>& w, int64_t i, int64_t head) {
    std::vector<double> out(static_cast<size_t>(dh), 0.0);
    for (int64_t c = 0; c < dh; ++c)
      for (int64_t e = 0; e < d; ++e)
        out[static_cast<size_t>(c)] +=
            x[static_cast<size_t>(i * d + e)] * w[static_cast<size_t>(e * hd + head * dh + c)];
    return out;
  };

  std::vector<double> merged(static_cast<size_t>(t_n * hd), 0.0);
  for (int64_t head = 0; head < h_n; ++head) {
    std::vector<std::vector<double>> q(static_cast<size_t>(t_n)), k(static_cast<size_t>(t_n)),
        v(static_cast<size_t>(t_n));
    for (int64_t i = 0; i < t_n; ++i) {
      q[static_cast<size_t>(i)] = project(wq, i, head);
      k[static_cast<size_t>(i)] = project(wk, i, head);
      v[static_cast<size_t>(i)] = project(wv, i, head);
      rope_rotate(q[static_cast<size_t>(i)], i, dh, spec.theta);
      rope_rotate(k[static_cast<size_t>(i)], i, dh, spec.theta);
    }
    for (int64_t i = 0; i < t_n; ++i) {
      std::vector<double> scores(static_cast<size_t>(i + 1), 0.0);
      double mx = -1e300;
      for (int64_t j = 0; j <= i; ++j) {
        double dot = 0.0;
        for (int64_t c = 0; c < dh; ++c)
          dot += q[static_cast<size_t>(i)][static_cast<size_t>(c)] *
                 k[static_cast<size_t>(j)][static_cast<size_t>(c)];
        scores[static_cast<size_t>(j)] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, scores[static_cast<size_t>(j)]);
      }
      double denom = 0.0;
      for (int64_t j = 0; j <= i; ++j) denom += std::exp(scores[static_cast<size_t>(j)] - mx);
      std::vector<double> y(static_cast<size_t>(dh), 0.0);
      for (int64_t j = 0; j <= i; ++j) {
        const double a = std::exp(scores[static_cast<size_t>(j)] - mx) / denom;
        for (int64_t c = 0; c < dh; ++c)
          y[static_cast<size_t>(c)] += a * v[static_cast<size_t>(j)][static_cast<size_t>(c)];
      }
      if (spec.exclusive) {
        double n2 = 0.0, dot = 0.0;
        for (int64_t c = 0; c < dh; ++c) {
          n2 += v[static_cast<size_t>(i)][static_cast<size_t>(c)] *
                v[static_cast<size_t>(i)][static_cast<size_t>(c)];
          dot += y[static_cast<size_t>(c)] * v[static_cast<size_t>(i)][static_cast<size_t>(c)];
        }
        const double norm = std::max(std::sqrt(n2), spec.eps);
        for (int64_t c = 0; c < dh; ++c)
          y[static_cast<size_t>(c)] -=
              dot / (norm * norm) * v[static_cast<size_t>(i)][static_cast<size_t>(c)];
      }
      for (int64_t c = 0; c < dh; ++c)
        merged[static_cast<size_t>(i * hd + head * dh + c)] = y[static_cast<size_t>(c)];
    }
  }

  std::vector<double> out(static_cast<size_t>(t_n * d), 0.0);
  for (int64_t i = 0; i < t_n; ++i)
    for (int64_t e = 0; e < d; ++e)
      for (int64_t c = 0; c < hd; ++c)
        out[static_cast<size_t>(i * d + e)] +=
            merged[static_cast<size_t>(i * hd + c)] * wo[static_cast<size_t>(c * d + e)];
  return out;
}

}  // namespace oracle
