#pragma once

#include <cmath>
#include <limits>

#include "xsalab/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace xsalab {

// Runs f(0..n-1) with disjoint outputs per index. Each index is computed
// entirely by one thread, so results are bitwise identical for any thread
// count.
template <class F>
void parallel_for(int64_t n, int64_t work_per_item, const F& f) {
#ifdef _OPENMP
  if (num_threads() > 1 && n > 1 && work_per_item * n > 16384) {
#pragma omp parallel for num_threads(num_threads()) schedule(static)
    for (int64_t i = 0; i < n; ++i) f(i);
    return;
  }
#endif
  for (int64_t i = 0; i < n; ++i) f(i);
}

namespace detail {

// C[M,N] += A[M,K] * B[K,N], row-major, C pre-zeroed by the caller. Four
// output rows per pass so each B row is streamed once per four rows; the
// AXPY inner loops vectorize without FP reassociation.
template <class S>
void gemm_nn(const S* a, const S* b, S* c, int64_t m_n, int64_t k_n, int64_t n_n) {
  int64_t m = 0;
  for (; m + 4 <= m_n; m += 4) {
    const S* a0 = a + m * k_n;
    const S* a1 = a0 + k_n;
    const S* a2 = a1 + k_n;
    const S* a3 = a2 + k_n;
    S* c0 = c + m * n_n;
    S* c1 = c0 + n_n;
    S* c2 = c1 + n_n;
    S* c3 = c2 + n_n;
    for (int64_t k = 0; k < k_n; ++k) {
      const S* brow = b + k * n_n;
      const S v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
      for (int64_t n = 0; n < n_n; ++n) {
        const S bn = brow[n];
        c0[n] += v0 * bn;
        c1[n] += v1 * bn;
        c2[n] += v2 * bn;
        c3[n] += v3 * bn;
      }
    }
  }
  for (; m < m_n; ++m) {
    const S* arow = a + m * k_n;
    S* crow = c + m * n_n;
    for (int64_t k = 0; k < k_n; ++k) {
      const S av = arow[k];
      const S* brow = b + k * n_n;
      for (int64_t n = 0; n < n_n; ++n) crow[n] += av * brow[n];
    }
  }
}

// DB[k0..k0+kn) += sum_m A[m, k] * G[m, N], same four-row blocking over k.
template <class S>
void gemm_tn(const S* a, const S* g, S* db, int64_t m_n, int64_t k_stride, int64_t k0,
             int64_t kn, int64_t n_n) {
  int64_t k = k0;
  for (; k + 4 <= k0 + kn; k += 4) {
    S* d0 = db + k * n_n;
    S* d1 = d0 + n_n;
    S* d2 = d1 + n_n;
    S* d3 = d2 + n_n;
    for (int64_t m = 0; m < m_n; ++m) {
      const S* grow = g + m * n_n;
      const S* arow = a + m * k_stride;
      const S v0 = arow[k], v1 = arow[k + 1], v2 = arow[k + 2], v3 = arow[k + 3];
      for (int64_t n = 0; n < n_n; ++n) {
        const S gn = grow[n];
        d0[n] += v0 * gn;
        d1[n] += v1 * gn;
        d2[n] += v2 * gn;
        d3[n] += v3 * gn;
      }
    }
  }
  for (; k < k0 + kn; ++k) {
    S* drow = db + k * n_n;
    for (int64_t m = 0; m < m_n; ++m) {
      const S av = a[m * k_stride + k];
      const S* grow = g + m * n_n;
      for (int64_t n = 0; n < n_n; ++n) drow[n] += av * grow[n];
    }
  }
}

inline int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

template <class S>
void transpose2d(const S* src, S* dst, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

template <class S>
inline bool rec_wanted(const TensorT<S>& t) {
  return t.requires_grad;
}

template <class S, class... Ts>
inline bool rec_wanted(const TensorT<S>& t, const Ts&... rest) {
  return t.requires_grad || rec_wanted(rest...);
}

}  // namespace detail

// Marks `out` as tape-produced and allocates its grad buffer. Must run
// BEFORE the backward closure captures its copy of `out`, so the copy shares
// the buffer.
template <class S>
void mark_output(TensorT<S>& out) {
  out.requires_grad = true;
  out.tape = active_tape<S>();
  out.ensure_grad();
}

template <class S, class F>
void record_op(TensorT<S>& out, F&& backward_fn) {
  out.node = out.tape->record(out.grad, std::forward<F>(backward_fn));
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// Batched matrix product a[...,M,K] x b[...,K,N] -> [...,M,N].
/// Batch extents must match elementwise, or b may be rank-2 (shared across
/// the batch, the weight-matrix case).
template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw std::invalid_argument("matmul: operands must have rank >= 2, got " +
                                shape_str(a.shape) + " x " + shape_str(b.shape));
  const int64_t m_n = a.dim(-2), k_a = a.dim(-1);
  const int64_t k_b = b.dim(-2), n_n = b.dim(-1);
  if (k_a != k_b)
    throw std::invalid_argument("matmul: inner extents differ, " + shape_str(a.shape) + " x " +
                                shape_str(b.shape));
  const bool shared_b = b.rank() == 2;
  Shape batch_shape(a.shape.begin(), a.shape.end() - 2);
  if (!shared_b) {
    Shape b_batch(b.shape.begin(), b.shape.end() - 2);
    if (b_batch != batch_shape)
      throw std::invalid_argument("matmul: batch extents differ, " + shape_str(a.shape) + " x " +
                                  shape_str(b.shape));
  }
  const int64_t batch = numel_of(batch_shape);
  Shape out_shape = batch_shape;
  out_shape.push_back(m_n);
  out_shape.push_back(n_n);
  TensorT<S> out = TensorT<S>::zeros(out_shape);

  const S* pa = a.ptr();
  const S* pb = b.ptr();
  S* pc = out.ptr();
  const int64_t a_stride = m_n * k_a, b_stride = shared_b ? 0 : k_a * n_n, c_stride = m_n * n_n;
  constexpr int64_t kRowBlock = 32;
  const int64_t mblocks = detail::ceil_div(m_n, kRowBlock);
  parallel_for(batch * mblocks, 2 * k_a * n_n * kRowBlock, [=](int64_t idx) {
    const int64_t bi = idx / mblocks, m0 = (idx % mblocks) * kRowBlock;
    const int64_t rows = std::min(kRowBlock, m_n - m0);
    detail::gemm_nn(pa + bi * a_stride + m0 * k_a, pb + bi * b_stride,
                    pc + bi * c_stride + m0 * n_n, rows, k_a, n_n);
  });

  if (active_tape<S>() && detail::rec_wanted(a, b)) {
    mark_output(out);
    TensorT<S> ta = a, tb = b, to = out;
    record_op(out, [ta, tb, to, batch, m_n, k_a, n_n, a_stride, b_stride, c_stride, mblocks]() mutable {
      constexpr int64_t kBlk = 32;
      const S* g = to.grad_ptr();
      if (ta.requires_grad) {
        // dA[m,:] += sum_n g[m,n] * B[:,n]  via a transposed scratch of B
        S* ga = ta.grad->data();
        std::vector<S> bt(static_cast<size_t>(k_a * n_n));
        const S* pb2 = tb.ptr();
        for (int64_t bi = 0; bi < batch; ++bi) {
          if (bi == 0 || b_stride != 0)
            detail::transpose2d(pb2 + bi * b_stride, bt.data(), k_a, n_n);
          const S* gbase = g + bi * c_stride;
          S* abase = ga + bi * a_stride;
          const S* btp = bt.data();
          parallel_for(mblocks, 2 * k_a * n_n * kBlk, [=](int64_t blk) {
            const int64_t m0 = blk * kBlk;
            const int64_t rows = std::min(kBlk, m_n - m0);
            detail::gemm_nn(gbase + m0 * n_n, btp, abase + m0 * k_a, rows, n_n, k_a);
          });
        }
      }
      if (tb.requires_grad) {
        // dB[k,:] += sum_m A[m,k] * g[m,:]
        S* gb = tb.grad->data();
        const S* pa2 = ta.ptr();
        const int64_t kblocks = detail::ceil_div(k_a, kBlk);
        if (b_stride == 0) {
          parallel_for(kblocks, 2 * batch * m_n * n_n * kBlk, [=](int64_t blk) {
            const int64_t k0 = blk * kBlk;
            const int64_t kn = std::min(kBlk, k_a - k0);
            for (int64_t bi = 0; bi < batch; ++bi)
              detail::gemm_tn(pa2 + bi * a_stride, g + bi * c_stride, gb, m_n, k_a, k0, kn, n_n);
          });
        } else {
          parallel_for(batch * kblocks, 2 * m_n * n_n * kBlk, [=](int64_t idx) {
            const int64_t bi = idx / kblocks, k0 = (idx % kblocks) * kBlk;
            const int64_t kn = std::min(kBlk, k_a - k0);
            detail::gemm_tn(pa2 + bi * a_stride, g + bi * c_stride, gb + bi * b_stride, m_n, k_a,
                            k0, kn, n_n);
          });
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

/// a + b. b's shape must equal a's or be a suffix of it (bias / mask
/// broadcast over leading extents).
template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  const int ra = a.rank(), rb = b.rank();
  bool suffix = rb <= ra;
  for (int i = 0; suffix && i < rb; ++i)
    if (b.shape[rb - 1 - i] != a.shape[ra - 1 - i]) suffix = false;
  if (!suffix)
    throw std::invalid_argument("add: shape " + shape_str(b.shape) + " does not broadcast onto " +
                                shape_str(a.shape));
  const int64_t n = a.numel(), nb = b.numel();
  TensorT<S> out = TensorT<S>::zeros(a.shape);
  const S* pa = a.ptr();
  const S* pb = b.ptr();
  S* po = out.ptr();
  if (nb == n) {
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  } else {
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i % nb];
  }

  if (active_tape<S>() && detail::rec_wanted(a, b)) {
    mark_output(out);
    TensorT<S> ta = a, tb = b, to = out;
    record_op(out, [ta, tb, to, n, nb]() mutable {
      const S* g = to.grad_ptr();
      if (ta.requires_grad) {
        S* ga = ta.grad->data();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (tb.requires_grad) {
        S* gb = tb.grad->data();
        if (nb == n)
          for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
        else
          for (int64_t i = 0; i < n; ++i) gb[i % nb] += g[i];
      }
    });
  }
  return out;
}

/// Hadamard product, same shapes.
template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("mul: shapes differ, " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  const int64_t n = a.numel();
  TensorT<S> out = TensorT<S>::zeros(a.shape);
  const S* pa = a.ptr();
  const S* pb = b.ptr();
  S* po = out.ptr();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];

  if (active_tape<S>() && detail::rec_wanted(a, b)) {
    mark_output(out);
    TensorT<S> ta = a, tb = b, to = out;
    record_op(out, [ta, tb, to, n]() mutable {
      const S* g = to.grad_ptr();
      if (ta.requires_grad) {
        S* ga = ta.grad->data();
        const S* pb2 = tb.ptr();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i];
      }
      if (tb.requires_grad) {
        S* gb = tb.grad->data();
        const S* pa2 = ta.ptr();
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S factor) {
  const int64_t n = a.numel();
  TensorT<S> out = TensorT<S>::zeros(a.shape);
  const S* pa = a.ptr();
  S* po = out.ptr();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * factor;

  if (active_tape<S>() && a.requires_grad) {
    mark_output(out);
    TensorT<S> ta = a, to = out;
    record_op(out, [ta, to, n, factor]() mutable {
      const S* g = to.grad_ptr();
      S* ga = ta.grad->data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops (all copying; round trips are bit-identical)
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> reshape(const TensorT<S>& a, Shape new_shape) {
  if (numel_of(new_shape) != a.numel())
    throw std::invalid_argument("reshape: " + shape_str(a.shape) + " -> " + shape_str(new_shape) +
                                " changes element count");
  TensorT<S> out = TensorT<S>::zeros(std::move(new_shape));
  std::copy(a.data->begin(), a.data->end(), out.data->begin());

  if (active_tape<S>() && a.requires_grad) {
    mark_output(out);
    TensorT<S> ta = a, to = out;
    const int64_t n = a.numel();
    record_op(out, [ta, to, n]() mutable {
      const S* g = to.grad_ptr();
      S* ga = ta.grad->data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return out;
}

namespace detail {

// dst[..., j, ..., i, ...] = src[..., i, ..., j, ...] index plumbing
inline std::vector<int64_t> strides_of(const Shape& shape) {
  std::vector<int64_t> st(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * shape[static_cast<size_t>(i) + 1];
  return st;
}

template <class S>
void permuted_copy(const S* src, S* dst, const Shape& out_shape,
                   const std::vector<int64_t>& src_stride_for_out_axis, bool accumulate) {
  const int rank = static_cast<int>(out_shape.size());
  const int64_t n = numel_of(out_shape);
  std::vector<int64_t> coord(static_cast<size_t>(rank), 0);
  int64_t src_idx = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (accumulate)
      dst[src_idx] += src[i];
    else
      dst[i] = src[src_idx];
    for (int d = rank - 1; d >= 0; --d) {
      src_idx += src_stride_for_out_axis[static_cast<size_t>(d)];
      if (++coord[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      src_idx -= src_stride_for_out_axis[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      coord[static_cast<size_t>(d)] = 0;
    }
  }
}

}  // namespace detail

/// Swaps two axes (copying).
template <class S>
TensorT<S> transpose(const TensorT<S>& a, int d0, int d1) {
  const int r = a.rank();
  if (d0 < 0) d0 += r;
  if (d1 < 0) d1 += r;
  if (d0 < 0 || d0 >= r || d1 < 0 || d1 >= r)
    throw std::invalid_argument("transpose: axis out of range for " + shape_str(a.shape));
  Shape out_shape = a.shape;
  std::swap(out_shape[static_cast<size_t>(d0)], out_shape[static_cast<size_t>(d1)]);
  TensorT<S> out = TensorT<S>::zeros(out_shape);

  std::vector<int64_t> in_strides = detail::strides_of(a.shape);
  std::swap(in_strides[static_cast<size_t>(d0)], in_strides[static_cast<size_t>(d1)]);
  detail::permuted_copy(a.ptr(), out.ptr(), out_shape, in_strides, false);

  if (active_tape<S>() && a.requires_grad) {
    mark_output(out);
    TensorT<S> ta = a, to = out;
    record_op(out, [ta, to, out_shape, in_strides]() mutable {
      detail::permuted_copy(to.grad_ptr(), ta.grad->data(), out_shape, in_strides, true);
    });
  }
  return out;
}

/// Copies `len` extents starting at `start` along axis `dim`.
template <class S>
TensorT<S> slice(const TensorT<S>& a, int dim, int64_t start, int64_t len) {
  const int r = a.rank();
  if (dim < 0) dim += r;
  if (dim < 0 || dim >= r) throw std::invalid_argument("slice: axis out of range");
  const int64_t extent = a.shape[static_cast<size_t>(dim)];
  if (start < 0 || len < 0 || start + len > extent)
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") exceeds extent " +
                                std::to_string(extent));
  Shape out_shape = a.shape;
  out_shape[static_cast<size_t>(dim)] = len;
  TensorT<S> out = TensorT<S>::zeros(out_shape);

  int64_t inner = 1;
  for (int i = dim + 1; i < r; ++i) inner *= a.shape[static_cast<size_t>(i)];
  const int64_t outer = a.numel() / (extent * inner);
  const S* pa = a.ptr();
  S* po = out.ptr();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(pa + (o * extent + start) * inner, pa + (o * extent + start + len) * inner,
              po + o * len * inner);

  if (active_tape<S>() && a.requires_grad) {
    mark_output(out);
    TensorT<S> ta = a, to = out;
    record_op(out, [ta, to, outer, extent, inner, start, len]() mutable {
      const S* g = to.grad_ptr();
      S* ga = ta.grad->data();
      for (int64_t o = 0; o < outer; ++o) {
        S* dst = ga + (o * extent + start) * inner;
        const S* src = g + o * len * inner;
        for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

/// Concatenates two tensors along `dim`; other extents must match.
template <class S>
TensorT<S> concat(const TensorT<S>& a, const TensorT<S>& b, int dim) {
  const int r = a.rank();
  if (b.rank() != r) throw std::invalid_argument("concat: rank mismatch");
  if (dim < 0) dim += r;
  if (dim < 0 || dim >= r) throw std::invalid_argument("concat: axis out of range");
  for (int i = 0; i < r; ++i)
    if (i != dim && a.shape[static_cast<size_t>(i)] != b.shape[static_cast<size_t>(i)])
      throw std::invalid_argument("concat: shapes " + shape_str(a.shape) + " and " +
                                  shape_str(b.shape) + " differ off-axis");
  const int64_t ea = a.shape[static_cast<size_t>(dim)], eb = b.shape[static_cast<size_t>(dim)];
  Shape out_shape = a.shape;
  out_shape[static_cast<size_t>(dim)] = ea + eb;
  TensorT<S> out = TensorT<S>::zeros(out_shape);

  int64_t inner = 1;
  for (int i = dim + 1; i < r; ++i) inner *= a.shape[static_cast<size_t>(i)];
  const int64_t outer = a.numel() / (ea * inner);
  const S* pa = a.ptr();
  const S* pb = b.ptr();
  S* po = out.ptr();
  for (int64_t o = 0; o < outer; ++o) {
    std::copy(pa + o * ea * inner, pa + (o + 1) * ea * inner, po + o * (ea + eb) * inner);
    std::copy(pb + o * eb * inner, pb + (o + 1) * eb * inner,
              po + (o * (ea + eb) + ea) * inner);
  }

  if (active_tape<S>() && detail::rec_wanted(a, b)) {
    mark_output(out);
    TensorT<S> ta = a, tb = b, to = out;
    record_op(out, [ta, tb, to, outer, ea, eb, inner]() mutable {
      const S* g = to.grad_ptr();
      if (ta.requires_grad) {
        S* ga = ta.grad->data();
        for (int64_t o = 0; o < outer; ++o) {
          const S* src = g + o * (ea + eb) * inner;
          S* dst = ga + o * ea * inner;
          for (int64_t i = 0; i < ea * inner; ++i) dst[i] += src[i];
        }
      }
      if (tb.requires_grad) {
        S* gb = tb.grad->data();
        for (int64_t o = 0; o < outer; ++o) {
          const S* src = g + (o * (ea + eb) + ea) * inner;
          S* dst = gb + o * eb * inner;
          for (int64_t i = 0; i < eb * inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

/// x[shape] -> [copies, shape...]; backward sums over the leading axis.
template <class S>
TensorT<S> tile_leading(const TensorT<S>& a, int64_t copies) {
  if (copies <= 0) throw std::invalid_argument("tile_leading: copies must be positive");
  Shape out_shape;
  out_shape.push_back(copies);
  out_shape.insert(out_shape.end(), a.shape.begin(), a.shape.end());
  TensorT<S> out = TensorT<S>::zeros(out_shape);
  const int64_t n = a.numel();
  const S* pa = a.ptr();
  S* po = out.ptr();
  for (int64_t c = 0; c < copies; ++c) std::copy(pa, pa + n, po + c * n);

  if (active_tape<S>() && a.requires_grad) {
    mark_output(out);
    TensorT<S> ta = a, to = out;
    record_op(out, [ta, to, copies, n]() mutable {
      const S* g = to.grad_ptr();
      S* ga = ta.grad->data();
      for (int64_t c = 0; c < copies; ++c)
        for (int64_t i = 0; i < n; ++i) ga[i] += g[c * n + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// embedding
// ---------------------------------------------------------------------------

/// Row gather: table[V,D], ids[N] -> [N,D]. Backward scatter-adds rows.
template <class S>
TensorT<S> embedding(const TensorT<S>& table, const std::vector<int32_t>& ids) {
  if (table.rank() != 2) throw std::invalid_argument("embedding: table must be [vocab, dim]");
  const int64_t vocab = table.dim(0), d = table.dim(1);
  const int64_t n = static_cast<int64_t>(ids.size());
  for (int32_t id : ids)
    if (id < 0 || id >= vocab)
      throw std::runtime_error("embedding: token id " + std::to_string(id) +
                               " outside vocab of " + std::to_string(vocab));
  TensorT<S> out = TensorT<S>::zeros({n, d});
  const S* pt = table.ptr();
  S* po = out.ptr();
  for (int64_t i = 0; i < n; ++i)
    std::copy(pt + ids[static_cast<size_t>(i)] * d, pt + (ids[static_cast<size_t>(i)] + 1) * d,
              po + i * d);

  if (active_tape<S>() && table.requires_grad) {
    mark_output(out);
    TensorT<S> tt = table, to = out;
    record_op(out, [tt, to, ids, n, d]() mutable {
      const S* g = to.grad_ptr();
      S* gt = tt.grad->data();
      for (int64_t i = 0; i < n; ++i) {
        S* dst = gt + ids[static_cast<size_t>(i)] * d;
        const S* src = g + i * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// nonlinearities and normalization
// ---------------------------------------------------------------------------

namespace detail {
template <class S>
inline S gauss_cdf(S x) {
  return S(0.5) * (S(1) + std::erf(x * S(0.7071067811865476)));
}
template <class S>
inline S gauss_pdf(S x) {
  return std::exp(S(-0.5) * x * x) * S(0.3989422804014327);
}
}  // namespace detail

/// Exact (erf-based) GELU.
template <class S>
TensorT<S> gelu(const TensorT<S>& a) {
  const int64_t n = a.numel();
  TensorT<S> out = TensorT<S>::zeros(a.shape);
  const S* pa = a.ptr();
  S* po = out.ptr();
  const int64_t chunk = 4096;
  parallel_for((n + chunk - 1) / chunk, chunk * 8, [=](int64_t c) {
    const int64_t lo = c * chunk, hi = std::min(n, lo + chunk);
    for (int64_t i = lo; i < hi; ++i) po[i] = pa[i] * detail::gauss_cdf(pa[i]);
  });

  if (active_tape<S>() && a.requires_grad) {
    mark_output(out);
    TensorT<S> ta = a, to = out;
    record_op(out, [ta, to, n, chunk]() mutable {
      const S* g = to.grad_ptr();
      const S* pa2 = ta.ptr();
      S* ga = ta.grad->data();
      parallel_for((n + chunk - 1) / chunk, chunk * 8, [=](int64_t c) {
        const int64_t lo = c * chunk, hi = std::min(n, lo + chunk);
        for (int64_t i = lo; i < hi; ++i) {
          const S x = pa2[i];
          ga[i] += g[i] * (detail::gauss_cdf(x) + x * detail::gauss_pdf(x));
        }
      });
    });
  }
  return out;
}

/// Numerically stable softmax over the last axis. -inf entries map to exactly
/// 0; a row of all -inf is an error (a masking bug upstream).
template <class S>
TensorT<S> softmax_lastdim(const TensorT<S>& a) {
  if (a.rank() < 1 || a.dim(-1) < 1)
    throw std::invalid_argument("softmax_lastdim: need a nonempty last axis");
  const int64_t d = a.dim(-1);
  const int64_t rows = a.numel() / d;
  TensorT<S> out = TensorT<S>::zeros(a.shape);
  const S* pa = a.ptr();
  S* po = out.ptr();
  const S neg_inf = -std::numeric_limits<S>::infinity();
  std::vector<uint8_t> bad(static_cast<size_t>(rows), 0);
  uint8_t* pbad = bad.data();
  parallel_for(rows, 4 * d, [=](int64_t r) {
    const S* x = pa + r * d;
    S* y = po + r * d;
    S mx = x[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
    if (mx == neg_inf) {
      pbad[r] = 1;
      return;
    }
    S sum = S(0);
#pragma omp simd reduction(+ : sum)
    for (int64_t j = 0; j < d; ++j) {
      const S e = std::exp(x[j] - mx);  // exp(-inf) == 0 exactly
      y[j] = e;
      sum += e;
    }
    const S inv = S(1) / sum;
    for (int64_t j = 0; j < d; ++j) y[j] *= inv;
  });
  for (int64_t r = 0; r < rows; ++r)
    if (bad[static_cast<size_t>(r)])
      throw std::runtime_error("softmax_lastdim: fully masked row " + std::to_string(r));

  if (active_tape<S>() && a.requires_grad) {
    mark_output(out);
    TensorT<S> ta = a, to = out;
    record_op(out, [ta, to, rows, d]() mutable {
      const S* g = to.grad_ptr();
      const S* y = to.ptr();
      S* ga = ta.grad->data();
      parallel_for(rows, 4 * d, [=](int64_t r) {
        const S* yr = y + r * d;
        const S* gr = g + r * d;
        S* dr = ga + r * d;
        double dot = 0.0;
        for (int64_t j = 0; j < d; ++j) dot += static_cast<double>(yr[j]) * gr[j];
        const S sdot = static_cast<S>(dot);
        for (int64_t j = 0; j < d; ++j) dr[j] += yr[j] * (gr[j] - sdot);
      });
    });
  }
  return out;
}

/// Causal softmax over the trailing [T, T] block of square score tensors:
/// row i is softmax over columns j <= i, columns above the diagonal are
/// exactly zero. Equivalent to adding a -inf causal mask and softmaxing, but
/// with no mask tensor and half the exponentials.
template <class S>
TensorT<S> softmax_causal(const TensorT<S>& a) {
  if (a.rank() < 2 || a.dim(-1) != a.dim(-2))
    throw std::invalid_argument("softmax_causal: expected trailing [T, T] scores, got " +
                                shape_str(a.shape));
  const int64_t t_n = a.dim(-1);
  const int64_t rows = a.numel() / t_n;
  TensorT<S> out = TensorT<S>::zeros(a.shape);
  const S* pa = a.ptr();
  S* po = out.ptr();
  parallel_for(rows, 2 * t_n, [=](int64_t r) {
    const int64_t i = r % t_n;  // row index inside the block
    const S* x = pa + r * t_n;
    S* y = po + r * t_n;
    S mx = x[0];
    for (int64_t j = 1; j <= i; ++j) mx = std::max(mx, x[j]);
    S sum = S(0);
#pragma omp simd reduction(+ : sum)
    for (int64_t j = 0; j <= i; ++j) {
      const S e = std::exp(x[j] - mx);
      y[j] = e;
      sum += e;
    }
    const S inv = S(1) / sum;
    for (int64_t j = 0; j <= i; ++j) y[j] *= inv;
    // y[j > i] stays exactly 0
  });

  if (active_tape<S>() && a.requires_grad) {
    mark_output(out);
    TensorT<S> ta = a, to = out;
    record_op(out, [ta, to, rows, t_n]() mutable {
      const S* g = to.grad_ptr();
      const S* y = to.ptr();
      S* ga = ta.grad->data();
      parallel_for(rows, 4 * t_n, [=](int64_t r) {
        const int64_t i = r % t_n;
        const S* yr = y + r * t_n;
        const S* gr = g + r * t_n;
        S* dr = ga + r * t_n;
        double dot = 0.0;
        for (int64_t j = 0; j <= i; ++j) dot += static_cast<double>(yr[j]) * gr[j];
        const S sdot = static_cast<S>(dot);
        for (int64_t j = 0; j <= i; ++j) dr[j] += yr[j] * (gr[j] - sdot);
      });
    });
  }
  return out;
}

/// LayerNorm over the last axis with affine gain/bias.
template <class S>
TensorT<S> layernorm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias,
                     S eps) {
  const int64_t d = x.dim(-1);
  if (gain.numel() != d || bias.numel() != d)
    throw std::invalid_argument("layernorm: gain/bias must have " + std::to_string(d) +
                                " elements");
  const int64_t rows = x.numel() / d;
  TensorT<S> out = TensorT<S>::zeros(x.shape);
  const S* px = x.ptr();
  const S* pg = gain.ptr();
  const S* pb = bias.ptr();
  S* po = out.ptr();
  parallel_for(rows, 6 * d, [=](int64_t r) {
    const S* xr = px + r * d;
    S* yr = po + r * d;
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const S mu = static_cast<S>(mean);
    const S inv = static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    for (int64_t j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * inv * pg[j] + pb[j];
  });

  if (active_tape<S>() && detail::rec_wanted(x, gain, bias)) {
    mark_output(out);
    TensorT<S> tx = x, tg = gain, tb = bias, to = out;
    record_op(out, [tx, tg, tb, to, rows, d, eps]() mutable {
      const S* g = to.grad_ptr();
      const S* px2 = tx.ptr();
      const S* pg2 = tg.ptr();
      if (tx.requires_grad) {
        S* gx = tx.grad->data();
        parallel_for(rows, 10 * d, [=](int64_t r) {
          const S* xr = px2 + r * d;
          const S* gr = g + r * d;
          S* dx = gx + r * d;
          double mean = 0.0;
          for (int64_t j = 0; j < d; ++j) mean += xr[j];
          mean /= static_cast<double>(d);
          double var = 0.0;
          for (int64_t j = 0; j < d; ++j) {
            const double c = xr[j] - mean;
            var += c * c;
          }
          var /= static_cast<double>(d);
          const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
          double m1 = 0.0, m2 = 0.0;  // mean(dy*g), mean(dy*g*xhat)
          for (int64_t j = 0; j < d; ++j) {
            const double dyg = static_cast<double>(gr[j]) * pg2[j];
            const double xh = (xr[j] - mean) * inv;
            m1 += dyg;
            m2 += dyg * xh;
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          for (int64_t j = 0; j < d; ++j) {
            const double dyg = static_cast<double>(gr[j]) * pg2[j];
            const double xh = (xr[j] - mean) * inv;
            dx[j] += static_cast<S>((dyg - m1 - xh * m2) * inv);
          }
        });
      }
      if (tg.requires_grad || tb.requires_grad) {
        S* gg = tg.requires_grad ? tg.grad->data() : nullptr;
        S* gb = tb.requires_grad ? tb.grad->data() : nullptr;
        for (int64_t r = 0; r < rows; ++r) {
          const S* xr = px2 + r * d;
          const S* gr = g + r * d;
          double mean = 0.0;
          for (int64_t j = 0; j < d; ++j) mean += xr[j];
          mean /= static_cast<double>(d);
          double var = 0.0;
          for (int64_t j = 0; j < d; ++j) {
            const double c = xr[j] - mean;
            var += c * c;
          }
          var /= static_cast<double>(d);
          const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
          for (int64_t j = 0; j < d; ++j) {
            if (gg) gg[j] += static_cast<S>(gr[j] * (xr[j] - mean) * inv);
            if (gb) gb[j] += gr[j];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> reduce_sum(const TensorT<S>& a) {
  const int64_t n = a.numel();
  const S* pa = a.ptr();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += pa[i];
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(acc));

  if (active_tape<S>() && a.requires_grad) {
    mark_output(out);
    TensorT<S> ta = a, to = out;
    record_op(out, [ta, to, n]() mutable {
      const S g = (*to.grad)[0];
      S* ga = ta.grad->data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g;
    });
  }
  return out;
}

template <class S>
TensorT<S> reduce_mean(const TensorT<S>& a) {
  const int64_t n = a.numel();
  if (n == 0) throw std::invalid_argument("reduce_mean: empty tensor");
  const S* pa = a.ptr();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += pa[i];
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(acc / static_cast<double>(n)));

  if (active_tape<S>() && a.requires_grad) {
    mark_output(out);
    TensorT<S> ta = a, to = out;
    record_op(out, [ta, to, n]() mutable {
      const S g = (*to.grad)[0] / static_cast<S>(n);
      S* ga = ta.grad->data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g;
    });
  }
  return out;
}

/// Euclidean norm of each last-axis vector; output drops the last axis.
template <class S>
TensorT<S> l2norm_lastdim(const TensorT<S>& a) {
  if (a.rank() < 1) throw std::invalid_argument("l2norm_lastdim: need rank >= 1");
  const int64_t d = a.dim(-1);
  const int64_t rows = a.numel() / d;
  Shape out_shape(a.shape.begin(), a.shape.end() - 1);
  TensorT<S> out = TensorT<S>::zeros(out_shape);
  const S* pa = a.ptr();
  S* po = out.ptr();
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    const S* xr = pa + r * d;
    for (int64_t j = 0; j < d; ++j) acc += static_cast<double>(xr[j]) * xr[j];
    po[r] = static_cast<S>(std::sqrt(acc));
  }

  if (active_tape<S>() && a.requires_grad) {
    mark_output(out);
    TensorT<S> ta = a, to = out;
    record_op(out, [ta, to, rows, d]() mutable {
      const S* g = to.grad_ptr();
      const S* y = to.ptr();
      const S* pa2 = ta.ptr();
      S* ga = ta.grad->data();
      for (int64_t r = 0; r < rows; ++r) {
        if (y[r] == S(0)) continue;  // zero vector: subgradient 0
        const S coef = g[r] / y[r];
        const S* xr = pa2 + r * d;
        S* dr = ga + r * d;
        for (int64_t j = 0; j < d; ++j) dr[j] += coef * xr[j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Mean cross entropy in nats from raw logits[..., V] against targets (one id
/// per logit row).
template <class S>
TensorT<S> cross_entropy_logits(const TensorT<S>& logits, const std::vector<int32_t>& targets) {
  if (logits.rank() < 2) throw std::invalid_argument("cross_entropy: logits must be [..., vocab]");
  const int64_t v = logits.dim(-1);
  const int64_t rows = logits.numel() / v;
  if (static_cast<int64_t>(targets.size()) != rows)
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(rows) + " rows");
  for (int32_t t : targets)
    if (t < 0 || t >= v) throw std::runtime_error("cross_entropy: target id out of range");

  const S* px = logits.ptr();
  std::vector<double> lses(static_cast<size_t>(rows));
  double* plse = lses.data();
  parallel_for(rows, 6 * v, [=](int64_t r) {
    const S* x = px + r * v;
    S mx = x[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(x[j]) - mx);
    plse[r] = static_cast<double>(mx) + std::log(sum);
  });
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r)
    total += lses[static_cast<size_t>(r)] - px[r * v + targets[static_cast<size_t>(r)]];
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(total / static_cast<double>(rows)));

  if (active_tape<S>() && logits.requires_grad) {
    mark_output(out);
    TensorT<S> tx = logits, to = out;
    record_op(out, [tx, to, targets, lses, rows, v]() mutable {
      const S g = (*to.grad)[0] / static_cast<S>(rows);
      const S* px2 = tx.ptr();
      S* gx = tx.grad->data();
      const double* plse2 = lses.data();
      parallel_for(rows, 6 * v, [=, &targets](int64_t r) {
        const S* x = px2 + r * v;
        S* d = gx + r * v;
        const double lse = plse2[r];
        for (int64_t j = 0; j < v; ++j)
          d[j] += g * static_cast<S>(std::exp(static_cast<double>(x[j]) - lse));
        d[targets[static_cast<size_t>(r)]] -= g;
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// rotary position embedding
// ---------------------------------------------------------------------------

/// Rotates channel pairs (2m, 2m+1) of x[..., T, d] by pos * theta^(-2m/d).
/// positions.size() must equal the second-to-last extent.
template <class S>
TensorT<S> rope_apply(const TensorT<S>& x, const std::vector<int64_t>& positions, double theta) {
  if (x.rank() < 2) throw std::invalid_argument("rope_apply: need rank >= 2");
  const int64_t d = x.dim(-1);
  const int64_t t_n = x.dim(-2);
  if (d % 2 != 0) throw std::invalid_argument("rope_apply: head dim must be even");
  if (static_cast<int64_t>(positions.size()) != t_n)
    throw std::invalid_argument("rope_apply: positions length != sequence extent");
  if (theta <= 0) throw std::invalid_argument("rope_apply: theta must be positive");

  const int64_t half = d / 2;
  auto cos_tab = std::make_shared<std::vector<S>>(static_cast<size_t>(t_n * half));
  auto sin_tab = std::make_shared<std::vector<S>>(static_cast<size_t>(t_n * half));
  for (int64_t t = 0; t < t_n; ++t) {
    for (int64_t m = 0; m < half; ++m) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(m) / static_cast<double>(d));
      const double ang = static_cast<double>(positions[static_cast<size_t>(t)]) * freq;
      (*cos_tab)[static_cast<size_t>(t * half + m)] = static_cast<S>(std::cos(ang));
      (*sin_tab)[static_cast<size_t>(t * half + m)] = static_cast<S>(std::sin(ang));
    }
  }

  const int64_t batch = x.numel() / (t_n * d);
  TensorT<S> out = TensorT<S>::zeros(x.shape);
  const S* px = x.ptr();
  S* po = out.ptr();
  const S* pc = cos_tab->data();
  const S* ps = sin_tab->data();
  parallel_for(batch * t_n, 4 * d, [=](int64_t idx) {
    const int64_t t = idx % t_n;
    const S* xr = px + idx * d;
    S* yr = po + idx * d;
    const S* ct = pc + t * half;
    const S* st = ps + t * half;
    for (int64_t m = 0; m < half; ++m) {
      const S x0 = xr[2 * m], x1 = xr[2 * m + 1];
      yr[2 * m] = x0 * ct[m] - x1 * st[m];
      yr[2 * m + 1] = x0 * st[m] + x1 * ct[m];
    }
  });

  if (active_tape<S>() && x.requires_grad) {
    mark_output(out);
    TensorT<S> tx = x, to = out;
    record_op(out, [tx, to, cos_tab, sin_tab, batch, t_n, d, half]() mutable {
      const S* g = to.grad_ptr();
      S* gx = tx.grad->data();
      const S* pc2 = cos_tab->data();
      const S* ps2 = sin_tab->data();
      parallel_for(batch * t_n, 4 * d, [=](int64_t idx) {
        const int64_t t = idx % t_n;
        const S* gr = g + idx * d;
        S* dr = gx + idx * d;
        const S* ct = pc2 + t * half;
        const S* st = ps2 + t * half;
        for (int64_t m = 0; m < half; ++m) {
          const S g0 = gr[2 * m], g1 = gr[2 * m + 1];
          dr[2 * m] += g0 * ct[m] + g1 * st[m];  // rotate grad by -angle
          dr[2 * m + 1] += -g0 * st[m] + g1 * ct[m];
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// exclusive-attention rejection
// ---------------------------------------------------------------------------

/// Removes from each y vector its component along the matching v vector:
/// z = y - (y . v_hat) v_hat with v_hat = v / max(|v|, eps). Operates on the
/// last axis; differentiable in both y and v.
template <class S>
TensorT<S> xsa_reject(const TensorT<S>& y, const TensorT<S>& v, double eps) {
  if (y.shape != v.shape)
    throw std::invalid_argument("xsa_reject: shapes differ, " + shape_str(y.shape) + " vs " +
                                shape_str(v.shape));
  if (eps <= 0) throw std::invalid_argument("xsa_reject: eps must be positive");
  const int64_t d = y.dim(-1);
  const int64_t rows = y.numel() / d;
  TensorT<S> out = TensorT<S>::zeros(y.shape);
  const S* py = y.ptr();
  const S* pv = v.ptr();
  S* po = out.ptr();
  parallel_for(rows, 6 * d, [=](int64_t r) {
    const S* yr = py + r * d;
    const S* vr = pv + r * d;
    S* zr = po + r * d;
    double n2 = 0.0, dot = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      n2 += static_cast<double>(vr[j]) * vr[j];
      dot += static_cast<double>(yr[j]) * vr[j];
    }
    const double c = std::max(std::sqrt(n2), eps);
    const S coef = static_cast<S>(dot / (c * c));
    for (int64_t j = 0; j < d; ++j) zr[j] = yr[j] - coef * vr[j];
  });

  if (active_tape<S>() && detail::rec_wanted(y, v)) {
    mark_output(out);
    TensorT<S> ty = y, tv = v, to = out;
    record_op(out, [ty, tv, to, rows, d, eps]() mutable {
      const S* g = to.grad_ptr();
      const S* py2 = ty.ptr();
      const S* pv2 = tv.ptr();
      S* gy = ty.requires_grad ? ty.grad->data() : nullptr;
      S* gv = tv.requires_grad ? tv.grad->data() : nullptr;
      parallel_for(rows, 12 * d, [=](int64_t r) {
        const S* yr = py2 + r * d;
        const S* vr = pv2 + r * d;
        const S* gr = g + r * d;
        double n2 = 0.0, dot_yv = 0.0, dot_gv = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          n2 += static_cast<double>(vr[j]) * vr[j];
          dot_yv += static_cast<double>(yr[j]) * vr[j];
          dot_gv += static_cast<double>(gr[j]) * vr[j];
        }
        const double n = std::sqrt(n2);
        const double c = std::max(n, eps);
        const double du = dot_yv / c;   // d = u . y
        const double s2 = dot_gv / c;   // s2 = g . u
        if (gy) {
          const S coef = static_cast<S>(dot_gv / (c * c));
          S* dy = gy + r * d;
          for (int64_t j = 0; j < d; ++j) dy[j] += gr[j] - coef * vr[j];
        }
        if (gv) {
          S* dv = gv + r * d;
          if (n >= eps) {
            // gv = (gu + 2 (u.y)(g.u) u) / n with gu = -(u.y) g - (g.u) y
            const double a = -du / n, b = -s2 / n, cc = 2.0 * du * s2 / (n * c);
            for (int64_t j = 0; j < d; ++j)
              dv[j] += static_cast<S>(a * gr[j] + b * yr[j] + cc * vr[j]);
          } else {
            const double a = -du / eps, b = -s2 / eps;
            for (int64_t j = 0; j < d; ++j) dv[j] += static_cast<S>(a * gr[j] + b * yr[j]);
          }
        }
      });
    });
  }
  return out;
}

/// [T,T] additive causal mask: 0 on j <= i, -inf above the diagonal.
template <class S>
TensorT<S> make_causal_mask(int64_t t_n) {
  TensorT<S> m = TensorT<S>::zeros({t_n, t_n});
  S* p = m.ptr();
  const S neg_inf = -std::numeric_limits<S>::infinity();
  for (int64_t i = 0; i < t_n; ++i)
    for (int64_t j = i + 1; j < t_n; ++j) p[i * t_n + j] = neg_inf;
  return m;
}

}  // namespace xsalab
