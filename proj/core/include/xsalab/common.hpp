#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace xsalab {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) {
    if (e < 0) throw std::invalid_argument("negative extent in shape");
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

// ---- allocation accounting ----
//
// Every tensor buffer goes through make_buffer so the benchmark can report
// the peak transient footprint of a timed region.

namespace memstat {

inline std::atomic<int64_t>& current() {
  static std::atomic<int64_t> v{0};
  return v;
}
inline std::atomic<int64_t>& peak() {
  static std::atomic<int64_t> v{0};
  return v;
}

inline void on_alloc(int64_t bytes) {
  int64_t cur = current().fetch_add(bytes, std::memory_order_relaxed) + bytes;
  int64_t p = peak().load(std::memory_order_relaxed);
  while (cur > p && !peak().compare_exchange_weak(p, cur, std::memory_order_relaxed)) {
  }
}

inline void on_free(int64_t bytes) { current().fetch_sub(bytes, std::memory_order_relaxed); }

inline int64_t current_bytes() { return current().load(); }
inline int64_t peak_bytes() { return peak().load(); }

// Resets the high-water mark to the currently live byte count.
inline void reset_peak() { peak().store(current().load()); }

}  // namespace memstat

// ---- buffer pool ----
//
// Freed buffers are parked by exact size and re-zeroed on reuse: a cached
// memset is an order of magnitude cheaper than first-touch page faults on
// the multi-hundred-MB attention score tensors. Pooling changes addresses
// only, never values, and memstat still tracks logical tensor lifetimes.

namespace detail {

template <class S>
struct BufferPool {
  std::mutex mu;
  std::unordered_map<int64_t, std::vector<std::vector<S>*>> free_lists;
  int64_t held_bytes = 0;
  int64_t cap_bytes = int64_t(3) << 30;

  static BufferPool& instance() {
    static BufferPool pool;
    return pool;
  }

  std::vector<S>* pop(int64_t n) {
    std::lock_guard<std::mutex> lock(mu);
    auto it = free_lists.find(n);
    if (it == free_lists.end() || it->second.empty()) return nullptr;
    std::vector<S>* v = it->second.back();
    it->second.pop_back();
    held_bytes -= n * static_cast<int64_t>(sizeof(S));
    return v;
  }

  bool push(std::vector<S>* v) {
    const int64_t bytes = static_cast<int64_t>(v->size() * sizeof(S));
    std::lock_guard<std::mutex> lock(mu);
    if (held_bytes + bytes > cap_bytes) return false;
    free_lists[static_cast<int64_t>(v->size())].push_back(v);
    held_bytes += bytes;
    return true;
  }
};

}  // namespace detail

template <class S>
std::shared_ptr<std::vector<S>> make_buffer(int64_t n) {
  const int64_t bytes = n * static_cast<int64_t>(sizeof(S));
  memstat::on_alloc(bytes);
  auto& pool = detail::BufferPool<S>::instance();
  std::vector<S>* vec = pool.pop(n);
  if (vec)
    std::fill(vec->begin(), vec->end(), S(0));
  else
    vec = new std::vector<S>(static_cast<size_t>(n));
  return std::shared_ptr<std::vector<S>>(vec, [bytes](std::vector<S>* p) {
    memstat::on_free(bytes);
    if (!detail::BufferPool<S>::instance().push(p)) delete p;
  });
}

// ---- thread control ----
//
// Kernels parallelize over independent output rows, so results are bitwise
// identical for any thread count.

int num_threads();
void set_num_threads(int n);

}  // namespace xsalab
