#include "xsalab/common.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>

namespace xsalab {

namespace {

int default_threads() {
  if (const char* env = std::getenv("XSALAB_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

int& thread_count() {
  static int n = default_threads();
  return n;
}

}  // namespace

int num_threads() { return thread_count(); }

void set_num_threads(int n) { thread_count() = std::max(1, n); }

}  // namespace xsalab
