#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "xsalab/common.hpp"

namespace xsalab {

/// Shortest exact decimal form: parsing it back yields the identical double,
/// and re-emitting yields the identical string.
inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct LossRow {
  int64_t step = 0;
  std::string split;  // "train" or "val"
  double loss = 0.0;
  double lr = 0.0;
  int64_t tokens_seen = 0;
  double wallclock_s = 0.0;
};

inline const char* kLossLogHeader = "step,split,loss,lr,tokens_seen,wallclock_s";

/// Append-only training log writer.
class LossLog {
 public:
  explicit LossLog(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot open loss log for writing: " + path);
    out_ << kLossLogHeader << "\n";
  }

  void append(const LossRow& r) {
    out_ << r.step << ',' << r.split << ',' << fmt_g17(r.loss) << ',' << fmt_g17(r.lr) << ','
         << r.tokens_seen << ',' << fmt_g17(r.wallclock_s) << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
};

std::vector<LossRow> parse_loss_log(const std::string& path);
void write_loss_log(const std::string& path, const std::vector<LossRow>& rows);

}  // namespace xsalab
