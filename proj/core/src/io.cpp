#include "xsalab/io.hpp"

#include <sstream>
#include <stdexcept>

namespace xsalab {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace

std::vector<LossRow> parse_loss_log(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open loss log: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kLossLogHeader)
    throw std::runtime_error("loss log " + path + " has unexpected header");
  std::vector<LossRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != 6) throw std::runtime_error("loss log row with " + std::to_string(f.size()) +
                                                " fields");
    LossRow r;
    r.step = std::stoll(f[0]);
    r.split = f[1];
    r.loss = std::stod(f[2]);
    r.lr = std::stod(f[3]);
    r.tokens_seen = std::stoll(f[4]);
    r.wallclock_s = std::stod(f[5]);
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_loss_log(const std::string& path, const std::vector<LossRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open loss log for writing: " + path);
  out << kLossLogHeader << "\n";
  for (const auto& r : rows)
    out << r.step << ',' << r.split << ',' << fmt_g17(r.loss) << ',' << fmt_g17(r.lr) << ','
        << r.tokens_seen << ',' << fmt_g17(r.wallclock_s) << "\n";
}

}  // namespace xsalab
