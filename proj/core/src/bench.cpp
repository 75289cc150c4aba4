#include "xsalab/bench.hpp"

#include <fstream>

#include <json.hpp>

#ifdef __unix__
#include <unistd.h>
#endif

namespace xsalab {

std::string host_description() {
  std::string host = "unknown-host";
#ifdef __unix__
  char buf[256] = {0};
  if (gethostname(buf, sizeof(buf) - 1) == 0 && buf[0]) host = buf;
#endif
  std::string cpu = "unknown-cpu";
  std::ifstream info("/proc/cpuinfo");
  std::string line;
  while (std::getline(info, line)) {
    if (line.rfind("model name", 0) == 0) {
      size_t colon = line.find(':');
      if (colon != std::string::npos) {
        cpu = line.substr(colon + 1);
        size_t b = cpu.find_first_not_of(' ');
        if (b != std::string::npos) cpu = cpu.substr(b);
      }
      break;
    }
  }
  return host + " / " + cpu;
}

void bench_emit_json(const BenchReport& r, const std::string& path) {
  nlohmann::json j;
  j["manifest"]["precision"] = r.options.precision;
  j["manifest"]["batch"] = r.options.batch;
  j["manifest"]["repeats"] = r.options.repeats;
  j["manifest"]["host"] = r.host;
  j["manifest"]["warmup"] = r.options.warmup;
  j["manifest"]["d_head"] = r.options.d_head;
  j["manifest"]["measure"] = r.measure;
  j["manifest"]["threads"] = r.threads;
  j["manifest"]["seed"] = r.options.seed;
  j["cells"] = nlohmann::json::array();
  for (const auto& c : r.cells) {
    nlohmann::json jc;
    jc["mode"] = c.mode;
    jc["seq_len"] = c.seq_len;
    jc["d_model"] = c.d_model;
    if (c.skipped) {
      jc["skipped"] = true;
    } else {
      jc["median_ms"] = c.median_ms;
      jc["p10_ms"] = c.p10_ms;
      jc["p90_ms"] = c.p90_ms;
      jc["peak_bytes"] = c.peak_bytes;
    }
    j["cells"].push_back(jc);
  }
  j["ratios"] = nlohmann::json::array();
  for (const auto& t : r.ratios) {
    nlohmann::json jt;
    jt["seq_len"] = t.seq_len;
    jt["d_model"] = t.d_model;
    jt["time_ratio"] = t.time_ratio;
    jt["mem_ratio"] = t.mem_ratio;
    j["ratios"].push_back(jt);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write bench json: " + path);
  out << j.dump(2) << "\n";
}

}  // namespace xsalab
