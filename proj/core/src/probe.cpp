#include "xsalab/probe.hpp"

#include <fstream>

#include <json.hpp>

#include "xsalab/io.hpp"

namespace xsalab {

void probe_emit_csv(const ProbeReport& r, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write probe csv: " + path);
  out << kProbeCsvHeader << "\n";
  for (const auto& l : r.layers)
    out << l.layer << ',' << fmt_g17(l.mean_vv) << ',' << fmt_g17(l.mean_diag) << ','
        << fmt_g17(l.mean_yv) << ',' << r.n_sequences << ',' << r.n_heads << ','
        << r.n_positions << "\n";
}

ProbeReport probe_parse_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open probe csv: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kProbeCsvHeader)
    throw std::runtime_error("probe csv has unexpected header: " + path);
  ProbeReport r;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> f;
    while (std::getline(ls, field, ',')) f.push_back(field);
    if (f.size() != 7) throw std::runtime_error("probe csv row with wrong field count");
    ProbeLayerStats st;
    st.layer = std::stoll(f[0]);
    st.mean_vv = std::stod(f[1]);
    st.mean_diag = std::stod(f[2]);
    st.mean_yv = std::stod(f[3]);
    r.layers.push_back(st);
    r.n_sequences = std::stoll(f[4]);
    r.n_heads = std::stoll(f[5]);
    r.n_positions = std::stoll(f[6]);
  }
  return r;
}

void probe_emit_json(const ProbeReport& r, const std::string& path) {
  nlohmann::json j;
  j["mode"] = r.mode;
  j["seq_len"] = r.seq_len;
  j["n_sinks"] = r.n_sinks;
  j["n_sequences"] = r.n_sequences;
  j["n_heads"] = r.n_heads;
  j["n_positions"] = r.n_positions;
  j["layers"] = nlohmann::json::array();
  for (const auto& l : r.layers) {
    nlohmann::json jl;
    jl["layer"] = l.layer;
    jl["mean_vv"] = l.mean_vv;
    jl["mean_diag"] = l.mean_diag;
    jl["mean_yv"] = l.mean_yv;
    j["layers"].push_back(jl);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write probe json: " + path);
  out << j.dump(2) << "\n";
}

ProbeReport probe_parse_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open probe json: " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  ProbeReport r;
  r.mode = j.value("mode", "");
  r.seq_len = j.value("seq_len", 0);
  r.n_sinks = j.value("n_sinks", 0);
  r.n_sequences = j.value("n_sequences", 0);
  r.n_heads = j.value("n_heads", 0);
  r.n_positions = j.value("n_positions", 0);
  for (const auto& jl : j.at("layers")) {
    ProbeLayerStats st;
    st.layer = jl.at("layer").get<int64_t>();
    st.mean_vv = jl.at("mean_vv").get<double>();
    st.mean_diag = jl.at("mean_diag").get<double>();
    st.mean_yv = jl.at("mean_yv").get<double>();
    r.layers.push_back(st);
  }
  return r;
}

}  // namespace xsalab
