#pragma once

#include <bit>
#include <cstring>
#include <fstream>

#include "xsalab/config.hpp"
#include "xsalab/io.hpp"
#include "xsalab/optim.hpp"

namespace xsalab {

struct CheckpointMeta {
  int64_t step = 0;
  int64_t tokens_seen = 0;
  uint64_t rng_state = 0;
  int64_t schedule_step = 0;
};

namespace detail {

template <class S>
constexpr const char* dtype_name();
template <>
constexpr const char* dtype_name<float>() {
  return "f32";
}
template <>
constexpr const char* dtype_name<double>() {
  return "f64";
}

inline std::string shape_spec(const Shape& s) {
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return s.empty() ? "1" : out;
}

}  // namespace detail

/// One file: a human-readable key-value manifest (config, step, RNG state,
/// schedule position, parameter index with name/shape/offset/dtype) followed
/// by a single little-endian blob holding parameters, then optimizer moments,
/// in manifest order. Round trips are bit-exact at equal precision.
template <class S>
void save_checkpoint(const std::string& path, const ModelT<S>& model, const CheckpointMeta& meta,
                     AdamW<S>* opt = nullptr) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint blobs are little-endian");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);

  auto params = model.parameters();
  out << "xsalab-checkpoint v1\n";
  out << "dtype " << detail::dtype_name<S>() << "\n";
  out << "byteorder little\n";
  out << "step " << meta.step << "\n";
  out << "tokens_seen " << meta.tokens_seen << "\n";
  out << "rng_state " << meta.rng_state << "\n";
  out << "schedule_step " << meta.schedule_step << "\n";
  for (const auto& [k, v] : model_config_to_kv(model.config(), "model."))
    out << k << " " << v << "\n";

  int64_t offset = 0;
  out << "params " << params.size() << "\n";
  for (const auto& p : params) {
    const int64_t bytes = p.tensor.numel() * static_cast<int64_t>(sizeof(S));
    out << "param " << p.name << " " << detail::shape_spec(p.tensor.shape) << " " << offset
        << "\n";
    offset += bytes;
  }
  if (opt) {
    out << "adamw_step " << opt->step_count() << "\n";
    out << "moments " << 2 * params.size() << "\n";
    for (size_t i = 0; i < params.size(); ++i) {
      const int64_t bytes = params[i].tensor.numel() * static_cast<int64_t>(sizeof(S));
      out << "moment m " << params[i].name << " " << offset << "\n";
      offset += bytes;
      out << "moment v " << params[i].name << " " << offset << "\n";
      offset += bytes;
    }
  }
  out << "blob " << offset << "\n";
  for (const auto& p : params)
    out.write(reinterpret_cast<const char*>(p.tensor.ptr()),
              p.tensor.numel() * static_cast<int64_t>(sizeof(S)));
  if (opt) {
    for (size_t i = 0; i < params.size(); ++i) {
      out.write(reinterpret_cast<const char*>(opt->first_moment(i).data()),
                static_cast<int64_t>(opt->first_moment(i).size() * sizeof(S)));
      out.write(reinterpret_cast<const char*>(opt->second_moment(i).data()),
                static_cast<int64_t>(opt->second_moment(i).size() * sizeof(S)));
    }
  }
  if (!out) throw std::runtime_error("short write on checkpoint: " + path);
}

namespace detail {

struct ManifestEntry {
  std::string kind;  // "param" or "m"/"v" moment
  std::string name;
  int64_t offset = 0;
};

struct RawManifest {
  KvPairs kv;
  std::vector<ManifestEntry> params;
  std::vector<ManifestEntry> moments;
  int64_t blob_bytes = 0;
  std::streampos blob_start;
};

inline std::string manifest_get(const KvPairs& kv, const std::string& key) {
  for (const auto& [k, v] : kv)
    if (k == key) return v;
  throw std::runtime_error("checkpoint manifest missing key '" + key + "'");
}

inline RawManifest read_manifest(std::ifstream& in, const std::string& path) {
  RawManifest mf;
  std::string line;
  if (!std::getline(in, line) || line != "xsalab-checkpoint v1")
    throw std::runtime_error(path + " is not an xsalab checkpoint");
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "param") {
      ManifestEntry e;
      ls >> e.name;
      std::string shape;
      ls >> shape >> e.offset;
      mf.params.push_back(e);
    } else if (key == "moment") {
      ManifestEntry e;
      ls >> e.kind >> e.name >> e.offset;
      mf.moments.push_back(e);
    } else if (key == "params" || key == "moments") {
      // counts are advisory; entries carry the real layout
    } else if (key == "blob") {
      ls >> mf.blob_bytes;
      mf.blob_start = in.tellg();
      return mf;
    } else {
      std::string rest;
      std::getline(ls, rest);
      size_t b = rest.find_first_not_of(' ');
      mf.kv.emplace_back(key, b == std::string::npos ? "" : rest.substr(b));
    }
  }
  throw std::runtime_error("checkpoint manifest ended before blob: " + path);
}

template <class Dst>
void read_blob_as(std::ifstream& in, std::streampos blob_start, int64_t offset_bytes,
                  const std::string& dtype, Dst* dst, int64_t count) {
  in.seekg(blob_start + std::streamoff(offset_bytes));
  if (dtype == "f32") {
    std::vector<float> tmp(static_cast<size_t>(count));
    in.read(reinterpret_cast<char*>(tmp.data()), count * 4);
    for (int64_t i = 0; i < count; ++i) dst[i] = static_cast<Dst>(tmp[static_cast<size_t>(i)]);
  } else if (dtype == "f64") {
    std::vector<double> tmp(static_cast<size_t>(count));
    in.read(reinterpret_cast<char*>(tmp.data()), count * 8);
    for (int64_t i = 0; i < count; ++i) dst[i] = static_cast<Dst>(tmp[static_cast<size_t>(i)]);
  } else {
    throw std::runtime_error("checkpoint dtype '" + dtype + "' not supported");
  }
  if (!in) throw std::runtime_error("short read in checkpoint blob");
}

}  // namespace detail

/// Rebuilds the model from the manifest config and fills parameters from the
/// blob. Loading into a wider scalar type upcasts values; at equal precision
/// the round trip is bit-identical.
template <class S>
ModelT<S> load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr,
                          AdamW<S>* opt = nullptr) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint blobs are little-endian");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  detail::RawManifest mf = detail::read_manifest(in, path);

  const std::string dtype = detail::manifest_get(mf.kv, "dtype");
  if (detail::manifest_get(mf.kv, "byteorder") != "little")
    throw std::runtime_error("checkpoint byte order not supported");

  ModelConfig cfg = model_config_from_kv(mf.kv, "model.");
  ModelT<S> model = ModelT<S>::build(cfg);
  auto params = model.parameters();
  if (params.size() != mf.params.size())
    throw std::runtime_error("checkpoint parameter count mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != mf.params[i].name)
      throw std::runtime_error("checkpoint parameter order mismatch at '" + mf.params[i].name +
                               "'");
    detail::read_blob_as(in, mf.blob_start, mf.params[i].offset, dtype, params[i].tensor.ptr(),
                         params[i].tensor.numel());
  }
  if (meta) {
    meta->step = std::stoll(detail::manifest_get(mf.kv, "step"));
    meta->tokens_seen = std::stoll(detail::manifest_get(mf.kv, "tokens_seen"));
    meta->rng_state = std::stoull(detail::manifest_get(mf.kv, "rng_state"));
    meta->schedule_step = std::stoll(detail::manifest_get(mf.kv, "schedule_step"));
  }
  if (opt) {
    if (mf.moments.empty())
      throw std::runtime_error("checkpoint has no optimizer moments: " + path);
    if (opt->slot_count() != params.size())
      throw std::runtime_error("optimizer slot count mismatch");
    for (const auto& e : mf.moments) {
      size_t idx = params.size();
      for (size_t i = 0; i < params.size(); ++i)
        if (params[i].name == e.name) {
          idx = i;
          break;
        }
      if (idx == params.size())
        throw std::runtime_error("moment for unknown parameter '" + e.name + "'");
      auto& vec = e.kind == "m" ? opt->first_moment(idx) : opt->second_moment(idx);
      detail::read_blob_as(in, mf.blob_start, e.offset, dtype, vec.data(),
                           static_cast<int64_t>(vec.size()));
    }
    opt->set_step_count(std::stoll(detail::manifest_get(mf.kv, "adamw_step")));
  }
  return model;
}

}  // namespace xsalab
