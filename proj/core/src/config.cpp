#include "xsalab/config.hpp"

#include <fstream>
#include <sstream>

#include "xsalab/io.hpp"

namespace xsalab {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int64_t to_i64(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    int64_t x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return x;
  } catch (...) {
    throw std::invalid_argument("config: '" + key + "' expects an integer, got '" + v + "'");
  }
}

double to_f64(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return x;
  } catch (...) {
    throw std::invalid_argument("config: '" + key + "' expects a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw std::invalid_argument("config: '" + key + "' expects a boolean, got '" + v + "'");
}

uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    uint64_t x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return x;
  } catch (...) {
    throw std::invalid_argument("config: '" + key + "' expects an unsigned integer, got '" + v +
                                "'");
  }
}

}  // namespace

KvPairs parse_kv_text(const std::string& text) {
  KvPairs kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected 'key = value'");
    kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return kv;
}

KvPairs parse_kv_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_kv_text(text);
}

void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  ModelConfig& m = cfg.model;
  TrainConfig& t = cfg.train;
  if (key == "n_layers") m.n_layers = to_i64(key, value);
  else if (key == "d_model") m.d_model = to_i64(key, value);
  else if (key == "n_heads") m.n_heads = to_i64(key, value);
  else if (key == "d_head") m.d_head = to_i64(key, value);
  else if (key == "vocab_size") m.vocab_size = to_i64(key, value);
  else if (key == "max_seq_len") m.max_seq_len = to_i64(key, value);
  else if (key == "mode") m.mode = mode_from_name(value);
  else if (key == "n_sinks") m.n_sinks = to_i64(key, value);
  else if (key == "ffn_mult") m.ffn_mult = to_i64(key, value);
  else if (key == "tie_embeddings") m.tie_embeddings = to_bool(key, value);
  else if (key == "rope_theta") m.rope_theta = to_f64(key, value);
  else if (key == "rejection_eps") m.rejection_eps = to_f64(key, value);
  else if (key == "init_seed") m.init_seed = to_u64(key, value);
  else if (key == "max_lr") t.max_lr = to_f64(key, value);
  else if (key == "warmup_steps") t.warmup_steps = to_i64(key, value);
  else if (key == "total_steps") t.total_steps = to_i64(key, value);
  else if (key == "final_lr_frac") t.final_lr_frac = to_f64(key, value);
  else if (key == "batch_tokens") t.batch_tokens = to_i64(key, value);
  else if (key == "seq_len") t.seq_len = to_i64(key, value);
  else if (key == "beta1") t.beta1 = to_f64(key, value);
  else if (key == "beta2") t.beta2 = to_f64(key, value);
  else if (key == "eps_adam") t.eps_adam = to_f64(key, value);
  else if (key == "weight_decay") t.weight_decay = to_f64(key, value);
  else if (key == "grad_clip") t.grad_clip = to_f64(key, value);
  else if (key == "seed") t.seed = to_u64(key, value);
  else if (key == "eval_every") t.eval_every = to_i64(key, value);
  else if (key == "checkpoint_every") t.checkpoint_every = to_i64(key, value);
  else if (key == "corpus") t.corpus_path = value;
  else if (key == "vocab_file") t.vocab_path = value;
  else if (key == "val_frac") t.val_frac = to_f64(key, value);
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

RunConfig run_config_from_kv(const KvPairs& kv) {
  RunConfig cfg;
  for (const auto& [k, v] : kv) apply_config_key(cfg, k, v);
  return cfg;
}

KvPairs model_config_to_kv(const ModelConfig& m, const std::string& prefix) {
  KvPairs kv;
  kv.emplace_back(prefix + "n_layers", std::to_string(m.n_layers));
  kv.emplace_back(prefix + "d_model", std::to_string(m.d_model));
  kv.emplace_back(prefix + "n_heads", std::to_string(m.n_heads));
  kv.emplace_back(prefix + "d_head", std::to_string(m.d_head));
  kv.emplace_back(prefix + "vocab_size", std::to_string(m.vocab_size));
  kv.emplace_back(prefix + "max_seq_len", std::to_string(m.max_seq_len));
  kv.emplace_back(prefix + "mode", mode_name(m.mode));
  kv.emplace_back(prefix + "n_sinks", std::to_string(m.n_sinks));
  kv.emplace_back(prefix + "ffn_mult", std::to_string(m.ffn_mult));
  kv.emplace_back(prefix + "tie_embeddings", m.tie_embeddings ? "1" : "0");
  kv.emplace_back(prefix + "rope_theta", fmt_g17(m.rope_theta));
  kv.emplace_back(prefix + "rejection_eps", fmt_g17(m.rejection_eps));
  kv.emplace_back(prefix + "init_seed", std::to_string(m.init_seed));
  return kv;
}

ModelConfig model_config_from_kv(const KvPairs& kv, const std::string& prefix) {
  RunConfig tmp;
  bool any = false;
  for (const auto& [k, v] : kv) {
    if (k.rfind(prefix, 0) != 0) continue;
    apply_config_key(tmp, k.substr(prefix.size()), v);
    any = true;
  }
  if (!any) throw std::invalid_argument("no model config keys with prefix '" + prefix + "'");
  return tmp.model;
}

KvPairs run_config_to_kv(const RunConfig& cfg) {
  KvPairs kv = model_config_to_kv(cfg.model, "");
  const TrainConfig& t = cfg.train;
  kv.emplace_back("max_lr", fmt_g17(t.max_lr));
  kv.emplace_back("warmup_steps", std::to_string(t.warmup_steps));
  kv.emplace_back("total_steps", std::to_string(t.total_steps));
  kv.emplace_back("final_lr_frac", fmt_g17(t.final_lr_frac));
  kv.emplace_back("batch_tokens", std::to_string(t.batch_tokens));
  kv.emplace_back("seq_len", std::to_string(t.seq_len));
  kv.emplace_back("beta1", fmt_g17(t.beta1));
  kv.emplace_back("beta2", fmt_g17(t.beta2));
  kv.emplace_back("eps_adam", fmt_g17(t.eps_adam));
  kv.emplace_back("weight_decay", fmt_g17(t.weight_decay));
  kv.emplace_back("grad_clip", fmt_g17(t.grad_clip));
  kv.emplace_back("seed", std::to_string(t.seed));
  kv.emplace_back("eval_every", std::to_string(t.eval_every));
  kv.emplace_back("checkpoint_every", std::to_string(t.checkpoint_every));
  kv.emplace_back("corpus", t.corpus_path);
  kv.emplace_back("vocab_file", t.vocab_path);
  kv.emplace_back("val_frac", fmt_g17(t.val_frac));
  return kv;
}

void write_run_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write config file: " + path);
  for (const auto& [k, v] : run_config_to_kv(cfg)) out << k << " = " << v << "\n";
}

}  // namespace xsalab
