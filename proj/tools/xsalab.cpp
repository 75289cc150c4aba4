// Command-line front end: train / probe / bench / sample.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "xsalab/bench.hpp"
#include "xsalab/checkpoint.hpp"
#include "xsalab/config.hpp"
#include "xsalab/probe.hpp"
#include "xsalab/trainer.hpp"

namespace {

using namespace xsalab;

struct TrainArgs {
  std::string config_path, corpus, out_dir = "out", mode, vocab_file;
  std::string precision = "f32";
  int64_t sinks = -1, seq_len = 0, steps = 0, batch_tokens = 0, warmup = -1, eval_every = -1;
  int64_t checkpoint_every = -1;
  double lr = 0;
  uint64_t seed = 0;
  uint64_t init_seed = 0;
  bool quiet = false;
};

Tokenizer tokenizer_for(const std::string& vocab_file) {
  return vocab_file.empty() ? Tokenizer::bytes() : Tokenizer::from_vocab_file(vocab_file);
}

template <class S>
int run_train_typed(const RunConfig& cfg, const std::string& out_dir, bool quiet) {
  Tokenizer tok = tokenizer_for(cfg.train.vocab_path);
  Corpus corpus = load_corpus(cfg.train.corpus_path, tok, cfg.train.val_frac);
  ModelT<S> model = ModelT<S>::build(cfg.model);
  std::filesystem::create_directories(out_dir);
  write_run_config(out_dir + "/config.txt", cfg);
  TrainResult<S> res = train_model(model, corpus, cfg.train, out_dir, quiet);
  std::printf("trained %lld steps: initial loss %.4f, final loss %.4f%s\n",
              static_cast<long long>(res.steps_run), res.initial_loss, res.final_loss,
              res.halted_on_nan ? " (halted on non-finite loss)" : "");
  std::printf("checkpoint: %s\n", res.final_checkpoint.c_str());
  return res.halted_on_nan ? 1 : 0;
}

int run_train(const TrainArgs& args, const CLI::App* cmd) {
  RunConfig cfg;
  if (!args.config_path.empty()) cfg = load_run_config(args.config_path);
  if (cmd->count("--corpus")) cfg.train.corpus_path = args.corpus;
  if (cmd->count("--mode")) cfg.model.mode = mode_from_name(args.mode);
  if (cmd->count("--sinks")) cfg.model.n_sinks = args.sinks;
  if (cmd->count("--seq-len")) {
    cfg.train.seq_len = args.seq_len;
    if (cfg.model.max_seq_len < args.seq_len) cfg.model.max_seq_len = args.seq_len;
  }
  if (cmd->count("--lr")) cfg.train.max_lr = args.lr;
  if (cmd->count("--seed")) cfg.train.seed = args.seed;
  if (cmd->count("--init-seed")) cfg.model.init_seed = args.init_seed;
  if (cmd->count("--steps")) cfg.train.total_steps = args.steps;
  if (cmd->count("--warmup")) cfg.train.warmup_steps = args.warmup;
  if (cmd->count("--batch-tokens")) cfg.train.batch_tokens = args.batch_tokens;
  if (cmd->count("--eval-every")) cfg.train.eval_every = args.eval_every;
  if (cmd->count("--checkpoint-every")) cfg.train.checkpoint_every = args.checkpoint_every;
  if (cmd->count("--vocab-file")) cfg.train.vocab_path = args.vocab_file;
  if (cfg.train.corpus_path.empty())
    throw std::invalid_argument("train: no corpus given (use --corpus or a config file)");
  // the tokenizer is the single source of truth for the vocab
  cfg.model.vocab_size = tokenizer_for(cfg.train.vocab_path).vocab_size();
  cfg.train.validate();
  cfg.model.validate();
  if (args.precision == "f32") return run_train_typed<float>(cfg, args.out_dir, args.quiet);
  if (args.precision == "f64") return run_train_typed<double>(cfg, args.out_dir, args.quiet);
  throw std::invalid_argument("train: precision must be f32 or f64");
}

struct ProbeArgs {
  std::string checkpoint, corpus, out = "probe.csv", format = "csv", capture = "diag";
  std::string vocab_file;
  int64_t sequences = 1024, seq_len = 0;
  uint64_t seed = 0;
};

int run_probe(const ProbeArgs& args) {
  if (args.format != "csv" && args.format != "json")
    throw std::invalid_argument("probe: format must be csv or json");
  if (args.capture != "diag" && args.capture != "full")
    throw std::invalid_argument("probe: capture must be diag or full");
  // probing always happens in double so the statistics carry no compute noise
  ModelT<double> model = load_checkpoint<double>(args.checkpoint);
  Tokenizer tok = tokenizer_for(args.vocab_file);
  Corpus corpus = load_corpus(args.corpus, tok, 0.0);
  ProbeOptions opts;
  opts.n_sequences = args.sequences;
  opts.seq_len = args.seq_len > 0 ? args.seq_len : model.config().max_seq_len;
  opts.seed = args.seed;
  opts.full_rows = args.capture == "full";
  ProbeReport report = probe_run(model, corpus.ids, opts);
  if (args.format == "csv")
    probe_emit_csv(report, args.out);
  else
    probe_emit_json(report, args.out);
  for (const auto& l : report.layers)
    std::printf("layer %lld: mean_vv %.6f  mean_diag %.6f  mean_yv %.6f\n",
                static_cast<long long>(l.layer), l.mean_vv, l.mean_diag, l.mean_yv);
  std::printf("report: %s\n", args.out.c_str());
  return 0;
}

struct BenchArgs {
  std::string modes = "sa,xsa", seq_lens = "256,512,1024,2048", d_models = "256,512";
  std::string out = "bench.json", precision = "f32";
  int64_t batch = 4, repeats = 20, warmup = 2, d_head = 64, threads = 0;
  uint64_t seed = 2024;
  bool backward = false;
};

std::vector<int64_t> parse_i64_list(const std::string& key, const std::string& csv) {
  std::vector<int64_t> out;
  std::string cur;
  std::istringstream in(csv);
  while (std::getline(in, cur, ',')) {
    try {
      out.push_back(std::stoll(cur));
    } catch (...) {
      throw std::invalid_argument(key + ": cannot parse '" + cur + "'");
    }
  }
  return out;
}

int run_bench(const BenchArgs& args) {
  BenchOptions opts;
  opts.modes.clear();
  std::istringstream in(args.modes);
  std::string m;
  while (std::getline(in, m, ',')) opts.modes.push_back(mode_from_name(m));
  opts.seq_lens = parse_i64_list("--seq-lens", args.seq_lens);
  opts.d_models = parse_i64_list("--d-models", args.d_models);
  opts.batch = args.batch;
  opts.repeats = args.repeats;
  opts.warmup = args.warmup;
  opts.d_head = args.d_head;
  opts.with_backward = args.backward;
  opts.precision = args.precision;
  opts.seed = args.seed;
  opts.validate();
  if (args.threads > 0) set_num_threads(static_cast<int>(args.threads));
  BenchReport report = bench_block(opts);
  bench_emit_json(report, args.out);
  for (const auto& c : report.cells) {
    if (c.skipped)
      std::printf("%4s T=%-5lld d=%-4lld skipped (out of memory)\n", c.mode.c_str(),
                  static_cast<long long>(c.seq_len), static_cast<long long>(c.d_model));
    else
      std::printf("%4s T=%-5lld d=%-4lld median %8.2f ms  peak %9.1f MB\n", c.mode.c_str(),
                  static_cast<long long>(c.seq_len), static_cast<long long>(c.d_model),
                  c.median_ms, static_cast<double>(c.peak_bytes) / 1e6);
  }
  for (const auto& r : report.ratios)
    std::printf("ratio T=%-5lld d=%-4lld time %.4f  mem %.4f\n",
                static_cast<long long>(r.seq_len), static_cast<long long>(r.d_model),
                r.time_ratio, r.mem_ratio);
  std::printf("report: %s\n", args.out.c_str());
  return 0;
}

struct SampleArgs {
  std::string checkpoint, prompt = "The ", out, vocab_file;
  int64_t tokens = 128;
  double temperature = 1.0;
  uint64_t seed = 0;
};

int run_sample(const SampleArgs& args) {
  ModelT<float> model = load_checkpoint<float>(args.checkpoint);
  Tokenizer tok = tokenizer_for(args.vocab_file);
  std::vector<int32_t> prompt = tok.encode(args.prompt);
  auto ids = model.sample(prompt, args.tokens, args.temperature, args.seed);
  const std::string text = tok.decode(ids);
  if (args.out.empty()) {
    std::fwrite(text.data(), 1, text.size(), stdout);
    std::printf("\n");
  } else {
    std::ofstream f(args.out, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + args.out);
    f << text;
    std::printf("wrote %zu bytes to %s\n", text.size(), args.out.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xsalab: a desk-scale lab for exclusive self attention"};
  app.require_subcommand(1);

  TrainArgs train_args;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model on a byte corpus");
  train_cmd->add_option("--config", train_args.config_path, "key = value config file");
  train_cmd->add_option("--corpus", train_args.corpus, "path to the training text");
  train_cmd->add_option("--out", train_args.out_dir, "output directory");
  train_cmd->add_option("--mode", train_args.mode, "attention mode: sa | xsa");
  train_cmd->add_option("--sinks", train_args.sinks, "number of learned sink tokens");
  train_cmd->add_option("--seq-len", train_args.seq_len, "training sequence length");
  train_cmd->add_option("--lr", train_args.lr, "maximum learning rate");
  train_cmd->add_option("--seed", train_args.seed, "data/run seed");
  train_cmd->add_option("--init-seed", train_args.init_seed, "weight init seed");
  train_cmd->add_option("--steps", train_args.steps, "total optimizer steps");
  train_cmd->add_option("--warmup", train_args.warmup, "linear warmup steps");
  train_cmd->add_option("--batch-tokens", train_args.batch_tokens, "tokens per batch");
  train_cmd->add_option("--eval-every", train_args.eval_every, "validation interval");
  train_cmd->add_option("--checkpoint-every", train_args.checkpoint_every,
                        "periodic checkpoint interval");
  train_cmd->add_option("--vocab-file", train_args.vocab_file, "newline-delimited vocab");
  train_cmd->add_option("--precision", train_args.precision, "f32 | f64");
  train_cmd->add_flag("--quiet", train_args.quiet, "suppress progress lines");

  ProbeArgs probe_args;
  CLI::App* probe_cmd =
      app.add_subcommand("probe", "attention similarity statistics from a checkpoint");
  probe_cmd->add_option("--checkpoint", probe_args.checkpoint, "checkpoint file")->required();
  probe_cmd->add_option("--corpus", probe_args.corpus, "text to draw sequences from")->required();
  probe_cmd->add_option("--sequences", probe_args.sequences, "number of random sequences");
  probe_cmd->add_option("--seq-len", probe_args.seq_len, "sequence length (default: model max)");
  probe_cmd->add_option("--seed", probe_args.seed, "window sampling seed");
  probe_cmd->add_option("--capture", probe_args.capture, "diag | full");
  probe_cmd->add_option("--format", probe_args.format, "csv | json");
  probe_cmd->add_option("--out", probe_args.out, "report path");
  probe_cmd->add_option("--vocab-file", probe_args.vocab_file, "newline-delimited vocab");

  BenchArgs bench_args;
  CLI::App* bench_cmd = app.add_subcommand("bench", "XSA vs SA block overhead microbenchmark");
  bench_cmd->add_option("--modes", bench_args.modes, "comma list: sa,xsa");
  bench_cmd->add_option("--seq-lens", bench_args.seq_lens, "comma list of sequence lengths");
  bench_cmd->add_option("--d-models", bench_args.d_models, "comma list of model widths");
  bench_cmd->add_option("--batch", bench_args.batch, "batch size");
  bench_cmd->add_option("--repeats", bench_args.repeats, "timed repeats per cell (>= 5)");
  bench_cmd->add_option("--warmup", bench_args.warmup, "warmup iterations (>= 2)");
  bench_cmd->add_option("--d-head", bench_args.d_head, "head dimension");
  bench_cmd->add_option("--seed", bench_args.seed, "input seed");
  bench_cmd->add_option("--threads", bench_args.threads, "kernel threads (default: all cores)");
  bench_cmd->add_option("--precision", bench_args.precision, "f32 | f64");
  bench_cmd->add_flag("--backward", bench_args.backward, "time forward+backward");
  bench_cmd->add_option("--out", bench_args.out, "JSON report path");

  SampleArgs sample_args;
  CLI::App* sample_cmd = app.add_subcommand("sample", "generate text from a checkpoint");
  sample_cmd->add_option("--checkpoint", sample_args.checkpoint, "checkpoint file")->required();
  sample_cmd->add_option("--prompt", sample_args.prompt, "prompt text");
  sample_cmd->add_option("--tokens", sample_args.tokens, "tokens to generate");
  sample_cmd->add_option("--temperature", sample_args.temperature, "0 means greedy argmax");
  sample_cmd->add_option("--seed", sample_args.seed, "sampling seed");
  sample_cmd->add_option("--out", sample_args.out, "write text here instead of stdout");
  sample_cmd->add_option("--vocab-file", sample_args.vocab_file, "newline-delimited vocab");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (train_cmd->parsed()) return run_train(train_args, train_cmd);
    if (probe_cmd->parsed()) return run_probe(probe_args);
    if (bench_cmd->parsed()) return run_bench(bench_args);
    if (sample_cmd->parsed()) return run_sample(sample_args);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\nrun '%s --help' for usage\n", e.what(), argv[0]);
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
