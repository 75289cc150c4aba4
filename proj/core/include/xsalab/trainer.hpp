#pragma once

#include <chrono>
#include <filesystem>

#include "xsalab/checkpoint.hpp"
#include "xsalab/data.hpp"

namespace xsalab {

template <class S>
struct TrainResult {
  double initial_loss = 0.0;   // first step's training loss
  double final_loss = 0.0;     // mean loss over the last 5% of steps
  int64_t steps_run = 0;
  bool halted_on_nan = false;
  std::string final_checkpoint;
};

/// Runs the full recipe: random-window batches, AdamW with warmup+cosine LR,
/// global-norm clipping, CSV loss log, periodic validation and checkpoints.
/// A non-finite loss or gradient halts training; the last good weights are
/// still written to final.ckpt.
template <class S>
TrainResult<S> train_model(ModelT<S>& model, const Corpus& corpus, const TrainConfig& cfg,
                           const std::string& out_dir,
                           bool quiet = true) {
  cfg.validate();
  model.config().validate();
  if (cfg.seq_len > model.config().max_seq_len)
    throw std::invalid_argument("train: seq_len exceeds the model's max_seq_len");
  std::filesystem::create_directories(out_dir);

  const int64_t batch_size = cfg.batch_size();
  BatchSampler train_batches(corpus, Split::kTrain, cfg.seq_len, batch_size,
                             Rng::mix(cfg.seed, 0x7261696e));
  // a fixed set of validation batches, sampled once
  std::vector<std::pair<TokenBatch, TokenBatch>> val_set;
  if (corpus.val_len() > cfg.seq_len) {
    BatchSampler val_batches(corpus, Split::kVal, cfg.seq_len, batch_size,
                             Rng::mix(cfg.seed, 0x76616c));
    for (int i = 0; i < 4; ++i) val_set.push_back(val_batches.next());
  }

  auto params = model.parameters();
  AdamW<S> opt(params, cfg.beta1, cfg.beta2, cfg.eps_adam, cfg.weight_decay);
  LossLog log(out_dir + "/loss.csv");
  Rng run_rng(cfg.seed);

  TrainResult<S> result;
  const auto t0 = std::chrono::steady_clock::now();
  auto wallclock = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  auto eval_val = [&]() -> double {
    if (val_set.empty()) return std::numeric_limits<double>::quiet_NaN();
    NoGradScope<S> ng;
    double acc = 0.0;
    for (const auto& [in, tgt] : val_set)
      acc += static_cast<double>(cross_entropy_logits(model.forward(in), tgt.ids).item());
    return acc / static_cast<double>(val_set.size());
  };
  auto save = [&](const std::string& name, int64_t step) {
    CheckpointMeta meta;
    meta.step = step;
    meta.tokens_seen = step * cfg.batch_tokens;
    meta.rng_state = run_rng.state();
    meta.schedule_step = step;
    save_checkpoint(out_dir + "/" + name, model, meta, &opt);
  };

  std::vector<double> recent;
  const int64_t tail = std::max<int64_t>(1, cfg.total_steps / 20);
  for (int64_t step = 1; step <= cfg.total_steps; ++step) {
    auto [inputs, targets] = train_batches.next();
    const double lr = lr_at(step, cfg);

    TapeT<S> tape;
    double loss_value;
    {
      RecordScope<S> rec(tape);
      TensorT<S> loss = cross_entropy_logits(model.forward(inputs), targets.ids);
      loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        result.halted_on_nan = true;
        if (!quiet)
          std::fprintf(stderr, "step %lld: non-finite loss, halting\n",
                       static_cast<long long>(step));
        break;
      }
      for (auto& p : params) p.tensor.zero_grad();
      backward(loss);
    }
    tape.clear();

    try {
      clip_global_norm(params, cfg.grad_clip);
      opt.step(params, lr);
    } catch (const BadGradient& e) {
      result.halted_on_nan = true;
      if (!quiet) std::fprintf(stderr, "step %lld: %s, halting\n",
                               static_cast<long long>(step), e.what());
      break;
    }

    if (result.steps_run == 0) result.initial_loss = loss_value;
    result.steps_run = step;
    log.append({step, "train", loss_value, lr, step * cfg.batch_tokens, wallclock()});
    recent.push_back(loss_value);
    if (static_cast<int64_t>(recent.size()) > tail) recent.erase(recent.begin());

    if (cfg.eval_every > 0 && step % cfg.eval_every == 0 && !val_set.empty())
      log.append({step, "val", eval_val(), lr, step * cfg.batch_tokens, wallclock()});
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.total_steps)
      save("step_" + std::to_string(step) + ".ckpt", step);
    if (!quiet && step % 100 == 0)
      std::fprintf(stderr, "step %lld loss %.4f lr %.3g\n", static_cast<long long>(step),
                   loss_value, lr);
  }

  if (!val_set.empty() && !result.halted_on_nan)
    log.append({result.steps_run, "val", eval_val(), lr_at(result.steps_run, cfg),
                result.steps_run * cfg.batch_tokens, wallclock()});
  save("final.ckpt", result.steps_run);
  result.final_checkpoint = out_dir + "/final.ckpt";
  double acc = 0.0;
  for (double v : recent) acc += v;
  result.final_loss = recent.empty() ? std::numeric_limits<double>::quiet_NaN()
                                     : acc / static_cast<double>(recent.size());
  return result;
}

}  // namespace xsalab
