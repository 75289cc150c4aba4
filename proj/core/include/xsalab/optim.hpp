#pragma once

#include <numbers>

#include "xsalab/model.hpp"

namespace xsalab {

struct TrainConfig {
  double max_lr = 1e-3;
  int64_t warmup_steps = 100;
  int64_t total_steps = 1000;
  double final_lr_frac = 0.1;  // cosine decays to final_lr_frac * max_lr
  int64_t batch_tokens = 2048;  // constant across seq_len choices
  int64_t seq_len = 128;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps_adam = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;  // 0 disables clipping
  uint64_t seed = 0;
  int64_t eval_every = 200;
  int64_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::string corpus_path;
  std::string vocab_path;  // empty: byte-level tokenizer
  double val_frac = 0.0005;

  int64_t batch_size() const {
    if (seq_len <= 0 || batch_tokens <= 0 || batch_tokens % seq_len != 0)
      throw std::invalid_argument("train config: batch_tokens must be a positive multiple of seq_len");
    return batch_tokens / seq_len;
  }

  void validate() const {
    if (max_lr <= 0) throw std::invalid_argument("train config: max_lr must be positive");
    if (warmup_steps < 0 || total_steps <= 0 || warmup_steps >= total_steps)
      throw std::invalid_argument("train config: need 0 <= warmup_steps < total_steps");
    if (final_lr_frac <= 0 || final_lr_frac > 1)
      throw std::invalid_argument("train config: final_lr_frac must be in (0, 1]");
    if (val_frac < 0 || val_frac >= 1)
      throw std::invalid_argument("train config: val_frac must be in [0, 1)");
    if (grad_clip < 0) throw std::invalid_argument("train config: grad_clip must be >= 0");
    batch_size();
  }
};

/// Linear warmup to max_lr over warmup_steps, then cosine decay to
/// final_lr_frac * max_lr at total_steps. Steps past the end clamp to the
/// final value.
inline double lr_at(int64_t step, const TrainConfig& cfg) {
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  if (step < cfg.warmup_steps)
    return cfg.max_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  if (step >= cfg.total_steps) return cfg.max_lr * cfg.final_lr_frac;
  const double progress = static_cast<double>(step - cfg.warmup_steps) /
                          static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  const double f = cfg.final_lr_frac;
  return cfg.max_lr * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

/// Thrown when a step sees a non-finite gradient; the step is aborted before
/// any parameter is touched.
struct BadGradient : std::runtime_error {
  explicit BadGradient(const std::string& what) : std::runtime_error(what) {}
};

/// Decoupled-weight-decay Adam. Decay hits only params registered with
/// decay=true (matmul weights); moments live at the same precision as the
/// parameters.
template <class S>
class AdamW {
 public:
  AdamW(const std::vector<Param<S>>& params, double beta1, double beta2, double eps,
        double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    slots_.reserve(params.size());
    for (const auto& p : params)
      slots_.push_back(Slot{std::vector<S>(static_cast<size_t>(p.tensor.numel()), S(0)),
                            std::vector<S>(static_cast<size_t>(p.tensor.numel()), S(0))});
  }

  void step(std::vector<Param<S>>& params, double lr) {
    if (params.size() != slots_.size())
      throw std::invalid_argument("adamw: parameter list changed size");
    for (const auto& p : params) {
      if (!p.tensor.grad) throw std::invalid_argument("adamw: parameter has no gradient");
      for (S g : *p.tensor.grad)
        if (!std::isfinite(static_cast<double>(g)))
          throw BadGradient("adamw: non-finite gradient in " + p.name);
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      auto& slot = slots_[i];
      S* w = p.tensor.ptr();
      const S* g = p.tensor.grad->data();
      const int64_t n = p.tensor.numel();
      const double wd = p.decay ? weight_decay_ : 0.0;
      for (int64_t j = 0; j < n; ++j) {
        double m = beta1_ * static_cast<double>(slot.m[static_cast<size_t>(j)]) +
                   (1.0 - beta1_) * static_cast<double>(g[j]);
        double v = beta2_ * static_cast<double>(slot.v[static_cast<size_t>(j)]) +
                   (1.0 - beta2_) * static_cast<double>(g[j]) * static_cast<double>(g[j]);
        slot.m[static_cast<size_t>(j)] = static_cast<S>(m);
        slot.v[static_cast<size_t>(j)] = static_cast<S>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        const double update = mhat / (std::sqrt(vhat) + eps_) + wd * static_cast<double>(w[j]);
        w[j] = static_cast<S>(static_cast<double>(w[j]) - lr * update);
      }
    }
  }

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }

  // moment access for checkpointing
  std::vector<S>& first_moment(size_t i) { return slots_[i].m; }
  std::vector<S>& second_moment(size_t i) { return slots_[i].v; }
  size_t slot_count() const { return slots_.size(); }

 private:
  struct Slot {
    std::vector<S> m, v;
  };
  double beta1_, beta2_, eps_, weight_decay_;
  int64_t t_ = 0;
  std::vector<Slot> slots_;
};

template <class S>
double global_grad_norm(const std::vector<Param<S>>& params) {
  double acc = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.grad) continue;
    for (S g : *p.tensor.grad) acc += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(acc);
}

/// Scales all grads so the global norm is at most max_norm. Returns the
/// pre-clip norm.
template <class S>
double clip_global_norm(std::vector<Param<S>>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0 && norm > max_norm) {
    const S coef = static_cast<S>(max_norm / norm);
    for (auto& p : params) {
      if (!p.tensor.grad) continue;
      for (S& g : *p.tensor.grad) g *= coef;
    }
  }
  return norm;
}

}  // namespace xsalab
