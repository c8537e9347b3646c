#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "filigrain/encoder.hpp"
#include "filigrain/error.hpp"
#include "filigrain/tensor.hpp"

namespace filigrain {

// ---------------------------------------------------------------------------
// LAMB optimizer with layer-wise trust ratios, cosine schedule with linear
// warmup, square-root peak-LR scaling, and selective weight decay.
// ---------------------------------------------------------------------------

struct DecayPolicy {
  double weight_decay = 0.0;

  // Excluded from decay: biases, layer-norm gains/biases, token embeddings
  // (including the [CLS] embedding), positional embeddings, temperature.
  static bool excluded(const std::string& name) {
    if (name == "temperature") return true;
    if (name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0) return true;
    if (name.find("ln") != std::string::npos) return true;
    if (name.find("_embed") != std::string::npos) return true;
    return false;
  }

  double lambda_for(const std::string& name) const {
    return excluded(name) ? 0.0 : weight_decay;
  }
};

struct ScheduleConfig {
  double base_lr = 1e-3;
  int total_batch_size = 512;
  int warmup_iters = 100;
  int total_iters = 1000;

  void validate() const {
    check(base_lr > 0 && total_batch_size > 0 && warmup_iters >= 0 &&
              total_iters > warmup_iters,
          Error::Kind::config, "schedule: need 0 <= warmup < total and positives");
  }
};

// peak = base * sqrt(total_batch_size / 512)
inline double peak_lr(double base_lr, int total_batch_size) {
  check(base_lr > 0 && total_batch_size > 0, Error::Kind::config,
        "peak_lr: positive inputs required");
  return base_lr * std::sqrt(static_cast<double>(total_batch_size) / 512.0);
}

// Linear warmup to the peak, then cosine decay to zero at total_iters.
inline double lr_at(int step, const ScheduleConfig& cfg) {
  cfg.validate();
  check(step >= 0 && step <= cfg.total_iters, Error::Kind::config,
        "lr_at: step outside [0, total_iters]");
  const double peak = peak_lr(cfg.base_lr, cfg.total_batch_size);
  if (step < cfg.warmup_iters)
    return peak * static_cast<double>(step + 1) / cfg.warmup_iters;
  const double progress = static_cast<double>(step - cfg.warmup_iters) /
                          static_cast<double>(cfg.total_iters - cfg.warmup_iters);
  return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

struct LambConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-4;
  double temperature_floor = 0.01;
};

// Per-parameter first/second moments plus the shared step counter.
class LambOptimizer {
 public:
  explicit LambOptimizer(LambConfig cfg = {}, DecayPolicy policy = {})
      : cfg_(cfg), policy_(policy) {}

  const LambConfig& config() const { return cfg_; }
  DecayPolicy& policy() { return policy_; }
  int steps_taken() const { return t_; }

  // One update over every parameter in store order. Gradients are read from
  // the tensors' grad buffers; NaN gradients fail fast.
  void step(ParamStore& params, double lr) {
    check(lr >= 0.0, Error::Kind::config, "lamb_step: negative learning rate");
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t p = 0; p < params.size(); ++p) {
        m_[p].assign(static_cast<std::size_t>(params.item(p).second.size()), 0.0);
        v_[p] = m_[p];
      }
    }
    check(m_.size() == params.size(), Error::Kind::config,
          "lamb_step: parameter set changed under the optimizer");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);

    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& [name, w] = params.item(p);
      auto g = w.grad();
      auto wv = w.mutable_values();
      auto& m = m_[p];
      auto& v = v_[p];
      const double lambda = policy_.lambda_for(name);

      double w_norm_sq = 0.0, u_norm_sq = 0.0;
      std::vector<double> u(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = g[i];
        check(!std::isnan(gi), Error::Kind::numeric,
              "lamb_step: NaN gradient in " + name);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        const double r = m_hat / (std::sqrt(v_hat) + cfg_.eps);
        u[i] = r + lambda * wv[i];
        w_norm_sq += wv[i] * wv[i];
        u_norm_sq += u[i] * u[i];
      }
      const double w_norm = std::sqrt(w_norm_sq);
      const double u_norm = std::sqrt(u_norm_sq);
      const double ratio = (w_norm > 0.0 && u_norm > 0.0) ? w_norm / u_norm : 1.0;
      for (std::size_t i = 0; i < u.size(); ++i) wv[i] -= lr * ratio * u[i];

      if (name == "temperature")
        wv[0] = std::max(wv[0], cfg_.temperature_floor);
    }
  }

 private:
  LambConfig cfg_;
  DecayPolicy policy_;
  std::vector<std::vector<double>> m_, v_;
  int t_ = 0;
};

}  // namespace filigrain
