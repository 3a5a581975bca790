#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "kgcl/errors.hpp"
#include "kgcl/linalg.hpp"

namespace kgcl {

struct AdamWConfig {
  double lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
  int warmup_steps = 0;    // linear ramp from 0 to lr over this many steps
};

// AdamW with decoupled weight decay and global-norm gradient clipping.
// Slot shapes are fixed on the first step; the caller must present the same
// parameter list, in the same order, every time.
class AdamW {
 public:
  explicit AdamW(const AdamWConfig& cfg) : cfg_(cfg) {
    if (cfg.lr <= 0.0) throw ConfigError("learning rate must be positive");
    if (cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0)
      throw ConfigError("adam betas must lie in [0,1)");
    if (cfg.warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  }

  // Performs one update. `grads` is mutated when clipping rescales it.
  void step(const std::vector<Mat*>& params, const std::vector<Mat*>& grads) {
    if (params.size() != grads.size())
      throw ConfigError("optimizer got mismatched parameter and gradient lists");
    if (m_.empty()) {
      for (const Mat* p : params) {
        m_.emplace_back(p->rows, p->cols);
        v_.emplace_back(p->rows, p->cols);
      }
    }
    if (m_.size() != params.size())
      throw ConfigError("optimizer slot count changed between steps");

    last_grad_norm_ = 0.0;
    for (const Mat* g : grads)
      for (double x : g->a) last_grad_norm_ += x * x;
    last_grad_norm_ = std::sqrt(last_grad_norm_);
    if (!std::isfinite(last_grad_norm_))
      throw NumericError("non-finite gradient norm in optimizer step");
    if (cfg_.clip_norm > 0.0 && last_grad_norm_ > cfg_.clip_norm) {
      double s = cfg_.clip_norm / last_grad_norm_;
      for (Mat* g : grads) scale_inplace(*g, s);
    }

    ++t_;
    last_lr_ = cfg_.lr;
    if (cfg_.warmup_steps > 0 && t_ <= cfg_.warmup_steps)
      last_lr_ = cfg_.lr * (static_cast<double>(t_) / cfg_.warmup_steps);
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

    for (size_t i = 0; i < params.size(); ++i) {
      Mat& p = *params[i];
      const Mat& g = *grads[i];
      if (!p.same_shape(m_[i]) || !p.same_shape(g))
        throw ConfigError("optimizer slot shape mismatch");
      Mat& m = m_[i];
      Mat& v = v_[i];
      for (size_t j = 0; j < p.a.size(); ++j) {
        double gj = g.a[j];
        m.a[j] = cfg_.beta1 * m.a[j] + (1.0 - cfg_.beta1) * gj;
        v.a[j] = cfg_.beta2 * v.a[j] + (1.0 - cfg_.beta2) * gj * gj;
        double mhat = m.a[j] / bc1;
        double vhat = v.a[j] / bc2;
        p.a[j] -= last_lr_ * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                              cfg_.weight_decay * p.a[j]);
      }
    }
  }

  int64_t steps() const { return t_; }
  double last_lr() const { return last_lr_; }
  double last_grad_norm() const { return last_grad_norm_; }

 private:
  AdamWConfig cfg_;
  int64_t t_ = 0;
  double last_lr_ = 0.0;
  double last_grad_norm_ = 0.0;
  std::vector<Mat> m_, v_;
};

}  // namespace kgcl
