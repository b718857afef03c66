#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ot/common.hpp"
#include "ot/tensor.hpp"

namespace ot {

// AdamW with decoupled weight decay: p *= (1 - lr*wd) before the
// bias-corrected moment update, so decay never enters the moments.

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <class S>
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor<S>>> params,
        AdamWOptions opts = {})
      : params_(std::move(params)), opts_(opts) {
    OT_CHECK(opts_.beta1 >= 0 && opts_.beta1 < 1 && opts_.beta2 >= 0 &&
                 opts_.beta2 < 1,
             OptimizerError, "betas must lie in [0,1)");
    OT_CHECK(opts_.eps > 0, OptimizerError, "eps must be positive");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& [name, p] : params_) {
      OT_CHECK(p.defined(), OptimizerError, "undefined parameter " << name);
      m_.emplace_back(p.numel(), S(0));
      v_.emplace_back(p.numel(), S(0));
    }
  }

  // One update using each parameter's accumulated gradient (missing gradient
  // buffers count as zeros). Gradients are left untouched; call zero_grad()
  // between steps.
  void step(S lr) {
    OT_CHECK(lr >= S(0), OptimizerError, "negative learning rate " << lr);
    ++step_count_;
    const double b1 = opts_.beta1, b2 = opts_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
    const S decay_keep = S(1) - lr * static_cast<S>(opts_.weight_decay);
    for (size_t pi = 0; pi < params_.size(); ++pi) {
      auto& [name, p] = params_[pi];
      auto pv = p.data();
      const bool has_grad = p.has_grad();
      auto gv = has_grad ? p.grad() : std::span<const S>{};
      auto& m = m_[pi];
      auto& v = v_[pi];
      for (int64_t i = 0; i < p.numel(); ++i) {
        const S g = has_grad ? gv[i] : S(0);
        OT_CHECK(std::isfinite(static_cast<double>(g)), OptimizerError,
                 "non-finite gradient in " << name << " at index " << i);
        m[i] = static_cast<S>(b1 * m[i] + (1.0 - b1) * g);
        v[i] = static_cast<S>(b2 * v[i] + (1.0 - b2) * g * g);
        const S mhat = static_cast<S>(m[i] / bc1);
        const S vhat = static_cast<S>(v[i] / bc2);
        pv[i] = decay_keep * pv[i] -
                lr * mhat / (std::sqrt(vhat) + static_cast<S>(opts_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  int64_t step_count() const { return step_count_; }
  const AdamWOptions& options() const { return opts_; }
  size_t size() const { return params_.size(); }

 private:
  std::vector<std::pair<std::string, Tensor<S>>> params_;
  std::vector<std::vector<S>> m_, v_;
  AdamWOptions opts_;
  int64_t step_count_ = 0;
};

// Cosine learning-rate schedule with linear warmup.
struct LrSchedule {
  double lr_max = 0;
  double lr_min = 0;
  int64_t total_steps = 1;
  int64_t warmup_steps = 0;

  void validate() const {
    OT_CHECK(total_steps > 0, ContractError, "total_steps must be positive");
    OT_CHECK(warmup_steps >= 0 && warmup_steps <= total_steps, ContractError,
             "warmup_steps " << warmup_steps << " outside [0," << total_steps
                             << "]");
    OT_CHECK(lr_min <= lr_max, ContractError,
             "lr_min " << lr_min << " > lr_max " << lr_max);
  }
};

// Linear ramp 0 -> lr_max over warmup, then half-cosine lr_max -> lr_min.
inline double cosine_lr(const LrSchedule& sched, int64_t step) {
  sched.validate();
  OT_CHECK(step >= 0 && step <= sched.total_steps, ContractError,
           "step " << step << " outside [0," << sched.total_steps << "]");
  if (step < sched.warmup_steps)
    return sched.lr_max * static_cast<double>(step) /
           static_cast<double>(sched.warmup_steps);
  const int64_t span = sched.total_steps - sched.warmup_steps;
  const double t =
      span > 0
          ? static_cast<double>(step - sched.warmup_steps) /
                static_cast<double>(span)
          : 1.0;
  return sched.lr_min +
         (sched.lr_max - sched.lr_min) * 0.5 * (1.0 + std::cos(M_PI * t));
}

}  // namespace ot
