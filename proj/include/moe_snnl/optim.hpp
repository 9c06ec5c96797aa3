#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "moe_snnl/tensor.hpp"

namespace moe_snnl {

struct SGDConfig {
  Real momentum = 0.9;
  Real weight_decay = 1e-4;
  Real max_lr = 1e-1;
  std::size_t total_steps = 15000;
  Real pct_start = 0.3;
  Real div_factor = 25.0;
  Real final_div_factor = 1e4;

  void validate() const {
    if (!(pct_start > 0.0 && pct_start < 1.0)) throw std::invalid_argument("pct_start must lie in (0, 1)");
    if (total_steps < 2) throw std::invalid_argument("total_steps must be at least 2");
    if (!(div_factor > 0.0) || !(final_div_factor > 0.0)) throw std::invalid_argument("div factors must be positive");
  }

  Real initial_lr() const { return max_lr / div_factor; }
  Real final_lr() const { return max_lr / final_div_factor; }
  std::size_t peak_step() const { return static_cast<std::size_t>(std::llround(pct_start * static_cast<Real>(total_steps))); }
};

/// Classical momentum SGD with L2 decay folded into the gradient:
///   g = grad + wd * w;  buf = momentum * buf + g;  w -= lr * buf.
/// Gradients are cleared afterwards.
inline void sgd_step(const std::vector<Parameter*>& params, Real lr, const SGDConfig& cfg) {
  for (const Parameter* p : params) {
    if (!p->tensor.has_grad()) throw std::logic_error("sgd_step: parameter '" + p->name + "' has no gradient");
  }
  for (Parameter* p : params) {
    auto& w = p->tensor.values();
    const auto& g = p->tensor.grad();
    auto& buf = p->momentum_buffer;
    const Real wd = p->weight_decay ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const Real gi = g[i] + wd * w[i];
      buf[i] = cfg.momentum * buf[i] + gi;
      w[i] -= lr * buf[i];
    }
    p->tensor.clear_grad();
  }
}

namespace detail {
inline Real cosine_anneal(Real start, Real end, Real pct) {
  return end + (start - end) / 2.0 * (1.0 + std::cos(std::numbers::pi * pct));
}
}  // namespace detail

/// One-cycle schedule: cosine warm-up from max_lr/div_factor to max_lr at
/// step round(pct_start * total), then cosine decay to max_lr/final_div_factor
/// at the last step.
inline Real one_cycle_lr(std::size_t step, const SGDConfig& cfg) {
  cfg.validate();
  if (step >= cfg.total_steps) {
    throw std::out_of_range("one_cycle_lr: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(cfg.total_steps) + ")");
  }
  const std::size_t peak = cfg.peak_step();
  const std::size_t last = cfg.total_steps - 1;
  if (step <= peak) {
    if (peak == 0) return cfg.max_lr;
    return detail::cosine_anneal(cfg.initial_lr(), cfg.max_lr, static_cast<Real>(step) / static_cast<Real>(peak));
  }
  if (last <= peak) return cfg.max_lr;
  return detail::cosine_anneal(cfg.max_lr, cfg.final_lr(),
                               static_cast<Real>(step - peak) / static_cast<Real>(last - peak));
}

}  // namespace moe_snnl
