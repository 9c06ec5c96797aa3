#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "moe_snnl/tape.hpp"
#include "moe_snnl/tensor.hpp"

namespace moe_snnl {

/// Probability floor applied before taking logs in cross entropy.
inline constexpr Real kProbabilityClamp = 1e-12;

struct SNNLConfig {
  Real temperature = 1.0;
  Real alpha = 1.0;
  Real epsilon = 1e-12;

  void validate() const {
    if (!(temperature > 0.0)) throw std::invalid_argument("SNNL temperature must be positive");
  }
};

struct LossReport {
  Real moe_loss = 0.0;
  std::vector<Real> snnl_per_tap;
  Real snnl_min = 0.0;
  Real composite = 0.0;
};

namespace detail {

inline void check_labels(const Labels& labels, std::size_t batch, std::size_t classes, const char* op) {
  if (labels.size() != batch) {
    throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::out_of_range(std::string(op) + ": label " + std::to_string(y) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
  }
}

inline void check_rows_normalized(const Tensor& p, const char* op) {
  const std::size_t rows = p.dim(0), cols = p.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    Real s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += p[r * cols + c];
    if (std::abs(s - 1.0) > 1e-6) {
      throw std::invalid_argument(std::string(op) + ": row " + std::to_string(r) + " sums to " + std::to_string(s));
    }
  }
}

inline Real clamped_nll(Real p) { return -std::log(std::max(p, kProbabilityClamp)); }

}  // namespace detail

/// Row-wise softmax with max subtraction.
inline Var softmax(const Var& logits) {
  const auto& s = logits.shape();
  if (s.size() != 2) throw DimensionError("softmax: expected [b x K], got " + to_string(s));
  const std::size_t rows = s[0], cols = s[1];
  const auto& z = logits.value().values();
  Tensor out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* zr = z.data() + r * cols;
    const Real m = *std::max_element(zr, zr + cols);
    Real denom = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = std::exp(zr[c] - m);
      denom += out[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= denom;
  }
  Tensor probs = out;
  return logits.tape()->record("softmax", std::move(out), {logits},
                               [logits, probs = std::move(probs), rows, cols](Tape& t, std::size_t self) {
                                 const auto& g = t.grad_buffer(self);
                                 auto& dz = t.grad_buffer(logits);
                                 for (std::size_t r = 0; r < rows; ++r) {
                                   Real dot = 0.0;
                                   for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * probs[r * cols + c];
                                   for (std::size_t c = 0; c < cols; ++c)
                                     dz[r * cols + c] += probs[r * cols + c] * (g[r * cols + c] - dot);
                                 }
                               });
}

/// Mean over the batch of -log(p[i, y_i]), probabilities clamped at 1e-12.
inline Var cross_entropy(const Var& probs, const Labels& labels) {
  const auto& s = probs.shape();
  if (s.size() != 2) throw DimensionError("cross_entropy: expected [b x K], got " + to_string(s));
  const std::size_t batch = s[0], classes = s[1];
  detail::check_labels(labels, batch, classes, "cross_entropy");
  detail::check_rows_normalized(probs.value(), "cross_entropy");
  Real total = 0.0;
  for (std::size_t i = 0; i < batch; ++i) total += detail::clamped_nll(probs.value()[i * classes + labels[i]]);
  return probs.tape()->record("cross_entropy", Tensor::scalar(total / static_cast<Real>(batch)), {probs},
                              [probs, labels, batch, classes](Tape& t, std::size_t self) {
                                const Real g = t.grad_buffer(self)[0];
                                auto& dp = t.grad_buffer(probs);
                                for (std::size_t i = 0; i < batch; ++i) {
                                  const std::size_t idx = i * classes + labels[i];
                                  const Real p = probs.value()[idx];
                                  if (p > kProbabilityClamp) dp[idx] -= g / (p * static_cast<Real>(batch));
                                }
                              });
}

// ---------------------------------------------------------------------------
// Soft nearest neighbor loss

struct SnnlResult {
  Var value;
  /// Samples without a same-class peer, excluded from the average.
  std::size_t excluded = 0;
  /// No sample had a same-class peer; the loss is 0 and carries no gradient.
  bool degenerate = false;
};

namespace detail {

struct SnnlForward {
  Real value = 0.0;
  std::size_t valid = 0;
  /// Row-major b x b: d loss / d logit_ij where logit_ij = -dist_ij / T.
  std::vector<Real> logit_grad;
};

inline SnnlForward snnl_forward(const Tensor& x, const Labels& labels, Real temperature) {
  const std::size_t b = x.dim(0), d = x.dim(1);
  const Real* xv = x.values().data();
  std::vector<Real> logits(b * b, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = i + 1; j < b; ++j) {
      Real dist = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const Real diff = xv[i * d + k] - xv[j * d + k];
        dist += diff * diff;
      }
      logits[i * b + j] = logits[j * b + i] = -dist / temperature;
    }

  SnnlForward f;
  f.logit_grad.assign(b * b, 0.0);
  std::vector<Real> per_sample(b, 0.0);
  std::vector<bool> valid(b, false);
  std::vector<Real> lse_num(b), lse_den(b);
  for (std::size_t i = 0; i < b; ++i) {
    Real max_all = -std::numeric_limits<Real>::infinity(), max_same = max_all;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      max_all = std::max(max_all, logits[i * b + j]);
      if (labels[j] == labels[i]) {
        max_same = std::max(max_same, logits[i * b + j]);
        valid[i] = true;
      }
    }
    if (!valid[i]) continue;
    Real sum_all = 0.0, sum_same = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      sum_all += std::exp(logits[i * b + j] - max_all);
      if (labels[j] == labels[i]) sum_same += std::exp(logits[i * b + j] - max_same);
    }
    lse_den[i] = max_all + std::log(sum_all);
    lse_num[i] = max_same + std::log(sum_same);
    per_sample[i] = lse_den[i] - lse_num[i];
    ++f.valid;
  }
  if (f.valid == 0) return f;

  Real total = 0.0;
  for (std::size_t i = 0; i < b; ++i)
    if (valid[i]) total += per_sample[i];
  const Real inv = 1.0 / static_cast<Real>(f.valid);
  f.value = total * inv;
  for (std::size_t i = 0; i < b; ++i) {
    if (!valid[i]) continue;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      Real w = std::exp(logits[i * b + j] - lse_den[i]);
      if (labels[j] == labels[i]) w -= std::exp(logits[i * b + j] - lse_num[i]);
      f.logit_grad[i * b + j] = w * inv;
    }
  }
  return f;
}

}  // namespace detail

/// Soft nearest neighbor loss over the rows of x with squared Euclidean
/// distances. Each row's term is a log-ratio of same-class to all-neighbor
/// affinity, evaluated as a difference of two log-sum-exps.
inline SnnlResult snnl(const Var& x, const Labels& labels, Real temperature) {
  const auto& s = x.shape();
  if (s.size() != 2) throw DimensionError("snnl: expected [b x d], got " + to_string(s));
  if (!(temperature > 0.0)) throw std::invalid_argument("snnl: temperature must be positive");
  const std::size_t b = s[0], d = s[1];
  if (b < 2) throw DimensionError("snnl: batch needs at least 2 samples");
  if (labels.size() != b) throw DimensionError("snnl: label count does not match batch");

  auto fwd = detail::snnl_forward(x.value(), labels, temperature);
  SnnlResult result;
  result.excluded = b - fwd.valid;
  result.degenerate = fwd.valid == 0;
  result.value = x.tape()->record(
      "snnl", Tensor::scalar(fwd.value), {x},
      [x, b, d, temperature, grad = std::move(fwd.logit_grad)](Tape& t, std::size_t self) {
        const Real g = t.grad_buffer(self)[0];
        const Real* xv = x.value().values().data();
        auto& dx = t.grad_buffer(x);
        const Real k = -2.0 * g / temperature;
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < b; ++j) {
            const Real w = grad[i * b + j];
            if (w == 0.0) continue;
            const Real c = k * w;
            for (std::size_t q = 0; q < d; ++q) {
              const Real diff = xv[i * d + q] - xv[j * d + q];
              dx[i * d + q] += c * diff;
              dx[j * d + q] -= c * diff;
            }
          }
      });
  return result;
}

/// Value-only evaluation for diagnostics.
inline Real snnl_value(const Tensor& x, const Labels& labels, Real temperature) {
  if (x.rank() != 2 || x.dim(0) < 2 || labels.size() != x.dim(0)) throw DimensionError("snnl_value: bad input");
  return detail::snnl_forward(x, labels, temperature).value;
}

// ---------------------------------------------------------------------------

/// (1/b) * sum_samples sum_experts gate[s, i] * CE(y_s, expert_i[s]).
inline Var moe_loss(const Var& gate_probs, const std::vector<Var>& expert_probs, const Labels& labels) {
  const auto& gs = gate_probs.shape();
  if (gs.size() != 2) throw DimensionError("moe_loss: gate must be [b x n], got " + to_string(gs));
  const std::size_t batch = gs[0], n = gs[1];
  if (expert_probs.size() != n || n == 0) {
    throw DimensionError("moe_loss: gate has " + std::to_string(n) + " columns but " +
                         std::to_string(expert_probs.size()) + " experts were given");
  }
  const std::size_t classes = expert_probs.front().shape().at(1);
  for (const Var& e : expert_probs) {
    if (e.shape() != Shape{batch, classes}) {
      throw DimensionError("moe_loss: expert output " + to_string(e.shape()) + " does not match [" +
                           std::to_string(batch) + "x" + std::to_string(classes) + "]");
    }
  }
  detail::check_labels(labels, batch, classes, "moe_loss");
  detail::check_rows_normalized(gate_probs.value(), "moe_loss");

  std::vector<Real> ce(batch * n);
  Real total = 0.0;
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t i = 0; i < n; ++i) {
      ce[s * n + i] = detail::clamped_nll(expert_probs[i].value()[s * classes + labels[s]]);
      total += gate_probs.value()[s * n + i] * ce[s * n + i];
    }
  std::vector<Var> inputs{gate_probs};
  inputs.insert(inputs.end(), expert_probs.begin(), expert_probs.end());
  return gate_probs.tape()->record(
      "moe_loss", Tensor::scalar(total / static_cast<Real>(batch)), inputs,
      [gate_probs, expert_probs, labels, ce = std::move(ce), batch, n, classes](Tape& t, std::size_t self) {
        const Real g = t.grad_buffer(self)[0] / static_cast<Real>(batch);
        if (t.needs_grad(gate_probs)) {
          auto& dg = t.grad_buffer(gate_probs);
          for (std::size_t k = 0; k < batch * n; ++k) dg[k] += g * ce[k];
        }
        for (std::size_t i = 0; i < n; ++i) {
          if (!t.needs_grad(expert_probs[i])) continue;
          auto& de = t.grad_buffer(expert_probs[i]);
          const auto& ev = expert_probs[i].value();
          for (std::size_t s = 0; s < batch; ++s) {
            const std::size_t idx = s * classes + labels[s];
            if (ev[idx] > kProbabilityClamp) de[idx] -= g * gate_probs.value()[s * n + i] / ev[idx];
          }
        }
      });
}

/// Index of the smallest tap value; ties resolve to the lowest index.
inline std::size_t min_tap_index(const std::vector<Real>& taps) {
  if (taps.empty()) throw std::invalid_argument("composite_loss: no SNNL taps");
  return static_cast<std::size_t>(std::min_element(taps.begin(), taps.end()) - taps.begin());
}

/// moe + alpha * min(taps). Only the minimizing tap receives gradient, and
/// none at all when alpha == 0.
inline Var composite_loss(const Var& moe, const std::vector<Var>& taps, Real alpha) {
  if (taps.empty()) throw std::invalid_argument("composite_loss: no SNNL taps");
  if (moe.size() != 1) throw DimensionError("composite_loss: moe loss must be scalar");
  std::vector<Real> tap_values;
  for (const Var& t : taps) {
    if (t.size() != 1) throw DimensionError("composite_loss: tap values must be scalar");
    tap_values.push_back(t.value()[0]);
  }
  const std::size_t winner = min_tap_index(tap_values);
  const Real value = moe.value()[0] + alpha * tap_values[winner];
  std::vector<Var> inputs{moe};
  inputs.insert(inputs.end(), taps.begin(), taps.end());
  return moe.tape()->record("composite", Tensor::scalar(value), inputs,
                            [moe, taps, winner, alpha](Tape& t, std::size_t self) {
                              const Real g = t.grad_buffer(self)[0];
                              if (t.needs_grad(moe)) t.grad_buffer(moe)[0] += g;
                              if (alpha != 0.0 && t.needs_grad(taps[winner])) t.grad_buffer(taps[winner])[0] += alpha * g;
                            });
}

}  // namespace moe_snnl
