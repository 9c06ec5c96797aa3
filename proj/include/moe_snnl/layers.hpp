#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "moe_snnl/ops.hpp"
#include "moe_snnl/rng.hpp"
#include "moe_snnl/tape.hpp"
#include "moe_snnl/tensor.hpp"

namespace moe_snnl {

enum class Mode { train, eval };

// ---------------------------------------------------------------------------
// Initializers

/// He/Kaiming normal, fan-in mode, ReLU gain: N(0, 2 / fan_in).
inline std::vector<Real> kaiming_init(const Shape& shape, std::size_t fan_in, RngStream& rng) {
  if (fan_in == 0) throw std::invalid_argument("kaiming_init: fan_in must be positive");
  const Real stddev = std::sqrt(2.0 / static_cast<Real>(fan_in));
  std::vector<Real> out(numel(shape));
  for (auto& v : out) v = rng.normal(0.0, stddev);
  return out;
}

inline Real xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<Real>(fan_in + fan_out));
}

/// Glorot/Xavier uniform in +-sqrt(6 / (fan_in + fan_out)).
inline std::vector<Real> xavier_init(const Shape& shape, std::size_t fan_in, std::size_t fan_out, RngStream& rng) {
  if (fan_in == 0 || fan_out == 0) throw std::invalid_argument("xavier_init: fan values must be positive");
  const Real bound = xavier_bound(fan_in, fan_out);
  std::vector<Real> out(numel(shape));
  for (auto& v : out) v = rng.uniform(-bound, bound);
  return out;
}

enum class Init { kaiming, xavier };

// ---------------------------------------------------------------------------

class DenseLayer {
 public:
  DenseLayer() = default;
  DenseLayer(const std::string& name, std::size_t in, std::size_t out, Init init, RngStream& rng)
      : weight(name + ".weight",
               Tensor(Shape{out, in}, init == Init::kaiming ? kaiming_init(Shape{out, in}, in, rng)
                                                            : xavier_init(Shape{out, in}, in, out, rng))),
        bias(name + ".bias", Tensor(Shape{out}), false) {}

  std::size_t in_features() const { return weight.tensor.dim(1); }
  std::size_t out_features() const { return weight.tensor.dim(0); }

  /// y = x W^T + b, x is [batch x in].
  Var forward(Tape& tape, const Var& x) { return apply(tape, x, tape.leaf(weight), tape.leaf(bias)); }

  /// Same computation with the weights as constants (no parameter gradients).
  Var infer(Tape& tape, const Var& x) const {
    return apply(tape, x, tape.constant(copy(weight.tensor)), tape.constant(copy(bias.tensor)));
  }

  std::vector<Parameter*> parameters() { return {&weight, &bias}; }

  Parameter weight;
  Parameter bias;

 private:
  static Tensor copy(const Tensor& t) { return Tensor(t.shape(), t.values()); }

  static Var apply(Tape& tape, const Var& x, const Var& w, const Var& b) {
    const std::size_t out_f = w.shape()[0], in_f = w.shape()[1];
    if (x.shape().size() != 2 || x.shape()[1] != in_f) {
      throw DimensionError("dense: input " + to_string(x.shape()) + " does not match weight " + to_string(w.shape()));
    }
    const std::size_t batch = x.shape()[0];
    Tensor out(Shape{batch, out_f});
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t o = 0; o < out_f; ++o) out[r * out_f + o] = b.value()[o];
    ops::detail::gemm_nt(x.value().values().data(), w.value().values().data(), out.values().data(), batch, in_f,
                         out_f);
    return tape.record("dense", std::move(out), {x, w, b}, [x, w, b, batch, in_f, out_f](Tape& t, std::size_t self) {
      const auto& g = t.grad_buffer(self);
      if (t.needs_grad(x))
        ops::detail::gemm_nn(g.data(), w.value().values().data(), t.grad_buffer(x).data(), batch, out_f, in_f);
      if (t.needs_grad(w))
        ops::detail::gemm_tn(g.data(), x.value().values().data(), t.grad_buffer(w).data(), batch, out_f, in_f);
      if (t.needs_grad(b)) {
        auto& db = t.grad_buffer(b);
        for (std::size_t r = 0; r < batch; ++r)
          for (std::size_t o = 0; o < out_f; ++o) db[o] += g[r * out_f + o];
      }
    });
  }
};

// ---------------------------------------------------------------------------

/// 3x3 cross-correlation, padding 1, stride 1.
class Conv2DLayer {
 public:
  static constexpr std::size_t kernel_size = 3;

  Conv2DLayer() = default;
  Conv2DLayer(const std::string& name, std::size_t in_ch, std::size_t out_ch, RngStream& rng)
      : kernels(name + ".kernels", Tensor(Shape{out_ch, in_ch, 3, 3},
                                          kaiming_init(Shape{out_ch, in_ch, 3, 3}, in_ch * 9, rng))),
        bias(name + ".bias", Tensor(Shape{out_ch}), false) {}

  std::size_t in_channels() const { return kernels.tensor.dim(1); }
  std::size_t out_channels() const { return kernels.tensor.dim(0); }

  Var forward(Tape& tape, const Var& x) { return apply(tape, x, tape.leaf(kernels), tape.leaf(bias)); }
  Var infer(Tape& tape, const Var& x) const {
    return apply(tape, x, tape.constant(Tensor(kernels.tensor.shape(), kernels.tensor.values())),
                 tape.constant(Tensor(bias.tensor.shape(), bias.tensor.values())));
  }

  std::vector<Parameter*> parameters() { return {&kernels, &bias}; }

  Parameter kernels;
  Parameter bias;

 private:
  static Var apply(Tape& tape, const Var& x, const Var& k, const Var& b) {
    const auto& xs = x.shape();
    const std::size_t out_ch = k.shape()[0], in_ch = k.shape()[1];
    if (xs.size() != 4) throw DimensionError("conv2d: expected [b x c x h x w] input, got " + to_string(xs));
    if (xs[1] != in_ch) {
      throw DimensionError("conv2d: input has " + std::to_string(xs[1]) + " channels, layer expects " +
                           std::to_string(in_ch));
    }
    if (xs[2] == 0 || xs[3] == 0) throw DimensionError("conv2d: empty spatial dims in " + to_string(xs));
    const std::size_t batch = xs[0], h = xs[2], w = xs[3];
    Tensor out(Shape{batch, out_ch, h, w});
    const Real* in = x.value().values().data();
    const Real* kv = k.value().values().data();
    Real* ov = out.values().data();
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t o = 0; o < out_ch; ++o) {
        Real* plane = ov + (n * out_ch + o) * h * w;
        for (std::size_t i = 0; i < h * w; ++i) plane[i] = b.value()[o];
        for (std::size_t c = 0; c < in_ch; ++c)
          for_each_tap(h, w, [&](std::size_t ky, std::size_t kx, std::size_t y0, std::size_t y1, std::size_t x0,
                                 std::size_t x1) {
            const Real wt = kv[((o * in_ch + c) * 3 + ky) * 3 + kx];
            const Real* src = in + (n * in_ch + c) * h * w;
            for (std::size_t y = y0; y < y1; ++y) {
              const Real* srow = src + (y + ky - 1) * w;
              Real* drow = plane + y * w;
              for (std::size_t xx = x0; xx < x1; ++xx) drow[xx] += wt * srow[xx + kx - 1];
            }
          });
      }
    return tape.record("conv2d", std::move(out), {x, k, b}, [x, k, b, batch, in_ch, out_ch, h, w](Tape& t,
                                                                                                 std::size_t self) {
      const auto& g = t.grad_buffer(self);
      const Real* in = x.value().values().data();
      const Real* kv = k.value().values().data();
      Real* dx = t.needs_grad(x) ? t.grad_buffer(x).data() : nullptr;
      Real* dk = t.needs_grad(k) ? t.grad_buffer(k).data() : nullptr;
      if (t.needs_grad(b)) {
        auto& db = t.grad_buffer(b);
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t o = 0; o < out_ch; ++o) {
            const Real* gp = g.data() + (n * out_ch + o) * h * w;
            Real acc = 0.0;
            for (std::size_t i = 0; i < h * w; ++i) acc += gp[i];
            db[o] += acc;
          }
      }
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t o = 0; o < out_ch; ++o) {
          const Real* gp = g.data() + (n * out_ch + o) * h * w;
          for (std::size_t c = 0; c < in_ch; ++c)
            for_each_tap(h, w, [&](std::size_t ky, std::size_t kx, std::size_t y0, std::size_t y1, std::size_t x0,
                                   std::size_t x1) {
              const std::size_t kidx = ((o * in_ch + c) * 3 + ky) * 3 + kx;
              const std::size_t base = (n * in_ch + c) * h * w;
              Real acc = 0.0;
              for (std::size_t y = y0; y < y1; ++y) {
                const std::size_t src_row = base + (y + ky - 1) * w + kx - 1;  // indexed only with xx >= x0
                const Real* grow = gp + y * w;
                if (dx != nullptr) {
                  const Real wt = kv[kidx];
                  for (std::size_t xx = x0; xx < x1; ++xx) dx[src_row + xx] += wt * grow[xx];
                }
                if (dk != nullptr)
                  for (std::size_t xx = x0; xx < x1; ++xx) acc += grow[xx] * in[src_row + xx];
              }
              if (dk != nullptr) dk[kidx] += acc;
            });
        }
    });
  }

  /// Visits the 9 kernel taps with the output row/col range whose source pixel is in bounds.
  template <typename F>
  static void for_each_tap(std::size_t h, std::size_t w, F&& fn) {
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const std::size_t y0 = ky == 0 ? 1 : 0, y1 = ky == 2 ? h - 1 : h;
        const std::size_t x0 = kx == 0 ? 1 : 0, x1 = kx == 2 ? w - 1 : w;
        fn(ky, kx, y0, y1, x0, x1);
      }
  }
};

// ---------------------------------------------------------------------------

/// Per-channel batch normalization over (batch, h, w).
///
/// Train mode normalizes with the biased batch variance and folds the batch
/// statistics into the running estimates (unbiased variance); eval mode reads
/// the running estimates only. Running statistics start at mean 0, var 1, so
/// eval before any training step is well defined.
class BatchNorm2DLayer {
 public:
  static constexpr Real default_eps = 1e-5;
  static constexpr Real default_momentum = 0.1;

  BatchNorm2DLayer() = default;
  BatchNorm2DLayer(const std::string& name, std::size_t channels)
      : gamma(name + ".gamma", Tensor(Shape{channels}, 1.0), false),
        beta(name + ".beta", Tensor(Shape{channels}, 0.0), false),
        running_mean(channels, 0.0),
        running_var(channels, 1.0) {}

  std::size_t channels() const { return running_mean.size(); }

  Var forward(Tape& tape, const Var& x) {
    if (mode == Mode::eval) return apply_eval(tape, x, tape.leaf(gamma), tape.leaf(beta));
    return apply_train(tape, x, tape.leaf(gamma), tape.leaf(beta));
  }

  Var infer(Tape& tape, const Var& x) const {
    return apply_eval(tape, x, tape.constant(Tensor(gamma.tensor.shape(), gamma.tensor.values())),
                      tape.constant(Tensor(beta.tensor.shape(), beta.tensor.values())));
  }

  std::vector<Parameter*> parameters() { return {&gamma, &beta}; }

  Parameter gamma;
  Parameter beta;
  std::vector<Real> running_mean;
  std::vector<Real> running_var;
  Real eps = default_eps;
  Real momentum = default_momentum;
  Mode mode = Mode::train;

 private:
  struct Dims {
    std::size_t batch, ch, hw;
  };

  Dims check(const Var& x) const {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != channels()) {
      throw DimensionError("batchnorm2d: expected [b x " + std::to_string(channels()) + " x h x w], got " +
                           to_string(s));
    }
    return {s[0], s[1], s[2] * s[3]};
  }

  Var apply_train(Tape& tape, const Var& x, const Var& g_var, const Var& b_var) {
    const Dims d = check(x);
    const std::size_t count = d.batch * d.hw;
    if (count < 2) throw DimensionError("batchnorm2d: train mode needs at least 2 values per channel");
    const auto& xv = x.value().values();
    std::vector<Real> mean(d.ch, 0.0), inv_std(d.ch, 0.0);
    Tensor xhat(x.shape());
    Tensor out(x.shape());
    for (std::size_t c = 0; c < d.ch; ++c) {
      Real sum = 0.0;
      for (std::size_t n = 0; n < d.batch; ++n)
        for (std::size_t i = 0; i < d.hw; ++i) sum += xv[(n * d.ch + c) * d.hw + i];
      const Real mu = sum / static_cast<Real>(count);
      Real sq = 0.0;
      for (std::size_t n = 0; n < d.batch; ++n)
        for (std::size_t i = 0; i < d.hw; ++i) {
          const Real diff = xv[(n * d.ch + c) * d.hw + i] - mu;
          sq += diff * diff;
        }
      const Real var = sq / static_cast<Real>(count);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + eps);
      const Real gm = g_var.value()[c], bt = b_var.value()[c];
      for (std::size_t n = 0; n < d.batch; ++n)
        for (std::size_t i = 0; i < d.hw; ++i) {
          const std::size_t idx = (n * d.ch + c) * d.hw + i;
          xhat[idx] = (xv[idx] - mu) * inv_std[c];
          out[idx] = gm * xhat[idx] + bt;
        }
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu;
      const Real unbiased = sq / static_cast<Real>(count - 1);
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
    }
    return tape.record(
        "batchnorm2d", std::move(out), {x, g_var, b_var},
        [x, g_var, b_var, d, inv_std, xhat = std::move(xhat)](Tape& t, std::size_t self) {
          const auto& g = t.grad_buffer(self);
          const Real count = static_cast<Real>(d.batch * d.hw);
          Real* dx = t.needs_grad(x) ? t.grad_buffer(x).data() : nullptr;
          Real* dgamma = t.needs_grad(g_var) ? t.grad_buffer(g_var).data() : nullptr;
          Real* dbeta = t.needs_grad(b_var) ? t.grad_buffer(b_var).data() : nullptr;
          for (std::size_t c = 0; c < d.ch; ++c) {
            Real sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t n = 0; n < d.batch; ++n)
              for (std::size_t i = 0; i < d.hw; ++i) {
                const std::size_t idx = (n * d.ch + c) * d.hw + i;
                sum_g += g[idx];
                sum_gx += g[idx] * xhat[idx];
              }
            if (dgamma) dgamma[c] += sum_gx;
            if (dbeta) dbeta[c] += sum_g;
            if (!dx) continue;
            const Real gm = g_var.value()[c];
            const Real k = gm * inv_std[c] / count;
            for (std::size_t n = 0; n < d.batch; ++n)
              for (std::size_t i = 0; i < d.hw; ++i) {
                const std::size_t idx = (n * d.ch + c) * d.hw + i;
                dx[idx] += k * (count * g[idx] - sum_g - xhat[idx] * sum_gx);
              }
          }
        });
  }

  Var apply_eval(Tape& tape, const Var& x, const Var& g_var, const Var& b_var) const {
    const Dims d = check(x);
    const auto& xv = x.value().values();
    std::vector<Real> inv_std(d.ch);
    Tensor xhat(x.shape());
    Tensor out(x.shape());
    for (std::size_t c = 0; c < d.ch; ++c) {
      inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
      for (std::size_t n = 0; n < d.batch; ++n)
        for (std::size_t i = 0; i < d.hw; ++i) {
          const std::size_t idx = (n * d.ch + c) * d.hw + i;
          xhat[idx] = (xv[idx] - running_mean[c]) * inv_std[c];
          out[idx] = g_var.value()[c] * xhat[idx] + b_var.value()[c];
        }
    }
    return tape.record("batchnorm2d_eval", std::move(out), {x, g_var, b_var},
                       [x, g_var, b_var, d, inv_std, xhat = std::move(xhat)](Tape& t, std::size_t self) {
                         const auto& g = t.grad_buffer(self);
                         Real* dx = t.needs_grad(x) ? t.grad_buffer(x).data() : nullptr;
                         Real* dgamma = t.needs_grad(g_var) ? t.grad_buffer(g_var).data() : nullptr;
                         Real* dbeta = t.needs_grad(b_var) ? t.grad_buffer(b_var).data() : nullptr;
                         for (std::size_t n = 0; n < d.batch; ++n)
                           for (std::size_t c = 0; c < d.ch; ++c)
                             for (std::size_t i = 0; i < d.hw; ++i) {
                               const std::size_t idx = (n * d.ch + c) * d.hw + i;
                               if (dx) dx[idx] += g[idx] * g_var.value()[c] * inv_std[c];
                               if (dgamma) dgamma[c] += g[idx] * xhat[idx];
                               if (dbeta) dbeta[c] += g[idx];
                             }
                       });
  }
};

// ---------------------------------------------------------------------------

/// Max over disjoint 2x2 windows. Ties route the gradient to the first
/// maximal position in row-major order.
inline Var maxpool2x2(const Var& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw DimensionError("maxpool2x2: expected rank-4 input, got " + to_string(s));
  if (s[2] % 2 != 0 || s[3] % 2 != 0) throw DimensionError("maxpool2x2: odd spatial dims " + to_string(s));
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h / 2, ow = w / 2;
  Tensor out(Shape{s[0], s[1], oh, ow});
  std::vector<std::size_t> winner(out.size());
  const auto& xv = x.value().values();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const std::size_t base = p * h * w + 2 * y * w + 2 * xx;
        const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = cand[0];
        for (std::size_t c = 1; c < 4; ++c)
          if (xv[cand[c]] > xv[best]) best = cand[c];
        const std::size_t o = (p * oh + y) * ow + xx;
        out[o] = xv[best];
        winner[o] = best;
      }
  return x.tape()->record("maxpool2x2", std::move(out), {x}, [x, winner = std::move(winner)](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& dx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) dx[winner[i]] += g[i];
  });
}

inline Var relu(const Var& x) { return ops::relu(x); }

/// [b x ...] -> [b x d].
inline Var flatten(const Var& x) {
  const auto& s = x.shape();
  if (s.empty()) throw DimensionError("flatten: scalar input");
  return ops::reshape(x, Shape{s[0], x.size() / s[0]});
}

// ---------------------------------------------------------------------------

struct ExtractorConfig {
  std::size_t in_channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t block1_filters = 32;
  std::size_t block2_filters = 64;

  std::size_t embedding_dim() const { return block2_filters * (height / 4) * (width / 4); }
  bool operator==(const ExtractorConfig&) const = default;
};

struct ExtractorOutput {
  Var embedding;
  /// Flattened activations fed to the SNNL term, in tap_points order.
  std::vector<Var> taps;
};

/// conv(3x3) -> BN -> ReLU -> maxpool(2x2), twice, then flatten.
class FeatureExtractor {
 public:
  enum class LayerKind { conv, batchnorm, relu, maxpool, flatten };

  /// Layer indices: 0 conv1, 1 bn1, 2 relu, 3 pool, 4 conv2, 5 bn2, 6 relu, 7 pool, 8 flatten.
  static constexpr std::size_t tap_points[3] = {3, 7, 8};
  static constexpr LayerKind layer_order[9] = {LayerKind::conv,    LayerKind::batchnorm, LayerKind::relu,
                                               LayerKind::maxpool, LayerKind::conv,      LayerKind::batchnorm,
                                               LayerKind::relu,    LayerKind::maxpool,   LayerKind::flatten};

  FeatureExtractor() = default;
  FeatureExtractor(const ExtractorConfig& cfg, RngStream& rng) : config_(cfg) {
    if (cfg.height % 4 != 0 || cfg.width % 4 != 0 || cfg.height < 4 || cfg.width < 4) {
      throw DimensionError("feature extractor: input height and width must be positive multiples of 4");
    }
    conv1 = Conv2DLayer("extractor.conv1", cfg.in_channels, cfg.block1_filters, rng);
    bn1 = BatchNorm2DLayer("extractor.bn1", cfg.block1_filters);
    conv2 = Conv2DLayer("extractor.conv2", cfg.block1_filters, cfg.block2_filters, rng);
    bn2 = BatchNorm2DLayer("extractor.bn2", cfg.block2_filters);
  }

  const ExtractorConfig& config() const { return config_; }
  std::size_t embedding_dim() const { return config_.embedding_dim(); }

  ExtractorOutput forward(Tape& tape, const Var& x) {
    check_input(x);
    ++forward_calls_;
    Var h = maxpool2x2(relu(bn1.forward(tape, conv1.forward(tape, x))));
    Var tap1 = flatten(h);
    h = maxpool2x2(relu(bn2.forward(tape, conv2.forward(tape, h))));
    Var tap2 = flatten(h);
    Var embedding = flatten(h);
    return {embedding, {tap1, tap2, embedding}};
  }

  /// Eval-mode forward with weights treated as constants.
  ExtractorOutput infer(Tape& tape, const Var& x) const {
    check_input(x);
    ++forward_calls_;
    Var h = maxpool2x2(relu(bn1.infer(tape, conv1.infer(tape, x))));
    Var tap1 = flatten(h);
    h = maxpool2x2(relu(bn2.infer(tape, conv2.infer(tape, h))));
    Var tap2 = flatten(h);
    Var embedding = flatten(h);
    return {embedding, {tap1, tap2, embedding}};
  }

  void set_mode(Mode m) {
    bn1.mode = m;
    bn2.mode = m;
  }
  Mode mode() const { return bn1.mode; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto* p : conv1.parameters()) out.push_back(p);
    for (auto* p : bn1.parameters()) out.push_back(p);
    for (auto* p : conv2.parameters()) out.push_back(p);
    for (auto* p : bn2.parameters()) out.push_back(p);
    return out;
  }

  std::size_t forward_calls() const { return forward_calls_; }

  Conv2DLayer conv1;
  BatchNorm2DLayer bn1;
  Conv2DLayer conv2;
  BatchNorm2DLayer bn2;

 private:
  void check_input(const Var& x) const {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != config_.in_channels || s[2] != config_.height || s[3] != config_.width) {
      throw DimensionError("feature extractor: expected [b x " + std::to_string(config_.in_channels) + " x " +
                           std::to_string(config_.height) + " x " + std::to_string(config_.width) + "], got " +
                           to_string(s));
    }
  }

  ExtractorConfig config_;
  mutable std::size_t forward_calls_ = 0;
};

}  // namespace moe_snnl
