#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "moe_snnl/layers.hpp"
#include "moe_snnl/losses.hpp"
#include "moe_snnl/ops.hpp"
#include "moe_snnl/rng.hpp"
#include "moe_snnl/tape.hpp"

namespace moe_snnl {

struct Batch {
  Tensor images;  // [b x c x h x w]
  Labels labels;
};

struct MoEConfig {
  ExtractorConfig extractor;
  std::size_t n_experts = 5;
  std::size_t n_classes = 10;
  std::size_t expert_hidden = 128;

  bool operator==(const MoEConfig&) const = default;
};

/// Hidden layer (Kaiming, ReLU) followed by a Xavier-initialized output layer.
class ExpertMLP {
 public:
  ExpertMLP() = default;
  ExpertMLP(const std::string& name, std::size_t in, std::size_t hidden_units, std::size_t classes, RngStream& rng)
      : hidden(name + ".hidden", in, hidden_units, Init::kaiming, rng),
        output(name + ".output", hidden_units, classes, Init::xavier, rng) {}

  /// Class probabilities.
  Var forward(Tape& tape, const Var& x) { return softmax(output.forward(tape, ops::relu(hidden.forward(tape, x)))); }
  Var infer(Tape& tape, const Var& x) const {
    return softmax(output.infer(tape, ops::relu(hidden.infer(tape, x))));
  }

  std::vector<Parameter*> parameters() { return {&hidden.weight, &hidden.bias, &output.weight, &output.bias}; }

  DenseLayer hidden;
  DenseLayer output;
};

struct ForwardTrace {
  Var embedding;
  std::vector<Var> tap_activations;
  Var gate_probs;
  std::vector<Var> expert_probs;
  std::vector<std::size_t> hard_choice;
};

/// Feature extractor feeding a linear softmax gate and n expert MLPs.
class MoEModel {
 public:
  MoEModel(const MoEConfig& cfg, RngStream& rng) : config_(cfg) {
    if (cfg.n_experts < 1) throw std::invalid_argument("MoE model needs at least one expert");
    if (cfg.n_classes < 2) throw std::invalid_argument("MoE model needs at least two classes");
    extractor = FeatureExtractor(cfg.extractor, rng);
    const std::size_t d = extractor.embedding_dim();
    gate = DenseLayer("gate", d, cfg.n_experts, Init::xavier, rng);
    for (std::size_t i = 0; i < cfg.n_experts; ++i)
      experts.emplace_back("expert." + std::to_string(i), d, cfg.expert_hidden, cfg.n_classes, rng);
  }

  MoEModel(const MoEModel&) = delete;
  MoEModel& operator=(const MoEModel&) = delete;
  MoEModel(MoEModel&&) = default;
  MoEModel& operator=(MoEModel&&) = default;

  const MoEConfig& config() const { return config_; }
  std::size_t n_experts() const { return experts.size(); }
  std::size_t n_classes() const { return config_.n_classes; }

  void set_mode(Mode m) { extractor.set_mode(m); }
  Mode mode() const { return extractor.mode(); }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out = extractor.parameters();
    out.push_back(&gate.weight);
    out.push_back(&gate.bias);
    for (auto& e : experts)
      for (auto* p : e.parameters()) out.push_back(p);
    return out;
  }

  FeatureExtractor extractor;
  DenseLayer gate;
  std::vector<ExpertMLP> experts;

 private:
  MoEConfig config_;
};

/// Training forward: one embedding pass shared by the gate and every expert.
inline ForwardTrace forward_train(MoEModel& model, Tape& tape, const Tensor& images) {
  ForwardTrace trace;
  auto features = model.extractor.forward(tape, tape.constant(Tensor(images.shape(), images.values())));
  trace.embedding = features.embedding;
  trace.tap_activations = std::move(features.taps);
  trace.gate_probs = softmax(model.gate.forward(tape, trace.embedding));
  for (auto& expert : model.experts) trace.expert_probs.push_back(expert.forward(tape, trace.embedding));
  trace.hard_choice = ops::argmax_rows(trace.gate_probs.value());
  return trace;
}

/// Builds the composite objective on the tape and fills the report.
inline Var build_objective(const ForwardTrace& trace, const Labels& labels, const SNNLConfig& snnl_cfg,
                           LossReport& report, bool* degenerate = nullptr) {
  snnl_cfg.validate();
  Var moe = moe_loss(trace.gate_probs, trace.expert_probs, labels);
  std::vector<Var> taps;
  bool any_degenerate = false;
  for (const Var& act : trace.tap_activations) {
    auto r = snnl(act, labels, snnl_cfg.temperature);
    any_degenerate = any_degenerate || r.degenerate;
    taps.push_back(r.value);
  }
  Var total = composite_loss(moe, taps, snnl_cfg.alpha);
  report.moe_loss = moe.value()[0];
  report.snnl_per_tap.clear();
  for (const Var& t : taps) report.snnl_per_tap.push_back(t.value()[0]);
  report.snnl_min = report.snnl_per_tap[min_tap_index(report.snnl_per_tap)];
  report.composite = total.value()[0];
  if (degenerate) *degenerate = any_degenerate;
  return total;
}

struct InferenceResult {
  Tensor embedding;   // [N x d]
  Tensor gate_probs;  // [N x n]
  std::vector<Tensor> expert_probs;
  std::vector<std::size_t> hard_choice;
};

/// Eval-mode forward over a whole image set, in chunks.
inline InferenceResult run_inference(const MoEModel& model, const Tensor& images, std::size_t chunk = 256) {
  if (model.mode() != Mode::eval) throw std::logic_error("inference requires the model in eval mode");
  if (images.rank() != 4) throw DimensionError("inference: expected [N x c x h x w] images");
  const std::size_t total = images.dim(0);
  const std::size_t per = images.size() / total;
  const std::size_t d = model.extractor.embedding_dim(), n = model.n_experts(), k = model.n_classes();
  InferenceResult out{Tensor(Shape{total, d}), Tensor(Shape{total, n}), {}, {}};
  for (std::size_t i = 0; i < n; ++i) out.expert_probs.emplace_back(Shape{total, k});
  for (std::size_t start = 0; start < total; start += chunk) {
    const std::size_t count = std::min(chunk, total - start);
    Shape shape = images.shape();
    shape[0] = count;
    std::vector<Real> slice(images.values().begin() + static_cast<std::ptrdiff_t>(start * per),
                            images.values().begin() + static_cast<std::ptrdiff_t>((start + count) * per));
    Tape tape;
    auto features = model.extractor.infer(tape, tape.constant(Tensor(shape, std::move(slice))));
    Var gate = softmax(model.gate.infer(tape, features.embedding));
    std::copy(features.embedding.value().values().begin(), features.embedding.value().values().end(),
              out.embedding.values().begin() + static_cast<std::ptrdiff_t>(start * d));
    std::copy(gate.value().values().begin(), gate.value().values().end(),
              out.gate_probs.values().begin() + static_cast<std::ptrdiff_t>(start * n));
    for (std::size_t e = 0; e < n; ++e) {
      Var probs = model.experts[e].infer(tape, features.embedding);
      std::copy(probs.value().values().begin(), probs.value().values().end(),
                out.expert_probs[e].values().begin() + static_cast<std::ptrdiff_t>(start * k));
    }
  }
  out.hard_choice = ops::argmax_rows(out.gate_probs);
  return out;
}

/// Hard routing: argmax gate picks the expert, whose argmax class is returned.
inline Labels hard_predictions(const InferenceResult& r) {
  const std::size_t total = r.gate_probs.dim(0), k = r.expert_probs.front().dim(1);
  Labels out(total);
  for (std::size_t s = 0; s < total; ++s) {
    const Tensor& chosen = r.expert_probs[r.hard_choice[s]];
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (chosen[s * k + c] > chosen[s * k + best]) best = c;
    out[s] = static_cast<int>(best);
  }
  return out;
}

/// Gate-weighted mixture of expert probability rows.
inline Tensor soft_mixture(const InferenceResult& r) {
  const std::size_t total = r.gate_probs.dim(0), n = r.gate_probs.dim(1), k = r.expert_probs.front().dim(1);
  Tensor out(Shape{total, k});
  for (std::size_t s = 0; s < total; ++s)
    for (std::size_t i = 0; i < n; ++i) {
      const Real g = r.gate_probs[s * n + i];
      for (std::size_t c = 0; c < k; ++c) out[s * k + c] += g * r.expert_probs[i][s * k + c];
    }
  return out;
}

inline Labels predict(const MoEModel& model, const Tensor& images) {
  return hard_predictions(run_inference(model, images));
}

inline Tensor soft_predict(const MoEModel& model, const Tensor& images) {
  return soft_mixture(run_inference(model, images));
}

}  // namespace moe_snnl
