#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "moe_snnl/checkpoint.hpp"
#include "moe_snnl/moe.hpp"
#include "test_support.hpp"

using namespace moe_snnl;
using moe_snnl::testing::random_tensor;

namespace {

MoEConfig toy_config(std::size_t experts = 2, std::size_t classes = 3) {
  MoEConfig c;
  c.extractor = ExtractorConfig{1, 4, 4, 2, 3};
  c.n_experts = experts;
  c.n_classes = classes;
  c.expert_hidden = 4;
  return c;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "moe_snnl_moe_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void spit(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

InferenceResult handmade(std::vector<Real> gate, std::vector<std::vector<Real>> experts, std::size_t k) {
  const std::size_t n = experts.size(), total = gate.size() / n;
  InferenceResult r{Tensor(Shape{total, 1}), Tensor(Shape{total, n}, std::move(gate)), {}, {}};
  for (auto& e : experts) r.expert_probs.emplace_back(Shape{total, k}, std::move(e));
  r.hard_choice = ops::argmax_rows(r.gate_probs);
  return r;
}

}  // namespace

TEST(MoE, TraceShapesAndGateRows) {
  RngStream rng(61);
  MoEModel model(toy_config(3, 4), rng);
  Tape t;
  auto trace = forward_train(model, t, random_tensor({5, 1, 4, 4}, rng));
  EXPECT_EQ(trace.embedding.shape(), (Shape{5, 3}));
  EXPECT_EQ(trace.gate_probs.shape(), (Shape{5, 3}));
  ASSERT_EQ(trace.expert_probs.size(), 3u);
  for (const auto& e : trace.expert_probs) EXPECT_EQ(e.shape(), (Shape{5, 4}));
  EXPECT_EQ(trace.tap_activations.size(), 3u);
  for (std::size_t r = 0; r < 5; ++r) {
    Real s = 0.0;
    for (std::size_t i = 0; i < 3; ++i) s += trace.gate_probs.value()[r * 3 + i];
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
  EXPECT_EQ(trace.hard_choice, ops::argmax_rows(trace.gate_probs.value()));
}

TEST(MoE, SingleExpertGateIsOne) {
  RngStream rng(62);
  MoEModel model(toy_config(1), rng);
  Tape t;
  auto trace = forward_train(model, t, random_tensor({3, 1, 4, 4}, rng));
  for (Real g : trace.gate_probs.value().values()) EXPECT_EQ(g, 1.0);
}

TEST(MoE, EmbeddingComputedOncePerForward) {
  RngStream rng(63);
  MoEModel model(toy_config(4), rng);
  Tape t;
  forward_train(model, t, random_tensor({2, 1, 4, 4}, rng));
  EXPECT_EQ(model.extractor.forward_calls(), 1u);
  model.set_mode(Mode::eval);
  run_inference(model, random_tensor({600, 1, 4, 4}, rng), 256);
  EXPECT_EQ(model.extractor.forward_calls(), 4u);  // one per chunk
}

TEST(MoE, ConstructionAndShapeErrors) {
  RngStream rng(64);
  EXPECT_THROW(MoEModel(toy_config(0), rng), std::invalid_argument);
  EXPECT_THROW(MoEModel(toy_config(2, 1), rng), std::invalid_argument);
  MoEModel model(toy_config(), rng);
  Tape t;
  EXPECT_THROW(forward_train(model, t, Tensor(Shape{2, 1, 8, 8})), DimensionError);
}

TEST(MoE, ObjectiveGradientThroughWholeModel) {
  RngStream rng(65);
  for (std::size_t batch : {2, 4}) {
    MoEModel model(toy_config(), rng);
    auto x = random_tensor({batch, 1, 4, 4}, rng);
    Labels y = batch == 2 ? Labels{1, 1} : Labels{0, 2, 0, 2};
    SNNLConfig cfg;
    cfg.alpha = 0.8;
    auto err = moe_snnl::testing::gradient_error(
        [&](Tape& t, const std::vector<Var>&) {
          LossReport report;
          return build_objective(forward_train(model, t, x), y, cfg, report);
        },
        {}, model.parameters());
    EXPECT_LT(err, 1e-4) << "batch " << batch;
  }
}

TEST(MoE, ObjectiveReportIsConsistent) {
  RngStream rng(66);
  MoEModel model(toy_config(), rng);
  Tape t;
  auto trace = forward_train(model, t, random_tensor({6, 1, 4, 4}, rng));
  SNNLConfig cfg;
  cfg.alpha = -2.5;
  LossReport r;
  bool degenerate = true;
  Var total = build_objective(trace, {0, 1, 2, 0, 1, 2}, cfg, r, &degenerate);
  EXPECT_FALSE(degenerate);
  ASSERT_EQ(r.snnl_per_tap.size(), 3u);
  EXPECT_EQ(r.snnl_min, *std::min_element(r.snnl_per_tap.begin(), r.snnl_per_tap.end()));
  EXPECT_EQ(r.composite, r.moe_loss + cfg.alpha * r.snnl_min);
  EXPECT_EQ(total.value()[0], r.composite);
}

TEST(Predict, HardRoutingFollowsGate) {
  // Expert 0 says class 3, expert 1 says class 0.
  auto r = handmade({0.9, 0.1, 0.5, 0.5, 0.2, 0.8},
                    {{0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0}}, 4);
  EXPECT_EQ(hard_predictions(r), (Labels{3, 3, 0}));
}

TEST(Predict, InvariantToMonotoneGateTransform) {
  RngStream rng(67);
  std::vector<Real> gate(40 * 4);
  for (auto& g : gate) g = rng.uniform(-3.0, 3.0);
  std::vector<std::vector<Real>> experts(4, std::vector<Real>(40 * 5));
  for (auto& e : experts)
    for (auto& v : e) v = rng.uniform();
  auto base = hard_predictions(handmade(gate, experts, 5));
  std::vector<Real> squashed = gate;
  for (auto& g : squashed) g = std::tanh(g) * 7.0 + g * g * g;
  EXPECT_EQ(hard_predictions(handmade(squashed, experts, 5)), base);
}

TEST(Predict, SoftMixtureAnalyticAndSingleExpert) {
  auto r = handmade({0.5, 0.5}, {{1, 0}, {0, 1}}, 2);
  EXPECT_EQ(soft_mixture(r).values(), (std::vector<Real>{0.5, 0.5}));
  auto one = handmade({1.0, 1.0}, {{0.2, 0.8, 0.6, 0.4}}, 2);
  EXPECT_EQ(soft_mixture(one).values(), (std::vector<Real>{0.2, 0.8, 0.6, 0.4}));
}

TEST(Predict, SoftPredictMatchesExplicitMixture) {
  RngStream rng(68);
  MoEModel model(toy_config(3, 4), rng);
  model.set_mode(Mode::eval);
  auto x = random_tensor({7, 1, 4, 4}, rng);
  auto soft = soft_predict(model, x);
  // Recompute every piece by hand from the dense layers.
  auto inf = run_inference(model, x);
  const auto& emb = inf.embedding;
  auto dense = [](const DenseLayer& l, const std::vector<Real>& in) {
    std::vector<Real> out(l.out_features());
    for (std::size_t o = 0; o < out.size(); ++o) {
      out[o] = l.bias.tensor[o];
      for (std::size_t i = 0; i < in.size(); ++i) out[o] += l.weight.tensor[o * in.size() + i] * in[i];
    }
    return out;
  };
  auto softmax_vec = [](std::vector<Real> z) {
    const Real m = *std::max_element(z.begin(), z.end());
    Real s = 0.0;
    for (auto& v : z) s += (v = std::exp(v - m));
    for (auto& v : z) v /= s;
    return z;
  };
  for (std::size_t s = 0; s < 7; ++s) {
    std::vector<Real> e(emb.values().begin() + s * 3, emb.values().begin() + (s + 1) * 3);
    auto g = softmax_vec(dense(model.gate, e));
    std::vector<Real> mix(4, 0.0);
    for (std::size_t i = 0; i < 3; ++i) {
      auto h = dense(model.experts[i].hidden, e);
      for (auto& v : h) v = std::max(v, 0.0);
      auto p = softmax_vec(dense(model.experts[i].output, h));
      for (std::size_t c = 0; c < 4; ++c) mix[c] += g[i] * p[c];
    }
    Real row = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_NEAR(soft[s * 4 + c], mix[c], 1e-12);
      row += soft[s * 4 + c];
    }
    EXPECT_NEAR(row, 1.0, 1e-6);
  }
  auto hard = predict(model, x);
  EXPECT_EQ(hard, predict(model, x));
}

TEST(Predict, InferenceRequiresEvalMode) {
  RngStream rng(69);
  MoEModel model(toy_config(), rng);
  EXPECT_THROW(predict(model, random_tensor({2, 1, 4, 4}, rng)), std::logic_error);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  RngStream rng(70);
  MoEModel model(toy_config(3), rng);
  {
    Tape t;
    forward_train(model, t, random_tensor({4, 1, 4, 4}, rng));  // moves BN running stats off their defaults
  }
  const auto a = temp_path("a.ckpt"), b = temp_path("b.ckpt"), c = temp_path("c.ckpt");
  export_checkpoint(model, a);
  MoEModel loaded = import_checkpoint(a);
  EXPECT_EQ(loaded.mode(), Mode::eval);
  EXPECT_EQ(loaded.config(), model.config());
  export_checkpoint(loaded, b);
  EXPECT_EQ(slurp(a), slurp(b));
  MoEModel again = import_checkpoint(b);
  export_checkpoint(again, c);
  EXPECT_EQ(slurp(b), slurp(c));
  auto pa = loaded.parameters(), pb = again.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->tensor.values(), pb[i]->tensor.values()) << pa[i]->name;
  EXPECT_EQ(loaded.extractor.bn2.running_var, again.extractor.bn2.running_var);
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t k = 0; k < pa[i]->tensor.size(); ++k)
      ASSERT_EQ(static_cast<float>(model.parameters()[i]->tensor[k]), pa[i]->tensor[k]);
}

TEST(Checkpoint, DefaultCifarModelEntryCounts) {
  RngStream rng(71);
  MoEConfig cfg;
  cfg.extractor = ExtractorConfig{3, 32, 32, 32, 64};
  cfg.n_experts = 5;
  MoEModel model(cfg, rng);
  auto entries = model_state(model);
  std::size_t kernels = 0, dense_weights = 0, biases = 0, bn = 0, meta = 0;
  for (const auto& e : entries) {
    if (e.name.ends_with(".kernels")) ++kernels;
    else if (e.name.ends_with(".weight")) ++dense_weights;
    else if (e.name.ends_with(".bias")) ++biases;
    else if (e.name.starts_with("extractor.bn")) ++bn;
    else if (e.name.starts_with("meta.")) ++meta;
  }
  EXPECT_EQ(kernels, 2u);
  EXPECT_EQ(dense_weights, 1u + 2u * 5u);  // gate plus hidden and output per expert
  EXPECT_EQ(biases, 2u + 1u + 2u * 5u);
  EXPECT_EQ(bn, 2u * 4u);  // gamma, beta, running mean, running var
  EXPECT_EQ(meta, 1u);
  EXPECT_EQ(entries.size(), kernels + dense_weights + biases + bn + meta);
  bool has = false;
  for (const auto& e : entries) has = has || e.name == "expert.3.hidden.weight";
  EXPECT_TRUE(has);
}

TEST(Checkpoint, FormatErrors) {
  RngStream rng(72);
  MoEModel model(toy_config(), rng);
  const auto good = temp_path("good.ckpt"), bad = temp_path("bad.ckpt");
  export_checkpoint(model, good);
  const std::string bytes = slurp(good);
  ASSERT_EQ(bytes.substr(0, 4), "MOE1");

  EXPECT_THROW(import_checkpoint(temp_path("does-not-exist.ckpt")), std::runtime_error);

  std::string wrong_magic = bytes;
  wrong_magic[3] = '2';
  spit(bad, wrong_magic);
  EXPECT_THROW(import_checkpoint(bad), FormatError);

  std::string wrong_version = bytes;
  wrong_version[4] = 7;
  spit(bad, wrong_version);
  EXPECT_THROW(import_checkpoint(bad), FormatError);

  spit(bad, bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(import_checkpoint(bad), FormatError);

  spit(bad, bytes + "x");
  EXPECT_THROW(import_checkpoint(bad), FormatError);

  spit(bad, bytes.substr(0, 6));
  EXPECT_THROW(import_checkpoint(bad), FormatError);
}

TEST(Checkpoint, ShapeMismatchAndMissingEntry) {
  RngStream rng(73);
  MoEModel model(toy_config(), rng);
  auto entries = model_state(model);
  auto reshaped = entries;
  for (auto& e : reshaped)
    if (e.name == "gate.weight") e.shape = Shape{e.shape[1], e.shape[0]};
  try {
    model_from_state(decode_checkpoint(encode_checkpoint(reshaped)));
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("gate.weight"), std::string::npos) << e.what();
  }
  auto missing = entries;
  missing.erase(std::remove_if(missing.begin(), missing.end(),
                               [](const CheckpointEntry& e) { return e.name == "expert.1.output.bias"; }),
                missing.end());
  EXPECT_THROW(model_from_state(missing), FormatError);
}
