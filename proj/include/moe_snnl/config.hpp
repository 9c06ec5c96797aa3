#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moe_snnl/data.hpp"
#include "moe_snnl/losses.hpp"
#include "moe_snnl/moe.hpp"
#include "moe_snnl/optim.hpp"

namespace moe_snnl {

/// Bad flags, bad config values, missing data. Maps to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class RunMode { baseline, experimental };

inline std::string to_string(RunMode m) { return m == RunMode::baseline ? "baseline" : "experimental"; }

inline RunMode parse_mode(const std::string& s) {
  if (s == "baseline") return RunMode::baseline;
  if (s == "experimental") return RunMode::experimental;
  throw UsageError("mode must be 'baseline' or 'experimental', got '" + s + "'");
}

inline constexpr const char* kDataDirEnv = "MOE_SNNL_DATA_DIR";

struct SweepSettings {
  Real alpha_min = 0.0;
  Real alpha_max = 50.0;
  std::size_t alpha_count = 7;
  bool seed_per_alpha = false;
};

struct ExperimentConfig {
  std::string dataset = "blobs";  // blobs | mnist | fashion-mnist | cifar10 | cifar100
  std::string data_dir;           // empty: taken from MOE_SNNL_DATA_DIR
  std::size_t subset_size = 0;    // 0 keeps the full train split
  BlobsSpec blobs;

  std::size_t n_experts = 5;
  std::size_t expert_hidden = 128;
  std::size_t block1_filters = 32;
  std::size_t block2_filters = 64;

  Real alpha = 1.0;
  Real temperature = 1.0;
  RunMode mode = RunMode::experimental;

  std::size_t total_steps = 1000;
  std::size_t batch_size = 100;
  std::size_t eval_every = 500;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

  Real momentum = 0.9;
  Real weight_decay = 1e-4;
  Real max_lr = 0.1;
  Real pct_start = 0.3;
  Real div_factor = 25.0;
  Real final_div_factor = 1e4;

  SweepSettings sweep;
  std::string out_dir = "runs";

  Real effective_alpha() const { return mode == RunMode::baseline ? 0.0 : alpha; }

  SNNLConfig snnl() const { return SNNLConfig{temperature, effective_alpha(), 1e-12}; }

  SGDConfig sgd() const {
    return SGDConfig{momentum, weight_decay, max_lr, total_steps, pct_start, div_factor, final_div_factor};
  }

  std::filesystem::path resolved_data_dir() const {
    if (!data_dir.empty()) return data_dir;
    if (const char* env = std::getenv(kDataDirEnv)) return env;
    return {};
  }

  void validate() const {
    static const std::set<std::string> known{"blobs", "mnist", "fashion-mnist", "cifar10", "cifar100"};
    if (!known.count(dataset)) throw UsageError("unknown dataset '" + dataset + "'");
    if (n_experts < 1) throw UsageError("experts must be >= 1");
    if (total_steps < 2) throw UsageError("steps must be >= 2");
    if (batch_size < 2) throw UsageError("batch size must be >= 2");
    if (eval_every == 0) throw UsageError("eval-every must be >= 1");
    if (seeds.empty()) throw UsageError("seed list is empty");
    if (!(temperature > 0.0)) throw UsageError("temperature must be positive");
    if (expert_hidden == 0 || block1_filters == 0 || block2_filters == 0) throw UsageError("layer sizes must be positive");
    try {
      sgd().validate();
      if (dataset == "blobs") blobs.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
};

inline nlohmann::json to_json(const BlobsSpec& b) {
  return {{"classes", b.classes},
          {"raw_dim", b.raw_dim},
          {"per_class", b.per_class},
          {"sigma_between", b.sigma_between},
          {"sigma_within", b.sigma_within},
          {"entanglement", b.entanglement()},
          {"seed", b.seed}};
}

/// Fixed choices that are not configurable but shape every result.
inline nlohmann::json fixed_constants() {
  return {{"rng", "xoshiro256** seeded by splitmix64(seed, stream); model init stream 1, batch order stream 2"},
          {"precision", "float64"},
          {"normalization", "per-channel standardization with train-split statistics"},
          {"batching", "fixed size, per-epoch reshuffle, short batch dropped"},
          {"snnl",
           {{"distance", "squared euclidean"},
            {"anchor_without_same_class_peer", "excluded from the batch mean"},
            {"all_anchors_excluded", "loss 0, flagged degenerate"},
            {"taps", {"flatten(block1 pool)", "flatten(block2 pool)", "embedding"}},
            {"aggregation", "minimum over taps, gradient through the minimizing tap"}}},
          {"moe_loss", {{"probability_clamp", kProbabilityClamp}}},
          {"batch_norm", {{"eps", 1e-5}, {"momentum", 0.1}, {"running_var", "unbiased batch variance"}}},
          {"init", {{"conv", "kaiming normal"}, {"expert_hidden", "kaiming normal"}, {"expert_output", "xavier uniform"},
                    {"gate", "xavier uniform"}, {"bias", "zero"}}},
          {"scheduler", {{"peak_step", "round(pct_start * total_steps)"}, {"anneal", "cosine"},
                         {"final_lr", "max_lr / final_div_factor at step total_steps - 1"}}},
          {"inference", "hard routing: argmax gate, ties to lowest index"},
          {"entropy", "natural log, uniform mean over present classes"},
          {"similarity", "signed mean of upper-triangle cosines of expert hidden-layer weights"},
          {"wilcoxon", "exact, two-sided = min(1, 2 * min tail); zero differences dropped; average ranks"},
          {"evaluation", "test split every eval_every steps plus final step"}};
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["dataset"] = c.dataset;
  j["data_dir"] = c.data_dir;
  j["subset_size"] = c.subset_size;
  j["blobs"] = to_json(c.blobs);
  j["n_experts"] = c.n_experts;
  j["expert_hidden"] = c.expert_hidden;
  j["block1_filters"] = c.block1_filters;
  j["block2_filters"] = c.block2_filters;
  j["alpha"] = c.alpha;
  j["temperature"] = c.temperature;
  j["mode"] = to_string(c.mode);
  j["total_steps"] = c.total_steps;
  j["batch_size"] = c.batch_size;
  j["eval_every"] = c.eval_every;
  j["seeds"] = c.seeds;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["max_lr"] = c.max_lr;
  j["pct_start"] = c.pct_start;
  j["div_factor"] = c.div_factor;
  j["final_div_factor"] = c.final_div_factor;
  j["sweep"] = {{"alpha_min", c.sweep.alpha_min},
                {"alpha_max", c.sweep.alpha_max},
                {"alpha_count", c.sweep.alpha_count},
                {"seed_per_alpha", c.sweep.seed_per_alpha}};
  j["out_dir"] = c.out_dir;
  return j;
}

/// Embedded in every output: the config plus derived and fixed values.
inline nlohmann::json resolved_json(const ExperimentConfig& c) {
  nlohmann::json j = to_json(c);
  const auto sgd = c.sgd();
  j["derived"] = {{"effective_alpha", c.effective_alpha()},
                  {"initial_lr", sgd.initial_lr()},
                  {"final_lr", sgd.final_lr()},
                  {"peak_step", sgd.peak_step()}};
  j["constants"] = fixed_constants();
  return j;
}

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config field '") + key + "': " + e.what());
  }
}

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw UsageError("unknown config key '" + where + it.key() + "'");
}

}  // namespace detail

/// Missing keys keep their defaults; unknown keys are rejected. The
/// "derived" and "constants" blocks written by resolved_json are accepted and ignored.
inline ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig c = {}) {
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  detail::reject_unknown(j,
                         {"dataset", "data_dir", "subset_size", "blobs", "n_experts", "expert_hidden", "block1_filters",
                          "block2_filters", "alpha", "temperature", "mode", "total_steps", "batch_size", "eval_every",
                          "seeds", "momentum", "weight_decay", "max_lr", "pct_start", "div_factor", "final_div_factor",
                          "sweep", "out_dir", "derived", "constants"},
                         "");
  detail::read_field(j, "dataset", c.dataset);
  detail::read_field(j, "data_dir", c.data_dir);
  detail::read_field(j, "subset_size", c.subset_size);
  if (j.contains("blobs")) {
    const auto& b = j.at("blobs");
    if (!b.is_object()) throw UsageError("config field 'blobs' must be an object");
    detail::reject_unknown(b, {"classes", "raw_dim", "per_class", "sigma_between", "sigma_within", "entanglement", "seed"},
                           "blobs.");
    detail::read_field(b, "classes", c.blobs.classes);
    detail::read_field(b, "raw_dim", c.blobs.raw_dim);
    detail::read_field(b, "per_class", c.blobs.per_class);
    detail::read_field(b, "sigma_between", c.blobs.sigma_between);
    detail::read_field(b, "sigma_within", c.blobs.sigma_within);
    detail::read_field(b, "seed", c.blobs.seed);
    if (b.contains("entanglement") && !b.contains("sigma_within")) {
      Real e = 0.0;
      detail::read_field(b, "entanglement", e);
      c.blobs.sigma_within = e * c.blobs.sigma_between;
    }
  }
  detail::read_field(j, "n_experts", c.n_experts);
  detail::read_field(j, "expert_hidden", c.expert_hidden);
  detail::read_field(j, "block1_filters", c.block1_filters);
  detail::read_field(j, "block2_filters", c.block2_filters);
  detail::read_field(j, "alpha", c.alpha);
  detail::read_field(j, "temperature", c.temperature);
  if (j.contains("mode")) {
    std::string m;
    detail::read_field(j, "mode", m);
    c.mode = parse_mode(m);
  }
  detail::read_field(j, "total_steps", c.total_steps);
  detail::read_field(j, "batch_size", c.batch_size);
  detail::read_field(j, "eval_every", c.eval_every);
  detail::read_field(j, "seeds", c.seeds);
  detail::read_field(j, "momentum", c.momentum);
  detail::read_field(j, "weight_decay", c.weight_decay);
  detail::read_field(j, "max_lr", c.max_lr);
  detail::read_field(j, "pct_start", c.pct_start);
  detail::read_field(j, "div_factor", c.div_factor);
  detail::read_field(j, "final_div_factor", c.final_div_factor);
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    if (!s.is_object()) throw UsageError("config field 'sweep' must be an object");
    detail::reject_unknown(s, {"alpha_min", "alpha_max", "alpha_count", "seed_per_alpha"}, "sweep.");
    detail::read_field(s, "alpha_min", c.sweep.alpha_min);
    detail::read_field(s, "alpha_max", c.sweep.alpha_max);
    detail::read_field(s, "alpha_count", c.sweep.alpha_count);
    detail::read_field(s, "seed_per_alpha", c.sweep.seed_per_alpha);
  }
  detail::read_field(j, "out_dir", c.out_dir);
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError("config file " + path.string() + ": " + e.what());
  }
  return config_from_json(j, std::move(base));
}

/// Model shape implied by the config and the dataset's image geometry.
inline MoEConfig model_config(const ExperimentConfig& c, const Dataset& ds) {
  MoEConfig m;
  m.extractor.in_channels = ds.channels();
  m.extractor.height = ds.height();
  m.extractor.width = ds.width();
  m.extractor.block1_filters = c.block1_filters;
  m.extractor.block2_filters = c.block2_filters;
  m.n_experts = c.n_experts;
  m.n_classes = ds.num_classes;
  m.expert_hidden = c.expert_hidden;
  return m;
}

/// Train/test splits for the configured dataset; the test split uses train statistics.
inline std::pair<Dataset, Dataset> load_datasets(const ExperimentConfig& c) {
  if (c.dataset == "blobs") {
    auto splits = make_blobs(c.blobs);
    if (c.subset_size) splits.first = subset(splits.first, c.subset_size);
    return splits;
  }
  const std::filesystem::path root = c.resolved_data_dir();
  if (root.empty()) {
    throw UsageError("dataset '" + c.dataset + "' needs --data-dir or " + std::string(kDataDirEnv));
  }
  auto pick = [&](std::initializer_list<const char*> names) {
    for (const char* n : names)
      if (std::filesystem::is_directory(root / n)) return root / n;
    if (std::filesystem::is_directory(root)) return root;
    throw UsageError("data directory not found: " + root.string());
  };
  std::pair<Dataset, Dataset> out;
  try {
    if (c.dataset == "mnist" || c.dataset == "fashion-mnist") {
      const auto dir = c.dataset == "mnist" ? pick({"mnist", "MNIST"}) : pick({"fashion-mnist", "fashion_mnist", "FashionMNIST"});
      for (const char* f : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"})
        if (!std::filesystem::is_regular_file(dir / f)) throw UsageError("missing data file: " + (dir / f).string());
      out.first = load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", std::nullopt, Split::train);
      out.second = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", out.first.stats, Split::test);
      out.first.name = out.second.name = c.dataset;
    } else {
      const bool ten = c.dataset == "cifar10";
      const auto dir = ten ? pick({"cifar10", "cifar-10-batches-bin"}) : pick({"cifar100", "cifar-100-binary"});
      const auto variant = ten ? CifarVariant::cifar10 : CifarVariant::cifar100;
      out.first = load_cifar(dir, variant, Split::train, std::nullopt);
      out.second = load_cifar(dir, variant, Split::test, out.first.stats);
    }
  } catch (const FormatError& e) {
    throw UsageError(e.what());
  } catch (const std::runtime_error& e) {
    throw UsageError(e.what());
  }
  // Statistics come from the full train split; the subset is drawn afterwards.
  if (c.subset_size) out.first = subset(out.first, c.subset_size);
  return out;
}

}  // namespace moe_snnl
