// moe-snnl: train, compare, sweep, stats and export subcommands.
//
// Exit codes: 0 success, 1 numeric or runtime failure, 2 usage or data error.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "moe_snnl/checkpoint.hpp"
#include "moe_snnl/config.hpp"
#include "moe_snnl/harness.hpp"
#include "moe_snnl/metrics.hpp"
#include "moe_snnl/svg.hpp"

namespace fs = std::filesystem;
using namespace moe_snnl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitNumeric = 1;
constexpr int kExitUsage = 2;

struct CommonFlags {
  std::string config_path;
  std::optional<std::string> dataset, data_dir, mode, out;
  std::optional<std::size_t> experts, steps, batch_size, eval_every, subset_size, hidden;
  std::optional<Real> alpha, temperature, max_lr;
  std::optional<std::size_t> blob_classes, blob_dim, blob_per_class;
  std::optional<Real> entanglement;
  std::optional<std::uint64_t> blob_seed;
  bool no_timestamps = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON config file; flags override its values");
  cmd->add_option("--dataset", f.dataset, "blobs | mnist | fashion-mnist | cifar10 | cifar100");
  cmd->add_option("--data-dir", f.data_dir, std::string("dataset root (default $") + kDataDirEnv + ")");
  cmd->add_option("--experts", f.experts, "number of experts");
  cmd->add_option("--hidden", f.hidden, "expert hidden units");
  cmd->add_option("--alpha", f.alpha, "SNNL weight");
  cmd->add_option("--temperature", f.temperature, "SNNL temperature");
  cmd->add_option("--steps", f.steps, "optimizer steps");
  cmd->add_option("--batch-size", f.batch_size, "mini-batch size");
  cmd->add_option("--max-lr", f.max_lr, "peak learning rate");
  cmd->add_option("--eval-every", f.eval_every, "evaluation interval in steps");
  cmd->add_option("--subset-size", f.subset_size, "use only the first N training samples");
  cmd->add_option("--mode", f.mode, "baseline | experimental");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--blob-classes", f.blob_classes, "blobs: number of classes");
  cmd->add_option("--blob-dim", f.blob_dim, "blobs: raw dimensionality");
  cmd->add_option("--blob-per-class", f.blob_per_class, "blobs: samples per class");
  cmd->add_option("--entanglement", f.entanglement, "blobs: sigma_within / sigma_between");
  cmd->add_option("--blob-seed", f.blob_seed, "blobs: generator seed");
  cmd->add_flag("--no-timestamps", f.no_timestamps, "omit wall-clock fields from run records");
  cmd->add_flag("--quiet", f.quiet, "no progress output");
}

ExperimentConfig resolve(const CommonFlags& f) {
  ExperimentConfig c = f.config_path.empty() ? ExperimentConfig{} : load_config(f.config_path);
  if (f.dataset) c.dataset = *f.dataset;
  if (f.data_dir) c.data_dir = *f.data_dir;
  if (f.experts) c.n_experts = *f.experts;
  if (f.hidden) c.expert_hidden = *f.hidden;
  if (f.alpha) c.alpha = *f.alpha;
  if (f.temperature) c.temperature = *f.temperature;
  if (f.steps) c.total_steps = *f.steps;
  if (f.batch_size) c.batch_size = *f.batch_size;
  if (f.max_lr) c.max_lr = *f.max_lr;
  if (f.eval_every) c.eval_every = *f.eval_every;
  if (f.subset_size) c.subset_size = *f.subset_size;
  if (f.mode) c.mode = parse_mode(*f.mode);
  if (f.out) c.out_dir = *f.out;
  if (f.blob_classes) c.blobs.classes = *f.blob_classes;
  if (f.blob_dim) c.blobs.raw_dim = *f.blob_dim;
  if (f.blob_per_class) c.blobs.per_class = *f.blob_per_class;
  if (f.entanglement) c.blobs.sigma_within = *f.entanglement * c.blobs.sigma_between;
  if (f.blob_seed) c.blobs.seed = *f.blob_seed;
  return c;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("bad seed '" + item + "' in list '" + text + "'");
    }
  }
  if (seeds.empty()) throw UsageError("empty seed list");
  return seeds;
}

std::ostream* progress(const CommonFlags& f) { return f.quiet ? nullptr : &std::cerr; }

int cmd_train(const CommonFlags& f, std::optional<std::uint64_t> seed) {
  ExperimentConfig cfg = resolve(f);
  if (seed) cfg.seeds = {*seed};
  cfg.validate();
  const auto [train, test] = load_datasets(cfg);
  auto result = train_run(cfg, cfg.seeds.front(), train, test, progress(f));
  write_run_outputs(cfg.out_dir, result.record, result.model, !f.no_timestamps);
  std::cout << "seed " << result.record.seed << " " << to_string(cfg.mode) << ": acc=" << result.record.final_accuracy
            << " sim=" << result.record.final_similarity << " ent=" << result.record.final_entropy << "\n"
            << "outputs in " << cfg.out_dir << "\n";
  return kExitOk;
}

int cmd_compare(const CommonFlags& f, const std::optional<std::string>& seeds) {
  ExperimentConfig cfg = resolve(f);
  if (seeds) cfg.seeds = parse_seed_list(*seeds);
  cfg.validate();
  if (cfg.seeds.size() < 2) throw UsageError("compare needs at least 2 seeds");
  const auto [train, test] = load_datasets(cfg);
  const fs::path root = cfg.out_dir;
  std::vector<RunRecord> baseline, experimental;
  std::string failure;
  for (std::uint64_t s : cfg.seeds) {
    try {
      for (RunMode m : {RunMode::baseline, RunMode::experimental}) {
        ExperimentConfig run_cfg = cfg;
        run_cfg.mode = m;
        run_cfg.seeds = {s};
        run_cfg.out_dir = (root / to_string(m) / ("seed-" + std::to_string(s))).string();
        auto result = train_run(run_cfg, s, train, test, progress(f));
        write_run_outputs(run_cfg.out_dir, result.record, result.model, !f.no_timestamps);
        (m == RunMode::baseline ? baseline : experimental).push_back(std::move(result.record));
      }
    } catch (const NumericError& e) {
      failure = e.what();
      break;
    }
  }
  ComparisonReport report;
  if (failure.empty()) {
    report = compare_records(baseline, experimental, resolved_json(cfg));
  } else {
    // Keep whatever finished, flagged as incomplete.
    experimental.resize(std::min(experimental.size(), baseline.size()));
    baseline.resize(experimental.size());
    if (baseline.size() >= 2) {
      report = compare_records(baseline, experimental, resolved_json(cfg));
    } else {
      report.config = resolved_json(cfg);
      report.baseline = baseline;
      report.experimental = experimental;
    }
    report.complete = false;
    report.failure = failure;
  }
  write_comparison_outputs(root, report, !f.no_timestamps);
  if (!report.metrics.empty()) std::cout << summary_table(report);
  std::cout << "report in " << (root / "report.json").string() << "\n";
  if (!failure.empty()) {
    std::cerr << "error: " << failure << " (partial report written)\n";
    return kExitNumeric;
  }
  return kExitOk;
}

int cmd_sweep(const CommonFlags& f, const std::optional<Real>& lo, const std::optional<Real>& hi,
              const std::optional<std::size_t>& count, bool seed_per_alpha, std::optional<std::uint64_t> seed) {
  ExperimentConfig cfg = resolve(f);
  if (lo) cfg.sweep.alpha_min = *lo;
  if (hi) cfg.sweep.alpha_max = *hi;
  if (count) cfg.sweep.alpha_count = *count;
  if (seed_per_alpha) cfg.sweep.seed_per_alpha = true;
  if (seed) cfg.seeds = {*seed};
  cfg.validate();
  const auto alphas = linspace(cfg.sweep.alpha_min, cfg.sweep.alpha_max, cfg.sweep.alpha_count);
  const auto [train, test] = load_datasets(cfg);
  const fs::path root = cfg.out_dir;
  std::vector<SweepPoint> points;
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    const ExperimentConfig run_cfg = sweep_run_config(cfg, alphas[i]);
    const std::uint64_t s = sweep_seed(cfg, i);
    auto result = train_run(run_cfg, s, train, test, progress(f));
    write_run_outputs(root / ("alpha-" + std::to_string(i)), result.record, result.model, !f.no_timestamps);
    points.push_back({alphas[i], s, result.record.final_similarity, result.record.final_accuracy,
                      result.record.final_entropy});
  }
  const SweepResult sweep = finish_sweep(std::move(points));
  write_sweep_outputs(root, sweep, resolved_json(cfg));
  std::cout << sweep_csv(sweep) << "slope " << format_real(sweep.fit.slope) << " intercept "
            << format_real(sweep.fit.intercept) << "\n";
  return kExitOk;
}

int cmd_stats(const std::vector<std::string>& files, const std::optional<std::string>& out) {
  if (files.size() < 4) throw UsageError("stats needs at least 2 run records per condition");
  std::vector<RunRecord> baseline, experimental;
  for (const auto& path : files) {
    RunRecord r = load_run_record(path);
    (r.mode == RunMode::baseline ? baseline : experimental).push_back(std::move(r));
  }
  nlohmann::json config = experimental.empty() ? nlohmann::json{} : experimental.front().config;
  ComparisonReport report = compare_records(baseline, experimental, config);
  std::cout << summary_table(report);
  if (out) {
    write_comparison_outputs(*out, report, true);
    std::cout << "report in " << (fs::path(*out) / "report.json").string() << "\n";
  }
  return kExitOk;
}

int cmd_export(const CommonFlags& f, const std::string& checkpoint, const std::string& split) {
  ExperimentConfig cfg = resolve(f);
  cfg.validate();
  MoEModel model = [&] {
    try {
      return import_checkpoint(checkpoint);
    } catch (const FormatError&) {
      throw;
    } catch (const std::runtime_error& e) {
      throw UsageError(e.what());
    }
  }();
  auto [train, test] = load_datasets(cfg);
  const Dataset& ds = split == "train" ? train : test;
  const auto& mc = model.config();
  if (mc.extractor.in_channels != ds.channels() || mc.extractor.height != ds.height() ||
      mc.extractor.width != ds.width() || mc.n_classes != ds.num_classes) {
    throw UsageError("checkpoint/model shape mismatch: model expects " + std::to_string(mc.extractor.in_channels) +
                     "x" + std::to_string(mc.extractor.height) + "x" + std::to_string(mc.extractor.width) + " with " +
                     std::to_string(mc.n_classes) + " classes, dataset has " + to_string(ds.images.shape()) + " with " +
                     std::to_string(ds.num_classes) + " classes");
  }
  const InferenceResult inf = run_inference(model, ds.images);
  const fs::path root = cfg.out_dir;
  fs::create_directories(root);
  write_embeddings(inf.embedding, ds.labels, root / "embeddings.txt");
  const PcaResult pca = pca_project(inf.embedding, 2);
  std::vector<svg::Series> series(ds.num_classes);
  for (std::size_t c = 0; c < ds.num_classes; ++c) series[c].label = "class " + std::to_string(c);
  std::ostringstream csv;
  csv << "label,pc1,pc2\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Real x = pca.projection[i * 2], y = pca.projection[i * 2 + 1];
    series[ds.labels[i]].x.push_back(x);
    series[ds.labels[i]].y.push_back(y);
    csv << ds.labels[i] << ',' << format_real(x) << ',' << format_real(y) << '\n';
  }
  std::erase_if(series, [](const svg::Series& s) { return s.x.empty(); });
  svg::write_scatter(root / "pca.svg", series, {"embedding PCA", "PC1", "PC2"});
  write_text(root / "pca.csv", csv.str());
  std::cout << "exported " << ds.size() << " embeddings of dim " << inf.embedding.dim(1) << " to "
            << (root / "embeddings.txt").string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-Experts training with a Soft Nearest Neighbor Loss regularized feature extractor"};
  app.require_subcommand(1);

  CommonFlags train_flags, compare_flags, sweep_flags, export_flags;
  std::optional<std::uint64_t> train_seed, sweep_seed_flag;
  std::optional<std::string> seed_list, stats_out;
  std::optional<Real> alpha_min, alpha_max;
  std::optional<std::size_t> alpha_count;
  bool seed_per_alpha = false;
  std::vector<std::string> stats_files;
  std::string checkpoint, split = "test";

  auto* train = app.add_subcommand("train", "train one seed");
  add_common(train, train_flags);
  train->add_option("--seed", train_seed, "run seed (default: first of config seeds)");

  auto* compare = app.add_subcommand("compare", "paired baseline vs experimental runs over seeds");
  add_common(compare, compare_flags);
  compare->add_option("--seeds", seed_list, "comma-separated seed list");

  auto* sweep = app.add_subcommand("sweep", "train one model per alpha and fit SIM against alpha");
  add_common(sweep, sweep_flags);
  sweep->add_option("--alpha-min", alpha_min, "first alpha");
  sweep->add_option("--alpha-max", alpha_max, "last alpha");
  sweep->add_option("--alpha-count", alpha_count, "number of alpha values (>= 2)");
  sweep->add_flag("--seed-per-alpha", seed_per_alpha, "use seed + index for the i-th alpha");
  sweep->add_option("--seed", sweep_seed_flag, "sweep seed");

  auto* stats = app.add_subcommand("stats", "recompute summary statistics from run.json files");
  stats->add_option("runs", stats_files, "run.json files of both conditions")->required();
  stats->add_option("--out", stats_out, "write report.json and summary.txt here");

  auto* exp = app.add_subcommand("export", "export embeddings and a PCA scatter from a checkpoint");
  add_common(exp, export_flags);
  exp->add_option("--checkpoint", checkpoint, "model.ckpt path")->required();
  exp->add_option("--split", split, "train | test")->check(CLI::IsMember({"train", "test"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) return cmd_train(train_flags, train_seed);
    if (*compare) return cmd_compare(compare_flags, seed_list);
    if (*sweep) return cmd_sweep(sweep_flags, alpha_min, alpha_max, alpha_count, seed_per_alpha, sweep_seed_flag);
    if (*stats) return cmd_stats(stats_files, stats_out);
    if (*exp) return cmd_export(export_flags, checkpoint, split);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitUsage;
}
