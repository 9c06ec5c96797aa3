#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moe_snnl/checkpoint.hpp"
#include "moe_snnl/config.hpp"
#include "moe_snnl/data.hpp"
#include "moe_snnl/metrics.hpp"
#include "moe_snnl/moe.hpp"
#include "moe_snnl/optim.hpp"
#include "moe_snnl/svg.hpp"

namespace moe_snnl {

inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kBatchStream = 2;

struct CurvePoint {
  std::size_t step = 0;  // optimizer steps completed
  Real lr = 0.0;         // rate used by the last of those steps
  Real loss_moe = 0.0;   // train means over the steps since the previous point
  Real loss_snnl_min = 0.0;
  Real test_acc = 0.0;
};

struct RunRecord {
  std::uint64_t seed = 0;
  RunMode mode = RunMode::experimental;
  Real alpha = 0.0;  // effective
  std::vector<CurvePoint> curves;
  Real final_accuracy = 0.0;
  Real final_entropy = 0.0;
  Real final_similarity = 0.0;
  std::vector<Real> class_entropy;
  Tensor similarity_matrix;
  std::vector<std::size_t> expert_load;  // hard-routed test samples per expert
  std::size_t degenerate_snnl_batches = 0;
  std::optional<Real> wall_seconds;
  nlohmann::json config;  // resolved
};

struct TrainResult {
  RunRecord record;
  MoEModel model;
};

struct EvalSnapshot {
  Real accuracy = 0.0;
  RoutingProfile routing;
  SimilarityProfile similarity;
  std::vector<std::size_t> expert_load;
  InferenceResult inference;
};

/// Switches to eval mode, scores the test split with hard routing, restores the mode.
inline EvalSnapshot evaluate(MoEModel& model, const Dataset& test) {
  const Mode previous = model.mode();
  model.set_mode(Mode::eval);
  EvalSnapshot s;
  s.inference = run_inference(model, test.images);
  model.set_mode(previous);
  s.accuracy = accuracy(hard_predictions(s.inference), test.labels);
  s.routing = routing_entropy(s.inference.gate_probs, test.labels, test.num_classes);
  s.similarity = expert_similarity(model);
  s.expert_load.assign(model.n_experts(), 0);
  for (std::size_t e : s.inference.hard_choice) ++s.expert_load[e];
  return s;
}

/// One seed: seeded init, the one-cycle SGD loop, periodic and final evaluation.
inline TrainResult train_run(const ExperimentConfig& cfg, std::uint64_t seed, const Dataset& train,
                             const Dataset& test, std::ostream* log = nullptr) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  RngStream init_rng(seed, kInitStream);
  MoEModel model(model_config(cfg, train), init_rng);
  model.set_mode(Mode::train);
  BatchIterator batches(train, cfg.batch_size, RngStream(seed, kBatchStream));
  const SGDConfig sgd = cfg.sgd();
  const SNNLConfig snnl_cfg = cfg.snnl();
  const auto params = model.parameters();

  RunRecord rec;
  rec.seed = seed;
  rec.mode = cfg.mode;
  rec.alpha = cfg.effective_alpha();
  rec.config = resolved_json(cfg);

  Real sum_moe = 0.0, sum_snnl = 0.0, lr = 0.0;
  std::size_t since = 0;
  const std::string tag = "[" + to_string(cfg.mode) + " seed " + std::to_string(seed) + "]";
  EvalSnapshot snap;
  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    Batch batch = batches.next_batch();
    LossReport report;
    bool degenerate = false;
    try {
      Tape tape;
      ForwardTrace trace = forward_train(model, tape, batch.images);
      Var objective = build_objective(trace, batch.labels, snnl_cfg, report, &degenerate);
      tape.backward(objective);
    } catch (const NumericError& e) {
      throw NumericError(tag + " step " + std::to_string(step) + ": " + e.what());
    }
    lr = one_cycle_lr(step, sgd);
    sgd_step(params, lr, sgd);
    for (const Parameter* p : params)
      if (!p->tensor.all_finite()) {
        throw NumericError(tag + " step " + std::to_string(step) + ": parameter '" + p->name + "' became non-finite");
      }
    rec.degenerate_snnl_batches += degenerate;
    sum_moe += report.moe_loss;
    sum_snnl += report.snnl_min;
    ++since;

    const std::size_t done = step + 1;
    if (done % cfg.eval_every == 0 || done == cfg.total_steps) {
      snap = evaluate(model, test);
      rec.curves.push_back({done, lr, sum_moe / static_cast<Real>(since), sum_snnl / static_cast<Real>(since),
                            snap.accuracy});
      if (log) {
        *log << tag << " step " << done << '/' << cfg.total_steps << " loss_moe=" << rec.curves.back().loss_moe
             << " snnl_min=" << rec.curves.back().loss_snnl_min << " test_acc=" << snap.accuracy << std::endl;
      }
      sum_moe = sum_snnl = 0.0;
      since = 0;
    }
  }
  rec.final_accuracy = snap.accuracy;
  rec.final_entropy = snap.routing.mean_entropy;
  rec.final_similarity = snap.similarity.mean_upper;
  rec.class_entropy = snap.routing.class_entropy;
  rec.similarity_matrix = snap.similarity.matrix;
  rec.expert_load = snap.expert_load;
  rec.wall_seconds = std::chrono::duration<Real>(std::chrono::steady_clock::now() - start).count();
  model.set_mode(Mode::eval);
  return {std::move(rec), std::move(model)};
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json matrix_json(const Tensor& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    std::vector<Real> row(t.values().begin() + static_cast<std::ptrdiff_t>(r * t.dim(1)),
                          t.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * t.dim(1)));
    rows.push_back(row);
  }
  return rows;
}

inline nlohmann::json to_json(const RunRecord& r, bool with_timestamps = true) {
  nlohmann::json j;
  j["seed"] = r.seed;
  j["mode"] = to_string(r.mode);
  j["alpha"] = r.alpha;
  j["final"] = {{"accuracy", r.final_accuracy}, {"entropy", r.final_entropy}, {"similarity", r.final_similarity}};
  nlohmann::json curves = nlohmann::json::array();
  for (const auto& c : r.curves)
    curves.push_back({{"step", c.step}, {"lr", c.lr}, {"loss_moe", c.loss_moe}, {"loss_snnl_min", c.loss_snnl_min},
                      {"test_acc", c.test_acc}});
  j["curves"] = curves;
  j["class_entropy"] = r.class_entropy;
  if (r.similarity_matrix.rank() == 2) j["similarity_matrix"] = matrix_json(r.similarity_matrix);
  j["expert_load"] = r.expert_load;
  j["degenerate_snnl_batches"] = r.degenerate_snnl_batches;
  if (with_timestamps && r.wall_seconds) j["wall_seconds"] = *r.wall_seconds;
  j["config"] = r.config;
  return j;
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
  try {
    RunRecord r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.mode = parse_mode(j.at("mode").get<std::string>());
    r.alpha = j.at("alpha").get<Real>();
    const auto& f = j.at("final");
    r.final_accuracy = f.at("accuracy").get<Real>();
    r.final_entropy = f.at("entropy").get<Real>();
    r.final_similarity = f.at("similarity").get<Real>();
    for (const auto& c : j.at("curves"))
      r.curves.push_back({c.at("step").get<std::size_t>(), c.at("lr").get<Real>(), c.at("loss_moe").get<Real>(),
                          c.at("loss_snnl_min").get<Real>(), c.at("test_acc").get<Real>()});
    if (j.contains("class_entropy")) r.class_entropy = j.at("class_entropy").get<std::vector<Real>>();
    if (j.contains("similarity_matrix")) {
      const auto rows = j.at("similarity_matrix").get<std::vector<std::vector<Real>>>();
      if (!rows.empty()) {
        std::vector<Real> flat;
        for (const auto& row : rows) flat.insert(flat.end(), row.begin(), row.end());
        r.similarity_matrix = Tensor(Shape{rows.size(), rows.front().size()}, std::move(flat));
      }
    }
    if (j.contains("expert_load")) r.expert_load = j.at("expert_load").get<std::vector<std::size_t>>();
    if (j.contains("degenerate_snnl_batches")) r.degenerate_snnl_batches = j.at("degenerate_snnl_batches");
    if (j.contains("wall_seconds")) r.wall_seconds = j.at("wall_seconds").get<Real>();
    if (j.contains("config")) r.config = j.at("config");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("run record: ") + e.what());
  }
}

inline RunRecord load_run_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open run record: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return run_record_from_json(j);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

inline std::string curves_csv(const RunRecord& r) {
  std::ostringstream out;
  out << "step,lr,loss_moe,loss_snnl_min,test_acc\n";
  for (const auto& c : r.curves)
    out << c.step << ',' << format_real(c.lr) << ',' << format_real(c.loss_moe) << ','
        << format_real(c.loss_snnl_min) << ',' << format_real(c.test_acc) << '\n';
  return out.str();
}

/// config.resolved.json, run.json, curves.csv, curves.svg, model.ckpt.
inline void write_run_outputs(const std::filesystem::path& dir, const RunRecord& rec, MoEModel& model,
                              bool with_timestamps) {
  std::filesystem::create_directories(dir);
  write_text(dir / "config.resolved.json", rec.config.dump(2) + "\n");
  write_text(dir / "run.json", to_json(rec, with_timestamps).dump(2) + "\n");
  write_text(dir / "curves.csv", curves_csv(rec));
  svg::Series acc{"test accuracy", {}, {}};
  for (const auto& c : rec.curves) {
    acc.x.push_back(static_cast<double>(c.step));
    acc.y.push_back(c.test_acc);
  }
  svg::write_lines(dir / "curves.svg", {acc}, {"test accuracy", "step", "accuracy"});
  export_checkpoint(model, dir / "model.ckpt");
}

// ---------------------------------------------------------------------------
// Comparison

struct Summary {
  Real mean = 0.0;
  Real sd = 0.0;  // sample standard deviation (n - 1)
  std::size_t n = 0;
};

inline Summary summarize(const std::vector<Real>& v) {
  Summary s;
  s.n = v.size();
  if (v.empty()) return s;
  for (Real x : v) s.mean += x;
  s.mean /= static_cast<Real>(v.size());
  if (v.size() > 1) {
    Real ss = 0.0;
    for (Real x : v) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / static_cast<Real>(v.size() - 1));
  }
  return s;
}

struct MetricComparison {
  std::string name;  // ACC, SIM, ENT
  Real display_scale = 100.0;
  Summary baseline;
  Summary experimental;
  std::vector<Real> baseline_values;
  std::vector<Real> experimental_values;
  std::optional<WilcoxonResult> wilcoxon;  // experimental vs baseline
  std::string wilcoxon_error;
};

struct ComparisonReport {
  nlohmann::json config;
  std::vector<RunRecord> baseline;
  std::vector<RunRecord> experimental;
  std::vector<MetricComparison> metrics;
  bool complete = true;
  std::string failure;
};

/// Pairs records by seed; errors list the seeds missing from either side.
inline std::vector<std::pair<RunRecord, RunRecord>> pair_by_seed(const std::vector<RunRecord>& baseline,
                                                                 const std::vector<RunRecord>& experimental) {
  std::map<std::uint64_t, const RunRecord*> b, e;
  for (const auto& r : baseline)
    if (!b.emplace(r.seed, &r).second) throw UsageError("duplicate baseline seed " + std::to_string(r.seed));
  for (const auto& r : experimental)
    if (!e.emplace(r.seed, &r).second) throw UsageError("duplicate experimental seed " + std::to_string(r.seed));
  std::string missing;
  for (const auto& [seed, r] : b)
    if (!e.count(seed)) missing += " experimental:" + std::to_string(seed);
  for (const auto& [seed, r] : e)
    if (!b.count(seed)) missing += " baseline:" + std::to_string(seed);
  if (!missing.empty()) throw UsageError("unpaired seeds, missing" + missing);
  std::vector<std::pair<RunRecord, RunRecord>> out;
  for (const auto& [seed, r] : b) out.emplace_back(*r, *e.at(seed));
  return out;
}

inline ComparisonReport compare_records(const std::vector<RunRecord>& baseline,
                                        const std::vector<RunRecord>& experimental, nlohmann::json config = {}) {
  const auto pairs = pair_by_seed(baseline, experimental);
  if (pairs.size() < 2) throw UsageError("comparison needs at least 2 paired seeds");
  ComparisonReport rep;
  rep.config = std::move(config);
  for (const auto& [b, e] : pairs) {
    rep.baseline.push_back(b);
    rep.experimental.push_back(e);
  }
  auto add = [&](const std::string& name, Real RunRecord::*field) {
    MetricComparison m;
    m.name = name;
    for (const auto& [b, e] : pairs) {
      m.baseline_values.push_back(b.*field);
      m.experimental_values.push_back(e.*field);
    }
    m.baseline = summarize(m.baseline_values);
    m.experimental = summarize(m.experimental_values);
    try {
      m.wilcoxon = wilcoxon_signed_rank(m.experimental_values, m.baseline_values);
    } catch (const WilcoxonError& err) {
      m.wilcoxon_error = err.what();
    }
    rep.metrics.push_back(std::move(m));
  };
  add("ACC", &RunRecord::final_accuracy);
  add("SIM", &RunRecord::final_similarity);
  add("ENT", &RunRecord::final_entropy);
  return rep;
}

inline const MetricComparison& metric(const ComparisonReport& r, const std::string& name) {
  for (const auto& m : r.metrics)
    if (m.name == name) return m;
  throw std::out_of_range("no metric " + name);
}

inline nlohmann::json to_json(const ComparisonReport& r, bool with_timestamps = true) {
  nlohmann::json j;
  j["complete"] = r.complete;
  if (!r.failure.empty()) j["failure"] = r.failure;
  j["config"] = r.config;
  j["wilcoxon_settings"] = {{"test", "exact signed-rank"},
                            {"direction", "experimental minus baseline"},
                            {"two_sided", "min(1, 2 * min(p_greater, p_less))"},
                            {"zero_differences", "dropped"},
                            {"ties", "average ranks"}};
  nlohmann::json metrics = nlohmann::json::array();
  for (const auto& m : r.metrics) {
    nlohmann::json mj{{"name", m.name},
                      {"display_scale", m.display_scale},
                      {"baseline", {{"mean", m.baseline.mean}, {"sd", m.baseline.sd}, {"n", m.baseline.n}}},
                      {"experimental", {{"mean", m.experimental.mean}, {"sd", m.experimental.sd}, {"n", m.experimental.n}}},
                      {"baseline_values", m.baseline_values},
                      {"experimental_values", m.experimental_values}};
    if (m.wilcoxon) {
      mj["wilcoxon"] = {{"W", m.wilcoxon->statistic},
                        {"n_effective", m.wilcoxon->n_effective},
                        {"p_value", m.wilcoxon->p_value},
                        {"p_greater", m.wilcoxon->p_greater},
                        {"p_less", m.wilcoxon->p_less},
                        {"significant_at_0_05", m.wilcoxon->significant_at_0_05}};
    } else {
      mj["wilcoxon"] = {{"error", m.wilcoxon_error}};
    }
    metrics.push_back(mj);
  }
  j["metrics"] = metrics;
  nlohmann::json runs = nlohmann::json::object();
  runs["baseline"] = nlohmann::json::array();
  runs["experimental"] = nlohmann::json::array();
  for (const auto& b : r.baseline) runs["baseline"].push_back(to_json(b, with_timestamps));
  for (const auto& e : r.experimental) runs["experimental"].push_back(to_json(e, with_timestamps));
  j["runs"] = runs;
  return j;
}

/// Table with MEAN (SD); ACC in percent, SIM and ENT scaled by 100.
/// '*' marks two-sided p < 0.05, '+' marks one-sided p < 0.05 only.
inline std::string summary_table(const ComparisonReport& r) {
  std::ostringstream out;
  out << std::fixed;
  out << std::left << std::setw(6) << "" << std::setw(18) << "Baseline" << std::setw(20) << "Experimental"
      << std::setw(8) << "W" << std::setw(12) << "p(2-sided)" << std::setw(12) << "p(greater)" << "p(less)\n";
  for (const auto& m : r.metrics) {
    auto cell = [&](const Summary& s) {
      std::ostringstream c;
      c << std::fixed << std::setprecision(2) << s.mean * m.display_scale << " (" << s.sd * m.display_scale << ")";
      return c.str();
    };
    std::string marker;
    if (m.wilcoxon) {
      if (m.wilcoxon->p_value < 0.05)
        marker = "*";
      else if (std::min(m.wilcoxon->p_greater, m.wilcoxon->p_less) < 0.05)
        marker = "+";
    }
    out << std::setw(6) << m.name << std::setw(18) << cell(m.baseline) << std::setw(20) << cell(m.experimental) + marker;
    if (m.wilcoxon) {
      out << std::setprecision(1) << std::setw(8) << m.wilcoxon->statistic << std::setprecision(5) << std::setw(12)
          << m.wilcoxon->p_value << std::setw(12) << m.wilcoxon->p_greater << m.wilcoxon->p_less;
    } else {
      out << "wilcoxon: " << m.wilcoxon_error;
    }
    out << '\n';
  }
  out << "ACC in %, SIM and ENT x100. * two-sided p < 0.05, + one-sided p < 0.05.\n";
  return out.str();
}

inline void write_comparison_outputs(const std::filesystem::path& dir, const ComparisonReport& r, bool with_timestamps) {
  std::filesystem::create_directories(dir);
  write_text(dir / "report.json", to_json(r, with_timestamps).dump(2) + "\n");
  write_text(dir / "summary.txt", summary_table(r));
  if (!r.metrics.empty()) {
    const auto& sim = metric(r, "SIM");
    svg::write_box(dir / "sim_box.svg",
                   {{"baseline", {}, sim.baseline_values}, {"experimental", {}, sim.experimental_values}},
                   {"expert weight similarity by condition", "condition", "SIM"});
  }
}

// ---------------------------------------------------------------------------
// Alpha sweep

inline std::vector<Real> linspace(Real lo, Real hi, std::size_t count) {
  if (count < 2) throw UsageError("alpha-count must be >= 2");
  std::vector<Real> v(count);
  for (std::size_t i = 0; i < count; ++i)
    v[i] = lo + (hi - lo) * static_cast<Real>(i) / static_cast<Real>(count - 1);
  v.back() = hi;
  return v;
}

struct LinearFit {
  Real slope = 0.0;
  Real intercept = 0.0;
};

/// Ordinary least squares y = slope * x + intercept.
inline LinearFit least_squares(const std::vector<Real>& x, const std::vector<Real>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("least_squares: need >= 2 paired points");
  const Real mx = summarize(x).mean, my = summarize(y).mean;
  Real sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (!(sxx > 0.0)) throw std::invalid_argument("least_squares: x values are all equal");
  return {sxy / sxx, my - sxy / sxx * mx};
}

struct SweepPoint {
  Real alpha = 0.0;
  std::uint64_t seed = 0;
  Real similarity = 0.0;
  Real accuracy = 0.0;
  Real entropy = 0.0;
};

struct SweepResult {
  std::vector<SweepPoint> points;
  LinearFit fit;
};

inline std::uint64_t sweep_seed(const ExperimentConfig& cfg, std::size_t index) {
  return cfg.sweep.seed_per_alpha ? cfg.seeds.front() + index : cfg.seeds.front();
}

/// Sweep runs use experimental mode so that alpha is applied as given.
inline ExperimentConfig sweep_run_config(ExperimentConfig cfg, Real alpha) {
  cfg.mode = RunMode::experimental;
  cfg.alpha = alpha;
  return cfg;
}

inline SweepResult finish_sweep(std::vector<SweepPoint> points) {
  SweepResult r;
  r.points = std::move(points);
  std::vector<Real> a, s;
  for (const auto& p : r.points) {
    a.push_back(p.alpha);
    s.push_back(p.similarity);
  }
  r.fit = least_squares(a, s);
  return r;
}

inline std::string sweep_csv(const SweepResult& r) {
  std::ostringstream out;
  out << "alpha,seed,sim,acc,ent\n";
  for (const auto& p : r.points)
    out << format_real(p.alpha) << ',' << p.seed << ',' << format_real(p.similarity) << ','
        << format_real(p.accuracy) << ',' << format_real(p.entropy) << '\n';
  return out.str();
}

inline void write_sweep_outputs(const std::filesystem::path& dir, const SweepResult& r, const nlohmann::json& config) {
  std::filesystem::create_directories(dir);
  write_text(dir / "sweep.csv", sweep_csv(r));
  nlohmann::json j;
  j["config"] = config;
  j["fit"] = {{"slope", r.fit.slope}, {"intercept", r.fit.intercept}, {"model", "SIM = slope * alpha + intercept"}};
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : r.points)
    pts.push_back({{"alpha", p.alpha}, {"seed", p.seed}, {"sim", p.similarity}, {"acc", p.accuracy}, {"ent", p.entropy}});
  j["points"] = pts;
  write_text(dir / "sweep.json", j.dump(2) + "\n");
  svg::Series s{"SIM", {}, {}};
  for (const auto& p : r.points) {
    s.x.push_back(p.alpha);
    s.y.push_back(p.similarity);
  }
  svg::write_scatter(dir / "sweep.svg", {s}, {"expert similarity vs alpha", "alpha", "SIM"},
                     svg::Line{r.fit.slope, r.fit.intercept, "least squares"});
}

}  // namespace moe_snnl
