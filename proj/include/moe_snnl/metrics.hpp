#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include "moe_snnl/moe.hpp"
#include "moe_snnl/tensor.hpp"

namespace moe_snnl {

inline Real accuracy(const Labels& preds, const Labels& labels) {
  if (preds.size() != labels.size()) {
    throw DimensionError("accuracy: " + std::to_string(preds.size()) + " predictions for " +
                         std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw DimensionError("accuracy: empty input");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += preds[i] == labels[i];
  return static_cast<Real>(correct) / static_cast<Real>(labels.size());
}

// ---------------------------------------------------------------------------
// Expert specialization entropy

struct RoutingProfile {
  Tensor class_gate_mean;  // [K x n]; rows of absent classes are zero
  std::vector<Real> class_entropy;
  std::vector<bool> class_present;
  Real mean_entropy = 0.0;  // ENT, averaged uniformly over present classes
  std::vector<std::size_t> missing_classes;
};

/// Shannon entropy (nats) with 0 ln 0 = 0.
inline Real shannon_entropy(const Real* p, std::size_t n) {
  Real h = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
  return h;
}

inline RoutingProfile routing_entropy(const Tensor& gate_probs, const Labels& labels, std::size_t num_classes) {
  if (gate_probs.rank() != 2 || gate_probs.dim(0) != labels.size()) {
    throw DimensionError("routing_entropy: gate rows do not match labels");
  }
  const std::size_t total = labels.size(), n = gate_probs.dim(1);
  RoutingProfile r{Tensor(Shape{num_classes, n}), std::vector<Real>(num_classes, 0.0),
                   std::vector<bool>(num_classes, false), 0.0, {}};
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t s = 0; s < total; ++s) {
    const int c = labels[s];
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes) throw std::out_of_range("routing_entropy: bad label");
    ++counts[c];
    for (std::size_t i = 0; i < n; ++i) r.class_gate_mean[c * n + i] += gate_probs[s * n + i];
  }
  std::size_t present = 0;
  Real sum = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] == 0) {
      r.missing_classes.push_back(c);
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) r.class_gate_mean[c * n + i] /= static_cast<Real>(counts[c]);
    r.class_entropy[c] = shannon_entropy(&r.class_gate_mean.values()[c * n], n);
    r.class_present[c] = true;
    sum += r.class_entropy[c];
    ++present;
  }
  if (present == 0) throw std::invalid_argument("routing_entropy: no samples");
  r.mean_entropy = sum / static_cast<Real>(present);
  return r;
}

// ---------------------------------------------------------------------------
// Pairwise expert weight similarity

struct SimilarityProfile {
  Tensor matrix;  // [n x n]
  Real mean_upper = 0.0;
};

inline Real cosine_similarity(const std::vector<Real>& a, const std::vector<Real>& b) {
  if (a.size() != b.size()) throw DimensionError("cosine_similarity: length mismatch");
  Real dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (!(na > 0.0) || !(nb > 0.0)) throw std::domain_error("cosine_similarity: zero-norm vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Signed mean over the strict upper triangle of pairwise cosines.
inline SimilarityProfile weight_similarity(const std::vector<std::vector<Real>>& flattened) {
  const std::size_t n = flattened.size();
  if (n < 2) throw std::invalid_argument("expert_similarity: need at least two experts");
  SimilarityProfile s{Tensor(Shape{n, n}), 0.0};
  Real sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    s.matrix.at(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const Real c = std::clamp(cosine_similarity(flattened[i], flattened[j]), -1.0, 1.0);
      s.matrix.at(i, j) = s.matrix.at(j, i) = c;
      sum += c;
    }
  }
  s.mean_upper = sum / static_cast<Real>(n * (n - 1) / 2);
  return s;
}

/// Cosine similarity of the experts' flattened hidden-layer weights (biases excluded).
inline SimilarityProfile expert_similarity(const MoEModel& model) {
  std::vector<std::vector<Real>> w;
  for (const auto& e : model.experts) w.push_back(e.hidden.weight.tensor.values());
  return weight_similarity(w);
}

// ---------------------------------------------------------------------------
// Exact Wilcoxon signed-rank test

struct WilcoxonResult {
  Real statistic = 0.0;  // W+, sum of ranks of positive differences
  std::size_t n_effective = 0;
  Real p_value = 1.0;    // exact, two-sided
  Real p_greater = 1.0;  // one-sided, H1: a > b
  Real p_less = 1.0;     // one-sided, H1: a < b
  bool significant_at_0_05 = false;
};

struct WilcoxonError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline constexpr std::size_t kWilcoxonMaxExact = 20;

/// Average ranks (1-based) of the values, ties sharing the mean rank.
inline std::vector<Real> average_ranks(const std::vector<Real>& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<Real> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const Real r = (static_cast<Real>(i + 1) + static_cast<Real>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Zero differences are dropped, tied magnitudes get average ranks, and the
/// null distribution of W+ is tabulated exactly over all 2^n sign patterns
/// (counted by dynamic programming over doubled ranks, which are integers).
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<Real>& a, const std::vector<Real>& b) {
  if (a.size() != b.size()) throw WilcoxonError("wilcoxon: samples must be paired (equal length)");
  if (a.size() < 2) throw WilcoxonError("wilcoxon: need at least 2 pairs");
  std::vector<Real> diff, mag;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Real d = a[i] - b[i];
    if (d != 0.0) {
      diff.push_back(d);
      mag.push_back(std::abs(d));
    }
  }
  WilcoxonResult r;
  r.n_effective = diff.size();
  if (r.n_effective == 0) throw WilcoxonError("wilcoxon: all differences are zero, statistic undefined");
  if (r.n_effective > kWilcoxonMaxExact) {
    throw WilcoxonError("wilcoxon: n_eff = " + std::to_string(r.n_effective) + " exceeds exact limit of " +
                        std::to_string(kWilcoxonMaxExact));
  }
  const auto ranks = average_ranks(mag);
  std::vector<std::size_t> doubled(ranks.size());
  std::size_t total2 = 0, observed2 = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    doubled[i] = static_cast<std::size_t>(std::llround(2.0 * ranks[i]));
    total2 += doubled[i];
    if (diff[i] > 0.0) observed2 += doubled[i];
  }
  // counts[s] = number of sign patterns with 2*W+ == s.
  std::vector<std::uint64_t> counts(total2 + 1, 0);
  counts[0] = 1;
  for (std::size_t r2 : doubled)
    for (std::size_t s = total2; s >= r2; --s) {
      counts[s] += counts[s - r2];
      if (s == r2) break;
    }
  std::uint64_t le = 0, ge = 0;
  for (std::size_t s = 0; s <= total2; ++s) {
    if (s <= observed2) le += counts[s];
    if (s >= observed2) ge += counts[s];
  }
  const Real patterns = std::ldexp(1.0, static_cast<int>(r.n_effective));
  r.statistic = static_cast<Real>(observed2) / 2.0;
  r.p_greater = static_cast<Real>(ge) / patterns;
  r.p_less = static_cast<Real>(le) / patterns;
  r.p_value = std::min(1.0, 2.0 * std::min(r.p_greater, r.p_less));
  r.significant_at_0_05 = r.p_value < 0.05;
  return r;
}

// ---------------------------------------------------------------------------
// PCA by power iteration with deflation

struct PcaResult {
  Tensor projection;  // [N x out_dim]
  std::vector<std::vector<Real>> components;
  std::vector<Real> eigenvalues;  // of the sample covariance (divisor N - 1)
};

inline PcaResult pca_project(const Tensor& data, std::size_t out_dim = 2, Real tolerance = 1e-9,
                             std::size_t max_iterations = 1000) {
  if (data.rank() != 2) throw DimensionError("pca_project: expected [N x d]");
  const std::size_t n = data.dim(0), d = data.dim(1);
  if (n <= 2 || d < 2) throw DimensionError("pca_project: need N > 2 and d >= 2");
  if (out_dim > d) throw DimensionError("pca_project: out_dim exceeds data dimension");

  std::vector<Real> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) mean[k] += data[i * d + k];
  for (auto& m : mean) m /= static_cast<Real>(n);
  std::vector<Real> centred(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) centred[i * d + k] = data[i * d + k] - mean[k];

  std::vector<Real> cov(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const Real va = centred[i * d + a];
      for (std::size_t b = a; b < d; ++b) cov[a * d + b] += va * centred[i * d + b];
    }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) cov[b * d + a] = cov[a * d + b] /= static_cast<Real>(n - 1);

  Real scale = 0.0;
  for (Real v : cov) scale += v * v;
  scale = std::sqrt(scale);

  auto matvec = [&](const std::vector<Real>& v) {
    std::vector<Real> out(d, 0.0);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) out[a] += cov[a * d + b] * v[b];
    return out;
  };
  auto normalize = [](std::vector<Real>& v) {
    Real s = 0.0;
    for (Real x : v) s += x * x;
    s = std::sqrt(s);
    if (s > 0.0)
      for (Real& x : v) x /= s;
    return s;
  };

  PcaResult result;
  for (std::size_t comp = 0; comp < out_dim; ++comp) {
    // Start from the basis vector with the largest remaining diagonal entry.
    std::size_t start = 0;
    for (std::size_t a = 1; a < d; ++a)
      if (cov[a * d + a] > cov[start * d + start]) start = a;
    std::vector<Real> v(d, 0.0);
    for (std::size_t a = 0; a < d; ++a) v[a] = 1e-3 * static_cast<Real>(a + 1) / static_cast<Real>(d);
    v[start] = 1.0;
    for (const auto& prev : result.components) {
      Real dot = 0.0;
      for (std::size_t a = 0; a < d; ++a) dot += v[a] * prev[a];
      for (std::size_t a = 0; a < d; ++a) v[a] -= dot * prev[a];
    }
    normalize(v);

    Real lambda = 0.0, residual = 0.0;
    bool converged = false;
    for (std::size_t it = 0; it < max_iterations; ++it) {
      std::vector<Real> w = matvec(v);
      lambda = 0.0;
      for (std::size_t a = 0; a < d; ++a) lambda += v[a] * w[a];
      residual = 0.0;
      for (std::size_t a = 0; a < d; ++a) residual += (w[a] - lambda * v[a]) * (w[a] - lambda * v[a]);
      residual = std::sqrt(residual);
      if (residual <= tolerance * std::max(scale, 1e-300)) {
        converged = true;
        break;
      }
      if (normalize(w) == 0.0) {  // v lies in the null space: eigenvalue 0
        lambda = 0.0;
        converged = true;
        break;
      }
      v = std::move(w);
    }
    if (!converged) {
      throw NumericError("pca_project: power iteration did not converge, residual " + std::to_string(residual));
    }
    std::size_t big = 0;
    for (std::size_t a = 1; a < d; ++a)
      if (std::abs(v[a]) > std::abs(v[big])) big = a;
    if (v[big] < 0.0)
      for (Real& x : v) x = -x;
    // Deflate.
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov[a * d + b] -= lambda * v[a] * v[b];
    result.components.push_back(v);
    result.eigenvalues.push_back(lambda);
  }

  result.projection = Tensor(Shape{n, out_dim});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < out_dim; ++c) {
      Real dot = 0.0;
      for (std::size_t a = 0; a < d; ++a) dot += centred[i * d + a] * result.components[c][a];
      result.projection[i * out_dim + c] = dot;
    }
  return result;
}

// ---------------------------------------------------------------------------
// Embedding export: "dim=<d> n=<N>" then "label,v1,...,vd" per row.

inline std::string format_real(Real v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline void write_embeddings(const Tensor& embedding, const Labels& labels, const std::filesystem::path& path) {
  if (embedding.rank() != 2 || embedding.dim(0) != labels.size()) {
    throw DimensionError("export_embeddings: embedding rows do not match labels");
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open embedding file for writing: " + path.string());
  const std::size_t n = embedding.dim(0), d = embedding.dim(1);
  out << "dim=" << d << " n=" << n << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    out << labels[i];
    for (std::size_t k = 0; k < d; ++k) out << ',' << format_real(embedding[i * d + k]);
    out << '\n';
  }
  if (!out) throw std::runtime_error("failed writing embedding file: " + path.string());
}

struct EmbeddingFile {
  Tensor embedding;
  Labels labels;
};

inline EmbeddingFile read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open embedding file: " + path.string());
  std::string header;
  std::getline(in, header);
  std::size_t d = 0, n = 0;
  if (std::sscanf(header.c_str(), "dim=%zu n=%zu", &d, &n) != 2 || d == 0 || n == 0) {
    throw FormatError("embedding file: bad header '" + header + "'");
  }
  EmbeddingFile f{Tensor(Shape{n, d}), Labels(n)};
  std::string line;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(in, line)) throw FormatError("embedding file: expected " + std::to_string(n) + " rows");
    const char* p = line.data();
    const char* end = line.data() + line.size();
    auto lr = std::from_chars(p, end, f.labels[i]);
    if (lr.ec != std::errc()) throw FormatError("embedding file: bad label on row " + std::to_string(i));
    p = lr.ptr;
    for (std::size_t k = 0; k < d; ++k) {
      if (p == end || *p != ',') throw FormatError("embedding file: short row " + std::to_string(i));
      auto vr = std::from_chars(p + 1, end, f.embedding[i * d + k]);
      if (vr.ec != std::errc()) throw FormatError("embedding file: bad value on row " + std::to_string(i));
      p = vr.ptr;
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Geometry diagnostics

/// Trace of the sample covariance (divisor N) of the selected rows.
inline Real covariance_trace(const Tensor& x, const std::vector<std::size_t>& rows) {
  const std::size_t d = x.dim(1);
  if (rows.empty()) return 0.0;
  std::vector<Real> mean(d, 0.0);
  for (std::size_t r : rows)
    for (std::size_t k = 0; k < d; ++k) mean[k] += x[r * d + k];
  for (auto& m : mean) m /= static_cast<Real>(rows.size());
  Real tr = 0.0;
  for (std::size_t r : rows)
    for (std::size_t k = 0; k < d; ++k) tr += (x[r * d + k] - mean[k]) * (x[r * d + k] - mean[k]);
  return tr / static_cast<Real>(rows.size());
}

inline Real covariance_trace(const Tensor& x) {
  std::vector<std::size_t> all(x.dim(0));
  std::iota(all.begin(), all.end(), std::size_t{0});
  return covariance_trace(x, all);
}

/// Mean distance between class centroids divided by the mean within-class
/// RMS spread. Larger is better separated.
inline Real class_separation_ratio(const Tensor& x, const Labels& labels, std::size_t num_classes) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<Real> centroid(num_classes * d, 0.0);
  std::vector<std::size_t> count(num_classes, 0);
  for (std::size_t i = 0; i < n; ++i) {
    ++count[labels[i]];
    for (std::size_t k = 0; k < d; ++k) centroid[labels[i] * d + k] += x[i * d + k];
  }
  for (std::size_t c = 0; c < num_classes; ++c)
    for (std::size_t k = 0; k < d && count[c]; ++k) centroid[c * d + k] /= static_cast<Real>(count[c]);
  Real within = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      const Real diff = x[i * d + k] - centroid[labels[i] * d + k];
      within += diff * diff;
    }
  within = std::sqrt(within / static_cast<Real>(n));
  Real between = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < num_classes; ++a)
    for (std::size_t b = a + 1; b < num_classes; ++b) {
      if (!count[a] || !count[b]) continue;
      Real s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += (centroid[a * d + k] - centroid[b * d + k]) * (centroid[a * d + k] - centroid[b * d + k]);
      between += std::sqrt(s);
      ++pairs;
    }
  if (pairs == 0 || !(within > 0.0)) return 0.0;
  return between / static_cast<Real>(pairs) / within;
}

}  // namespace moe_snnl
