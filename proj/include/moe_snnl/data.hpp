#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "moe_snnl/moe.hpp"
#include "moe_snnl/rng.hpp"
#include "moe_snnl/tensor.hpp"

namespace moe_snnl {

enum class Split { train, test };

/// Per-channel standardization statistics, always taken from a train split.
struct ChannelStats {
  std::vector<Real> mean;
  std::vector<Real> stddev;
};

struct Dataset {
  std::string name;
  Split split = Split::train;
  Tensor images;  // [N x c x h x w], standardized
  Labels labels;
  std::size_t num_classes = 0;
  ChannelStats stats;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  void validate() const {
    if (images.rank() != 4 || images.dim(0) != labels.size()) {
      throw FormatError(name + ": image count does not match label count");
    }
    if (height() % 4 != 0 || width() % 4 != 0) {
      throw FormatError(name + ": image dims " + to_string(images.shape()) + " are not multiples of 4");
    }
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
        throw FormatError(name + ": label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
      }
  }
};

inline ChannelStats compute_channel_stats(const Tensor& images) {
  const std::size_t n = images.dim(0), c = images.dim(1), hw = images.dim(2) * images.dim(3);
  ChannelStats s{std::vector<Real>(c, 0.0), std::vector<Real>(c, 0.0)};
  const Real count = static_cast<Real>(n * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    Real sum = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < hw; ++p) sum += images[(i * c + ch) * hw + p];
    const Real mu = sum / count;
    Real sq = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < hw; ++p) {
        const Real d = images[(i * c + ch) * hw + p] - mu;
        sq += d * d;
      }
    s.mean[ch] = mu;
    s.stddev[ch] = std::sqrt(sq / count);
    if (!(s.stddev[ch] > 0.0)) s.stddev[ch] = 1.0;  // constant channel: centre only
  }
  return s;
}

inline void standardize(Tensor& images, const ChannelStats& stats) {
  const std::size_t n = images.dim(0), c = images.dim(1), hw = images.dim(2) * images.dim(3);
  if (stats.mean.size() != c) throw DimensionError("standardize: channel count mismatch");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) {
        Real& v = images[(i * c + ch) * hw + p];
        v = (v - stats.mean[ch]) / stats.stddev[ch];
      }
}

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open data file: " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline std::uint32_t read_be32(const std::string& bytes, std::size_t offset, const std::string& what) {
  if (bytes.size() < offset + 4) throw FormatError(what + ": truncated header");
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
  return v;
}

inline std::string hex32(std::uint32_t v) {
  std::ostringstream out;
  out << "0x" << std::hex;
  out.width(8);
  out.fill('0');
  out << v;
  return out.str();
}

inline void finish(Dataset& ds, const std::optional<ChannelStats>& stats) {
  ds.stats = stats ? *stats : compute_channel_stats(ds.images);
  standardize(ds.images, ds.stats);
  ds.validate();
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Parses an IDX image/label pair from memory. Pixels are scaled to [0, 1]
/// before standardization.
inline Dataset parse_idx(const std::string& image_bytes, const std::string& label_bytes, const std::string& name,
                         Split split, const std::optional<ChannelStats>& stats = std::nullopt) {
  const auto img_magic = detail::read_be32(image_bytes, 0, "idx images");
  if (img_magic != kIdxImageMagic) throw FormatError("idx images: bad magic " + detail::hex32(img_magic));
  const auto lbl_magic = detail::read_be32(label_bytes, 0, "idx labels");
  if (lbl_magic != kIdxLabelMagic) throw FormatError("idx labels: bad magic " + detail::hex32(lbl_magic));
  const std::size_t n = detail::read_be32(image_bytes, 4, "idx images");
  const std::size_t rows = detail::read_be32(image_bytes, 8, "idx images");
  const std::size_t cols = detail::read_be32(image_bytes, 12, "idx images");
  const std::size_t n_labels = detail::read_be32(label_bytes, 4, "idx labels");
  if (n != n_labels) {
    throw FormatError("idx: " + std::to_string(n) + " images but " + std::to_string(n_labels) + " labels");
  }
  if (n == 0 || rows == 0 || cols == 0) throw FormatError("idx: empty dataset");
  if (image_bytes.size() != 16 + n * rows * cols) throw FormatError("idx images: truncated or oversized payload");
  if (label_bytes.size() != 8 + n) throw FormatError("idx labels: truncated or oversized payload");

  Dataset ds;
  ds.name = name;
  ds.split = split;
  ds.images = Tensor(Shape{n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i)
    ds.images[i] = static_cast<unsigned char>(image_bytes[16 + i]) / 255.0;
  ds.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = static_cast<unsigned char>(label_bytes[8 + i]);
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = std::max<std::size_t>(10, static_cast<std::size_t>(max_label) + 1);
  detail::finish(ds, stats);
  return ds;
}

inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        const std::optional<ChannelStats>& stats = std::nullopt, Split split = Split::train) {
  return parse_idx(detail::read_file(images_path), detail::read_file(labels_path), images_path.filename().string(),
                   split, stats);
}

enum class CifarVariant { cifar10, cifar100 };

inline std::size_t cifar_record_size(CifarVariant v) { return v == CifarVariant::cifar10 ? 3073 : 3074; }

/// Raw CIFAR records: [label][3x1024 planes] for CIFAR-10,
/// [coarse][fine][3x1024 planes] for CIFAR-100 (fine label kept).
inline void append_cifar_records(const std::string& bytes, CifarVariant variant, std::vector<Real>& pixels,
                                 Labels& labels, const std::string& what) {
  const std::size_t rec = cifar_record_size(variant);
  if (bytes.empty() || bytes.size() % rec != 0) {
    throw FormatError(what + ": size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                      std::to_string(rec) + "-byte record size");
  }
  const std::size_t label_offset = variant == CifarVariant::cifar10 ? 0 : 1;
  const std::size_t pixel_offset = variant == CifarVariant::cifar10 ? 1 : 2;
  for (std::size_t r = 0; r < bytes.size() / rec; ++r) {
    const std::size_t base = r * rec;
    labels.push_back(static_cast<unsigned char>(bytes[base + label_offset]));
    for (std::size_t p = 0; p < 3 * 1024; ++p)
      pixels.push_back(static_cast<unsigned char>(bytes[base + pixel_offset + p]) / 255.0);
  }
}

inline Dataset parse_cifar(const std::vector<std::string>& files, CifarVariant variant, const std::string& name,
                           Split split, const std::optional<ChannelStats>& stats = std::nullopt) {
  std::vector<Real> pixels;
  Labels labels;
  for (std::size_t i = 0; i < files.size(); ++i)
    append_cifar_records(files[i], variant, pixels, labels, name + " file " + std::to_string(i));
  Dataset ds;
  ds.name = name;
  ds.split = split;
  ds.num_classes = variant == CifarVariant::cifar10 ? 10 : 100;
  ds.images = Tensor(Shape{labels.size(), 3, 32, 32}, std::move(pixels));
  ds.labels = std::move(labels);
  detail::finish(ds, stats);
  return ds;
}

/// Reads the standard binary distribution from dir:
/// cifar10 data_batch_{1..5}.bin / test_batch.bin, cifar100 train.bin / test.bin.
inline Dataset load_cifar(const std::filesystem::path& dir, CifarVariant variant, Split split,
                          const std::optional<ChannelStats>& stats = std::nullopt) {
  std::vector<std::filesystem::path> paths;
  if (variant == CifarVariant::cifar10) {
    if (split == Split::train)
      for (int i = 1; i <= 5; ++i) paths.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    else
      paths.push_back(dir / "test_batch.bin");
  } else {
    paths.push_back(dir / (split == Split::train ? "train.bin" : "test.bin"));
  }
  std::vector<std::string> files;
  for (const auto& p : paths) files.push_back(detail::read_file(p));
  return parse_cifar(files, variant, variant == CifarVariant::cifar10 ? "cifar10" : "cifar100", split, stats);
}

/// First n samples (used for reduced-size sweeps).
inline Dataset subset(const Dataset& ds, std::size_t n) {
  if (n == 0 || n >= ds.size()) return ds;
  Dataset out = ds;
  const std::size_t per = ds.images.size() / ds.size();
  Shape shape = ds.images.shape();
  shape[0] = n;
  out.images = Tensor(shape, std::vector<Real>(ds.images.values().begin(),
                                               ds.images.values().begin() + static_cast<std::ptrdiff_t>(n * per)));
  out.labels.resize(n);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic entangled blobs

struct BlobsSpec {
  std::size_t classes = 6;
  std::size_t raw_dim = 16;
  std::size_t per_class = 500;
  Real sigma_between = 1.0;
  Real sigma_within = 1.0;
  std::uint64_t seed = 0;

  Real entanglement() const { return sigma_within / sigma_between; }
  std::size_t side() const {
    auto s = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<Real>(raw_dim))));
    return (s + 3) / 4 * 4;
  }

  void validate() const {
    if (classes < 2) throw std::invalid_argument("blobs: need at least 2 classes");
    if (raw_dim == 0 || per_class < 5) throw std::invalid_argument("blobs: raw_dim > 0 and per_class >= 5 required");
    if (!(sigma_between > 0.0) || !(sigma_within > 0.0)) throw std::invalid_argument("blobs: sigma values must be positive");
  }
};

/// Gaussian class centres (scale sigma_between) with isotropic noise
/// (scale sigma_within), laid out as 1 x side x side images, zero-padded.
/// Centres and unit noise draws come from separate streams, so changing only
/// sigma_within rescales the same noise around the same centres. Every fifth
/// sample of each class goes to the test split.
inline std::pair<Dataset, Dataset> make_blobs(const BlobsSpec& spec) {
  spec.validate();
  RngStream centre_rng(spec.seed, 101);
  RngStream noise_rng(spec.seed, 202);
  std::vector<Real> centres(spec.classes * spec.raw_dim);
  for (auto& v : centres) v = centre_rng.normal(0.0, spec.sigma_between);

  const std::size_t side = spec.side(), pixels = side * side;
  std::vector<Real> train_px, test_px;
  Labels train_y, test_y;
  for (std::size_t s = 0; s < spec.per_class; ++s)
    for (std::size_t c = 0; c < spec.classes; ++c) {
      const bool to_test = s % 5 == 4;
      auto& px = to_test ? test_px : train_px;
      (to_test ? test_y : train_y).push_back(static_cast<int>(c));
      const std::size_t start = px.size();
      px.resize(start + pixels, 0.0);
      for (std::size_t k = 0; k < spec.raw_dim; ++k)
        px[start + k] = centres[c * spec.raw_dim + k] + spec.sigma_within * noise_rng.normal();
    }

  auto build = [&](std::vector<Real>&& px, Labels&& y, Split split) {
    Dataset ds;
    ds.name = "blobs";
    ds.split = split;
    ds.num_classes = spec.classes;
    ds.images = Tensor(Shape{y.size(), 1, side, side}, std::move(px));
    ds.labels = std::move(y);
    return ds;
  };
  Dataset train = build(std::move(train_px), std::move(train_y), Split::train);
  Dataset test = build(std::move(test_px), std::move(test_y), Split::test);
  train.stats = compute_channel_stats(train.images);
  test.stats = train.stats;
  standardize(train.images, train.stats);
  standardize(test.images, test.stats);
  train.validate();
  test.validate();
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------

/// Fixed-size mini-batches over a seeded per-epoch permutation. The trailing
/// partial batch of each epoch is dropped.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, std::size_t batch_size, RngStream rng)
      : ds_(&ds), batch_size_(batch_size), rng_(rng), order_(ds.size()) {
    if (batch_size == 0 || batch_size > ds.size()) {
      throw std::invalid_argument("batch size " + std::to_string(batch_size) + " incompatible with dataset of " +
                                  std::to_string(ds.size()));
    }
    reshuffle();
  }

  std::size_t batches_per_epoch() const { return ds_->size() / batch_size_; }
  std::size_t epoch() const { return epoch_; }

  /// Dataset indices of the next batch.
  std::vector<std::size_t> next_indices() {
    if (cursor_ + batch_size_ > order_.size()) {
      ++epoch_;
      reshuffle();
    }
    std::vector<std::size_t> idx(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_size_));
    cursor_ += batch_size_;
    return idx;
  }

  Batch next_batch() { return gather(*ds_, next_indices()); }

  static Batch gather(const Dataset& ds, const std::vector<std::size_t>& idx) {
    const std::size_t per = ds.images.size() / ds.size();
    Shape shape = ds.images.shape();
    shape[0] = idx.size();
    std::vector<Real> px;
    px.reserve(idx.size() * per);
    Labels y;
    y.reserve(idx.size());
    for (std::size_t i : idx) {
      auto first = ds.images.values().begin() + static_cast<std::ptrdiff_t>(i * per);
      px.insert(px.end(), first, first + static_cast<std::ptrdiff_t>(per));
      y.push_back(ds.labels[i]);
    }
    return Batch{Tensor(shape, std::move(px)), std::move(y)};
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    rng_.shuffle(std::span<std::size_t>(order_));
    cursor_ = 0;
  }

  const Dataset* ds_;
  std::size_t batch_size_;
  RngStream rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

inline Batch next_batch(BatchIterator& it) { return it.next_batch(); }

}  // namespace moe_snnl
