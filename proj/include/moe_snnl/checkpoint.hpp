#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "moe_snnl/moe.hpp"

namespace moe_snnl {

// Binary container, all integers little-endian:
//   "MOE1" | version u32 | entry count u32
//   per entry: name length u16 | utf-8 name | rank u8 | dims u32[rank] | f32[prod(dims)]

inline constexpr char kCheckpointMagic[4] = {'M', 'O', 'E', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

inline CheckpointEntry make_entry(const std::string& name, const Shape& shape, const std::vector<Real>& values) {
  CheckpointEntry e{name, shape, {}};
  e.values.reserve(values.size());
  for (Real v : values) e.values.push_back(static_cast<float>(v));
  return e;
}

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::string out(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xFFFF) throw FormatError("checkpoint entry name too long: " + e.name);
    if (e.shape.size() > 0xFF) throw FormatError("checkpoint entry rank too large: " + e.name);
    if (numel(e.shape) != e.values.size()) throw FormatError("checkpoint entry shape mismatch: " + e.name);
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    out.push_back(static_cast<char>(e.shape.size()));
    for (std::size_t d : e.shape) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float v : e.values) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline std::vector<CheckpointEntry> decode_checkpoint(const std::string& bytes) {
  detail::ByteReader in(bytes);
  const std::string magic = in.take(4);
  if (magic != std::string(kCheckpointMagic, 4)) throw FormatError("checkpoint: bad magic '" + magic + "'");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = in.get<std::uint32_t>();
  std::vector<CheckpointEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = in.take(in.get<std::uint16_t>());
    const auto rank = in.get<std::uint8_t>();
    for (std::uint8_t r = 0; r < rank; ++r) e.shape.push_back(in.get<std::uint32_t>());
    const std::size_t n = numel(e.shape);
    e.values.reserve(n);
    for (std::size_t k = 0; k < n; ++k) e.values.push_back(std::bit_cast<float>(in.get<std::uint32_t>()));
    entries.push_back(std::move(e));
  }
  if (!in.done()) throw FormatError("checkpoint: trailing bytes after last entry");
  return entries;
}

/// Serializable state of a model: architecture descriptor, parameters, BN running statistics.
inline std::vector<CheckpointEntry> model_state(MoEModel& model) {
  const auto& c = model.config();
  std::vector<CheckpointEntry> out;
  out.push_back(detail::make_entry(
      "meta.architecture", Shape{8},
      {static_cast<Real>(c.extractor.in_channels), static_cast<Real>(c.extractor.height),
       static_cast<Real>(c.extractor.width), static_cast<Real>(c.extractor.block1_filters),
       static_cast<Real>(c.extractor.block2_filters), static_cast<Real>(c.n_experts), static_cast<Real>(c.n_classes),
       static_cast<Real>(c.expert_hidden)}));
  auto add_bn_stats = [&](const BatchNorm2DLayer& bn, const std::string& prefix) {
    out.push_back(detail::make_entry(prefix + ".running_mean", Shape{bn.channels()}, bn.running_mean));
    out.push_back(detail::make_entry(prefix + ".running_var", Shape{bn.channels()}, bn.running_var));
  };
  for (Parameter* p : model.parameters()) {
    out.push_back(detail::make_entry(p->name, p->tensor.shape(), p->tensor.values()));
    if (p->name == "extractor.bn1.beta") add_bn_stats(model.extractor.bn1, "extractor.bn1");
    if (p->name == "extractor.bn2.beta") add_bn_stats(model.extractor.bn2, "extractor.bn2");
  }
  return out;
}

inline MoEModel model_from_state(const std::vector<CheckpointEntry>& entries) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto find = [&](const std::string& name) -> const CheckpointEntry& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing entry '" + name + "'");
    return *it->second;
  };
  const auto& meta = find("meta.architecture");
  if (meta.values.size() != 8) throw FormatError("checkpoint: malformed architecture entry");
  auto as_size = [](float v) { return static_cast<std::size_t>(v); };
  MoEConfig cfg;
  cfg.extractor.in_channels = as_size(meta.values[0]);
  cfg.extractor.height = as_size(meta.values[1]);
  cfg.extractor.width = as_size(meta.values[2]);
  cfg.extractor.block1_filters = as_size(meta.values[3]);
  cfg.extractor.block2_filters = as_size(meta.values[4]);
  cfg.n_experts = as_size(meta.values[5]);
  cfg.n_classes = as_size(meta.values[6]);
  cfg.expert_hidden = as_size(meta.values[7]);
  RngStream unused(0);
  MoEModel model(cfg, unused);

  auto load = [&](const std::string& name, const Shape& shape, std::vector<Real>& dst) {
    const auto& e = find(name);
    if (e.shape != shape) {
      throw FormatError("checkpoint: entry '" + name + "' has shape " + to_string(e.shape) + ", model expects " +
                        to_string(shape));
    }
    dst.assign(e.values.begin(), e.values.end());
  };
  for (Parameter* p : model.parameters()) load(p->name, p->tensor.shape(), p->tensor.values());
  for (auto* bn : {&model.extractor.bn1, &model.extractor.bn2}) {
    const std::string prefix = bn == &model.extractor.bn1 ? "extractor.bn1" : "extractor.bn2";
    load(prefix + ".running_mean", Shape{bn->channels()}, bn->running_mean);
    load(prefix + ".running_var", Shape{bn->channels()}, bn->running_var);
  }
  model.set_mode(Mode::eval);
  return model;
}

inline void export_checkpoint(MoEModel& model, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(model_state(model));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

inline MoEModel import_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return model_from_state(decode_checkpoint(bytes));
}

}  // namespace moe_snnl
