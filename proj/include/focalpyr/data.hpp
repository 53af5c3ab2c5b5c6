#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "focalpyr/random.hpp"
#include "focalpyr/tensor.hpp"

namespace focalpyr {

// Target statistics in millimetres.
struct TaskSpec {
  std::string name;
  double mean;
  double sd;
  double lo;
  double hi;

  void validate() const {
    if (!(lo < mean && mean < hi) || !(sd > 0.0))
      throw ConfigError("task " + name + ": requires lo < mean < hi and sd > 0");
  }
  bool contains(double v) const { return v >= lo && v <= hi; }
};

inline const std::array<TaskSpec, 3>& task_specs() {
  static const std::array<TaskSpec, 3> specs{{
      {"MRD1", 2.59, 1.21, 0.00, 6.00},
      {"MRD2", 5.51, 0.83, 1.50, 10.00},
      {"LF", 12.1, 2.12, 3.50, 18.00},
  }};
  return specs;
}

inline std::optional<TaskSpec> find_task(const std::string& name) {
  for (const TaskSpec& t : task_specs())
    if (t.name == name) return t;
  return std::nullopt;
}

inline TaskSpec task_or_throw(const std::string& name) {
  if (auto t = find_task(name)) return *t;
  throw ConfigError("unknown task '" + name + "' (expected MRD1|MRD2|LF)");
}

enum class Provenance { synthetic, file };

struct Dataset {
  TaskSpec task;
  Tensor inputs;   // [n×d] features or [n×C×H×W] images
  Tensor targets;  // [n×1] in mm
  Provenance provenance = Provenance::synthetic;
  std::vector<double> lift;  // synthetic feature direction, empty otherwise

  std::size_t size() const { return targets.dim(0); }
  bool is_image() const { return inputs.rank() == 4; }
};

// ---- synthetic data ---------------------------------------------------------

inline double sample_truncated_normal(const TaskSpec& spec, Rng& rng) {
  for (;;) {
    const double v = rng.normal(spec.mean, spec.sd);
    if (spec.contains(v)) return v;
  }
}

// Targets ~ normal(mean, sd) truncated to [lo, hi] by rejection. Features are
// a fixed seeded linear lift of the standardized target plus Gaussian noise:
//   x = a * (t - mean) / sd + noise * eps
inline Dataset synth_generate(const TaskSpec& spec, std::size_t n, std::size_t d, double noise, std::uint64_t seed) {
  spec.validate();
  if (n == 0 || d == 0) throw ConfigError("synth_generate: n and d must be positive");
  if (!(noise >= 0.0)) throw ConfigError("synth_generate: noise must be >= 0");
  Rng lift_rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<double> lift(d);
  for (double& a : lift) a = lift_rng.normal();
  Rng rng(seed);
  std::vector<double> targets(n), features(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    targets[i] = sample_truncated_normal(spec, rng);
    const double z = (targets[i] - spec.mean) / spec.sd;
    for (std::size_t j = 0; j < d; ++j) features[i * d + j] = lift[j] * z + (noise > 0.0 ? noise * rng.normal() : 0.0);
  }
  return Dataset{spec, Tensor::from({n, d}, std::move(features)), Tensor::from({n, 1}, std::move(targets)),
                 Provenance::synthetic, std::move(lift)};
}

// Single-channel size×size images: the top fraction (t - lo)/(hi - lo) of
// rows is lit (anti-aliased at the edge), plus Gaussian pixel noise.
inline Dataset synth_generate_images(const TaskSpec& spec, std::size_t n, std::size_t size, double noise,
                                     std::uint64_t seed) {
  spec.validate();
  if (n == 0 || size == 0) throw ConfigError("synth_generate_images: n and size must be positive");
  Rng rng(seed);
  std::vector<double> targets(n), pixels(n * size * size);
  for (std::size_t i = 0; i < n; ++i) {
    targets[i] = sample_truncated_normal(spec, rng);
    const double edge = (targets[i] - spec.lo) / (spec.hi - spec.lo) * static_cast<double>(size);
    for (std::size_t r = 0; r < size; ++r) {
      const double lit = std::clamp(edge - static_cast<double>(r), 0.0, 1.0);
      for (std::size_t c = 0; c < size; ++c)
        pixels[(i * size + r) * size + c] = lit + (noise > 0.0 ? noise * rng.normal() : 0.0);
    }
  }
  return Dataset{spec, Tensor::from({n, 1, size, size}, std::move(pixels)), Tensor::from({n, 1}, std::move(targets)),
                 Provenance::synthetic, {}};
}

// ---- splits -----------------------------------------------------------------

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

// Seeded shuffle, then: train+val = round_half_up(0.9 n), test = the rest,
// val = round_half_up(0.2 (train+val)), train = the rest.
inline SplitIndices split(std::size_t n, std::uint64_t seed) {
  if (n < 10) throw ConfigError("split requires at least 10 samples, got " + std::to_string(n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next() % (i + 1));
    std::swap(order[i], order[j]);
  }
  const std::size_t train_val = (9 * n + 5) / 10;
  const std::size_t test = n - train_val;
  const std::size_t val = (2 * train_val + 5) / 10;
  SplitIndices s;
  s.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(test));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(test),
               order.begin() + static_cast<std::ptrdiff_t>(test + val));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(test + val), order.end());
  return s;
}

// Rows `indices` of a [n×...] tensor.
inline Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices) {
  const std::size_t row = t.numel() / t.dim(0);
  std::vector<double> out(indices.size() * row);
  auto src = t.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= t.dim(0)) throw DimensionError("gather_rows: index out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[i] * row), row,
                out.begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  Shape shape = t.shape();
  shape[0] = indices.size();
  return Tensor::from(std::move(shape), std::move(out));
}

// ---- targets CSV --------------------------------------------------------------

struct TargetRow {
  std::size_t id;
  std::string task;
  double value_mm;
};

struct RejectedRow {
  std::size_t line;
  std::size_t id;
  std::string reason;
};

struct TargetsFile {
  std::vector<TargetRow> rows;
  std::vector<RejectedRow> rejected;
};

inline std::string format_decimal(double v, int significant = 9) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", significant, v);
  return buf;
}

inline void save_targets_csv(const std::string& path, const std::vector<TargetRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "id,task,value_mm\n";
  for (const TargetRow& r : rows) out << r.id << ',' << r.task << ',' << format_decimal(r.value_mm) << '\n';
  if (!out) throw IoError("failed writing '" + path + "'");
}

// Header must be `id,task,value_mm`. Values outside the task's range are
// rejected (and reported), not fatal.
inline TargetsFile parse_targets_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "id,task,value_mm") throw ParseError(1, "expected header 'id,task,value_mm', got '" + line + "'");
  TargetsFile file;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 3) throw ParseError(lineno, "expected 3 fields, got " + std::to_string(fields.size()));
    TargetRow row;
    try {
      std::size_t used = 0;
      const unsigned long long id = std::stoull(fields[0], &used);
      if (used != fields[0].size() || fields[0].front() == '-') throw std::invalid_argument("id");
      row.id = static_cast<std::size_t>(id);
      row.value_mm = std::stod(fields[2], &used);
      if (used != fields[2].size()) throw std::invalid_argument("value");
    } catch (const std::exception&) {
      throw ParseError(lineno, "malformed row '" + line + "'");
    }
    if (!std::isfinite(row.value_mm)) throw ParseError(lineno, "non-finite value");
    row.task = fields[1];
    const auto spec = find_task(row.task);
    if (!spec) throw SchemaError("line " + std::to_string(lineno) + ": unknown task '" + row.task + "'");
    if (!spec->contains(row.value_mm)) {
      file.rejected.push_back({lineno, row.id,
                               "value " + format_decimal(row.value_mm) + " outside " + row.task + " range [" +
                                   format_decimal(spec->lo, 3) + ", " + format_decimal(spec->hi, 3) + "]"});
      continue;
    }
    file.rows.push_back(std::move(row));
  }
  return file;
}

inline TargetsFile load_targets_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  return parse_targets_csv(in);
}

// ---- FPFT binary features -----------------------------------------------------
// "FPFT" | u32 rank | rank × u32 dims | row-major f32 data, all little-endian.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_features(const Tensor& t) {
  std::string out = "FPFT";
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    detail::put_u32(out, bits);
  }
  return out;
}

inline Tensor decode_features(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "FPFT") != 0) throw FormatError("feature file: bad magic (expected FPFT)");
  if (bytes.size() < 8) throw TruncationError("feature file: missing dimension count");
  const std::uint32_t rank = detail::get_u32(bytes, 4);
  if (rank == 0) throw FormatError("feature file: empty tensor (zero dimensions)");
  const std::size_t header = 8 + 4 * static_cast<std::size_t>(rank);
  if (bytes.size() < header) throw TruncationError("feature file: truncated dimension list");
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t d = detail::get_u32(bytes, 8 + 4 * i);
    if (d == 0) throw FormatError("feature file: empty tensor (zero-length dimension)");
    shape.push_back(d);
  }
  const std::size_t count = numel(shape);
  const std::size_t expected = header + 4 * count;
  if (bytes.size() < expected)
    throw TruncationError("feature file: expected " + std::to_string(expected) + " bytes, got " + std::to_string(bytes.size()));
  if (bytes.size() > expected)
    throw TruncationError("feature file: " + std::to_string(bytes.size() - expected) + " trailing bytes");
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = detail::get_u32(bytes, header + 4 * i);
    float f;
    std::memcpy(&f, &bits, sizeof f);
    data[i] = f;
  }
  return Tensor::from(std::move(shape), std::move(data));
}

inline void save_features_bin(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  const std::string bytes = encode_features(t);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline Tensor load_features_bin(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_features(bytes);
}

// Pairs a feature file with a targets file. Target row ids index feature rows;
// rejected target rows are dropped.
inline Dataset load_dataset(const std::string& features_path, const std::string& targets_path,
                            const std::string& task, std::vector<RejectedRow>* rejected = nullptr) {
  const TaskSpec spec = task_or_throw(task);
  Tensor features = load_features_bin(features_path);
  TargetsFile targets = load_targets_csv(targets_path);
  if (rejected) *rejected = targets.rejected;
  std::vector<std::size_t> ids;
  std::vector<double> values;
  for (const TargetRow& r : targets.rows) {
    if (r.task != task) continue;
    if (r.id >= features.dim(0))
      throw FormatError("target id " + std::to_string(r.id) + " has no feature row (file has " +
                        std::to_string(features.dim(0)) + ")");
    ids.push_back(r.id);
    values.push_back(r.value_mm);
  }
  if (ids.empty()) throw FormatError("no usable " + task + " targets in '" + targets_path + "'");
  const std::size_t n = ids.size();
  return Dataset{spec, gather_rows(features, ids), Tensor::from({n, 1}, std::move(values)), Provenance::file, {}};
}

}  // namespace focalpyr
