#pragma once

// Named-tensor checkpoint container and checkpoint interpolation.
//
// File layout (little-endian):
//   u64            N, the header length in bytes
//   N bytes        JSON header {"__metadata__": {str: str}?,
//                               name: {"dtype", "shape", "offset", "length"}}
//   data region    tensor bytes; offsets are relative to the region start
//
// save() writes names in sorted order, contiguously, with compact JSON, so
// any file it produced is reproduced byte for byte by save(load(file)).

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sftkit/common.hpp"

namespace sftkit {

enum class DType { f32, f16, bf16 };

inline std::size_t dtype_width(DType d) { return d == DType::f32 ? 4 : 2; }

inline std::string_view dtype_name(DType d) {
  switch (d) {
    case DType::f32: return "f32";
    case DType::f16: return "f16";
    case DType::bf16: return "bf16";
  }
  return "?";
}

inline std::optional<DType> parse_dtype(std::string_view s) {
  if (s == "f32") return DType::f32;
  if (s == "f16") return DType::f16;
  if (s == "bf16") return DType::bf16;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Half-precision conversions (round to nearest even)
// ---------------------------------------------------------------------------

inline float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000) << 16;
  std::uint32_t exp = (h >> 10) & 0x1F;
  std::uint32_t mant = h & 0x3FF;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: renormalize
      int e = -1;
      do {
        ++e;
        mant <<= 1;
      } while ((mant & 0x400) == 0);
      bits = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | ((mant & 0x3FF) << 13);
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000 | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

inline std::uint16_t float_to_half(float f) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000);
  const std::uint32_t abs = x & 0x7FFFFFFF;
  if (abs >= 0x7F800000) {  // inf or nan
    return static_cast<std::uint16_t>(sign | 0x7C00 | (abs > 0x7F800000 ? 0x200 : 0));
  }
  if (abs >= 0x477FF000) return static_cast<std::uint16_t>(sign | 0x7C00);  // rounds past 65504
  const int exp = static_cast<int>(abs >> 23) - 127;
  if (exp < -14) {
    // subnormal or zero in half precision
    if (exp < -25) return sign;
    const std::uint32_t mant = (abs & 0x7FFFFF) | 0x800000;
    const int shift = -exp - 14 + 13;
    std::uint32_t half = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1);
    const std::uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (half & 1))) ++half;
    return static_cast<std::uint16_t>(sign | half);
  }
  std::uint32_t half = (static_cast<std::uint32_t>(exp + 15) << 10) | ((abs >> 13) & 0x3FF);
  const std::uint32_t rem = abs & 0x1FFF;
  if (rem > 0x1000 || (rem == 0x1000 && (half & 1))) ++half;
  return static_cast<std::uint16_t>(sign | half);
}

inline float bf16_to_float(std::uint16_t b) { return std::bit_cast<float>(static_cast<std::uint32_t>(b) << 16); }

inline std::uint16_t float_to_bf16(float f) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  if ((x & 0x7FFFFFFF) > 0x7F800000) return static_cast<std::uint16_t>((x >> 16) | 0x40);  // quiet nan
  const std::uint32_t rounded = x + 0x7FFF + ((x >> 16) & 1);
  return static_cast<std::uint16_t>(rounded >> 16);
}

// ---------------------------------------------------------------------------
// Tensors
// ---------------------------------------------------------------------------

struct TensorEntry {
  DType dtype = DType::f32;
  std::vector<std::int64_t> shape;
  std::vector<std::uint8_t> data;  // little-endian elements

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }

  float get(std::size_t i) const {
    const std::uint8_t* p = data.data() + i * dtype_width(dtype);
    if (dtype == DType::f32) {
      const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
                                 static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
      return std::bit_cast<float>(bits);
    }
    const auto bits = static_cast<std::uint16_t>(p[0] | p[1] << 8);
    return dtype == DType::f16 ? half_to_float(bits) : bf16_to_float(bits);
  }

  void set(std::size_t i, float v) {
    std::uint8_t* p = data.data() + i * dtype_width(dtype);
    if (dtype == DType::f32) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      for (int k = 0; k < 4; ++k) p[k] = static_cast<std::uint8_t>(bits >> (8 * k));
      return;
    }
    const std::uint16_t bits = dtype == DType::f16 ? float_to_half(v) : float_to_bf16(v);
    p[0] = static_cast<std::uint8_t>(bits);
    p[1] = static_cast<std::uint8_t>(bits >> 8);
  }

  static TensorEntry from_floats(DType dtype, std::vector<std::int64_t> shape, std::span<const float> values) {
    TensorEntry t{dtype, std::move(shape), {}};
    if (t.element_count() != values.size()) {
      throw ValidationError("checkpoint", "shape holds " + std::to_string(t.element_count()) + " elements, got " +
                                              std::to_string(values.size()));
    }
    t.data.resize(values.size() * dtype_width(dtype));
    for (std::size_t i = 0; i < values.size(); ++i) t.set(i, values[i]);
    return t;
  }

  std::vector<float> to_floats() const {
    std::vector<float> out(element_count());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = get(i);
    return out;
  }

  friend bool operator==(const TensorEntry&, const TensorEntry&) = default;
};

class CheckpointStore {
 public:
  static constexpr std::string_view kMetadataKey = "__metadata__";

  void insert(const std::string& name, TensorEntry t) {
    if (name.empty() || name == kMetadataKey) throw ValidationError("checkpoint", "invalid tensor name '" + name + "'");
    for (auto d : t.shape) {
      if (d < 0) throw ValidationError("checkpoint", "tensor '" + name + "' has a negative dimension");
    }
    if (t.data.size() != t.element_count() * dtype_width(t.dtype)) {
      throw ValidationError("checkpoint", "tensor '" + name + "': buffer is " + std::to_string(t.data.size()) +
                                              " bytes, shape and dtype need " +
                                              std::to_string(t.element_count() * dtype_width(t.dtype)));
    }
    if (!entries_.emplace(name, std::move(t)).second) {
      throw ValidationError("checkpoint", "duplicate tensor name '" + name + "'");
    }
  }

  const std::map<std::string, TensorEntry>& entries() const { return entries_; }
  const TensorEntry& at(const std::string& name) const { return entries_.at(name); }
  std::map<std::string, std::string>& metadata() { return metadata_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }
  std::size_t size() const { return entries_.size(); }

  friend bool operator==(const CheckpointStore&, const CheckpointStore&) = default;

 private:
  std::map<std::string, TensorEntry> entries_;
  std::map<std::string, std::string> metadata_;
};

// ---------------------------------------------------------------------------
// Container I/O
// ---------------------------------------------------------------------------

inline std::string serialize_checkpoint(const CheckpointStore& store) {
  json header = json::object();
  if (!store.metadata().empty()) header[std::string(CheckpointStore::kMetadataKey)] = store.metadata();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : store.entries()) {
    header[name] = {{"dtype", dtype_name(t.dtype)},
                    {"shape", t.shape},
                    {"offset", offset},
                    {"length", t.data.size()}};
    offset += t.data.size();
  }
  const std::string h = header.dump();
  std::string out;
  out.reserve(8 + h.size() + offset);
  const auto n = static_cast<std::uint64_t>(h.size());
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((n >> (8 * k)) & 0xFF));
  out += h;
  for (const auto& [_, t] : store.entries()) out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size());
  return out;
}

inline CheckpointStore parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < 8) throw FormatError("checkpoint", "truncated: missing header length");
  std::uint64_t n = 0;
  for (int k = 0; k < 8; ++k) n |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[k])) << (8 * k);
  if (n > bytes.size() - 8) {
    throw FormatError("checkpoint", "truncated: header declares " + std::to_string(n) + " bytes, file has " +
                                        std::to_string(bytes.size() - 8));
  }
  json header;
  try {
    header = json::parse(bytes.substr(8, n));
  } catch (const json::parse_error& e) {
    throw FormatError("checkpoint", std::string("header is not valid JSON: ") + e.what());
  }
  if (!header.is_object()) throw FormatError("checkpoint", "header must be a JSON object");
  const std::string_view region = bytes.substr(8 + n);
  CheckpointStore store;
  for (const auto& [name, spec] : header.items()) {
    if (name == CheckpointStore::kMetadataKey) {
      try {
        store.metadata() = spec.get<std::map<std::string, std::string>>();
      } catch (const json::exception&) {
        throw FormatError("checkpoint", "metadata must map strings to strings");
      }
      continue;
    }
    TensorEntry t;
    std::uint64_t offset = 0, length = 0;
    try {
      const auto dt = parse_dtype(spec.at("dtype").get<std::string>());
      if (!dt) throw FormatError("checkpoint", "tensor '" + name + "': unknown dtype '" + spec.at("dtype").get<std::string>() + "'");
      t.dtype = *dt;
      t.shape = spec.at("shape").get<std::vector<std::int64_t>>();
      offset = spec.at("offset").get<std::uint64_t>();
      length = spec.at("length").get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw FormatError("checkpoint", "tensor '" + name + "': bad header entry: " + e.what());
    }
    for (auto d : t.shape) {
      if (d < 0) throw FormatError("checkpoint", "tensor '" + name + "': negative dimension");
    }
    if (length != t.element_count() * dtype_width(t.dtype)) {
      throw FormatError("checkpoint", "tensor '" + name + "': header length " + std::to_string(length) +
                                          " does not match shape and dtype (" +
                                          std::to_string(t.element_count() * dtype_width(t.dtype)) + ")");
    }
    if (offset > region.size() || length > region.size() - offset) {
      throw FormatError("checkpoint", "truncated: tensor '" + name + "' declares " + std::to_string(length) +
                                          " bytes at offset " + std::to_string(offset) + ", data region has " +
                                          std::to_string(region.size()));
    }
    const auto* p = reinterpret_cast<const std::uint8_t*>(region.data()) + offset;
    t.data.assign(p, p + length);
    store.insert(name, std::move(t));
  }
  return store;
}

inline CheckpointStore load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

inline void save_checkpoint(const CheckpointStore& store, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(store));
}

// Debug form: one JSON line per tensor {name, dtype, shape, data(base64)},
// preceded by a {"__metadata__": {...}} line when metadata is present.
inline std::string checkpoint_to_lines(const CheckpointStore& store) {
  std::string out;
  if (!store.metadata().empty()) {
    out += json{{std::string(CheckpointStore::kMetadataKey), store.metadata()}}.dump() + "\n";
  }
  for (const auto& [name, t] : store.entries()) {
    ordered_json j;
    j["name"] = name;
    j["dtype"] = dtype_name(t.dtype);
    j["shape"] = t.shape;
    j["data"] = base64_encode(std::string_view(reinterpret_cast<const char*>(t.data.data()), t.data.size()));
    out += j.dump() + "\n";
  }
  return out;
}

inline CheckpointStore checkpoint_from_lines(const std::filesystem::path& path) {
  CheckpointStore store;
  for (const auto& [lineno, line] : read_lines(path)) {
    try {
      json j = json::parse(line);
      if (j.contains(std::string(CheckpointStore::kMetadataKey))) {
        store.metadata() = j.at(std::string(CheckpointStore::kMetadataKey)).get<std::map<std::string, std::string>>();
        continue;
      }
      const auto dt = parse_dtype(j.at("dtype").get<std::string>());
      if (!dt) throw FormatError("checkpoint", "unknown dtype");
      const std::string raw = base64_decode(j.at("data").get<std::string>());
      TensorEntry t{*dt, j.at("shape").get<std::vector<std::int64_t>>(), std::vector<std::uint8_t>(raw.begin(), raw.end())};
      store.insert(j.at("name").get<std::string>(), std::move(t));
    } catch (const json::exception& e) {
      throw FormatError("checkpoint", path.string() + ": line " + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw FormatError("checkpoint", path.string() + ": line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return store;
}

// ---------------------------------------------------------------------------
// Interpolation
// ---------------------------------------------------------------------------

inline constexpr double kDefaultBlendAlpha = 0.6;

// out = alpha * left + (1 - alpha) * right, elementwise, accumulated in f32
// and rounded back to the stored dtype. Both weights are derived in double
// before narrowing, so interpolate(a, b, x) and interpolate(b, a, 1 - x) use
// the same pair of f32 weights.
inline CheckpointStore interpolate(const CheckpointStore& left, const CheckpointStore& right,
                                   double alpha = kDefaultBlendAlpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("checkpoint", "alpha must be in [0, 1]", "alpha");
  std::vector<std::string> only_left, only_right;
  for (const auto& [name, _] : left.entries()) {
    if (!right.entries().count(name)) only_left.push_back(name);
  }
  for (const auto& [name, _] : right.entries()) {
    if (!left.entries().count(name)) only_right.push_back(name);
  }
  if (!only_left.empty() || !only_right.empty()) {
    throw ValidationError("checkpoint", "tensor names differ; only in left: [" + join(only_left, ", ") +
                                            "], only in right: [" + join(only_right, ", ") + "]");
  }
  const float wl = static_cast<float>(alpha);
  const float wr = static_cast<float>(1.0 - alpha);
  CheckpointStore out;
  out.metadata() = left.metadata();
  for (const auto& [name, l] : left.entries()) {
    const auto& r = right.at(name);
    if (l.dtype != r.dtype) {
      throw ValidationError("checkpoint", "tensor '" + name + "': dtype " + std::string(dtype_name(l.dtype)) +
                                              " vs " + std::string(dtype_name(r.dtype)));
    }
    if (l.shape != r.shape) throw ValidationError("checkpoint", "tensor '" + name + "': shapes differ");
    TensorEntry t{l.dtype, l.shape, std::vector<std::uint8_t>(l.data.size())};
    const std::size_t n = l.element_count();
    for (std::size_t i = 0; i < n; ++i) t.set(i, wl * l.get(i) + wr * r.get(i));
    out.insert(name, std::move(t));
  }
  return out;
}

// Distance in units in the last place of `dtype` between two values that
// are representable in it.
inline std::uint64_t ulp_distance(float a, float b, DType dtype) {
  auto ordered = [&](float v) -> std::int64_t {
    std::int64_t bits;
    int width;
    if (dtype == DType::f32) {
      bits = std::bit_cast<std::uint32_t>(v);
      width = 32;
    } else {
      bits = dtype == DType::f16 ? float_to_half(v) : float_to_bf16(v);
      width = 16;
    }
    const std::int64_t sign_bit = std::int64_t{1} << (width - 1);
    return (bits & sign_bit) ? -(bits & (sign_bit - 1)) : bits;
  };
  const auto d = ordered(a) - ordered(b);
  return static_cast<std::uint64_t>(d < 0 ? -d : d);
}

// ---------------------------------------------------------------------------
// Blend selection
// ---------------------------------------------------------------------------

using TaskScores = std::map<std::string, double>;

struct BlendCandidate {
  double alpha = 0;
  double average = 0;
  std::size_t tasks = 0;
};

struct BlendSelection {
  double alpha = kDefaultBlendAlpha;
  std::vector<BlendCandidate> candidates;
  std::map<int, double> epoch_averages;  // context only

  ordered_json to_json() const {
    ordered_json j;
    j["alpha"] = alpha;
    ordered_json c = ordered_json::array();
    for (const auto& b : candidates) c.push_back({{"alpha", b.alpha}, {"average", b.average}, {"tasks", b.tasks}});
    j["candidates"] = std::move(c);
    ordered_json e = ordered_json::object();
    for (const auto& [epoch, avg] : epoch_averages) e[std::to_string(epoch)] = avg;
    j["epoch_averages"] = std::move(e);
    return j;
  }
};

inline double average_score(const TaskScores& s) {
  if (s.empty()) return 0.0;
  double sum = 0;
  for (const auto& [_, v] : s) sum += v;
  return sum / static_cast<double>(s.size());
}

// Picks the candidate whose blended model has the best mean dev score;
// ties go to the larger alpha. `blend_scores` holds the dev scores of each
// candidate's blended model; `epoch_scores` (per-epoch dev scores of the
// unblended checkpoints) only feeds the report.
inline BlendSelection select_blend(const std::map<int, TaskScores>& epoch_scores,
                                   const std::map<double, TaskScores>& blend_scores,
                                   std::span<const double> candidates) {
  if (candidates.empty()) throw ValidationError("checkpoint", "no candidate alphas", "candidates");
  BlendSelection sel;
  for (const auto& [epoch, s] : epoch_scores) sel.epoch_averages[epoch] = average_score(s);
  for (double a : candidates) {
    auto it = blend_scores.find(a);
    if (it == blend_scores.end() || it->second.empty()) {
      throw ValidationError("checkpoint", "no dev scores for candidate alpha " + format_fixed(a, 4), "dev_scores");
    }
    sel.candidates.push_back({a, average_score(it->second), it->second.size()});
  }
  const BlendCandidate* best = nullptr;
  for (const auto& c : sel.candidates) {
    if (!best || c.average > best->average || (c.average == best->average && c.alpha > best->alpha)) best = &c;
  }
  sel.alpha = best->alpha;
  return sel;
}

// Runs `evaluate` on each candidate's blend and selects as above.
inline BlendSelection select_blend(const std::map<int, TaskScores>& epoch_scores, std::span<const double> candidates,
                                   const std::function<TaskScores(double alpha)>& evaluate) {
  std::map<double, TaskScores> scores;
  for (double a : candidates) scores[a] = evaluate(a);
  return select_blend(epoch_scores, scores, candidates);
}

}  // namespace sftkit
