#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "hiercomp/autodiff.hpp"
#include "hiercomp/binary_io.hpp"
#include "hiercomp/random.hpp"

namespace hiercomp {

// "HCKP" | u32 version | u32 count | count x entry
// entry: u32 name length | name | u32 rank | rank x u64 dims | u8 bytes per value | values (LE)
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
std::vector<std::uint8_t> serialize_checkpoint(std::span<const Parameter<T>> params) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  ByteWriter w;
  w.raw("HCKP");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.raw(p.name);
    w.u32(static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) w.u64(d);
    w.u8(sizeof(T));
    for (T v : p.value.values()) {
      if constexpr (sizeof(T) == 4)
        w.f32(v);
      else
        w.f64(v);
    }
  }
  return std::move(w).take();
}

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

template <class T>
std::vector<NamedTensor<T>> deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.remaining() < 4 || r.raw(4) != "HCKP") throw FormatError("checkpoint: bad magic");
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(v));
  const auto count = r.u32();
  std::vector<NamedTensor<T>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor<T> e;
    e.name = r.raw(r.u32());
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u64();
    const auto width = r.u8();
    if (width != 4 && width != 8) throw FormatError("checkpoint: bad value width for " + e.name);
    std::vector<T> values(shape_size(shape));
    for (auto& v : values) v = static_cast<T>(width == 4 ? static_cast<double>(r.f32()) : r.f64());
    e.value = Tensor<T>(std::move(shape), std::move(values));
    out.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  return out;
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string fingerprint(std::span<const std::uint8_t> bytes) { return hex64(fnv1a64(bytes.data(), bytes.size())); }

template <class T>
void save_checkpoint(const std::string& path, std::span<const Parameter<T>> params) {
  write_file(path, serialize_checkpoint(params));
}

template <class T>
std::vector<NamedTensor<T>> load_checkpoint(const std::string& path) {
  return deserialize_checkpoint<T>(read_file(path));
}

// Copies values into params by name; every parameter must be present with the same shape.
template <class T>
void restore_parameters(std::span<Parameter<T>> params, const std::vector<NamedTensor<T>>& saved) {
  for (auto& p : params) {
    auto it = std::find_if(saved.begin(), saved.end(), [&](const auto& e) { return e.name == p.name; });
    if (it == saved.end()) throw FormatError("checkpoint: missing parameter " + p.name);
    if (it->value.shape() != p.value.shape())
      throw FormatError("checkpoint: shape mismatch for " + p.name + ": " + to_string(it->value.shape()) +
                        " vs " + to_string(p.value.shape()));
    p.value = it->value;
  }
}

}  // namespace hiercomp
