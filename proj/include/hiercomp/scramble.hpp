#pragma once

// Deterministic hierarchical scrambling of square images.
//
// A pixel position (row, col) in an image of side 2^L has a quadtree address
// q_1 .. q_L, where q_l in {0..3} names the quadrant chosen at level l
// (level 1 splits the whole image, level L splits 2x2 blocks into pixels).
// Scrambling a set of levels A rewrites every digit q_l with l in A through a
// permutation of {0..3} that is specific to the level and to the source
// block (the ancestor path q_1 .. q_{l-1}). Digits outside A are untouched.
//
//   Identity       A = {}
//   TopDown k      A = {1 .. k}            coarse blocks shuffled first
//   BottomUp k     A = {L-k+1 .. L}        only the k finest levels
//   Full           A = {1 .. L}
//
// The per-block permutations depend only on (seed, level, block), so for a
// shared seed the TopDown and BottomUp chains are nested and both end at the
// same Full map.

#include <array>
#include <bit>
#include <cmath>
#include <limits>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hiercomp/binary_io.hpp"
#include "hiercomp/random.hpp"
#include "hiercomp/tensor.hpp"

namespace hiercomp {

enum class ScrambleScheme : std::uint8_t { Identity, TopDown, BottomUp, Full };

inline constexpr std::uint64_t kDefaultScrambleSeed = 0x5C4A3B1E2D0F9687ull;
inline constexpr int kFullLevel = 5;

struct ScrambleSpec {
  ScrambleScheme scheme = ScrambleScheme::Identity;
  int level = 0;
  std::size_t image_side = 32;
  std::uint64_t seed = kDefaultScrambleSeed;

  static ScrambleSpec identity(std::size_t side = 32) { return {ScrambleScheme::Identity, 0, side}; }
  static ScrambleSpec top_down(int k, std::size_t side = 32) { return {ScrambleScheme::TopDown, k, side}; }
  static ScrambleSpec bottom_up(int k, std::size_t side = 32) { return {ScrambleScheme::BottomUp, k, side}; }
  static ScrambleSpec full(std::size_t side = 32) { return {ScrambleScheme::Full, kFullLevel, side}; }

  // Throws std::invalid_argument when the invariants do not hold.
  void validate() const {
    if (image_side < 2 || !std::has_single_bit(image_side))
      throw std::invalid_argument("scramble: image side " + std::to_string(image_side) +
                                  " is not a power of two >= 2");
    switch (scheme) {
      case ScrambleScheme::Identity:
        if (level != 0) throw std::invalid_argument("scramble: Identity requires level 0");
        break;
      case ScrambleScheme::Full:
        if (level != kFullLevel) throw std::invalid_argument("scramble: Full requires level 5");
        break;
      case ScrambleScheme::TopDown:
      case ScrambleScheme::BottomUp:
        if (level < 1 || level > 4)
          throw std::invalid_argument("scramble: TopDown/BottomUp require level in 1..4, got " +
                                      std::to_string(level));
        break;
    }
    if (image_side < (std::size_t{1} << level))
      throw std::invalid_argument("scramble: image side " + std::to_string(image_side) +
                                  " smaller than 2^" + std::to_string(level));
  }

  int depth() const { return std::countr_zero(image_side); }

  // Quadtree levels (1-based, 1 = coarsest) whose digits are permuted.
  std::vector<int> active_levels() const {
    validate();
    const int depth_ = depth();
    std::vector<int> levels;
    switch (scheme) {
      case ScrambleScheme::Identity:
        break;
      case ScrambleScheme::TopDown:
        for (int l = 1; l <= level; ++l) levels.push_back(l);
        break;
      case ScrambleScheme::BottomUp:
        for (int l = depth_ - level + 1; l <= depth_; ++l) levels.push_back(l);
        break;
      case ScrambleScheme::Full:
        for (int l = 1; l <= depth_; ++l) levels.push_back(l);
        break;
    }
    return levels;
  }

  // Short condition name used on the command line and in records.
  std::string tag() const {
    switch (scheme) {
      case ScrambleScheme::Identity: return "s0";
      case ScrambleScheme::TopDown: return "td" + std::to_string(level);
      case ScrambleScheme::BottomUp: return "bu" + std::to_string(level);
      case ScrambleScheme::Full: return "s5";
    }
    return "?";
  }

  bool operator==(const ScrambleSpec&) const = default;
};

inline std::string_view scheme_name(ScrambleScheme s) {
  switch (s) {
    case ScrambleScheme::Identity: return "identity";
    case ScrambleScheme::TopDown: return "topdown";
    case ScrambleScheme::BottomUp: return "bottomup";
    case ScrambleScheme::Full: return "full";
  }
  return "?";
}

inline ScrambleSpec parse_scramble(std::string_view tag, std::size_t side = 32,
                                   std::uint64_t seed = kDefaultScrambleSeed) {
  ScrambleSpec spec;
  auto level_of = [&](std::string_view rest) {
    if (rest.size() != 1 || rest[0] < '1' || rest[0] > '4')
      throw std::invalid_argument("unknown scramble condition '" + std::string(tag) + "'");
    return rest[0] - '0';
  };
  if (tag == "s0") {
    spec = ScrambleSpec::identity(side);
  } else if (tag == "s5") {
    spec = ScrambleSpec::full(side);
  } else if (tag.starts_with("td")) {
    spec = ScrambleSpec::top_down(level_of(tag.substr(2)), side);
  } else if (tag.starts_with("bu")) {
    spec = ScrambleSpec::bottom_up(level_of(tag.substr(2)), side);
  } else {
    throw std::invalid_argument("unknown scramble condition '" + std::string(tag) + "'");
  }
  spec.seed = seed;
  spec.validate();
  return spec;
}

// The ten conditions of the experiment grid, in grid order.
inline std::vector<ScrambleSpec> all_scramble_conditions(std::size_t side = 32,
                                                         std::uint64_t seed = kDefaultScrambleSeed) {
  std::vector<ScrambleSpec> out;
  for (auto tag : {"s0", "td1", "td2", "td3", "td4", "bu1", "bu2", "bu3", "bu4", "s5"})
    out.push_back(parse_scramble(tag, side, seed));
  return out;
}

// Fixed bijection on flattened pixel positions: source p goes to forward[p].
class PermutationMap {
 public:
  PermutationMap() = default;
  explicit PermutationMap(std::vector<std::uint32_t> forward) : forward_(std::move(forward)) {
    std::vector<bool> seen(forward_.size(), false);
    for (auto d : forward_) {
      if (d >= forward_.size() || seen[d])
        throw std::invalid_argument("permutation map is not a bijection");
      seen[d] = true;
    }
  }

  static PermutationMap identity(std::size_t n) {
    std::vector<std::uint32_t> f(n);
    for (std::size_t i = 0; i < n; ++i) f[i] = static_cast<std::uint32_t>(i);
    return PermutationMap(std::move(f));
  }

  std::size_t size() const noexcept { return forward_.size(); }
  std::span<const std::uint32_t> forward() const noexcept { return forward_; }
  std::uint32_t operator[](std::size_t p) const noexcept { return forward_[p]; }

  bool operator==(const PermutationMap&) const = default;

 private:
  std::vector<std::uint32_t> forward_;
};

// Uniform permutation of the four children of one block, drawn from a
// counter-based stream keyed on (seed, level, block).
inline std::array<std::uint8_t, 4> quadrant_permutation(std::uint64_t seed, int level,
                                                        std::uint64_t block) {
  constexpr std::uint64_t kLimit = std::numeric_limits<std::uint64_t>::max() -
                                   std::numeric_limits<std::uint64_t>::max() % 24;
  std::uint64_t h = mix_seed(seed, static_cast<std::uint64_t>(level), block);
  while (h >= kLimit) h = splitmix64(h);
  std::uint64_t code = h % 24;
  std::array<std::uint8_t, 4> pool{0, 1, 2, 3};
  std::array<std::uint8_t, 4> perm{};
  std::size_t remaining = 4;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::uint64_t radix = remaining;
    const auto pick = static_cast<std::size_t>(code % radix);
    code /= radix;
    perm[i] = pool[pick];
    for (std::size_t j = pick; j + 1 < remaining; ++j) pool[j] = pool[j + 1];
    --remaining;
  }
  return perm;
}

// General form: permute the digits of the given quadtree levels.
inline PermutationMap build_hierarchical_permutation(std::size_t side, std::span<const int> levels,
                                                     std::uint64_t seed) {
  if (side < 2 || !std::has_single_bit(side))
    throw std::invalid_argument("scramble: side must be a power of two >= 2");
  const int depth = std::countr_zero(side);
  std::vector<bool> active(static_cast<std::size_t>(depth) + 1, false);
  for (int l : levels) {
    if (l < 1 || l > depth) throw std::invalid_argument("scramble: level out of range");
    active[static_cast<std::size_t>(l)] = true;
  }

  std::vector<std::uint32_t> forward(side * side);
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      std::size_t dr = 0, dc = 0;
      std::uint64_t prefix = 0;
      for (int l = 1; l <= depth; ++l) {
        const int shift = depth - l;
        const auto q = static_cast<std::uint8_t>(((r >> shift) & 1u) * 2 + ((c >> shift) & 1u));
        const std::uint8_t moved = active[static_cast<std::size_t>(l)] ? quadrant_permutation(seed, l, prefix)[q] : q;
        dr = dr * 2 + (moved >> 1);
        dc = dc * 2 + (moved & 1u);
        prefix = prefix * 4 + q;
      }
      forward[r * side + c] = static_cast<std::uint32_t>(dr * side + dc);
    }
  }
  return PermutationMap(std::move(forward));
}

inline PermutationMap build_permutation(const ScrambleSpec& spec) {
  const auto levels = spec.active_levels();
  return build_hierarchical_permutation(spec.image_side, levels, spec.seed);
}

inline PermutationMap invert(const PermutationMap& map) {
  std::vector<std::uint32_t> inv(map.size());
  for (std::size_t p = 0; p < map.size(); ++p) inv[map[p]] = static_cast<std::uint32_t>(p);
  return PermutationMap(std::move(inv));
}

// Moves pixels of every channel with the same spatial map.
// Accepts [C x H x W] or a batch [B x C x H x W].
template <class T>
Tensor<T> apply_scramble(const Tensor<T>& image, const PermutationMap& map) {
  if (image.rank() < 2) throw ShapeError("apply_scramble: expected [..., H, W], got " + to_string(image.shape()));
  const std::size_t hw = image.dim(image.rank() - 1) * image.dim(image.rank() - 2);
  if (hw != map.size())
    throw ShapeError("apply_scramble: image " + to_string(image.shape()) + " has " + std::to_string(hw) +
                     " positions, map has " + std::to_string(map.size()));
  Tensor<T> out(image.shape());
  const std::size_t planes = image.size() / hw;
  for (std::size_t k = 0; k < planes; ++k) {
    const T* src = image.data() + k * hw;
    T* dst = out.data() + k * hw;
    for (std::size_t p = 0; p < hw; ++p) dst[map[p]] = src[p];
  }
  return out;
}

// .pmap file layout: "PMAP" | u32 version | u32 size | size x u32 forward (LE).
inline constexpr std::uint32_t kPmapVersion = 1;

inline std::vector<std::uint8_t> serialize_map(const PermutationMap& map) {
  ByteWriter w;
  w.raw("PMAP");
  w.u32(kPmapVersion);
  w.u32(static_cast<std::uint32_t>(map.size()));
  for (auto d : map.forward()) w.u32(d);
  return std::move(w).take();
}

inline PermutationMap deserialize_map(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.remaining() < 4 || r.raw(4) != "PMAP") throw FormatError("pmap: bad magic");
  const auto version = r.u32();
  if (version != kPmapVersion) throw FormatError("pmap: unsupported version " + std::to_string(version));
  const auto n = r.u32();
  if (r.remaining() != std::size_t{n} * 4)
    throw FormatError("pmap: payload holds " + std::to_string(r.remaining()) + " bytes, expected " +
                      std::to_string(std::size_t{n} * 4));
  std::vector<std::uint32_t> forward(n);
  for (auto& d : forward) d = r.u32();
  try {
    return PermutationMap(std::move(forward));
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("pmap: ") + e.what());
  }
}

inline void save_map(const std::string& path, const PermutationMap& map) { write_file(path, serialize_map(map)); }
inline PermutationMap load_map(const std::string& path) { return deserialize_map(read_file(path)); }

// Index-visualization: each source position gets a color from its original
// coordinates, drawn at its destination. Returns [3 x side x side] in [0,1].
inline Tensor<float> map_legend(const PermutationMap& map) {
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(map.size()))));
  if (side * side != map.size()) throw ShapeError("map_legend: map is not square");
  Tensor<float> img({3, side, side});
  const std::size_t hw = side * side;
  for (std::size_t p = 0; p < hw; ++p) {
    const float u = static_cast<float>(p / side) / static_cast<float>(side - 1);
    const float v = static_cast<float>(p % side) / static_cast<float>(side - 1);
    const std::size_t d = map[p];
    img[d] = u;
    img[hw + d] = v;
    img[2 * hw + d] = 1.0f - 0.5f * (u + v);
  }
  return img;
}

}  // namespace hiercomp
