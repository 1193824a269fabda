#include <algorithm>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "hiercomp/scramble.hpp"
#include "test_util.hpp"

namespace hiercomp {
namespace {

using testing::quantized_image;

ScrambleSpec random_spec(Rng& rng, std::size_t side = 32) {
  ScrambleSpec s;
  switch (uniform_index(rng, 4)) {
    case 0: s = ScrambleSpec::identity(side); break;
    case 1: s = ScrambleSpec::top_down(1 + static_cast<int>(uniform_index(rng, 4)), side); break;
    case 2: s = ScrambleSpec::bottom_up(1 + static_cast<int>(uniform_index(rng, 4)), side); break;
    default: s = ScrambleSpec::full(side); break;
  }
  s.seed = rng();
  return s;
}

TEST(Scramble, IdentityMapIsIdentity) {
  const auto map = build_permutation(ScrambleSpec::identity());
  ASSERT_EQ(map.size(), 1024u);
  for (std::size_t i = 0; i < map.size(); ++i) EXPECT_EQ(map[i], i);
}

TEST(Scramble, TopDownLevelOneOnFourByFourMatchesQuadtreeOracle) {
  for (std::uint64_t seed : {1ull, 7ull, 42ull, 12345ull}) {
    ScrambleSpec spec = ScrambleSpec::top_down(1, 4);
    spec.seed = seed;
    const auto map = build_permutation(spec);
    // Recover where each 2x2 quadrant went from its top-left pixel, then
    // check all 16 positions against the hand-built placement.
    std::array<std::size_t, 4> dest_quadrant{};
    for (std::size_t q = 0; q < 4; ++q) {
      const std::size_t corner = (q / 2) * 2 * 4 + (q % 2) * 2;
      const std::size_t d = map[corner];
      ASSERT_EQ((d / 4) % 2, 0u);
      ASSERT_EQ((d % 4) % 2, 0u);
      dest_quadrant[q] = (d / 4 / 2) * 2 + (d % 4) / 2;
    }
    std::set<std::size_t> distinct(dest_quadrant.begin(), dest_quadrant.end());
    ASSERT_EQ(distinct.size(), 4u);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 4; ++c) {
        const std::size_t q = (r / 2) * 2 + c / 2;
        const std::size_t er = (dest_quadrant[q] / 2) * 2 + r % 2;
        const std::size_t ec = (dest_quadrant[q] % 2) * 2 + c % 2;
        EXPECT_EQ(map[r * 4 + c], er * 4 + ec) << "seed " << seed << " pos " << r << "," << c;
      }
  }
  // At least one of a handful of seeds must actually move quadrants.
  bool moved = false;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    ScrambleSpec spec = ScrambleSpec::top_down(1, 4);
    spec.seed = seed;
    moved |= build_permutation(spec) != PermutationMap::identity(16);
  }
  EXPECT_TRUE(moved);
}

// Independent construction of the fully scrambled map by moving labelled
// pixels level by level, once coarse-to-fine and once fine-to-coarse.
// Each block's quadrant permutation is keyed by the block's original
// position, recovered from the label of the pixel currently inside it.
std::vector<std::uint32_t> sequential_full_map(std::size_t side, std::uint64_t seed, bool coarse_first) {
  const int depth = std::countr_zero(side);
  std::vector<std::uint32_t> label(side * side);  // label[position] = source index
  std::iota(label.begin(), label.end(), 0u);
  std::vector<int> order(static_cast<std::size_t>(depth));
  std::iota(order.begin(), order.end(), 1);
  if (!coarse_first) std::reverse(order.begin(), order.end());
  for (int l : order) {
    const std::size_t parent = side >> (l - 1), child = parent / 2;
    std::vector<std::uint32_t> next(label.size());
    for (std::size_t br = 0; br < side; br += parent)
      for (std::size_t bc = 0; bc < side; bc += parent) {
        // Original ancestor path of this block: from any source pixel in it.
        const std::uint32_t src = label[br * side + bc];
        const std::size_t sr = src / side, sc = src % side;
        std::uint64_t prefix = 0;
        for (int a = 1; a < l; ++a) {
          const int shift = depth - a;
          prefix = prefix * 4 + ((sr >> shift) & 1u) * 2 + ((sc >> shift) & 1u);
        }
        const auto perm = quadrant_permutation(seed, l, prefix);
        for (std::size_t q = 0; q < 4; ++q) {
          const std::size_t fr = br + (q / 2) * child, fc = bc + (q % 2) * child;
          const std::size_t tr = br + (perm[q] / 2) * child, tc = bc + (perm[q] % 2) * child;
          for (std::size_t r = 0; r < child; ++r)
            for (std::size_t c = 0; c < child; ++c)
              next[(tr + r) * side + tc + c] = label[(fr + r) * side + fc + c];
        }
      }
    label = std::move(next);
  }
  std::vector<std::uint32_t> forward(label.size());
  for (std::size_t pos = 0; pos < label.size(); ++pos) forward[label[pos]] = static_cast<std::uint32_t>(pos);
  return forward;
}

TEST(Scramble, TopDownAndBottomUpChainsShareTheFullEndpoint) {
  for (std::uint64_t seed : {kDefaultScrambleSeed, std::uint64_t{3}, std::uint64_t{99}}) {
    ScrambleSpec full = ScrambleSpec::full(32);
    full.seed = seed;
    const auto map = build_permutation(full);
    const auto td = sequential_full_map(32, seed, true);
    const auto bu = sequential_full_map(32, seed, false);
    EXPECT_TRUE(std::equal(td.begin(), td.end(), map.forward().begin()));
    EXPECT_TRUE(std::equal(bu.begin(), bu.end(), map.forward().begin()));
  }
}

TEST(Scramble, ChainsAreNested) {
  // TD k+1 agrees with TD k on where every level-k block lands.
  for (int k = 1; k < 4; ++k) {
    const auto a = build_permutation(ScrambleSpec::top_down(k));
    const auto b = build_permutation(ScrambleSpec::top_down(k + 1));
    const std::size_t block = 32 >> k;
    for (std::size_t p = 0; p < 1024; ++p) {
      EXPECT_EQ(a[p] / 32 / block, b[p] / 32 / block);
      EXPECT_EQ(a[p] % 32 / block, b[p] % 32 / block);
    }
  }
}

TEST(Scramble, ApplyPreservesConstantAndIdentity) {
  Rng rng(5);
  Tensor<float> constant({3, 32, 32}, 0.25f);
  const auto map = build_permutation(ScrambleSpec::full());
  EXPECT_EQ(apply_scramble(constant, map), constant);
  const auto img = quantized_image(rng, 3, 32);
  EXPECT_EQ(apply_scramble(img, PermutationMap::identity(1024)), img);
}

TEST(Scramble, ApplyMovesPixelsToForwardPositions) {
  Rng rng(11);
  const auto img = quantized_image(rng, 3, 32);
  const auto map = build_permutation(ScrambleSpec::bottom_up(2));
  const auto out = apply_scramble(img, map);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 1024; ++p) ASSERT_EQ(out[c * 1024 + map[p]], img[c * 1024 + p]);
}

TEST(Scramble, ApplyRejectsSizeMismatch) {
  Tensor<float> img({3, 16, 16});
  EXPECT_THROW(apply_scramble(img, PermutationMap::identity(1024)), ShapeError);
}

TEST(Scramble, InvertRoundTrips) {
  Rng rng(17);
  EXPECT_EQ(invert(PermutationMap::identity(64)), PermutationMap::identity(64));
  for (int trial = 0; trial < 20; ++trial) {
    const auto map = build_permutation(random_spec(rng));
    const auto inv = invert(map);
    for (std::size_t p = 0; p < map.size(); ++p) ASSERT_EQ(inv[map[p]], p);
    EXPECT_EQ(invert(inv), map);
    const auto img = quantized_image(rng, 3, 32);
    EXPECT_EQ(apply_scramble(apply_scramble(img, map), inv), img);
  }
}

TEST(Scramble, SerializationRoundTrip) {
  const auto id = PermutationMap::identity(1024);
  EXPECT_EQ(deserialize_map(serialize_map(id)), id);
  ScrambleSpec td3 = ScrambleSpec::top_down(3);
  td3.seed = 2024;
  const auto map = build_permutation(td3);
  const auto back = deserialize_map(serialize_map(map));
  ASSERT_EQ(back.size(), map.size());
  for (std::size_t i = 0; i < map.size(); ++i) EXPECT_EQ(back[i], map[i]);
}

TEST(Scramble, SerializationLayoutIsLittleEndian) {
  const auto bytes = serialize_map(PermutationMap(std::vector<std::uint32_t>{1, 0, 2}));
  const std::vector<std::uint8_t> expected{'P', 'M', 'A', 'P', 1, 0, 0, 0, 3, 0, 0, 0,
                                           1,   0,   0,   0,   0, 0, 0, 0, 2, 0, 0, 0};
  EXPECT_EQ(bytes, expected);
}

TEST(Scramble, MalformedFilesAreRejected) {
  auto bytes = serialize_map(build_permutation(ScrambleSpec::top_down(2)));
  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  EXPECT_THROW(deserialize_map(truncated), FormatError);
  auto header_only = bytes;
  header_only.resize(6);
  EXPECT_THROW(deserialize_map(header_only), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_map(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(deserialize_map(bad_version), FormatError);
  auto not_bijective = bytes;
  not_bijective[12] = not_bijective[16];
  not_bijective[13] = not_bijective[17];
  not_bijective[14] = not_bijective[18];
  not_bijective[15] = not_bijective[19];
  EXPECT_THROW(deserialize_map(not_bijective), FormatError);
}

TEST(Scramble, SpecValidation) {
  EXPECT_THROW(build_permutation({ScrambleScheme::Identity, 1}), std::invalid_argument);
  EXPECT_THROW(build_permutation({ScrambleScheme::Full, 4}), std::invalid_argument);
  EXPECT_THROW(build_permutation({ScrambleScheme::TopDown, 0}), std::invalid_argument);
  EXPECT_THROW(build_permutation({ScrambleScheme::BottomUp, 5}), std::invalid_argument);
  EXPECT_THROW(build_permutation({ScrambleScheme::TopDown, 1, 24}), std::invalid_argument);
  EXPECT_THROW(build_permutation({ScrambleScheme::TopDown, 3, 4}), std::invalid_argument);
  EXPECT_THROW(parse_scramble("td5"), std::invalid_argument);
  EXPECT_THROW(parse_scramble("xx"), std::invalid_argument);
  EXPECT_EQ(parse_scramble("bu3"), ScrambleSpec::bottom_up(3));
}

TEST(Scramble, ConditionTagsRoundTrip) {
  const auto all = all_scramble_conditions();
  ASSERT_EQ(all.size(), 10u);
  for (const auto& s : all) EXPECT_EQ(parse_scramble(s.tag()), s);
}

// Hand-rolled property sweep over random specs.
TEST(ScrambleProperties, RandomSpecs) {
  Rng rng(2718);
  for (int trial = 0; trial < 300; ++trial) {
    const auto spec = random_spec(rng);
    const auto map = build_permutation(spec);

    std::vector<std::uint32_t> sorted(map.forward().begin(), map.forward().end());
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) ASSERT_EQ(sorted[i], i);

    EXPECT_EQ(serialize_map(map), serialize_map(build_permutation(spec)));

    const auto img = quantized_image(rng, 3, 32);
    const auto out = apply_scramble(img, map);
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_EQ(testing::channel_sum(out, c), testing::channel_sum(img, c));
      std::vector<float> a(img.data() + c * 1024, img.data() + (c + 1) * 1024);
      std::vector<float> b(out.data() + c * 1024, out.data() + (c + 1) * 1024);
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      EXPECT_EQ(a, b);
    }

    if (spec.scheme == ScrambleScheme::TopDown) {
      const std::size_t block = 32 >> spec.level;
      for (std::size_t p = 0; p < 1024; ++p) {
        const std::size_t r = p / 32, c = p % 32;
        const std::size_t anchor = map[(r / block * block) * 32 + c / block * block];
        ASSERT_EQ(map[p], anchor + (r % block) * 32 + c % block);
      }
    }
    if (spec.scheme == ScrambleScheme::BottomUp) {
      const std::size_t block = std::size_t{1} << spec.level;
      for (std::size_t p = 0; p < 1024; ++p) {
        ASSERT_EQ(map[p] / 32 / block, p / 32 / block);
        ASSERT_EQ(map[p] % 32 / block, p % 32 / block);
      }
    }
  }
}

TEST(Scramble, LegendPlacesSourceColorsAtDestinations) {
  const auto map = build_permutation(ScrambleSpec::top_down(1));
  const auto legend = map_legend(map);
  ASSERT_EQ(legend.shape(), (Shape{3, 32, 32}));
  EXPECT_FLOAT_EQ(legend[map[0]], 0.0f);
  EXPECT_FLOAT_EQ(legend[1024 + map[31]], 1.0f);
}

}  // namespace
}  // namespace hiercomp
