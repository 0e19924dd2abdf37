#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mdd/dataset.hpp"

namespace mdd {
namespace {

FactorVector sample_factors(std::uint64_t seed) {
  Rng rng(seed);
  return FactorVector::sample(rng);
}

double angle_diff(double a, double b) {
  const double d = std::remainder(a - b, 2.0 * std::numbers::pi);
  return std::abs(d);
}

double hue_diff(double a, double b) {
  const double d = std::remainder(a - b, 1.0);
  return std::abs(d);
}

TEST(DomainFactors, InversionExamples) {
  FactorVector u;
  u.px = 0.3;
  u.py = -0.2;
  u.angle = 1.0;
  u.obj_hue = 0.5;
  u.floor_hue = 0.1;
  u.wall1_hue = 0.2;
  u.wall2_hue = 0.9;
  EXPECT_EQ(domain_factors(0, u), u);

  const FactorVector b = domain_factors(1, u);
  EXPECT_DOUBLE_EQ(b.px, -0.3);
  EXPECT_DOUBLE_EQ(b.py, -0.2);
  EXPECT_NEAR(angle_diff(b.angle, 2.0 * std::numbers::pi - 1.0), 0.0, 1e-12);
  EXPECT_NEAR(hue_diff(b.obj_hue, 0.5 + 1.0 / 3.0), 0.0, 1e-12);

  const FactorVector c = domain_factors(2, u);
  EXPECT_DOUBLE_EQ(c.px, 0.3);
  EXPECT_DOUBLE_EQ(c.py, 0.2);
  EXPECT_NEAR(angle_diff(c.angle, 1.0 + std::numbers::pi), 0.0, 1e-12);
  EXPECT_NEAR(hue_diff(c.obj_hue, 0.5 + 2.0 / 3.0), 0.0, 1e-12);

  for (const FactorVector& f : {b, c}) {
    EXPECT_EQ(f.floor_hue, u.floor_hue);
    EXPECT_EQ(f.wall1_hue, u.wall1_hue);
    EXPECT_EQ(f.wall2_hue, u.wall2_hue);
  }
}

TEST(DomainFactors, InverseUndoesForwardMap) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const FactorVector u = sample_factors(seed);
    for (int d = 0; d < kTriShapeDomains; ++d) {
      const FactorVector f = domain_factors(d, u);
      f.validate();
      const FactorVector back = inverse_domain_factors(d, f);
      EXPECT_NEAR(back.px, u.px, 1e-12);
      EXPECT_NEAR(back.py, u.py, 1e-12);
      EXPECT_NEAR(angle_diff(back.angle, u.angle), 0.0, 1e-12);
      EXPECT_NEAR(hue_diff(back.obj_hue, u.obj_hue), 0.0, 1e-12);
    }
    // B flips position and mirrors the angle, so applying it twice restores them.
    const FactorVector bb = domain_factors(1, domain_factors(1, u));
    EXPECT_NEAR(bb.px, u.px, 1e-12);
    EXPECT_NEAR(angle_diff(bb.angle, u.angle), 0.0, 1e-12);
  }
}

TEST(DomainFactors, NamesAndValidation) {
  EXPECT_STREQ(domain_name(0), "A");
  EXPECT_STREQ(domain_name(2), "C");
  EXPECT_EQ(parse_domain('B'), 1);
  EXPECT_THROW(parse_domain('D'), std::invalid_argument);
  FactorVector bad;
  bad.px = 0.7;
  EXPECT_THROW(bad.validate(), std::out_of_range);
  EXPECT_THROW(domain_factors(3, FactorVector{}), std::out_of_range);
}

TEST(VectorMode, FeatureLayout) {
  FactorVector u;
  u.px = 0.25;
  u.py = -0.1;
  u.angle = std::numbers::pi / 2.0;
  u.obj_hue = 0.75;
  u.floor_hue = 0.0;
  u.wall1_hue = 0.5;
  u.wall2_hue = 0.25;
  const Tensor<float> a = vector_mode(0, u);
  ASSERT_EQ(a.shape(), (Shape{kVectorFeatures, 1, 1}));
  EXPECT_FLOAT_EQ(a[0], 0.25f);
  EXPECT_FLOAT_EQ(a[1], -0.1f);
  EXPECT_NEAR(a[2], 0.0f, 1e-7);
  EXPECT_FLOAT_EQ(a[3], 1.0f);
  EXPECT_FLOAT_EQ(a[4], 0.5f);
  EXPECT_FLOAT_EQ(a[5], -1.0f);
  EXPECT_FLOAT_EQ(a[6], 0.0f);
  EXPECT_FLOAT_EQ(a[7], -0.5f);

  const Tensor<float> b = vector_mode(1, u);
  EXPECT_FLOAT_EQ(b[0], -0.25f);
  EXPECT_FLOAT_EQ(b[3], -1.0f);
  EXPECT_FLOAT_EQ(b[5], a[5]);
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_GE(b[i], -1.0f);
    EXPECT_LE(b[i], 1.0f);
  }
}

TEST(VectorMode, DecodeRoundTrip) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const FactorVector u = sample_factors(seed);
    for (int d = 0; d < kTriShapeDomains; ++d) {
      const FactorVector back = decode_vector(d, vector_mode(d, u));
      EXPECT_NEAR(back.px, u.px, 1e-6);
      EXPECT_NEAR(back.py, u.py, 1e-6);
      EXPECT_NEAR(angle_diff(back.angle, u.angle), 0.0, 1e-6);
      EXPECT_NEAR(hue_diff(back.obj_hue, u.obj_hue), 0.0, 1e-6);
      EXPECT_NEAR(hue_diff(back.wall2_hue, u.wall2_hue), 0.0, 1e-6);
    }
  }
}

TEST(Render, ShapeRangeAndDeterminism) {
  const FactorVector u = sample_factors(3);
  for (int d = 0; d < kTriShapeDomains; ++d) {
    const Tensor<float> v = render_view(d, u, 32);
    ASSERT_EQ(v.shape(), (Shape{3, 32, 32}));
    for (float x : v.values()) {
      EXPECT_GE(x, -1.0f);
      EXPECT_LE(x, 1.0f);
    }
    const Tensor<float> again = render_view(d, u, 32);
    EXPECT_TRUE(std::equal(v.values().begin(), v.values().end(), again.values().begin()));
  }
  EXPECT_THROW(render(0, u, 8), std::invalid_argument);
  EXPECT_EQ(make_view(ViewMode::kVector, 0, u, 32).shape(), view_shape(ViewMode::kVector, 32));
}

TEST(Render, DomainsDifferForSameFactors) {
  const FactorVector u = sample_factors(11);
  const Tensor<float> a = render_view(0, u, 32);
  const Tensor<float> b = render_view(1, u, 32);
  EXPECT_FALSE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
}

TEST(Render, SecondWallHueOnlyTouchesItsRegion) {
  constexpr int kSize = 32;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    FactorVector u = sample_factors(seed);
    const Tensor<float> before = render_view(0, u, kSize);
    u.wall2_hue = std::fmod(u.wall2_hue + 0.5, 1.0);
    const Tensor<float> after = render_view(0, u, kSize);
    int changed = 0;
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < kSize; ++i) {
        for (int j = 0; j < kSize; ++j) {
          const std::size_t k = (static_cast<std::size_t>(c) * kSize + i) * kSize + j;
          if (before[k] == after[k]) continue;
          ++changed;
          EXPECT_GE(2 * j, kSize) << "row " << i << " col " << j;
          EXPECT_LT(3 * i, 2 * kSize) << "row " << i << " col " << j;
        }
      }
    }
    EXPECT_GT(changed, 0);
  }
}

TEST(SplitCounts, Examples) {
  const SplitCounts eq = split_counts(100, 0.4, PairPolicy::kEqualPairs);
  EXPECT_EQ(eq.full, 40);
  EXPECT_EQ(eq.pair_ab, 20);
  EXPECT_EQ(eq.pair_bc, 20);
  EXPECT_EQ(eq.pair_ac, 20);

  const SplitCounts bridge = split_counts(100, 0.0, PairPolicy::kBridgeABBC);
  EXPECT_EQ(bridge.full, 0);
  EXPECT_EQ(bridge.pair_ab, 50);
  EXPECT_EQ(bridge.pair_bc, 50);
  EXPECT_EQ(bridge.pair_ac, 0);

  const SplitCounts all = split_counts(4000, 1.0, PairPolicy::kEqualPairs);
  EXPECT_EQ(all.full, 4000);
  EXPECT_EQ(all.pair_ab + all.pair_bc + all.pair_ac, 0);

  const SplitCounts odd = split_counts(101, 0.3, PairPolicy::kEqualPairs);
  EXPECT_EQ(odd.full, 30);
  EXPECT_EQ(odd.pair_ab, 24);
  EXPECT_EQ(odd.pair_bc, 24);
  EXPECT_EQ(odd.pair_ac, 23);
}

TEST(SplitCounts, RejectsInvalidInput) {
  EXPECT_THROW(split_counts(0, 1.0, PairPolicy::kEqualPairs), std::invalid_argument);
  EXPECT_THROW(split_counts(100, 1.5, PairPolicy::kEqualPairs), std::invalid_argument);
  EXPECT_THROW(split_counts(100, -0.1, PairPolicy::kEqualPairs), std::invalid_argument);
  // One leftover point cannot be shared across three pair kinds.
  EXPECT_THROW(split_counts(10, 0.9, PairPolicy::kEqualPairs), std::invalid_argument);
}

TEST(SplitTags, MasksAndNames) {
  EXPECT_EQ(split_mask(SplitTag::kFull), (std::array<std::uint8_t, 3>{1, 1, 1}));
  EXPECT_EQ(split_mask(SplitTag::kPairBC), (std::array<std::uint8_t, 3>{0, 1, 1}));
  EXPECT_EQ(split_mask(SplitTag::kPairAC), (std::array<std::uint8_t, 3>{1, 0, 1}));
  for (SplitTag t : {SplitTag::kFull, SplitTag::kPairAB, SplitTag::kPairBC, SplitTag::kPairAC}) {
    EXPECT_EQ(parse_split_tag(split_tag_name(t)), t);
  }
  EXPECT_EQ(parse_pair_policy(pair_policy_name(PairPolicy::kBridgeABBC)), PairPolicy::kBridgeABBC);
  EXPECT_EQ(parse_view_mode("vector"), ViewMode::kVector);
  EXPECT_THROW(parse_view_mode("audio"), std::invalid_argument);
}

DatasetSpec small_spec(ViewMode mode) {
  DatasetSpec s;
  s.n_points = 60;
  s.size = 16;
  s.sup_fraction = 0.4;
  s.seed = 9;
  s.mode = mode;
  return s;
}

TEST(Dataset, ViewsMatchFactorsAndMasks) {
  for (ViewMode mode : {ViewMode::kVector, ViewMode::kImage}) {
    const Dataset ds = generate_dataset(small_spec(mode));
    ASSERT_EQ(ds.points.size(), 60u);
    int full = 0;
    for (const auto& p : ds.points) {
      EXPECT_EQ(p.sup_mask, split_mask(p.tag));
      if (p.tag == SplitTag::kFull) ++full;
      for (int d = 0; d < kTriShapeDomains; ++d) {
        const auto& v = p.views[static_cast<std::size_t>(d)];
        if (!p.sup_mask[static_cast<std::size_t>(d)]) {
          EXPECT_TRUE(v.empty());
          continue;
        }
        const Tensor<float> expect = make_view(mode, d, p.factors, ds.spec.size);
        ASSERT_EQ(v.shape(), expect.shape());
        EXPECT_TRUE(std::equal(v.values().begin(), v.values().end(), expect.values().begin()));
      }
    }
    EXPECT_EQ(full, 24);
  }
}

TEST(Dataset, BitReproducibleAndRoundTrips) {
  const Dataset a = generate_dataset(small_spec(ViewMode::kImage));
  const Dataset b = generate_dataset(small_spec(ViewMode::kImage));
  const std::string bytes = encode_dataset(a);
  EXPECT_EQ(bytes, encode_dataset(b));
  EXPECT_EQ(bytes.substr(0, 4), "MDDS");

  const Dataset back = decode_dataset(bytes);
  EXPECT_EQ(encode_dataset(back), bytes);
  ASSERT_EQ(back.points.size(), a.points.size());
  for (std::size_t i = 0; i < a.points.size(); ++i) {
    EXPECT_EQ(back.points[i].tag, a.points[i].tag);
    EXPECT_EQ(back.points[i].factors, a.points[i].factors);
  }

  DatasetSpec other = small_spec(ViewMode::kImage);
  other.seed = 10;
  EXPECT_NE(encode_dataset(generate_dataset(other)), bytes);
}

TEST(Dataset, RejectsCorruptBytes) {
  std::string bytes = encode_dataset(generate_dataset(small_spec(ViewMode::kVector)));
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_dataset(bad_magic), FormatError);
  EXPECT_THROW(decode_dataset(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(decode_dataset(bytes + "junk"), FormatError);
}

TEST(Dataset, ManifestDescribesSpec) {
  const Dataset ds = generate_dataset(small_spec(ViewMode::kVector));
  const KeyValues kv = dataset_manifest(ds);
  EXPECT_EQ(kv.at("mode"), "vector");
  EXPECT_EQ(kv.at("n_points"), "60");
}

TEST(RandomPairFloor, VectorMatchesAnalyticValue) {
  // Independent evaluation of the same expectation by numerical integration.
  constexpr double kAnalytic = 0.309654349739001;
  const double est = estimate_random_pair_mae(ViewMode::kVector, 32, 20000, 5);
  EXPECT_NEAR(est, kAnalytic, 0.004);
  EXPECT_NEAR(kRandomPairMaeVector, kAnalytic, 0.004);
  EXPECT_EQ(random_pair_mae_floor(ViewMode::kVector, 32), kRandomPairMaeVector);
  EXPECT_EQ(random_pair_mae_floor(ViewMode::kImage, 32), kRandomPairMaeImage32);
}

}  // namespace
}  // namespace mdd
