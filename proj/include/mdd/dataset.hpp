#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mdd/io.hpp"
#include "mdd/rng.hpp"
#include "mdd/tensor.hpp"

namespace mdd {

// TriShape: three domains (A square, B triangle, C notched disc) rendered
// from one shared factor vector. Background hues are shared; position, angle
// and object hue are inverted per domain by domain_factors().
inline constexpr int kTriShapeDomains = 3;
inline constexpr int kVectorFeatures = 8;

enum class ViewMode { kImage, kVector };

struct FactorVector {
  double px = 0.0;  // [-0.5, 0.5]
  double py = 0.0;  // [-0.5, 0.5]
  double angle = 0.0;  // [0, 2*pi)
  double obj_hue = 0.0;  // [0, 1)
  double floor_hue = 0.0;
  double wall1_hue = 0.0;
  double wall2_hue = 0.0;

  void validate() const;
  static FactorVector sample(Rng& rng);
  friend bool operator==(const FactorVector&, const FactorVector&) = default;
};

const char* domain_name(int domain);
int parse_domain(char letter);

// Per-domain semantic inversion of the shared factors:
//   A: identity
//   B: px -> -px, angle -> 2pi - angle, obj_hue -> obj_hue + 1/3 (mod 1)
//   C: py -> -py, angle -> angle + pi,  obj_hue -> obj_hue + 2/3 (mod 1)
// Background hues are never changed.
FactorVector domain_factors(int domain, const FactorVector& u);
FactorVector inverse_domain_factors(int domain, const FactorVector& f);

// Rasterizes already-mapped factors into a [3, size, size] array in [-1, 1].
Tensor<float> render(int domain, const FactorVector& factors, int size);

// Ground-truth view of shared factors `u` in `domain`.
Tensor<float> render_view(int domain, const FactorVector& u, int size);

// (px, py, cos, sin, obj, floor, wall1, wall2) after domain_factors, hues as
// 2*hue - 1; shaped [8, 1, 1].
Tensor<float> vector_mode(int domain, const FactorVector& u);
FactorVector decode_vector(int domain, const Tensor<float>& features);

Tensor<float> make_view(ViewMode mode, int domain, const FactorVector& u, int size);
Shape view_shape(ViewMode mode, int size);

enum class SplitTag { kFull, kPairAB, kPairBC, kPairAC };
enum class PairPolicy { kEqualPairs, kBridgeABBC };

const char* split_tag_name(SplitTag tag);
SplitTag parse_split_tag(const std::string& s);
const char* pair_policy_name(PairPolicy p);
PairPolicy parse_pair_policy(const std::string& s);
const char* view_mode_name(ViewMode m);
ViewMode parse_view_mode(const std::string& s);
std::array<std::uint8_t, kTriShapeDomains> split_mask(SplitTag tag);

struct SplitCounts {
  int full = 0;
  int pair_ab = 0;
  int pair_bc = 0;
  int pair_ac = 0;
};

// round(N * n) points are fully supervised; the remainder is split equally
// over the pair kinds, leftovers going to the earliest kinds (AB, BC, AC).
SplitCounts split_counts(int n_points, double sup_fraction, PairPolicy policy);

struct DatasetSpec {
  int n_points = 4000;
  int size = 32;
  double sup_fraction = 1.0;
  PairPolicy pairs = PairPolicy::kEqualPairs;
  std::uint64_t seed = 0;
  ViewMode mode = ViewMode::kImage;
};

struct DataPoint {
  FactorVector factors;  // ground truth, kept for evaluation even for missing views
  SplitTag tag = SplitTag::kFull;
  std::array<std::uint8_t, kTriShapeDomains> sup_mask{1, 1, 1};
  std::vector<Tensor<float>> views;  // empty tensor where sup_mask is 0
};

struct Dataset {
  DatasetSpec spec;
  std::vector<DataPoint> points;

  Shape view_shape() const { return mdd::view_shape(spec.mode, spec.size); }
};

Dataset generate_dataset(const DatasetSpec& spec);

inline constexpr char kDatasetMagic[4] = {'M', 'D', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

// Layout: magic "MDDS", u32 version, u32-length manifest text, then the
// present views of every point in point order as little-endian float32.
std::string encode_dataset(const Dataset& ds);
Dataset decode_dataset(std::string_view bytes);
void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);
KeyValues dataset_manifest(const Dataset& ds);

// Mean absolute distance (values mapped to [0, 1]) between views of
// independently sampled factors in the same domain, averaged over domains.
double estimate_random_pair_mae(ViewMode mode, int size, int pairs_per_domain, std::uint64_t seed);

// Frozen Monte-Carlo estimates (1000 pairs per domain, seed 2024).
inline constexpr double kRandomPairMaeVector = 0.31030772647449523;
inline constexpr double kRandomPairMaeImage32 = 0.16489158942524548;

double random_pair_mae_floor(ViewMode mode, int size);

}  // namespace mdd
