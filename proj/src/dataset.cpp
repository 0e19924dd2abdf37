#include "mdd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace mdd {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double wrap_unit(double h) {
  double r = std::fmod(h, 1.0);
  if (r < 0.0) r += 1.0;
  return r >= 1.0 ? 0.0 : r;
}

double wrap_angle(double a) {
  double r = std::fmod(a, kTwoPi);
  if (r < 0.0) r += kTwoPi;
  return r >= kTwoPi ? 0.0 : r;
}

void check_domain(int domain) {
  if (domain < 0 || domain >= kTriShapeDomains) throw std::out_of_range("domain index " + std::to_string(domain));
}

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  const double hh = wrap_unit(h) * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Object footprint in object-local coordinates (x toward the heading).
bool inside_shape(int domain, double lx, double ly, double r) {
  switch (domain) {
    case 0:  // square with the heading corner clipped
      return std::abs(lx) <= r && std::abs(ly) <= r && lx + ly <= 1.2 * r;
    case 1: {  // isosceles triangle with its apex on the heading
      const double ax = 1.25 * r, ay = 0.0;
      const double bx = -0.8 * r, by = 0.85 * r;
      const double cx = -0.8 * r, cy = -0.85 * r;
      auto edge = [&](double x0, double y0, double x1, double y1) {
        return (x1 - x0) * (ly - y0) - (y1 - y0) * (lx - x0);
      };
      const double e0 = edge(ax, ay, bx, by);
      const double e1 = edge(bx, by, cx, cy);
      const double e2 = edge(cx, cy, ax, ay);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
    default:  // disc with a notch toward the heading
      return lx * lx + ly * ly <= r * r && !(lx > 0.3 * r && std::abs(ly) < 0.3 * r);
  }
}

constexpr double kObjectRadius = 0.17;
constexpr double kPositionScale = 0.6;

std::string factors_to_text(const DataPoint& p) {
  const FactorVector& f = p.factors;
  std::string out = split_tag_name(p.tag);
  for (double v : {f.px, f.py, f.angle, f.obj_hue, f.floor_hue, f.wall1_hue, f.wall2_hue}) {
    out += ' ';
    out += format_double(v);
  }
  return out;
}

std::string point_key(std::size_t i) {
  std::string digits = std::to_string(i);
  return "point." + std::string(digits.size() < 8 ? 8 - digits.size() : 0, '0') + digits;
}

}  // namespace

void FactorVector::validate() const {
  auto in = [](double v, double lo, double hi, bool closed_hi) {
    return std::isfinite(v) && v >= lo && (closed_hi ? v <= hi : v < hi);
  };
  if (!in(px, -0.5, 0.5, true) || !in(py, -0.5, 0.5, true)) throw std::out_of_range("position outside [-0.5, 0.5]");
  if (!in(angle, 0.0, kTwoPi, false)) throw std::out_of_range("angle outside [0, 2pi)");
  for (double h : {obj_hue, floor_hue, wall1_hue, wall2_hue}) {
    if (!in(h, 0.0, 1.0, false)) throw std::out_of_range("hue outside [0, 1)");
  }
}

FactorVector FactorVector::sample(Rng& rng) {
  FactorVector f;
  f.px = rng.uniform(-0.5, 0.5);
  f.py = rng.uniform(-0.5, 0.5);
  f.angle = wrap_angle(rng.uniform(0.0, kTwoPi));
  f.obj_hue = wrap_unit(rng.uniform());
  f.floor_hue = wrap_unit(rng.uniform());
  f.wall1_hue = wrap_unit(rng.uniform());
  f.wall2_hue = wrap_unit(rng.uniform());
  return f;
}

const char* domain_name(int domain) {
  check_domain(domain);
  static constexpr const char* kNames[] = {"A", "B", "C"};
  return kNames[domain];
}

int parse_domain(char letter) {
  switch (letter) {
    case 'A': case 'a': return 0;
    case 'B': case 'b': return 1;
    case 'C': case 'c': return 2;
    default: throw std::invalid_argument(std::string("unknown domain '") + letter + "'");
  }
}

FactorVector domain_factors(int domain, const FactorVector& u) {
  check_domain(domain);
  FactorVector f = u;
  if (domain == 1) {
    f.px = -u.px;
    f.angle = wrap_angle(kTwoPi - u.angle);
    f.obj_hue = wrap_unit(u.obj_hue + 1.0 / 3.0);
  } else if (domain == 2) {
    f.py = -u.py;
    f.angle = wrap_angle(u.angle + std::numbers::pi);
    f.obj_hue = wrap_unit(u.obj_hue + 2.0 / 3.0);
  }
  return f;
}

FactorVector inverse_domain_factors(int domain, const FactorVector& f) {
  check_domain(domain);
  FactorVector u = f;
  if (domain == 1) {
    u.px = -f.px;
    u.angle = wrap_angle(kTwoPi - f.angle);
    u.obj_hue = wrap_unit(f.obj_hue - 1.0 / 3.0);
  } else if (domain == 2) {
    u.py = -f.py;
    u.angle = wrap_angle(f.angle - std::numbers::pi);
    u.obj_hue = wrap_unit(f.obj_hue - 2.0 / 3.0);
  }
  return u;
}

Tensor<float> render(int domain, const FactorVector& factors, int size) {
  check_domain(domain);
  if (size < 16) throw std::invalid_argument("render size must be at least 16");
  const Rgb floor = hsv_to_rgb(factors.floor_hue, 0.5, 0.55);
  const Rgb wall1 = hsv_to_rgb(factors.wall1_hue, 0.35, 0.8);
  const Rgb wall2 = hsv_to_rgb(factors.wall2_hue, 0.35, 0.8);
  const Rgb object = hsv_to_rgb(factors.obj_hue, 0.85, 0.95);
  const double cx = factors.px * kPositionScale;
  const double cy = factors.py * kPositionScale;
  const double ca = std::cos(factors.angle);
  const double sa = std::sin(factors.angle);

  Tensor<float> img({3, size, size});
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (int i = 0; i < size; ++i) {
    const double y = 0.5 - (i + 0.5) / size;
    for (int j = 0; j < size; ++j) {
      const double x = (j + 0.5) / size - 0.5;
      Rgb c = 3 * i >= 2 * size ? floor : (2 * j < size ? wall1 : wall2);
      const double dx = x - cx;
      const double dy = y - cy;
      if (inside_shape(domain, ca * dx + sa * dy, -sa * dx + ca * dy, kObjectRadius)) c = object;
      const std::size_t at = static_cast<std::size_t>(i) * size + j;
      img[at] = static_cast<float>(2.0 * c.r - 1.0);
      img[plane + at] = static_cast<float>(2.0 * c.g - 1.0);
      img[2 * plane + at] = static_cast<float>(2.0 * c.b - 1.0);
    }
  }
  return img;
}

Tensor<float> render_view(int domain, const FactorVector& u, int size) {
  return render(domain, domain_factors(domain, u), size);
}

Tensor<float> vector_mode(int domain, const FactorVector& u) {
  const FactorVector f = domain_factors(domain, u);
  return Tensor<float>({kVectorFeatures, 1, 1},
                       std::vector<float>{static_cast<float>(f.px), static_cast<float>(f.py),
                                          static_cast<float>(std::cos(f.angle)), static_cast<float>(std::sin(f.angle)),
                                          static_cast<float>(2.0 * f.obj_hue - 1.0),
                                          static_cast<float>(2.0 * f.floor_hue - 1.0),
                                          static_cast<float>(2.0 * f.wall1_hue - 1.0),
                                          static_cast<float>(2.0 * f.wall2_hue - 1.0)});
}

FactorVector decode_vector(int domain, const Tensor<float>& features) {
  if (features.size() != kVectorFeatures) throw std::invalid_argument("vector view must have 8 features");
  FactorVector f;
  f.px = std::clamp<double>(features[0], -0.5, 0.5);
  f.py = std::clamp<double>(features[1], -0.5, 0.5);
  f.angle = wrap_angle(std::atan2(static_cast<double>(features[3]), static_cast<double>(features[2])));
  auto hue = [](float v) { return wrap_unit((static_cast<double>(v) + 1.0) * 0.5); };
  f.obj_hue = hue(features[4]);
  f.floor_hue = hue(features[5]);
  f.wall1_hue = hue(features[6]);
  f.wall2_hue = hue(features[7]);
  return inverse_domain_factors(domain, f);
}

Tensor<float> make_view(ViewMode mode, int domain, const FactorVector& u, int size) {
  return mode == ViewMode::kImage ? render_view(domain, u, size) : vector_mode(domain, u);
}

Shape view_shape(ViewMode mode, int size) {
  return mode == ViewMode::kImage ? Shape{3, size, size} : Shape{kVectorFeatures, 1, 1};
}

const char* split_tag_name(SplitTag tag) {
  switch (tag) {
    case SplitTag::kFull: return "FULL";
    case SplitTag::kPairAB: return "PAIR_AB";
    case SplitTag::kPairBC: return "PAIR_BC";
    case SplitTag::kPairAC: return "PAIR_AC";
  }
  return "?";
}

SplitTag parse_split_tag(const std::string& s) {
  if (s == "FULL") return SplitTag::kFull;
  if (s == "PAIR_AB") return SplitTag::kPairAB;
  if (s == "PAIR_BC") return SplitTag::kPairBC;
  if (s == "PAIR_AC") return SplitTag::kPairAC;
  throw FormatError("unknown split tag " + s);
}

const char* pair_policy_name(PairPolicy p) { return p == PairPolicy::kEqualPairs ? "equal" : "bridge"; }

PairPolicy parse_pair_policy(const std::string& s) {
  if (s == "equal") return PairPolicy::kEqualPairs;
  if (s == "bridge") return PairPolicy::kBridgeABBC;
  throw std::invalid_argument("pair policy must be 'equal' or 'bridge', got '" + s + "'");
}

const char* view_mode_name(ViewMode m) { return m == ViewMode::kImage ? "image" : "vector"; }

ViewMode parse_view_mode(const std::string& s) {
  if (s == "image") return ViewMode::kImage;
  if (s == "vector") return ViewMode::kVector;
  throw std::invalid_argument("mode must be 'image' or 'vector', got '" + s + "'");
}

std::array<std::uint8_t, kTriShapeDomains> split_mask(SplitTag tag) {
  switch (tag) {
    case SplitTag::kFull: return {1, 1, 1};
    case SplitTag::kPairAB: return {1, 1, 0};
    case SplitTag::kPairBC: return {0, 1, 1};
    case SplitTag::kPairAC: return {1, 0, 1};
  }
  return {0, 0, 0};
}

SplitCounts split_counts(int n_points, double sup_fraction, PairPolicy policy) {
  if (n_points < 1) throw std::invalid_argument("dataset needs at least one point");
  if (!(sup_fraction >= 0.0 && sup_fraction <= 1.0)) {
    throw std::invalid_argument("supervised fraction must be in [0, 1]");
  }
  SplitCounts c;
  c.full = static_cast<int>(std::llround(sup_fraction * n_points));
  const int rest = n_points - c.full;
  const int kinds = policy == PairPolicy::kEqualPairs ? 3 : 2;
  if (rest > 0 && rest < kinds) {
    throw std::invalid_argument("cannot split " + std::to_string(rest) + " partial points over " +
                                std::to_string(kinds) + " pair kinds; choose a larger n_points");
  }
  const int base = rest / kinds;
  const int extra = rest % kinds;
  c.pair_ab = base + (extra > 0 ? 1 : 0);
  c.pair_bc = base + (extra > 1 ? 1 : 0);
  c.pair_ac = policy == PairPolicy::kEqualPairs ? base : 0;
  return c;
}

Dataset generate_dataset(const DatasetSpec& spec) {
  if (spec.mode == ViewMode::kImage && spec.size < 16) throw std::invalid_argument("image size must be at least 16");
  const SplitCounts counts = split_counts(spec.n_points, spec.sup_fraction, spec.pairs);
  std::vector<SplitTag> tags;
  tags.insert(tags.end(), static_cast<std::size_t>(counts.full), SplitTag::kFull);
  tags.insert(tags.end(), static_cast<std::size_t>(counts.pair_ab), SplitTag::kPairAB);
  tags.insert(tags.end(), static_cast<std::size_t>(counts.pair_bc), SplitTag::kPairBC);
  tags.insert(tags.end(), static_cast<std::size_t>(counts.pair_ac), SplitTag::kPairAC);
  Rng order(derive_seed(spec.seed, 0x7461677300ULL));
  std::shuffle(tags.begin(), tags.end(), order.engine());

  Rng factor_rng(derive_seed(spec.seed, 0x666163746fULL));
  Dataset ds;
  ds.spec = spec;
  ds.points.reserve(tags.size());
  for (SplitTag tag : tags) {
    DataPoint p;
    p.factors = FactorVector::sample(factor_rng);
    p.tag = tag;
    p.sup_mask = split_mask(tag);
    p.views.resize(kTriShapeDomains);
    for (int d = 0; d < kTriShapeDomains; ++d) {
      if (p.sup_mask[static_cast<std::size_t>(d)]) {
        p.views[static_cast<std::size_t>(d)] = make_view(spec.mode, d, p.factors, spec.size);
      }
    }
    ds.points.push_back(std::move(p));
  }
  return ds;
}

KeyValues dataset_manifest(const Dataset& ds) {
  const SplitCounts c = split_counts(ds.spec.n_points, ds.spec.sup_fraction, ds.spec.pairs);
  KeyValues kv{
      {"seed", std::to_string(ds.spec.seed)},
      {"n_points", std::to_string(ds.spec.n_points)},
      {"size", std::to_string(ds.spec.size)},
      {"sup_fraction", format_double(ds.spec.sup_fraction)},
      {"pair_policy", pair_policy_name(ds.spec.pairs)},
      {"mode", view_mode_name(ds.spec.mode)},
      {"count.full", std::to_string(c.full)},
      {"count.pair_ab", std::to_string(c.pair_ab)},
      {"count.pair_bc", std::to_string(c.pair_bc)},
      {"count.pair_ac", std::to_string(c.pair_ac)},
      {"remainder_policy", "leftover partial points go to the earliest pair kinds (AB, BC, AC)"},
      {"point_format", "tag px py angle obj_hue floor_hue wall1_hue wall2_hue"},
  };
  for (std::size_t i = 0; i < ds.points.size(); ++i) kv[point_key(i)] = factors_to_text(ds.points[i]);
  return kv;
}

std::string encode_dataset(const Dataset& ds) {
  ByteWriter w;
  w.raw(std::string_view(kDatasetMagic, 4));
  w.u32(kDatasetVersion);
  w.string(key_values_to_text(dataset_manifest(ds)));
  for (const auto& p : ds.points) {
    for (int d = 0; d < kTriShapeDomains; ++d) {
      if (p.sup_mask[static_cast<std::size_t>(d)]) w.f32s(p.views[static_cast<std::size_t>(d)].values());
    }
  }
  return w.bytes();
}

Dataset decode_dataset(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.raw(4) != std::string_view(kDatasetMagic, 4)) throw FormatError("not a dataset file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(version));
  const KeyValues kv = key_values_from_text(r.string());
  Dataset ds;
  ds.spec.seed = std::stoull(kv.at("seed"));
  ds.spec.n_points = std::stoi(kv.at("n_points"));
  ds.spec.size = std::stoi(kv.at("size"));
  ds.spec.sup_fraction = parse_double(kv.at("sup_fraction"));
  ds.spec.pairs = parse_pair_policy(kv.at("pair_policy"));
  ds.spec.mode = parse_view_mode(kv.at("mode"));
  const Shape shape = ds.view_shape();
  for (int i = 0; i < ds.spec.n_points; ++i) {
    std::istringstream line(kv.at(point_key(static_cast<std::size_t>(i))));
    std::string tag;
    std::array<std::string, 7> fields;
    line >> tag;
    for (auto& f : fields) line >> f;
    DataPoint p;
    p.tag = parse_split_tag(tag);
    p.sup_mask = split_mask(p.tag);
    p.factors = {parse_double(fields[0]), parse_double(fields[1]), parse_double(fields[2]), parse_double(fields[3]),
                 parse_double(fields[4]), parse_double(fields[5]), parse_double(fields[6])};
    p.factors.validate();
    p.views.resize(kTriShapeDomains);
    ds.points.push_back(std::move(p));
  }
  for (auto& p : ds.points) {
    for (int d = 0; d < kTriShapeDomains; ++d) {
      if (!p.sup_mask[static_cast<std::size_t>(d)]) continue;
      Tensor<float> v(shape);
      r.f32s(v.values());
      p.views[static_cast<std::size_t>(d)] = std::move(v);
    }
  }
  if (!r.at_end()) throw FormatError("trailing bytes after dataset views");
  return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) { write_file(path, encode_dataset(ds)); }

Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

double estimate_random_pair_mae(ViewMode mode, int size, int pairs_per_domain, std::uint64_t seed) {
  Rng rng(seed);
  double total = 0.0;
  for (int d = 0; d < kTriShapeDomains; ++d) {
    double acc = 0.0;
    for (int k = 0; k < pairs_per_domain; ++k) {
      const FactorVector u1 = FactorVector::sample(rng);
      const FactorVector u2 = FactorVector::sample(rng);
      const Tensor<float> a = make_view(mode, d, u1, size);
      const Tensor<float> b = make_view(mode, d, u2, size);
      double s = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) - b[i]) * 0.5;
      acc += s / static_cast<double>(a.size());
    }
    total += acc / pairs_per_domain;
  }
  return total / kTriShapeDomains;
}

double random_pair_mae_floor(ViewMode mode, int size) {
  if (mode == ViewMode::kVector) return kRandomPairMaeVector;
  if (size == 32) return kRandomPairMaeImage32;
  return estimate_random_pair_mae(mode, size, 1000, 2024);
}

}  // namespace mdd
