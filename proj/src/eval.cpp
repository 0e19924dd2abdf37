#include "mdd/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <tuple>

namespace mdd {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Tensor<float> slice_rows(const Tensor<float>& t, int start, int count) {
  Shape shape = t.shape();
  const std::size_t per = t.size() / static_cast<std::size_t>(shape[0]);
  shape[0] = count;
  Tensor<float> out(shape);
  std::copy_n(t.data() + per * static_cast<std::size_t>(start), per * static_cast<std::size_t>(count), out.data());
  return out;
}

std::string domain_letters(std::span<const std::uint8_t> mask, bool want) {
  std::string s;
  for (std::size_t d = 0; d < mask.size(); ++d) {
    if ((mask[d] != 0) == want) s += static_cast<char>('A' + d);
  }
  return s;
}

std::string csv_number(double v) { return std::isnan(v) ? std::string() : format_double(v); }

}  // namespace

double mae(const Tensor<float>& generated, const Tensor<float>& truth) {
  if (generated.shape() != truth.shape()) {
    throw std::invalid_argument("mae: shape " + shape_string(generated.shape()) + " vs " + shape_string(truth.shape()));
  }
  if (generated.empty()) throw std::invalid_argument("mae: empty arrays");
  double s = 0.0;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    s += std::abs(static_cast<double>(generated[i]) - static_cast<double>(truth[i]));
  }
  return 0.5 * s / static_cast<double>(generated.size());
}

double mean_of(std::span<const double> v) {
  if (v.empty()) return kNaN;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double mu = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
  if (x.size() < 2) return kNaN;
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double mx = mean_of(rx);
  const double my = mean_of(ry);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return kNaN;
  return sxy / std::sqrt(sxx * syy);
}

EvalSet make_eval_set(ViewMode mode, int size, int n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("evaluation set needs at least one point");
  EvalSet set;
  set.mode = mode;
  set.size = size;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) set.factors.push_back(FactorVector::sample(rng));
  Shape shape = view_shape(mode, size);
  const std::size_t per = shape_size(shape);
  shape.insert(shape.begin(), n);
  for (int d = 0; d < kTriShapeDomains; ++d) {
    Tensor<float> all(shape);
    for (int i = 0; i < n; ++i) {
      const Tensor<float> v = make_view(mode, d, set.factors[static_cast<std::size_t>(i)], size);
      std::copy_n(v.data(), per, all.data() + per * static_cast<std::size_t>(i));
    }
    set.views.push_back(std::move(all));
  }
  return set;
}

TranslationOutcome evaluate_translation(const EpsilonModel& model, const NoiseSchedule& schedule, const EvalSet& set,
                                        const TranslationOptions& options) {
  const int m = static_cast<int>(set.views.size());
  if (static_cast<int>(options.cond_mask.size()) != m) throw std::invalid_argument("condition mask must cover every domain");
  if (options.batch_size < 1) throw std::invalid_argument("batch size must be positive");
  const auto start_time = std::chrono::steady_clock::now();
  TranslationOutcome out;
  out.generated.assign(static_cast<std::size_t>(m), Tensor<float>(set.views[0].shape()));
  const std::size_t per = set.views[0].size() / static_cast<std::size_t>(set.count());
  for (int start = 0; start < set.count(); start += options.batch_size) {
    const int count = std::min(options.batch_size, set.count() - start);
    GenerationRequest req;
    req.cond_mask = options.cond_mask;
    req.phi = options.phi;
    req.sampler = options.sampler;
    req.ddim_steps = options.steps;
    req.seed = options.seed;
    req.sigma = options.sigma;
    req.literal_update = options.literal_update;
    req.sample_offset = static_cast<std::uint64_t>(start);
    req.x_cond.resize(static_cast<std::size_t>(m));
    for (int d = 0; d < m; ++d) {
      if (options.cond_mask[static_cast<std::size_t>(d)]) req.x_cond[static_cast<std::size_t>(d)] = slice_rows(set.views[static_cast<std::size_t>(d)], start, count);
    }
    if (options.on_step) req.on_step = [&, start](const StepSnapshot& s) { options.on_step(s, start); };
    const DomainArrays<float> gen = generate(req, model, schedule);
    for (int d = 0; d < m; ++d) {
      std::copy_n(gen[static_cast<std::size_t>(d)].data(), per * static_cast<std::size_t>(count),
                  out.generated[static_cast<std::size_t>(d)].data() + per * static_cast<std::size_t>(start));
    }
  }
  std::vector<double> targets;
  for (int d = 0; d < m; ++d) {
    if (options.cond_mask[static_cast<std::size_t>(d)]) {
      out.domain_mae.push_back(kNaN);
    } else {
      out.domain_mae.push_back(mae(out.generated[static_cast<std::size_t>(d)], set.views[static_cast<std::size_t>(d)]));
      targets.push_back(out.domain_mae.back());
    }
  }
  out.target_mae = mean_of(targets);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
  return out;
}

PhiSchedule native_phi(const TrainingScheme& scheme) {
  return scheme.kind == SchemeKind::kNoisyCond ? PhiSchedule::vanilla() : PhiSchedule::constant(0.0);
}

std::string CellKey::id() const {
  std::string label = scheme;
  return label + "_N" + format_double(sup) + "_" + (pairs == PairPolicy::kEqualPairs ? "equal" : "bridge") + "_s" +
         std::to_string(seed);
}

CheckpointProvider directory_provider(std::filesystem::path root) {
  return [root = std::move(root)](const CellKey& key) -> std::optional<TrainedCell> {
    const auto path = root / key.id() / "best.mddc";
    if (!std::filesystem::exists(path)) return std::nullopt;
    const std::string bytes = read_file(path);
    return TrainedCell{decode_checkpoint(bytes), sha256_hex(bytes)};
  };
}

TrainedCell train_cell(const CellTrainingPlan& plan, const CellKey& key, std::vector<LossRecord>* curve) {
  DatasetSpec spec = plan.data;
  spec.sup_fraction = key.sup;
  spec.pairs = key.pairs;
  spec.seed = derive_seed(plan.data_seed, key.seed, 0x64617461ULL);
  const Dataset ds = generate_dataset(spec);

  const TrainingScheme scheme = parse_scheme_label(key.scheme);
  ModelConfig arch = plan.arch;
  const Shape view = ds.view_shape();
  arch.channels = view[0];
  arch.height = view[1];
  arch.width = view[2];
  arch.condition_code = scheme.uses_condition_code();
  const NoiseSchedule schedule(plan.steps, plan.beta_start, plan.beta_end);
  DenoiserModel<float> model(arch, derive_seed(key.seed, 0x696e6974ULL), plan.steps);

  TrainConfig tc = plan.train;
  tc.scheme = scheme;
  tc.seed = key.seed;
  TrainResult result = train(tc, ds, model, schedule);
  if (curve) *curve = result.curve;

  KeyValues meta;
  meta["run.scheme"] = scheme.label();
  meta["run.loss_scope"] = loss_scope_name(scheme.loss_scope);
  meta["run.seed"] = std::to_string(key.seed);
  meta["run.steps"] = std::to_string(result.steps);
  meta["run.best_validation_loss"] = format_double(result.best_loss);
  meta["data.n_points"] = std::to_string(spec.n_points);
  meta["data.sup"] = format_double(spec.sup_fraction);
  meta["data.pairs"] = pair_policy_name(spec.pairs);
  meta["data.seed"] = std::to_string(spec.seed);
  meta["data.mode"] = view_mode_name(spec.mode);
  meta["data.size"] = std::to_string(spec.size);
  Checkpoint ck{std::move(result.best), schedule, std::move(meta)};
  const std::string hash = sha256_hex(encode_checkpoint(ck));
  return TrainedCell{std::move(ck), hash};
}

CheckpointProvider training_provider(CellTrainingPlan plan) {
  auto memo = std::make_shared<std::map<std::string, std::shared_ptr<TrainedCell>>>();
  return [plan = std::move(plan), memo](const CellKey& key) -> std::optional<TrainedCell> {
    const std::string id = key.id();
    if (auto it = memo->find(id); it != memo->end()) return *it->second;
    std::optional<std::filesystem::path> cached;
    if (plan.cache_dir) cached = *plan.cache_dir / id / "best.mddc";
    std::shared_ptr<TrainedCell> cell;
    if (cached && std::filesystem::exists(*cached)) {
      const std::string bytes = read_file(*cached);
      cell = std::make_shared<TrainedCell>(TrainedCell{decode_checkpoint(bytes), sha256_hex(bytes)});
      if (plan.log) plan.log("reusing " + cached->string());
    } else {
      const auto t0 = std::chrono::steady_clock::now();
      cell = std::make_shared<TrainedCell>(train_cell(plan, key));
      if (plan.log) {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        plan.log("trained " + id + " in " + format_double(std::round(s * 10.0) / 10.0) + " s");
      }
      if (cached) {
        std::filesystem::create_directories(cached->parent_path());
        save_checkpoint(*cached, cell->checkpoint);
      }
    }
    memo->emplace(id, cell);
    return *cell;
  };
}

namespace {

ExperimentRow base_row(const std::string& protocol, const CellKey& key, const ProtocolCommon& common,
                       const PhiSchedule& phi, std::span<const std::uint8_t> cond_mask) {
  ExperimentRow row;
  row.protocol = protocol;
  row.scheme = key.scheme;
  row.sup = key.sup;
  row.pairs = pair_policy_name(key.pairs);
  row.phi_family = phi_family_name(phi.family);
  row.c = phi.family == PhiFamily::kVanilla ? kNaN : phi.c;
  row.sampler = sampler_kind_name(common.sampler);
  row.steps = common.sampler == SamplerKind::kDdim ? common.steps : 0;
  row.seed = key.seed;
  row.source_set = domain_letters(cond_mask, true);
  row.target_set = domain_letters(cond_mask, false);
  row.config_hash = common.config_hash;
  return row;
}

ExperimentRow missing_row(ExperimentRow row, int domains) {
  row.status = "missing";
  row.domain_mae.assign(static_cast<std::size_t>(domains), kNaN);
  row.target_mae = kNaN;
  return row;
}

TranslationOptions options_for(const ProtocolCommon& common, const PhiSchedule& phi, std::uint64_t seed) {
  TranslationOptions o;
  o.cond_mask = {1, 0, 0};
  o.phi = phi;
  o.sampler = common.sampler;
  o.steps = common.steps;
  o.seed = derive_seed(common.sample_seed, seed, 0x73616d70ULL);
  o.batch_size = common.batch_size;
  return o;
}

void fill_row(ExperimentRow& row, const TranslationOutcome& outcome, const TrainedCell& cell) {
  row.status = "ok";
  row.domain_mae = outcome.domain_mae;
  row.target_mae = outcome.target_mae;
  row.runtime_s = outcome.seconds;
  row.checkpoint_hash = cell.checkpoint_hash;
}

}  // namespace

std::string results_csv(const ExperimentResult& result) {
  std::ostringstream out;
  out << "protocol,scheme,sup,pairs,phi,c,sampler,steps,seed,source,target";
  for (int d = 0; d < kTriShapeDomains; ++d) out << ",mae_" << domain_name(d);
  out << ",mae_targets,runtime_s,status,config_hash,checkpoint_hash\n";
  for (const auto& r : result.rows) {
    out << r.protocol << ',' << r.scheme << ',' << format_double(r.sup) << ',' << r.pairs << ',' << r.phi_family << ','
        << csv_number(r.c) << ',' << r.sampler << ',' << r.steps << ',' << r.seed << ',' << r.source_set << ','
        << r.target_set;
    for (int d = 0; d < kTriShapeDomains; ++d) {
      out << ',' << (static_cast<std::size_t>(d) < r.domain_mae.size() ? csv_number(r.domain_mae[static_cast<std::size_t>(d)]) : "");
    }
    out << ',' << csv_number(r.target_mae) << ',' << format_double(r.runtime_s) << ',' << r.status << ','
        << r.config_hash << ',' << r.checkpoint_hash << '\n';
  }
  return out.str();
}

std::vector<SummaryRow> summarize(const ExperimentResult& result) {
  using Key = std::tuple<std::string, std::string, double, std::string, std::string, double, std::string, std::string,
                         std::string>;
  std::map<Key, std::vector<const ExperimentRow*>> groups;
  std::vector<Key> order;
  for (const auto& r : result.rows) {
    if (r.status != "ok") continue;
    const Key k{r.protocol, r.scheme, r.sup, r.pairs, r.phi_family, std::isnan(r.c) ? -1.0 : r.c, r.sampler,
                r.source_set, r.target_set};
    auto [it, inserted] = groups.try_emplace(k);
    if (inserted) order.push_back(k);
    it->second.push_back(&r);
  }
  std::vector<SummaryRow> rows;
  for (const auto& k : order) {
    const auto& members = groups.at(k);
    SummaryRow s;
    s.protocol = members[0]->protocol;
    s.scheme = members[0]->scheme;
    s.sup = members[0]->sup;
    s.pairs = members[0]->pairs;
    s.phi_family = members[0]->phi_family;
    s.c = members[0]->c;
    s.sampler = members[0]->sampler;
    s.source_set = members[0]->source_set;
    s.target_set = members[0]->target_set;
    std::vector<double> values;
    for (const auto* r : members) values.push_back(r->target_mae);
    s.mean = mean_of(values);
    s.sd = stddev_of(values);
    s.seeds = static_cast<int>(members.size());
    for (std::size_t d = 0; d < members[0]->domain_mae.size(); ++d) {
      std::vector<double> dv;
      for (const auto* r : members) dv.push_back(r->domain_mae[d]);
      s.domain_mean.push_back(mean_of(dv));
    }
    rows.push_back(std::move(s));
  }
  return rows;
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream out;
  out << "protocol,scheme,sup,pairs,phi,c,sampler,source,target";
  for (int d = 0; d < kTriShapeDomains; ++d) out << ",mean_mae_" << domain_name(d);
  out << ",mean_mae,sd_mae,seeds\n";
  for (const auto& s : rows) {
    out << s.protocol << ',' << s.scheme << ',' << format_double(s.sup) << ',' << s.pairs << ',' << s.phi_family << ','
        << csv_number(s.c) << ',' << s.sampler << ',' << s.source_set << ',' << s.target_set;
    for (int d = 0; d < kTriShapeDomains; ++d) {
      out << ',' << (static_cast<std::size_t>(d) < s.domain_mean.size() ? csv_number(s.domain_mean[static_cast<std::size_t>(d)]) : "");
    }
    out << ',' << csv_number(s.mean) << ',' << format_double(s.sd) << ',' << s.seeds << '\n';
  }
  return out.str();
}

ExperimentResult run_supervision_sweep(const SupervisionSweepConfig& config, const CheckpointProvider& provider) {
  const auto& common = config.common;
  const EvalSet set = make_eval_set(common.mode, common.size, common.eval_points, common.eval_seed);
  ExperimentResult result;
  for (const auto& scheme : config.schemes) {
    const PhiSchedule phi = config.phi.value_or(native_phi(parse_scheme_label(scheme)));
    for (double sup : config.sup_levels) {
      for (std::uint64_t seed : common.seeds) {
        const CellKey key{scheme, sup, PairPolicy::kEqualPairs, seed};
        const TranslationOptions opts = options_for(common, phi, seed);
        ExperimentRow row = base_row("supervision", key, common, phi, opts.cond_mask);
        const auto cell = provider(key);
        if (!cell) {
          result.missing.push_back(key.id());
          result.rows.push_back(missing_row(std::move(row), kTriShapeDomains));
          continue;
        }
        const DenoiserEpsilon eps(cell->checkpoint.model);
        fill_row(row, evaluate_translation(eps, cell->checkpoint.schedule, set, opts), *cell);
        result.rows.push_back(std::move(row));
      }
    }
  }
  return result;
}

std::vector<int> snapshot_indices(int total, int count) {
  if (total < 1 || count < 1) throw std::invalid_argument("snapshot_indices: need positive counts");
  if (count > total) throw std::invalid_argument("more snapshots requested than reverse steps");
  std::vector<int> out;
  for (int k = 0; k < count; ++k) {
    out.push_back(count == 1 ? total - 1
                             : static_cast<int>(std::lround(static_cast<double>(k) * (total - 1) / (count - 1))));
  }
  return out;
}

namespace {

// Mean absolute channel error mapped to a grey level; brighter is worse.
Tensor<float> l1_map(const Tensor<float>& est, const Tensor<float>& truth) {
  const int h = est.dim(1);
  const int w = est.dim(2);
  Tensor<float> out({3, h, w});
  for (int i = 0; i < h * w; ++i) {
    double e = 0.0;
    for (int ch = 0; ch < 3; ++ch) e += std::abs(est[static_cast<std::size_t>(ch * h * w + i)] - truth[static_cast<std::size_t>(ch * h * w + i)]);
    const float v = static_cast<float>(std::clamp(e / 6.0, 0.0, 1.0) * 2.0 - 1.0);
    for (int ch = 0; ch < 3; ++ch) out[static_cast<std::size_t>(ch * h * w + i)] = v;
  }
  return out;
}

Tensor<float> sample_image(const Tensor<double>& batch, int index) {
  Tensor<double> one = take_sample(batch, index);
  Tensor<float> out(Shape(one.shape().begin() + 1, one.shape().end()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(std::clamp(one[i], -1.0, 1.0));
  return out;
}

}  // namespace

BridgeResult run_bridge(const BridgeConfig& config, const CheckpointProvider& provider) {
  const auto& common = config.common;
  const EvalSet set = make_eval_set(common.mode, common.size, common.eval_points, common.eval_seed);
  BridgeResult out;
  for (std::uint64_t seed : common.seeds) {
    const CellKey key{config.scheme, 0.0, PairPolicy::kBridgeABBC, seed};
    TranslationOptions opts = options_for(common, config.phi, seed);
    ExperimentRow row = base_row("bridge", key, common, config.phi, opts.cond_mask);
    const auto cell = provider(key);
    if (!cell) {
      out.result.missing.push_back(key.id());
      out.result.rows.push_back(missing_row(std::move(row), kTriShapeDomains));
      continue;
    }
    const int total = common.sampler == SamplerKind::kDdim ? common.steps : cell->checkpoint.schedule.steps();
    const std::vector<int> wanted = snapshot_indices(total, config.snapshots);
    const std::size_t per = set.views[0].size() / static_cast<std::size_t>(set.count());
    std::vector<BridgeSnapshot> snaps(wanted.size());
    std::vector<std::vector<double>> abs_sum(wanted.size(), std::vector<double>(kTriShapeDomains, 0.0));
    opts.on_step = [&](const StepSnapshot& s, int first) {
      const auto it = std::find(wanted.begin(), wanted.end(), s.index);
      if (it == wanted.end()) return;
      const auto k = static_cast<std::size_t>(it - wanted.begin());
      snaps[k].seed = seed;
      snaps[k].index = s.index;
      snaps[k].t = s.t;
      int count = 0;
      for (const auto& est : *s.x0_hat) count = std::max(count, est.empty() ? 0 : est.dim(0));
      for (int d = 0; d < kTriShapeDomains; ++d) {
        if (opts.cond_mask[static_cast<std::size_t>(d)]) continue;
        const auto& est = (*s.x0_hat)[static_cast<std::size_t>(d)];
        const float* truth = set.views[static_cast<std::size_t>(d)].data() + per * static_cast<std::size_t>(first);
        double acc = 0.0;
        for (std::size_t i = 0; i < est.size(); ++i) acc += std::abs(std::clamp(est[i], -1.0, 1.0) - truth[i]);
        abs_sum[k][static_cast<std::size_t>(d)] += 0.5 * acc;
      }
      if (set.mode == ViewMode::kImage && first == 0) {
        std::vector<Tensor<float>> tiles;
        const int shown = std::min(config.grid_samples, count);
        for (int n = 0; n < shown; ++n) {
          std::vector<Tensor<float>> maps;
          for (int d = 0; d < kTriShapeDomains; ++d) {
            if (opts.cond_mask[static_cast<std::size_t>(d)]) continue;
            const Tensor<float> est = sample_image((*s.x0_hat)[static_cast<std::size_t>(d)], n);
            const Tensor<float> truth = take_sample(set.views[static_cast<std::size_t>(d)], n).reshaped(est.shape());
            tiles.push_back(est);
            maps.push_back(l1_map(est, truth));
          }
          for (auto& mp : maps) tiles.push_back(std::move(mp));
        }
        snaps[k].grid = tile_images(tiles, static_cast<int>(tiles.size()));
      }
    };
    const TranslationOutcome outcome = evaluate_translation(DenoiserEpsilon(cell->checkpoint.model),
                                                            cell->checkpoint.schedule, set, opts);
    for (std::size_t k = 0; k < snaps.size(); ++k) {
      snaps[k].domain_mae.assign(kTriShapeDomains, kNaN);
      for (int d = 0; d < kTriShapeDomains; ++d) {
        if (!opts.cond_mask[static_cast<std::size_t>(d)]) {
          snaps[k].domain_mae[static_cast<std::size_t>(d)] = abs_sum[k][static_cast<std::size_t>(d)] / static_cast<double>(set.views[static_cast<std::size_t>(d)].size());
        }
      }
      out.snapshots.push_back(std::move(snaps[k]));
    }
    fill_row(row, outcome, *cell);
    out.result.rows.push_back(std::move(row));
  }
  return out;
}

std::string bridge_snapshots_csv(const std::vector<BridgeSnapshot>& snapshots) {
  std::ostringstream out;
  out << "seed,index,t";
  for (int d = 0; d < kTriShapeDomains; ++d) out << ",mae_" << domain_name(d);
  out << '\n';
  for (const auto& s : snapshots) {
    out << s.seed << ',' << s.index << ',' << s.t;
    for (double v : s.domain_mae) out << ',' << csv_number(v);
    out << '\n';
  }
  return out.str();
}

ExperimentResult run_phi_sweep(const PhiSweepConfig& config, const CheckpointProvider& provider) {
  const auto& common = config.common;
  const EvalSet set = make_eval_set(common.mode, common.size, common.eval_points, common.eval_seed);
  std::vector<PhiSchedule> phis{PhiSchedule::vanilla()};
  for (PhiFamily f : config.families) {
    for (double c : config.c_grid) phis.push_back(PhiSchedule{f, c});
  }
  ExperimentResult result;
  for (std::uint64_t seed : common.seeds) {
    const CellKey key{config.scheme, config.sup, config.pairs, seed};
    const auto cell = provider(key);
    if (!cell) result.missing.push_back(key.id());
    for (const auto& phi : phis) {
      phi.validate();
      const TranslationOptions opts = options_for(common, phi, seed);
      ExperimentRow row = base_row("phi", key, common, phi, opts.cond_mask);
      if (!cell) {
        result.rows.push_back(missing_row(std::move(row), kTriShapeDomains));
        continue;
      }
      const DenoiserEpsilon eps(cell->checkpoint.model);
      fill_row(row, evaluate_translation(eps, cell->checkpoint.schedule, set, opts), *cell);
      result.rows.push_back(std::move(row));
    }
  }
  return result;
}

std::vector<double> phi_family_spearman(const ExperimentResult& result, PhiFamily family) {
  std::map<std::uint64_t, std::pair<std::vector<double>, std::vector<double>>> per_seed;
  for (const auto& r : result.rows) {
    if (r.status != "ok" || r.phi_family != phi_family_name(family)) continue;
    per_seed[r.seed].first.push_back(r.c);
    per_seed[r.seed].second.push_back(r.target_mae);
  }
  std::vector<double> out;
  for (const auto& [seed, xy] : per_seed) out.push_back(spearman(xy.first, xy.second));
  return out;
}

std::string phi_long_csv(const ExperimentResult& result) {
  std::ostringstream out;
  out << "family,c,seed,mae\n";
  for (const auto& r : result.rows) {
    if (r.status != "ok") continue;
    out << r.phi_family << ',' << csv_number(r.c) << ',' << r.seed << ',' << format_double(r.target_mae) << '\n';
  }
  return out.str();
}

std::string phi_sweep_svg(const ExperimentResult& result, double floor_mae) {
  const auto summary = summarize(result);
  std::map<std::string, std::vector<std::pair<double, double>>> lines;
  std::optional<double> vanilla;
  double ymax = floor_mae;
  for (const auto& s : summary) {
    if (s.protocol != "phi") continue;
    ymax = std::max(ymax, s.mean);
    if (s.phi_family == "vanilla") {
      vanilla = s.mean;
    } else {
      lines[s.phi_family].emplace_back(s.c, s.mean);
    }
  }
  ymax = ymax > 0.0 ? ymax * 1.1 : 1.0;
  constexpr double kW = 640, kH = 400, kLeft = 60, kRight = 150, kTop = 20, kBottom = 50;
  auto px = [&](double c) { return kLeft + c * (kW - kLeft - kRight); };
  auto py = [&](double v) { return kTop + (1.0 - v / ymax) * (kH - kTop - kBottom); };
  auto num = [](double v) {
    std::ostringstream s;
    s.precision(4);
    s << v;
    return s.str();
  };
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\"" << py(0) << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(0) << "\" y2=\"" << py(ymax) << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double c = i / 5.0;
    const double v = ymax * i / 5.0;
    svg << "<text x=\"" << px(c) << "\" y=\"" << py(0) + 16 << "\" text-anchor=\"middle\">" << num(c) << "</text>\n";
    svg << "<text x=\"" << px(0) - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << num(v) << "</text>\n";
  }
  svg << "<text x=\"" << px(0.5) << "\" y=\"" << kH - 10 << "\" text-anchor=\"middle\">condition noise c</text>\n";
  svg << "<text x=\"15\" y=\"" << py(ymax / 2) << "\" transform=\"rotate(-90 15 " << py(ymax / 2) << ")\" text-anchor=\"middle\">MAE</text>\n";
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  int li = 0;
  auto legend = [&](const std::string& label, const std::string& style) {
    const double y = kTop + 18.0 * li;
    svg << "<line x1=\"" << kW - kRight + 10 << "\" y1=\"" << y << "\" x2=\"" << kW - kRight + 35 << "\" y2=\"" << y << "\" " << style << "/>\n";
    svg << "<text x=\"" << kW - kRight + 40 << "\" y=\"" << y + 4 << "\">" << label << "</text>\n";
    ++li;
  };
  for (auto& [family, pts] : lines) {
    std::sort(pts.begin(), pts.end());
    const std::string style = std::string("stroke=\"") + colors[li % 5] + "\" stroke-width=\"2\" fill=\"none\"";
    svg << "<polyline " << style << " points=\"";
    for (const auto& [c, v] : pts) svg << px(c) << ',' << py(v) << ' ';
    svg << "\"/>\n";
    legend(family, style);
  }
  if (vanilla) {
    const std::string style = "stroke=\"black\" stroke-dasharray=\"6 4\"";
    svg << "<line x1=\"" << px(0) << "\" y1=\"" << py(*vanilla) << "\" x2=\"" << px(1) << "\" y2=\"" << py(*vanilla) << "\" " << style << "/>\n";
    legend("vanilla", style);
  }
  const std::string floor_style = "stroke=\"grey\" stroke-dasharray=\"2 3\"";
  svg << "<line x1=\"" << px(0) << "\" y1=\"" << py(floor_mae) << "\" x2=\"" << px(1) << "\" y2=\"" << py(floor_mae) << "\" " << floor_style << "/>\n";
  legend("random pair", floor_style);
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace mdd
