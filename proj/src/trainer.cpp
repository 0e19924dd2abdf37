#include "mdd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace mdd {

TrainingScheme TrainingScheme::mdd(LossScope scope) { return {SchemeKind::kMdd, FillPolicy::kPureNoise, scope}; }

TrainingScheme TrainingScheme::umm_csgm(FillPolicy fill, LossScope scope) { return {SchemeKind::kUmmCsgm, fill, scope}; }

TrainingScheme TrainingScheme::noisy_cond(FillPolicy fill, LossScope scope) {
  return {SchemeKind::kNoisyCond, fill, scope};
}

std::string TrainingScheme::label() const {
  const std::string suffix = fill == FillPolicy::kPureNoise ? "-N" : "-O";
  switch (kind) {
    case SchemeKind::kMdd: return "MDD";
    case SchemeKind::kUmmCsgm: return "UMM-CSGM" + suffix;
    case SchemeKind::kNoisyCond: return "NoisyCond" + suffix;
  }
  return "?";
}

void TrainingScheme::validate() const {
  if (kind == SchemeKind::kMdd && fill != FillPolicy::kPureNoise) {
    throw std::invalid_argument("MDD fills missing views with pure noise only");
  }
}

const char* scheme_kind_name(SchemeKind k) {
  switch (k) {
    case SchemeKind::kMdd: return "mdd";
    case SchemeKind::kUmmCsgm: return "ummcsgm";
    case SchemeKind::kNoisyCond: return "noisycond";
  }
  return "?";
}

SchemeKind parse_scheme_kind(const std::string& s) {
  if (s == "mdd") return SchemeKind::kMdd;
  if (s == "ummcsgm") return SchemeKind::kUmmCsgm;
  if (s == "noisycond") return SchemeKind::kNoisyCond;
  throw std::invalid_argument("scheme must be mdd, ummcsgm or noisycond, got '" + s + "'");
}

const char* fill_policy_name(FillPolicy f) { return f == FillPolicy::kPureNoise ? "noise" : "minus_one"; }

FillPolicy parse_fill_policy(const std::string& s) {
  if (s == "noise") return FillPolicy::kPureNoise;
  if (s == "minus_one") return FillPolicy::kMinusOne;
  throw std::invalid_argument("fill must be noise or minus_one, got '" + s + "'");
}

const char* loss_scope_name(LossScope s) { return s == LossScope::kAllDomains ? "all" : "supervised"; }

LossScope parse_loss_scope(const std::string& s) {
  if (s == "all") return LossScope::kAllDomains;
  if (s == "supervised") return LossScope::kSupervisedOnly;
  throw std::invalid_argument("loss scope must be all or supervised, got '" + s + "'");
}

TrainingScheme parse_scheme_label(const std::string& label) {
  if (label == "MDD") return TrainingScheme::mdd();
  if (label == "UMM-CSGM-N") return TrainingScheme::umm_csgm(FillPolicy::kPureNoise);
  if (label == "UMM-CSGM-O") return TrainingScheme::umm_csgm(FillPolicy::kMinusOne);
  if (label == "NoisyCond-N") return TrainingScheme::noisy_cond(FillPolicy::kPureNoise);
  if (label == "NoisyCond-O") return TrainingScheme::noisy_cond(FillPolicy::kMinusOne);
  throw std::invalid_argument("unknown scheme label '" + label + "'");
}

template <typename T>
void MultiDomainBatch<T>::validate() const {
  const int b = batch_size();
  const int m = domains();
  if (b < 1 || m < 1) throw std::invalid_argument("empty batch");
  if (sup_mask.size() != static_cast<std::size_t>(b) * m) throw std::invalid_argument("supervision mask must be B x m");
  for (const auto& x : x0) {
    if (x.rank() != 4 || x.dim(0) != b || x.shape() != x0[0].shape()) {
      throw std::invalid_argument("domain arrays must share one [B, C, H, W] shape");
    }
  }
}

MultiDomainBatch<float> make_batch(const Dataset& ds, std::span<const int> indices) {
  const int b = static_cast<int>(indices.size());
  if (b == 0) throw std::invalid_argument("empty batch");
  Shape shape = ds.view_shape();
  shape.insert(shape.begin(), b);
  MultiDomainBatch<float> batch;
  batch.x0.assign(kTriShapeDomains, Tensor<float>(shape, std::numeric_limits<float>::quiet_NaN()));
  batch.sup_mask.resize(static_cast<std::size_t>(b) * kTriShapeDomains);
  const std::size_t per = shape_size(ds.view_shape());
  for (int n = 0; n < b; ++n) {
    const DataPoint& p = ds.points.at(static_cast<std::size_t>(indices[static_cast<std::size_t>(n)]));
    for (int d = 0; d < kTriShapeDomains; ++d) {
      const bool has = p.sup_mask[static_cast<std::size_t>(d)] != 0;
      batch.sup_mask[static_cast<std::size_t>(n) * kTriShapeDomains + d] = has ? 1 : 0;
      if (has) std::copy_n(p.views[static_cast<std::size_t>(d)].data(), per, batch.x0[static_cast<std::size_t>(d)].data() + per * n);
    }
  }
  return batch;
}

std::vector<std::uint8_t> sample_condition_subset(std::span<const std::uint8_t> available, Rng& rng) {
  std::vector<int> idx;
  for (std::size_t d = 0; d < available.size(); ++d) {
    if (available[d]) idx.push_back(static_cast<int>(d));
  }
  std::vector<std::uint8_t> cond(available.size(), 0);
  const int k = static_cast<int>(idx.size());
  if (k < 2) return cond;
  // Subsets of the k available views encoded as bitmasks 1 .. 2^k - 2.
  const int pick = rng.uniform_int(1, (1 << k) - 2);
  for (int i = 0; i < k; ++i) {
    if (pick & (1 << i)) cond[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 1;
  }
  return cond;
}

template <typename T>
PreparedStep<T> prepare_step(const TrainingScheme& scheme, const MultiDomainBatch<T>& batch,
                             const NoiseSchedule& schedule, Rng& rng, const NoiseOverrides& overrides) {
  scheme.validate();
  batch.validate();
  const int b = batch.batch_size();
  const int m = batch.domains();
  const int max_t = schedule.steps();
  const Shape shape = batch.x0[0].shape();
  const std::size_t per = batch.x0[0].size() / static_cast<std::size_t>(b);

  if (overrides.timesteps && static_cast<int>(overrides.timesteps->size()) != m) {
    throw std::invalid_argument("timestep override must have one entry per domain");
  }
  if (overrides.condition_mask && static_cast<int>(overrides.condition_mask->size()) != m) {
    throw std::invalid_argument("condition override must have one entry per domain");
  }

  PreparedStep<T> out;
  out.input.x.assign(static_cast<std::size_t>(m), Tensor<T>(shape));
  out.target.assign(static_cast<std::size_t>(m), Tensor<T>(shape));
  out.loss_mask = Tensor<T>({b, m});
  if (scheme.uses_condition_code()) out.input.codes.assign(static_cast<std::size_t>(b) * m, 0);
  out.input.tvec.reserve(static_cast<std::size_t>(b));

  for (int n = 0; n < b; ++n) {
    std::vector<std::uint8_t> avail(static_cast<std::size_t>(m));
    for (int d = 0; d < m; ++d) avail[static_cast<std::size_t>(d)] = batch.available(n, d) ? 1 : 0;

    std::vector<std::uint8_t> cond(static_cast<std::size_t>(m), 0);
    if (scheme.kind == SchemeKind::kUmmCsgm) {
      if (overrides.condition_mask) {
        for (int d = 0; d < m; ++d) cond[static_cast<std::size_t>(d)] = (*overrides.condition_mask)[static_cast<std::size_t>(d)] && avail[static_cast<std::size_t>(d)];
      } else {
        cond = sample_condition_subset(avail, rng);
      }
    }

    std::vector<int> t(static_cast<std::size_t>(m));
    if (scheme.kind == SchemeKind::kMdd) {
      for (int d = 0; d < m; ++d) {
        t[static_cast<std::size_t>(d)] = overrides.timesteps ? (*overrides.timesteps)[static_cast<std::size_t>(d)] : rng.uniform_int(1, max_t);
      }
    } else {
      const int shared = overrides.timesteps ? overrides.timesteps->front() : rng.uniform_int(1, max_t);
      std::fill(t.begin(), t.end(), shared);
    }

    std::vector<int> tvec(static_cast<std::size_t>(m));
    for (int d = 0; d < m; ++d) {
      const auto ud = static_cast<std::size_t>(d);
      T* x_in = out.input.x[ud].data() + per * n;
      T* eps = out.target[ud].data() + per * n;
      for (std::size_t i = 0; i < per; ++i) eps[i] = static_cast<T>(rng.normal());

      T weight{0};
      if (!avail[ud]) {
        // Missing view: pure-noise level T, filled per scheme.
        tvec[ud] = max_t;
        if (scheme.fill == FillPolicy::kPureNoise) {
          std::copy_n(eps, per, x_in);
          if (scheme.loss_scope == LossScope::kAllDomains) weight = T{1};
        } else {
          std::fill_n(x_in, per, T{-1});
        }
      } else if (cond[ud]) {
        tvec[ud] = 0;
        std::copy_n(batch.x0[ud].data() + per * n, per, x_in);
        out.input.codes[static_cast<std::size_t>(n) * m + d] = 1;
      } else {
        tvec[ud] = t[ud];
        const NoiseCoefficients c = coefficients_at(schedule, t[ud]);
        const T* x0 = batch.x0[ud].data() + per * n;
        for (std::size_t i = 0; i < per; ++i) {
          x_in[i] = static_cast<T>(c.signal * x0[i] + c.noise * eps[i]);
        }
        weight = T{1};
      }
      out.loss_mask[static_cast<std::size_t>(n) * m + d] = weight;
    }
    out.input.tvec.emplace_back(std::move(tvec), max_t);
  }
  return out;
}

template <typename T>
LossAndGradients<T> training_step(const TrainingScheme& scheme, const MultiDomainBatch<T>& batch,
                                  const DenoiserModel<T>& model, const NoiseSchedule& schedule, Rng& rng,
                                  const NoiseOverrides& overrides) {
  if (scheme.uses_condition_code() != model.config().condition_code) {
    throw std::invalid_argument("model condition-code channel does not match scheme " + scheme.label());
  }
  PreparedStep<T> step = prepare_step(scheme, batch, schedule, rng, overrides);
  return model.loss_and_gradients(step.input, step.target, step.loss_mask);
}

template <typename T>
LossAndGradients<T> mdd_training_step(const MultiDomainBatch<T>& batch, const DenoiserModel<T>& model,
                                      const NoiseSchedule& schedule, Rng& rng, LossScope scope) {
  return training_step(TrainingScheme::mdd(scope), batch, model, schedule, rng);
}

template <typename T>
LossAndGradients<T> ummcsgm_training_step(const MultiDomainBatch<T>& batch, const DenoiserModel<T>& model,
                                          const NoiseSchedule& schedule, Rng& rng, FillPolicy fill) {
  return training_step(TrainingScheme::umm_csgm(fill), batch, model, schedule, rng);
}

template <typename T>
LossAndGradients<T> noisycond_training_step(const MultiDomainBatch<T>& batch, const DenoiserModel<T>& model,
                                            const NoiseSchedule& schedule, Rng& rng, FillPolicy fill) {
  return training_step(TrainingScheme::noisy_cond(fill), batch, model, schedule, rng);
}

bool is_validation_point(std::uint64_t seed, std::size_t index, double fraction) {
  const std::uint64_t h = derive_seed(seed, 0x76616c6964ULL, index);
  return static_cast<double>(h >> 11) * 0x1.0p-53 < fraction;
}

namespace {

double validation_loss(const TrainConfig& config, const Dataset& ds, const std::vector<int>& indices,
                       const DenoiserModel<float>& model, const NoiseSchedule& schedule) {
  // Same noise every epoch so that epochs are comparable.
  Rng rng(derive_seed(config.seed, 0x6576616cULL));
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(config.batch_size)) {
    const std::size_t end = std::min(indices.size(), start + static_cast<std::size_t>(config.batch_size));
    const std::span<const int> ids(indices.data() + start, end - start);
    const auto batch = make_batch(ds, ids);
    const auto step = prepare_step(config.scheme, batch, schedule, rng);
    const auto out = model.forward(step.input);
    Tape<float> tape(false);
    std::vector<Var<float>> preds;
    for (const auto& o : out) preds.push_back(tape.constant(o));
    const Var<float> loss = ops::masked_mse<float>(preds, step.target, step.loss_mask);
    total += static_cast<double>(loss.value()[0]) * static_cast<double>(ids.size());
    count += ids.size();
  }
  return total / static_cast<double>(count);
}

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& dataset, DenoiserModel<float>& model,
                  const NoiseSchedule& schedule, const std::function<void(const LossRecord&)>& on_record) {
  config.scheme.validate();
  if (config.epochs <= 0 && config.max_steps <= 0) throw std::invalid_argument("set epochs or max_steps");
  if (config.batch_size < 1) throw std::invalid_argument("batch size must be positive");
  if (model.max_step() != schedule.steps()) throw std::invalid_argument("model and schedule disagree on T");
  if (model.config().condition_code != config.scheme.uses_condition_code()) {
    throw std::invalid_argument("model condition-code channel does not match scheme " + config.scheme.label());
  }

  std::vector<int> train_ids;
  std::vector<int> valid_ids;
  for (std::size_t i = 0; i < dataset.points.size(); ++i) {
    (is_validation_point(config.seed, i, config.validation_fraction) ? valid_ids : train_ids).push_back(static_cast<int>(i));
  }
  if (train_ids.empty()) throw std::invalid_argument("no training points after the validation hold-out");

  OptimizerState<float> state(config.adam, PlateauScheduler{config.patience, config.factor});
  Rng shuffle_rng(derive_seed(config.seed, 0x73687566ULL));
  Rng noise_rng(derive_seed(config.seed, 0x6e6f697365ULL));
  TrainResult result{model, {}, std::numeric_limits<double>::infinity(), 0};
  auto record = [&](LossRecord r) {
    if (on_record) on_record(r);
    result.curve.push_back(std::move(r));
  };

  const std::string label = config.scheme.label();
  for (int epoch = 1; config.epochs <= 0 || epoch <= config.epochs; ++epoch) {
    std::shuffle(train_ids.begin(), train_ids.end(), shuffle_rng.engine());
    double epoch_sum = 0.0;
    int epoch_batches = 0;
    bool stop = false;
    for (std::size_t start = 0; start < train_ids.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(train_ids.size(), start + static_cast<std::size_t>(config.batch_size));
      const auto batch = make_batch(dataset, std::span<const int>(train_ids.data() + start, end - start));
      auto lg = training_step(config.scheme, batch, model, schedule, noise_rng);
      const long step = result.steps + 1;
      if (!std::isfinite(lg.loss)) {
        throw NonFiniteError("non-finite loss at step " + std::to_string(step) + " (lr " +
                             format_double(state.options.lr) + ", scheme " + label + ")");
      }
      optimizer_step(model.parameters(), lg.gradients, state);
      result.steps = step;
      epoch_sum += lg.loss;
      ++epoch_batches;
      record({step, epoch, "train", static_cast<double>(lg.loss), state.options.lr});
      if (config.max_steps > 0 && result.steps >= config.max_steps) {
        stop = true;
        break;
      }
    }
    const double monitor = valid_ids.empty() ? epoch_sum / std::max(epoch_batches, 1)
                                             : validation_loss(config, dataset, valid_ids, model, schedule);
    if (!std::isfinite(monitor)) {
      throw NonFiniteError("non-finite validation loss after step " + std::to_string(result.steps) + " (lr " +
                           format_double(state.options.lr) + ", scheme " + label + ")");
    }
    record({result.steps, epoch, "validation", monitor, state.options.lr});
    if (monitor < result.best_loss) {
      result.best_loss = monitor;
      result.best = model;
    }
    state.plateau.step(monitor, state.options.lr);
    if (stop) break;
  }
  return result;
}

std::string loss_curve_csv(const std::vector<LossRecord>& curve, const std::string& scheme_label) {
  std::ostringstream out;
  out << "step,epoch,scheme,split,loss,lr\n";
  for (const auto& r : curve) {
    out << r.step << ',' << r.epoch << ',' << scheme_label << ',' << r.split << ',' << format_double(r.loss) << ','
        << format_double(r.lr) << '\n';
  }
  return out.str();
}

#define MDD_INSTANTIATE_TRAINER(T)                                                                                  \
  template struct MultiDomainBatch<T>;                                                                              \
  template PreparedStep<T> prepare_step(const TrainingScheme&, const MultiDomainBatch<T>&, const NoiseSchedule&,    \
                                        Rng&, const NoiseOverrides&);                                               \
  template LossAndGradients<T> training_step(const TrainingScheme&, const MultiDomainBatch<T>&,                     \
                                             const DenoiserModel<T>&, const NoiseSchedule&, Rng&,                   \
                                             const NoiseOverrides&);                                                \
  template LossAndGradients<T> mdd_training_step(const MultiDomainBatch<T>&, const DenoiserModel<T>&,               \
                                                 const NoiseSchedule&, Rng&, LossScope);                            \
  template LossAndGradients<T> ummcsgm_training_step(const MultiDomainBatch<T>&, const DenoiserModel<T>&,           \
                                                     const NoiseSchedule&, Rng&, FillPolicy);                       \
  template LossAndGradients<T> noisycond_training_step(const MultiDomainBatch<T>&, const DenoiserModel<T>&,         \
                                                       const NoiseSchedule&, Rng&, FillPolicy);

MDD_INSTANTIATE_TRAINER(float)
MDD_INSTANTIATE_TRAINER(double)

}  // namespace mdd
