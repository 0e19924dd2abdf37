#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mdd/dataset.hpp"
#include "mdd/denoiser.hpp"
#include "mdd/optimizer.hpp"
#include "mdd/rng.hpp"
#include "mdd/schedule.hpp"

namespace mdd {

enum class SchemeKind { kMdd, kUmmCsgm, kNoisyCond };
enum class FillPolicy { kPureNoise, kMinusOne };
enum class LossScope { kAllDomains, kSupervisedOnly };

struct TrainingScheme {
  SchemeKind kind = SchemeKind::kMdd;
  FillPolicy fill = FillPolicy::kPureNoise;
  LossScope loss_scope = LossScope::kAllDomains;

  static TrainingScheme mdd(LossScope scope = LossScope::kAllDomains);
  static TrainingScheme umm_csgm(FillPolicy fill, LossScope scope = LossScope::kSupervisedOnly);
  static TrainingScheme noisy_cond(FillPolicy fill, LossScope scope = LossScope::kSupervisedOnly);

  // MDD, UMM-CSGM-N, UMM-CSGM-O, NoisyCond-N, NoisyCond-O.
  std::string label() const;
  // Only UMM-CSGM appends the condition-code channel.
  bool uses_condition_code() const { return kind == SchemeKind::kUmmCsgm; }
  void validate() const;
};

const char* scheme_kind_name(SchemeKind k);
SchemeKind parse_scheme_kind(const std::string& s);
const char* fill_policy_name(FillPolicy f);
FillPolicy parse_fill_policy(const std::string& s);
const char* loss_scope_name(LossScope s);
LossScope parse_loss_scope(const std::string& s);
TrainingScheme parse_scheme_label(const std::string& label);

// Per-domain clean arrays for B samples plus a B x m availability mask.
// Slots of unavailable views hold placeholders that must never be read.
template <typename T>
struct MultiDomainBatch {
  DomainArrays<T> x0;
  std::vector<std::uint8_t> sup_mask;

  int batch_size() const { return x0.empty() ? 0 : x0[0].dim(0); }
  int domains() const { return static_cast<int>(x0.size()); }
  bool available(int sample, int domain) const {
    return sup_mask[static_cast<std::size_t>(sample) * x0.size() + static_cast<std::size_t>(domain)] != 0;
  }
  void validate() const;
};

// Placeholders are NaN so that any leak into the network input is caught.
MultiDomainBatch<float> make_batch(const Dataset& ds, std::span<const int> indices);

// Test hooks that pin otherwise random choices.
struct NoiseOverrides {
  // MDD: t_sup for every sample. Shared-t schemes use the first entry.
  std::optional<std::vector<int>> timesteps;
  // UMM-CSGM: condition flags (1 = clean condition) applied to every sample.
  std::optional<std::vector<std::uint8_t>> condition_mask;
};

template <typename T>
struct PreparedStep {
  NetworkInput<T> input;
  DomainArrays<T> target;  // the noise each slot should predict
  Tensor<T> loss_mask;     // [B, m]
};

// Builds network inputs for one step of `scheme`. Per sample the draws are, in
// order: condition subset (UMM-CSGM), timesteps, then one standard normal
// array per domain.
template <typename T>
PreparedStep<T> prepare_step(const TrainingScheme& scheme, const MultiDomainBatch<T>& batch,
                             const NoiseSchedule& schedule, Rng& rng, const NoiseOverrides& overrides = {});

template <typename T>
LossAndGradients<T> training_step(const TrainingScheme& scheme, const MultiDomainBatch<T>& batch,
                                  const DenoiserModel<T>& model, const NoiseSchedule& schedule, Rng& rng,
                                  const NoiseOverrides& overrides = {});

template <typename T>
LossAndGradients<T> mdd_training_step(const MultiDomainBatch<T>& batch, const DenoiserModel<T>& model,
                                      const NoiseSchedule& schedule, Rng& rng,
                                      LossScope scope = LossScope::kAllDomains);
template <typename T>
LossAndGradients<T> ummcsgm_training_step(const MultiDomainBatch<T>& batch, const DenoiserModel<T>& model,
                                          const NoiseSchedule& schedule, Rng& rng, FillPolicy fill);
template <typename T>
LossAndGradients<T> noisycond_training_step(const MultiDomainBatch<T>& batch, const DenoiserModel<T>& model,
                                            const NoiseSchedule& schedule, Rng& rng, FillPolicy fill);

// Uniform over the non-empty proper subsets of the available views; empty
// when fewer than two views are available.
std::vector<std::uint8_t> sample_condition_subset(std::span<const std::uint8_t> available, Rng& rng);

struct TrainConfig {
  TrainingScheme scheme;
  int epochs = 0;       // 0: bounded by max_steps only
  long max_steps = 0;   // 0: bounded by epochs only
  int batch_size = 32;
  AdamOptions adam;
  int patience = 10;
  double factor = 0.5;
  std::uint64_t seed = 0;
  double validation_fraction = 0.05;
};

struct LossRecord {
  long step = 0;
  int epoch = 0;
  std::string split;  // "train" or "validation"
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  DenoiserModel<float> best;
  std::vector<LossRecord> curve;
  double best_loss = 0.0;
  long steps = 0;
};

// Seed-stable hold-out: a point is in validation when its hash falls below
// `fraction`.
bool is_validation_point(std::uint64_t seed, std::size_t index, double fraction);

// Epoch loop with shuffled batches, per-epoch validation, and the plateau
// scheduler. `model` ends at the last step; the best-validation snapshot is
// returned. Throws NonFiniteError on a non-finite loss.
TrainResult train(const TrainConfig& config, const Dataset& dataset, DenoiserModel<float>& model,
                  const NoiseSchedule& schedule, const std::function<void(const LossRecord&)>& on_record = {});

std::string loss_curve_csv(const std::vector<LossRecord>& curve, const std::string& scheme_label);

}  // namespace mdd
