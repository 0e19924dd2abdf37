#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mdd/checkpoint.hpp"
#include "mdd/dataset.hpp"
#include "mdd/sampler.hpp"
#include "mdd/trainer.hpp"

namespace mdd {

// Mean absolute difference after mapping [-1, 1] to [0, 1].
double mae(const Tensor<float>& generated, const Tensor<float>& truth);

double mean_of(std::span<const double> v);
// Sample standard deviation; 0 for fewer than two values.
double stddev_of(std::span<const double> v);
// Rank correlation with average ranks for ties; NaN when either side is
// constant.
double spearman(std::span<const double> x, std::span<const double> y);

// Held-out ground truth: factors drawn from their own seed and rendered in
// every domain.
struct EvalSet {
  ViewMode mode = ViewMode::kVector;
  int size = 32;
  std::vector<FactorVector> factors;
  DomainArrays<float> views;  // m arrays [n, C, H, W]

  int count() const { return static_cast<int>(factors.size()); }
};

EvalSet make_eval_set(ViewMode mode, int size, int n, std::uint64_t seed);

struct TranslationOptions {
  std::vector<std::uint8_t> cond_mask{1, 0, 0};
  PhiSchedule phi = PhiSchedule::constant(0.0);
  SamplerKind sampler = SamplerKind::kDdim;
  int steps = 100;
  std::uint64_t seed = 0;
  int batch_size = 256;
  SigmaChoice sigma = SigmaChoice::kPosterior;
  bool literal_update = false;
  // Called per reverse step of every batch with the index of its first sample.
  std::function<void(const StepSnapshot&, int first_sample)> on_step;
};

struct TranslationOutcome {
  std::vector<double> domain_mae;  // NaN for condition domains
  double target_mae = 0.0;         // mean over target domains
  DomainArrays<float> generated;
  double seconds = 0.0;
};

TranslationOutcome evaluate_translation(const EpsilonModel& model, const NoiseSchedule& schedule, const EvalSet& set,
                                        const TranslationOptions& options);

// The generation-time phi each scheme was trained for: NoisyCond renoises
// conditions with the target's level, the others condition on clean views.
PhiSchedule native_phi(const TrainingScheme& scheme);

// One training cell of an experiment grid.
struct CellKey {
  std::string scheme;  // label such as MDD or UMM-CSGM-N
  double sup = 1.0;
  PairPolicy pairs = PairPolicy::kEqualPairs;
  std::uint64_t seed = 0;

  std::string id() const;  // directory-safe, e.g. MDD_N0.3_equal_s1
};

struct TrainedCell {
  Checkpoint checkpoint;
  std::string checkpoint_hash;
};

using CheckpointProvider = std::function<std::optional<TrainedCell>(const CellKey&)>;

// Looks up <root>/<cell id>/best.mddc; absent files yield nullopt.
CheckpointProvider directory_provider(std::filesystem::path root);

struct CellTrainingPlan {
  DatasetSpec data;  // sup, pairs and seed are set per cell
  ModelConfig arch;
  TrainConfig train;  // scheme and seed are set per cell
  int steps = kDefaultSteps;
  double beta_start = kDefaultBetaStart;
  double beta_end = kDefaultBetaEnd;
  std::uint64_t data_seed = 0;
  // When set, trained cells are stored as <cache>/<cell id>/best.mddc and
  // reused by later calls.
  std::optional<std::filesystem::path> cache_dir;
  std::function<void(const std::string&)> log;
};

// Trains cells on first request and memoizes them.
CheckpointProvider training_provider(CellTrainingPlan plan);

// Trains one cell; the checkpoint holds the best-validation weights.
TrainedCell train_cell(const CellTrainingPlan& plan, const CellKey& key,
                       std::vector<LossRecord>* curve = nullptr);

struct ProtocolCommon {
  ViewMode mode = ViewMode::kVector;
  int size = 32;
  int eval_points = 200;
  std::uint64_t eval_seed = 777;
  SamplerKind sampler = SamplerKind::kDdim;
  int steps = 100;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::uint64_t sample_seed = 0;
  int batch_size = 256;
  std::string config_hash;
};

struct ExperimentRow {
  std::string protocol;
  std::string scheme;
  double sup = 0.0;
  std::string pairs;
  std::string phi_family;
  double c = 0.0;
  std::string sampler;
  int steps = 0;
  std::uint64_t seed = 0;
  std::string source_set;
  std::string target_set;
  std::vector<double> domain_mae;  // NaN for source domains and missing cells
  double target_mae = 0.0;
  double runtime_s = 0.0;
  std::string status;  // ok or missing
  std::string config_hash;
  std::string checkpoint_hash;
};

struct ExperimentResult {
  std::vector<ExperimentRow> rows;
  std::vector<std::string> missing;  // cell ids without a checkpoint
};

std::string results_csv(const ExperimentResult& result);

// Mean and sample sd over seeds for rows that share every other key.
struct SummaryRow {
  std::string protocol, scheme, pairs, phi_family, sampler, source_set, target_set;
  double sup = 0.0;
  double c = 0.0;
  std::vector<double> domain_mean;
  double mean = 0.0;
  double sd = 0.0;
  int seeds = 0;
};

std::vector<SummaryRow> summarize(const ExperimentResult& result);
std::string summary_csv(const std::vector<SummaryRow>& rows);

struct SupervisionSweepConfig {
  ProtocolCommon common;
  std::vector<std::string> schemes{"MDD", "UMM-CSGM-N", "UMM-CSGM-O", "NoisyCond-N", "NoisyCond-O"};
  std::vector<double> sup_levels{1.0, 0.7, 0.4, 0.3};
  // Overrides the per-scheme native phi when set.
  std::optional<PhiSchedule> phi;
};

// A -> (B, C) for every scheme, supervision level and seed.
ExperimentResult run_supervision_sweep(const SupervisionSweepConfig& config, const CheckpointProvider& provider);

struct BridgeConfig {
  ProtocolCommon common;
  std::string scheme = "MDD";
  PhiSchedule phi = PhiSchedule::constant(0.0);
  int snapshots = 10;
  int grid_samples = 4;
};

// Estimates of the clean targets at one reverse step, compared with the
// ground truth.
struct BridgeSnapshot {
  std::uint64_t seed = 0;
  int index = 0;  // reverse-step index
  int t = 0;
  std::vector<double> domain_mae;  // x0 estimate vs truth; NaN for A
  Tensor<float> grid;  // image mode: estimates and L1 maps of the first samples
};

struct BridgeResult {
  ExperimentResult result;
  std::vector<BridgeSnapshot> snapshots;
};

// Reverse-step indices at which snapshots are taken: `count` values spread
// uniformly over [0, total - 1].
std::vector<int> snapshot_indices(int total, int count);

BridgeResult run_bridge(const BridgeConfig& config, const CheckpointProvider& provider);
std::string bridge_snapshots_csv(const std::vector<BridgeSnapshot>& snapshots);

struct PhiSweepConfig {
  ProtocolCommon common;
  std::string scheme = "MDD";
  double sup = 0.0;
  PairPolicy pairs = PairPolicy::kBridgeABBC;
  std::vector<PhiFamily> families{PhiFamily::kSkip, PhiFamily::kConstant, PhiFamily::kConstantFading};
  std::vector<double> c_grid{0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0};
};

// VANILLA once, then every family at every c.
ExperimentResult run_phi_sweep(const PhiSweepConfig& config, const CheckpointProvider& provider);

// Spearman correlation of c against MAE within one family, per seed.
std::vector<double> phi_family_spearman(const ExperimentResult& result, PhiFamily family);

// Long table (family, c, seed, mae) and an SVG line plot of mean MAE over c.
std::string phi_long_csv(const ExperimentResult& result);
std::string phi_sweep_svg(const ExperimentResult& result, double floor_mae);

}  // namespace mdd
