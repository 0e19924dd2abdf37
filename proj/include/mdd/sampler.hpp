#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mdd/denoiser.hpp"
#include "mdd/io.hpp"
#include "mdd/optimizer.hpp"
#include "mdd/schedule.hpp"
#include "mdd/tensor.hpp"

namespace mdd {

enum class PhiFamily { kVanilla, kSkip, kConstant, kConstantFading };

// Condition-noise policy: maps the target timestep t to the level at which
// condition views are renoised. `c` is the condition-noise fraction, so
// CONSTANT(0) keeps conditions clean.
struct PhiSchedule {
  PhiFamily family = PhiFamily::kConstant;
  double c = 0.0;

  static PhiSchedule vanilla() { return {PhiFamily::kVanilla, 0.0}; }
  static PhiSchedule constant(double c) { return {PhiFamily::kConstant, c}; }
  static PhiSchedule skip(double c) { return {PhiFamily::kSkip, c}; }
  static PhiSchedule constant_fading(double c) { return {PhiFamily::kConstantFading, c}; }

  void validate() const;
  friend bool operator==(const PhiSchedule&, const PhiSchedule&) = default;
};

const char* phi_family_name(PhiFamily f);
PhiFamily parse_phi_family(const std::string& s);

// VANILLA: t. CONSTANT: round(cT). SKIP: max(0, t - round((1-c)T)).
// CONSTANT_FADING: min(t, round(cT)).
int phi_eval(const PhiSchedule& phi, int t, int max_step);

enum class SamplerKind { kDdpm, kDdim };
enum class SigmaChoice { kPosterior, kBeta };

const char* sampler_kind_name(SamplerKind k);
SamplerKind parse_sampler_kind(const std::string& s);

// Noise predictor seen by the samplers. Arrays are m tensors [B, C, H, W];
// `cond_mask` has one flag per domain.
class EpsilonModel {
 public:
  virtual ~EpsilonModel() = default;
  virtual DomainArrays<double> predict(const DomainArrays<double>& x, const std::vector<TimestepVector>& tvec,
                                       std::span<const std::uint8_t> cond_mask) const = 0;
};

// Runs a trained float network; fills the condition-code channel when the
// network has one.
class DenoiserEpsilon : public EpsilonModel {
 public:
  explicit DenoiserEpsilon(const DenoiserModel<float>& model) : model_(model) {}
  DomainArrays<double> predict(const DomainArrays<double>& x, const std::vector<TimestepVector>& tvec,
                               std::span<const std::uint8_t> cond_mask) const override;

 private:
  const DenoiserModel<float>& model_;
};

struct StepSnapshot {
  int index = 0;  // 0 for the first reverse step
  int t = 0;
  const DomainArrays<double>* x_t = nullptr;
  const DomainArrays<double>* x0_hat = nullptr;
};

struct GenerationRequest {
  DomainArrays<float> x_cond;  // only condition slots are read
  std::vector<std::uint8_t> cond_mask;
  PhiSchedule phi = PhiSchedule::constant(0.2);
  SamplerKind sampler = SamplerKind::kDdim;
  int ddim_steps = 100;
  std::uint64_t seed = 0;
  // Separate stream for condition renoising; defaults to `seed`.
  std::optional<std::uint64_t> cond_noise_seed;
  // Global index of the first sample, so per-sample streams do not depend on
  // how a set is split into batches.
  std::uint64_t sample_offset = 0;
  // Explicit initial target noise, m arrays shaped like the views.
  std::optional<DomainArrays<double>> x_T;
  bool literal_update = false;
  SigmaChoice sigma = SigmaChoice::kPosterior;
  bool clamp_output = true;
  std::function<void(const StepSnapshot&)> on_step;

  int domains() const { return static_cast<int>(cond_mask.size()); }
  void validate(int max_step) const;
};

// Reverse processes. Condition slots of the result are the request's x_cond
// unchanged; target slots are clamped to [-1, 1] when clamp_output is set.
// Throws NonFiniteError naming the step on any non-finite state.
DomainArrays<float> ddpm_generate(const GenerationRequest& request, const EpsilonModel& model,
                                  const NoiseSchedule& schedule);
DomainArrays<float> ddim_generate(const GenerationRequest& request, const EpsilonModel& model,
                                  const NoiseSchedule& schedule);
DomainArrays<float> generate(const GenerationRequest& request, const EpsilonModel& model,
                             const NoiseSchedule& schedule);

// tau_i = floor(i * T / S) for i = 0..S.
std::vector<int> ddim_timesteps(int max_step, int steps);

KeyValues generation_metadata(const GenerationRequest& request);

}  // namespace mdd
