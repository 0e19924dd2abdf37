#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace mdd {

// Linear variance schedule with tables indexed by timestep. Index 0 is the
// clean-data convention (alpha_bar = 1, beta = 0); 1..T are diffusion steps.
// Tables are double precision; callers cast on gather.
class NoiseSchedule {
 public:
  NoiseSchedule(int steps, double beta_start, double beta_end);

  int steps() const { return steps_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  double beta(int t) const { return betas_.at(static_cast<std::size_t>(t)); }
  double alpha(int t) const { return alphas_.at(static_cast<std::size_t>(t)); }
  double alpha_bar(int t) const { return alpha_bars_.at(static_cast<std::size_t>(t)); }

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

  // Posterior variance of q(x_{t-1} | x_t, x_0); zero at t = 1.
  double posterior_variance(int t) const;

 private:
  int steps_;
  double beta_start_;
  double beta_end_;
  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
};

inline constexpr int kDefaultSteps = 1000;
inline constexpr double kDefaultBetaStart = 1e-4;
inline constexpr double kDefaultBetaEnd = 0.02;

NoiseSchedule make_linear_schedule(int steps = kDefaultSteps, double beta_start = kDefaultBetaStart,
                                   double beta_end = kDefaultBetaEnd);

// One noise level per domain.
class TimestepVector {
 public:
  TimestepVector() = default;
  TimestepVector(std::vector<int> entries, int max_step);

  static TimestepVector filled(int domains, int t, int max_step);

  std::size_t size() const { return entries_.size(); }
  int operator[](std::size_t i) const { return entries_[i]; }
  std::span<const int> entries() const { return entries_; }

  friend bool operator==(const TimestepVector&, const TimestepVector&) = default;

 private:
  std::vector<int> entries_;
};

// Entry i is T where mask[i] == 0 and t_sup[i] otherwise.
TimestepVector build_tvector(std::span<const std::uint8_t> mask, const TimestepVector& t_sup, int max_step);

struct NoiseCoefficients {
  double signal;  // sqrt(alpha_bar_t)
  double noise;   // sqrt(1 - alpha_bar_t)
};

std::vector<NoiseCoefficients> gather_coefficients(const NoiseSchedule& schedule, const TimestepVector& tvec);
NoiseCoefficients coefficients_at(const NoiseSchedule& schedule, int t);

}  // namespace mdd
