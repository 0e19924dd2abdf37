#include "mdd/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mdd {

NoiseSchedule::NoiseSchedule(int steps, double beta_start, double beta_end)
    : steps_(steps), beta_start_(beta_start), beta_end_(beta_end) {
  if (steps < 1) throw std::invalid_argument("schedule needs at least one step, got " + std::to_string(steps));
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw std::invalid_argument("betas must satisfy 0 < beta_start <= beta_end < 1");
  }
  const auto n = static_cast<std::size_t>(steps);
  betas_.assign(n + 1, 0.0);
  alphas_.assign(n + 1, 1.0);
  alpha_bars_.assign(n + 1, 1.0);
  for (std::size_t t = 1; t <= n; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    betas_[t] = beta_start + (beta_end - beta_start) * frac;
    alphas_[t] = 1.0 - betas_[t];
    alpha_bars_[t] = alpha_bars_[t - 1] * alphas_[t];
  }
}

double NoiseSchedule::posterior_variance(int t) const {
  if (t < 1 || t > steps_) throw std::out_of_range("posterior variance timestep out of range");
  return (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t)) * beta(t);
}

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  return NoiseSchedule(steps, beta_start, beta_end);
}

TimestepVector::TimestepVector(std::vector<int> entries, int max_step) : entries_(std::move(entries)) {
  for (int t : entries_) {
    if (t < 0 || t > max_step) {
      throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(max_step) + "]");
    }
  }
}

TimestepVector TimestepVector::filled(int domains, int t, int max_step) {
  return TimestepVector(std::vector<int>(static_cast<std::size_t>(domains), t), max_step);
}

TimestepVector build_tvector(std::span<const std::uint8_t> mask, const TimestepVector& t_sup, int max_step) {
  if (mask.size() != t_sup.size()) {
    throw std::invalid_argument("mask has " + std::to_string(mask.size()) + " entries, timestep vector has " +
                                std::to_string(t_sup.size()));
  }
  std::vector<int> out(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] ? t_sup[i] : max_step;
  return TimestepVector(std::move(out), max_step);
}

NoiseCoefficients coefficients_at(const NoiseSchedule& schedule, int t) {
  if (t < 0 || t > schedule.steps()) throw std::out_of_range("timestep " + std::to_string(t) + " out of range");
  const double ab = schedule.alpha_bar(t);
  return {std::sqrt(ab), std::sqrt(1.0 - ab)};
}

std::vector<NoiseCoefficients> gather_coefficients(const NoiseSchedule& schedule, const TimestepVector& tvec) {
  std::vector<NoiseCoefficients> out;
  out.reserve(tvec.size());
  for (int t : tvec.entries()) out.push_back(coefficients_at(schedule, t));
  return out;
}

}  // namespace mdd
