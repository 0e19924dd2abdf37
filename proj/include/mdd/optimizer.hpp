#pragma once

#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdd/autodiff.hpp"

namespace mdd {

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamOptions {
  double lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Reduce-on-plateau in "min" mode with a relative improvement threshold.
struct PlateauScheduler {
  int patience = 10;
  double factor = 0.5;
  double threshold = 1e-4;
  double best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;

  // Feeds one epoch's validation loss; returns true when the rate was reduced.
  bool step(double loss, double& lr);
};

template <typename T>
struct OptimizerState {
  AdamOptions options;
  PlateauScheduler plateau;
  long step = 0;
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;

  explicit OptimizerState(AdamOptions opts = {}, PlateauScheduler sched = {}) : options(opts), plateau(sched) {
    if (!(options.lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  }
};

// Applies one Adam update in place. Throws NonFiniteError, leaving parameters
// and state untouched, when any gradient is not finite.
template <typename T>
void optimizer_step(std::vector<Parameter<T>>& params, const std::vector<Tensor<T>>& gradients,
                    OptimizerState<T>& state);

}  // namespace mdd
