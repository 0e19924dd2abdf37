#include "mdd/optimizer.hpp"

#include <cmath>

namespace mdd {

bool PlateauScheduler::step(double loss, double& lr) {
  if (loss < best * (1.0 - threshold)) {
    best = loss;
    bad_epochs = 0;
    return false;
  }
  if (++bad_epochs > patience) {
    lr *= factor;
    bad_epochs = 0;
    return true;
  }
  return false;
}

template <typename T>
void optimizer_step(std::vector<Parameter<T>>& params, const std::vector<Tensor<T>>& gradients,
                    OptimizerState<T>& state) {
  if (gradients.size() != params.size()) throw std::invalid_argument("gradient count does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (gradients[i].shape() != params[i].value.shape()) {
      throw std::invalid_argument("gradient shape mismatch for " + params[i].name);
    }
    if (!all_finite(gradients[i])) {
      throw NonFiniteError("non-finite gradient in " + params[i].name + " at optimizer step " +
                           std::to_string(state.step + 1));
    }
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.value.shape());
      state.second_moment.emplace_back(p.value.shape());
    }
  }
  ++state.step;
  const AdamOptions& o = state.options;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* w = params[i].value.data();
    T* m = state.first_moment[i].data();
    T* v = state.second_moment[i].data();
    const T* g = gradients[i].data();
    for (std::size_t j = 0; j < params[i].value.size(); ++j) {
      m[j] = static_cast<T>(o.beta1 * m[j] + (1.0 - o.beta1) * g[j]);
      v[j] = static_cast<T>(o.beta2 * v[j] + (1.0 - o.beta2) * g[j] * g[j]);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] = static_cast<T>(w[j] - o.lr * mhat / (std::sqrt(vhat) + o.eps));
    }
  }
}

template void optimizer_step<float>(std::vector<Parameter<float>>&, const std::vector<Tensor<float>>&,
                                    OptimizerState<float>&);
template void optimizer_step<double>(std::vector<Parameter<double>>&, const std::vector<Tensor<double>>&,
                                     OptimizerState<double>&);

}  // namespace mdd
