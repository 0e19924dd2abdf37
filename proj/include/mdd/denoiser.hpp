#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mdd/autodiff.hpp"
#include "mdd/schedule.hpp"
#include "mdd/tensor.hpp"

namespace mdd {

// Architecture hyperparameters. A spatial size of 1x1 selects vector mode:
// kernels become 1x1, there is no resampling, and bottleneck attention runs
// over per-domain feature chunks instead of spatial positions.
struct ModelConfig {
  int domains = 3;
  int channels = 8;  // data channels per domain, excluding the condition code
  int height = 1;
  int width = 1;
  int base_width = 128;
  std::vector<int> channel_mults{1, 1, 1};
  int blocks_per_level = 1;
  int groups = 8;
  int time_embed_dim = 128;
  int sinusoid_dim = 64;
  bool condition_code = false;

  bool image_mode() const { return height > 1 || width > 1; }
  int levels() const { return static_cast<int>(channel_mults.size()); }
  int level_width(int level) const { return base_width * channel_mults.at(static_cast<std::size_t>(level)); }
  int input_channels() const { return channels + (condition_code ? 1 : 0); }

  // Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;

  std::map<std::string, std::string> to_keys() const;
  static ModelConfig from_keys(const std::map<std::string, std::string>& keys);

  static ModelConfig vector_defaults(int domains = 3, int features = 8);
  static ModelConfig image_defaults(int domains = 3, int size = 32);
};

// Network inputs for a batch of B samples.
template <typename T>
struct NetworkInput {
  DomainArrays<T> x;                 // m arrays of [B, C, H, W]
  std::vector<TimestepVector> tvec;  // B entries of length m
  std::vector<std::uint8_t> codes;   // B*m condition flags, only with condition_code
};

template <typename T>
struct LossAndGradients {
  T loss{};
  std::vector<Tensor<T>> gradients;  // aligned with DenoiserModel::parameters()
};

// Noise-prediction network: per-domain encoders and decoders around a shared
// bottleneck on the channel-concatenated encoder outputs.
template <typename T>
class DenoiserModel {
 public:
  DenoiserModel(ModelConfig config, std::uint64_t seed, int max_step = kDefaultSteps);
  DenoiserModel(ModelConfig config, std::vector<Parameter<T>> params, int max_step);

  const ModelConfig& config() const { return config_; }
  int max_step() const { return max_step_; }

  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  const Parameter<T>& parameter(const std::string& name) const;
  std::size_t parameter_count() const;

  // Records the forward graph on `tape` and returns one output per domain.
  std::vector<Var<T>> build(Tape<T>& tape, const NetworkInput<T>& input) const;

  DomainArrays<T> forward(const NetworkInput<T>& input) const;

  // `loss_mask` is [B, m]; the loss is the mean squared error over selected
  // slots and all their elements.
  LossAndGradients<T> loss_and_gradients(const NetworkInput<T>& input, const DomainArrays<T>& eps_target,
                                         const Tensor<T>& loss_mask) const;

  template <typename U>
  DenoiserModel<U> cast() const {
    std::vector<Parameter<U>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back({p.name, p.value.template cast<U>()});
    return DenoiserModel<U>(config_, std::move(out), max_step_);
  }

 private:
  void validate_input(const NetworkInput<T>& input) const;

  ModelConfig config_;
  int max_step_;
  std::vector<Parameter<T>> params_;
  std::map<std::string, int> index_;
};

// Sinusoidal embedding of integer timesteps; returns [B, dim, 1, 1].
template <typename T>
Tensor<T> sinusoidal_embedding(const std::vector<int>& timesteps, int dim);

}  // namespace mdd
