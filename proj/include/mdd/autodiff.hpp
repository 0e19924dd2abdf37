#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mdd/tensor.hpp"

namespace mdd {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
};

template <typename T>
class Tape;

// Handle to a node recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Reverse-mode tape. Nodes are appended in evaluation order; backward() walks
// them in reverse. A tape built with record=false evaluates values only.
template <typename T>
class Tape {
 public:
  // Receives the tape and the id of the node being differentiated.
  using Backward = std::function<void(Tape&, int)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Tensor<T> value);
  // Leaf whose gradient is collected into slot `slot` of the gradient list
  // returned by parameter_gradients().
  Var<T> parameter(const Parameter<T>& p, int slot);

  // Appends a computed node. `needs_grad` is true when any input needs it.
  Var<T> push(Tensor<T> value, bool needs_grad, Backward backward);

  const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  // Gradient buffer, zero-initialised on first access.
  Tensor<T>& grad(int id);
  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  // Seeds d(out)/d(out) = 1 for a one-element output and propagates.
  void backward(Var<T> out);

  // Gradients of parameter leaves, indexed by slot; untouched slots stay empty.
  std::vector<Tensor<T>> parameter_gradients(std::size_t slots) const;

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Backward backward;
    bool needs_grad = false;
    int param_slot = -1;
  };
  bool record_;
  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

enum class TokenLayout {
  kChannelMajor,  // [B, D, H, W]: tokens are spatial positions, features are channels
  kTokenMajor,    // [B, N*D, 1, 1]: tokens are contiguous feature chunks
};

namespace ops {

// 2-D convolution with square kernel, zero padding kernel/2. Weight is
// [out, in, k, k]; bias is [out].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, int stride = 1);

// Fully connected layer on [B, in, 1, 1]; weight [out, in].
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias);

template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, double eps = 1e-5);

template <typename T>
Var<T> silu(Var<T> x);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

// x [B, C, H, W] + bias [B, C, 1, 1] broadcast over space.
template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias);

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts);

template <typename T>
Var<T> slice_channels(Var<T> x, int start, int count);

template <typename T>
Var<T> reshape(Var<T> x, Shape shape);

template <typename T>
Var<T> upsample_nearest2x(Var<T> x);

// Single-head scaled dot-product attention; q, k, v share a shape.
template <typename T>
Var<T> dot_attention(Var<T> q, Var<T> k, Var<T> v, TokenLayout layout, int tokens);

// Mean squared error over the (sample, domain) pairs with weight 1 in
// `mask` ([B, m]); every element of a selected slot counts once.
template <typename T>
Var<T> masked_mse(std::span<const Var<T>> preds, std::span<const Tensor<T>> targets, const Tensor<T>& mask);

}  // namespace ops
}  // namespace mdd
