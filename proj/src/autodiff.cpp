#include "mdd/autodiff.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace mdd {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Tape<T>::parameter(const Parameter<T>& p, int slot) {
  Node node;
  node.value = p.value;
  node.needs_grad = record_;
  node.param_slot = slot;
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Tape<T>::push(Tensor<T> value, bool needs_grad, Backward backward) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = record_ && needs_grad;
  if (node.needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Tensor<T>& Tape<T>::grad(int id) {
  Node& node = nodes_[static_cast<std::size_t>(id)];
  if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape());
  return node.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> out) {
  if (!record_) throw std::logic_error("backward on a tape that does not record");
  if (value(out.id).size() != 1) throw std::invalid_argument("backward needs a scalar output");
  grad(out.id)[0] = T{1};
  for (int id = out.id; id >= 0; --id) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (node.backward && !node.grad.empty()) node.backward(*this, id);
  }
}

template <typename T>
std::vector<Tensor<T>> Tape<T>::parameter_gradients(std::size_t slots) const {
  std::vector<Tensor<T>> out(slots);
  for (const Node& node : nodes_) {
    if (node.param_slot < 0 || node.grad.empty()) continue;
    auto& dst = out.at(static_cast<std::size_t>(node.param_slot));
    if (dst.empty()) {
      dst = node.grad;
    } else {
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += node.grad[i];
    }
  }
  return out;
}

namespace ops {
namespace {

template <typename T>
bool any_needs(std::initializer_list<Var<T>> vars) {
  for (const auto& v : vars) {
    if (v.tape->needs_grad(v.id)) return true;
  }
  return false;
}

template <typename T>
void check_rank4(const Tensor<T>& t, const char* what) {
  if (t.rank() != 4) {
    throw std::invalid_argument(std::string(what) + " expects a rank-4 tensor, got " + shape_string(t.shape()));
  }
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shape " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
}

struct ConvGeometry {
  int in_ch, height, width, kernel, stride, pad, out_h, out_w;
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const int out_hw = g.out_h * g.out_w;
  for (int c = 0; c < g.in_ch; ++c) {
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        T* row = col + static_cast<std::size_t>((c * g.kernel + ki) * g.kernel + kj) * out_hw;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride + ki - g.pad;
          for (int ow = 0; ow < g.out_w; ++ow) {
            const int iw = ow * g.stride + kj - g.pad;
            const bool inside = ih >= 0 && ih < g.height && iw >= 0 && iw < g.width;
            row[oh * g.out_w + ow] =
                inside ? x[(static_cast<std::size_t>(c) * g.height + ih) * g.width + iw] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const int out_hw = g.out_h * g.out_w;
  for (int c = 0; c < g.in_ch; ++c) {
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        const T* row = col + static_cast<std::size_t>((c * g.kernel + ki) * g.kernel + kj) * out_hw;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride + ki - g.pad;
          if (ih < 0 || ih >= g.height) continue;
          for (int ow = 0; ow < g.out_w; ++ow) {
            const int iw = ow * g.stride + kj - g.pad;
            if (iw < 0 || iw >= g.width) continue;
            dx[(static_cast<std::size_t>(c) * g.height + ih) * g.width + iw] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

template <typename T>
T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

}  // namespace

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  check_rank4(xv, "linear");
  const int batch = xv.dim(0);
  const int out = wv.dim(0);
  const int in = wv.dim(1);
  if (xv.dim(1) * xv.dim(2) * xv.dim(3) != in || bias.value().size() != static_cast<std::size_t>(out)) {
    throw std::invalid_argument("linear: input " + shape_string(xv.shape()) + " vs weight " + shape_string(wv.shape()));
  }
  Tensor<T> y({batch, out, 1, 1});
  MatrixMap<T> ym(y.data(), batch, out);
  ym.noalias() = ConstMatrixMap<T>(xv.data(), batch, in) * ConstMatrixMap<T>(wv.data(), out, in).transpose();
  ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.value().data(), out);

  return x.tape->push(std::move(y), any_needs({x, weight, bias}), [=](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    ConstMatrixMap<T> gm(g.data(), batch, out);
    if (t.needs_grad(x.id)) {
      MatrixMap<T>(t.grad(x.id).data(), batch, in).noalias() +=
          gm * ConstMatrixMap<T>(t.value(weight.id).data(), out, in);
    }
    if (t.needs_grad(weight.id)) {
      MatrixMap<T>(t.grad(weight.id).data(), out, in).noalias() +=
          gm.transpose() * ConstMatrixMap<T>(t.value(x.id).data(), batch, in);
    }
    if (t.needs_grad(bias.id)) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(t.grad(bias.id).data(), out) += gm.colwise().sum();
    }
  });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, int stride) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  check_rank4(xv, "conv2d input");
  check_rank4(wv, "conv2d weight");
  const int kernel = wv.dim(2);
  if (wv.dim(1) != xv.dim(1) || wv.dim(3) != kernel || kernel % 2 == 0 || stride < 1) {
    throw std::invalid_argument("conv2d: input " + shape_string(xv.shape()) + " vs weight " + shape_string(wv.shape()));
  }
  if (kernel == 1 && stride == 1 && xv.dim(2) == 1 && xv.dim(3) == 1) {
    return linear(x, reshape(weight, {wv.dim(0), wv.dim(1)}), bias);
  }
  const int batch = xv.dim(0);
  const int out_ch = wv.dim(0);
  ConvGeometry geo{xv.dim(1), xv.dim(2), xv.dim(3), kernel, stride, kernel / 2, 0, 0};
  geo.out_h = (geo.height + 2 * geo.pad - kernel) / stride + 1;
  geo.out_w = (geo.width + 2 * geo.pad - kernel) / stride + 1;
  const int out_hw = geo.out_h * geo.out_w;
  const int col_rows = geo.in_ch * kernel * kernel;
  const std::size_t in_per = static_cast<std::size_t>(geo.in_ch) * geo.height * geo.width;
  const std::size_t out_per = static_cast<std::size_t>(out_ch) * out_hw;
  const bool pointwise = kernel == 1 && stride == 1;

  Tensor<T> y({batch, out_ch, geo.out_h, geo.out_w});
  AlignedVector<T> col(pointwise ? 0 : static_cast<std::size_t>(col_rows) * out_hw);
  ConstMatrixMap<T> wm(wv.data(), out_ch, col_rows);
  const T* b = bias.value().data();
  for (int n = 0; n < batch; ++n) {
    const T* xs = xv.data() + in_per * n;
    if (!pointwise) im2col(xs, geo, col.data());
    MatrixMap<T> ym(y.data() + out_per * n, out_ch, out_hw);
    ym.noalias() = wm * ConstMatrixMap<T>(pointwise ? xs : col.data(), col_rows, out_hw);
    for (int o = 0; o < out_ch; ++o) ym.row(o).array() += b[o];
  }

  return x.tape->push(std::move(y), any_needs({x, weight, bias}), [=](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xval = t.value(x.id);
    ConstMatrixMap<T> w(t.value(weight.id).data(), out_ch, col_rows);
    const bool need_x = t.needs_grad(x.id);
    const bool need_w = t.needs_grad(weight.id);
    const bool need_b = t.needs_grad(bias.id);
    AlignedVector<T> cbuf(pointwise ? 0 : static_cast<std::size_t>(col_rows) * out_hw);
    AlignedVector<T> dcol(need_x && !pointwise ? cbuf.size() : 0);
    for (int n = 0; n < batch; ++n) {
      ConstMatrixMap<T> gm(g.data() + out_per * n, out_ch, out_hw);
      const T* xs = xval.data() + in_per * n;
      if (need_w) {
        if (!pointwise) im2col(xs, geo, cbuf.data());
        MatrixMap<T>(t.grad(weight.id).data(), out_ch, col_rows).noalias() +=
            gm * ConstMatrixMap<T>(pointwise ? xs : cbuf.data(), col_rows, out_hw).transpose();
      }
      if (need_b) {
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(t.grad(bias.id).data(), out_ch) += gm.rowwise().sum();
      }
      if (need_x) {
        T* dx = t.grad(x.id).data() + in_per * n;
        if (pointwise) {
          MatrixMap<T>(dx, col_rows, out_hw).noalias() += w.transpose() * gm;
        } else {
          MatrixMap<T>(dcol.data(), col_rows, out_hw).noalias() = w.transpose() * gm;
          col2im_add(dcol.data(), geo, dx);
        }
      }
    }
  });
}

template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, double eps) {
  const Tensor<T>& xv = x.value();
  check_rank4(xv, "group_norm");
  const int batch = xv.dim(0);
  const int channels = xv.dim(1);
  const int hw = xv.dim(2) * xv.dim(3);
  if (groups < 1 || channels % groups != 0) {
    throw std::invalid_argument("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                                std::to_string(groups) + " groups");
  }
  if (gamma.value().size() != static_cast<std::size_t>(channels) || beta.value().size() != gamma.value().size()) {
    throw std::invalid_argument("group_norm: affine parameters do not match channel count");
  }
  const int per_group = channels / groups;
  const std::size_t group_size = static_cast<std::size_t>(per_group) * hw;
  Tensor<T> y(xv.shape());
  // normalised values are kept for the backward pass
  Tensor<T> xhat(xv.shape());
  std::vector<T> rstd(static_cast<std::size_t>(batch) * groups);
  const T* gm = gamma.value().data();
  const T* bt = beta.value().data();
  for (int n = 0; n < batch; ++n) {
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels + static_cast<std::size_t>(gi) * per_group) * hw;
      double mean = 0.0;
      for (std::size_t i = 0; i < group_size; ++i) mean += xv[base + i];
      mean /= static_cast<double>(group_size);
      double var = 0.0;
      for (std::size_t i = 0; i < group_size; ++i) {
        const double d = xv[base + i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(group_size);
      const double r = 1.0 / std::sqrt(var + eps);
      rstd[static_cast<std::size_t>(n) * groups + gi] = static_cast<T>(r);
      for (int c = 0; c < per_group; ++c) {
        const int ch = gi * per_group + c;
        for (int s = 0; s < hw; ++s) {
          const std::size_t i = base + static_cast<std::size_t>(c) * hw + s;
          xhat[i] = static_cast<T>((xv[i] - mean) * r);
          y[i] = xhat[i] * gm[ch] + bt[ch];
        }
      }
    }
  }

  return x.tape->push(std::move(y), any_needs({x, gamma, beta}),
                      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const T* gmv = t.value(gamma.id).data();
    const bool need_x = t.needs_grad(x.id);
    T* dgamma = t.needs_grad(gamma.id) ? t.grad(gamma.id).data() : nullptr;
    T* dbeta = t.needs_grad(beta.id) ? t.grad(beta.id).data() : nullptr;
    T* dx = need_x ? t.grad(x.id).data() : nullptr;
    for (int n = 0; n < batch; ++n) {
      for (int gi = 0; gi < groups; ++gi) {
        const std::size_t base =
            (static_cast<std::size_t>(n) * channels + static_cast<std::size_t>(gi) * per_group) * hw;
        double sum_dxhat = 0.0;
        double sum_dxhat_xhat = 0.0;
        for (int c = 0; c < per_group; ++c) {
          const int ch = gi * per_group + c;
          for (int s = 0; s < hw; ++s) {
            const std::size_t i = base + static_cast<std::size_t>(c) * hw + s;
            const double dxh = static_cast<double>(g[i]) * gmv[ch];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat[i];
            if (dgamma) dgamma[ch] += g[i] * xhat[i];
            if (dbeta) dbeta[ch] += g[i];
          }
        }
        if (!dx) continue;
        const double inv_n = 1.0 / static_cast<double>(group_size);
        const double r = rstd[static_cast<std::size_t>(n) * groups + gi];
        for (int c = 0; c < per_group; ++c) {
          const int ch = gi * per_group + c;
          for (int s = 0; s < hw; ++s) {
            const std::size_t i = base + static_cast<std::size_t>(c) * hw + s;
            const double dxh = static_cast<double>(g[i]) * gmv[ch];
            dx[i] += static_cast<T>(r * (dxh - inv_n * sum_dxhat - xhat[i] * inv_n * sum_dxhat_xhat));
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> silu(Var<T> x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * sigmoid(xv[i]);
  return x.tape->push(std::move(y), any_needs({x}), [=](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& in = t.value(x.id);
    Tensor<T>& dx = t.grad(x.id);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const T s = sigmoid(in[i]);
      dx[i] += g[i] * (s + in[i] * s * (T{1} - s));
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  check_same_shape(a.value(), b.value(), "add");
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return a.tape->push(std::move(y), any_needs({a, b}), [=](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    for (Var<T> v : {a, b}) {
      if (!t.needs_grad(v.id)) continue;
      Tensor<T>& d = t.grad(v.id);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& bv = bias.value();
  check_rank4(xv, "add_channel_bias");
  const int batch = xv.dim(0);
  const int channels = xv.dim(1);
  const int hw = xv.dim(2) * xv.dim(3);
  if (bv.size() != static_cast<std::size_t>(batch) * channels) {
    throw std::invalid_argument("add_channel_bias: bias " + shape_string(bv.shape()) + " vs input " +
                                shape_string(xv.shape()));
  }
  Tensor<T> y = xv;
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const T v = bv[static_cast<std::size_t>(n) * channels + c];
      T* row = y.data() + (static_cast<std::size_t>(n) * channels + c) * hw;
      for (int s = 0; s < hw; ++s) row[s] += v;
    }
  }
  return x.tape->push(std::move(y), any_needs({x, bias}), [=](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (t.needs_grad(x.id)) {
      Tensor<T>& dx = t.grad(x.id);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
    }
    if (t.needs_grad(bias.id)) {
      Tensor<T>& db = t.grad(bias.id);
      for (std::size_t nc = 0; nc < db.size(); ++nc) {
        const T* row = g.data() + nc * hw;
        T acc{0};
        for (int s = 0; s < hw; ++s) acc += row[s];
        db[nc] += acc;
      }
    }
  });
}

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: nothing to concatenate");
  const Tensor<T>& first = parts[0].value();
  check_rank4(first, "concat_channels");
  const int batch = first.dim(0);
  const int hw = first.dim(2) * first.dim(3);
  int channels = 0;
  std::vector<int> offsets;
  bool needs = false;
  for (const Var<T>& p : parts) {
    const Tensor<T>& v = p.value();
    if (v.rank() != 4 || v.dim(0) != batch || v.dim(2) != first.dim(2) || v.dim(3) != first.dim(3)) {
      throw std::invalid_argument("concat_channels: incompatible shape " + shape_string(v.shape()));
    }
    offsets.push_back(channels);
    channels += v.dim(1);
    needs = needs || p.tape->needs_grad(p.id);
  }
  Tensor<T> y({batch, channels, first.dim(2), first.dim(3)});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor<T>& v = parts[k].value();
    const std::size_t chunk = static_cast<std::size_t>(v.dim(1)) * hw;
    for (int n = 0; n < batch; ++n) {
      std::copy_n(v.data() + chunk * n, chunk,
                  y.data() + (static_cast<std::size_t>(n) * channels + offsets[k]) * hw);
    }
  }
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  return parts[0].tape->push(std::move(y), needs, [=](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (!t.needs_grad(inputs[k].id)) continue;
      Tensor<T>& d = t.grad(inputs[k].id);
      const std::size_t chunk = d.size() / static_cast<std::size_t>(batch);
      for (int n = 0; n < batch; ++n) {
        const T* src = g.data() + (static_cast<std::size_t>(n) * channels + offsets[k]) * hw;
        T* dst = d.data() + chunk * n;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Var<T> slice_channels(Var<T> x, int start, int count) {
  const Tensor<T>& xv = x.value();
  check_rank4(xv, "slice_channels");
  const int batch = xv.dim(0);
  const int channels = xv.dim(1);
  const int hw = xv.dim(2) * xv.dim(3);
  if (start < 0 || count < 1 || start + count > channels) throw std::out_of_range("slice_channels: bad range");
  Tensor<T> y({batch, count, xv.dim(2), xv.dim(3)});
  const std::size_t chunk = static_cast<std::size_t>(count) * hw;
  for (int n = 0; n < batch; ++n) {
    std::copy_n(xv.data() + (static_cast<std::size_t>(n) * channels + start) * hw, chunk, y.data() + chunk * n);
  }
  return x.tape->push(std::move(y), any_needs({x}), [=](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& dx = t.grad(x.id);
    for (int n = 0; n < batch; ++n) {
      T* dst = dx.data() + (static_cast<std::size_t>(n) * channels + start) * hw;
      const T* src = g.data() + chunk * n;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> y = x.value().reshaped(std::move(shape));
  return x.tape->push(std::move(y), any_needs({x}), [=](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& dx = t.grad(x.id);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
  });
}

template <typename T>
Var<T> upsample_nearest2x(Var<T> x) {
  const Tensor<T>& xv = x.value();
  check_rank4(xv, "upsample_nearest2x");
  const int planes = xv.dim(0) * xv.dim(1);
  const int h = xv.dim(2);
  const int w = xv.dim(3);
  Tensor<T> y({xv.dim(0), xv.dim(1), 2 * h, 2 * w});
  for (int p = 0; p < planes; ++p) {
    const T* src = xv.data() + static_cast<std::size_t>(p) * h * w;
    T* dst = y.data() + static_cast<std::size_t>(p) * 4 * h * w;
    for (int i = 0; i < 2 * h; ++i) {
      for (int j = 0; j < 2 * w; ++j) dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
    }
  }
  return x.tape->push(std::move(y), any_needs({x}), [=](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& dx = t.grad(x.id);
    for (int p = 0; p < planes; ++p) {
      const T* src = g.data() + static_cast<std::size_t>(p) * 4 * h * w;
      T* dst = dx.data() + static_cast<std::size_t>(p) * h * w;
      for (int i = 0; i < 2 * h; ++i) {
        for (int j = 0; j < 2 * w; ++j) dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
      }
    }
  });
}

namespace {

// Token view of one sample as an N x D matrix.
template <typename T>
RowMatrix<T> gather_tokens(const T* data, TokenLayout layout, int tokens, int dim) {
  if (layout == TokenLayout::kTokenMajor) return ConstMatrixMap<T>(data, tokens, dim);
  return ConstMatrixMap<T>(data, dim, tokens).transpose();
}

template <typename T>
void scatter_tokens_add(const RowMatrix<T>& m, TokenLayout layout, int tokens, int dim, T* data) {
  if (layout == TokenLayout::kTokenMajor) {
    MatrixMap<T>(data, tokens, dim) += m;
  } else {
    MatrixMap<T>(data, dim, tokens) += m.transpose();
  }
}

}  // namespace

template <typename T>
Var<T> dot_attention(Var<T> q, Var<T> k, Var<T> v, TokenLayout layout, int tokens) {
  const Tensor<T>& qv = q.value();
  check_rank4(qv, "dot_attention");
  check_same_shape(qv, k.value(), "dot_attention keys");
  check_same_shape(qv, v.value(), "dot_attention values");
  const int batch = qv.dim(0);
  const std::size_t per = qv.size() / static_cast<std::size_t>(batch);
  int n_tok = tokens;
  if (layout == TokenLayout::kChannelMajor) {
    n_tok = qv.dim(2) * qv.dim(3);
  } else if (qv.dim(2) != 1 || qv.dim(3) != 1 || tokens < 1 || qv.dim(1) % tokens != 0) {
    throw std::invalid_argument("dot_attention: token-major input must be [B, N*D, 1, 1]");
  }
  const int dim = static_cast<int>(per / static_cast<std::size_t>(n_tok));
  const T scale = T{1} / std::sqrt(static_cast<T>(dim));

  Tensor<T> y(qv.shape());
  std::vector<RowMatrix<T>> probs(static_cast<std::size_t>(batch));
  for (int n = 0; n < batch; ++n) {
    const RowMatrix<T> qm = gather_tokens(qv.data() + per * n, layout, n_tok, dim);
    const RowMatrix<T> km = gather_tokens(k.value().data() + per * n, layout, n_tok, dim);
    const RowMatrix<T> vm = gather_tokens(v.value().data() + per * n, layout, n_tok, dim);
    RowMatrix<T> s = (qm * km.transpose()) * scale;
    for (int i = 0; i < n_tok; ++i) {
      const T mx = s.row(i).maxCoeff();
      s.row(i) = (s.row(i).array() - mx).exp();
      s.row(i) /= s.row(i).sum();
    }
    const RowMatrix<T> out = s * vm;
    scatter_tokens_add(out, layout, n_tok, dim, y.data() + per * n);
    probs[static_cast<std::size_t>(n)] = std::move(s);
  }

  return q.tape->push(std::move(y), any_needs({q, k, v}),
                      [=, probs = std::move(probs)](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const bool need_q = t.needs_grad(q.id);
    const bool need_k = t.needs_grad(k.id);
    const bool need_v = t.needs_grad(v.id);
    for (int n = 0; n < batch; ++n) {
      const RowMatrix<T>& p = probs[static_cast<std::size_t>(n)];
      const RowMatrix<T> gm = gather_tokens(g.data() + per * n, layout, n_tok, dim);
      const RowMatrix<T> qm = gather_tokens(t.value(q.id).data() + per * n, layout, n_tok, dim);
      const RowMatrix<T> km = gather_tokens(t.value(k.id).data() + per * n, layout, n_tok, dim);
      const RowMatrix<T> vm = gather_tokens(t.value(v.id).data() + per * n, layout, n_tok, dim);
      if (need_v) scatter_tokens_add<T>(p.transpose() * gm, layout, n_tok, dim, t.grad(v.id).data() + per * n);
      const RowMatrix<T> dp = gm * vm.transpose();
      RowMatrix<T> ds = p.cwiseProduct(dp);
      const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = ds.rowwise().sum();
      ds = (ds - p.cwiseProduct(row_dot.replicate(1, n_tok))) * scale;
      if (need_q) scatter_tokens_add<T>(ds * km, layout, n_tok, dim, t.grad(q.id).data() + per * n);
      if (need_k) scatter_tokens_add<T>(ds.transpose() * qm, layout, n_tok, dim, t.grad(k.id).data() + per * n);
    }
  });
}

template <typename T>
Var<T> masked_mse(std::span<const Var<T>> preds, std::span<const Tensor<T>> targets, const Tensor<T>& mask) {
  if (preds.empty() || preds.size() != targets.size()) {
    throw std::invalid_argument("masked_mse: prediction and target domain counts differ");
  }
  const int domains = static_cast<int>(preds.size());
  const int batch = preds[0].value().dim(0);
  if (mask.size() != static_cast<std::size_t>(batch) * domains) {
    throw std::invalid_argument("masked_mse: mask must be [batch, domains]");
  }
  double denom = 0.0;
  double total = 0.0;
  bool needs = false;
  for (int d = 0; d < domains; ++d) {
    const Tensor<T>& p = preds[static_cast<std::size_t>(d)].value();
    const Tensor<T>& y = targets[static_cast<std::size_t>(d)];
    check_same_shape(p, y, "masked_mse");
    needs = needs || preds[static_cast<std::size_t>(d)].tape->needs_grad(preds[static_cast<std::size_t>(d)].id);
    const std::size_t per = p.size() / static_cast<std::size_t>(batch);
    for (int n = 0; n < batch; ++n) {
      const T w = mask[static_cast<std::size_t>(n) * domains + d];
      if (w == T{0}) continue;
      denom += static_cast<double>(w) * static_cast<double>(per);
      double acc = 0.0;
      for (std::size_t i = per * n; i < per * (n + 1); ++i) {
        const double diff = static_cast<double>(p[i]) - static_cast<double>(y[i]);
        acc += diff * diff;
      }
      total += static_cast<double>(w) * acc;
    }
  }
  if (denom == 0.0) throw std::invalid_argument("masked_mse: loss mask selects nothing");
  Tensor<T> out({1}, static_cast<T>(total / denom));
  std::vector<Var<T>> inputs(preds.begin(), preds.end());
  std::vector<Tensor<T>> tgt(targets.begin(), targets.end());
  return preds[0].tape->push(std::move(out), needs,
                             [=, tgt = std::move(tgt)](Tape<T>& t, int self) {
    const double g = static_cast<double>(t.grad(self)[0]);
    for (int d = 0; d < domains; ++d) {
      const Var<T> in = inputs[static_cast<std::size_t>(d)];
      if (!t.needs_grad(in.id)) continue;
      const Tensor<T>& p = t.value(in.id);
      const Tensor<T>& y = tgt[static_cast<std::size_t>(d)];
      Tensor<T>& dp = t.grad(in.id);
      const std::size_t per = p.size() / static_cast<std::size_t>(batch);
      for (int n = 0; n < batch; ++n) {
        const double w = static_cast<double>(mask[static_cast<std::size_t>(n) * domains + d]);
        if (w == 0.0) continue;
        const double coef = 2.0 * w * g / denom;
        for (std::size_t i = per * n; i < per * (n + 1); ++i) {
          dp[i] += static_cast<T>(coef * (static_cast<double>(p[i]) - static_cast<double>(y[i])));
        }
      }
    }
  });
}

#define MDD_INSTANTIATE_OPS(T)                                                                          \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                                       \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, int);                                                  \
  template Var<T> group_norm(Var<T>, Var<T>, Var<T>, int, double);                                      \
  template Var<T> silu(Var<T>);                                                                         \
  template Var<T> add(Var<T>, Var<T>);                                                                  \
  template Var<T> add_channel_bias(Var<T>, Var<T>);                                                     \
  template Var<T> concat_channels(std::span<const Var<T>>);                                             \
  template Var<T> slice_channels(Var<T>, int, int);                                                     \
  template Var<T> reshape(Var<T>, Shape);                                                               \
  template Var<T> upsample_nearest2x(Var<T>);                                                           \
  template Var<T> dot_attention(Var<T>, Var<T>, Var<T>, TokenLayout, int);                              \
  template Var<T> masked_mse(std::span<const Var<T>>, std::span<const Tensor<T>>, const Tensor<T>&);

MDD_INSTANTIATE_OPS(float)
MDD_INSTANTIATE_OPS(double)

}  // namespace ops

template class Tape<float>;
template class Tape<double>;

}  // namespace mdd
