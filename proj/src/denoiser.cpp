#include "mdd/denoiser.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "mdd/rng.hpp"

namespace mdd {

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  return out;
}

std::string block_name(const std::string& prefix, int level, int block) {
  return prefix + ".l" + std::to_string(level) + ".b" + std::to_string(block);
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (domains < 1) fail("need at least one domain");
  if (channels < 1) fail("need at least one data channel");
  if (height < 1 || width < 1) fail("spatial size must be positive");
  if (base_width < 1 || channel_mults.empty()) fail("need a base width and at least one level");
  if (blocks_per_level < 1) fail("need at least one block per level");
  if (groups < 1) fail("groups must be positive");
  if (sinusoid_dim < 2 || sinusoid_dim % 2 != 0) fail("sinusoid_dim must be even");
  if (time_embed_dim < 1) fail("time_embed_dim must be positive");
  for (int l = 0; l < levels(); ++l) {
    if (channel_mults[static_cast<std::size_t>(l)] < 1) fail("channel multipliers must be positive");
    if (level_width(l) % groups != 0) fail("level widths must be divisible by groups");
  }
  if (image_mode()) {
    const int factor = 1 << (levels() - 1);
    if (height % factor != 0 || width % factor != 0) {
      fail("image size must be divisible by 2^(levels-1)");
    }
  }
}

std::map<std::string, std::string> ModelConfig::to_keys() const {
  return {
      {"arch.domains", std::to_string(domains)},
      {"arch.channels", std::to_string(channels)},
      {"arch.height", std::to_string(height)},
      {"arch.width", std::to_string(width)},
      {"arch.base_width", std::to_string(base_width)},
      {"arch.channel_mults", join_ints(channel_mults)},
      {"arch.blocks_per_level", std::to_string(blocks_per_level)},
      {"arch.groups", std::to_string(groups)},
      {"arch.time_embed_dim", std::to_string(time_embed_dim)},
      {"arch.sinusoid_dim", std::to_string(sinusoid_dim)},
      {"arch.condition_code", condition_code ? "1" : "0"},
  };
}

ModelConfig ModelConfig::from_keys(const std::map<std::string, std::string>& keys) {
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = keys.find(k);
    if (it == keys.end()) throw std::invalid_argument("model config: missing key " + k);
    return it->second;
  };
  ModelConfig c;
  c.domains = std::stoi(get("arch.domains"));
  c.channels = std::stoi(get("arch.channels"));
  c.height = std::stoi(get("arch.height"));
  c.width = std::stoi(get("arch.width"));
  c.base_width = std::stoi(get("arch.base_width"));
  c.channel_mults = split_ints(get("arch.channel_mults"));
  c.blocks_per_level = std::stoi(get("arch.blocks_per_level"));
  c.groups = std::stoi(get("arch.groups"));
  c.time_embed_dim = std::stoi(get("arch.time_embed_dim"));
  c.sinusoid_dim = std::stoi(get("arch.sinusoid_dim"));
  c.condition_code = get("arch.condition_code") == "1";
  c.validate();
  return c;
}

ModelConfig ModelConfig::vector_defaults(int domains, int features) {
  ModelConfig c;
  c.domains = domains;
  c.channels = features;
  return c;
}

ModelConfig ModelConfig::image_defaults(int domains, int size) {
  ModelConfig c;
  c.domains = domains;
  c.channels = 3;
  c.height = size;
  c.width = size;
  c.base_width = 32;
  c.channel_mults = {1, 2, 2};
  c.blocks_per_level = 1;
  c.time_embed_dim = 128;
  c.sinusoid_dim = 64;
  return c;
}

template <typename T>
Tensor<T> sinusoidal_embedding(const std::vector<int>& timesteps, int dim) {
  const int half = dim / 2;
  Tensor<T> out({static_cast<int>(timesteps.size()), dim, 1, 1});
  for (std::size_t n = 0; n < timesteps.size(); ++n) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double angle = timesteps[n] * freq;
      out[n * dim + i] = static_cast<T>(std::sin(angle));
      out[n * dim + half + i] = static_cast<T>(std::cos(angle));
    }
  }
  return out;
}

namespace {

// Walks the architecture once, either declaring parameters (construction)
// or wiring them into a tape (forward). Both paths share this traversal so
// names and shapes cannot drift apart.
template <typename T>
class Wiring {
 public:
  Wiring(const ModelConfig& cfg, std::vector<Parameter<T>>* declare, Rng* rng)
      : cfg_(cfg), declare_(declare), rng_(rng) {}
  Wiring(const ModelConfig& cfg, const std::vector<Parameter<T>>& params, const std::map<std::string, int>& index,
         Tape<T>& tape)
      : cfg_(cfg), params_(&params), index_(&index), tape_(&tape), cache_(params.size()) {}

  bool declaring() const { return declare_ != nullptr; }

  // Returns the parameter var (forward) or declares it (construction).
  Var<T> param(const std::string& name, const Shape& shape, int fan_in, double fill = NAN) {
    if (declaring()) {
      Tensor<T> value(shape);
      if (std::isnan(fill)) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (auto& v : value.values()) v = static_cast<T>(rng_->uniform(-bound, bound));
      } else {
        value.fill(static_cast<T>(fill));
      }
      declare_->push_back({name, std::move(value)});
      return {};
    }
    auto it = index_->find(name);
    if (it == index_->end()) throw std::logic_error("unknown parameter " + name);
    const int slot = it->second;
    Var<T>& cached = cache_[static_cast<std::size_t>(slot)];
    if (cached.tape == nullptr) cached = tape_->parameter((*params_)[static_cast<std::size_t>(slot)], slot);
    return cached;
  }

  Var<T> conv(const std::string& name, Var<T> x, int in, int out, int kernel, int stride = 1) {
    Var<T> w = param(name + ".weight", {out, in, kernel, kernel}, in * kernel * kernel);
    Var<T> b = param(name + ".bias", {out}, in * kernel * kernel);
    if (declaring()) return {};
    return ops::conv2d(x, w, b, stride);
  }

  Var<T> dense(const std::string& name, Var<T> x, int in, int out) {
    Var<T> w = param(name + ".weight", {out, in}, in);
    Var<T> b = param(name + ".bias", {out}, in);
    if (declaring()) return {};
    return ops::linear(x, w, b);
  }

  Var<T> norm(const std::string& name, Var<T> x, int channels, int groups) {
    Var<T> g = param(name + ".gamma", {channels}, 1, 1.0);
    Var<T> b = param(name + ".beta", {channels}, 1, 0.0);
    if (declaring()) return {};
    return ops::group_norm(x, g, b, groups);
  }

  Var<T> silu(Var<T> x) { return declaring() ? Var<T>{} : ops::silu(x); }

  Var<T> add(Var<T> a, Var<T> b) { return declaring() ? Var<T>{} : ops::add(a, b); }

  Var<T> concat(std::vector<Var<T>> parts) {
    return declaring() ? Var<T>{} : ops::concat_channels<T>(std::span<const Var<T>>(parts));
  }

  int kernel() const { return cfg_.image_mode() ? 3 : 1; }

  Var<T> res_block(const std::string& name, Var<T> x, Var<T> temb, int in, int out, int groups_in,
                   int groups_out) {
    Var<T> h = conv(name + ".conv1", silu(norm(name + ".norm1", x, in, groups_in)), in, out, kernel());
    Var<T> t = dense(name + ".temb", silu(temb), cfg_.time_embed_dim, out);
    if (!declaring()) h = ops::add_channel_bias(h, t);
    h = conv(name + ".conv2", silu(norm(name + ".norm2", h, out, groups_out)), out, out, kernel());
    Var<T> skip = x;
    if (in != out) skip = conv(name + ".skip", x, in, out, 1);
    return add(h, skip);
  }

  Var<T> time_embedding(int d, Var<T> sinusoid) {
    const std::string p = "time." + std::to_string(d);
    Var<T> h = dense(p + ".fc1", sinusoid, cfg_.sinusoid_dim, cfg_.time_embed_dim);
    return dense(p + ".fc2", silu(h), cfg_.time_embed_dim, cfg_.time_embed_dim);
  }

  Var<T> attention(Var<T> z, int width) {
    const int m = cfg_.domains;
    const int chunk_groups = cfg_.groups * m;
    Var<T> xn = norm("mid.attn.norm", z, m * width, chunk_groups);
    if (cfg_.image_mode()) {
      const int d = m * width;
      Var<T> q = conv("mid.attn.q", xn, d, d, 1);
      Var<T> k = conv("mid.attn.k", xn, d, d, 1);
      Var<T> v = conv("mid.attn.v", xn, d, d, 1);
      Var<T> a = declaring() ? Var<T>{} : ops::dot_attention(q, k, v, TokenLayout::kChannelMajor, 0);
      return add(z, conv("mid.attn.out", a, d, d, 1));
    }
    // Tokens are the per-domain chunks; projections are shared across tokens.
    Var<T> tokens;
    int batch = 0;
    if (!declaring()) {
      batch = xn.value().dim(0);
      tokens = ops::reshape(xn, {batch * m, width, 1, 1});
    }
    auto project = [&](const std::string& name, Var<T> in) {
      Var<T> out = dense(name, in, width, width);
      return declaring() ? out : ops::reshape(out, {batch, m * width, 1, 1});
    };
    Var<T> q = project("mid.attn.q", tokens);
    Var<T> k = project("mid.attn.k", tokens);
    Var<T> v = project("mid.attn.v", tokens);
    Var<T> a;
    if (!declaring()) a = ops::reshape(ops::dot_attention(q, k, v, TokenLayout::kTokenMajor, m), {batch * m, width, 1, 1});
    return add(z, project("mid.attn.out", a));
  }

  std::vector<Var<T>> network(const std::vector<Var<T>>& inputs, const std::vector<Var<T>>& sinusoids) {
    const int m = cfg_.domains;
    const int levels = cfg_.levels();
    const int g = cfg_.groups;
    const int k = kernel();

    std::vector<Var<T>> temb(static_cast<std::size_t>(m));
    for (int d = 0; d < m; ++d) temb[static_cast<std::size_t>(d)] = time_embedding(d, sinusoids[static_cast<std::size_t>(d)]);
    Var<T> temb_sum = temb[0];
    for (int d = 1; d < m; ++d) temb_sum = add(temb_sum, temb[static_cast<std::size_t>(d)]);

    std::vector<std::vector<Var<T>>> skips(static_cast<std::size_t>(m));
    std::vector<Var<T>> encoded(static_cast<std::size_t>(m));
    for (int d = 0; d < m; ++d) {
      const std::string p = "enc." + std::to_string(d);
      const Var<T> te = temb[static_cast<std::size_t>(d)];
      Var<T> h = conv(p + ".in", inputs[static_cast<std::size_t>(d)], cfg_.input_channels(), cfg_.level_width(0), k);
      int ch = cfg_.level_width(0);
      for (int l = 0; l < levels; ++l) {
        for (int b = 0; b < cfg_.blocks_per_level; ++b) {
          h = res_block(block_name(p, l, b), h, te, ch, cfg_.level_width(l), g, g);
          ch = cfg_.level_width(l);
        }
        skips[static_cast<std::size_t>(d)].push_back(h);
        if (cfg_.image_mode() && l + 1 < levels) {
          const std::string dn = p + ".l" + std::to_string(l) + ".down";
          h = conv(dn + ".conv", norm(dn + ".norm", h, ch, g), ch, ch, 3, 2);
        }
      }
      encoded[static_cast<std::size_t>(d)] = h;
    }

    const int top = cfg_.level_width(levels - 1);
    const int mid = m * top;
    Var<T> z = concat(encoded);
    z = res_block("mid.b0", z, temb_sum, mid, mid, g * m, g * m);
    z = attention(z, top);
    z = res_block("mid.b1", z, temb_sum, mid, mid, g * m, g * m);

    std::vector<Var<T>> outputs(static_cast<std::size_t>(m));
    for (int d = 0; d < m; ++d) {
      const std::string p = "dec." + std::to_string(d);
      const Var<T> te = temb[static_cast<std::size_t>(d)];
      Var<T> h = z;
      int ch = mid;
      for (int l = levels - 1; l >= 0; --l) {
        const int w = cfg_.level_width(l);
        for (int b = 0; b < cfg_.blocks_per_level; ++b) {
          if (b == 0) {
            // The first decoder block sees the duplicated bottleneck plus this
            // domain's skip; its norm groups align with the domain chunks.
            const int groups_in = l == levels - 1 ? g * (m + 1) : g;
            h = concat({h, skips[static_cast<std::size_t>(d)][static_cast<std::size_t>(l)]});
            h = res_block(block_name(p, l, b), h, te, ch + w, w, groups_in, g);
          } else {
            h = res_block(block_name(p, l, b), h, te, w, w, g, g);
          }
          ch = w;
        }
        if (cfg_.image_mode() && l > 0) {
          const std::string up = p + ".l" + std::to_string(l) + ".up";
          h = norm(up + ".norm", h, ch, g);
          if (!declaring()) h = ops::upsample_nearest2x(h);
          h = conv(up + ".conv", h, ch, ch, 3);
        }
      }
      h = silu(norm(p + ".out.norm", h, ch, g));
      outputs[static_cast<std::size_t>(d)] = conv(p + ".out.conv", h, ch, cfg_.channels, k);
    }
    return outputs;
  }

 private:
  const ModelConfig& cfg_;
  std::vector<Parameter<T>>* declare_ = nullptr;
  Rng* rng_ = nullptr;
  const std::vector<Parameter<T>>* params_ = nullptr;
  const std::map<std::string, int>* index_ = nullptr;
  Tape<T>* tape_ = nullptr;
  std::vector<Var<T>> cache_;
};

}  // namespace

template <typename T>
DenoiserModel<T>::DenoiserModel(ModelConfig config, std::uint64_t seed, int max_step)
    : config_(std::move(config)), max_step_(max_step) {
  config_.validate();
  Rng rng(derive_seed(seed, 0x6d6f64656cULL));
  Wiring<T> wiring(config_, &params_, &rng);
  const std::vector<Var<T>> none(static_cast<std::size_t>(config_.domains));
  wiring.network(none, none);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!index_.emplace(params_[i].name, static_cast<int>(i)).second) {
      throw std::logic_error("duplicate parameter " + params_[i].name);
    }
  }
}

template <typename T>
DenoiserModel<T>::DenoiserModel(ModelConfig config, std::vector<Parameter<T>> params, int max_step)
    : config_(std::move(config)), max_step_(max_step), params_(std::move(params)) {
  config_.validate();
  const DenoiserModel<T> reference(config_, 0, max_step);
  if (reference.params_.size() != params_.size()) {
    throw std::invalid_argument("parameter list does not match the architecture");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& want = reference.params_[i];
    if (params_[i].name != want.name || params_[i].value.shape() != want.value.shape()) {
      throw std::invalid_argument("parameter " + params_[i].name + " does not match expected " + want.name + " " +
                                  shape_string(want.value.shape()));
    }
    index_.emplace(params_[i].name, static_cast<int>(i));
  }
}

template <typename T>
const Parameter<T>& DenoiserModel<T>::parameter(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[static_cast<std::size_t>(it->second)];
}

template <typename T>
std::size_t DenoiserModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
void DenoiserModel<T>::validate_input(const NetworkInput<T>& input) const {
  const int m = config_.domains;
  if (static_cast<int>(input.x.size()) != m) {
    throw std::invalid_argument("expected " + std::to_string(m) + " domain arrays, got " +
                                std::to_string(input.x.size()));
  }
  const int batch = input.x[0].rank() == 4 ? input.x[0].dim(0) : -1;
  const Shape want{batch, config_.channels, config_.height, config_.width};
  for (const auto& x : input.x) {
    if (x.shape() != want) {
      throw std::invalid_argument("domain array " + shape_string(x.shape()) + " does not match " + shape_string(want));
    }
    if (!all_finite(x)) throw std::invalid_argument("non-finite value in network input");
  }
  if (static_cast<int>(input.tvec.size()) != batch) throw std::invalid_argument("need one timestep vector per sample");
  for (const auto& tv : input.tvec) {
    if (static_cast<int>(tv.size()) != m) throw std::invalid_argument("timestep vector length differs from domain count");
    for (int t : tv.entries()) {
      if (t < 0 || t > max_step_) throw std::out_of_range("timestep outside [0, T]");
    }
  }
  const std::size_t want_codes = config_.condition_code ? static_cast<std::size_t>(batch) * m : 0;
  if (input.codes.size() != want_codes) throw std::invalid_argument("condition codes do not match model configuration");
}

template <typename T>
std::vector<Var<T>> DenoiserModel<T>::build(Tape<T>& tape, const NetworkInput<T>& input) const {
  validate_input(input);
  const int m = config_.domains;
  const int batch = input.x[0].dim(0);
  const int hw = config_.height * config_.width;
  std::vector<Var<T>> xs;
  std::vector<Var<T>> sinusoids;
  for (int d = 0; d < m; ++d) {
    const Tensor<T>& x = input.x[static_cast<std::size_t>(d)];
    if (config_.condition_code) {
      Tensor<T> with_code({batch, config_.channels + 1, config_.height, config_.width});
      const std::size_t per = static_cast<std::size_t>(config_.channels) * hw;
      for (int n = 0; n < batch; ++n) {
        T* dst = with_code.data() + (per + hw) * n;
        std::copy_n(x.data() + per * n, per, dst);
        std::fill_n(dst + per, hw, static_cast<T>(input.codes[static_cast<std::size_t>(n) * m + d]));
      }
      xs.push_back(tape.constant(std::move(with_code)));
    } else {
      xs.push_back(tape.constant(x));
    }
    std::vector<int> ts(static_cast<std::size_t>(batch));
    for (int n = 0; n < batch; ++n) ts[static_cast<std::size_t>(n)] = input.tvec[static_cast<std::size_t>(n)][static_cast<std::size_t>(d)];
    sinusoids.push_back(tape.constant(sinusoidal_embedding<T>(ts, config_.sinusoid_dim)));
  }
  Wiring<T> wiring(config_, params_, index_, tape);
  return wiring.network(xs, sinusoids);
}

template <typename T>
DomainArrays<T> DenoiserModel<T>::forward(const NetworkInput<T>& input) const {
  Tape<T> tape(false);
  const auto outs = build(tape, input);
  DomainArrays<T> result;
  result.reserve(outs.size());
  for (const auto& v : outs) result.push_back(v.value());
  return result;
}

template <typename T>
LossAndGradients<T> DenoiserModel<T>::loss_and_gradients(const NetworkInput<T>& input,
                                                         const DomainArrays<T>& eps_target,
                                                         const Tensor<T>& loss_mask) const {
  Tape<T> tape(true);
  const auto outs = build(tape, input);
  Var<T> loss = ops::masked_mse<T>(std::span<const Var<T>>(outs), std::span<const Tensor<T>>(eps_target), loss_mask);
  tape.backward(loss);
  LossAndGradients<T> result;
  result.loss = loss.value()[0];
  result.gradients = tape.parameter_gradients(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (result.gradients[i].empty()) result.gradients[i] = Tensor<T>(params_[i].value.shape());
  }
  return result;
}

template class DenoiserModel<float>;
template class DenoiserModel<double>;
template Tensor<float> sinusoidal_embedding<float>(const std::vector<int>&, int);
template Tensor<double> sinusoidal_embedding<double>(const std::vector<int>&, int);

}  // namespace mdd
