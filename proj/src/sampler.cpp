#include "mdd/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mdd/rng.hpp"

namespace mdd {

void PhiSchedule::validate() const {
  if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("phi c must lie in [0, 1], got " + format_double(c));
}

const char* phi_family_name(PhiFamily f) {
  switch (f) {
    case PhiFamily::kVanilla: return "vanilla";
    case PhiFamily::kSkip: return "skip";
    case PhiFamily::kConstant: return "constant";
    case PhiFamily::kConstantFading: return "constant_fading";
  }
  return "?";
}

PhiFamily parse_phi_family(const std::string& s) {
  if (s == "vanilla") return PhiFamily::kVanilla;
  if (s == "skip") return PhiFamily::kSkip;
  if (s == "constant") return PhiFamily::kConstant;
  if (s == "constant_fading" || s == "fading") return PhiFamily::kConstantFading;
  throw std::invalid_argument("phi must be vanilla, skip, constant or constant_fading, got '" + s + "'");
}

int phi_eval(const PhiSchedule& phi, int t, int max_step) {
  phi.validate();
  if (t < 1 || t > max_step) throw std::out_of_range("phi_eval: t outside [1, T]");
  const int level = static_cast<int>(std::lround(phi.c * max_step));
  switch (phi.family) {
    case PhiFamily::kVanilla: return t;
    case PhiFamily::kConstant: return level;
    case PhiFamily::kSkip: return std::max(0, t - static_cast<int>(std::lround((1.0 - phi.c) * max_step)));
    case PhiFamily::kConstantFading: return std::min(t, level);
  }
  return t;
}

const char* sampler_kind_name(SamplerKind k) { return k == SamplerKind::kDdpm ? "ddpm" : "ddim"; }

SamplerKind parse_sampler_kind(const std::string& s) {
  if (s == "ddpm") return SamplerKind::kDdpm;
  if (s == "ddim") return SamplerKind::kDdim;
  throw std::invalid_argument("sampler must be ddpm or ddim, got '" + s + "'");
}

DomainArrays<double> DenoiserEpsilon::predict(const DomainArrays<double>& x, const std::vector<TimestepVector>& tvec,
                                              std::span<const std::uint8_t> cond_mask) const {
  NetworkInput<float> in;
  in.x.reserve(x.size());
  for (const auto& a : x) in.x.push_back(a.cast<float>());
  in.tvec = tvec;
  if (model_.config().condition_code) {
    const std::size_t b = tvec.size();
    in.codes.resize(b * cond_mask.size());
    for (std::size_t n = 0; n < b; ++n) std::copy(cond_mask.begin(), cond_mask.end(), in.codes.begin() + n * cond_mask.size());
  }
  DomainArrays<double> out;
  for (const auto& e : model_.forward(in)) out.push_back(e.cast<double>());
  return out;
}

void GenerationRequest::validate(int max_step) const {
  phi.validate();
  const int m = domains();
  if (m < 2 || static_cast<int>(x_cond.size()) != m) throw std::invalid_argument("x_cond and cond_mask must cover every domain");
  int conds = 0;
  Shape shape;
  for (int d = 0; d < m; ++d) {
    if (!cond_mask[static_cast<std::size_t>(d)]) continue;
    ++conds;
    const auto& x = x_cond[static_cast<std::size_t>(d)];
    if (x.rank() != 4) throw std::invalid_argument("condition arrays must be [B, C, H, W]");
    if (shape.empty()) shape = x.shape();
    if (x.shape() != shape) throw std::invalid_argument("condition arrays disagree in shape");
    if (!all_finite(x)) throw std::invalid_argument("condition arrays must be finite");
  }
  if (conds == 0 || conds == m) throw std::invalid_argument("need at least one condition and one target domain");
  if (sampler == SamplerKind::kDdim && (ddim_steps < 1 || ddim_steps > max_step)) {
    throw std::invalid_argument("ddim steps must lie in [1, T]");
  }
  if (x_T) {
    if (static_cast<int>(x_T->size()) != m) throw std::invalid_argument("x_T must cover every domain");
    for (int d = 0; d < m; ++d) {
      if (!cond_mask[static_cast<std::size_t>(d)] && (*x_T)[static_cast<std::size_t>(d)].shape() != shape) {
        throw std::invalid_argument("x_T target arrays must match the condition shape");
      }
    }
  }
}

namespace {

struct ReverseState {
  const GenerationRequest& req;
  const NoiseSchedule& schedule;
  int m;
  int b;
  Shape shape;
  std::size_t per;
  DomainArrays<double> x;
  std::vector<Rng> cond_rng;
  std::vector<Rng> z_rng;

  ReverseState(const GenerationRequest& r, const NoiseSchedule& s) : req(r), schedule(s), m(r.domains()) {
    r.validate(s.steps());
    for (int d = 0; d < m; ++d) {
      if (r.cond_mask[static_cast<std::size_t>(d)]) {
        shape = r.x_cond[static_cast<std::size_t>(d)].shape();
        break;
      }
    }
    b = shape[0];
    per = shape_size(shape) / static_cast<std::size_t>(b);
    const std::uint64_t cseed = r.cond_noise_seed.value_or(r.seed);
    for (int n = 0; n < b; ++n) {
      const std::uint64_t i = r.sample_offset + static_cast<std::uint64_t>(n);
      cond_rng.emplace_back(derive_seed(cseed, i, 1));
      z_rng.emplace_back(derive_seed(r.seed, i, 2));
    }
    x.assign(static_cast<std::size_t>(m), Tensor<double>(shape));
    if (r.x_T) {
      for (int d = 0; d < m; ++d) {
        if (!is_cond(d)) x[static_cast<std::size_t>(d)] = (*r.x_T)[static_cast<std::size_t>(d)];
      }
    } else {
      for (int n = 0; n < b; ++n) {
        Rng init(derive_seed(r.seed, r.sample_offset + static_cast<std::uint64_t>(n), 0));
        for (int d = 0; d < m; ++d) {
          if (is_cond(d)) continue;
          double* p = x[static_cast<std::size_t>(d)].data() + per * n;
          for (std::size_t i = 0; i < per; ++i) p[i] = init.normal();
        }
      }
    }
  }

  bool is_cond(int d) const { return req.cond_mask[static_cast<std::size_t>(d)] != 0; }

  // Renoises condition slots to level phi(t) with fresh noise and evaluates
  // the network.
  DomainArrays<double> predict(int t) {
    const int max_t = schedule.steps();
    const int tc = phi_eval(req.phi, t, max_t);
    const NoiseCoefficients cc = coefficients_at(schedule, tc);
    for (int n = 0; n < b; ++n) {
      for (int d = 0; d < m; ++d) {
        if (!is_cond(d)) continue;
        const float* x0 = req.x_cond[static_cast<std::size_t>(d)].data() + per * n;
        double* p = x[static_cast<std::size_t>(d)].data() + per * n;
        for (std::size_t i = 0; i < per; ++i) {
          const double eps = cond_rng[static_cast<std::size_t>(n)].normal();
          p[i] = tc == 0 ? static_cast<double>(x0[i]) : cc.signal * x0[i] + cc.noise * eps;
        }
      }
    }
    std::vector<int> entries(static_cast<std::size_t>(m));
    for (int d = 0; d < m; ++d) entries[static_cast<std::size_t>(d)] = is_cond(d) ? tc : t;
    const std::vector<TimestepVector> tvec(static_cast<std::size_t>(b), TimestepVector(entries, max_t));
    DomainArrays<double> eps = model_predict(tvec);
    if (eps.size() != static_cast<std::size_t>(m)) throw std::runtime_error("model returned the wrong number of domains");
    for (int d = 0; d < m; ++d) {
      if (eps[static_cast<std::size_t>(d)].shape() != shape) throw std::runtime_error("model output shape mismatch");
      if (!is_cond(d) && !all_finite(eps[static_cast<std::size_t>(d)])) {
        throw NonFiniteError("non-finite noise prediction at step t=" + std::to_string(t));
      }
    }
    return eps;
  }

  const EpsilonModel* model = nullptr;
  DomainArrays<double> model_predict(const std::vector<TimestepVector>& tvec) {
    return model->predict(x, tvec, req.cond_mask);
  }

  DomainArrays<double> x0_hat(const DomainArrays<double>& eps, int t) const {
    const NoiseCoefficients c = coefficients_at(schedule, t);
    DomainArrays<double> out(static_cast<std::size_t>(m));
    for (int d = 0; d < m; ++d) {
      if (is_cond(d)) continue;
      const auto& xd = x[static_cast<std::size_t>(d)];
      const auto& ed = eps[static_cast<std::size_t>(d)];
      Tensor<double> o(shape);
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = (xd[i] - c.noise * ed[i]) / c.signal;
      out[static_cast<std::size_t>(d)] = std::move(o);
    }
    return out;
  }

  void check_finite(int t) const {
    for (int d = 0; d < m; ++d) {
      if (!is_cond(d) && !all_finite(x[static_cast<std::size_t>(d)])) {
        throw NonFiniteError("non-finite sample state after step t=" + std::to_string(t));
      }
    }
  }

  void snapshot(int index, int t, const DomainArrays<double>& eps) const {
    if (!req.on_step) return;
    const DomainArrays<double> x0 = x0_hat(eps, t);
    req.on_step(StepSnapshot{index, t, &x, &x0});
  }

  DomainArrays<float> finish() const {
    DomainArrays<float> out(static_cast<std::size_t>(m));
    for (int d = 0; d < m; ++d) {
      if (is_cond(d)) {
        out[static_cast<std::size_t>(d)] = req.x_cond[static_cast<std::size_t>(d)];
        continue;
      }
      Tensor<float> o(shape);
      const auto& xd = x[static_cast<std::size_t>(d)];
      for (std::size_t i = 0; i < o.size(); ++i) {
        const double v = req.clamp_output ? std::clamp(xd[i], -1.0, 1.0) : xd[i];
        o[i] = static_cast<float>(v);
      }
      out[static_cast<std::size_t>(d)] = std::move(o);
    }
    return out;
  }
};

}  // namespace

DomainArrays<float> ddpm_generate(const GenerationRequest& request, const EpsilonModel& model,
                                  const NoiseSchedule& schedule) {
  ReverseState st(request, schedule);
  st.model = &model;
  const int max_t = schedule.steps();
  for (int t = max_t, index = 0; t >= 1; --t, ++index) {
    const DomainArrays<double> eps = st.predict(t);
    st.snapshot(index, t, eps);
    const double scale = 1.0 / std::sqrt(request.literal_update ? schedule.alpha_bar(t) : schedule.alpha(t));
    const double eps_coef = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
    const double sigma = t == 1 ? 0.0
                         : request.sigma == SigmaChoice::kPosterior ? std::sqrt(schedule.posterior_variance(t))
                                                                   : std::sqrt(schedule.beta(t));
    for (int n = 0; n < st.b; ++n) {
      for (int d = 0; d < st.m; ++d) {
        if (st.is_cond(d)) continue;
        double* p = st.x[static_cast<std::size_t>(d)].data() + st.per * n;
        const double* e = eps[static_cast<std::size_t>(d)].data() + st.per * n;
        for (std::size_t i = 0; i < st.per; ++i) {
          const double z = t > 1 ? st.z_rng[static_cast<std::size_t>(n)].normal() : 0.0;
          p[i] = scale * (p[i] - eps_coef * e[i]) + sigma * z;
        }
      }
    }
    st.check_finite(t);
  }
  return st.finish();
}

std::vector<int> ddim_timesteps(int max_step, int steps) {
  if (steps < 1 || steps > max_step) throw std::invalid_argument("ddim steps must lie in [1, T]");
  std::vector<int> tau(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) {
    tau[static_cast<std::size_t>(i)] = static_cast<int>(static_cast<long long>(i) * max_step / steps);
  }
  return tau;
}

DomainArrays<float> ddim_generate(const GenerationRequest& request, const EpsilonModel& model,
                                  const NoiseSchedule& schedule) {
  ReverseState st(request, schedule);
  st.model = &model;
  const std::vector<int> tau = ddim_timesteps(schedule.steps(), request.ddim_steps);
  for (int i = request.ddim_steps, index = 0; i >= 1; --i, ++index) {
    const int t = tau[static_cast<std::size_t>(i)];
    const int prev = tau[static_cast<std::size_t>(i - 1)];
    const DomainArrays<double> eps = st.predict(t);
    st.snapshot(index, t, eps);
    const NoiseCoefficients now = coefficients_at(schedule, t);
    const NoiseCoefficients next = coefficients_at(schedule, prev);
    for (int d = 0; d < st.m; ++d) {
      if (st.is_cond(d)) continue;
      auto& xd = st.x[static_cast<std::size_t>(d)];
      const auto& ed = eps[static_cast<std::size_t>(d)];
      for (std::size_t k = 0; k < xd.size(); ++k) {
        const double x0 = (xd[k] - now.noise * ed[k]) / now.signal;
        xd[k] = next.signal * x0 + next.noise * ed[k];
      }
    }
    st.check_finite(t);
  }
  return st.finish();
}

DomainArrays<float> generate(const GenerationRequest& request, const EpsilonModel& model,
                             const NoiseSchedule& schedule) {
  return request.sampler == SamplerKind::kDdpm ? ddpm_generate(request, model, schedule)
                                               : ddim_generate(request, model, schedule);
}

KeyValues generation_metadata(const GenerationRequest& request) {
  KeyValues kv;
  std::string cond;
  std::string targets;
  for (int d = 0; d < request.domains(); ++d) {
    const char letter = static_cast<char>('A' + d);
    (request.cond_mask[static_cast<std::size_t>(d)] ? cond : targets) += letter;
  }
  kv["generation.cond"] = cond;
  kv["generation.targets"] = targets;
  kv["generation.phi"] = phi_family_name(request.phi.family);
  kv["generation.c"] = format_double(request.phi.c);
  kv["generation.sampler"] = sampler_kind_name(request.sampler);
  kv["generation.steps"] = request.sampler == SamplerKind::kDdim ? std::to_string(request.ddim_steps) : "all";
  kv["generation.seed"] = std::to_string(request.seed);
  if (request.cond_noise_seed) kv["generation.cond_noise_seed"] = std::to_string(*request.cond_noise_seed);
  kv["generation.sample_offset"] = std::to_string(request.sample_offset);
  kv["generation.update"] = request.literal_update ? "literal_alpha_bar" : "alpha";
  kv["generation.sigma"] = request.sigma == SigmaChoice::kPosterior ? "posterior" : "beta";
  kv["generation.clamp"] = request.clamp_output ? "output_only" : "none";
  return kv;
}

}  // namespace mdd
