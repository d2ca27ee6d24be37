#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "loagen/core/errors.hpp"
#include "loagen/core/rng.hpp"
#include "loagen/model/diffusion.hpp"

namespace loagen::model {

// epsilon estimator: (z_t, t) -> predicted noise
using EpsFn = std::function<Tensor(const Tensor&, std::size_t)>;

inline EpsFn guided_eps(const Denoiser& den, const DenoiserConditioning& cond,
                        double guidance_scale) {
  return [&den, cond, guidance_scale](const Tensor& z, std::size_t t) {
    return guidance_scale == 1.0 ? den.predict(z, t, cond)
                                 : den.cfg_estimate(z, t, cond, guidance_scale);
  };
}

// ancestral DDPM: iterate t = T..1; no noise is added at t = 1
inline Tensor ddpm_sample(const EpsFn& eps_fn, const NoiseSchedule& sched,
                          const std::vector<std::size_t>& shape, Rng& rng) {
  Tensor z = rng.randn(shape);
  for (std::size_t t = sched.T; t >= 1; --t) {
    Tensor eps = eps_fn(z, t);
    if (!eps.same_shape(z)) throw ShapeError("ddpm_sample: eps shape mismatch");
    const double b = sched.beta(t);
    const double a = sched.alpha(t);
    const double a_prev = sched.alpha_or_one(t - 1);
    const double coef = b / std::sqrt(1.0 - a);
    const double inv = 1.0 / std::sqrt(1.0 - b);
    const double sigma =
        t > 1 ? std::sqrt((1.0 - a_prev) / (1.0 - a) * b) : 0.0;
    for (std::size_t i = 0; i < z.numel(); ++i) {
      double mu = inv * (z[i] - coef * eps[i]);
      z[i] = mu + (sigma > 0.0 ? sigma * rng.normal() : 0.0);
    }
    if (!z.all_finite()) throw StateError("ddpm_sample: non-finite iterate");
  }
  return z;
}

// uniformly spaced descending step subsequence from T, always ending at 1
inline std::vector<std::size_t> ddim_steps(std::size_t T, std::size_t steps) {
  if (steps < 1 || steps > T)
    throw ConfigError("ddim_sample: steps must be within [1," +
                      std::to_string(T) + "]");
  std::vector<std::size_t> taus(steps);
  if (steps == 1) {
    taus[0] = T;
  } else {
    for (std::size_t i = 0; i < steps; ++i) {
      double frac = static_cast<double>(i) / static_cast<double>(steps - 1);
      taus[i] = T - static_cast<std::size_t>(
                        std::llround(frac * static_cast<double>(T - 1)));
    }
    taus.back() = 1;
  }
  return taus;
}

inline Tensor ddim_sample(const EpsFn& eps_fn, const NoiseSchedule& sched,
                          std::size_t steps, double eta,
                          const std::vector<std::size_t>& shape, Rng& rng) {
  auto taus = ddim_steps(sched.T, steps);
  Tensor z = rng.randn(shape);
  for (std::size_t k = 0; k < taus.size(); ++k) {
    const std::size_t t = taus[k];
    const std::size_t t_prev = k + 1 < taus.size() ? taus[k + 1] : 0;
    Tensor eps = eps_fn(z, t);
    if (!eps.same_shape(z)) throw ShapeError("ddim_sample: eps shape mismatch");
    const double a = sched.alpha(t);
    const double a_prev = sched.alpha_or_one(t_prev);
    const double sigma =
        eta * std::sqrt((1.0 - a_prev) / (1.0 - a)) *
        std::sqrt(1.0 - a / a_prev);
    const double dir = std::sqrt(std::max(1.0 - a_prev - sigma * sigma, 0.0));
    for (std::size_t i = 0; i < z.numel(); ++i) {
      double x0 = (z[i] - std::sqrt(1.0 - a) * eps[i]) / std::sqrt(a);
      z[i] = std::sqrt(a_prev) * x0 + dir * eps[i] +
             (sigma > 0.0 ? sigma * rng.normal() : 0.0);
    }
    if (!z.all_finite()) throw StateError("ddim_sample: non-finite iterate");
  }
  return z;
}

// batch of independent samples; item i is seeded base_seed + i, so sampling
// jointly is exactly equal to sampling each item on its own
inline std::vector<Tensor> ddim_sample_batch(
    const EpsFn& eps_fn, const NoiseSchedule& sched, std::size_t steps,
    double eta, const std::vector<std::size_t>& shape, std::size_t n,
    std::uint64_t base_seed) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(base_seed + i);
    out.push_back(ddim_sample(eps_fn, sched, steps, eta, shape, rng));
  }
  return out;
}

}  // namespace loagen::model
