#pragma once

// Central finite-difference gradient checking against the tape. Lives in test
// code only; the production path never touches it.

#include <cmath>
#include <functional>

#include "loagen/core/nn.hpp"
#include "loagen/core/rng.hpp"

namespace loagen::test {

struct GradCheckResult {
  double rel_error = 0.0;      // ||g_a - g_fd|| / max(||g_a||, ||g_fd||)
  double max_abs_diff = 0.0;
  std::size_t coords = 0;
};

// `loss` must be a deterministic function of the parameters in `ps` (fix all
// seeds inside it). Checks up to `max_coords_per_param` coordinates per
// parameter (all of them when 0).
inline GradCheckResult gradcheck(nn::ParamStore& ps,
                                 const std::function<double()>& loss,
                                 double h = 1e-5,
                                 std::size_t max_coords_per_param = 0,
                                 std::uint64_t pick_seed = 7) {
  // analytic pass is run by the caller beforehand: grads must be populated
  Rng pick(pick_seed);
  double na = 0.0, nf = 0.0, nd = 0.0, mx = 0.0;
  std::size_t checked = 0;
  for (auto& e : ps.entries()) {
    auto& val = e.var.value_mut();
    const auto& g = e.var.grad();
    const std::size_t n = val.numel();
    std::size_t m = (max_coords_per_param == 0 || max_coords_per_param >= n)
                        ? n
                        : max_coords_per_param;
    for (std::size_t k = 0; k < m; ++k) {
      std::size_t i = (m == n) ? k
                               : static_cast<std::size_t>(
                                     pick.randint(0, static_cast<long>(n) - 1));
      double orig = val[i];
      val[i] = orig + h;
      double lp = loss();
      val[i] = orig - h;
      double lm = loss();
      val[i] = orig;
      double fd = (lp - lm) / (2.0 * h);
      double an = g.numel() ? g[i] : 0.0;
      na += an * an;
      nf += fd * fd;
      nd += (an - fd) * (an - fd);
      mx = std::max(mx, std::abs(an - fd));
      ++checked;
    }
  }
  GradCheckResult r;
  double denom = std::max(std::sqrt(na), std::sqrt(nf));
  r.rel_error = denom > 1e-12 ? std::sqrt(nd) / denom : std::sqrt(nd);
  r.max_abs_diff = mx;
  r.coords = checked;
  return r;
}

}  // namespace loagen::test
