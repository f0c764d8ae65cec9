#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "genemb/tensor.hpp"

namespace genemb::ad {

struct GradCheckOptions {
  double step = 1e-5;
  // Check at most this many coordinates (0 = all), chosen with `seed`.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<std::size_t> pick_coords(std::size_t n, const GradCheckOptions& opt) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (opt.max_coords == 0 || opt.max_coords >= n) return idx;
  std::mt19937_64 rng(opt.seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(opt.max_coords);
  return idx;
}

inline double eval_scalar(const std::function<Tensor()>& f, const char* who) {
  NoGradGuard guard;
  const double v = f().item();
  if (!std::isfinite(v)) throw NumericError(std::string(who) + ": function is non-finite at a perturbed point");
  return v;
}

}  // namespace detail

// Compares the analytic gradient of the scalar function `f` with respect to
// `param` (a leaf, perturbed in place) against central differences. Returns
// max |analytic - numeric| / max(1, |analytic|) over the checked coordinates.
inline double grad_check_param(const std::function<Tensor()>& f, Tensor& param,
                               const GradCheckOptions& opt = {}) {
  if (!(opt.step > 0.0)) throw ShapeError("grad_check: step must be positive");
  param.set_requires_grad(true);
  param.zero_grad();
  Tensor loss = f();
  if (loss.numel() != 1) throw ShapeError("grad_check: function is not scalar-valued");
  backward(loss);
  std::vector<double> analytic = param.has_grad() ? std::vector<double>(param.grad().begin(), param.grad().end())
                                                  : std::vector<double>(param.numel(), 0.0);
  param.zero_grad();

  double worst = 0.0;
  auto data = param.mutable_data();
  for (std::size_t i : detail::pick_coords(param.numel(), opt)) {
    const double x0 = data[i];
    data[i] = x0 + opt.step;
    const double fp = detail::eval_scalar(f, "grad_check");
    data[i] = x0 - opt.step;
    const double fm = detail::eval_scalar(f, "grad_check");
    data[i] = x0;
    const double numeric = (fp - fm) / (2.0 * opt.step);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

// Function-of-tensor form: f receives the leaf x and builds the graph from it.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         const GradCheckOptions& opt = {}) {
  Tensor leaf = x.detach();
  return grad_check_param([&] { return f(leaf); }, leaf, opt);
}

}  // namespace genemb::ad
