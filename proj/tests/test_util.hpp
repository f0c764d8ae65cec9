#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "genemb/tensor.hpp"

namespace genemb::testing {

inline ad::Tensor random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(r * c);
  for (auto& x : v) x = n(rng);
  return ad::Tensor::matrix(r, c, std::move(v));
}

inline std::vector<double> random_unit(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(d);
  double s = 0.0;
  for (auto& x : v) {
    x = n(rng);
    s += x * x;
  }
  for (auto& x : v) x /= std::sqrt(s);
  return v;
}

inline ad::Tensor unit_rows(std::mt19937_64& rng, std::size_t r, std::size_t d) {
  std::vector<double> v;
  for (std::size_t i = 0; i < r; ++i) {
    auto u = random_unit(rng, d);
    v.insert(v.end(), u.begin(), u.end());
  }
  return ad::Tensor::matrix(r, d, std::move(v));
}

inline std::size_t extent(std::mt19937_64& rng, std::size_t lo = 1, std::size_t hi = 8) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace genemb::testing
