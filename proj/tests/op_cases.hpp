#pragma once

// Randomised gradient-check cases, one per registered op (binary ops are
// checked against each argument). Each case reduces the op output with a
// random weight matrix so every output coordinate contributes.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "genemb/grad_check.hpp"
#include "genemb/tensor.hpp"
#include "test_util.hpp"

namespace genemb::testing {

struct OpCase {
  std::string name;
  std::function<double(std::mt19937_64&)> run;  // returns max relative error
};

inline ad::Tensor weighted_sum(const ad::Tensor& y, std::mt19937_64& rng) {
  return ad::sum(ad::mul(y, random_matrix(rng, y.rows(), y.cols()).detach()));
}

inline std::vector<OpCase> op_cases() {
  using ad::Tensor;
  auto check = [](auto build, const Tensor& x) { return ad::grad_check(build, x); };
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, std::function<double(std::mt19937_64&)> fn) {
    cases.push_back({std::move(name), std::move(fn)});
  };

  add_case("matmul/lhs", [=](std::mt19937_64& rng) {
    auto m = extent(rng), k = extent(rng), n = extent(rng);
    auto b = random_matrix(rng, k, n);
    auto w = random_matrix(rng, m, n);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::matmul(x, b), w)); }, random_matrix(rng, m, k));
  });
  add_case("matmul/rhs", [=](std::mt19937_64& rng) {
    auto m = extent(rng), k = extent(rng), n = extent(rng);
    auto a = random_matrix(rng, m, k);
    auto w = random_matrix(rng, m, n);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::matmul(a, x), w)); }, random_matrix(rng, k, n));
  });
  add_case("add", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng);
    auto b = random_matrix(rng, r, c);
    auto w = random_matrix(rng, r, c);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::add(x, b), w)); }, random_matrix(rng, r, c));
  });
  add_case("mul", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng);
    auto b = random_matrix(rng, r, c);
    auto w = random_matrix(rng, r, c);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::mul(x, b), w)); }, random_matrix(rng, r, c));
  });
  add_case("transpose", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng);
    auto w = random_matrix(rng, c, r);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::transpose(x), w)); }, random_matrix(rng, r, c));
  });
  add_case("embed_lookup", [=](std::mt19937_64& rng) {
    auto v = extent(rng, 2), d = extent(rng), n = extent(rng);
    std::vector<int> ids(n);
    for (auto& i : ids) i = static_cast<int>(extent(rng, 0, v - 1));
    auto w = random_matrix(rng, n, d);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::embed_lookup(x, ids), w)); },
                 random_matrix(rng, v, d));
  });
  add_case("softmax_rows", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng);
    auto w = random_matrix(rng, r, c);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::softmax_rows(x), w)); }, random_matrix(rng, r, c));
  });
  add_case("layer_norm/x", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng, 2);
    auto g = random_matrix(rng, 1, c), b = random_matrix(rng, 1, c), w = random_matrix(rng, r, c);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::layer_norm(x, g, b), w)); },
                 random_matrix(rng, r, c));
  });
  add_case("layer_norm/gain", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng, 2);
    auto in = random_matrix(rng, r, c), b = random_matrix(rng, 1, c), w = random_matrix(rng, r, c);
    return check([&](const Tensor& g) { return ad::sum(ad::mul(ad::layer_norm(in, g, b), w)); },
                 random_matrix(rng, 1, c));
  });
  add_case("layer_norm/bias", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng, 2);
    auto in = random_matrix(rng, r, c), g = random_matrix(rng, 1, c), w = random_matrix(rng, r, c);
    return check([&](const Tensor& b) { return ad::sum(ad::mul(ad::layer_norm(in, g, b), w)); },
                 random_matrix(rng, 1, c));
  });
  add_case("gelu", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng);
    auto w = random_matrix(rng, r, c);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::gelu(x), w)); }, random_matrix(rng, r, c, 2.0));
  });
  add_case("slice_rows", [=](std::mt19937_64& rng) {
    auto r = extent(rng, 2), c = extent(rng);
    auto b = extent(rng, 0, r - 1);
    auto e = extent(rng, b + 1, r);
    auto w = random_matrix(rng, e - b, c);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::slice_rows(x, b, e), w)); },
                 random_matrix(rng, r, c));
  });
  add_case("concat_rows", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng), r2 = extent(rng);
    auto other = random_matrix(rng, r2, c);
    auto w = random_matrix(rng, r + r2, c);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::concat_rows({other, x, x}), ad::concat_rows({w, ad::slice_rows(w, 0, r)}))); },
                 random_matrix(rng, r, c));
  });
  add_case("gather_rows", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng), n = extent(rng);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = extent(rng, 0, r - 1);
    auto w = random_matrix(rng, n, c);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::gather_rows(x, idx), w)); },
                 random_matrix(rng, r, c));
  });
  add_case("scale", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng);
    const double s = std::normal_distribution<double>(0.0, 3.0)(rng);
    auto w = random_matrix(rng, r, c);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::scale(x, s), w)); }, random_matrix(rng, r, c));
  });
  add_case("mask_fill", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng);
    std::vector<bool> mask(r * c);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng() % 2 == 0;
    auto w = random_matrix(rng, r, c);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::mask_fill(x, mask, -7.0), w)); },
                 random_matrix(rng, r, c));
  });
  add_case("cross_entropy_rows", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng, 2);
    std::vector<int> t(r);
    for (auto& x : t) x = rng() % 5 == 0 ? -1 : static_cast<int>(extent(rng, 0, c - 1));
    auto w = random_matrix(rng, r, 1);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::cross_entropy_rows(x, t), w)); },
                 random_matrix(rng, r, c, 2.0));
  });
  add_case("l2_normalize_rows", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng, 2);
    auto w = random_matrix(rng, r, c);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::l2_normalize_rows(x), w)); },
                 random_matrix(rng, r, c));
  });
  add_case("dot_rows/lhs", [=](std::mt19937_64& rng) {
    auto m = extent(rng), n = extent(rng), d = extent(rng);
    auto b = random_matrix(rng, n, d), w = random_matrix(rng, m, n);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::dot_rows(x, b), w)); }, random_matrix(rng, m, d));
  });
  add_case("dot_rows/rhs", [=](std::mt19937_64& rng) {
    auto m = extent(rng), n = extent(rng), d = extent(rng);
    auto a = random_matrix(rng, m, d), w = random_matrix(rng, m, n);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::dot_rows(a, x), w)); }, random_matrix(rng, n, d));
  });
  add_case("sum", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng);
    return check([&](const Tensor& x) { return ad::sum(x); }, random_matrix(rng, r, c));
  });
  add_case("exp", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng);
    auto w = random_matrix(rng, r, c);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::exp(x), w)); }, random_matrix(rng, r, c));
  });
  add_case("add_scalar", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng);
    auto w = random_matrix(rng, r, c);
    return check([&](const Tensor& x) { return ad::sum(ad::mul(ad::add_scalar(x, 0.3), w)); },
                 random_matrix(rng, r, c));
  });
  add_case("clamp", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng);
    auto w = random_matrix(rng, r, c);
    // Keep coordinates away from the clamp boundaries so central differences are valid.
    auto x = random_matrix(rng, r, c);
    for (double& v : x.mutable_data())
      if (std::abs(std::abs(v) - 0.5) < 1e-3) v += 0.01;
    return check([&](const Tensor& t) { return ad::sum(ad::mul(ad::clamp(t, -0.5, 0.5), w)); }, x);
  });
  add_case("minimum", [=](std::mt19937_64& rng) {
    auto r = extent(rng), c = extent(rng);
    auto b = random_matrix(rng, r, c), w = random_matrix(rng, r, c);
    auto x = random_matrix(rng, r, c);
    for (std::size_t i = 0; i < x.numel(); ++i)
      if (std::abs(x.data()[i] - b.data()[i]) < 1e-3) x.mutable_data()[i] += 0.01;
    return check([&](const Tensor& t) { return ad::sum(ad::mul(ad::minimum(t, b), w)); }, x);
  });
  for (int which = 0; which < 3; ++which) {
    add_case(std::string("causal_attention/") + "qkv"[which], [=](std::mt19937_64& rng) {
      const std::size_t heads = extent(rng, 1, 2), dh = extent(rng, 1, 4);
      std::vector<std::size_t> segs{extent(rng, 1, 4), extent(rng, 1, 4)};
      const std::size_t T = segs[0] + segs[1], d = heads * dh;
      std::vector<Tensor> in{random_matrix(rng, T, d), random_matrix(rng, T, d), random_matrix(rng, T, d)};
      auto w = random_matrix(rng, T, d);
      return check(
          [&](const Tensor& x) {
            auto args = in;
            args[which] = x;
            return ad::sum(ad::mul(ad::causal_attention(args[0], args[1], args[2], heads, segs), w));
          },
          in[which]);
    });
  }
  return cases;
}

}  // namespace genemb::testing
