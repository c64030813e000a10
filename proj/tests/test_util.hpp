#pragma once

#include <gtest/gtest.h>

#include <functional>
#include <random>
#include <vector>

#include "echwr/autodiff.hpp"
#include "echwr/nn.hpp"
#include "oracles.hpp"

namespace testutil {

using echwr::Shape;
using echwr::Tensor;
using TD = Tensor<double>;

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(gen);
  return v;
}

inline TD random_tensor(const Shape& s, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
  return TD::from(s, random_values(echwr::numel_of(s), gen, lo, hi));
}

/// Analytic gradient of fn at x (via backward) against the finite-difference
/// oracle; returns the max relative error.
inline double grad_error(const std::function<TD(const TD&)>& fn, const Shape& shape, const std::vector<double>& x0) {
  TD x = TD::from(shape, x0, true);
  TD y = fn(x);
  echwr::backward(y);
  std::vector<double> analytic(x0.size(), 0.0);
  if (x.has_grad()) analytic.assign(x.grad().begin(), x.grad().end());
  echwr::NoGradGuard ng;
  const auto numeric = oracle::finite_diff([&](const std::vector<double>& p) { return fn(TD::from(shape, p)).item(); }, x0);
  return oracle::max_rel_error(analytic, numeric);
}

inline std::vector<double> values(const TD& t) { return {t.data().begin(), t.data().end()}; }

/// Max relative error of every parameter gradient of `loss` against finite differences.
inline double param_grad_error(echwr::ParamStore<double>& store, const std::function<TD()>& loss) {
  store.zero_grad();
  echwr::backward(loss());
  double worst = 0.0;
  echwr::NoGradGuard ng;
  for (auto& p : store.all()) {
    std::vector<double> analytic(p.value.numel(), 0.0);
    if (p.value.has_grad()) analytic.assign(p.value.grad().begin(), p.value.grad().end());
    const std::vector<double> x0(p.value.data().begin(), p.value.data().end());
    const auto numeric = oracle::finite_diff(
        [&](const std::vector<double>& x) {
          auto d = p.value.mutable_data();
          std::copy(x.begin(), x.end(), d.begin());
          const double v = loss().item();
          std::copy(x0.begin(), x0.end(), d.begin());
          return v;
        },
        x0);
    worst = std::max(worst, oracle::max_rel_error(analytic, numeric));
  }
  return worst;
}

}  // namespace testutil
