#pragma once

// Independent reference implementations used as test oracles. None of these
// call into the library's math; they share only plain containers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <vector>

namespace oracle {

/// -log P(target) by summing the probability of every length-T path over C
/// classes that collapses (merge repeats, drop blank 0) to the target.
inline double ctc_brute_force(const std::vector<double>& log_probs, std::size_t T, std::size_t C,
                              const std::vector<std::uint32_t>& target) {
  std::vector<std::size_t> path(T, 0);
  double total = 0.0;
  while (true) {
    std::vector<std::uint32_t> collapsed;
    std::size_t prev = C;  // sentinel: nothing emitted yet
    double lp = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t k = path[t];
      lp += log_probs[t * C + k];
      if (k != 0 && k != prev) collapsed.push_back(static_cast<std::uint32_t>(k));
      prev = k;
    }
    if (collapsed == target) total += std::exp(lp);
    std::size_t pos = 0;
    while (pos < T && ++path[pos] == C) path[pos++] = 0;
    if (pos == T) break;
  }
  return -std::log(total);
}

/// Plain two-row Levenshtein distance with unit costs.
template <typename Seq>
std::size_t levenshtein(const Seq& a, const Seq& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Central differences of f at x with step h*(|x_i|+1).
inline std::vector<double> finite_diff(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i], step = h * (std::abs(x0) + 1.0);
    x[i] = x0 + step;
    const double fp = f(x);
    x[i] = x0 - step;
    const double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

/// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)
inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& n, double floor = 1e-3) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - n[i]) / std::max({std::abs(a[i]), std::abs(n[i]), floor}));
  }
  return worst;
}

inline double log_sum_exp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

/// Row-major matrix helper for the reference forwards below.
struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;
  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  double& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

/// x [n, in] * w [in, out] + b
inline Mat affine(const Mat& x, const std::vector<double>& w, const std::vector<double>& b, std::size_t out) {
  Mat y(x.rows, out);
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double s = b.empty() ? 0.0 : b[o];
      for (std::size_t i = 0; i < x.cols; ++i) s += x.at(r, i) * w[i * out + o];
      y.at(r, o) = s;
    }
  return y;
}

inline Mat norm_rows(const Mat& x, bool layer, const std::vector<double>& gain, const std::vector<double>& bias,
                     double eps = 1e-6) {
  Mat y(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    double mu = 0.0;
    if (layer) {
      for (std::size_t c = 0; c < x.cols; ++c) mu += x.at(r, c);
      mu /= static_cast<double>(x.cols);
    }
    double ms = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) ms += (x.at(r, c) - mu) * (x.at(r, c) - mu);
    ms /= static_cast<double>(x.cols);
    for (std::size_t c = 0; c < x.cols; ++c) {
      y.at(r, c) = (x.at(r, c) - mu) / std::sqrt(ms + eps) * gain[c] + (layer ? bias[c] : 0.0);
    }
  }
  return y;
}

/// Parameters of one plain (ungated) pre-norm encoder layer.
struct RefLayer {
  std::vector<double> n1_gain, n1_bias, n2_gain, n2_bias;
  std::vector<double> wq, bq, wk, bk, wv, bv, wo, bo;
  std::vector<double> w_up, b_up, w_down, b_down;
  std::size_t hidden = 0;
};

/// Plain multi-head self-attention over rows of x (no masking needed: every
/// row of the reference sequence is real).
inline Mat ref_self_attention(const Mat& x, const RefLayer& L, std::size_t heads) {
  const std::size_t n = x.rows, D = x.cols, dh = D / heads;
  const Mat q = affine(x, L.wq, L.bq, D), k = affine(x, L.wk, L.bk, D), v = affine(x, L.wv, L.bv, D);
  Mat ctx(n, D);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      for (std::size_t j = 0; j < n; ++j) {
        double d = 0.0;
        for (std::size_t c = 0; c < dh; ++c) d += q.at(i, h * dh + c) * k.at(j, h * dh + c);
        s[j] = d / std::sqrt(static_cast<double>(dh));
      }
      const double lse = log_sum_exp(s);
      for (std::size_t j = 0; j < n; ++j) {
        const double a = std::exp(s[j] - lse);
        for (std::size_t c = 0; c < dh; ++c) ctx.at(i, h * dh + c) += a * v.at(j, h * dh + c);
      }
    }
  return affine(ctx, L.wo, L.bo, D);
}

inline Mat ref_prenorm_layer(const Mat& x, const RefLayer& L, std::size_t heads, bool layer_norm) {
  Mat h = x;
  const Mat a = ref_self_attention(norm_rows(x, layer_norm, L.n1_gain, L.n1_bias), L, heads);
  for (std::size_t i = 0; i < h.v.size(); ++i) h.v[i] += a.v[i];
  Mat up = affine(norm_rows(h, layer_norm, L.n2_gain, L.n2_bias), L.w_up, L.b_up, L.hidden);
  for (double& u : up.v) u = std::max(u, 0.0);
  const Mat down = affine(up, L.w_down, L.b_down, x.cols);
  for (std::size_t i = 0; i < h.v.size(); ++i) h.v[i] += down.v[i];
  return h;
}

}  // namespace oracle
