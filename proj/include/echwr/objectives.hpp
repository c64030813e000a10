#pragma once

// Training objectives: smoothed CTC, symmetric in-batch contrastive loss over
// unique transcripts, error-based contrastive loss against synthetic
// negatives, and their unweighted sum.

#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "echwr/autodiff.hpp"
#include "echwr/error.hpp"
#include "echwr/text.hpp"

namespace echwr {

/// Minimum number of steps a CTC path for `target` needs: one per label plus
/// a separating blank between each pair of equal neighbours.
inline std::size_t ctc_required_length(const LabelSeq& target) {
  std::size_t repeats = 0;
  for (std::size_t i = 1; i < target.size(); ++i) repeats += target[i] == target[i - 1];
  return target.size() + repeats;
}

namespace detail {

inline double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

/// Negative log-likelihood of `target` under per-step log-probabilities
/// lp[t * classes + k], t < input_len, via the forward-backward recursions
/// over the blank-interleaved label lattice. When `grad` is non-null it
/// receives d(nll)/d(lp) (the negated state occupancy per class).
template <typename T>
double ctc_nll(const T* lp, std::size_t classes, std::size_t input_len, const LabelSeq& target, double* grad) {
  constexpr double neg_inf = -std::numeric_limits<double>::infinity();
  if (input_len == 0) throw InfeasibleTargetError("ctc: zero-length input");
  for (auto id : target) {
    if (id == kBlank || id >= classes) throw ConfigError("ctc: target id " + std::to_string(id) + " out of range");
  }
  const std::size_t need = ctc_required_length(target);
  if (input_len < need) {
    throw InfeasibleTargetError("ctc: target needs at least " + std::to_string(need) + " steps, input has " +
                                std::to_string(input_len));
  }
  const std::size_t S = 2 * target.size() + 1;
  auto label = [&](std::size_t s) -> std::size_t { return s % 2 == 0 ? kBlank : target[s / 2]; };
  auto skip_ok = [&](std::size_t s) { return s >= 2 && label(s) != kBlank && label(s) != label(s - 2); };
  auto at = [&](std::size_t t, std::size_t k) { return static_cast<double>(lp[t * classes + k]); };

  std::vector<double> alpha(input_len * S, neg_inf), beta(input_len * S, neg_inf);
  alpha[0] = at(0, label(0));
  if (S > 1) alpha[1] = at(0, label(1));
  for (std::size_t t = 1; t < input_len; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      double a = alpha[(t - 1) * S + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * S + s - 1]);
      if (skip_ok(s)) a = log_add(a, alpha[(t - 1) * S + s - 2]);
      if (a != neg_inf) alpha[t * S + s] = a + at(t, label(s));
    }
  const std::size_t last = input_len - 1;
  double log_p = alpha[last * S + S - 1];
  if (S > 1) log_p = log_add(log_p, alpha[last * S + S - 2]);
  if (!std::isfinite(log_p)) throw NumericError("ctc: target has zero probability");

  if (grad) {
    beta[last * S + S - 1] = at(last, label(S - 1));
    if (S > 1) beta[last * S + S - 2] = at(last, label(S - 2));
    for (std::size_t t = last; t-- > 0;)
      for (std::size_t s = 0; s < S; ++s) {
        double b = beta[(t + 1) * S + s];
        if (s + 1 < S) b = log_add(b, beta[(t + 1) * S + s + 1]);
        if (s + 2 < S && skip_ok(s + 2)) b = log_add(b, beta[(t + 1) * S + s + 2]);
        if (b != neg_inf) beta[t * S + s] = b + at(t, label(s));
      }
    for (std::size_t t = 0; t < input_len; ++t)
      for (std::size_t s = 0; s < S; ++s) {
        const double ab = alpha[t * S + s] + beta[t * S + s];
        if (ab == neg_inf) continue;
        grad[t * classes + label(s)] -= std::exp(ab - at(t, label(s)) - log_p);
      }
  }
  return -log_p;
}

}  // namespace detail

/// Per-sample smoothed CTC over log_probs [B, T', classes] (blank = 0):
/// (1 - eps) * nll + eps * (-mean of log_probs over the valid steps and all
/// classes). Returns [B]. Infeasible targets raise InfeasibleTargetError.
template <typename T>
Tensor<T> ctc_loss_batch(const Tensor<T>& log_probs, const std::vector<LabelSeq>& targets,
                         const std::vector<std::size_t>& input_lens, double smoothing) {
  if (log_probs.rank() != 3) throw ShapeError("ctc: expected [B, T', classes], got " + shape_str(log_probs.shape()));
  const std::size_t B = log_probs.dim(0), steps = log_probs.dim(1), C = log_probs.dim(2);
  if (targets.size() != B || input_lens.size() != B) throw ShapeError("ctc: targets/lengths do not match batch");
  if (smoothing < 0.0 || smoothing >= 1.0) throw ConfigError("ctc: smoothing must be in [0,1)");
  std::vector<T> losses(B);
  std::vector<double> grads(log_probs.numel(), 0.0);
  const T* lp = log_probs.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    if (input_lens[b] > steps) throw ShapeError("ctc: input length exceeds available steps");
    const T* lpb = lp + b * steps * C;
    double* gb = grads.data() + b * steps * C;
    const double nll = detail::ctc_nll(lpb, C, input_lens[b], targets[b], gb);
    double loss = nll;
    if (smoothing > 0.0) {
      double total = 0.0;
      for (std::size_t i = 0; i < input_lens[b] * C; ++i) total += static_cast<double>(lpb[i]);
      const double denom = static_cast<double>(input_lens[b] * C);
      loss = (1.0 - smoothing) * nll - smoothing * total / denom;
      for (std::size_t i = 0; i < input_lens[b] * C; ++i) gb[i] = (1.0 - smoothing) * gb[i] - smoothing / denom;
    }
    losses[b] = static_cast<T>(loss);
  }
  return detail::make_result<T>("ctc_loss", Shape{B}, std::move(losses), {&log_probs},
                                [grads = std::move(grads), steps, C](Node<T>& self) {
                                  Node<T>& p = *self.parents[0];
                                  T* gp = p.grad_buffer();
                                  const std::size_t B = self.data.size();
                                  for (std::size_t b = 0; b < B; ++b) {
                                    const T g = self.grad[b];
                                    for (std::size_t i = 0; i < steps * C; ++i)
                                      gp[b * steps * C + i] += g * static_cast<T>(grads[b * steps * C + i]);
                                  }
                                });
}

/// Single sequence: log_probs [T', classes]. Returns a [1] tensor.
template <typename T>
Tensor<T> ctc_loss(const Tensor<T>& log_probs, const LabelSeq& target, std::size_t input_len, double smoothing) {
  if (log_probs.rank() != 2) throw ShapeError("ctc: expected [T', classes], got " + shape_str(log_probs.shape()));
  return ctc_loss_batch(reshape(log_probs, {1, log_probs.dim(0), log_probs.dim(1)}), {target}, {input_len},
                        smoothing);
}

/// Learnable similarity scale shared by both contrastive terms:
/// tau = exp(log_tau), held constant at clamp_max once it would exceed it.
template <typename T>
struct Temperature {
  Tensor<T> log_tau;
  double clamp_max = 100.0;

  Tensor<T> value() const {
    if (std::exp(static_cast<double>(log_tau.item())) > clamp_max) return Tensor<T>::scalar(static_cast<T>(clamp_max));
    return exp(log_tau);
  }
};

template <typename T>
struct ContrastiveResult {
  Tensor<T> loss;
  std::size_t effective_n = 0;
};

/// Indices of the first occurrence of every distinct transcript, in batch order.
template <typename Label>
std::vector<std::size_t> first_occurrences(const std::vector<Label>& labels) {
  std::set<Label> seen;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (seen.insert(labels[i]).second) keep.push_back(i);
  return keep;
}

/// Symmetric InfoNCE over s = tau * C Z^T after dropping repeated transcripts:
/// -1/(2n) * sum_i [log softmax_row(s)_ii + log softmax_col(s)_ii].
template <typename T, typename Label>
ContrastiveResult<T> bc_loss(const Tensor<T>& c_sig, const Tensor<T>& z_text, const Tensor<T>& tau,
                             const std::vector<Label>& labels) {
  if (c_sig.rank() != 2 || z_text.shape() != c_sig.shape() || labels.size() != c_sig.dim(0)) {
    throw ShapeError("bc_loss: expected matching [N, D] embeddings and N labels, got " + shape_str(c_sig.shape()) +
                     " and " + shape_str(z_text.shape()));
  }
  const std::vector<std::size_t> keep = first_occurrences(labels);
  const std::size_t n = keep.size();
  const Tensor<T> c = n == labels.size() ? c_sig : gather_rows(c_sig, keep);
  const Tensor<T> z = n == labels.size() ? z_text : gather_rows(z_text, keep);
  const Tensor<T> s = mul(matmul(c, transpose(z, 0, 1)), tau);
  std::vector<T> eye(n * n, T(0));
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = T(1);
  const Tensor<T> diag = mul(add(log_softmax(s, 1), log_softmax(s, 0)), Tensor<T>::from({n, n}, std::move(eye)));
  return {scale(sum_all(diag), static_cast<T>(-1.0 / (2.0 * static_cast<double>(n)))), n};
}

/// Per-sample InfoNCE of the true transcript against its own M negatives:
/// mean_i -log softmax([tau<c_i,z_pos_i>, tau<c_i,z_neg_ik>...])_0.
/// z_neg is [N, M, D]; pass an undefined tensor for M = 0 (loss is then 0).
template <typename T>
Tensor<T> ec_loss(const Tensor<T>& c_sig, const Tensor<T>& z_pos, const Tensor<T>& z_neg, const Tensor<T>& tau) {
  if (c_sig.rank() != 2 || z_pos.shape() != c_sig.shape()) {
    throw ShapeError("ec_loss: c_sig and z_pos must both be [N, D]");
  }
  const std::size_t N = c_sig.dim(0), D = c_sig.dim(1);
  Tensor<T> logits = reshape(sum(mul(c_sig, z_pos), 1), {N, 1});
  if (z_neg.defined()) {
    if (z_neg.rank() != 3 || z_neg.dim(0) != N || z_neg.dim(2) != D) {
      throw ShapeError("ec_loss: negatives must be [N, M, D], got " + shape_str(z_neg.shape()));
    }
    const Tensor<T> neg = sum(mul(reshape(c_sig, {N, 1, D}), z_neg), 2);
    logits = concat(std::vector<Tensor<T>>{logits, neg}, 1);
  }
  const Tensor<T> lsm = log_softmax(mul(logits, tau), 1);
  return scale(mean_all(slice(lsm, 1, 0, 1)), T(-1));
}

struct ObjectiveFlags {
  bool ctc = true;
  bool bc = true;
  bool ec = true;

  std::string to_string() const {
    std::string s = "ctc";
    if (bc) s += "+bc";
    if (ec) s += "+ec";
    return s;
  }

  /// Comma or plus separated subset of {ctc, bc, ec}; ctc is mandatory.
  static ObjectiveFlags parse(const std::string& text) {
    ObjectiveFlags f{false, false, false};
    std::string tok;
    auto flush = [&]() {
      if (tok.empty()) return;
      if (tok == "ctc") f.ctc = true;
      else if (tok == "bc") f.bc = true;
      else if (tok == "ec") f.ec = true;
      else throw ConfigError("unknown objective '" + tok + "' (expected ctc, bc, ec)");
      tok.clear();
    };
    for (char c : text) {
      if (c == ',' || c == '+' || c == ' ') flush();
      else tok.push_back(c);
    }
    flush();
    if (!f.ctc) throw ConfigError("objectives must include ctc");
    return f;
  }
};

struct LossReport {
  double l_ctc = 0.0;
  double l_bc = 0.0;
  double l_ec = 0.0;
  double l_total = 0.0;
  std::size_t effective_batch_bc = 0;
};

template <typename T>
struct TotalLoss {
  Tensor<T> loss;
  LossReport report;
};

/// Unweighted sum of the enabled components. Disabled components are never
/// added to the graph and report exactly 0.
template <typename T>
TotalLoss<T> total_loss(const Tensor<T>& ctc, const std::optional<ContrastiveResult<T>>& bc,
                        const std::optional<Tensor<T>>& ec, const ObjectiveFlags& flags) {
  if (!flags.ctc) throw ConfigError("total_loss: the CTC term is always enabled");
  TotalLoss<T> out;
  out.loss = ctc;
  out.report.l_ctc = static_cast<double>(ctc.item());
  if (flags.bc) {
    if (!bc) throw ConfigError("total_loss: BC enabled but not computed");
    out.loss = add(out.loss, bc->loss);
    out.report.l_bc = static_cast<double>(bc->loss.item());
    out.report.effective_batch_bc = bc->effective_n;
  }
  if (flags.ec) {
    if (!ec) throw ConfigError("total_loss: EC enabled but not computed");
    out.loss = add(out.loss, *ec);
    out.report.l_ec = static_cast<double>(ec->item());
  }
  out.report.l_total = static_cast<double>(out.loss.item());
  for (double v : {out.report.l_ctc, out.report.l_bc, out.report.l_ec, out.report.l_total}) {
    if (!std::isfinite(v)) throw NumericError("total_loss: non-finite loss component");
  }
  return out;
}

}  // namespace echwr
