#pragma once

// Parameterized building blocks. Every layer registers its tensors in a
// ParamStore under a dotted name and a group tag; the store is the single
// source of truth for optimizers, checkpoints and the inference export.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "echwr/autodiff.hpp"
#include "echwr/rng.hpp"

namespace echwr {

enum class Group : std::uint8_t { primary = 0, auxiliary = 1 };
enum class Mode { train, eval };
enum class NormKind { layer, rms };

inline std::string to_string(Group g) { return g == Group::primary ? "primary" : "auxiliary"; }
inline std::string to_string(NormKind k) { return k == NormKind::layer ? "layer" : "rms"; }

inline NormKind parse_norm_kind(std::string_view s) {
  if (s == "layer" || s == "ln" || s == "LN") return NormKind::layer;
  if (s == "rms" || s == "RMS") return NormKind::rms;
  throw ConfigError("unknown norm kind '" + std::string(s) + "' (expected layer or rms)");
}

/// Dropout randomness only exists in training mode; evaluation passes no Rng.
struct ForwardContext {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;
  bool training() const { return mode == Mode::train; }
};

template <typename T>
struct Parameter {
  std::string name;
  Group group;
  Tensor<T> value;
};

template <typename T>
class ParamStore {
 public:
  Tensor<T> add(std::string name, Group group, Tensor<T> init) {
    if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    init.set_requires_grad(true);
    params_.push_back({std::move(name), group, init});
    return init;
  }

  const Parameter<T>* find(std::string_view name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  Parameter<T>* find(std::string_view name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }

  std::size_t count(Group g) const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.group == g;
    return n;
  }
  std::size_t numel(Group g) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.group == g) n += p.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

 private:
  std::vector<Parameter<T>> params_;
};

// ---------------------------------------------------------------------------
// Initializers. Values are rounded through float so that checkpoints, which
// store float32, reproduce an untrained model exactly in either precision.

namespace init {

template <typename T>
Tensor<T> uniform(Shape shape, double bound, Rng& rng) {
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(static_cast<float>(rng.uniform(-bound, bound)));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> normal(Shape shape, double stddev, Rng& rng) {
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(static_cast<float>(rng.normal(0.0, stddev)));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> constant(Shape shape, double value) {
  return Tensor<T>::full(std::move(shape), static_cast<T>(static_cast<float>(value)));
}

/// Square orthogonal blocks (modified Gram-Schmidt on Gaussian draws), one
/// per column block of width `rows`: result is [rows, rows * blocks].
template <typename T>
Tensor<T> orthogonal_blocks(std::size_t rows, std::size_t blocks, Rng& rng) {
  const std::size_t cols = rows * blocks;
  std::vector<T> out(rows * cols);
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    std::vector<std::vector<double>> q(rows, std::vector<double>(rows));
    for (std::size_t i = 0; i < rows; ++i) {
      for (;;) {
        for (auto& x : q[i]) x = rng.normal();
        for (std::size_t j = 0; j < i; ++j) {
          double d = 0;
          for (std::size_t k = 0; k < rows; ++k) d += q[i][k] * q[j][k];
          for (std::size_t k = 0; k < rows; ++k) q[i][k] -= d * q[j][k];
        }
        double n = 0;
        for (double x : q[i]) n += x * x;
        n = std::sqrt(n);
        if (n > 1e-8) {
          for (auto& x : q[i]) x /= n;
          break;
        }
      }
    }
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < rows; ++c)
        out[r * cols + blk * rows + c] = static_cast<T>(static_cast<float>(q[c][r]));
  }
  return Tensor<T>::from({rows, cols}, std::move(out));
}

}  // namespace init

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, const ForwardContext& ctx) {
  if (!ctx.training() || p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  if (!ctx.rng) throw Error("dropout: training mode requires an Rng");
  std::vector<T> keep(x.numel());
  const T s = static_cast<T>(1.0 / (1.0 - p));
  for (auto& k : keep) k = ctx.rng->uniform() < p ? T(0) : s;
  return mul(x, Tensor<T>::from(x.shape(), std::move(keep)));
}

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, Group group, std::size_t in, std::size_t out, Rng& rng,
         bool with_bias = true)
      : in_(in), out_(out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight_ = store.add(name + ".weight", group, init::uniform<T>({in, out}, bound, rng));
    if (with_bias) bias_ = store.add(name + ".bias", group, init::uniform<T>({out}, bound, rng));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> y = matmul(x, weight_);
    return bias_.defined() ? add(y, bias_) : y;
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor<T> weight_, bias_;
};

/// Channels-last 1-D convolution over [B, L, C_in] -> [B, L_out, C_out].
template <typename T>
class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(ParamStore<T>& store, const std::string& name, Group group, std::size_t in, std::size_t out,
         std::size_t kernel, std::size_t stride, std::size_t pad, Rng& rng)
      : kernel_(kernel), stride_(stride), pad_(pad) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel));
    weight_ = store.add(name + ".weight", group, init::uniform<T>({kernel * in, out}, bound, rng));
    bias_ = store.add(name + ".bias", group, init::uniform<T>({out}, bound, rng));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return add(matmul(unfold_1d(x, kernel_, stride_, pad_), weight_), bias_);
  }

  static std::size_t out_length(std::size_t len, std::size_t kernel, std::size_t stride, std::size_t pad) {
    if (len + 2 * pad < kernel) return 0;
    return (len + 2 * pad - kernel) / stride + 1;
  }
  std::size_t out_length(std::size_t len) const { return out_length(len, kernel_, stride_, pad_); }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  std::size_t kernel_ = 1, stride_ = 1, pad_ = 0;
  Tensor<T> weight_, bias_;
};

/// Unidirectional LSTM over [B, L, in] with per-sample valid lengths. Steps at
/// or beyond a sample's length leave its state untouched, so a reverse pass
/// starts from the zero state at that sample's own last valid step.
template <typename T>
class Lstm {
 public:
  Lstm() = default;
  Lstm(ParamStore<T>& store, const std::string& name, Group group, std::size_t in, std::size_t hidden, Rng& rng)
      : hidden_(hidden) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    w_ih_ = store.add(name + ".w_ih", group, init::uniform<T>({in, 4 * hidden}, bound, rng));
    w_hh_ = store.add(name + ".w_hh", group, init::orthogonal_blocks<T>(hidden, 4, rng));
    bias_ = store.add(name + ".bias", group, init::uniform<T>({4 * hidden}, bound, rng));
  }

  Tensor<T> forward(const Tensor<T>& x, const std::vector<std::size_t>& lengths, bool reverse) const {
    const std::size_t B = x.dim(0), L = x.dim(1), H = hidden_;
    if (lengths.size() != B) throw ShapeError("lstm: lengths do not match batch");
    const Tensor<T> xw = add(matmul(x, w_ih_), bias_);  // [B, L, 4H]
    Tensor<T> h = Tensor<T>::zeros({B, H});
    Tensor<T> c = Tensor<T>::zeros({B, H});
    std::vector<Tensor<T>> outs(L);
    for (std::size_t s = 0; s < L; ++s) {
      const std::size_t t = reverse ? L - 1 - s : s;
      Tensor<T> gates = add(reshape(slice(xw, 1, t, t + 1), {B, 4 * H}), matmul(h, w_hh_));
      Tensor<T> i = sigmoid(slice(gates, 1, 0, H));
      Tensor<T> f = sigmoid(slice(gates, 1, H, 2 * H));
      Tensor<T> g = tanh(slice(gates, 1, 2 * H, 3 * H));
      Tensor<T> o = sigmoid(slice(gates, 1, 3 * H, 4 * H));
      Tensor<T> c_new = add(mul(f, c), mul(i, g));
      Tensor<T> h_new = mul(o, tanh(c_new));
      bool all_valid = true;
      std::vector<T> keep(B), hold(B);
      for (std::size_t b = 0; b < B; ++b) {
        const bool valid = t < lengths[b];
        all_valid = all_valid && valid;
        keep[b] = valid ? T(1) : T(0);
        hold[b] = valid ? T(0) : T(1);
      }
      if (all_valid) {
        h = h_new;
        c = c_new;
      } else {
        const Tensor<T> km = Tensor<T>::from({B, 1}, keep), hm = Tensor<T>::from({B, 1}, hold);
        h = add(mul(km, h_new), mul(hm, h));
        c = add(mul(km, c_new), mul(hm, c));
      }
      outs[t] = reshape(h, {B, 1, H});
    }
    return L == 1 ? outs[0] : concat(outs, 1);
  }

  std::size_t hidden() const { return hidden_; }

 private:
  std::size_t hidden_ = 0;
  Tensor<T> w_ih_, w_hh_, bias_;
};

/// Forward and backward LSTM outputs concatenated per timestep: [B, L, 2H].
template <typename T>
class BiLstm {
 public:
  BiLstm() = default;
  BiLstm(ParamStore<T>& store, const std::string& name, Group group, std::size_t in, std::size_t hidden, Rng& rng)
      : fwd_(store, name + ".fwd", group, in, hidden, rng), bwd_(store, name + ".bwd", group, in, hidden, rng) {}

  Tensor<T> operator()(const Tensor<T>& x, const std::vector<std::size_t>& lengths) const {
    return concat(std::vector<Tensor<T>>{fwd_.forward(x, lengths, false), bwd_.forward(x, lengths, true)}, 2);
  }

 private:
  Lstm<T> fwd_, bwd_;
};

template <typename T>
Tensor<T> normalize(const Tensor<T>& x, NormKind kind, const Tensor<T>& gain, const Tensor<T>* bias, T eps = T(1e-6)) {
  if (!(eps > T(0))) throw ConfigError("normalize: eps must be positive");
  if (gain.numel() != x.shape().back()) throw ShapeError("normalize: gain does not match last axis of " + shape_str(x.shape()));
  if (kind == NormKind::layer) {
    const Tensor<T> centered = sub(x, mean(x, -1, true));
    const Tensor<T> var = mean(mul(centered, centered), -1, true);
    Tensor<T> y = mul(divide(centered, sqrt(add_scalar(var, eps))), gain);
    return bias ? add(y, *bias) : y;
  }
  const Tensor<T> ms = mean(mul(x, x), -1, true);
  return mul(divide(x, sqrt(add_scalar(ms, eps))), gain);
}

template <typename T>
class Norm {
 public:
  Norm() = default;
  Norm(ParamStore<T>& store, const std::string& name, Group group, std::size_t dim, NormKind kind)
      : kind_(kind) {
    gain_ = store.add(name + ".gain", group, init::constant<T>({dim}, 1.0));
    if (kind == NormKind::layer) bias_ = store.add(name + ".bias", group, init::constant<T>({dim}, 0.0));
  }
  Tensor<T> operator()(const Tensor<T>& x) const {
    return normalize(x, kind_, gain_, bias_.defined() ? &bias_ : nullptr);
  }
  NormKind kind() const { return kind_; }

 private:
  NormKind kind_ = NormKind::layer;
  Tensor<T> gain_, bias_;
};

/// Standard sin/cos interleave: pe[p, 2i] = sin(p / 10000^(2i/dim)), pe[p, 2i+1] = cos(...).
template <typename T>
Tensor<T> sinusoidal_positions(std::size_t length, std::size_t dim) {
  if (dim % 2 != 0) throw ShapeError("sinusoidal positions need an even dimension, got " + std::to_string(dim));
  std::vector<T> v(length * dim);
  for (std::size_t p = 0; p < length; ++p)
    for (std::size_t i = 0; i < dim / 2; ++i) {
      const double angle = static_cast<double>(p) / std::pow(10000.0, 2.0 * static_cast<double>(i) / dim);
      v[p * dim + 2 * i] = static_cast<T>(std::sin(angle));
      v[p * dim + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  return Tensor<T>::from({length, dim}, std::move(v));
}

template <typename T>
class LearnablePositions {
 public:
  LearnablePositions() = default;
  LearnablePositions(ParamStore<T>& store, const std::string& name, Group group, std::size_t max_len, std::size_t dim,
                     Rng& rng)
      : max_len_(max_len) {
    table_ = store.add(name, group, init::normal<T>({max_len, dim}, 0.02, rng));
  }
  Tensor<T> operator()(std::size_t length) const {
    if (length > max_len_) {
      throw ShapeError("learnable positions: length " + std::to_string(length) + " exceeds maximum " +
                       std::to_string(max_len_));
    }
    return slice(table_, 0, 0, length);
  }
  std::size_t max_len() const { return max_len_; }

 private:
  std::size_t max_len_ = 0;
  Tensor<T> table_;
};

template <typename T>
class Embedding {
 public:
  Embedding() = default;
  Embedding(ParamStore<T>& store, const std::string& name, Group group, std::size_t count, std::size_t dim, Rng& rng) {
    table_ = store.add(name, group, init::normal<T>({count, dim}, 0.02, rng));
  }
  Tensor<T> operator()(const std::vector<std::size_t>& ids) const { return gather_rows(table_, ids); }
  std::size_t count() const { return table_.dim(0); }

 private:
  Tensor<T> table_;
};

struct AttentionConfig {
  std::size_t num_heads = 8;
  std::size_t model_dim = 512;
  double dropout_p = 0.0;
  bool gated = false;

  void validate() const {
    if (num_heads == 0 || model_dim == 0 || model_dim % num_heads != 0) {
      throw ConfigError("attention: model_dim " + std::to_string(model_dim) + " not divisible by " +
                        std::to_string(num_heads) + " heads");
    }
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("attention: dropout must be in [0,1)");
  }
};

/// Multi-head scaled dot-product attention over batched sequences.
///
/// With `gated`, each head's context is multiplied elementwise by
/// sigmoid(W_g q_in + b_g) restricted to that head's slice before the heads
/// are concatenated; b_g starts at +2 so a fresh layer is close to ungated.
template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& store, const std::string& name, Group group, AttentionConfig cfg, Rng& rng)
      : cfg_(cfg) {
    cfg_.validate();
    const std::size_t D = cfg.model_dim;
    q_ = Linear<T>(store, name + ".q", group, D, D, rng);
    k_ = Linear<T>(store, name + ".k", group, D, D, rng);
    v_ = Linear<T>(store, name + ".v", group, D, D, rng);
    o_ = Linear<T>(store, name + ".o", group, D, D, rng);
    if (cfg.gated) {
      gate_ = Linear<T>(store, name + ".gate", group, D, D, rng);
      auto b = gate_.bias().mutable_data();
      std::fill(b.begin(), b.end(), T(2));
    }
  }

  /// q_in [B, Lq, D]; kv_in [B, Lk, D]; key_valid (optional) is B*Lk flags, 1 = attend.
  Tensor<T> operator()(const Tensor<T>& q_in, const Tensor<T>& kv_in, const std::vector<std::uint8_t>* key_valid,
                       const ForwardContext& ctx) const {
    if (q_in.rank() != 3 || kv_in.rank() != 3 || q_in.dim(2) != cfg_.model_dim || kv_in.dim(2) != cfg_.model_dim ||
        q_in.dim(0) != kv_in.dim(0)) {
      throw ShapeError("attention: expected [B, L, " + std::to_string(cfg_.model_dim) + "] inputs, got " +
                       shape_str(q_in.shape()) + " and " + shape_str(kv_in.shape()));
    }
    const std::size_t B = q_in.dim(0), Lq = q_in.dim(1), Lk = kv_in.dim(1);
    const std::size_t H = cfg_.num_heads, D = cfg_.model_dim, dh = D / H;

    auto heads = [&](const Tensor<T>& t, std::size_t len) {
      return reshape(transpose(reshape(t, {B, len, H, dh}), 1, 2), {B * H, len, dh});
    };
    const Tensor<T> q = heads(q_(q_in), Lq);
    const Tensor<T> k = heads(k_(kv_in), Lk);
    const Tensor<T> v = heads(v_(kv_in), Lk);
    Tensor<T> scores = scale(matmul(q, transpose(k, 1, 2)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    if (key_valid) {
      if (key_valid->size() != B * Lk) throw ShapeError("attention: key mask does not match [B, Lk]");
      Mask fill{{B * H, 1, Lk}, std::vector<std::uint8_t>(B * H * Lk)};
      for (std::size_t b = 0; b < B; ++b) {
        bool any = false;
        for (std::size_t j = 0; j < Lk; ++j) any = any || (*key_valid)[b * Lk + j];
        if (!any) throw ShapeError("attention: every key position of sample " + std::to_string(b) + " is masked");
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t j = 0; j < Lk; ++j) fill.values[(b * H + h) * Lk + j] = (*key_valid)[b * Lk + j] ? 0 : 1;
      }
      scores = masked_fill(scores, fill, static_cast<T>(-1e30));
    }
    Tensor<T> attn = dropout(softmax(scores, -1), cfg_.dropout_p, ctx);
    Tensor<T> context = reshape(transpose(reshape(matmul(attn, v), {B, H, Lq, dh}), 1, 2), {B, Lq, D});
    if (cfg_.gated) context = mul(context, sigmoid(gate_(q_in)));
    return o_(context);
  }

  const AttentionConfig& config() const { return cfg_; }
  Linear<T>& q_proj() { return q_; }
  Linear<T>& k_proj() { return k_; }
  Linear<T>& v_proj() { return v_; }
  Linear<T>& o_proj() { return o_; }
  Linear<T>& gate_proj() { return gate_; }

 private:
  AttentionConfig cfg_;
  Linear<T> q_, k_, v_, o_, gate_;
};

/// Single-sample form: q [Lq, D], k/v [Lk, D], optional Lk validity flags.
template <typename T>
Tensor<T> multi_head_attention(const MultiHeadAttention<T>& mha, const Tensor<T>& q, const Tensor<T>& kv,
                               const std::vector<std::uint8_t>* key_valid, const ForwardContext& ctx = {}) {
  const Tensor<T> out = mha(reshape(q, {1, q.dim(0), q.dim(1)}), reshape(kv, {1, kv.dim(0), kv.dim(1)}), key_valid, ctx);
  return reshape(out, {q.dim(0), q.dim(1)});
}

template <typename T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParamStore<T>& store, const std::string& name, Group group, std::size_t dim, std::size_t hidden,
              Rng& rng)
      : up_(store, name + ".up", group, dim, hidden, rng), down_(store, name + ".down", group, hidden, dim, rng) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return down_(relu(up_(x))); }

 private:
  Linear<T> up_, down_;
};

/// Pre-norm encoder block: x + Attn(N(x)), then + FFN(N(.)).
template <typename T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParamStore<T>& store, const std::string& name, Group group, AttentionConfig attn,
                   std::size_t ffn_hidden, NormKind norm, Rng& rng)
      : norm1_(store, name + ".norm1", group, attn.model_dim, norm),
        attn_(store, name + ".attn", group, attn, rng),
        norm2_(store, name + ".norm2", group, attn.model_dim, norm),
        ffn_(store, name + ".ffn", group, attn.model_dim, ffn_hidden, rng) {}

  Tensor<T> operator()(const Tensor<T>& x, const std::vector<std::uint8_t>* key_valid,
                       const ForwardContext& ctx) const {
    const Tensor<T> n1 = norm1_(x);
    const Tensor<T> h = add(x, attn_(n1, n1, key_valid, ctx));
    return add(h, ffn_(norm2_(h)));
  }

  MultiHeadAttention<T>& attention() { return attn_; }

 private:
  Norm<T> norm1_;
  MultiHeadAttention<T> attn_;
  Norm<T> norm2_;
  FeedForward<T> ffn_;
};

}  // namespace echwr
