#pragma once

// Training-only alignment branch: attention pooling of encoder features into
// one sensor vector, and a character-level Transformer producing one text
// vector per transcript. Nothing here is reachable from the CTC logits.

#include <map>
#include <string>
#include <vector>

#include "echwr/autodiff.hpp"
#include "echwr/nn.hpp"
#include "echwr/text.hpp"

namespace echwr {

struct PoolingConfig {
  std::size_t d_in = 64;
  std::size_t d_out = 512;
  std::size_t num_heads = 8;
  bool gated = false;
  bool use_positions = true;

  void validate() const {
    if (d_out == 0 || num_heads == 0 || d_out % num_heads != 0) {
      throw ConfigError("pooling: d_out " + std::to_string(d_out) + " not divisible by " + std::to_string(num_heads) +
                        " heads");
    }
    if (d_out % 2 != 0) throw ConfigError("pooling: d_out must be even for sinusoidal positions");
  }
};

struct TextEncoderConfig {
  std::size_t layers = 3;
  std::size_t heads = 8;
  std::size_t dim = 512;
  std::size_t ffn_hidden = 2048;
  double attn_dropout = 0.1;
  NormKind norm_kind = NormKind::layer;
  bool gated = false;
  std::size_t num_registers = 4;
  std::size_t max_len = 64;  // bound on CLS + registers + characters
  bool allow_empty = false;

  void validate() const {
    if (layers == 0) throw ConfigError("text encoder: needs at least one layer");
    if (dim == 0 || heads == 0 || dim % heads != 0) throw ConfigError("text encoder: dim not divisible by heads");
    if (ffn_hidden == 0) throw ConfigError("text encoder: ffn_hidden must be positive");
    if (max_len < 2 + num_registers) throw ConfigError("text encoder: max_len leaves no room for characters");
  }
};

/// Masked-mean-query attention pooling: [B, T', d_in] -> [B, d_out] (not normalized).
template <typename T>
class AttentionPool {
 public:
  AttentionPool() = default;
  AttentionPool(ParamStore<T>& store, const std::string& name, PoolingConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    proj_ = Linear<T>(store, name + ".proj", Group::auxiliary, cfg.d_in, cfg.d_out, rng);
    attn_ = MultiHeadAttention<T>(store, name + ".attn", Group::auxiliary,
                                  AttentionConfig{cfg.num_heads, cfg.d_out, 0.0, cfg.gated}, rng);
  }

  Tensor<T> operator()(const Tensor<T>& features, const std::vector<std::size_t>& valid_lens,
                       const ForwardContext& ctx = {}) const {
    if (features.rank() != 3 || features.dim(2) != cfg_.d_in) {
      throw ShapeError("attention pool: expected [B, T', " + std::to_string(cfg_.d_in) + "], got " +
                       shape_str(features.shape()));
    }
    const std::size_t B = features.dim(0), L = features.dim(1), D = cfg_.d_out;
    if (valid_lens.size() != B) throw ShapeError("attention pool: valid lengths do not match batch");
    std::vector<T> weights(B * L, T(0));
    std::vector<std::uint8_t> key_valid(B * L, 0);
    for (std::size_t b = 0; b < B; ++b) {
      if (valid_lens[b] == 0 || valid_lens[b] > L) {
        throw ShapeError("attention pool: valid length " + std::to_string(valid_lens[b]) + " outside [1, " +
                         std::to_string(L) + "]");
      }
      for (std::size_t t = 0; t < valid_lens[b]; ++t) {
        weights[b * L + t] = T(1) / static_cast<T>(valid_lens[b]);
        key_valid[b * L + t] = 1;
      }
    }
    Tensor<T> projected = proj_(features);
    if (cfg_.use_positions) projected = add(projected, sinusoidal_positions<T>(L, D));
    // Padded steps carry weight exactly zero, so the query is the mean over valid steps only.
    const Tensor<T> query = sum(mul(projected, Tensor<T>::from({B, L, 1}, std::move(weights))), 1, true);
    return reshape(attn_(query, projected, &key_valid, ctx), {B, D});
  }

  const PoolingConfig& config() const { return cfg_; }
  Linear<T>& projection() { return proj_; }
  MultiHeadAttention<T>& attention() { return attn_; }

 private:
  PoolingConfig cfg_;
  Linear<T> proj_;
  MultiHeadAttention<T> attn_;
};

/// Character Transformer. Sequence layout: [CLS] registers... characters...;
/// learnable positions are added to character tokens only. Returns the final
/// CLS state per transcript: [K, dim] (not normalized).
template <typename T>
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(ParamStore<T>& store, const std::string& name, std::size_t vocab_size, TextEncoderConfig cfg, Rng& rng)
      : cfg_(cfg), vocab_size_(vocab_size) {
    cfg_.validate();
    if (vocab_size == 0) throw ConfigError("text encoder: empty vocabulary");
    const std::size_t D = cfg.dim;
    cls_ = store.add(name + ".cls", Group::auxiliary, init::normal<T>({1, D}, 0.02, rng));
    if (cfg.num_registers > 0) {
      registers_ = store.add(name + ".registers", Group::auxiliary, init::normal<T>({cfg.num_registers, D}, 0.02, rng));
    }
    chars_ = store.add(name + ".char_embedding", Group::auxiliary, init::normal<T>({vocab_size, D}, 0.02, rng));
    positions_ = store.add(name + ".positions", Group::auxiliary, init::normal<T>({cfg.max_len, D}, 0.02, rng));
    const AttentionConfig acfg{cfg.heads, D, cfg.attn_dropout, cfg.gated};
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      blocks_.emplace_back(store, name + ".block" + std::to_string(l), Group::auxiliary, acfg, cfg.ffn_hidden,
                           cfg.norm_kind, rng);
    }
    final_norm_ = Norm<T>(store, name + ".final_norm", Group::auxiliary, D, cfg.norm_kind);
  }

  Tensor<T> operator()(const std::vector<LabelSeq>& labels, const ForwardContext& ctx = {}) const {
    if (labels.empty()) throw ShapeError("text encoder: no transcripts");
    const std::size_t K = labels.size(), D = cfg_.dim, R = cfg_.num_registers;
    std::size_t longest = 0;
    for (const auto& l : labels) {
      if (l.empty() && !cfg_.allow_empty) throw ConfigError("text encoder: empty transcript");
      if (l.size() + 1 + R > cfg_.max_len) {
        throw ShapeError("text encoder: transcript of length " + std::to_string(l.size()) + " plus CLS and " +
                         std::to_string(R) + " registers exceeds max_len " + std::to_string(cfg_.max_len));
      }
      for (auto id : l) {
        if (id == kBlank || id > vocab_size_) throw ConfigError("text encoder: unknown character id " + std::to_string(id));
      }
      longest = std::max(longest, l.size());
    }
    const std::size_t L = 1 + R + longest;

    // Token table rows: 0 = CLS, 1..R = registers, R+1.. = characters.
    std::vector<Tensor<T>> table_parts{cls_};
    if (R > 0) table_parts.push_back(registers_);
    table_parts.push_back(chars_);
    const Tensor<T> token_table = concat(table_parts, 0);
    // Position table rows: 0 = zero (non-character tokens), 1.. = learnable positions.
    const Tensor<T> pos_table = concat(std::vector<Tensor<T>>{Tensor<T>::zeros({1, D}), positions_}, 0);

    std::vector<std::size_t> token_ids(K * L, 0), pos_ids(K * L, 0);
    std::vector<std::uint8_t> key_valid(K * L, 0);
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t r = 0; r <= R; ++r) {
        token_ids[k * L + r] = r;
        key_valid[k * L + r] = 1;
      }
      for (std::size_t p = 0; p < labels[k].size(); ++p) {
        token_ids[k * L + 1 + R + p] = R + labels[k][p];
        pos_ids[k * L + 1 + R + p] = 1 + p;
        key_valid[k * L + 1 + R + p] = 1;
      }
    }
    Tensor<T> x = reshape(add(gather_rows(token_table, token_ids), gather_rows(pos_table, pos_ids)), {K, L, D});
    for (const auto& block : blocks_) x = block(x, &key_valid, ctx);
    return reshape(final_norm_(slice(x, 1, 0, 1)), {K, D});
  }

  const TextEncoderConfig& config() const { return cfg_; }
  std::size_t vocab_size() const { return vocab_size_; }
  std::vector<TransformerBlock<T>>& blocks() { return blocks_; }

 private:
  TextEncoderConfig cfg_;
  std::size_t vocab_size_ = 0;
  Tensor<T> cls_, registers_, chars_, positions_;
  std::vector<TransformerBlock<T>> blocks_;
  Norm<T> final_norm_;
};

template <typename T>
struct AlignedEmbeddings {
  Tensor<T> c_sig;   // [N, D], unit rows
  Tensor<T> z_text;  // [N + N*M, D], unit rows: positives, then negatives sample-major
  std::size_t n = 0;
  std::size_t m = 0;

  Tensor<T> z_pos() const { return slice(z_text, 0, 0, n); }
  /// [N, M, D]; undefined when M == 0.
  Tensor<T> z_neg() const {
    if (m == 0) return {};
    return reshape(slice(z_text, 0, n, n + n * m), {n, m, z_text.dim(1)});
  }
};

/// Pools and encodes one batch. Identical transcripts (positives or
/// negatives) are encoded once and shared.
template <typename T>
AlignedEmbeddings<T> align_batch(const AttentionPool<T>& pool, const TextEncoder<T>& text, const Tensor<T>& features,
                                 const std::vector<std::size_t>& valid_lens, const std::vector<LabelSeq>& labels,
                                 const std::vector<std::vector<LabelSeq>>& negatives, const ForwardContext& ctx = {}) {
  const std::size_t N = labels.size();
  if (features.dim(0) != N || valid_lens.size() != N) throw ShapeError("align_batch: batch size mismatch");
  if (!negatives.empty() && negatives.size() != N) throw ShapeError("align_batch: negatives do not match batch");
  const std::size_t M = negatives.empty() ? 0 : negatives[0].size();
  for (const auto& negs : negatives) {
    if (negs.size() != M) throw ShapeError("align_batch: samples carry different numbers of negatives");
  }

  std::map<LabelSeq, std::size_t> slot;
  std::vector<LabelSeq> unique;
  std::vector<std::size_t> rows;
  auto place = [&](const LabelSeq& s) {
    auto [it, inserted] = slot.emplace(s, unique.size());
    if (inserted) unique.push_back(s);
    rows.push_back(it->second);
  };
  for (const auto& l : labels) place(l);
  for (const auto& negs : negatives)
    for (const auto& s : negs) place(s);

  AlignedEmbeddings<T> out;
  out.n = N;
  out.m = M;
  out.c_sig = l2_normalize(pool(features, valid_lens, ctx), 1);
  const Tensor<T> encoded = l2_normalize(text(unique, ctx), 1);
  out.z_text = gather_rows(encoded, rows);
  return out;
}

}  // namespace echwr
