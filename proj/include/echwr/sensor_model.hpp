#pragma once

// The deployable recognizer: strided 1-D convolutions (the feature encoder)
// followed by stacked bidirectional LSTMs and a per-step linear CTC head.

#include <cstddef>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "echwr/autodiff.hpp"
#include "echwr/nn.hpp"

namespace echwr {

struct ConvStage {
  std::size_t out_channels = 0;
  std::size_t kernel = 5;
  std::size_t stride = 1;
  friend bool operator==(const ConvStage&, const ConvStage&) = default;
};

enum class SizePreset { S, B, custom };

inline std::string to_string(SizePreset p) {
  switch (p) {
    case SizePreset::S: return "S";
    case SizePreset::B: return "B";
    case SizePreset::custom: return "custom";
  }
  return "?";
}

inline SizePreset parse_size_preset(std::string_view s) {
  if (s == "S" || s == "s") return SizePreset::S;
  if (s == "B" || s == "b") return SizePreset::B;
  if (s == "custom") return SizePreset::custom;
  throw ConfigError("unknown size preset '" + std::string(s) + "' (expected S or B)");
}

struct SensorBackboneConfig {
  std::size_t in_channels = 13;
  std::vector<ConvStage> conv_stages;
  std::size_t lstm_hidden = 64;
  std::size_t lstm_layers = 1;
  std::size_t num_classes = 2;
  SizePreset preset = SizePreset::custom;

  /// 3 conv stages 32/48/64, kernel 5, strides 2/2/1; one BiLSTM layer, hidden 64.
  static SensorBackboneConfig small(std::size_t num_classes, std::size_t in_channels = 13) {
    return {in_channels, {{32, 5, 2}, {48, 5, 2}, {64, 5, 1}}, 64, 1, num_classes, SizePreset::S};
  }
  /// 4 conv stages 64/96/128/160, kernel 5, strides 2/2/1/1; two BiLSTM layers, hidden 128.
  static SensorBackboneConfig base(std::size_t num_classes, std::size_t in_channels = 13) {
    return {in_channels, {{64, 5, 2}, {96, 5, 2}, {128, 5, 1}, {160, 5, 1}}, 128, 2, num_classes, SizePreset::B};
  }
  static SensorBackboneConfig from_preset(SizePreset p, std::size_t num_classes, std::size_t in_channels = 13) {
    if (p == SizePreset::B) return base(num_classes, in_channels);
    return small(num_classes, in_channels);
  }

  static std::size_t pad_for(const ConvStage& s) { return s.kernel / 2; }

  /// Per stage: L_out = floor((L_in + 2*pad - kernel) / stride) + 1; 0 means too short.
  std::size_t out_length(std::size_t len) const {
    for (const auto& s : conv_stages) {
      const std::size_t pad = pad_for(s);
      if (len == 0 || len + 2 * pad < s.kernel) return 0;
      len = (len + 2 * pad - s.kernel) / s.stride + 1;
    }
    return len;
  }

  /// Smallest input length every stage can process.
  std::size_t min_input_length() const {
    std::size_t t = 1;
    while (out_length(t) == 0) ++t;
    return t;
  }

  std::size_t stride_product() const {
    std::size_t p = 1;
    for (const auto& s : conv_stages) p *= s.stride;
    return p;
  }

  std::size_t feature_dim() const { return conv_stages.empty() ? in_channels : conv_stages.back().out_channels; }

  void validate() const {
    if (num_classes < 2) throw ConfigError("sensor: num_classes must be at least 2 (blank + one character)");
    if (in_channels == 0) throw ConfigError("sensor: in_channels must be positive");
    if (conv_stages.empty()) throw ConfigError("sensor: at least one conv stage is required");
    for (const auto& s : conv_stages)
      if (s.out_channels == 0 || s.kernel == 0 || s.stride == 0) throw ConfigError("sensor: invalid conv stage");
    if (lstm_hidden == 0 || lstm_layers == 0) throw ConfigError("sensor: LSTM needs positive hidden size and layers");
  }

  std::string stages_str() const {
    std::string s;
    for (std::size_t i = 0; i < conv_stages.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(conv_stages[i].out_channels) + ":" + std::to_string(conv_stages[i].kernel) + ":" +
           std::to_string(conv_stages[i].stride);
    }
    return s;
  }

  static std::vector<ConvStage> parse_stages(const std::string& text) {
    std::vector<ConvStage> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      ConvStage st;
      char c1 = 0, c2 = 0;
      std::stringstream is(item);
      if (!(is >> st.out_channels >> c1 >> st.kernel >> c2 >> st.stride) || c1 != ':' || c2 != ':') {
        throw ConfigError("bad conv stage '" + item + "' (expected out:kernel:stride)");
      }
      out.push_back(st);
    }
    return out;
  }

  friend bool operator==(const SensorBackboneConfig&, const SensorBackboneConfig&) = default;
};

template <typename T>
struct SensorOutput {
  Tensor<T> logits;    // [B, T', num_classes]
  Tensor<T> features;  // [B, T', feature_dim], zero beyond each sample's out length
  std::vector<std::size_t> out_lengths;
};

template <typename T>
class SensorModel {
 public:
  SensorModel() = default;
  SensorModel(ParamStore<T>& store, SensorBackboneConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::size_t in = cfg_.in_channels;
    for (std::size_t i = 0; i < cfg_.conv_stages.size(); ++i) {
      const auto& s = cfg_.conv_stages[i];
      convs_.emplace_back(store, "sensor.conv" + std::to_string(i), Group::primary, in, s.out_channels, s.kernel,
                          s.stride, SensorBackboneConfig::pad_for(s), rng);
      in = s.out_channels;
    }
    for (std::size_t l = 0; l < cfg_.lstm_layers; ++l) {
      lstms_.emplace_back(store, "sensor.lstm" + std::to_string(l), Group::primary, in, cfg_.lstm_hidden, rng);
      in = 2 * cfg_.lstm_hidden;
    }
    head_ = Linear<T>(store, "sensor.head", Group::primary, in, cfg_.num_classes, rng);
  }

  /// signal [B, T, C] zero padded; lengths are the valid steps per sample.
  SensorOutput<T> forward(const Tensor<T>& signal, const std::vector<std::size_t>& lengths,
                          const ForwardContext& ctx = {}) const {
    (void)ctx;
    if (signal.rank() != 3 || signal.dim(2) != cfg_.in_channels) {
      throw ShapeError("sensor: expected [B, T, " + std::to_string(cfg_.in_channels) + "] signal, got " +
                       shape_str(signal.shape()));
    }
    const std::size_t B = signal.dim(0);
    if (lengths.size() != B) throw ShapeError("sensor: lengths do not match batch size");
    const std::size_t min_len = cfg_.min_input_length();
    for (std::size_t b = 0; b < B; ++b) {
      if (lengths[b] < min_len || lengths[b] > signal.dim(1)) {
        throw ShapeError("sensor: sample " + std::to_string(b) + " has length " + std::to_string(lengths[b]) +
                         "; minimum input length is " + std::to_string(min_len) + " and padded length is " +
                         std::to_string(signal.dim(1)));
      }
    }
    std::vector<std::size_t> lens = lengths;
    Tensor<T> x = mask_tail(signal, lens);
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      x = relu(convs_[i](x));
      for (auto& l : lens) l = convs_[i].out_length(l);
      x = mask_tail(x, lens);
    }
    SensorOutput<T> out;
    out.features = x;
    out.out_lengths = lens;
    for (const auto& lstm : lstms_) x = lstm(x, lens);
    out.logits = head_(x);
    return out;
  }

  /// Convenience for a single unpadded signal [T, C].
  SensorOutput<T> forward_one(const Tensor<T>& signal, const ForwardContext& ctx = {}) const {
    return forward(reshape(signal, {1, signal.dim(0), signal.dim(1)}), {signal.dim(0)}, ctx);
  }

  const SensorBackboneConfig& config() const { return cfg_; }
  Linear<T>& head() { return head_; }

 private:
  // Zeroes steps at or beyond each sample's valid length so padded batches
  // compute exactly what each sample would compute alone.
  static Tensor<T> mask_tail(const Tensor<T>& x, const std::vector<std::size_t>& lens) {
    const std::size_t B = x.dim(0), L = x.dim(1);
    bool any = false;
    Mask m{{B, L, 1}, std::vector<std::uint8_t>(B * L, 0)};
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = lens[b]; t < L; ++t) {
        m.values[b * L + t] = 1;
        any = true;
      }
    return any ? masked_fill(x, m, T(0)) : x;
  }

  SensorBackboneConfig cfg_;
  std::vector<Conv1d<T>> convs_;
  std::vector<BiLstm<T>> lstms_;
  Linear<T> head_;
};

}  // namespace echwr
