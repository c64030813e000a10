#pragma once

// A trainable bundle (sensor model + auxiliary branch + temperature) and the
// float32 checkpoint format shared by full checkpoints and inference exports.
//
// File layout (little-endian):
//   "ECHWCKPT" | u16 version | u32 meta_len | meta (UTF-8 "key = value" lines)
//   u32 entry_count | entries...
// entry: u32 entry_len | u16 name_len | name | u8 group | u8 rank | rank x u32 dims | float32 payload

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "echwr/aux_branch.hpp"
#include "echwr/data.hpp"
#include "echwr/error.hpp"
#include "echwr/objectives.hpp"
#include "echwr/sensor_model.hpp"
#include "echwr/text.hpp"

namespace echwr {

inline constexpr char kCheckpointMagic[8] = {'E', 'C', 'H', 'W', 'C', 'K', 'P', 'T'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct BundleConfig {
  SensorBackboneConfig sensor;
  bool has_aux = true;
  PoolingConfig pool;  // d_in is taken from the sensor feature dim
  TextEncoderConfig text;
  double tau_init = 1.0 / 0.07;
  double tau_clamp = 100.0;
};

/// Ordered key/value metadata stored in the checkpoint header.
using Metadata = std::map<std::string, std::string>;

inline std::string format_metadata(const Metadata& m) {
  std::string out;
  for (const auto& [k, v] : m) out += k + " = " + v + "\n";
  return out;
}

inline Metadata parse_metadata(const std::string& text) {
  Metadata m;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("metadata: line without '=': " + line);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    m[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return m;
}

namespace detail {

inline const std::string& meta_get(const Metadata& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw FormatError("checkpoint: metadata key '" + key + "' missing");
  return it->second;
}

inline std::size_t meta_size(const Metadata& m, const std::string& key) {
  return static_cast<std::size_t>(std::stoull(meta_get(m, key)));
}

/// Vocabulary as space-separated hex codepoints, so any character survives.
inline std::string encode_vocab(const Vocabulary& v) {
  std::string out;
  char buf[16];
  for (char32_t c : v.chars()) {
    std::snprintf(buf, sizeof buf, "%s%X", out.empty() ? "" : " ", static_cast<unsigned>(c));
    out += buf;
  }
  return out;
}

inline Vocabulary decode_vocab(const std::string& s) {
  std::u32string chars;
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) chars.push_back(static_cast<char32_t>(std::stoul(tok, nullptr, 16)));
  return Vocabulary(chars);
}

inline Metadata sensor_metadata(const SensorBackboneConfig& s, const Vocabulary& vocab) {
  return {{"sensor.in_channels", std::to_string(s.in_channels)},
          {"sensor.conv_stages", s.stages_str()},
          {"sensor.lstm_hidden", std::to_string(s.lstm_hidden)},
          {"sensor.lstm_layers", std::to_string(s.lstm_layers)},
          {"sensor.num_classes", std::to_string(s.num_classes)},
          {"sensor.preset", to_string(s.preset)},
          {"vocab", encode_vocab(vocab)}};
}

inline SensorBackboneConfig sensor_from_metadata(const Metadata& m) {
  SensorBackboneConfig s;
  s.in_channels = meta_size(m, "sensor.in_channels");
  s.conv_stages = SensorBackboneConfig::parse_stages(meta_get(m, "sensor.conv_stages"));
  s.lstm_hidden = meta_size(m, "sensor.lstm_hidden");
  s.lstm_layers = meta_size(m, "sensor.lstm_layers");
  s.num_classes = meta_size(m, "sensor.num_classes");
  s.preset = parse_size_preset(meta_get(m, "sensor.preset"));
  return s;
}

struct RawEntry {
  std::string name;
  Group group;
  Shape shape;
  std::vector<float> values;
};

template <typename T>
std::string serialize_checkpoint(const Metadata& meta, const std::vector<Parameter<T>>& params) {
  io::Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put<std::uint16_t>(kCheckpointVersion);
  const std::string meta_text = format_metadata(meta);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(meta_text.size()));
  w.bytes(meta_text.data(), meta_text.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    io::Writer e;
    e.str16(p.name);
    e.put<std::uint8_t>(static_cast<std::uint8_t>(p.group));
    e.put<std::uint8_t>(static_cast<std::uint8_t>(p.value.rank()));
    for (auto d : p.value.shape()) e.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (T v : p.value.data()) e.put<float>(static_cast<float>(v));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.buffer().size()));
    w.bytes(e.buffer().data(), e.buffer().size());
  }
  return w.buffer();
}

inline std::pair<Metadata, std::vector<RawEntry>> parse_checkpoint(std::string_view bytes) {
  io::Reader r(bytes);
  if (r.take(sizeof kCheckpointMagic, "magic") != std::string_view(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw FormatError("checkpoint: bad magic");
  }
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto meta_len = r.get<std::uint32_t>("metadata length");
  Metadata meta = parse_metadata(std::string(r.take(meta_len, "metadata")));
  const auto count = r.get<std::uint32_t>("entry count");
  std::vector<RawEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    r.set_context("entry " + std::to_string(i));
    const auto len = r.get<std::uint32_t>("entry length");
    const std::size_t start = r.offset();
    RawEntry e;
    e.name = r.str16("name");
    const auto g = r.get<std::uint8_t>("group");
    if (g > 1) throw FormatError("checkpoint: entry '" + e.name + "' has unknown group " + std::to_string(g));
    e.group = static_cast<Group>(g);
    const auto rank = r.get<std::uint8_t>("rank");
    for (std::uint8_t k = 0; k < rank; ++k) e.shape.push_back(r.get<std::uint32_t>("dim"));
    e.values.resize(numel_of(e.shape));
    for (auto& v : e.values) v = r.get<float>("payload");
    if (r.offset() - start != len) throw FormatError("checkpoint: entry '" + e.name + "' length mismatch");
    entries.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes at offset " + std::to_string(r.offset()));
  return {std::move(meta), std::move(entries)};
}

/// Copies entries into the store by name. Every store parameter must be
/// present with a matching shape and group; extra entries are an error.
template <typename T>
void assign_entries(ParamStore<T>& store, const std::vector<RawEntry>& entries) {
  std::map<std::string, const RawEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  if (by_name.size() != store.all().size()) {
    throw FormatError("checkpoint: holds " + std::to_string(by_name.size()) + " tensors, model expects " +
                      std::to_string(store.all().size()));
  }
  for (auto& p : store.all()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing parameter '" + p.name + "'");
    const RawEntry& e = *it->second;
    if (e.shape != p.value.shape() || e.group != p.group) {
      throw FormatError("checkpoint: parameter '" + p.name + "' has shape " + shape_str(e.shape) + ", expected " +
                        shape_str(p.value.shape()));
    }
    auto dst = p.value.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(e.values[i]);
  }
}

}  // namespace detail

/// Deployable recognizer: primary parameters only.
template <typename T>
class InferenceModel {
 public:
  InferenceModel(const Vocabulary& vocab, SensorBackboneConfig cfg, std::uint64_t seed = 0)
      : vocab_(vocab), store_(std::make_unique<ParamStore<T>>()) {
    Rng rng(seed);
    sensor_ = SensorModel<T>(*store_, std::move(cfg), rng);
  }

  /// Eval-mode log-probabilities [B, T', classes] and per-sample output lengths.
  std::pair<Tensor<T>, std::vector<std::size_t>> log_probs(const Tensor<T>& signal,
                                                            const std::vector<std::size_t>& lengths) const {
    NoGradGuard ng;
    auto out = sensor_.forward(signal, lengths, {});
    return {log_softmax(out.logits, 2), out.out_lengths};
  }

  const SensorModel<T>& sensor() const { return sensor_; }
  const Vocabulary& vocab() const { return vocab_; }
  ParamStore<T>& store() { return *store_; }
  const ParamStore<T>& store() const { return *store_; }

 private:
  Vocabulary vocab_;
  std::unique_ptr<ParamStore<T>> store_;
  SensorModel<T> sensor_;
};

template <typename T>
class ModelBundle {
 public:
  ModelBundle(const Vocabulary& vocab, BundleConfig cfg, std::uint64_t seed) : vocab_(vocab), cfg_(std::move(cfg)) {
    if (cfg_.sensor.num_classes != vocab.num_classes()) {
      throw ConfigError("bundle: sensor num_classes " + std::to_string(cfg_.sensor.num_classes) +
                        " does not match vocabulary (" + std::to_string(vocab.num_classes()) + ")");
    }
    if (!(cfg_.tau_init > 0.0) || !(cfg_.tau_clamp > 0.0)) throw ConfigError("bundle: temperature must be positive");
    // Separate streams keep the primary initialization independent of the aux configuration.
    Rng sensor_rng(mix_seed(seed, 1));
    sensor_ = SensorModel<T>(store_, cfg_.sensor, sensor_rng);
    if (cfg_.has_aux) {
      Rng aux_rng(mix_seed(seed, 2));
      cfg_.pool.d_in = cfg_.sensor.feature_dim();
      pool_ = AttentionPool<T>(store_, "aux.pool", cfg_.pool, aux_rng);
      text_ = TextEncoder<T>(store_, "aux.text", vocab.size(), cfg_.text, aux_rng);
      const T log_tau = static_cast<T>(static_cast<float>(std::log(cfg_.tau_init)));
      tau_ = Temperature<T>{store_.add("aux.log_tau", Group::auxiliary, Tensor<T>::scalar(log_tau)), cfg_.tau_clamp};
    }
  }

  ModelBundle(const ModelBundle&) = delete;
  ModelBundle& operator=(const ModelBundle&) = delete;

  const SensorModel<T>& sensor() const { return sensor_; }
  const AttentionPool<T>& pool() const { return pool_; }
  const TextEncoder<T>& text() const { return text_; }
  const Temperature<T>& temperature() const { return tau_; }
  const Vocabulary& vocab() const { return vocab_; }
  const BundleConfig& config() const { return cfg_; }
  bool has_aux() const { return cfg_.has_aux; }
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }

  double tau() const {
    if (!cfg_.has_aux) return 0.0;
    return static_cast<double>(tau_.value().item());
  }

  std::pair<Tensor<T>, std::vector<std::size_t>> log_probs(const Tensor<T>& signal,
                                                            const std::vector<std::size_t>& lengths) const {
    NoGradGuard ng;
    auto out = sensor_.forward(signal, lengths, {});
    return {log_softmax(out.logits, 2), out.out_lengths};
  }

  Metadata metadata() const {
    Metadata m = detail::sensor_metadata(cfg_.sensor, vocab_);
    m["has_aux"] = cfg_.has_aux ? "1" : "0";
    if (cfg_.has_aux) {
      m["pool.d_out"] = std::to_string(cfg_.pool.d_out);
      m["pool.num_heads"] = std::to_string(cfg_.pool.num_heads);
      m["pool.gated"] = cfg_.pool.gated ? "1" : "0";
      m["pool.use_positions"] = cfg_.pool.use_positions ? "1" : "0";
      m["text.layers"] = std::to_string(cfg_.text.layers);
      m["text.heads"] = std::to_string(cfg_.text.heads);
      m["text.dim"] = std::to_string(cfg_.text.dim);
      m["text.ffn_hidden"] = std::to_string(cfg_.text.ffn_hidden);
      m["text.attn_dropout"] = std::to_string(cfg_.text.attn_dropout);
      m["text.norm_kind"] = to_string(cfg_.text.norm_kind);
      m["text.gated"] = cfg_.text.gated ? "1" : "0";
      m["text.num_registers"] = std::to_string(cfg_.text.num_registers);
      m["text.max_len"] = std::to_string(cfg_.text.max_len);
      m["tau.clamp"] = std::to_string(cfg_.tau_clamp);
    }
    return m;
  }

  std::string checkpoint_bytes() const { return detail::serialize_checkpoint(metadata(), store_.all()); }
  void save_checkpoint(const std::string& path) const { io::write_file(path, checkpoint_bytes()); }

  /// Primary parameters only; the auxiliary branch is dropped.
  std::string inference_bytes() const {
    std::vector<Parameter<T>> primary;
    for (const auto& p : store_.all())
      if (p.group == Group::primary) primary.push_back(p);
    if (primary.empty()) throw ConfigError("export: bundle has no primary parameters");
    return detail::serialize_checkpoint(detail::sensor_metadata(cfg_.sensor, vocab_), primary);
  }
  void export_inference_model(const std::string& path) const { io::write_file(path, inference_bytes()); }

  static std::unique_ptr<ModelBundle> from_checkpoint_bytes(std::string_view bytes) {
    auto [meta, entries] = detail::parse_checkpoint(bytes);
    BundleConfig cfg;
    cfg.sensor = detail::sensor_from_metadata(meta);
    cfg.has_aux = meta.count("has_aux") && meta.at("has_aux") == "1";
    if (cfg.has_aux) {
      using detail::meta_get;
      using detail::meta_size;
      cfg.pool.d_out = meta_size(meta, "pool.d_out");
      cfg.pool.num_heads = meta_size(meta, "pool.num_heads");
      cfg.pool.gated = meta_get(meta, "pool.gated") == "1";
      cfg.pool.use_positions = meta_get(meta, "pool.use_positions") == "1";
      cfg.text.layers = meta_size(meta, "text.layers");
      cfg.text.heads = meta_size(meta, "text.heads");
      cfg.text.dim = meta_size(meta, "text.dim");
      cfg.text.ffn_hidden = meta_size(meta, "text.ffn_hidden");
      cfg.text.attn_dropout = std::stod(meta_get(meta, "text.attn_dropout"));
      cfg.text.norm_kind = parse_norm_kind(meta_get(meta, "text.norm_kind"));
      cfg.text.gated = meta_get(meta, "text.gated") == "1";
      cfg.text.num_registers = meta_size(meta, "text.num_registers");
      cfg.text.max_len = meta_size(meta, "text.max_len");
      cfg.tau_clamp = std::stod(meta_get(meta, "tau.clamp"));
    }
    auto bundle = std::make_unique<ModelBundle>(detail::decode_vocab(detail::meta_get(meta, "vocab")), cfg, 0);
    detail::assign_entries(bundle->store_, entries);
    return bundle;
  }
  static std::unique_ptr<ModelBundle> load_checkpoint(const std::string& path) {
    return from_checkpoint_bytes(io::read_file(path));
  }

 private:
  Vocabulary vocab_;
  BundleConfig cfg_;
  ParamStore<T> store_;
  SensorModel<T> sensor_;
  AttentionPool<T> pool_;
  TextEncoder<T> text_;
  Temperature<T> tau_;
};

/// Reads either an inference export or a full checkpoint; auxiliary entries are ignored.
template <typename T>
std::unique_ptr<InferenceModel<T>> load_inference_model_bytes(std::string_view bytes) {
  auto [meta, entries] = detail::parse_checkpoint(bytes);
  std::vector<detail::RawEntry> primary;
  for (auto& e : entries)
    if (e.group == Group::primary) primary.push_back(std::move(e));
  auto model = std::make_unique<InferenceModel<T>>(detail::decode_vocab(detail::meta_get(meta, "vocab")),
                                                   detail::sensor_from_metadata(meta));
  detail::assign_entries(model->store(), primary);
  return model;
}

template <typename T>
std::unique_ptr<InferenceModel<T>> load_inference_model(const std::string& path) {
  return load_inference_model_bytes<T>(io::read_file(path));
}

/// Number of tensors per group stored in a checkpoint file image.
inline std::pair<std::size_t, std::size_t> checkpoint_group_counts(std::string_view bytes) {
  auto [meta, entries] = detail::parse_checkpoint(bytes);
  std::size_t primary = 0, aux = 0;
  for (const auto& e : entries) (e.group == Group::primary ? primary : aux)++;
  return {primary, aux};
}

}  // namespace echwr
