#pragma once

// Dataset container, synthetic multi-writer generator, writer/word splits,
// character statistics and padded batching.
//
// Container layout (little-endian throughout):
//   "ECHW1" | u16 version | u16 channels | u64 record count
//   per record: u16 len + sample_id | u16 len + writer_id | u16 len + transcript
//               u32 T | T*channels float32, row-major [T, channels]

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/crc.hpp>

#include "echwr/autodiff.hpp"
#include "echwr/error.hpp"
#include "echwr/negatives.hpp"
#include "echwr/rng.hpp"
#include "echwr/text.hpp"

namespace echwr {

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

struct SampleRecord {
  std::string sample_id;
  std::string writer_id;
  std::string transcript;
  std::size_t length = 0;     // T
  std::vector<float> signal;  // [T, channels]

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

struct Dataset {
  std::size_t channels = 13;
  std::vector<SampleRecord> records;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline constexpr char kDatasetMagic[5] = {'E', 'C', 'H', 'W', '1'};
inline constexpr std::uint16_t kDatasetVersion = 1;

namespace io {

class Writer {
 public:
  template <typename U>
  void put(U v) {
    char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    out_.append(b, sizeof(U));
  }
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void str16(const std::string& s) {
    if (s.size() > UINT16_MAX) throw FormatError("string field longer than 65535 bytes");
    put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::string& buffer() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, data_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    const auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str16(const char* what) {
    const auto n = get<std::uint16_t>(what);
    return std::string(take(n, what));
  }
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }
  void set_context(std::string ctx) { context_ = std::move(ctx); }

 private:
  void need(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) {
      throw FormatError("truncated input at byte offset " + std::to_string(pos_) + " while reading " + what +
                        (context_.empty() ? "" : " (" + context_ + ")"));
    }
  }
  std::string_view data_;
  std::size_t pos_ = 0;
  std::string context_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("failed writing '" + path + "'");
}

inline std::uint32_t crc32(std::string_view bytes) {
  boost::crc_32_type crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

}  // namespace io

inline void validate_record(const SampleRecord& r, std::size_t channels, std::size_t index) {
  const std::string where = "record " + std::to_string(index) + " ('" + r.sample_id + "')";
  if (r.length == 0) throw FormatError(where + ": empty signal");
  if (r.transcript.empty()) throw FormatError(where + ": empty transcript");
  if (r.signal.size() != r.length * channels) throw FormatError(where + ": signal size does not match T x channels");
  for (float v : r.signal)
    if (!std::isfinite(v)) throw FormatError(where + ": non-finite signal value");
}

inline std::string serialize_dataset(const Dataset& ds) {
  io::Writer w;
  w.bytes(kDatasetMagic, sizeof(kDatasetMagic));
  w.put<std::uint16_t>(kDatasetVersion);
  if (ds.channels == 0 || ds.channels > UINT16_MAX) throw FormatError("dataset: invalid channel count");
  w.put<std::uint16_t>(static_cast<std::uint16_t>(ds.channels));
  w.put<std::uint64_t>(ds.records.size());
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    validate_record(r, ds.channels, i);
    w.str16(r.sample_id);
    w.str16(r.writer_id);
    w.str16(r.transcript);
    if (r.length > UINT32_MAX) throw FormatError("dataset: signal too long");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.length));
    w.bytes(r.signal.data(), r.signal.size() * sizeof(float));
  }
  return std::move(w.buffer());
}

inline Dataset parse_dataset(std::string_view bytes) {
  io::Reader r(bytes);
  if (r.take(sizeof(kDatasetMagic), "magic") != std::string_view(kDatasetMagic, sizeof(kDatasetMagic))) {
    throw FormatError("dataset: bad magic (expected ECHW1)");
  }
  const auto version = r.get<std::uint16_t>("version");
  if (version != kDatasetVersion) throw FormatError("dataset: unsupported version " + std::to_string(version));
  Dataset ds;
  ds.channels = r.get<std::uint16_t>("channel count");
  if (ds.channels == 0) throw FormatError("dataset: zero channels");
  const auto count = r.get<std::uint64_t>("record count");
  for (std::uint64_t i = 0; i < count; ++i) {
    r.set_context("record " + std::to_string(i));
    SampleRecord rec;
    rec.sample_id = r.str16("sample_id");
    rec.writer_id = r.str16("writer_id");
    rec.transcript = r.str16("transcript");
    rec.length = r.get<std::uint32_t>("signal length");
    const auto payload = r.take(rec.length * ds.channels * sizeof(float), "signal payload");
    rec.signal.resize(rec.length * ds.channels);
    std::memcpy(rec.signal.data(), payload.data(), payload.size());
    validate_record(rec, ds.channels, static_cast<std::size_t>(i));
    ds.records.push_back(std::move(rec));
  }
  if (!r.done()) throw FormatError("dataset: trailing bytes at offset " + std::to_string(r.offset()));
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) { io::write_file(path, serialize_dataset(ds)); }
inline Dataset load_dataset(const std::string& path) { return parse_dataset(io::read_file(path)); }

inline std::uint32_t dataset_checksum(const Dataset& ds) { return io::crc32(serialize_dataset(ds)); }

inline std::vector<std::string> transcripts_of(const std::vector<SampleRecord>& records) {
  std::vector<std::string> t;
  t.reserve(records.size());
  for (const auto& r : records) t.push_back(r.transcript);
  return t;
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct SynthConfig {
  std::vector<std::string> words;
  std::size_t writers = 2;
  std::size_t samples = 0;
  std::size_t channels = 13;
  std::uint64_t seed = 0;
  double noise_sigma = 0.05;
};

/// Template lengths are 12..20 steps, fixed per (character, dataset seed).
inline constexpr std::size_t kTemplateMinLength = 12;
inline constexpr std::size_t kTemplateLengthSpan = 9;
inline constexpr int kTemplateHarmonics = 3;

struct CharTemplate {
  std::size_t length = 0;
  std::vector<double> values;  // [length, channels]
};

inline CharTemplate char_template(char32_t c, std::size_t channels, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x100000000ULL + static_cast<std::uint64_t>(c)));
  CharTemplate t;
  t.length = kTemplateMinLength + static_cast<std::size_t>(rng.uniform_int(kTemplateLengthSpan));
  t.values.assign(t.length * channels, 0.0);
  for (std::size_t ch = 0; ch < channels; ++ch) {
    const double offset = rng.normal(0.0, 0.5);
    double amp[kTemplateHarmonics], phase[kTemplateHarmonics];
    for (int h = 0; h < kTemplateHarmonics; ++h) {
      amp[h] = rng.normal(0.0, 1.0 / (h + 1));
      phase[h] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    for (std::size_t s = 0; s < t.length; ++s) {
      double v = offset;
      const double u = (static_cast<double>(s) + 0.5) / static_cast<double>(t.length);
      for (int h = 0; h < kTemplateHarmonics; ++h) v += amp[h] * std::sin(2.0 * std::numbers::pi * (h + 1) * u + phase[h]);
      t.values[s * channels + ch] = v;
    }
  }
  return t;
}

struct WriterStyle {
  std::vector<double> gain, shift;  // per channel
  double warp = 1.0;                // global time-warp factor in [0.8, 1.25]
};

inline WriterStyle writer_style(std::size_t writer, std::size_t channels, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x200000000ULL + writer));
  WriterStyle s;
  for (std::size_t ch = 0; ch < channels; ++ch) {
    s.gain.push_back(rng.uniform(0.8, 1.2));
    s.shift.push_back(rng.normal(0.0, 0.1));
  }
  s.warp = rng.uniform(0.8, 1.25);
  return s;
}

/// Signal length of a word for a writer: round(warp * sum of template lengths).
inline std::size_t synth_length(const std::string& word, std::size_t writer, std::size_t channels, std::uint64_t seed) {
  std::size_t total = 0;
  for (char32_t c : utf8_to_u32(word)) total += char_template(c, channels, seed).length;
  const double warped = std::round(writer_style(writer, channels, seed).warp * static_cast<double>(total));
  return std::max<std::size_t>(1, static_cast<std::size_t>(warped));
}

inline std::vector<float> synth_signal(const std::string& word, std::size_t writer, std::size_t sample_index,
                                       std::size_t channels, std::uint64_t seed, double noise_sigma) {
  std::vector<double> base;
  std::size_t base_len = 0;
  for (char32_t c : utf8_to_u32(word)) {
    const CharTemplate t = char_template(c, channels, seed);
    base.insert(base.end(), t.values.begin(), t.values.end());
    base_len += t.length;
  }
  if (base_len == 0) throw GenerationError("synth: empty word");
  const WriterStyle style = writer_style(writer, channels, seed);
  const std::size_t T = synth_length(word, writer, channels, seed);
  Rng noise(mix_seed(mix_seed(mix_seed(seed, fnv1a(word)), writer), sample_index));
  std::vector<float> out(T * channels);
  for (std::size_t j = 0; j < T; ++j) {
    // Linear resampling of the concatenated templates onto T steps.
    double pos = (static_cast<double>(j) + 0.5) * static_cast<double>(base_len) / static_cast<double>(T) - 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(base_len - 1));
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, base_len - 1);
    const double frac = pos - static_cast<double>(lo);
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const double v = (1.0 - frac) * base[lo * channels + ch] + frac * base[hi * channels + ch];
      out[j * channels + ch] = static_cast<float>(style.gain[ch] * v + style.shift[ch] + noise.normal(0.0, noise_sigma));
    }
  }
  return out;
}

/// Sample i draws word i % W and writer (i / W) % writers, so every
/// (word, writer) pair is covered before any repeats.
inline Dataset synth_generate(const SynthConfig& cfg) {
  if (cfg.words.empty()) throw ConfigError("synth: word list is empty");
  if (cfg.writers == 0) throw ConfigError("synth: need at least one writer");
  if (cfg.channels == 0) throw ConfigError("synth: need at least one channel");
  Dataset ds;
  ds.channels = cfg.channels;
  const std::size_t W = cfg.words.size();
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    SampleRecord r;
    const std::size_t writer = (i / W) % cfg.writers;
    const std::size_t rep = i / (W * cfg.writers);
    r.transcript = cfg.words[i % W];
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%06zu", i);
    r.sample_id = buf;
    std::snprintf(buf, sizeof(buf), "w%03zu", writer);
    r.writer_id = buf;
    r.signal = synth_signal(r.transcript, writer, rep, cfg.channels, cfg.seed, cfg.noise_sigma);
    r.length = r.signal.size() / cfg.channels;
    ds.records.push_back(std::move(r));
  }
  return ds;
}

/// Deterministic pseudo-words over lowercase letters, lengths 2..8, distinct.
inline std::vector<std::string> synth_words(std::size_t count, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x300000000ULL));
  std::set<std::string> seen;
  std::vector<std::string> words;
  std::size_t guard = 0;
  while (words.size() < count) {
    if (++guard > count * 1000 + 1000) throw GenerationError("synth: could not generate enough distinct words");
    const std::size_t len = 2 + static_cast<std::size_t>(rng.uniform_int(7));
    std::string w;
    for (std::size_t k = 0; k < len; ++k) w.push_back(static_cast<char>('a' + rng.uniform_int(26)));
    if (seen.insert(w).second) words.push_back(w);
  }
  return words;
}

// ---------------------------------------------------------------------------
// Splits

enum class SplitKind { writer_dependent, writer_independent };

inline SplitKind parse_split_kind(std::string_view s) {
  if (s == "wd" || s == "WD" || s == "writer_dependent") return SplitKind::writer_dependent;
  if (s == "wi" || s == "WI" || s == "writer_independent") return SplitKind::writer_independent;
  throw ConfigError("unknown split kind '" + std::string(s) + "' (expected wd or wi)");
}

struct SplitSpec {
  SplitKind kind = SplitKind::writer_dependent;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct Split {
  std::vector<SampleRecord> train, val;
};

/// WD holds out whole words (writers shared); WI holds out whole writers
/// (words shared). floor(fraction * units) units go to validation.
inline Split make_split(const std::vector<SampleRecord>& records, const SplitSpec& spec) {
  if (!(spec.holdout_fraction > 0.0 && spec.holdout_fraction < 1.0)) {
    throw ConfigError("split: holdout fraction must be in (0,1)");
  }
  const bool by_word = spec.kind == SplitKind::writer_dependent;
  auto unit_of = [by_word](const SampleRecord& r) -> const std::string& { return by_word ? r.transcript : r.writer_id; };
  std::set<std::string> unit_set;
  for (const auto& r : records) unit_set.insert(unit_of(r));
  std::vector<std::string> units(unit_set.begin(), unit_set.end());
  const auto n_val = static_cast<std::size_t>(std::floor(spec.holdout_fraction * static_cast<double>(units.size())));
  if (n_val == 0 || n_val >= units.size()) {
    throw ConfigError(std::string("split: ") + std::to_string(units.size()) + " distinct " +
                      (by_word ? "words" : "writers") + " are insufficient for fraction " +
                      std::to_string(spec.holdout_fraction));
  }
  Rng rng(mix_seed(spec.seed, by_word ? 0x57 : 0x58));
  rng.shuffle(units);
  const std::set<std::string> val_units(units.begin(), units.begin() + static_cast<std::ptrdiff_t>(n_val));
  Split s;
  for (const auto& r : records) (val_units.count(unit_of(r)) ? s.val : s.train).push_back(r);
  return s;
}

// ---------------------------------------------------------------------------
// Character statistics

struct CharFrequency {
  std::u32string chars;
  std::vector<std::size_t> train, val;

  /// Characters seen in training but never in validation.
  std::u32string missing_in_val() const {
    std::u32string out;
    for (std::size_t i = 0; i < chars.size(); ++i)
      if (train[i] > 0 && val[i] == 0) out.push_back(chars[i]);
    return out;
  }

  std::string to_csv() const {
    std::string out = "character,train,val,missing_in_val\n";
    for (std::size_t i = 0; i < chars.size(); ++i) {
      std::string c = u32_to_utf8(std::u32string(1, chars[i]));
      if (c == "," || c == "\"") c = "\"" + (c == "\"" ? std::string("\"\"") : c) + "\"";
      out += c + "," + std::to_string(train[i]) + "," + std::to_string(val[i]) + "," +
             ((train[i] > 0 && val[i] == 0) ? "1" : "0") + "\n";
    }
    return out;
  }
};

inline std::map<char32_t, std::size_t> char_histogram(const std::vector<SampleRecord>& records) {
  std::map<char32_t, std::size_t> h;
  for (const auto& r : records)
    for (char32_t c : utf8_to_u32(r.transcript)) ++h[c];
  return h;
}

/// Counts over the union of characters of both splits, in codepoint order.
inline CharFrequency char_frequency(const std::vector<SampleRecord>& train, const std::vector<SampleRecord>& val) {
  const auto ht = char_histogram(train), hv = char_histogram(val);
  std::set<char32_t> all;
  for (const auto& [c, n] : ht) all.insert(c);
  for (const auto& [c, n] : hv) all.insert(c);
  CharFrequency f;
  for (char32_t c : all) {
    f.chars.push_back(c);
    f.train.push_back(ht.count(c) ? ht.at(c) : 0);
    f.val.push_back(hv.count(c) ? hv.at(c) : 0);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  std::size_t max_length = 0;
  std::size_t channels = 0;
  std::vector<float> signal;  // [B, max_length, channels], zero padded
  std::vector<std::size_t> lengths;
  std::vector<LabelSeq> labels;
  std::vector<std::vector<LabelSeq>> negatives;  // per sample, 3S each
  std::vector<std::string> transcripts;
  std::vector<std::string> sample_ids;
  std::vector<std::size_t> indices;  // positions in the source record list

  std::size_t size() const { return lengths.size(); }

  template <typename T>
  Tensor<T> signal_tensor() const {
    return Tensor<T>::from({size(), max_length, channels}, std::vector<T>(signal.begin(), signal.end()));
  }
};

struct BatchOptions {
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  bool shuffle = true;
  ErrorSetConfig error_cfg;  // alphabet defaults to the vocabulary when empty
  bool freeze_negatives = false;
};

/// Negatives seed for one sample in one epoch; frozen negatives ignore the epoch.
inline std::uint64_t negatives_seed(std::uint64_t base, const std::string& sample_id, std::size_t epoch, bool frozen) {
  return mix_seed(sample_seed(base, sample_id), frozen ? 0 : epoch + 1);
}

inline Batch collate(const std::vector<SampleRecord>& records, const std::vector<std::size_t>& idx, std::size_t channels,
                     const Vocabulary& vocab, const BatchOptions& opt, std::size_t epoch) {
  Batch b;
  b.channels = channels;
  for (std::size_t i : idx) b.max_length = std::max(b.max_length, records[i].length);
  b.signal.assign(idx.size() * b.max_length * channels, 0.0f);
  ErrorSetConfig ecfg = opt.error_cfg;
  if (ecfg.alphabet.empty()) ecfg.alphabet = vocab.ids();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const SampleRecord& r = records[idx[k]];
    if (r.signal.size() != r.length * channels) throw FormatError("batch: record '" + r.sample_id + "' has wrong channel count");
    std::copy(r.signal.begin(), r.signal.end(), b.signal.begin() + static_cast<std::ptrdiff_t>(k * b.max_length * channels));
    b.lengths.push_back(r.length);
    b.labels.push_back(vocab.encode(r.transcript));
    b.transcripts.push_back(r.transcript);
    b.sample_ids.push_back(r.sample_id);
    b.indices.push_back(idx[k]);
    std::vector<LabelSeq> negs;
    if (ecfg.num_sets > 0) {
      ErrorSetConfig per = ecfg;
      per.seed = negatives_seed(ecfg.seed, r.sample_id, epoch, opt.freeze_negatives);
      for (auto& n : generate_negatives(b.labels.back(), per)) negs.push_back(std::move(n.text));
    }
    b.negatives.push_back(std::move(negs));
  }
  return b;
}

/// One epoch of batches: seeded shuffle, final partial batch kept.
inline std::vector<Batch> make_batches(const std::vector<SampleRecord>& records, std::size_t channels,
                                       const Vocabulary& vocab, const BatchOptions& opt, std::size_t epoch) {
  if (opt.batch_size == 0) throw ConfigError("batch size must be at least 1");
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (opt.shuffle) {
    Rng rng(mix_seed(opt.seed, 0xE0000 + epoch));
    rng.shuffle(order);
  }
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
    const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                       order.begin() + static_cast<std::ptrdiff_t>(std::min(start + opt.batch_size, order.size())));
    batches.push_back(collate(records, idx, channels, vocab, opt, epoch));
  }
  return batches;
}

}  // namespace echwr
