#pragma once

// Synthetic hard negatives: transcripts at Levenshtein distance exactly one
// from the truth, produced in sets of {deletion, insertion, substitution}.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "echwr/error.hpp"
#include "echwr/eval.hpp"
#include "echwr/rng.hpp"
#include "echwr/text.hpp"

namespace echwr {

struct ErrorSetConfig {
  std::size_t num_sets = 2;
  std::vector<std::uint32_t> alphabet;  // character ids, blank excluded
  std::uint64_t seed = 0;
  std::size_t max_resample = 32;
  bool allow_empty = false;
};

enum class ErrorKind { deletion, insertion, substitution };

inline std::string to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::deletion: return "deletion";
    case ErrorKind::insertion: return "insertion";
    case ErrorKind::substitution: return "substitution";
  }
  return "?";
}

struct Negative {
  ErrorKind kind;
  LabelSeq text;
};

inline std::uint64_t hash_labels(const LabelSeq& s) {
  std::string bytes;
  bytes.reserve(s.size() * 4);
  for (std::uint32_t v : s)
    for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
  return fnv1a(bytes);
}

/// Per-sample seed: base seed xor a stable hash of the sample id.
inline std::uint64_t sample_seed(std::uint64_t base, std::string_view sample_id) { return base ^ fnv1a(sample_id); }

namespace detail {

inline LabelSeq substitute(const LabelSeq& truth, const ErrorSetConfig& cfg, Rng& rng) {
  const std::size_t pos = static_cast<std::size_t>(rng.uniform_int(truth.size()));
  for (std::size_t attempt = 0; attempt <= cfg.max_resample; ++attempt) {
    const std::uint32_t c = cfg.alphabet[rng.uniform_int(cfg.alphabet.size())];
    if (c != truth[pos]) {
      LabelSeq out = truth;
      out[pos] = c;
      return out;
    }
  }
  throw GenerationError("negatives: no substitute character found after " + std::to_string(cfg.max_resample) +
                        " draws (alphabet too small?)");
}

}  // namespace detail

/// 3 * num_sets negatives in set order, each set as (deletion, insertion,
/// substitution). A one-character truth cannot lose its only character unless
/// allow_empty is set; its deletion slot then holds a second substitution.
/// Output is a pure function of (truth, cfg).
inline std::vector<Negative> generate_negatives(const LabelSeq& truth, const ErrorSetConfig& cfg) {
  if (truth.empty()) throw GenerationError("negatives: empty transcript");
  if (cfg.alphabet.empty()) throw GenerationError("negatives: empty alphabet");
  for (auto c : truth) {
    if (std::find(cfg.alphabet.begin(), cfg.alphabet.end(), c) == cfg.alphabet.end()) {
      throw GenerationError("negatives: transcript character id " + std::to_string(c) + " not in alphabet");
    }
  }
  std::vector<Negative> out;
  out.reserve(3 * cfg.num_sets);
  const std::uint64_t truth_seed = mix_seed(cfg.seed, hash_labels(truth));
  for (std::size_t set = 0; set < cfg.num_sets; ++set) {
    Rng rng(mix_seed(truth_seed, set));
    if (truth.size() == 1 && !cfg.allow_empty) {
      out.push_back({ErrorKind::substitution, detail::substitute(truth, cfg, rng)});
    } else {
      LabelSeq del = truth;
      del.erase(del.begin() + static_cast<std::ptrdiff_t>(rng.uniform_int(truth.size())));
      out.push_back({ErrorKind::deletion, std::move(del)});
    }
    LabelSeq ins = truth;
    const std::size_t slot = static_cast<std::size_t>(rng.uniform_int(truth.size() + 1));
    ins.insert(ins.begin() + static_cast<std::ptrdiff_t>(slot), cfg.alphabet[rng.uniform_int(cfg.alphabet.size())]);
    out.push_back({ErrorKind::insertion, std::move(ins)});
    out.push_back({ErrorKind::substitution, detail::substitute(truth, cfg, rng)});
  }
  return out;
}

struct NegativeSetReport {
  std::vector<std::size_t> distances;
  std::vector<std::size_t> flagged;  // indices with distance != 1 (which covers copies of the truth)
  bool all_clear() const { return flagged.empty(); }
};

inline NegativeSetReport verify_negative_set(const LabelSeq& truth, const std::vector<LabelSeq>& negatives) {
  NegativeSetReport r;
  for (std::size_t i = 0; i < negatives.size(); ++i) {
    const std::size_t d = edit_distance(truth, negatives[i]).distance();
    r.distances.push_back(d);
    if (d != 1) r.flagged.push_back(i);
  }
  return r;
}

}  // namespace echwr
