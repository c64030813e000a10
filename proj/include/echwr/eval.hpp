#pragma once

// Best-path CTC decoding and Levenshtein-based error rates.

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "echwr/error.hpp"
#include "echwr/text.hpp"

namespace echwr {

struct EditOps {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t distance() const { return substitutions + deletions + insertions; }
};

/// Unit-cost Levenshtein alignment turning `ref` into `hyp`. A ref element
/// missing from hyp is a deletion, an extra hyp element an insertion. Ties in
/// the backtrace prefer substitution, then deletion, then insertion.
template <typename Seq>
  requires(!std::is_convertible_v<const Seq&, std::string_view>)
EditOps edit_distance(const Seq& ref, const Seq& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      at(i, j) = std::min({diag, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  EditOps ops;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++ops.substitutions;
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++ops.deletions;
      --i;
    } else {
      ++ops.insertions;
      --j;
    }
  }
  return ops;
}

inline EditOps edit_distance(std::string_view ref, std::string_view hyp) {
  return edit_distance(utf8_to_u32(ref), utf8_to_u32(hyp));
}

/// Per-step argmax (ties to the lowest class), collapse repeats, drop blanks.
/// `log_probs` is row-major [steps, classes]; only the first input_len rows are read.
template <typename T>
LabelSeq greedy_decode(std::span<const T> log_probs, std::size_t classes, std::size_t input_len) {
  if (classes == 0 || log_probs.size() % classes != 0) throw ShapeError("greedy_decode: bad class count");
  const std::size_t steps = log_probs.size() / classes;
  if (input_len > steps) {
    throw ShapeError("greedy_decode: input_len " + std::to_string(input_len) + " exceeds " + std::to_string(steps) +
                     " steps");
  }
  LabelSeq out;
  std::uint32_t prev = kBlank;
  for (std::size_t t = 0; t < input_len; ++t) {
    const T* row = log_probs.data() + t * classes;
    std::uint32_t best = 0;
    for (std::size_t k = 1; k < classes; ++k)
      if (row[k] > row[best]) best = static_cast<std::uint32_t>(k);
    if (best != kBlank && (t == 0 || best != prev)) out.push_back(best);
    prev = best;
  }
  return out;
}

enum class ErrorLevel { character, word };

/// Micro-averaged error rate: total edits over total reference units.
/// Pairs are (prediction, reference).
inline double corpus_error_rate(const std::vector<std::pair<std::string, std::string>>& pairs, ErrorLevel level) {
  std::size_t edits = 0, ref_units = 0;
  for (const auto& [pred, ref] : pairs) {
    if (level == ErrorLevel::character) {
      const std::u32string r = utf8_to_u32(ref);
      edits += edit_distance(r, utf8_to_u32(pred)).distance();
      ref_units += r.size();
    } else {
      const auto r = split_words(ref);
      edits += edit_distance(r, split_words(pred)).distance();
      ref_units += r.size();
    }
  }
  if (ref_units == 0) throw Error("error rate: references contain no units at the requested level");
  return static_cast<double>(edits) / static_cast<double>(ref_units);
}

struct ErrorRates {
  double cer = 0.0;
  double wer = 0.0;
};

inline ErrorRates corpus_error_rates(const std::vector<std::pair<std::string, std::string>>& pairs) {
  return {corpus_error_rate(pairs, ErrorLevel::character), corpus_error_rate(pairs, ErrorLevel::word)};
}

}  // namespace echwr
