#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <boost/locale/encoding_utf.hpp>

#include "echwr/error.hpp"

namespace echwr {

/// Transcript as character ids over a Vocabulary; never contains the blank (0).
using LabelSeq = std::vector<std::uint32_t>;

inline constexpr std::uint32_t kBlank = 0;

inline std::u32string utf8_to_u32(std::string_view s) {
  try {
    return boost::locale::conv::utf_to_utf<char32_t>(s.data(), s.data() + s.size(), boost::locale::conv::stop);
  } catch (const std::exception&) {
    throw FormatError("invalid UTF-8 in '" + std::string(s) + "'");
  }
}

inline std::string u32_to_utf8(std::u32string_view s) {
  return boost::locale::conv::utf_to_utf<char>(s.data(), s.data() + s.size());
}

/// Ordered character set. Id 0 is the CTC blank; characters take ids 1..size()
/// in codepoint order.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::u32string chars) : chars_(std::move(chars)) {
    std::sort(chars_.begin(), chars_.end());
    chars_.erase(std::unique(chars_.begin(), chars_.end()), chars_.end());
  }

  static Vocabulary from_texts(const std::vector<std::string>& texts) {
    std::u32string all;
    for (const auto& t : texts) all += utf8_to_u32(t);
    return Vocabulary(std::move(all));
  }

  std::size_t size() const { return chars_.size(); }
  std::size_t num_classes() const { return chars_.size() + 1; }
  const std::u32string& chars() const { return chars_; }
  std::string to_utf8() const { return u32_to_utf8(chars_); }

  bool contains(char32_t c) const { return std::binary_search(chars_.begin(), chars_.end(), c); }

  std::uint32_t id(char32_t c) const {
    const auto it = std::lower_bound(chars_.begin(), chars_.end(), c);
    if (it == chars_.end() || *it != c) {
      throw ConfigError("character '" + u32_to_utf8(std::u32string(1, c)) + "' (U+" + hex(c) +
                        ") is not in the vocabulary");
    }
    return static_cast<std::uint32_t>(it - chars_.begin()) + 1;
  }

  char32_t character(std::uint32_t id) const {
    if (id == kBlank || id > chars_.size()) throw ConfigError("label id " + std::to_string(id) + " out of range");
    return chars_[id - 1];
  }

  LabelSeq encode(std::string_view utf8) const {
    LabelSeq out;
    for (char32_t c : utf8_to_u32(utf8)) out.push_back(id(c));
    return out;
  }

  std::string decode(const LabelSeq& ids) const {
    std::u32string s;
    for (auto id : ids) s.push_back(character(id));
    return u32_to_utf8(s);
  }

  /// Every character id, i.e. the alphabet used for synthetic corruptions.
  std::vector<std::uint32_t> ids() const {
    std::vector<std::uint32_t> v(chars_.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<std::uint32_t>(i + 1);
    return v;
  }

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

 private:
  static std::string hex(char32_t c) {
    static const char* digits = "0123456789ABCDEF";
    std::string s;
    for (int shift = 20; shift >= 0; shift -= 4) s.push_back(digits[(c >> shift) & 0xF]);
    s.erase(0, std::min(s.find_first_not_of('0'), s.size() - 4));
    return s;
  }

  std::u32string chars_;
};

/// Splits on single spaces; empty tokens are dropped.
inline std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t end = std::min(s.find(' ', start), s.size());
    if (end > start) out.emplace_back(s.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

}  // namespace echwr
