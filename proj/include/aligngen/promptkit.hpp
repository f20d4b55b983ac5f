#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "aligngen/errors.hpp"

namespace aligngen::prompt {

inline constexpr int kPadId = 0;
inline constexpr int kStarId = 1;
inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kStarToken = "<s*>";
inline constexpr std::string_view kPlaceholder = "{C}";
inline constexpr std::size_t kDefaultMaxLen = 16;

enum class ShapeClass { kSquare = 0, kCircle = 1, kTriangle = 2 };
enum class Pattern { kPlain = 0, kStriped = 1 };

struct Rgb {
  float r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

struct VisualAttrs {
  ShapeClass shape = ShapeClass::kSquare;
  Rgb fill;
  std::string color_name;
  Pattern pattern = Pattern::kPlain;
  friend bool operator==(const VisualAttrs&, const VisualAttrs&) = default;
};

struct ConceptRecord {
  int concept_id = 0;
  std::vector<std::string> surface_name;
  std::vector<std::string> parent_name;
  std::vector<std::string> broader_name;
  VisualAttrs attrs;
  friend bool operator==(const ConceptRecord&, const ConceptRecord&) = default;
};

inline std::string_view shape_word(ShapeClass s) {
  switch (s) {
    case ShapeClass::kSquare: return "square";
    case ShapeClass::kCircle: return "circle";
    case ShapeClass::kTriangle: return "triangle";
  }
  return "square";
}

inline std::string_view pattern_word(Pattern p) {
  return p == Pattern::kPlain ? "plain" : "striped";
}

enum class NameLevel { kSurface = 0, kParent = 1, kBroader = 2 };

inline std::string_view level_name(NameLevel l) {
  switch (l) {
    case NameLevel::kSurface: return "surface";
    case NameLevel::kParent: return "parent";
    case NameLevel::kBroader: return "broader";
  }
  return "surface";
}

// Whitespace word-level vocabulary. Ids 0 and 1 are reserved for padding
// and the learnable token.
class Vocabulary {
 public:
  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  explicit Vocabulary(const std::vector<std::string>& words) {
    add(std::string(kPadToken));
    add(std::string(kStarToken));
    for (const auto& w : words) {
      if (!index_.contains(w)) add(w);
    }
  }

  // The closed vocabulary used by the synthetic corpus.
  static Vocabulary standard() {
    return Vocabulary({
        // template words
        "a", "the", "on", "background", "over", "in", "front", "of", "photo",
        "picture", "with", "and", "next", "to", "image", "plain", "scene",
        // shape classes and category
        "square", "circle", "triangle", "shape",
        // surface modifiers
        "wooden", "shiny", "paper", "metal", "glass", "plastic", "velvet", "clay",
        // colors
        "white", "cyan", "magenta", "red", "green", "blue", "yellow", "gray", "black",
        // patterns
        "striped", "dotted",
    });
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("vocabulary: cannot open " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
    if (lines.size() < 2 || lines[0] != kPadToken || lines[1] != kStarToken) {
      throw DataError("vocabulary: " + path + " must start with <pad> and <s*>");
    }
    Vocabulary v;
    for (std::size_t i = 2; i < lines.size(); ++i) {
      if (lines[i].empty()) throw DataError("vocabulary: empty token on line " + std::to_string(i + 1));
      if (v.index_.contains(lines[i])) throw DataError("vocabulary: duplicate token " + lines[i]);
      v.add(lines[i]);
    }
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("vocabulary: cannot write " + path);
    for (const auto& w : words_) out << w << '\n';
  }

  std::size_t size() const { return words_.size(); }
  bool contains(const std::string& w) const { return index_.contains(w); }

  int id(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) throw DataError("vocabulary: unknown token '" + w + "'");
    return it->second;
  }

  const std::string& word(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
      throw DataError("vocabulary: id " + std::to_string(id) + " out of range");
    }
    return words_[id];
  }

  std::vector<int> tokenize(std::string_view text) const {
    std::vector<int> ids;
    std::istringstream is{std::string(text)};
    std::string w;
    while (is >> w) ids.push_back(id(w));
    return ids;
  }

  // Joins words with single spaces; padding is dropped.
  std::string detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == kPadId) continue;
      if (!out.empty()) out += ' ';
      out += word(id);
    }
    return out;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.words_ == b.words_; }

 private:
  void add(const std::string& w) {
    index_[w] = static_cast<int>(words_.size());
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

// Half-open token interval [begin, end) covering <s*> and the concept name.
struct ConceptSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t concept_index = 0;
  std::size_t length() const { return end - begin; }
  friend bool operator==(const ConceptSpan&, const ConceptSpan&) = default;
};

struct PromptBundle {
  std::vector<int> token_ids;       // padded to max_len
  std::vector<ConceptSpan> spans;   // one per concept occurrence, ascending
  std::vector<bool> relevance;      // true exactly on span tokens
  std::string raw_template;

  std::size_t size() const { return token_ids.size(); }
  bool has_concept() const { return !spans.empty(); }
  const ConceptSpan& concept_span() const {
    if (spans.empty()) throw ArgumentError("prompt has no concept span");
    return spans.front();
  }
  std::size_t s_star_index() const { return concept_span().begin; }
};

namespace detail {

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

inline const std::vector<std::string>& name_at(const ConceptRecord& c, NameLevel level) {
  switch (level) {
    case NameLevel::kSurface: return c.surface_name;
    case NameLevel::kParent: return c.parent_name;
    case NameLevel::kBroader: return c.broader_name;
  }
  return c.surface_name;
}

// Expands each placeholder, optionally prefixed with <s*>, into token ids.
inline PromptBundle expand(const Vocabulary& vocab, std::string_view tmpl,
                           const std::vector<const ConceptRecord*>& concepts,
                           NameLevel level, bool with_star, std::size_t max_len) {
  const auto words = split_words(tmpl);
  std::size_t placeholders = 0;
  for (const auto& w : words) placeholders += (w == kPlaceholder);
  if (placeholders != concepts.size()) {
    throw ArgumentError("prompt template '" + std::string(tmpl) + "' has " +
                        std::to_string(placeholders) + " placeholder(s) for " +
                        std::to_string(concepts.size()) + " concept(s)");
  }
  PromptBundle b;
  b.raw_template = std::string(tmpl);
  std::size_t next = 0;
  for (const auto& w : words) {
    if (w != kPlaceholder) {
      b.token_ids.push_back(vocab.id(w));
      continue;
    }
    const ConceptRecord& c = *concepts[next];
    const auto& name = name_at(c, level);
    if (name.empty()) throw DataError("concept " + std::to_string(c.concept_id) + " has an empty name");
    ConceptSpan span{b.token_ids.size(), 0, next};
    if (with_star) b.token_ids.push_back(kStarId);
    for (const auto& n : name) b.token_ids.push_back(vocab.id(n));
    span.end = b.token_ids.size();
    b.spans.push_back(span);
    ++next;
  }
  if (b.token_ids.size() > max_len) {
    throw ArgumentError("prompt has " + std::to_string(b.token_ids.size()) +
                        " tokens, exceeding max length " + std::to_string(max_len));
  }
  b.token_ids.resize(max_len, kPadId);
  b.relevance.assign(max_len, false);
  for (const auto& s : b.spans)
    for (std::size_t i = s.begin; i < s.end; ++i) b.relevance[i] = true;
  return b;
}

}  // namespace detail

// Single-concept prompt: the placeholder becomes [<s*>, name tokens...].
inline PromptBundle build_prompt(const Vocabulary& vocab, std::string_view tmpl,
                                 const ConceptRecord& rec, NameLevel level,
                                 std::size_t max_len = kDefaultMaxLen) {
  return detail::expand(vocab, tmpl, {&rec}, level, true, max_len);
}

// Same expansion without the learnable token (concept name only). The span
// then covers just the name.
inline PromptBundle build_prompt_without_star(const Vocabulary& vocab, std::string_view tmpl,
                                              const ConceptRecord& rec, NameLevel level,
                                              std::size_t max_len = kDefaultMaxLen) {
  return detail::expand(vocab, tmpl, {&rec}, level, false, max_len);
}

// Every occurrence is prefixed with the same <s*> id.
inline PromptBundle build_multi_prompt(const Vocabulary& vocab, std::string_view tmpl,
                                       const std::vector<ConceptRecord>& concepts,
                                       NameLevel level = NameLevel::kSurface,
                                       std::size_t max_len = kDefaultMaxLen) {
  if (concepts.size() < 2) {
    throw ArgumentError("build_multi_prompt: needs at least 2 concepts (use build_prompt)");
  }
  std::vector<const ConceptRecord*> ptrs;
  for (const auto& c : concepts) ptrs.push_back(&c);
  return detail::expand(vocab, tmpl, ptrs, level, true, max_len);
}

// Prompt with no concept (e.g. the unconditional branch or plain captions).
inline PromptBundle build_plain_prompt(const Vocabulary& vocab, std::string_view text,
                                       std::size_t max_len = kDefaultMaxLen) {
  return detail::expand(vocab, text, {}, NameLevel::kSurface, false, max_len);
}

inline PromptBundle empty_prompt(std::size_t max_len = kDefaultMaxLen) {
  PromptBundle b;
  b.token_ids.assign(max_len, kPadId);
  b.relevance.assign(max_len, false);
  return b;
}

// Parses free text that already contains <s*> markers. Each marker opens a
// span covering the following words accepted by `is_name_word`; spans are
// associated with references in order of appearance.
template <typename Pred>
PromptBundle parse_prompt(const Vocabulary& vocab, std::string_view text, Pred is_name_word,
                          std::size_t max_len = kDefaultMaxLen) {
  const auto words = detail::split_words(text);
  if (words.size() > max_len) {
    throw ArgumentError("prompt has " + std::to_string(words.size()) + " tokens, exceeding max length " +
                        std::to_string(max_len));
  }
  PromptBundle b;
  b.raw_template = std::string(text);
  for (std::size_t i = 0; i < words.size(); ++i) {
    b.token_ids.push_back(vocab.id(words[i]));
    if (words[i] != kStarToken) continue;
    ConceptSpan span{i, i + 1, b.spans.size()};
    while (span.end < words.size() && is_name_word(words[span.end])) {
      b.token_ids.push_back(vocab.id(words[span.end]));
      ++span.end;
    }
    if (span.length() < 2) throw ArgumentError("prompt: <s*> must be followed by a concept name");
    i = span.end - 1;
    b.spans.push_back(span);
  }
  b.token_ids.resize(max_len, kPadId);
  b.relevance.assign(max_len, false);
  for (const auto& sp : b.spans)
    for (std::size_t i = sp.begin; i < sp.end; ++i) b.relevance[i] = true;
  return b;
}

// Categorical draw over (surface, parent, broader).
template <typename Rng>
NameLevel sample_name_level(Rng& rng, const std::array<double, 3>& probs) {
  for (double p : probs) {
    if (p < 0.0) throw ArgumentError("sample_name_level: negative probability");
  }
  const double total = probs[0] + probs[1] + probs[2];
  if (std::abs(total - 1.0) > 1e-9) {
    throw ArgumentError("sample_name_level: probabilities must sum to 1");
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double x = u(rng);
  if (x < probs[0]) return NameLevel::kSurface;
  if (x < probs[0] + probs[1] || probs[2] == 0.0) return NameLevel::kParent;
  return NameLevel::kBroader;
}

// Instantiated text for a template (placeholders expanded, no padding).
inline std::string instantiate(const Vocabulary& vocab, const PromptBundle& b) {
  return vocab.detokenize(b.token_ids);
}

}  // namespace aligngen::prompt
