#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "aligngen/diffcore/ops.hpp"
#include "aligngen/promptkit.hpp"

// Joint token sequence [noisy(N); text(M); ref_1(N); ...; ref_K(N)], its 2D
// position indices and the selective cross-modal attention mask.
namespace aligngen::layout {

using ad::Tensor;
using ad::Var;

enum class SegmentKind { kNoisy, kText, kRef };

struct Segment {
  SegmentKind kind = SegmentKind::kNoisy;
  std::size_t ref_index = 0;  // meaningful for kRef only
  friend bool operator==(const Segment&, const Segment&) = default;
};

struct Position {
  int row = 0;
  int col = 0;
  friend bool operator==(const Position&, const Position&) = default;
  friend auto operator<=>(const Position&, const Position&) = default;
};

// Shape of a layout, independent of token values.
struct LayoutShape {
  std::size_t noisy = 0;  // N
  std::size_t text = 0;   // M
  std::size_t refs = 0;   // K
  int grid_h = 0;
  int grid_w = 0;
  std::vector<bool> relevance;  // length M

  std::size_t total() const { return noisy + text + refs * noisy; }
  std::size_t text_begin() const { return noisy; }
  std::size_t ref_begin(std::size_t k = 0) const { return noisy + text + k * noisy; }

  std::vector<Segment> segments() const {
    std::vector<Segment> out;
    out.reserve(total());
    for (std::size_t i = 0; i < noisy; ++i) out.push_back({SegmentKind::kNoisy, 0});
    for (std::size_t i = 0; i < text; ++i) out.push_back({SegmentKind::kText, 0});
    for (std::size_t k = 0; k < refs; ++k)
      for (std::size_t i = 0; i < noisy; ++i) out.push_back({SegmentKind::kRef, k});
    return out;
  }
};

template <typename T>
struct SequenceLayout {
  Var<T> tokens;
  LayoutShape shape;
  std::vector<Segment> segments;
  prompt::PromptBundle bundle;
};

// Concatenates in contract order. Every reference must have N rows.
template <typename T>
SequenceLayout<T> assemble(Var<T> noisy, Var<T> text, const std::vector<Var<T>>& refs,
                           const prompt::PromptBundle& bundle, int grid_h, int grid_w) {
  const std::size_t d = noisy.cols();
  if (text.cols() != d) throw ShapeError("assemble: text width " + std::to_string(text.cols()) + " != " + std::to_string(d));
  if (noisy.rows() != static_cast<std::size_t>(grid_h) * grid_w) {
    throw ShapeError("assemble: noisy token count does not match the patch grid");
  }
  if (bundle.relevance.size() != text.rows()) throw ShapeError("assemble: relevance length != text rows");
  std::vector<Var<T>> parts{noisy, text};
  for (std::size_t k = 0; k < refs.size(); ++k) {
    if (refs[k].cols() != d) throw ShapeError("assemble: reference " + std::to_string(k) + " width mismatch");
    if (refs[k].rows() != noisy.rows()) {
      throw ShapeError("assemble: reference " + std::to_string(k) + " has " + std::to_string(refs[k].rows()) +
                       " tokens, expected " + std::to_string(noisy.rows()));
    }
    parts.push_back(refs[k]);
  }
  SequenceLayout<T> out;
  out.tokens = ad::concat_rows(parts);
  out.shape = LayoutShape{noisy.rows(), text.rows(), refs.size(), grid_h, grid_w, bundle.relevance};
  out.segments = out.shape.segments();
  out.bundle = bundle;
  return out;
}

// Text -> (0,0); noisy (i,j) -> (i,j); every reference (i,j) -> (i, j + offset).
inline std::vector<Position> rope_indices(const LayoutShape& s, int ref_col_offset = 0) {
  const int off = ref_col_offset > 0 ? ref_col_offset : s.grid_w;
  std::vector<Position> pos;
  pos.reserve(s.total());
  for (int i = 0; i < s.grid_h; ++i)
    for (int j = 0; j < s.grid_w; ++j) pos.push_back({i, j});
  for (std::size_t t = 0; t < s.text; ++t) pos.push_back({0, 0});
  for (std::size_t k = 0; k < s.refs; ++k)
    for (int i = 0; i < s.grid_h; ++i)
      for (int j = 0; j < s.grid_w; ++j) pos.push_back({i, j + off});
  return pos;
}

// Additive mask: irrelevant text queries cannot see reference keys, and
// references cannot see each other. With `symmetric`, reference queries also
// cannot see irrelevant text keys.
template <typename T>
Tensor<T> build_mask(const LayoutShape& s, bool symmetric = false) {
  const std::size_t n = s.total();
  Tensor<T> mask({n, n});
  const T neg = static_cast<T>(ad::kMaskNeg);
  const std::size_t ref0 = s.ref_begin(0);
  for (std::size_t i = 0; i < s.text; ++i) {
    if (s.relevance[i]) continue;
    const std::size_t row = s.text_begin() + i;
    for (std::size_t c = ref0; c < n; ++c) {
      mask(row, c) = neg;
      if (symmetric) mask(c, row) = neg;
    }
  }
  for (std::size_t a = 0; a < s.refs; ++a)
    for (std::size_t b = 0; b < s.refs; ++b) {
      if (a == b) continue;
      for (std::size_t r = 0; r < s.noisy; ++r)
        for (std::size_t c = 0; c < s.noisy; ++c) mask(s.ref_begin(a) + r, s.ref_begin(b) + c) = neg;
    }
  return mask;
}

// One line per query row: '.' attendable, 'X' blocked.
template <typename T>
std::string dump_mask(const Tensor<T>& mask) {
  std::string out;
  out.reserve(mask.rows() * (mask.cols() + 1));
  for (std::size_t r = 0; r < mask.rows(); ++r) {
    for (std::size_t c = 0; c < mask.cols(); ++c) out.push_back(mask(r, c) < T(0) ? 'X' : '.');
    out.push_back('\n');
  }
  return out;
}

}  // namespace aligngen::layout
