#pragma once

#include <string>
#include <vector>

#include "aligngen/diffcore/ops.hpp"
#include "aligngen/layers.hpp"
#include "aligngen/model_config.hpp"
#include "aligngen/params.hpp"
#include "aligngen/promptkit.hpp"

// Deviation Extraction Module: residual self-attention over the concept
// tokens, residual cross-attention into the redux tokens, residual MLP. Row 0
// of the result is the updated learnable token.
namespace aligngen::dem {

using ad::Tensor;
using ad::Var;

enum class SpliceMode { kFirstOnly, kAll };

template <typename T, typename Rng>
void init_dem(ParamStore<T>& s, const ModelConfig& c, Rng& rng) {
  for (const char* blk : {"dem.sa", "dem.ca"}) {
    for (const char* n : {"q", "k", "v"})
      layers::add_linear(s, std::string(blk) + "." + n, c.d, c.d, Group::kDem, rng);
    // zero out-projection: the module starts as the identity
    layers::add_linear(s, std::string(blk) + ".o", c.d, c.d, Group::kDem, rng, 1.0, true);
  }
  layers::add_linear(s, "dem.mlp.fc1", c.d, c.d * c.dem_mlp_ratio, Group::kDem, rng);
  layers::add_linear(s, "dem.mlp.fc2", c.d * c.dem_mlp_ratio, c.d, Group::kDem, rng, 1.0, true);
}

template <typename T>
Var<T> extract_concept_tokens(Var<T> text_tokens, const prompt::ConceptSpan& span) {
  if (span.begin >= span.end || span.end > text_tokens.rows()) {
    throw ShapeError("extract_concept_tokens: span [" + std::to_string(span.begin) + "," +
                     std::to_string(span.end) + ") invalid for " + std::to_string(text_tokens.rows()) +
                     " text tokens");
  }
  return ad::slice_rows(text_tokens, span.begin, span.end);
}

template <typename T>
Var<T> dem_forward(Bound<T>& p, const ModelConfig& c, Var<T> ctoks, Var<T> redux) {
  if (ctoks.cols() != redux.cols() || ctoks.cols() != c.d) {
    throw ShapeError("dem_forward: concept " + ad::shape_str(ctoks.dims()) + " and redux " +
                     ad::shape_str(redux.dims()) + " must share width d=" + std::to_string(c.d));
  }
  using layers::linear;
  Var<T> x = ctoks;
  Var<T> sa = layers::multi_head_attention(linear(p, "dem.sa.q", x), linear(p, "dem.sa.k", x),
                                           linear(p, "dem.sa.v", x), c.dem_heads);
  x = ad::add(x, linear(p, "dem.sa.o", sa));
  Var<T> ca = layers::multi_head_attention(linear(p, "dem.ca.q", x), linear(p, "dem.ca.k", redux),
                                           linear(p, "dem.ca.v", redux), c.dem_heads);
  x = ad::add(x, linear(p, "dem.ca.o", ca));
  x = ad::add(x, layers::mlp(p, "dem.mlp", x));
  return x;
}

// Writes the updated concept tokens back into the text stream: row 0 only
// (first_only) or the whole span (all).
template <typename T>
Var<T> splice_token(Var<T> text_tokens, const prompt::ConceptSpan& span, Var<T> updated, SpliceMode mode) {
  if (updated.rows() != span.length() || updated.cols() != text_tokens.cols()) {
    throw ShapeError("splice_token: update " + ad::shape_str(updated.dims()) + " does not match span of " +
                     std::to_string(span.length()) + " rows");
  }
  if (span.end > text_tokens.rows()) throw ShapeError("splice_token: span outside text tokens");
  if (mode == SpliceMode::kFirstOnly) {
    return ad::replace_rows(text_tokens, {span.begin}, ad::slice_rows(updated, 0, 1));
  }
  std::vector<std::size_t> rows;
  for (std::size_t i = span.begin; i < span.end; ++i) rows.push_back(i);
  return ad::replace_rows(text_tokens, rows, updated);
}

}  // namespace aligngen::dem
