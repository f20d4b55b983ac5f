#pragma once

#include <string>
#include <vector>

#include "aligngen/diffcore/ops.hpp"
#include "aligngen/image.hpp"
#include "aligngen/layers.hpp"
#include "aligngen/model_config.hpp"
#include "aligngen/params.hpp"
#include "aligngen/promptkit.hpp"

// Conditioning streams: text tokens, redux tokens (DEM input only) and
// reference tokens (MMA input).
namespace aligngen::enc {

using ad::Tensor;
using ad::Var;

template <typename T, typename Rng>
void init_text_encoder(ParamStore<T>& s, const ModelConfig& c, Rng& rng) {
  s.add("text.embed", Tensor<T>::randn({c.vocab_size, c.d}, rng, T(1)), Group::kBase, false);
  s.add("text.pos", Tensor<T>::randn({c.max_text_len, c.d}, rng, T(0.1)), Group::kBase, false);
  s.add("text.norm1", Tensor<T>({1, c.d}, T(1)), Group::kBase, false);
  for (const char* n : {"q", "k", "v"}) layers::add_linear(s, std::string("text.attn.") + n, c.d, c.d, Group::kBase, rng);
  layers::add_linear(s, "text.attn.o", c.d, c.d, Group::kBase, rng, 0.5);
  s.add("text.norm2", Tensor<T>({1, c.d}, T(1)), Group::kBase, false);
  layers::add_linear(s, "text.mlp.fc1", c.d, c.d * c.mlp_ratio, Group::kBase, rng);
  layers::add_linear(s, "text.mlp.fc2", c.d * c.mlp_ratio, c.d, Group::kBase, rng, 0.5);
  s.add("text.norm_out", Tensor<T>({1, c.d}, T(1)), Group::kBase, false);
}

template <typename T, typename Rng>
void init_image_embedder(ParamStore<T>& s, const ModelConfig& c, Rng& rng) {
  layers::add_linear(s, "img.embed", c.patch_dim(), c.d, Group::kBase, rng);
}

template <typename T, typename Rng>
void init_redux(ParamStore<T>& s, const ModelConfig& c, Rng& rng) {
  const std::size_t pd = static_cast<std::size_t>(c.redux_patch) * c.redux_patch * 3;
  const int region = c.image_size / c.redux_grid();
  layers::add_linear(s, "redux.patch", pd, c.d, Group::kBase, rng);
  layers::add_linear(s, "redux.proj", c.d, c.d, Group::kBase, rng);
  layers::add_linear(s, "redux.aux", c.d, static_cast<std::size_t>(region) * region * 3, Group::kBase, rng);
}

// Embedding lookup (with <s*> rows taken from the "s_star" tensor when one
// exists), learned positions, one pre-norm attention + MLP block.
template <typename T>
Var<T> encode_text(Bound<T>& p, const ModelConfig& c, const prompt::PromptBundle& bundle) {
  const std::size_t m = bundle.size();
  if (m != c.max_text_len) {
    throw ShapeError("encode_text: prompt length " + std::to_string(m) + " != max_text_len " +
                     std::to_string(c.max_text_len));
  }
  for (int id : bundle.token_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw DataError("encode_text: token id " + std::to_string(id) + " outside vocabulary");
    }
  }
  Var<T> x = ad::embedding(p("text.embed"), bundle.token_ids);
  if (p.has("s_star")) {
    std::vector<std::size_t> star_rows;
    for (std::size_t i = 0; i < m; ++i)
      if (bundle.token_ids[i] == prompt::kStarId) star_rows.push_back(i);
    if (!star_rows.empty()) {
      Var<T> star = p("s_star");
      std::vector<Var<T>> copies(star_rows.size(), star);
      x = ad::replace_rows(x, star_rows, copies.size() == 1 ? star : ad::concat_rows(copies));
    }
  }
  x = ad::add(x, p("text.pos"));
  Var<T> h = ad::rms_norm(x, std::optional<Var<T>>(p("text.norm1")));
  Var<T> a = layers::multi_head_attention(layers::linear(p, "text.attn.q", h), layers::linear(p, "text.attn.k", h),
                                          layers::linear(p, "text.attn.v", h), c.text_heads);
  x = ad::add(x, layers::linear(p, "text.attn.o", a));
  h = ad::rms_norm(x, std::optional<Var<T>>(p("text.norm2")));
  x = ad::add(x, layers::mlp(p, "text.mlp", h));
  return ad::rms_norm(x, std::optional<Var<T>>(p("text.norm_out")));
}

// Row groups mapping the redux patch grid onto the redux token grid.
inline std::vector<std::vector<std::size_t>> redux_groups(const ModelConfig& c) {
  const int pg = c.image_size / c.redux_patch;
  const int rg = c.redux_grid();
  const int k = pg / rg;
  std::vector<std::vector<std::size_t>> groups(static_cast<std::size_t>(rg) * rg);
  for (int r = 0; r < pg; ++r)
    for (int col = 0; col < pg; ++col)
      groups[static_cast<std::size_t>(r / k) * rg + col / k].push_back(static_cast<std::size_t>(r) * pg + col);
  return groups;
}

inline void check_image(const ModelConfig& c, const Image& img, const char* who) {
  if (img.height != c.image_size || img.width != c.image_size) {
    throw ShapeError(std::string(who) + ": image " + std::to_string(img.height) + "x" +
                     std::to_string(img.width) + " does not match configured " +
                     std::to_string(c.image_size) + "x" + std::to_string(c.image_size));
  }
}

// Patch embedding -> mean-pool to R tokens -> linear to d. Result is R x d.
template <typename T>
Var<T> encode_redux(Bound<T>& p, const ModelConfig& c, const Image& img) {
  if (img.height % c.redux_patch != 0 || img.width % c.redux_patch != 0) {
    throw ShapeError("encode_redux: image not divisible by redux patch size");
  }
  check_image(c, img, "encode_redux");
  Var<T> patches = p.tape().constant(patchify<T>(img, c.redux_patch));
  Var<T> emb = layers::linear(p, "redux.patch", patches);
  Var<T> pooled = ad::pool_rows(emb, redux_groups(c));
  Var<T> out = layers::linear(p, "redux.proj", pooled);
  return c.normalize_redux ? ad::rms_norm(out) : out;
}

// Auxiliary image-variation head: each redux token reconstructs its region.
template <typename T>
Var<T> redux_reconstruction_loss(Bound<T>& p, const ModelConfig& c, Var<T> redux, const Image& img) {
  const int region = c.image_size / c.redux_grid();
  Var<T> target = p.tape().constant(patchify<T>(img, region));
  return ad::mse(layers::linear(p, "redux.aux", redux), target);
}

// Patchify + image embedder; the embedder's LoRA delta is scaled by lora_scale.
template <typename T>
Var<T> encode_reference(Bound<T>& p, const ModelConfig& c, const Image& img, T lora_scale) {
  check_image(c, img, "encode_reference");
  Var<T> patches = p.tape().constant(patchify<T>(img, c.patch));
  return layers::gated_linear(p, "img.embed", "lora.img_embed", patches, 0, patches.rows(), lora_scale);
}

// Noisy-image tokens share the image embedder and never receive LoRA.
template <typename T>
Var<T> embed_noisy(Bound<T>& p, Var<T> x_patches) {
  return layers::linear(p, "img.embed", x_patches);
}

inline Image black_reference(int height, int width) { return black_image(height, width); }

}  // namespace aligngen::enc
