#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "aligngen/attnlayout.hpp"
#include "aligngen/diffcore/ops.hpp"
#include "aligngen/encoders.hpp"
#include "aligngen/layers.hpp"
#include "aligngen/model_config.hpp"
#include "aligngen/params.hpp"

// Miniature single-stream diffusion transformer over the joint sequence.
namespace aligngen::dit {

using ad::Tensor;
using ad::Var;
using layout::Position;

// Per-segment LoRA scale. Noisy-image and text tokens never receive LoRA.
struct SegmentGate {
  double ref = 0.0;

  static SegmentGate off() { return {0.0}; }
  static SegmentGate adaptation() { return {1.0}; }

  double scale(layout::SegmentKind k) const { return k == layout::SegmentKind::kRef ? ref : 0.0; }
};

struct DitOptions {
  bool use_mask = true;
  bool symmetric_mask = false;
};

inline std::string blk(std::size_t i) { return "blk" + std::to_string(i); }

template <typename T, typename Rng>
void init_backbone(ParamStore<T>& s, const ModelConfig& c, Rng& rng) {
  layers::add_linear(s, "time.fc1", c.d, c.d, Group::kBase, rng);
  layers::add_linear(s, "time.fc2", c.d, c.d, Group::kBase, rng);
  for (std::size_t i = 0; i < c.blocks; ++i) {
    const std::string b = blk(i);
    layers::add_linear(s, b + ".mod", c.d, 4 * c.d, Group::kBase, rng, 0.1);
    for (const char* n : {"q", "k", "v"}) layers::add_linear(s, b + ".attn." + n, c.d, c.d, Group::kBase, rng);
    layers::add_linear(s, b + ".attn.o", c.d, c.d, Group::kBase, rng, 0.5);
    layers::add_linear(s, b + ".mlp.fc1", c.d, c.d * c.mlp_ratio, Group::kBase, rng);
    layers::add_linear(s, b + ".mlp.fc2", c.d * c.mlp_ratio, c.d, Group::kBase, rng, 0.5);
  }
  layers::add_linear(s, "final.mod", c.d, 2 * c.d, Group::kBase, rng, 0.1);
  layers::add_linear(s, "final.head", c.d, c.patch_dim(), Group::kBase, rng, 0.1);
}

// LoRA on the image embedder, q/k/v and both MLP linears of every block.
template <typename T, typename Rng>
void init_lora(ParamStore<T>& s, const ModelConfig& c, Rng& rng) {
  layers::add_lora(s, "lora.img_embed", c.patch_dim(), c.d, c.lora_rank, rng);
  for (std::size_t i = 0; i < c.blocks; ++i) {
    const std::string b = "lora." + blk(i);
    for (const char* n : {"q", "k", "v"}) layers::add_lora(s, b + "." + n, c.d, c.d, c.lora_rank, rng);
    layers::add_lora(s, b + ".mlp.fc1", c.d, c.d * c.mlp_ratio, c.lora_rank, rng);
    layers::add_lora(s, b + ".mlp.fc2", c.d * c.mlp_ratio, c.d, c.lora_rank, rng);
  }
}

// Angle table for 2D axis-split rotary embedding: within each head the first
// half of the dims rotates with the row index, the second half with the col.
struct RopeTable {
  std::size_t head_dim = 0;
  std::vector<double> freqs;  // per pair within one axis half

  RopeTable(std::size_t hd, double base) : head_dim(hd) {
    if (hd % 4 != 0) throw ShapeError("rope: head dim " + std::to_string(hd) + " not divisible by 4");
    const std::size_t half = hd / 2;
    for (std::size_t i = 0; i < half / 2; ++i)
      freqs.push_back(std::pow(base, -2.0 * double(i) / double(half)));
  }

  double angle(const Position& p, std::size_t pair) const {
    const std::size_t per_axis = freqs.size();
    return pair < per_axis ? p.row * freqs[pair] : p.col * freqs[pair - per_axis];
  }
};

namespace detail {

// Per-row cos/sin of every rotation pair, shared by forward and backward.
struct RopeAngles {
  std::size_t pairs = 0;
  std::vector<double> cos, sin;
};

inline RopeAngles rope_angles(const RopeTable& table, const std::vector<Position>& positions) {
  RopeAngles a;
  a.pairs = table.head_dim / 2;
  a.cos.reserve(positions.size() * a.pairs);
  a.sin.reserve(positions.size() * a.pairs);
  for (const auto& p : positions)
    for (std::size_t k = 0; k < a.pairs; ++k) {
      const double ang = table.angle(p, k);
      a.cos.push_back(std::cos(ang));
      a.sin.push_back(std::sin(ang));
    }
  return a;
}

template <typename T>
void rotate(T* x, std::size_t d, std::size_t heads, const RopeAngles& a, std::size_t row, T sign) {
  const std::size_t hd = d / heads;
  const double* cr = a.cos.data() + row * a.pairs;
  const double* sr = a.sin.data() + row * a.pairs;
  for (std::size_t h = 0; h < heads; ++h) {
    T* xh = x + h * hd;
    for (std::size_t k = 0; k < a.pairs; ++k) {
      const T cs = static_cast<T>(cr[k]), sn = sign * static_cast<T>(sr[k]);
      const T x0 = xh[2 * k], x1 = xh[2 * k + 1];
      xh[2 * k] = x0 * cs - x1 * sn;
      xh[2 * k + 1] = x0 * sn + x1 * cs;
    }
  }
}

}  // namespace detail

// Rotates each row of q or k [T, d] by its token's (row, col) index.
template <typename T>
Var<T> rope_rotate(Var<T> x, const std::vector<Position>& positions, std::size_t heads, double base) {
  if (x.rows() != positions.size()) throw ShapeError("rope_rotate: one position per row required");
  if (heads == 0 || x.cols() % heads != 0) throw ShapeError("rope_rotate: width not divisible by heads");
  auto angles = std::make_shared<const detail::RopeAngles>(detail::rope_angles(RopeTable(x.cols() / heads, base), positions));
  Tensor<T> out = x.value();
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) detail::rotate(out.raw() + r * d, d, heads, *angles, r, T(1));
  const auto ix = x.id;
  return x.tape->record("rope_rotate", std::move(out), x.requires_grad(),
                        [ix, heads, angles, d](ad::Tape<T>& tp, const Tensor<T>& g) {
                          Tensor<T> back = g;
                          for (std::size_t r = 0; r < back.rows(); ++r)
                            detail::rotate(back.raw() + r * d, d, heads, *angles, r, T(-1));
                          tp.accumulate(ix, std::move(back));
                        });
}

template <typename T>
Var<T> time_embedding(Bound<T>& p, const ModelConfig& c, Var<T> t) {
  Var<T> e = ad::timestep_embedding(t, c.d);
  return layers::linear(p, "time.fc2", ad::silu(layers::linear(p, "time.fc1", e)));
}

template <typename T>
Var<T> modulate(Var<T> x, Var<T> shift, Var<T> scale) {
  return ad::add_row(ad::mul_row(x, ad::add_scalar(scale, T(1))), shift);
}

// Pre-norm joint attention + MLP with scale/shift timestep modulation; LoRA
// deltas only on reference rows, scaled by the gate.
template <typename T>
Var<T> mma_block(Bound<T>& p, const ModelConfig& c, std::size_t index, Var<T> x,
                 const layout::LayoutShape& shape, const Tensor<T>* mask,
                 const std::vector<Position>& positions, Var<T> temb, const SegmentGate& gate,
                 layers::AttentionProbe<T>* probe = nullptr) {
  const std::string b = blk(index);
  const std::string lb = "lora." + b;
  const std::size_t d = c.d;
  const std::size_t r0 = shape.ref_begin(0), r1 = shape.total();
  const T g = static_cast<T>(gate.ref);

  Var<T> mod = layers::linear(p, b + ".mod", ad::silu(temb));
  Var<T> shift1 = ad::slice_cols(mod, 0, d), scale1 = ad::slice_cols(mod, d, 2 * d);
  Var<T> shift2 = ad::slice_cols(mod, 2 * d, 3 * d), scale2 = ad::slice_cols(mod, 3 * d, 4 * d);

  Var<T> h = modulate(ad::rms_norm(x), shift1, scale1);
  Var<T> q = layers::gated_linear(p, b + ".attn.q", lb + ".q", h, r0, r1, g);
  Var<T> k = layers::gated_linear(p, b + ".attn.k", lb + ".k", h, r0, r1, g);
  Var<T> v = layers::gated_linear(p, b + ".attn.v", lb + ".v", h, r0, r1, g);
  q = rope_rotate(q, positions, c.heads, c.rope_base);
  k = rope_rotate(k, positions, c.heads, c.rope_base);
  Var<T> a = layers::multi_head_attention(q, k, v, c.heads, mask, probe);
  x = ad::add(x, layers::linear(p, b + ".attn.o", a));

  h = modulate(ad::rms_norm(x), shift2, scale2);
  Var<T> f = layers::gated_linear(p, b + ".mlp.fc1", lb + ".mlp.fc1", h, r0, r1, g);
  f = layers::gated_linear(p, b + ".mlp.fc2", lb + ".mlp.fc2", ad::gelu(f), r0, r1, g);
  return ad::add(x, f);
}

// Velocity for noisy patches x_t [N, p*p*3] at time t (1x1), given the text
// stream [M, d] and reference token streams [N, d] each.
template <typename T>
Var<T> forward_velocity(Bound<T>& p, const ModelConfig& c, Var<T> x_patches, Var<T> t, Var<T> text,
                        const std::vector<Var<T>>& refs, const prompt::PromptBundle& bundle,
                        const SegmentGate& gate, const DitOptions& opt = {},
                        layers::AttentionProbe<T>* probe = nullptr) {
  const T tv = t.value()[0];
  if (!(tv >= T(0) && tv <= T(1))) throw ArgumentError("forward_velocity: t must lie in [0, 1]");
  Var<T> noisy = enc::embed_noisy(p, x_patches);
  auto seq = layout::assemble(noisy, text, refs, bundle, c.grid(), c.grid());
  const auto positions = layout::rope_indices(seq.shape, c.ref_offset());
  Tensor<T> mask;
  const Tensor<T>* mask_ptr = nullptr;
  if (opt.use_mask) {
    mask = layout::build_mask<T>(seq.shape, opt.symmetric_mask || c.symmetric_mask);
    mask_ptr = &mask;
  }
  Var<T> temb = time_embedding(p, c, t);
  Var<T> x = seq.tokens;
  for (std::size_t i = 0; i < c.blocks; ++i) {
    try {
      x = mma_block(p, c, i, x, seq.shape, mask_ptr, positions, temb, gate, probe);
    } catch (const NumericError& e) {
      throw NumericError("mma_block " + std::to_string(i) + ": " + e.what());
    }
  }
  Var<T> xn = ad::slice_rows(x, 0, seq.shape.noisy);
  Var<T> mod = layers::linear(p, "final.mod", ad::silu(temb));
  xn = modulate(ad::rms_norm(xn), ad::slice_cols(mod, 0, c.d), ad::slice_cols(mod, c.d, 2 * c.d));
  return layers::linear(p, "final.head", xn);
}

}  // namespace aligngen::dit
