#pragma once

#include <random>
#include <string>
#include <vector>

#include "aligngen/dem.hpp"
#include "aligngen/diffcore/gradcheck.hpp"
#include "aligngen/ditnet.hpp"
#include "aligngen/layers.hpp"
#include "aligngen/model.hpp"

// Finite-difference checks of every trainable block in 64-bit.
namespace aligngen::gradsuite {

using ad::GradReport;
using ad::NamedTensors;
using ad::Tensor;
using ad::Var;

inline constexpr double kBlockTol = 1e-4;

namespace detail {

inline NamedTensors named(const ParamStore<double>& s) {
  NamedTensors out;
  for (const auto& e : s.entries()) out.emplace_back(e.name, e.value);
  return out;
}

// Gradcheck over every tensor of `store`; `fwd` builds the scalar through a
// Bound whose entries are the gradcheck leaves.
template <typename Fwd>
GradReport check_store(const std::string& name, const ParamStore<double>& store, Fwd fwd,
                       const ad::GradcheckOptions& opt) {
  auto forward = [&store, fwd](ad::Tape<double>& tape, const std::vector<Var<double>>& leaves) {
    Bound<double> p(tape, store);
    for (std::size_t i = 0; i < leaves.size(); ++i) p.bind(store.entries()[i].name, leaves[i]);
    return fwd(p);
  };
  return ad::gradcheck(name, forward, named(store), opt);
}

// Replaces every zero-initialized tensor with small random values so no
// gradient path is trivially zero.
template <typename Rng>
void randomize_zeros(ParamStore<double>& s, Rng& rng, double std = 0.3) {
  std::normal_distribution<double> n(0.0, std);
  for (auto& e : s.entries()) {
    bool all_zero = true;
    for (double v : e.value.data()) all_zero = all_zero && v == 0.0;
    if (all_zero)
      for (auto& v : e.value.data()) v = n(rng);
  }
}

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.d = 8;
  c.blocks = 1;
  c.heads = 2;
  c.text_heads = 2;
  c.dem_heads = 2;
  c.mlp_ratio = 2;
  c.dem_mlp_ratio = 2;
  c.patch = 4;
  c.image_size = 8;  // 2 x 2 patch grid
  c.redux_tokens = 4;
  c.redux_patch = 2;
  c.lora_rank = 2;
  c.max_text_len = 4;
  return c;
}

template <typename Rng>
Image random_image(int size, Rng& rng) {
  Image img(size, size);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

}  // namespace detail

// Masked multi-head attention with RoPE on q and k, three token kinds.
inline GradReport attention(std::uint64_t seed = 1, const ad::GradcheckOptions& opt = {1e-5, kBlockTol, 1}) {
  std::mt19937_64 rng(seed);
  layout::LayoutShape shape{2, 2, 1, 1, 2, {true, false}};
  const auto positions = layout::rope_indices(shape);
  const auto mask = layout::build_mask<double>(shape);
  NamedTensors params{{"x", Tensor<double>::uniform({shape.total(), 8}, rng, -2, 2)},
                      {"wq", Tensor<double>::uniform({8, 8}, rng, -1, 1)},
                      {"wk", Tensor<double>::uniform({8, 8}, rng, -1, 1)},
                      {"wv", Tensor<double>::uniform({8, 8}, rng, -1, 1)}};
  auto fwd = [positions, mask](ad::Tape<double>&, const std::vector<Var<double>>& v) {
    auto q = dit::rope_rotate(ad::matmul(v[0], v[1]), positions, 2, 100.0);
    auto k = dit::rope_rotate(ad::matmul(v[0], v[2]), positions, 2, 100.0);
    return ad::random_projection(layers::multi_head_attention(q, k, ad::matmul(v[0], v[3]), 2, &mask));
  };
  return ad::gradcheck("attention(mask+rope)", fwd, params, opt);
}

inline GradReport dem_block(std::uint64_t seed = 2, const ad::GradcheckOptions& opt = {1e-5, kBlockTol, 1}) {
  std::mt19937_64 rng(seed);
  ModelConfig c = detail::tiny_config();
  ParamStore<double> s;
  dem::init_dem(s, c, rng);
  detail::randomize_zeros(s, rng);
  s.add("concept", Tensor<double>::uniform({3, c.d}, rng, -2, 2), Group::kDem, false);
  s.add("redux", Tensor<double>::uniform({c.redux_tokens, c.d}, rng, -2, 2), Group::kDem, false);
  auto fwd = [c](Bound<double>& p) { return ad::random_projection(dem::dem_forward(p, c, p("concept"), p("redux"))); };
  return detail::check_store("dem", s, fwd, opt);
}

// Base linear plus a gated LoRA delta on a row range.
inline GradReport lora_linear(std::uint64_t seed = 3, const ad::GradcheckOptions& opt = {1e-5, kBlockTol, 1}) {
  std::mt19937_64 rng(seed);
  ParamStore<double> s;
  layers::add_linear(s, "lin", 6, 5, Group::kBase, rng);
  layers::add_lora(s, "lora.lin", 6, 5, 3, rng);
  detail::randomize_zeros(s, rng);
  s.add("x", Tensor<double>::uniform({4, 6}, rng, -2, 2), Group::kBase, false);
  auto fwd = [](Bound<double>& p) {
    return ad::random_projection(layers::gated_linear(p, "lin", "lora.lin", p("x"), 2, 4, 0.7));
  };
  return detail::check_store("lora_gated_linear", s, fwd, opt);
}

// d=8, one block, 2x2 grid, M=4: every group (base, LoRA, DEM, <s*>).
inline GradReport full_model(std::uint64_t seed = 4, const ad::GradcheckOptions& opt = {1e-5, kBlockTol, 1}) {
  std::mt19937_64 rng(seed);
  const ModelConfig c = detail::tiny_config();
  ParamStore<double> s = init_base_params<double>(c, rng);
  add_adapter_params(s, c, rng, Tensor<double>::randn({1, c.d}, rng, 1.0));
  detail::randomize_zeros(s, rng);
  const auto vocab = prompt::Vocabulary::standard();
  prompt::ConceptRecord rec{0, {"wooden", "square"}, {"square"}, {"shape"}, {}};
  const auto bundle = prompt::build_prompt(vocab, "a {C}", rec, prompt::NameLevel::kSurface, c.max_text_len);
  const Image ref = detail::random_image(c.image_size, rng);
  const Image xt = detail::random_image(c.image_size, rng);
  auto fwd = [=](Bound<double>& p) {
    const auto gate = dit::SegmentGate::adaptation();
    auto cond = condition(p, c, bundle, {ref}, {ref}, gate, Variant{});
    auto x = p.tape().constant(patchify<double>(xt, c.patch));
    auto t = p.tape().constant(Tensor<double>::scalar(0.37));
    return ad::random_projection(velocity(p, c, x, t, cond, gate, Variant{}));
  };
  return detail::check_store("full_model(1 block)", s, fwd, opt);
}

inline const std::vector<std::string>& module_names() {
  static const std::vector<std::string> n{"attention", "dem", "lora", "model"};
  return n;
}

inline std::vector<GradReport> run(const std::string& module = "") {
  std::vector<GradReport> out;
  bool any = false;
  if (module.empty() || module == "attention") out.push_back(attention()), any = true;
  if (module.empty() || module == "dem") out.push_back(dem_block()), any = true;
  if (module.empty() || module == "lora") out.push_back(lora_linear()), any = true;
  if (module.empty() || module == "model") out.push_back(full_model()), any = true;
  if (!any) throw ArgumentError("gradcheck: unknown module '" + module + "'");
  return out;
}

}  // namespace aligngen::gradsuite
