#pragma once

#include <random>
#include <string>
#include <vector>

#include "aligngen/dem.hpp"
#include "aligngen/ditnet.hpp"
#include "aligngen/encoders.hpp"
#include "aligngen/flow.hpp"
#include "aligngen/image.hpp"
#include "aligngen/model_config.hpp"
#include "aligngen/params.hpp"
#include "aligngen/promptkit.hpp"

// End-to-end assembly: text/redux/reference encoders, DEM + splice and the
// diffusion transformer.
namespace aligngen {

using ad::Tensor;
using ad::Var;

// Which alignment components are active for a forward pass.
struct Variant {
  bool use_star = true;  // prompts carry <s*> before the concept name
  bool use_dem = true;
  bool use_mask = true;
  dem::SpliceMode splice = dem::SpliceMode::kFirstOnly;
};

template <typename T, typename Rng>
ParamStore<T> init_base_params(const ModelConfig& c, Rng& rng) {
  c.validate();
  ParamStore<T> s;
  enc::init_text_encoder(s, c, rng);
  enc::init_image_embedder(s, c, rng);
  enc::init_redux(s, c, rng);
  dit::init_backbone(s, c, rng);
  return s;
}

// Mean of the text-embedding rows of `token_ids`.
template <typename T>
Tensor<T> mean_embedding(const ParamStore<T>& s, const std::vector<int>& token_ids) {
  const auto& table = s.get("text.embed");
  if (token_ids.empty()) throw ArgumentError("mean_embedding: no tokens");
  Tensor<T> out({1, table.cols()});
  for (int id : token_ids)
    for (std::size_t c = 0; c < table.cols(); ++c) out[c] += table(static_cast<std::size_t>(id), c);
  for (auto& v : out.data()) v /= static_cast<T>(token_ids.size());
  return out;
}

// Adds LoRA pairs, DEM weights and the <s*> embedding to a pretrained store.
template <typename T, typename Rng>
void add_adapter_params(ParamStore<T>& s, const ModelConfig& c, Rng& rng, Tensor<T> star_init) {
  if (star_init.dims() != ad::Shape{1, c.d}) throw ShapeError("s_star init must be 1 x d");
  dit::init_lora(s, c, rng);
  dem::init_dem(s, c, rng);
  s.add("s_star", std::move(star_init), Group::kStar, false);
}

template <typename T>
struct Conditioning {
  Var<T> text;
  std::vector<Var<T>> refs;
  prompt::PromptBundle bundle;
};

// Timestep-independent conditioning as plain tensors (cached across steps).
template <typename T>
struct FrozenConditioning {
  Tensor<T> text;
  std::vector<Tensor<T>> refs;
  prompt::PromptBundle bundle;
};

template <typename T>
bool dem_available(const ParamStore<T>& s) {
  return s.contains("dem.sa.q.w");
}

// Text stream (with DEM-updated <s*> spliced in) and reference tokens.
// `mma_refs` enter the joint attention; `dem_refs[k]` feeds the redux tokens
// for the concept span with concept_index k.
template <typename T>
Conditioning<T> condition(Bound<T>& p, const ModelConfig& c, const prompt::PromptBundle& bundle,
                          const std::vector<Image>& mma_refs, const std::vector<Image>& dem_refs,
                          const dit::SegmentGate& gate, const Variant& v) {
  Conditioning<T> out;
  out.bundle = bundle;
  out.text = enc::encode_text(p, c, bundle);
  if (v.use_dem && dem_available(p.store())) {
    for (const auto& span : bundle.spans) {
      if (bundle.token_ids[span.begin] != prompt::kStarId) continue;
      if (span.length() < 2) throw ShapeError("condition: concept span must hold <s*> and a name");
      if (span.concept_index >= dem_refs.size()) {
        throw ArgumentError("condition: no reference image for concept " + std::to_string(span.concept_index));
      }
      Var<T> redux = enc::encode_redux(p, c, dem_refs[span.concept_index]);
      Var<T> ctoks = dem::extract_concept_tokens(out.text, span);
      Var<T> updated = dem::dem_forward(p, c, ctoks, redux);
      out.text = dem::splice_token(out.text, span, updated, v.splice);
    }
  }
  for (const auto& img : mma_refs) out.refs.push_back(enc::encode_reference(p, c, img, static_cast<T>(gate.ref)));
  return out;
}

template <typename T>
FrozenConditioning<T> freeze(const Conditioning<T>& cond) {
  FrozenConditioning<T> f{cond.text.value(), {}, cond.bundle};
  for (const auto& r : cond.refs) f.refs.push_back(r.value());
  return f;
}

template <typename T>
Conditioning<T> thaw(ad::Tape<T>& tape, const FrozenConditioning<T>& f) {
  Conditioning<T> c{tape.constant(f.text), {}, f.bundle};
  for (const auto& r : f.refs) c.refs.push_back(tape.constant(r));
  return c;
}

template <typename T>
Var<T> velocity(Bound<T>& p, const ModelConfig& c, Var<T> x_patches, Var<T> t, const Conditioning<T>& cond,
                const dit::SegmentGate& gate, const Variant& v,
                layers::AttentionProbe<T>* probe = nullptr) {
  return dit::forward_velocity(p, c, x_patches, t, cond.text, cond.refs, cond.bundle, gate,
                               dit::DitOptions{v.use_mask, c.symmetric_mask}, probe);
}

// Image-level convenience: velocity field with the same shape as the image.
template <typename T>
Image predict_velocity(const ParamStore<T>& store, const ModelConfig& c, const Image& x_t, double t,
                       const FrozenConditioning<T>& cond, const dit::SegmentGate& gate, const Variant& v) {
  ad::Tape<T> tape;
  Bound<T> p(tape, store);
  Conditioning<T> live = thaw(tape, cond);
  Var<T> x = tape.constant(patchify<T>(x_t, c.patch));
  Var<T> tv = tape.constant(Tensor<T>::scalar(static_cast<T>(t)));
  Var<T> out = velocity(p, c, x, tv, live, gate, v);
  return unpatchify(out.value(), c.image_size, c.image_size, c.patch);
}

template <typename T>
FrozenConditioning<T> precompute(const ParamStore<T>& store, const ModelConfig& c, const prompt::PromptBundle& bundle,
                                 const std::vector<Image>& mma_refs, const std::vector<Image>& dem_refs,
                                 const dit::SegmentGate& gate, const Variant& v) {
  ad::Tape<T> tape;
  Bound<T> p(tape, store);
  return freeze(condition(p, c, bundle, mma_refs, dem_refs, gate, v));
}

// One generation request. `refs` feed both the attention sequence and DEM;
// the unconditional branch is the empty prompt with a single black reference.
struct GenerateRequest {
  prompt::PromptBundle bundle;
  std::vector<Image> refs;
  Variant variant;
  flow::SampleConfig sample;
};

template <typename T>
Image generate(const ParamStore<T>& store, const ModelConfig& c, const GenerateRequest& req,
               std::vector<flow::StepRecord>* log = nullptr) {
  const auto gate = dit::SegmentGate::adaptation();
  const auto cond = precompute(store, c, req.bundle, req.refs, req.refs, gate, req.variant);
  const std::vector<Image> black{enc::black_reference(c.image_size, c.image_size)};
  const auto uncond = precompute(store, c, prompt::empty_prompt(c.max_text_len), black, black, gate, req.variant);
  auto field = [&](const FrozenConditioning<T>& fc) {
    return flow::Field([&store, &c, &fc, &gate, &req](const Image& x, double t) {
      return predict_velocity(store, c, x, t, fc, gate, req.variant);
    });
  };
  return flow::sample(field(cond), field(uncond), c.image_size, c.image_size, req.sample, log);
}

}  // namespace aligngen
