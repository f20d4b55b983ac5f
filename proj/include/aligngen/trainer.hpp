#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "aligngen/checkpoint.hpp"
#include "aligngen/flow.hpp"
#include "aligngen/model.hpp"
#include "aligngen/synthdata.hpp"

// Two-phase training: pretrain the base text-to-image model on the skewed
// corpus, then adapt LoRA + DEM + <s*> on reference/target pairs.
namespace aligngen::train {

struct TrainConfig {
  Phase phase = Phase::kPretrain;
  std::size_t batch = 16;
  std::size_t iterations = 1000;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global norm; 0 disables
  double drop_ratio = 0.5;
  std::array<double, 3> name_level_probs{0.6, 0.2, 0.2};
  // Empty-prompt probability, so the unconditional branch used by guidance
  // is trained in both phases.
  double prompt_dropout = 0.1;
  double redux_aux_weight = 1.0;
  std::uint64_t seed = 0;
  Variant variant;
  std::size_t max_consecutive_skips = 50;
  std::size_t divergence_window = 200;
  double divergence_factor = 10.0;

  void validate() const {
    if (!(drop_ratio >= 0.0 && drop_ratio <= 1.0)) throw ArgumentError("drop_ratio must lie in [0, 1]");
    if (!(prompt_dropout >= 0.0 && prompt_dropout <= 1.0)) throw ArgumentError("prompt_dropout must lie in [0, 1]");
    if (weight_decay < 0.0) throw ArgumentError("weight_decay must be >= 0");
    if (batch == 0) throw ArgumentError("batch must be >= 1");
    if (!(lr > 0.0)) throw ArgumentError("lr must be positive");
  }

  static TrainConfig pretrain_defaults() { return TrainConfig{}; }
  static TrainConfig adapt_defaults() {
    TrainConfig c;
    c.phase = Phase::kAdapt;
    c.lr = 3e-4;
    return c;
  }
};

// ---- optimizer -------------------------------------------------------------

struct AdamState {
  std::unordered_map<std::string, std::pair<ad::Tensor<float>, ad::Tensor<float>>> moments;
  std::size_t step = 0;
  std::size_t consecutive_skips = 0;
  std::size_t total_skips = 0;
};

using Grads = std::vector<std::pair<std::string, ad::Tensor<float>>>;

inline double global_norm(const Grads& grads) {
  double acc = 0.0;
  for (const auto& [n, g] : grads)
    for (float v : g.data()) acc += double(v) * v;
  return std::sqrt(acc);
}

// Decoupled-weight-decay Adam over trainable entries. Returns false when the
// step was skipped for non-finite gradients.
inline bool optimizer_step(ParamStore<float>& store, const Grads& grads, AdamState& st, const TrainConfig& cfg) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) {
      ++st.total_skips;
      if (++st.consecutive_skips >= cfg.max_consecutive_skips) {
        throw NumericError("optimizer: " + std::to_string(st.consecutive_skips) +
                           " consecutive steps with non-finite gradients (last: " + name + ")");
      }
      return false;
    }
  }
  st.consecutive_skips = 0;
  ++st.step;
  const double norm = global_norm(grads);
  const double clip = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(st.step));
  for (const auto& [name, g] : grads) {
    auto& e = store.entry(name);
    if (!e.trainable) continue;
    auto it = st.moments.find(name);
    if (it == st.moments.end()) {
      it = st.moments.emplace(name, std::make_pair(ad::Tensor<float>(g.dims()), ad::Tensor<float>(g.dims()))).first;
    }
    auto& m = it->second.first;
    auto& v = it->second.second;
    const double decay = e.decay ? cfg.lr * cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = static_cast<float>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi);
      v[i] = static_cast<float>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi);
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      double w = e.value[i];
      w -= decay * w;
      w -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
      e.value[i] = static_cast<float>(w);
    }
  }
  return true;
}

// ---- logging ---------------------------------------------------------------

struct LogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  std::size_t dropped_refs = 0;
};

struct TrainResult {
  std::vector<LogRow> log;
  std::size_t skipped = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

inline void write_log(const std::vector<LogRow>& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("training log: cannot write " + path);
  out << "step,loss,grad_norm,dropped_refs\n";
  out.precision(9);
  for (const auto& r : log) out << r.step << ',' << r.loss << ',' << r.grad_norm << ',' << r.dropped_refs << '\n';
}

// Hash of every base-group tensor; used to assert the adapt-phase freeze.
inline std::uint64_t base_hash(const ParamStore<float>& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& e : s.entries()) {
    if (e.group != Group::kBase) continue;
    const auto* p = reinterpret_cast<const unsigned char*>(e.value.raw());
    for (std::size_t i = 0; i < e.value.size() * sizeof(float); ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

// One batch: builds the loss on a fresh tape, returns (loss, grads, dropped).
struct BatchOutcome {
  double loss = 0.0;
  Grads grads;
  std::size_t dropped = 0;
};

using StepHook = std::function<void(const LogRow&)>;

namespace detail {

class Divergence {
 public:
  explicit Divergence(const TrainConfig& c) : cfg_(c) {}
  void observe(std::size_t step, double loss) {
    if (step == 1) initial_ = loss;
    run_ = loss > cfg_.divergence_factor * initial_ ? run_ + 1 : 0;
    if (run_ >= cfg_.divergence_window) {
      throw NumericError("training diverged: loss above " + std::to_string(cfg_.divergence_factor) +
                         "x the initial value for " + std::to_string(run_) + " consecutive steps");
    }
  }
  double initial() const { return initial_; }

 private:
  const TrainConfig& cfg_;
  double initial_ = 0.0;
  std::size_t run_ = 0;
};

template <typename BatchFn>
TrainResult run_loop(ParamStore<float>& store, const TrainConfig& cfg, BatchFn&& batch_fn, bool check_freeze,
                     const StepHook& hook) {
  AdamState st;
  TrainResult res;
  Divergence div(cfg);
  const std::uint64_t frozen = check_freeze ? base_hash(store) : 0;
  for (std::size_t step = 1; step <= cfg.iterations; ++step) {
    BatchOutcome b = batch_fn();
    if (!std::isfinite(b.loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
    const bool applied = optimizer_step(store, b.grads, st, cfg);
    if (check_freeze && base_hash(store) != frozen) {
      throw std::logic_error("adapt: base parameters changed at step " + std::to_string(step));
    }
    div.observe(step, b.loss);
    LogRow row{step, b.loss, applied ? global_norm(b.grads) : NAN, b.dropped};
    res.log.push_back(row);
    if (hook) hook(row);
  }
  res.skipped = st.total_skips;
  res.initial_loss = div.initial();
  res.final_loss = res.log.empty() ? 0.0 : res.log.back().loss;
  return res;
}

}  // namespace detail

// ---- phase 1 ---------------------------------------------------------------

// Flow matching on (caption -> image) with a black reference segment, plus the
// redux reconstruction head.
inline TrainResult pretrain(ParamStore<float>& store, const ModelConfig& mc, const std::vector<synth::PretrainExample>& corpus,
                            const TrainConfig& cfg, const StepHook& hook = {}) {
  cfg.validate();
  if (cfg.phase != Phase::kPretrain) throw ArgumentError("pretrain: config phase must be pretrain");
  if (corpus.empty()) throw DataError("pretrain: empty corpus");
  store.set_phase(Phase::kPretrain);
  std::mt19937_64 rng(cfg.seed);
  const auto vocab = prompt::Vocabulary::standard();
  const std::vector<Image> black{enc::black_reference(mc.image_size, mc.image_size)};
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  std::bernoulli_distribution drop_prompt(cfg.prompt_dropout);
  const auto gate = dit::SegmentGate::off();
  auto batch_fn = [&]() {
    ad::Tape<float> tape;
    Bound<float> p(tape, store);
    std::vector<ad::Var<float>> flow_losses, aux_losses;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto& ex = corpus[pick(rng)];
      const auto fs = flow::make_flow_sample(ex.image, rng);
      const auto bundle = drop_prompt(rng) ? prompt::empty_prompt(mc.max_text_len)
                                           : prompt::build_plain_prompt(vocab, ex.caption, mc.max_text_len);
      auto cond = condition(p, mc, bundle, black, {}, gate, cfg.variant);
      auto x = tape.constant(patchify<float>(fs.x_t, mc.patch));
      auto t = tape.constant(ad::Tensor<float>::scalar(static_cast<float>(fs.t)));
      flow_losses.push_back(flow::velocity_loss(velocity(p, mc, x, t, cond, gate, cfg.variant), fs, mc.patch));
      if (cfg.redux_aux_weight > 0.0) {
        aux_losses.push_back(enc::redux_reconstruction_loss(p, mc, enc::encode_redux(p, mc, ex.image), ex.image));
      }
    }
    const float inv = 1.0f / static_cast<float>(cfg.batch);
    auto loss = ad::scale(ad::sum(ad::concat_rows(flow_losses)), inv);
    auto total = loss;
    if (!aux_losses.empty()) {
      total = ad::add(loss, ad::scale(ad::sum(ad::concat_rows(aux_losses)),
                                      static_cast<float>(cfg.redux_aux_weight) * inv));
    }
    tape.backward(total);
    return BatchOutcome{loss.value()[0], p.gradients(), 0};
  };
  return detail::run_loop(store, cfg, batch_fn, false, hook);
}

// ---- phase 2 ---------------------------------------------------------------

// Builds the prompt for one adapt example under the variant's naming rules.
inline prompt::PromptBundle adapt_prompt(const prompt::Vocabulary& vocab, const synth::PairExample& ex,
                                         prompt::NameLevel level, const Variant& v, std::size_t max_len) {
  return v.use_star ? prompt::build_prompt(vocab, ex.caption_template, ex.concept_rec, level, max_len)
                    : prompt::build_prompt_without_star(vocab, ex.caption_template, ex.concept_rec, level, max_len);
}

// Adds the adapter groups to a pretrained store, <s*> starting at the mean
// surface-name embedding of the catalog.
inline void attach_adapter(ParamStore<float>& store, const ModelConfig& mc, const std::vector<prompt::ConceptRecord>& catalog,
                           std::uint64_t seed) {
  const auto vocab = prompt::Vocabulary::standard();
  std::vector<int> ids;
  for (const auto& c : catalog)
    for (const auto& w : c.surface_name) ids.push_back(vocab.id(w));
  std::mt19937_64 rng(seed ^ 0x5eedull);
  add_adapter_params(store, mc, rng, mean_embedding(store, ids));
}

inline TrainResult adapt(ParamStore<float>& store, const ModelConfig& mc, const std::vector<const synth::PairExample*>& pairs,
                         const TrainConfig& cfg, const StepHook& hook = {}) {
  cfg.validate();
  if (cfg.phase != Phase::kAdapt) throw ArgumentError("adapt: config phase must be adapt");
  if (pairs.empty()) throw DataError("adapt: no training pairs");
  if (!store.contains("s_star")) throw ArgumentError("adapt: store has no adapter parameters");
  store.set_phase(Phase::kAdapt);
  std::mt19937_64 rng(cfg.seed);
  const auto vocab = prompt::Vocabulary::standard();
  const Image black = enc::black_reference(mc.image_size, mc.image_size);
  std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
  std::bernoulli_distribution drop_ref(cfg.drop_ratio);
  std::bernoulli_distribution drop_prompt(cfg.prompt_dropout);
  const auto gate = dit::SegmentGate::adaptation();
  auto batch_fn = [&]() {
    ad::Tape<float> tape;
    Bound<float> p(tape, store);
    std::vector<ad::Var<float>> losses;
    std::size_t dropped = 0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto& ex = *pairs[pick(rng)];
      const auto fs = flow::make_flow_sample(ex.target, rng);
      const bool dropped_ref = drop_ref(rng);
      dropped += dropped_ref;
      const auto level = prompt::sample_name_level(rng, cfg.name_level_probs);
      const auto bundle = drop_prompt(rng) ? prompt::empty_prompt(mc.max_text_len)
                                           : adapt_prompt(vocab, ex, level, cfg.variant, mc.max_text_len);
      // Dropout blanks the attention-side reference; DEM keeps the true one.
      auto cond = condition(p, mc, bundle, {dropped_ref ? black : ex.reference}, {ex.reference}, gate, cfg.variant);
      auto x = tape.constant(patchify<float>(fs.x_t, mc.patch));
      auto t = tape.constant(ad::Tensor<float>::scalar(static_cast<float>(fs.t)));
      losses.push_back(flow::velocity_loss(velocity(p, mc, x, t, cond, gate, cfg.variant), fs, mc.patch));
    }
    auto loss = ad::scale(ad::sum(ad::concat_rows(losses)), 1.0f / static_cast<float>(cfg.batch));
    tape.backward(loss);
    return BatchOutcome{loss.value()[0], p.gradients(), dropped};
  };
  return detail::run_loop(store, cfg, batch_fn, true, hook);
}

}  // namespace aligngen::train
