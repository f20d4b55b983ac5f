#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aligngen/model.hpp"
#include "aligngen/synthdata.hpp"
#include "aligngen/trainer.hpp"

// Closed-form pixel proxies for concept preservation (CP) and prompt
// following (PF), the reference/black-reference probe and the ablation table.
namespace aligngen::eval {

using prompt::ConceptRecord;
using prompt::Pattern;
using prompt::ShapeClass;

inline bool is_glyph_class(std::size_t palette_index) {
  const auto& name = synth::palette()[palette_index].name;
  return name != "white" && name != "cyan" && name != "magenta" && name != "gray";
}

struct GlyphInfo {
  bool found = false;
  std::vector<std::size_t> pixels;  // r * W + c
  int top = 0, left = 0, bottom = 0, right = 0;  // inclusive bbox
  std::string color;
  ShapeClass shape = ShapeClass::kSquare;
  Pattern pattern = Pattern::kPlain;
};

inline std::vector<std::size_t> classify_pixels(const Image& img) {
  std::vector<std::size_t> cls(static_cast<std::size_t>(img.height) * img.width);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      cls[static_cast<std::size_t>(r) * img.width + c] = synth::nearest_palette(img.at(r, c, 0), img.at(r, c, 1), img.at(r, c, 2));
  return cls;
}

// Largest 4-connected component of glyph-class pixels.
inline std::vector<std::size_t> largest_component(const Image& img, const std::vector<std::size_t>& cls) {
  const int h = img.height, w = img.width;
  std::vector<int> label(cls.size(), -1);
  std::vector<std::size_t> best, cur, stack;
  for (std::size_t s = 0; s < cls.size(); ++s) {
    if (label[s] >= 0 || !is_glyph_class(cls[s])) continue;
    cur.clear();
    stack.assign(1, s);
    label[s] = 1;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      cur.push_back(i);
      const int r = int(i) / w, c = int(i) % w;
      const int nr[4] = {r - 1, r + 1, r, r}, nc[4] = {c, c, c - 1, c + 1};
      for (int k = 0; k < 4; ++k) {
        if (nr[k] < 0 || nr[k] >= h || nc[k] < 0 || nc[k] >= w) continue;
        const std::size_t j = static_cast<std::size_t>(nr[k]) * w + nc[k];
        if (label[j] < 0 && is_glyph_class(cls[j])) {
          label[j] = 1;
          stack.push_back(j);
        }
      }
    }
    if (cur.size() > best.size()) best = cur;
  }
  std::sort(best.begin(), best.end());
  return best;
}

inline float brightness(const Image& img, std::size_t i) {
  const int w = img.width;
  const int r = int(i) / w, c = int(i) % w;
  return std::max({img.at(r, c, 0), img.at(r, c, 1), img.at(r, c, 2)});
}

inline constexpr std::size_t kMinGlyphPixels = 4;

inline GlyphInfo analyze_glyph(const Image& img) {
  GlyphInfo g;
  const auto cls = classify_pixels(img);
  g.pixels = largest_component(img, cls);
  if (g.pixels.size() < kMinGlyphPixels) return g;
  g.found = true;
  const int w = img.width;
  g.top = g.left = 1 << 30;
  g.bottom = g.right = -1;
  std::vector<std::uint8_t> in(cls.size(), 0);
  double sum[3] = {0, 0, 0};
  std::size_t colored = 0;
  for (auto i : g.pixels) {
    in[i] = 1;
    const int r = int(i) / w, c = int(i) % w;
    g.top = std::min(g.top, r);
    g.bottom = std::max(g.bottom, r);
    g.left = std::min(g.left, c);
    g.right = std::max(g.right, c);
    if (synth::palette()[cls[i]].name == "black") continue;  // stripe rows
    for (int ch = 0; ch < 3; ++ch) sum[ch] += img.at(r, c, ch);
    ++colored;
  }
  if (colored == 0) {
    // all dark: classify the normalized hue instead
    for (auto i : g.pixels) {
      const int r = int(i) / w, c = int(i) % w;
      const float m = std::max(1e-6f, brightness(img, i));
      for (int ch = 0; ch < 3; ++ch) sum[ch] += img.at(r, c, ch) / m;
    }
    colored = g.pixels.size();
  }
  float best = 1e30f;
  for (const auto& name : synth::glyph_colors()) {
    const auto rgb = synth::palette_rgb(name);
    const float m[3] = {float(sum[0] / colored), float(sum[1] / colored), float(sum[2] / colored)};
    const float d = (m[0] - rgb.r) * (m[0] - rgb.r) + (m[1] - rgb.g) * (m[1] - rgb.g) + (m[2] - rgb.b) * (m[2] - rgb.b);
    if (d < best) {
      best = d;
      g.color = name;
    }
  }
  // Shape: best IoU against each template placed on the component's box.
  const int size = std::max(g.bottom - g.top, g.right - g.left) + 1;
  double best_iou = -1.0;
  for (auto s : synth::kShapes) {
    std::size_t inter = 0, uni = 0;
    for (int r = 0; r < img.height; ++r)
      for (int c = 0; c < w; ++c) {
        const bool a = in[static_cast<std::size_t>(r) * w + c];
        const bool b = synth::inside_shape(s, g.top, g.left, size, r, c);
        inter += a && b;
        uni += a || b;
      }
    const double iou = uni ? double(inter) / double(uni) : 0.0;
    if (iou > best_iou) {
      best_iou = iou;
      g.shape = s;
    }
  }
  // Pattern: share of vertical neighbour pairs with a large brightness jump.
  std::size_t pairs = 0, jumps = 0;
  for (auto i : g.pixels) {
    const std::size_t j = i + w;
    if (j >= in.size() || !in[j]) continue;
    ++pairs;
    jumps += std::abs(brightness(img, i) - brightness(img, j)) > 0.35f;
  }
  g.pattern = (pairs > 0 && double(jumps) / double(pairs) >= 0.5) ? Pattern::kStriped : Pattern::kPlain;
  return g;
}

inline constexpr double kColorWeight = 0.5, kShapeWeight = 0.3, kPatternWeight = 0.2;

inline double cp_proxy(const Image& generated, const ConceptRecord& c) {
  const auto g = analyze_glyph(generated);
  if (!g.found) return 0.0;
  return kColorWeight * (g.color == c.attrs.color_name) + kShapeWeight * (g.shape == c.attrs.shape) +
         kPatternWeight * (g.pattern == c.attrs.pattern);
}

// Fraction of non-glyph pixels classified as the captioned background.
inline double pf_proxy(const Image& generated, const std::string& caption) {
  const std::size_t want = [&] {
    const auto bg = synth::caption_background(caption);
    for (std::size_t i = 0; i < synth::palette().size(); ++i)
      if (synth::palette()[i].name == bg) return i;
    throw ArgumentError("pf_proxy: background '" + bg + "' is not a palette color");
  }();
  const auto cls = classify_pixels(generated);
  const auto g = analyze_glyph(generated);
  std::vector<std::uint8_t> in(cls.size(), 0);
  if (g.found)
    for (auto i : g.pixels) in[i] = 1;
  std::size_t total = 0, hit = 0;
  for (std::size_t i = 0; i < cls.size(); ++i) {
    if (in[i]) continue;
    ++total;
    hit += cls[i] == want;
  }
  return total ? double(hit) / double(total) : 0.0;
}

// ---- reports ---------------------------------------------------------------

struct CaseRow {
  std::uint64_t seed = 0;
  std::string prompt;
  int concept_id = -1;
  double cp = 0.0;
  double pf = 0.0;
};

struct EvalReport {
  std::string name;
  std::vector<CaseRow> rows;
  double cp = 0.0;
  double pf = 0.0;
  double cp_pf = 0.0;
  std::string fingerprint;

  void finalize() {
    cp = pf = 0.0;
    for (const auto& r : rows) {
      cp += r.cp;
      pf += r.pf;
    }
    if (!rows.empty()) {
      cp /= double(rows.size());
      pf /= double(rows.size());
    }
    cp_pf = cp * pf;
  }
};

inline void write_report_csv(const std::vector<EvalReport>& reports, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("report: cannot write " + path);
  out << "variant,seed,concept_id,prompt,cp,pf\n";
  for (const auto& rep : reports)
    for (const auto& r : rep.rows)
      out << rep.name << ',' << r.seed << ',' << r.concept_id << ",\"" << r.prompt << "\"," << r.cp << ',' << r.pf << '\n';
}

inline nlohmann::json report_json(const EvalReport& r) {
  return {{"name", r.name}, {"cp", r.cp}, {"pf", r.pf}, {"cp_pf", r.cp_pf}, {"cases", r.rows.size()},
          {"fingerprint", r.fingerprint}};
}

inline void write_report_json(const std::vector<EvalReport>& reports, const std::string& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reports) j.push_back(report_json(r));
  std::ofstream out(path);
  if (!out) throw DataError("report: cannot write " + path);
  out << j.dump(2) << '\n';
}

// Side-by-side strip per case: reference | generated, written as one PPM.
inline Image contact_sheet(const std::vector<std::pair<Image, Image>>& cases) {
  if (cases.empty()) return Image(1, 1);
  const int h = cases[0].first.height, w = cases[0].first.width;
  Image sheet(h * int(cases.size()), 2 * w);
  for (std::size_t k = 0; k < cases.size(); ++k)
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        for (int ch = 0; ch < 3; ++ch) {
          sheet.at(int(k) * h + r, c, ch) = cases[k].first.at(r, c, ch);
          sheet.at(int(k) * h + r, w + c, ch) = cases[k].second.at(r, c, ch);
        }
  return sheet;
}

// ---- evaluation ------------------------------------------------------------

struct EvalOptions {
  std::size_t seeds = 4;
  std::uint64_t seed_base = 42;
  flow::SampleConfig sample;
  Variant variant;
  std::vector<std::pair<Image, Image>>* sheet = nullptr;
};

// One case per (held-out concept, seed): the concept's first held-out pair
// fixes the caption template.
inline std::vector<const synth::PairExample*> eval_cases(const synth::Dataset& ds, const std::string& split = "heldout") {
  std::vector<const synth::PairExample*> out;
  for (const auto* p : ds.split(split)) {
    bool seen = false;
    for (const auto* q : out) seen = seen || q->concept_rec.concept_id == p->concept_rec.concept_id;
    if (!seen) out.push_back(p);
  }
  if (out.empty()) throw DataError("eval: split '" + split + "' is empty");
  return out;
}

inline std::string split_fingerprint(const std::vector<const synth::PairExample*>& cases) {
  std::string s;
  for (const auto* c : cases) s += std::to_string(c->concept_rec.concept_id) + ":" + c->caption_template + ";";
  std::ostringstream os;
  os << std::hex << synth::fnv1a64(s);
  return os.str();
}

inline EvalReport evaluate(const ParamStore<float>& store, const ModelConfig& mc,
                           const std::vector<const synth::PairExample*>& cases, const EvalOptions& opt,
                           const std::string& name = "eval") {
  const auto vocab = prompt::Vocabulary::standard();
  EvalReport rep;
  rep.name = name;
  rep.fingerprint = split_fingerprint(cases);
  for (const auto* ex : cases) {
    const auto bundle = train::adapt_prompt(vocab, *ex, prompt::NameLevel::kSurface, opt.variant, mc.max_text_len);
    const std::string text = prompt::instantiate(vocab, bundle);
    for (std::size_t k = 0; k < opt.seeds; ++k) {
      GenerateRequest req{bundle, {ex->reference}, opt.variant, opt.sample};
      req.sample.seed = opt.seed_base + k;
      const Image img = generate(store, mc, req);
      rep.rows.push_back({req.sample.seed, text, ex->concept_rec.concept_id, cp_proxy(img, ex->concept_rec), pf_proxy(img, text)});
      if (opt.sheet) opt.sheet->emplace_back(ex->reference, img);
    }
  }
  rep.finalize();
  return rep;
}

// ---- misalignment probe -----------------------------------------------------

struct ProbeResult {
  double cp_with_ref = 0.0;
  double cp_black_ref = 0.0;
  double delta = 0.0;
  std::vector<CaseRow> with_rows, black_rows;
};

// Each seed is sampled twice with identical noise: the true reference, and a
// black image in its place (both attention and DEM inputs).
inline ProbeResult misalignment_probe(const ParamStore<float>& store, const ModelConfig& mc,
                                      const std::vector<const synth::PairExample*>& cases, const EvalOptions& opt,
                                      bool black_first = false) {
  if (opt.seeds < 1) throw ArgumentError("probe: need at least one seed");
  const auto vocab = prompt::Vocabulary::standard();
  const Image black = enc::black_reference(mc.image_size, mc.image_size);
  ProbeResult res;
  for (const auto* ex : cases) {
    const auto bundle = train::adapt_prompt(vocab, *ex, prompt::NameLevel::kSurface, opt.variant, mc.max_text_len);
    const std::string text = prompt::instantiate(vocab, bundle);
    for (std::size_t k = 0; k < opt.seeds; ++k) {
      auto run = [&](const Image& ref) {
        GenerateRequest req{bundle, {ref}, opt.variant, opt.sample};
        req.sample.seed = opt.seed_base + k;
        const Image img = generate(store, mc, req);
        return CaseRow{req.sample.seed, text, ex->concept_rec.concept_id, cp_proxy(img, ex->concept_rec), pf_proxy(img, text)};
      };
      if (black_first) {
        res.black_rows.push_back(run(black));
        res.with_rows.push_back(run(ex->reference));
      } else {
        res.with_rows.push_back(run(ex->reference));
        res.black_rows.push_back(run(black));
      }
    }
  }
  for (const auto& r : res.with_rows) res.cp_with_ref += r.cp;
  for (const auto& r : res.black_rows) res.cp_black_ref += r.cp;
  res.cp_with_ref /= double(res.with_rows.size());
  res.cp_black_ref /= double(res.black_rows.size());
  res.delta = res.cp_with_ref - res.cp_black_ref;
  return res;
}

// ---- ablations -------------------------------------------------------------

struct AblationVariant {
  std::string name;
  Variant variant;
  double drop_ratio = 0.5;
  std::array<double, 3> name_probs{0.6, 0.2, 0.2};
};

inline AblationVariant parse_variant(const std::string& name, const train::TrainConfig& base) {
  AblationVariant v{name, base.variant, base.drop_ratio, base.name_level_probs};
  if (name == "full") return v;
  if (name == "no_LT") {
    v.variant.use_star = false;
  } else if (name == "no_DEM") {
    v.variant.use_dem = false;
  } else if (name == "no_mask") {
    v.variant.use_mask = false;
  } else if (name == "no_TS") {
    v.drop_ratio = 0.0;
    v.name_probs = {1.0, 0.0, 0.0};
  } else if (name == "replace_all") {
    v.variant.splice = dem::SpliceMode::kAll;
  } else if (name.rfind("drop", 0) == 0) {
    std::string num = name.substr(4);
    if (!num.empty() && (num[0] == '=' || num[0] == '_')) num = num.substr(1);
    try {
      std::size_t used = 0;
      v.drop_ratio = std::stod(num, &used);
      if (used != num.size()) throw std::invalid_argument(num);
    } catch (const std::exception&) {
      throw ArgumentError("ablation: bad drop variant '" + name + "'");
    }
    if (!(v.drop_ratio >= 0.0 && v.drop_ratio <= 1.0)) throw ArgumentError("ablation: drop ratio out of [0, 1]");
  } else {
    throw ArgumentError("ablation: unknown variant '" + name + "'");
  }
  return v;
}

// Additive mask actually used by a variant's forward pass (all zeros when the
// mask is disabled).
inline ad::Tensor<float> effective_mask(const layout::LayoutShape& shape, const Variant& v, bool symmetric = false) {
  if (!v.use_mask) return ad::Tensor<float>({shape.total(), shape.total()});
  return layout::build_mask<float>(shape, symmetric);
}

struct AblationRow {
  AblationVariant variant;
  EvalReport report;
  train::TrainResult training;
};

// Called after each variant with its row and the adapted parameters.
using AblationHook = std::function<void(const AblationRow&, const ParamStore<float>&)>;

// Every variant starts from the same pretrained store and seed.
inline std::vector<AblationRow> ablation_run(const ParamStore<float>& pretrained, const ModelConfig& mc, const synth::Dataset& ds,
                                             const std::vector<std::string>& names, const train::TrainConfig& base,
                                             const EvalOptions& eval_opt, const AblationHook& hook = {}) {
  if (names.empty()) throw ArgumentError("ablation: no variants requested");
  std::vector<AblationRow> out;
  const auto train_pairs = ds.split("train");
  const auto cases = eval_cases(ds);
  for (const auto& n : names) {
    AblationRow row{parse_variant(n, base), {}, {}};
    ParamStore<float> store = pretrained;
    if (!store.contains("s_star")) train::attach_adapter(store, mc, ds.catalog, base.seed);
    train::TrainConfig tc = base;
    tc.variant = row.variant.variant;
    tc.drop_ratio = row.variant.drop_ratio;
    tc.name_level_probs = row.variant.name_probs;
    row.training = train::adapt(store, mc, train_pairs, tc);
    EvalOptions eo = eval_opt;
    eo.variant = row.variant.variant;
    row.report = evaluate(store, mc, cases, eo, n);
    if (hook) hook(row, store);
    out.push_back(std::move(row));
  }
  return out;
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("ablation: cannot write " + path);
  out << "variant,drop_ratio,cp,pf,cp_pf,final_loss,split_hash\n";
  for (const auto& r : rows) {
    out << r.variant.name << ',' << r.variant.drop_ratio << ',' << r.report.cp << ',' << r.report.pf << ','
        << r.report.cp_pf << ',' << r.training.final_loss << ',' << r.report.fingerprint << '\n';
  }
}

}  // namespace aligngen::eval
