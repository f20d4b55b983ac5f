#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aligngen/errors.hpp"
#include "aligngen/image.hpp"
#include "aligngen/promptkit.hpp"

// Procedural shapes corpus. Pretraining captions never mention the glyph
// color, so each shape word absorbs the skewed color marginal; pair data uses
// the off-skew colors only.
namespace aligngen::synth {

using prompt::ConceptRecord;
using prompt::Pattern;
using prompt::Rgb;
using prompt::ShapeClass;
using prompt::VisualAttrs;

struct PaletteEntry {
  std::string name;
  Rgb rgb;
};

// Glyph colors first, then backgrounds, then the reference gray and black.
inline const std::vector<PaletteEntry>& palette() {
  static const std::vector<PaletteEntry> p{
      {"red", {1, 0, 0}},     {"green", {0, 1, 0}}, {"blue", {0, 0, 1}},
      {"yellow", {1, 1, 0}},  {"white", {1, 1, 1}}, {"cyan", {0, 1, 1}},
      {"magenta", {1, 0, 1}}, {"gray", {0.5f, 0.5f, 0.5f}}, {"black", {0, 0, 0}},
  };
  return p;
}

inline const std::vector<std::string>& glyph_colors() {
  static const std::vector<std::string> c{"red", "green", "blue", "yellow"};
  return c;
}

inline const std::vector<std::string>& background_colors() {
  static const std::vector<std::string> c{"white", "cyan", "magenta"};
  return c;
}

inline const std::vector<std::string>& adjectives() {
  static const std::vector<std::string> a{"wooden", "shiny", "paper", "metal", "glass", "plastic", "velvet", "clay"};
  return a;
}

// Words that can appear inside a concept name.
inline bool is_name_word(const std::string& w) {
  if (w == "shape" || w == "square" || w == "circle" || w == "triangle") return true;
  return std::find(adjectives().begin(), adjectives().end(), w) != adjectives().end();
}

inline constexpr std::array<ShapeClass, 3> kShapes{ShapeClass::kSquare, ShapeClass::kCircle, ShapeClass::kTriangle};
inline constexpr float kStripeFactor = 0.3f;
inline constexpr int kReferenceScale = 10;
inline const char* const kReferenceBackground = "gray";

inline Rgb palette_rgb(const std::string& name) {
  for (const auto& e : palette())
    if (e.name == name) return e.rgb;
  throw DataError("palette: unknown color '" + name + "'");
}

inline std::size_t nearest_palette(float r, float g, float b) {
  std::size_t best = 0;
  float best_d = 1e30f;
  const auto& p = palette();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const float dr = r - p[i].rgb.r, dg = g - p[i].rgb.g, db = b - p[i].rgb.b;
    const float d = dr * dr + dg * dg + db * db;
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

inline ShapeClass parse_shape(const std::string& s) {
  for (auto sh : kShapes)
    if (prompt::shape_word(sh) == s) return sh;
  throw DataError("unknown shape '" + s + "'");
}

inline Pattern parse_pattern(const std::string& s) {
  if (s == "plain") return Pattern::kPlain;
  if (s == "striped") return Pattern::kStriped;
  throw DataError("unknown pattern '" + s + "'");
}

inline VisualAttrs make_attrs(ShapeClass shape, const std::string& color, Pattern pattern) {
  return VisualAttrs{shape, palette_rgb(color), color, pattern};
}

// Every (shape, color, pattern) triple, shape-major.
inline std::vector<VisualAttrs> all_attrs() {
  std::vector<VisualAttrs> out;
  for (auto s : kShapes)
    for (const auto& c : glyph_colors())
      for (auto p : {Pattern::kPlain, Pattern::kStriped}) out.push_back(make_attrs(s, c, p));
  return out;
}

// n distinct concepts. Surface names pair a unique adjective with the shape.
template <typename Rng>
std::vector<ConceptRecord> gen_catalog(std::size_t n, Rng& rng) {
  auto combos = all_attrs();
  if (n < 2) throw ArgumentError("gen_catalog: need at least 2 concepts");
  if (n > combos.size()) {
    throw ArgumentError("gen_catalog: " + std::to_string(n) + " concepts exceed the " +
                        std::to_string(combos.size()) + " available combinations");
  }
  std::shuffle(combos.begin(), combos.end(), rng);
  std::array<std::size_t, 3> used{};
  std::vector<ConceptRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& a = combos[i];
    const std::string shape(prompt::shape_word(a.shape));
    const auto k = static_cast<std::size_t>(a.shape);
    out.push_back({static_cast<int>(i), {adjectives()[used[k]++], shape}, {shape}, {"shape"}, a});
  }
  return out;
}

// Axis-aligned glyph placement: top-left corner and side length in pixels.
struct Scene {
  ConceptRecord concept_rec;
  int row = 0;
  int col = 0;
  int scale = 8;
  std::string background = "white";
  int caption_template = 0;
};

// Pixel-center test, shared by the rasterizer and the shape classifier.
inline bool inside_shape(ShapeClass shape, int top, int left, int size, int r, int c) {
  const double y = r + 0.5 - top, x = c + 0.5 - left;
  if (y < 0 || x < 0 || y > size || x > size) return false;
  const double half = size / 2.0;
  switch (shape) {
    case ShapeClass::kSquare: return true;
    case ShapeClass::kCircle: return (x - half) * (x - half) + (y - half) * (y - half) <= half * half;
    case ShapeClass::kTriangle: return std::abs(x - half) <= y / 2.0;  // apex up
  }
  return false;
}

struct Rendered {
  Image image;
  std::vector<std::uint8_t> mask;  // 1 on glyph pixels, row-major H x W
};

inline Rendered render(const Scene& s, int size = 16) {
  if (s.scale < 2 || s.row < 0 || s.col < 0 || s.row + s.scale > size || s.col + s.scale > size) {
    throw ArgumentError("render: glyph does not fit the canvas");
  }
  const Rgb bg = palette_rgb(s.background);
  const auto& a = s.concept_rec.attrs;
  Rendered out{Image(size, size), std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size, 0)};
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      Rgb px = bg;
      if (inside_shape(a.shape, s.row, s.col, s.scale, r, c)) {
        const float k = (a.pattern == Pattern::kStriped && (r - s.row) % 2 == 1) ? kStripeFactor : 1.0f;
        px = {a.fill.r * k, a.fill.g * k, a.fill.b * k};
        out.mask[static_cast<std::size_t>(r) * size + c] = 1;
      }
      out.image.at(r, c, 0) = px.r;
      out.image.at(r, c, 1) = px.g;
      out.image.at(r, c, 2) = px.b;
    }
  return out;
}

inline const std::vector<std::string>& caption_templates() {
  static const std::vector<std::string> t{
      "a {C} on {BG} background",
      "a photo of a {C} on {BG} background",
      "a picture of a {C} in front of {BG} background",
  };
  return t;
}

// Template with the background filled in and the concept placeholder kept.
inline std::string caption_for(int template_id, const std::string& background) {
  if (template_id < 0 || static_cast<std::size_t>(template_id) >= caption_templates().size()) {
    throw ArgumentError("caption template " + std::to_string(template_id) + " out of range");
  }
  std::string s = caption_templates()[template_id];
  s.replace(s.find("{BG}"), 4, background);
  return s;
}

inline std::string fill_placeholder(std::string tmpl, const std::vector<std::string>& name) {
  std::string joined;
  for (const auto& w : name) joined += (joined.empty() ? "" : " ") + w;
  const auto pos = tmpl.find(prompt::kPlaceholder);
  if (pos == std::string::npos) throw ArgumentError("template has no concept placeholder");
  tmpl.replace(pos, prompt::kPlaceholder.size(), joined);
  return tmpl;
}

// Background word of a caption: the token right before "background".
inline std::string caption_background(const std::string& caption) {
  std::istringstream is(caption);
  std::string prev, w;
  while (is >> w) {
    if (w == "background" && !prev.empty()) return prev;
    prev = w;
  }
  throw ArgumentError("caption '" + caption + "' names no background");
}

// Shape word -> dominant glyph color in the pretraining corpus.
struct PriorSkew {
  std::array<std::string, 3> dominant{"green", "blue", "yellow"};
  double p = 0.9;

  const std::string& dominant_for(ShapeClass s) const { return dominant[static_cast<std::size_t>(s)]; }

  // Probability of each glyph color (glyph_colors() order) for a shape.
  std::vector<double> distribution(ShapeClass s) const {
    if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError("prior skew must lie in [0, 1]");
    const auto& colors = glyph_colors();
    std::vector<double> d(colors.size(), (1.0 - p) / double(colors.size() - 1));
    const auto it = std::find(colors.begin(), colors.end(), dominant_for(s));
    if (it == colors.end()) throw ArgumentError("dominant color must be a glyph color");
    d[static_cast<std::size_t>(it - colors.begin())] = p;
    return d;
  }
};

struct CorpusSpec {
  std::size_t n_concepts = 24;
  std::size_t pretrain_images = 3000;
  std::size_t pairs_per_concept = 24;
  std::size_t heldout_concepts = 4;
  PriorSkew skew;
  // Caption naming in pretraining: surface (adjective + shape), parent, broader.
  std::array<double, 3> caption_name_probs{0.4, 0.4, 0.2};
  int image_size = 16;
  int min_scale = 7;
  int max_scale = 10;
};

struct PretrainExample {
  std::string caption;
  Scene scene;
  Image image;
};

struct PairExample {
  ConceptRecord concept_rec;
  Scene target_scene;
  Image reference;
  Image target;
  std::string caption_template;  // keeps the {C} placeholder
  std::string split;             // "train" or "heldout"
};

template <typename Rng>
int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

template <typename Rng>
Scene random_scene(const ConceptRecord& c, const CorpusSpec& spec, Rng& rng) {
  Scene s;
  s.concept_rec = c;
  s.scale = uniform_int(rng, spec.min_scale, spec.max_scale);
  s.row = uniform_int(rng, 0, spec.image_size - s.scale);
  s.col = uniform_int(rng, 0, spec.image_size - s.scale);
  s.background = background_colors()[uniform_int(rng, 0, int(background_colors().size()) - 1)];
  s.caption_template = uniform_int(rng, 0, int(caption_templates().size()) - 1);
  return s;
}

inline Scene reference_scene(const ConceptRecord& c, int image_size = 16) {
  Scene s;
  s.concept_rec = c;
  s.scale = kReferenceScale;
  s.row = s.col = (image_size - kReferenceScale) / 2;
  s.background = kReferenceBackground;
  return s;
}

// Captions name the glyph by surface, parent or broader name only.
template <typename Rng>
std::vector<PretrainExample> make_pretrain_corpus(const CorpusSpec& spec, Rng& rng) {
  std::vector<PretrainExample> out;
  out.reserve(spec.pretrain_images);
  const auto& colors = glyph_colors();
  for (std::size_t i = 0; i < spec.pretrain_images; ++i) {
    const ShapeClass shape = kShapes[uniform_int(rng, 0, 2)];
    const auto dist = spec.skew.distribution(shape);
    const std::string color = colors[std::discrete_distribution<int>(dist.begin(), dist.end())(rng)];
    const Pattern pattern = uniform_int(rng, 0, 1) ? Pattern::kStriped : Pattern::kPlain;
    const std::string sw(prompt::shape_word(shape));
    ConceptRecord c{-1, {adjectives()[uniform_int(rng, 0, int(adjectives().size()) - 1)], sw}, {sw}, {"shape"},
                    make_attrs(shape, color, pattern)};
    Scene scene = random_scene(c, spec, rng);
    const auto level = prompt::sample_name_level(rng, spec.caption_name_probs);
    const auto& name = level == prompt::NameLevel::kSurface  ? c.surface_name
                       : level == prompt::NameLevel::kParent ? c.parent_name
                                                             : c.broader_name;
    std::string caption = fill_placeholder(caption_for(scene.caption_template, scene.background), name);
    out.push_back({std::move(caption), scene, render(scene, spec.image_size).image});
  }
  return out;
}

inline bool is_anti_skew(const ConceptRecord& c, const PriorSkew& skew) {
  return c.attrs.color_name != skew.dominant_for(c.attrs.shape);
}

// Reference: concept centered on gray. Target: same concept, random
// placement and background. Only off-skew concepts take part; the last
// `heldout_concepts` of them form the held-out split.
template <typename Rng>
std::vector<PairExample> make_pair_dataset(const std::vector<ConceptRecord>& catalog, const CorpusSpec& spec,
                                           Rng& rng) {
  std::vector<const ConceptRecord*> pool;
  for (const auto& c : catalog)
    if (is_anti_skew(c, spec.skew)) pool.push_back(&c);
  if (pool.size() <= spec.heldout_concepts) {
    throw ArgumentError("make_pair_dataset: " + std::to_string(pool.size()) +
                        " off-skew concepts cannot leave a training split after holding out " +
                        std::to_string(spec.heldout_concepts));
  }
  std::vector<PairExample> out;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto& c = *pool[i];
    const std::string split = i + spec.heldout_concepts >= pool.size() ? "heldout" : "train";
    const Image ref = render(reference_scene(c, spec.image_size), spec.image_size).image;
    for (std::size_t k = 0; k < spec.pairs_per_concept; ++k) {
      Scene t = random_scene(c, spec, rng);
      out.push_back({c, t, ref, render(t, spec.image_size).image, caption_for(t.caption_template, t.background), split});
    }
  }
  return out;
}

// ---- on-disk dataset -------------------------------------------------------

inline nlohmann::json attrs_json(const VisualAttrs& a) {
  return {{"shape", prompt::shape_word(a.shape)}, {"color", a.color_name}, {"pattern", prompt::pattern_word(a.pattern)}};
}

inline VisualAttrs attrs_from_json(const nlohmann::json& j) {
  return make_attrs(parse_shape(j.at("shape").get<std::string>()), j.at("color").get<std::string>(),
                    parse_pattern(j.at("pattern").get<std::string>()));
}

inline nlohmann::json concept_json(const ConceptRecord& c) {
  return {{"concept_id", c.concept_id},
          {"surface_name", c.surface_name},
          {"parent_name", c.parent_name},
          {"broader_name", c.broader_name},
          {"attrs", attrs_json(c.attrs)}};
}

inline ConceptRecord concept_from_json(const nlohmann::json& j) {
  return {j.at("concept_id").get<int>(), j.at("surface_name").get<std::vector<std::string>>(),
          j.at("parent_name").get<std::vector<std::string>>(), j.at("broader_name").get<std::vector<std::string>>(),
          attrs_from_json(j.at("attrs"))};
}

// One manifest line. Pair records carry a reference file and a caption
// template with the concept placeholder; pretrain records a full caption.
struct ManifestRecord {
  std::string kind;  // "pretrain" or "pair"
  std::string image;
  std::string reference;
  std::vector<std::string> caption_tokens;
  int concept_id = -1;
  VisualAttrs attrs;
  std::string background;
  int row = 0, col = 0, scale = 0, caption_template = 0;
  std::string split;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

inline nlohmann::json to_json(const ManifestRecord& r) {
  nlohmann::json j{{"kind", r.kind},
                   {"image", r.image},
                   {"caption_tokens", r.caption_tokens},
                   {"concept_id", r.concept_id},
                   {"attrs", attrs_json(r.attrs)},
                   {"background", r.background},
                   {"row", r.row},
                   {"col", r.col},
                   {"scale", r.scale},
                   {"caption_template", r.caption_template},
                   {"split", r.split}};
  if (!r.reference.empty()) j["reference"] = r.reference;
  return j;
}

inline ManifestRecord manifest_from_json(const nlohmann::json& j) {
  ManifestRecord r;
  r.kind = j.at("kind").get<std::string>();
  if (r.kind != "pretrain" && r.kind != "pair") throw DataError("manifest: unknown record kind '" + r.kind + "'");
  r.image = j.at("image").get<std::string>();
  r.reference = j.value("reference", std::string{});
  r.caption_tokens = j.at("caption_tokens").get<std::vector<std::string>>();
  r.concept_id = j.at("concept_id").get<int>();
  r.attrs = attrs_from_json(j.at("attrs"));
  r.background = j.at("background").get<std::string>();
  r.row = j.at("row").get<int>();
  r.col = j.at("col").get<int>();
  r.scale = j.at("scale").get<int>();
  r.caption_template = j.at("caption_template").get<int>();
  r.split = j.at("split").get<std::string>();
  return r;
}

inline void write_manifest(const std::vector<ManifestRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("manifest: cannot write " + path);
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

inline std::vector<ManifestRecord> read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("manifest: cannot open " + path);
  std::vector<ManifestRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(manifest_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("manifest: line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Dataset {
  std::vector<ConceptRecord> catalog;
  std::vector<PretrainExample> pretrain;
  std::vector<PairExample> pairs;

  const ConceptRecord& concept_by_id(int id) const {
    for (const auto& c : catalog)
      if (c.concept_id == id) return c;
    throw DataError("dataset: unknown concept id " + std::to_string(id));
  }

  std::vector<const PairExample*> split(const std::string& name) const {
    std::vector<const PairExample*> out;
    for (const auto& p : pairs)
      if (p.split == name) out.push_back(&p);
    return out;
  }
};

template <typename Rng>
Dataset make_dataset(const CorpusSpec& spec, Rng& rng) {
  Dataset d;
  d.catalog = gen_catalog(spec.n_concepts, rng);
  d.pretrain = make_pretrain_corpus(spec, rng);
  d.pairs = make_pair_dataset(d.catalog, spec, rng);
  return d;
}

inline std::vector<ManifestRecord> manifest_of(const Dataset& d) {
  std::vector<ManifestRecord> out;
  char buf[64];
  for (std::size_t i = 0; i < d.pretrain.size(); ++i) {
    const auto& e = d.pretrain[i];
    std::snprintf(buf, sizeof buf, "images/pre_%05zu.ppm", i);
    out.push_back({"pretrain", buf, "", prompt::detail::split_words(e.caption), -1, e.scene.concept_rec.attrs,
                   e.scene.background, e.scene.row, e.scene.col, e.scene.scale, e.scene.caption_template, "train"});
  }
  for (std::size_t i = 0; i < d.pairs.size(); ++i) {
    const auto& e = d.pairs[i];
    std::snprintf(buf, sizeof buf, "images/pair_%05zu_tgt.ppm", i);
    std::string tgt = buf;
    std::snprintf(buf, sizeof buf, "images/ref_%03d.ppm", e.concept_rec.concept_id);
    out.push_back({"pair", tgt, buf, prompt::detail::split_words(e.caption_template), e.concept_rec.concept_id,
                   e.concept_rec.attrs, e.target_scene.background, e.target_scene.row, e.target_scene.col,
                   e.target_scene.scale, e.target_scene.caption_template, e.split});
  }
  return out;
}

inline void write_dataset(const Dataset& d, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  const auto manifest = manifest_of(d);
  std::size_t pi = 0;
  for (const auto& r : manifest) {
    if (r.kind == "pretrain") {
      write_ppm(d.pretrain[pi++].image, (fs::path(dir) / r.image).string());
    } else {
      const auto& e = d.pairs[&r - &manifest[d.pretrain.size()]];
      write_ppm(e.target, (fs::path(dir) / r.image).string());
      write_ppm(e.reference, (fs::path(dir) / r.reference).string());
    }
  }
  write_manifest(manifest, (fs::path(dir) / "manifest.jsonl").string());
  nlohmann::json cat = nlohmann::json::array();
  for (const auto& c : d.catalog) cat.push_back(concept_json(c));
  std::ofstream((fs::path(dir) / "catalog.json").string()) << cat.dump(2) << '\n';
  prompt::Vocabulary::standard().save((fs::path(dir) / "vocab.txt").string());
}

inline Dataset read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("dataset: " + dir + " is not a directory");
  Dataset d;
  try {
    for (const auto& j : nlohmann::json::parse(read_file((fs::path(dir) / "catalog.json").string())))
      d.catalog.push_back(concept_from_json(j));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("catalog.json: ") + e.what());
  }
  for (const auto& r : read_manifest((fs::path(dir) / "manifest.jsonl").string())) {
    Scene s;
    s.row = r.row;
    s.col = r.col;
    s.scale = r.scale;
    s.background = r.background;
    s.caption_template = r.caption_template;
    std::string caption;
    for (const auto& w : r.caption_tokens) caption += (caption.empty() ? "" : " ") + w;
    if (r.kind == "pretrain") {
      s.concept_rec.attrs = r.attrs;
      d.pretrain.push_back({caption, s, read_ppm((fs::path(dir) / r.image).string())});
    } else {
      s.concept_rec = d.concept_by_id(r.concept_id);
      d.pairs.push_back({s.concept_rec, s, read_ppm((fs::path(dir) / r.reference).string()),
                         read_ppm((fs::path(dir) / r.image).string()), caption, r.split});
    }
  }
  return d;
}

inline std::uint64_t manifest_hash(const std::string& dir) {
  return fnv1a64(read_file((std::filesystem::path(dir) / "manifest.jsonl").string()));
}

}  // namespace aligngen::synth
