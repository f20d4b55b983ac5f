#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "aligngen/errors.hpp"
#include "aligngen/model_config.hpp"
#include "aligngen/trainer.hpp"

// Flat `key = value` files with `#` comments. Later assignments win, so
// command-line overrides are applied with set().
namespace aligngen::cfg {

class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "config") {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ArgumentError(origin + ":" + std::to_string(n) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
      if (key.empty()) throw ArgumentError(origin + ":" + std::to_string(n) + ": empty key");
      kv.set(key, value);
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.contains(key); }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string dump() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }
  std::map<std::string, std::string> values_;
};

namespace detail {

inline double to_double(const std::string& k, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ArgumentError("config: " + k + " expects a number, got '" + v + "'");
}

inline std::size_t to_size(const std::string& k, const std::string& v) {
  const double d = to_double(k, v);
  if (d < 0 || d != static_cast<double>(static_cast<std::size_t>(d))) {
    throw ArgumentError("config: " + k + " expects a non-negative integer, got '" + v + "'");
  }
  return static_cast<std::size_t>(d);
}

inline bool to_bool(const std::string& k, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ArgumentError("config: " + k + " expects true/false, got '" + v + "'");
}

inline std::array<double, 3> to_triple(const std::string& k, const std::string& v) {
  std::array<double, 3> out{};
  std::istringstream is(v);
  std::string part;
  std::size_t i = 0;
  while (std::getline(is, part, ',')) {
    if (i == 3) break;
    out[i++] = to_double(k, part);
  }
  if (i != 3 || std::getline(is, part)) throw ArgumentError("config: " + k + " expects three comma-separated numbers");
  return out;
}

inline std::string triple_str(const std::array<double, 3>& t) {
  std::ostringstream os;
  os << t[0] << ',' << t[1] << ',' << t[2];
  return os.str();
}

inline std::string num(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace detail

// Applies model.* and train.* keys. Unknown keys are an error.
inline void apply(const KeyValues& kv, ModelConfig& m, train::TrainConfig& t) {
  using namespace detail;
  for (const auto& [k, v] : kv.values()) {
    if (k == "model.d") m.d = to_size(k, v);
    else if (k == "model.blocks") m.blocks = to_size(k, v);
    else if (k == "model.heads") m.heads = to_size(k, v);
    else if (k == "model.mlp_ratio") m.mlp_ratio = to_size(k, v);
    else if (k == "model.patch") m.patch = static_cast<int>(to_size(k, v));
    else if (k == "model.image_size") m.image_size = static_cast<int>(to_size(k, v));
    else if (k == "model.lora_rank") m.lora_rank = to_size(k, v);
    else if (k == "model.text_heads") m.text_heads = to_size(k, v);
    else if (k == "model.dem_heads") m.dem_heads = to_size(k, v);
    else if (k == "model.dem_mlp_ratio") m.dem_mlp_ratio = to_size(k, v);
    else if (k == "model.redux_tokens") m.redux_tokens = to_size(k, v);
    else if (k == "model.redux_patch") m.redux_patch = static_cast<int>(to_size(k, v));
    else if (k == "model.normalize_redux") m.normalize_redux = to_bool(k, v);
    else if (k == "model.rope_base") m.rope_base = to_double(k, v);
    else if (k == "model.ref_col_offset") m.ref_col_offset = static_cast<int>(to_size(k, v));
    else if (k == "model.symmetric_mask") m.symmetric_mask = to_bool(k, v);
    else if (k == "model.max_text_len") m.max_text_len = to_size(k, v);
    else if (k == "train.batch") t.batch = to_size(k, v);
    else if (k == "train.iterations") t.iterations = to_size(k, v);
    else if (k == "train.lr") t.lr = to_double(k, v);
    else if (k == "train.weight_decay") t.weight_decay = to_double(k, v);
    else if (k == "train.grad_clip") t.grad_clip = to_double(k, v);
    else if (k == "train.drop_ratio") t.drop_ratio = to_double(k, v);
    else if (k == "train.name_probs") t.name_level_probs = to_triple(k, v);
    else if (k == "train.prompt_dropout") t.prompt_dropout = to_double(k, v);
    else if (k == "train.redux_aux_weight") t.redux_aux_weight = to_double(k, v);
    else if (k == "train.seed") t.seed = to_size(k, v);
    else throw ArgumentError("config: unknown key '" + k + "'");
  }
}

inline KeyValues model_keys(const ModelConfig& m) {
  using detail::num;
  KeyValues kv;
  kv.set("model.d", num(double(m.d)));
  kv.set("model.blocks", num(double(m.blocks)));
  kv.set("model.heads", num(double(m.heads)));
  kv.set("model.mlp_ratio", num(double(m.mlp_ratio)));
  kv.set("model.patch", num(m.patch));
  kv.set("model.image_size", num(m.image_size));
  kv.set("model.lora_rank", num(double(m.lora_rank)));
  kv.set("model.text_heads", num(double(m.text_heads)));
  kv.set("model.dem_heads", num(double(m.dem_heads)));
  kv.set("model.dem_mlp_ratio", num(double(m.dem_mlp_ratio)));
  kv.set("model.redux_tokens", num(double(m.redux_tokens)));
  kv.set("model.redux_patch", num(m.redux_patch));
  kv.set("model.normalize_redux", m.normalize_redux ? "true" : "false");
  kv.set("model.rope_base", num(m.rope_base));
  kv.set("model.ref_col_offset", num(m.ref_col_offset));
  kv.set("model.symmetric_mask", m.symmetric_mask ? "true" : "false");
  kv.set("model.max_text_len", num(double(m.max_text_len)));
  return kv;
}

inline KeyValues resolved(const ModelConfig& m, const train::TrainConfig& t) {
  using detail::num;
  KeyValues kv = model_keys(m);
  kv.set("train.batch", num(double(t.batch)));
  kv.set("train.iterations", num(double(t.iterations)));
  kv.set("train.lr", num(t.lr));
  kv.set("train.weight_decay", num(t.weight_decay));
  kv.set("train.grad_clip", num(t.grad_clip));
  kv.set("train.drop_ratio", num(t.drop_ratio));
  kv.set("train.name_probs", detail::triple_str(t.name_level_probs));
  kv.set("train.prompt_dropout", num(t.prompt_dropout));
  kv.set("train.redux_aux_weight", num(t.redux_aux_weight));
  kv.set("train.seed", num(double(t.seed)));
  return kv;
}

inline void write(const KeyValues& kv, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("config: cannot write " + path);
  out << kv.dump();
}

// Model architecture stored next to a checkpoint as <ckpt>.config.
inline ModelConfig load_model_config(const std::string& ckpt_path) {
  ModelConfig m;
  train::TrainConfig ignored;
  apply(KeyValues::load(ckpt_path + ".config"), m, ignored);
  m.validate();
  return m;
}

struct LoadedModel {
  ModelConfig config;
  ParamStore<float> store;
};

// Checkpoint plus its <ckpt>.config; adapter groups are attached when the
// checkpoint carries them.
inline LoadedModel load_model(const std::string& ckpt_path) {
  LoadedModel m{load_model_config(ckpt_path), {}};
  const auto raw = ckpt::load_checkpoint(ckpt_path);
  std::mt19937_64 rng(0);
  m.store = init_base_params<float>(m.config, rng);
  if (raw.contains("s_star")) add_adapter_params(m.store, m.config, rng, ad::Tensor<float>({1, m.config.d}));
  ckpt::load_into(m.store, raw);
  m.store.freeze_all();
  return m;
}

inline void save_model(const ParamStore<float>& store, const KeyValues& resolved_cfg, const std::string& ckpt_path) {
  ckpt::save_checkpoint(store, ckpt_path);
  write(resolved_cfg, ckpt_path + ".config");
}

}  // namespace aligngen::cfg
