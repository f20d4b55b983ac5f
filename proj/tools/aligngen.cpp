// aligngen: synthetic data, two-phase training, sampling, evaluation and
// gradient checks from the command line.

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "aligngen/config.hpp"
#include "aligngen/evalkit.hpp"
#include "aligngen/gradsuite.hpp"
#include "aligngen/synthdata.hpp"
#include "aligngen/trainer.hpp"

namespace fs = std::filesystem;
using namespace aligngen;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3, kAcceptance = 4 };

struct VariantFlags {
  bool no_dem = false, no_mask = false, no_lt = false, replace_all = false;

  void add(CLI::App* app) {
    app->add_flag("--no-dem", no_dem, "use <s*> without the deviation extraction module");
    app->add_flag("--no-mask", no_mask, "disable the selective attention mask");
    app->add_flag("--no-lt", no_lt, "concept name only, no learnable token");
    app->add_flag("--replace-all", replace_all, "splice the whole concept span instead of <s*> only");
  }

  Variant variant() const {
    Variant v;
    v.use_dem = !no_dem;
    v.use_mask = !no_mask;
    v.use_star = !no_lt;
    v.splice = replace_all ? dem::SpliceMode::kAll : dem::SpliceMode::kFirstOnly;
    return v;
  }
};

struct SampleFlags {
  int steps = 28;
  double guidance = 3.5;
  std::uint64_t seed = 42;

  void add(CLI::App* app) {
    app->add_option("--steps", steps, "Euler steps")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--guidance", guidance, "classifier-free guidance scale")->capture_default_str();
    app->add_option("--seed", seed, "noise seed")->capture_default_str();
  }

  flow::SampleConfig config() const { return {steps, guidance, seed}; }
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

// ---- subcommands -----------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t concepts = 24;
  std::uint64_t seed = 0;
  double skew = 0.9;
  std::size_t pretrain_images = 3000;
  std::size_t pairs_per_concept = 24;
  std::size_t heldout = 4;
};

int run_synth(const SynthArgs& a) {
  synth::CorpusSpec spec;
  spec.n_concepts = a.concepts;
  spec.skew.p = a.skew;
  spec.pretrain_images = a.pretrain_images;
  spec.pairs_per_concept = a.pairs_per_concept;
  spec.heldout_concepts = a.heldout;
  std::mt19937_64 rng(a.seed);
  const auto ds = synth::make_dataset(spec, rng);
  synth::write_dataset(ds, a.out);
  cfg::KeyValues kv;
  kv.set("concepts", std::to_string(a.concepts));
  kv.set("seed", std::to_string(a.seed));
  kv.set("skew", cfg::detail::num(a.skew));
  kv.set("pretrain_images", std::to_string(a.pretrain_images));
  kv.set("pairs_per_concept", std::to_string(a.pairs_per_concept));
  kv.set("heldout", std::to_string(a.heldout));
  cfg::write(kv, (fs::path(a.out) / "run.config").string());
  std::cout << "wrote " << ds.pretrain.size() << " pretraining images, " << ds.pairs.size() << " pairs, "
            << ds.catalog.size() << " concepts to " << a.out << " (manifest " << std::hex
            << synth::manifest_hash(a.out) << std::dec << ")\n";
  return kOk;
}

struct TrainArgs {
  std::string data, out, config, base;
  std::size_t iterations = 0;
  std::uint64_t seed = 0;
  bool seed_set = false;
  double drop_ratio = 0.5;
  std::string name_probs;
  VariantFlags vf;
};

void apply_common(const TrainArgs& a, ModelConfig& mc, train::TrainConfig& tc) {
  if (!a.config.empty()) cfg::apply(cfg::KeyValues::load(a.config), mc, tc);
  if (a.iterations) tc.iterations = a.iterations;
  if (a.seed_set) tc.seed = a.seed;
}

train::StepHook progress(std::size_t total) {
  const std::size_t every = std::max<std::size_t>(1, total / 20);
  return [every](const train::LogRow& r) {
    if (r.step % every == 0) std::cerr << "step " << r.step << " loss " << r.loss << "\n";
  };
}

int run_pretrain(const TrainArgs& a) {
  ModelConfig mc;
  auto tc = train::TrainConfig::pretrain_defaults();
  apply_common(a, mc, tc);
  mc.validate();
  const auto ds = synth::read_dataset(a.data);
  std::mt19937_64 rng(tc.seed);
  auto store = init_base_params<float>(mc, rng);
  const auto res = train::pretrain(store, mc, ds.pretrain, tc, progress(tc.iterations));
  ensure_parent(a.out);
  cfg::save_model(store, cfg::resolved(mc, tc), a.out);
  train::write_log(res.log, a.out + ".log.csv");
  std::cout << "pretrain: loss " << res.initial_loss << " -> " << res.final_loss << ", skipped " << res.skipped
            << ", checkpoint " << a.out << "\n";
  return kOk;
}

int run_adapt(const TrainArgs& a) {
  auto base = cfg::load_model(a.base);
  ModelConfig mc = base.config;
  auto tc = train::TrainConfig::adapt_defaults();
  const ModelConfig before = mc;
  apply_common(a, mc, tc);
  if (cfg::model_keys(mc).values() != cfg::model_keys(before).values()) {
    throw ArgumentError("adapt: --config may not change model.* keys of the base checkpoint");
  }
  tc.drop_ratio = a.drop_ratio;
  if (!a.name_probs.empty()) tc.name_level_probs = cfg::detail::to_triple("--name-probs", a.name_probs);
  tc.variant = a.vf.variant();
  const auto ds = synth::read_dataset(a.data);
  if (base.store.contains("s_star")) throw ArgumentError("adapt: base checkpoint is already adapted");
  train::attach_adapter(base.store, mc, ds.catalog, tc.seed);
  const auto res = train::adapt(base.store, mc, ds.split("train"), tc, progress(tc.iterations));
  ensure_parent(a.out);
  cfg::save_model(base.store, cfg::resolved(mc, tc), a.out);
  train::write_log(res.log, a.out + ".log.csv");
  std::size_t dropped = 0;
  for (const auto& r : res.log) dropped += r.dropped_refs;
  std::cout << "adapt: loss " << res.initial_loss << " -> " << res.final_loss << ", black references " << dropped
            << "/" << tc.iterations * tc.batch << ", checkpoint " << a.out << "\n";
  return kOk;
}

struct SampleArgs {
  std::string ckpt, prompt, refs, out, telemetry;
  bool dump_mask = false;
  SampleFlags sf;
  VariantFlags vf;
};

int run_sample(const SampleArgs& a) {
  const auto m = cfg::load_model(a.ckpt);
  const auto vocab = prompt::Vocabulary::standard();
  const auto bundle = prompt::parse_prompt(vocab, a.prompt, synth::is_name_word, m.config.max_text_len);
  std::vector<Image> refs;
  for (const auto& path : split_list(a.refs)) refs.push_back(read_ppm(path));
  if (refs.empty()) refs.push_back(enc::black_reference(m.config.image_size, m.config.image_size));
  if (bundle.spans.size() > refs.size()) throw ArgumentError("sample: more <s*> concepts than reference images");
  GenerateRequest req{bundle, refs, a.vf.variant(), a.sf.config()};
  if (a.dump_mask) {
    layout::LayoutShape shape{m.config.num_patches(), bundle.size(), refs.size(), m.config.grid(), m.config.grid(),
                              bundle.relevance};
    std::cout << layout::dump_mask(eval::effective_mask(shape, req.variant, m.config.symmetric_mask));
  }
  std::vector<flow::StepRecord> log;
  const Image img = generate(m.store, m.config, req, a.telemetry.empty() ? nullptr : &log);
  ensure_parent(a.out);
  write_ppm(img, a.out);
  if (!a.telemetry.empty()) flow::write_telemetry(log, a.telemetry);
  std::cerr << "wrote " << a.out << "\n";
  return kOk;
}

struct EvalArgs {
  std::string ckpt, data, out;
  std::size_t seeds = 4;
  SampleFlags sf;
  VariantFlags vf;
};

int run_eval(const EvalArgs& a) {
  const auto m = cfg::load_model(a.ckpt);
  const auto ds = synth::read_dataset(a.data);
  std::vector<std::pair<Image, Image>> sheet;
  eval::EvalOptions opt{a.seeds, a.sf.seed, a.sf.config(), a.vf.variant(), &sheet};
  auto rep = eval::evaluate(m.store, m.config, eval::eval_cases(ds), opt, fs::path(a.ckpt).filename().string());
  fs::create_directories(a.out);
  eval::write_report_csv({rep}, (fs::path(a.out) / "report.csv").string());
  eval::write_report_json({rep}, (fs::path(a.out) / "report.json").string());
  write_ppm(eval::contact_sheet(sheet), (fs::path(a.out) / "contact.ppm").string());
  std::cout << "cp " << rep.cp << " pf " << rep.pf << " cp_pf " << rep.cp_pf << "\n";
  return kOk;
}

int run_probe(const EvalArgs& a) {
  const auto m = cfg::load_model(a.ckpt);
  const auto ds = synth::read_dataset(a.data);
  eval::EvalOptions opt{a.seeds, a.sf.seed, a.sf.config(), a.vf.variant(), nullptr};
  const auto res = eval::misalignment_probe(m.store, m.config, eval::eval_cases(ds), opt);
  nlohmann::json j{{"cp_with_ref", res.cp_with_ref}, {"cp_black_ref", res.cp_black_ref}, {"delta", res.delta},
                   {"cases", res.with_rows.size()}};
  if (!a.out.empty()) {
    ensure_parent(a.out);
    std::ofstream(a.out) << j.dump(2) << '\n';
  }
  std::cout << j.dump() << "\n";
  return kOk;
}

struct AblateArgs {
  std::string data, base, variants, out, config;
  std::size_t iterations = 0, seeds = 4;
  SampleFlags sf;
};

int run_ablate(const AblateArgs& a) {
  auto base = cfg::load_model(a.base);
  auto tc = train::TrainConfig::adapt_defaults();
  ModelConfig mc = base.config;
  if (!a.config.empty()) cfg::apply(cfg::KeyValues::load(a.config), mc, tc);
  if (a.iterations) tc.iterations = a.iterations;
  const auto names = split_list(a.variants);
  for (const auto& n : names) eval::parse_variant(n, tc);  // fail fast on typos
  const auto ds = synth::read_dataset(a.data);
  eval::EvalOptions opt{a.seeds, a.sf.seed, a.sf.config(), {}, nullptr};
  fs::create_directories(a.out);
  const auto rows = eval::ablation_run(base.store, base.config, ds, names, tc, opt, [](const eval::AblationRow& r, const ParamStore<float>&) {
    std::cerr << r.variant.name << ": cp " << r.report.cp << " pf " << r.report.pf << "\n";
  });
  eval::write_ablation_csv(rows, (fs::path(a.out) / "ablation.csv").string());
  std::vector<eval::EvalReport> reps;
  for (const auto& r : rows) reps.push_back(r.report);
  eval::write_report_csv(reps, (fs::path(a.out) / "report.csv").string());
  cfg::write(cfg::resolved(base.config, tc), (fs::path(a.out) / "run.config").string());
  std::cout << "wrote " << rows.size() << " variants to " << a.out << "\n";
  return kOk;
}

int run_gradcheck(const std::string& module) {
  bool ok = true;
  for (const auto& r : gradsuite::run(module)) {
    const bool pass = r.passed(gradsuite::kBlockTol);
    ok = ok && pass;
    std::cout << (pass ? "PASS " : "FAIL ") << r.op_name << " max_rel_err=" << r.max_rel_err
              << " scalars=" << r.checked_scalars << "\n";
  }
  return ok ? kOk : kAcceptance;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"aligngen: prior-aligned personalization on a synthetic shapes corpus"};
  app.require_subcommand(1);

  SynthArgs synth_a;
  auto* synth_cmd = app.add_subcommand("synth-data", "generate the synthetic dataset");
  synth_cmd->add_option("--out", synth_a.out, "output directory")->required();
  synth_cmd->add_option("--concepts", synth_a.concepts, "catalog size")->capture_default_str();
  synth_cmd->add_option("--seed", synth_a.seed, "generator seed")->capture_default_str();
  synth_cmd->add_option("--skew", synth_a.skew, "dominant-color probability per shape")->capture_default_str();
  synth_cmd->add_option("--pretrain-images", synth_a.pretrain_images, "pretraining corpus size")->capture_default_str();
  synth_cmd->add_option("--pairs-per-concept", synth_a.pairs_per_concept, "pairs per off-skew concept")->capture_default_str();
  synth_cmd->add_option("--heldout", synth_a.heldout, "held-out concepts")->capture_default_str();

  TrainArgs pre_a;
  auto* pre_cmd = app.add_subcommand("pretrain", "phase 1: train the base model");
  pre_cmd->add_option("--data", pre_a.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  pre_cmd->add_option("--out", pre_a.out, "checkpoint path")->required();
  pre_cmd->add_option("--config", pre_a.config, "key = value config file")->check(CLI::ExistingFile);
  pre_cmd->add_option("--iterations", pre_a.iterations, "override train.iterations");
  pre_cmd->add_option("--seed", pre_a.seed, "override train.seed")->each([&](const std::string&) { pre_a.seed_set = true; });

  TrainArgs ad_a;
  auto* ad_cmd = app.add_subcommand("adapt", "phase 2: train LoRA, DEM and <s*>");
  ad_cmd->add_option("--data", ad_a.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ad_cmd->add_option("--base", ad_a.base, "pretrained checkpoint")->required()->check(CLI::ExistingFile);
  ad_cmd->add_option("--out", ad_a.out, "checkpoint path")->required();
  ad_cmd->add_option("--config", ad_a.config, "key = value config file (train.* keys)")->check(CLI::ExistingFile);
  ad_cmd->add_option("--drop-ratio", ad_a.drop_ratio, "black-reference probability")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  ad_cmd->add_option("--name-probs", ad_a.name_probs, "surface,parent,broader name probabilities (default 0.6,0.2,0.2)");
  ad_cmd->add_option("--iterations", ad_a.iterations, "override train.iterations");
  ad_cmd->add_option("--seed", ad_a.seed, "override train.seed")->each([&](const std::string&) { ad_a.seed_set = true; });
  ad_a.vf.add(ad_cmd);

  SampleArgs s_a;
  auto* s_cmd = app.add_subcommand("sample", "generate one image");
  s_cmd->add_option("--ckpt", s_a.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  s_cmd->add_option("--prompt", s_a.prompt, "prompt text, <s*> before each concept name")->required();
  s_cmd->add_option("--ref", s_a.refs, "reference PPM(s), comma separated");
  s_cmd->add_option("--out", s_a.out, "output PPM")->required();
  s_cmd->add_option("--telemetry", s_a.telemetry, "per-step velocity norms (CSV)");
  s_cmd->add_flag("--dump-mask", s_a.dump_mask, "print the attention mask ('.' open, 'X' blocked)");
  s_a.sf.add(s_cmd);
  s_a.vf.add(s_cmd);

  EvalArgs e_a;
  auto* e_cmd = app.add_subcommand("eval", "CP/PF proxies on the held-out split");
  e_cmd->add_option("--ckpt", e_a.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  e_cmd->add_option("--data", e_a.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  e_cmd->add_option("--out", e_a.out, "report directory")->required();
  e_cmd->add_option("--seeds", e_a.seeds, "seeds per concept")->capture_default_str()->check(CLI::PositiveNumber);
  e_a.sf.add(e_cmd);
  e_a.vf.add(e_cmd);

  EvalArgs p_a;
  p_a.seeds = 20;
  auto* p_cmd = app.add_subcommand("probe", "CP with the reference vs. a black reference");
  p_cmd->add_option("--ckpt", p_a.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  p_cmd->add_option("--data", p_a.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  p_cmd->add_option("--seeds", p_a.seeds, "seeds per concept")->capture_default_str()->check(CLI::PositiveNumber);
  p_cmd->add_option("--out", p_a.out, "optional JSON report path");
  p_a.sf.add(p_cmd);
  p_a.vf.add(p_cmd);

  AblateArgs ab_a;
  auto* ab_cmd = app.add_subcommand("ablate", "adapt and evaluate a list of variants");
  ab_cmd->add_option("--data", ab_a.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ab_cmd->add_option("--base", ab_a.base, "pretrained checkpoint")->required()->check(CLI::ExistingFile);
  ab_cmd->add_option("--variants", ab_a.variants,
                     "comma list of full,no_LT,no_DEM,no_mask,no_TS,replace_all,drop0.1,...")->required();
  ab_cmd->add_option("--out", ab_a.out, "output directory")->required();
  ab_cmd->add_option("--config", ab_a.config, "key = value config file (train.* keys)")->check(CLI::ExistingFile);
  ab_cmd->add_option("--iterations", ab_a.iterations, "override train.iterations");
  ab_cmd->add_option("--seeds", ab_a.seeds, "evaluation seeds per concept")->capture_default_str();
  ab_a.sf.add(ab_cmd);

  std::string gc_module;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks (64-bit)");
  gc_cmd->add_option("--module", gc_module, "attention, dem, lora or model (default: all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: usage: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (*synth_cmd) return run_synth(synth_a);
    if (*pre_cmd) return run_pretrain(pre_a);
    if (*ad_cmd) return run_adapt(ad_a);
    if (*s_cmd) return run_sample(s_a);
    if (*e_cmd) return run_eval(e_a);
    if (*p_cmd) return run_probe(p_a);
    if (*ab_cmd) return run_ablate(ab_a);
    if (*gc_cmd) return run_gradcheck(gc_module);
  } catch (const ArgumentError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "error: numeric: " << e.what() << "\n";
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "error: data: " << e.what() << "\n";
    return kData;
  } catch (const ShapeError& e) {
    std::cerr << "error: data: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return kNumeric;
  }
  return kUsage;
}
