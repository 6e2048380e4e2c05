#include <CLI11.hpp>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "nsr/eval.hpp"
#include "nsr/finetune.hpp"
#include "nsr/selftest.hpp"

using namespace nsr;

namespace {

struct StageArgs {
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> sets;  // flag order preserved
  std::string input, output, refiner, report;
};

// every config key becomes a --flag on the subcommand; file first, flags win
void add_common(CLI::App* sub, StageArgs* a, RunConfig& proto) {
  sub->add_option("--config", a->config_path, "key=value file applied before flags");
  for (auto& k : proto.keys()) {
    std::string name = k.name;
    sub->add_option_function<std::string>(
        "--" + name, [a, name](const std::string& v) { a->sets.emplace_back(name, v); }, k.doc);
  }
}

RunConfig make_cfg(const StageArgs& a) {
  RunConfig cfg;
  if (!a.config_path.empty()) cfg.load_file(a.config_path);
  for (auto& [k, v] : a.sets) cfg.set(k, v);
  cfg.apply_env();
  cfg.validate();
  return cfg;
}

std::string manifest_path(const RunConfig& cfg) { return cfg.data_dir + "/manifest.tsv"; }

std::vector<Tensor> clean_images(const std::vector<ManifestEntry>& entries,
                                 const std::string& split) {
  std::vector<Tensor> out;
  for (const auto& e : entries)
    if (e.split == split) out.push_back(read_ppm(e.clean_path));
  if (out.empty()) throw UsageError("manifest has no '" + split + "' entries");
  return out;
}

Codec load_codec(const RunConfig& cfg, bool prefer_finetuned, std::ostream& log) {
  Rng r(derive_seed(cfg.seed, "codec.init"));
  Codec codec(cfg, r);
  std::string ft = cfg.out_dir + "/decoder_ft.ckpt";
  if (prefer_finetuned && std::filesystem::exists(ft)) {
    load_store(ft, "RVD1", codec.ps);
    log << "decoder: fine-tuned (" << ft << ")\n";
  } else {
    load_store(cfg.out_dir + "/codec.ckpt", "RVC1", codec.ps);
  }
  return codec;
}

VarModel load_var(const RunConfig& cfg) {
  Rng r(derive_seed(cfg.seed, "var.init"));
  VarModel var(TransformerConfig::from(cfg), r);
  load_store(cfg.out_dir + "/var.ckpt", "RVA1", var.ps);
  return var;
}

std::string refiner_path(const RunConfig& cfg, RefinerMode mode) {
  return cfg.out_dir + (mode == RefinerMode::LrtNoZ ? "/lrt_noz.ckpt" : "/lrt.ckpt");
}

Pipeline load_pipeline(RunConfig cfg, RefinerMode mode, std::ostream& log) {
  Codec codec = load_codec(cfg, true, log);
  VarModel var = load_var(cfg);
  cfg.lrt_use_z = mode != RefinerMode::LrtNoZ;
  Rng rr(derive_seed(cfg.seed, "lrt.init"));
  Refiner ref(RefinerConfig::from(cfg), rr);
  if (mode != RefinerMode::None) load_store(refiner_path(cfg, mode), "RVL1", ref.ps);
  codec.ps.set_requires_grad(false);
  var.ps.set_requires_grad(false);
  ref.ps.set_requires_grad(false);
  return Pipeline{std::move(codec), std::move(var), std::move(ref), mode,
                  Sampling{cfg.topk, cfg.temperature}};
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << text;
  if (!f) throw IoError("short write to " + path);
}

int run_gen_data(RunConfig& cfg) {
  auto entries = gen_dataset(cfg);
  int tr = 0, te = 0;
  for (const auto& e : entries) (e.split == "train" ? tr : te) += 1;
  std::cout << "wrote " << tr << " train and " << te << " test pairs under " << cfg.data_dir
            << "\n";
  return 0;
}

int run_train_codec(RunConfig& cfg) {
  auto entries = load_manifest(manifest_path(cfg));
  auto imgs = clean_images(entries, "train");
  Rng r(derive_seed(cfg.seed, "codec.init"));
  Codec codec(cfg, r);
  std::cout << "codec: " << codec.ps.param_count() << " params, " << imgs.size() << " images\n";
  int64_t steps = train_codec(codec, imgs, cfg, &std::cout);
  std::filesystem::create_directories(cfg.out_dir);
  std::string path = cfg.out_dir + "/codec.ckpt";
  save_store(path, "RVC1", (uint64_t)steps, cfg.seed, cfg.to_lines(), codec.ps);
  std::cout << "saved " << path << "\n";
  return 0;
}

int run_train_var(RunConfig& cfg) {
  auto entries = load_manifest(manifest_path(cfg));
  Codec codec = load_codec(cfg, false, std::cout);
  codec.ps.set_requires_grad(false);
  uint64_t frozen = hash_store(codec.ps);

  Rng vr(derive_seed(cfg.seed, "var.init"));
  VarModel model(TransformerConfig::from(cfg), vr);
  std::cout << "transformer: " << model.ps.param_count() << " params\n";

  std::vector<VarExample> exs;
  for (const auto& e : entries)
    if (e.split == "train")
      exs.push_back(make_var_example(codec, model, read_ppm(e.clean_path), read_ppm(e.deg_path)));
  if (exs.empty()) throw UsageError("manifest has no 'train' entries");
  std::cout << "prepared " << exs.size() << " examples\n";

  int64_t steps = train_var(model, exs, cfg, &std::cout);
  if (hash_store(codec.ps) != frozen)
    throw UsageError("codec weights changed while training the transformer");
  std::filesystem::create_directories(cfg.out_dir);
  std::string path = cfg.out_dir + "/var.ckpt";
  save_store(path, "RVA1", (uint64_t)steps, cfg.seed, cfg.to_lines(), model.ps);
  std::cout << "saved " << path << "\n";
  return 0;
}

int run_train_lrt(RunConfig& cfg) {
  auto entries = load_manifest(manifest_path(cfg));
  Codec codec = load_codec(cfg, false, std::cout);
  VarModel var = load_var(cfg);
  codec.ps.set_requires_grad(false);
  var.ps.set_requires_grad(false);
  uint64_t frozen_c = hash_store(codec.ps), frozen_v = hash_store(var.ps);

  Rng rr(derive_seed(cfg.seed, "lrt.init"));
  Refiner ref(RefinerConfig::from(cfg), rr);
  std::cout << "refiner: " << ref.ps.param_count() << " params ("
            << (cfg.lrt_use_z ? "with" : "without") << " transformer summary)\n";

  std::vector<RefineExample> exs;
  int total = 0;
  for (const auto& e : entries)
    if (e.split == "train") ++total;
  for (const auto& e : entries) {
    if (e.split != "train") continue;
    exs.push_back(make_refine_example(codec, var, read_ppm(e.clean_path), read_ppm(e.deg_path)));
    if ((int)exs.size() % 64 == 0)
      std::cout << "prepared " << exs.size() << "/" << total << " examples\n";
  }
  if (exs.empty()) throw UsageError("manifest has no 'train' entries");

  int64_t steps = train_lrt(ref, exs, cfg, &std::cout);
  if (hash_store(codec.ps) != frozen_c || hash_store(var.ps) != frozen_v)
    throw UsageError("frozen weights changed while training the refiner");
  std::filesystem::create_directories(cfg.out_dir);
  std::string path = cfg.out_dir + (cfg.lrt_use_z ? "/lrt.ckpt" : "/lrt_noz.ckpt");
  save_store(path, "RVL1", (uint64_t)steps, cfg.seed, cfg.to_lines(), ref.ps);
  std::cout << "saved " << path << "\n";
  return 0;
}

int run_finetune(RunConfig& cfg) {
  auto entries = load_manifest(manifest_path(cfg));
  auto imgs = clean_images(entries, "train");
  Codec codec = load_codec(cfg, false, std::cout);
  auto report = finetune_decoder(codec, imgs, cfg, &std::cout);
  std::filesystem::create_directories(cfg.out_dir);
  std::string path = cfg.out_dir + "/decoder_ft.ckpt";
  save_store(path, "RVD1", (uint64_t)report.steps, cfg.seed, cfg.to_lines(), codec.ps);
  std::cout << "saved " << path << "\n";
  return 0;
}

int run_restore(RunConfig& cfg, const StageArgs& a) {
  RefinerMode mode = parse_refiner_mode(a.refiner);
  Pipeline p = load_pipeline(cfg, mode, std::cout);
  Tensor deg = read_ppm(a.input);
  Rng rng(derive_seed(cfg.seed, "restore"));
  Tensor out = restore_image(p, deg, rng, &std::cout);
  write_ppm(a.output, out);
  std::cout << "wrote " << a.output << "\n";
  return 0;
}

int run_eval(RunConfig& cfg, const StageArgs& a, const std::string& prefix) {
  std::vector<RefinerMode> modes;
  if (a.refiner == "all") {
    modes = {RefinerMode::None, RefinerMode::Lrt, RefinerMode::LrtNoZ};
  } else {
    modes = {parse_refiner_mode(a.refiner)};
  }
  auto entries = load_manifest(manifest_path(cfg));
  std::filesystem::create_directories(cfg.out_dir);
  for (RefinerMode mode : modes) {
    Pipeline p = load_pipeline(cfg, mode, std::cout);
    auto rep = evaluate_pipeline(p, entries, cfg.seed);
    std::string path = !a.report.empty() && modes.size() == 1
                           ? a.report
                           : cfg.out_dir + "/" + prefix + "_" + refiner_mode_name(mode) + ".csv";
    write_text(path, rep.csv());
    std::cout << "refiner=" << refiner_mode_name(mode) << "\n" << rep.csv() << "saved " << path
              << "\n";
  }
  return 0;
}

int run_selftest_cmd() {
  auto results = run_selftest(std::cout);
  for (const auto& r : results)
    if (!r.ok) return 3;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-scale token restoration pipeline"};
  app.require_subcommand(1);
  RunConfig proto;

  std::deque<StageArgs> bags;
  auto stage = [&](const char* name, const char* desc) {
    CLI::App* sub = app.add_subcommand(name, desc);
    bags.emplace_back();
    add_common(sub, &bags.back(), proto);
    return std::make_pair(sub, &bags.back());
  };

  auto [gen_sub, gen_a] = stage("gen-data", "generate the procedural dataset and manifest");
  auto [codec_sub, codec_a] = stage("train-codec", "train the autoencoder and quantizer");
  auto [var_sub, var_a] = stage("train-var", "train the scale-space transformer");
  auto [lrt_sub, lrt_a] = stage("train-lrt", "train the latent refiner");
  auto [ft_sub, ft_a] = stage("finetune-decoder", "fine-tune the decoder with the patch critic");
  auto [restore_sub, restore_a] = stage("restore", "restore one degraded image");
  auto [eval_sub, eval_a] = stage("eval", "score the test split and write a CSV report");
  auto [ablate_sub, ablate_a] = stage("ablate", "score refiner variants side by side");
  CLI::App* selftest_sub = app.add_subcommand("selftest", "run the invariant battery");

  restore_sub->add_option("--input", restore_a->input, "degraded image (PPM)")->required();
  restore_sub->add_option("--output", restore_a->output, "restored image path")->required();
  restore_a->refiner = "lrt";
  restore_sub->add_option("--refiner", restore_a->refiner, "none, lrt, or lrt_noz");
  eval_a->refiner = "lrt";
  eval_sub->add_option("--refiner", eval_a->refiner, "none, lrt, lrt_noz, or all");
  eval_sub->add_option("--report", eval_a->report, "CSV path (default out_dir/eval_<mode>.csv)");
  ablate_a->refiner = "all";
  ablate_sub->add_option("--refiner", ablate_a->refiner, "none, lrt, lrt_noz, or all");
  ablate_sub->add_option("--report", ablate_a->report,
                         "CSV path (default out_dir/ablate_<mode>.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (selftest_sub->parsed()) return run_selftest_cmd();
    StageArgs* a = nullptr;
    CLI::App* sub = nullptr;
    int (*run)(RunConfig&) = nullptr;
    if (gen_sub->parsed()) { sub = gen_sub; a = gen_a; run = run_gen_data; }
    if (codec_sub->parsed()) { sub = codec_sub; a = codec_a; run = run_train_codec; }
    if (var_sub->parsed()) { sub = var_sub; a = var_a; run = run_train_var; }
    if (lrt_sub->parsed()) { sub = lrt_sub; a = lrt_a; run = run_train_lrt; }
    if (ft_sub->parsed()) { sub = ft_sub; a = ft_a; run = run_finetune; }
    (void)sub;
    if (run) {
      RunConfig cfg = make_cfg(*a);
      return run(cfg);
    }
    if (restore_sub->parsed()) {
      RunConfig cfg = make_cfg(*restore_a);
      return run_restore(cfg, *restore_a);
    }
    if (eval_sub->parsed()) {
      RunConfig cfg = make_cfg(*eval_a);
      return run_eval(cfg, *eval_a, "eval");
    }
    if (ablate_sub->parsed()) {
      RunConfig cfg = make_cfg(*ablate_a);
      return run_eval(cfg, *ablate_a, "ablate");
    }
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
