#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "helpers.hpp"
#include "nsr/eval.hpp"
#include "nsr/selftest.hpp"

using namespace nsr;

namespace {

RunConfig small_cfg() {
  RunConfig cfg;
  cfg.image_size = 16;
  cfg.schedule = "1x1,2x2,4x4";
  cfg.latent_dim = 4;
  cfg.codebook_size = 8;
  cfg.codec_width = 8;
  cfg.var_depth = 2;
  cfg.var_dim = 32;
  cfg.var_heads = 4;
  cfg.ffn_mult = 2;
  cfg.lrt_depth = 2;
  cfg.lrt_dim = 16;
  cfg.lrt_heads = 2;
  cfg.validate();
  return cfg;
}

Tensor rand_image(int size, uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v((size_t)3 * size * size);
  for (auto& x : v) x = rng.uniform();
  return Tensor::from({3, size, size}, std::move(v));
}

// manifest whose degraded file IS the clean file, so an identity model is a
// perfect restorer
std::vector<ManifestEntry> self_pair_entries(const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::vector<ManifestEntry> entries;
  const char* kinds[] = {"haze", "noise", "haze", "blur", "noise"};
  for (int i = 0; i < 5; ++i) {
    std::string path = dir + "/img_" + std::to_string(i) + ".ppm";
    write_ppm(path, rand_image(16, 900 + (uint64_t)i));
    ManifestEntry e;
    e.split = "test";
    e.clean_path = path;
    e.deg_path = path;
    e.spec = sample_spec(kinds[i], 77 + (uint64_t)i);
    entries.push_back(std::move(e));
  }
  return entries;
}

Pipeline make_pipeline(const RunConfig& cfg, RefinerMode mode) {
  Rng cr(5), vr(11), rr(17);
  Pipeline p{Codec(cfg, cr), VarModel(TransformerConfig::from(cfg), vr),
             Refiner(RefinerConfig::from(cfg), rr), mode, Sampling{}};
  return p;
}

}  // namespace

TEST_CASE("identity restoration scores perfectly on self pairs") {
  auto entries = self_pair_entries("eval_test_data");
  auto rep = evaluate_entries(entries, "test", [](const Tensor& deg) { return deg; });

  REQUIRE(rep.rows.size() == 3);
  REQUIRE(rep.rows[0].kind == "haze");
  REQUIRE(rep.rows[1].kind == "noise");
  REQUIRE(rep.rows[2].kind == "blur");
  REQUIRE(rep.rows[0].count == 2);
  REQUIRE(rep.rows[1].count == 2);
  REQUIRE(rep.rows[2].count == 1);
  REQUIRE(rep.mean.count == 5);
  for (const auto& r : rep.rows) {
    REQUIRE(r.psnr == 99.0);
    REQUIRE(r.ssim == 1.0);
  }
  REQUIRE(rep.mean.psnr == 99.0);
  REQUIRE(rep.mean.ssim == 1.0);

  std::string csv = rep.csv();
  REQUIRE(csv.find("kind,count,psnr,ssim\n") == 0);
  REQUIRE(csv.find("haze,2,99.0000,1.0000\n") != std::string::npos);
  REQUIRE(csv.find("mean,5,99.0000,1.0000\n") != std::string::npos);

  std::filesystem::remove_all("eval_test_data");
}

TEST_CASE("evaluation without matching entries is an error") {
  auto entries = self_pair_entries("eval_test_data2");
  REQUIRE_THROWS_AS(
      evaluate_entries(entries, "train", [](const Tensor& deg) { return deg; }),
      UsageError);
  std::filesystem::remove_all("eval_test_data2");
}

TEST_CASE("refiner variant names parse") {
  REQUIRE(parse_refiner_mode("none") == RefinerMode::None);
  REQUIRE(parse_refiner_mode("lrt") == RefinerMode::Lrt);
  REQUIRE(parse_refiner_mode("lrt_noz") == RefinerMode::LrtNoZ);
  REQUIRE(refiner_mode_name(RefinerMode::LrtNoZ) == "lrt_noz");
  REQUIRE_THROWS_AS(parse_refiner_mode("vanilla"), ConfigError);
}

TEST_CASE("restoration is deterministic and logs one line per scale") {
  auto cfg = small_cfg();
  auto p = make_pipeline(cfg, RefinerMode::None);
  Tensor deg = rand_image(cfg.image_size, 31);

  std::ostringstream log;
  Rng r1(9);
  Tensor a = restore_image(p, deg, r1, &log);
  Rng r2(9);
  Tensor b = restore_image(p, deg, r2);

  REQUIRE(a.ndim() == 3);
  REQUIRE(a.dim(0) == 3);
  REQUIRE(a.dim(1) == cfg.image_size);
  REQUIRE(a.dim(2) == cfg.image_size);
  for (int64_t i = 0; i < a.numel(); ++i) REQUIRE(a.data()[i] == b.data()[i]);

  int steps = 0;
  std::string line;
  std::istringstream in(log.str());
  while (std::getline(in, line))
    if (line.find("[ar] step") != std::string::npos) ++steps;
  REQUIRE(steps == 3);
}

TEST_CASE("an untrained refiner leaves restoration unchanged") {
  auto cfg = small_cfg();
  auto plain = make_pipeline(cfg, RefinerMode::None);
  auto refined = make_pipeline(cfg, RefinerMode::Lrt);
  Tensor deg = rand_image(cfg.image_size, 32);
  Rng r1(9), r2(9);
  Tensor a = restore_image(plain, deg, r1);
  Tensor b = restore_image(refined, deg, r2);
  for (int64_t i = 0; i < a.numel(); ++i) REQUIRE(a.data()[i] == b.data()[i]);
}

TEST_CASE("pipeline evaluation produces identical reports across runs") {
  auto cfg = small_cfg();
  cfg.data_dir = "eval_test_data3";
  cfg.train_count = 2;
  cfg.test_count = 4;
  auto entries = gen_dataset(cfg);

  auto p = make_pipeline(cfg, RefinerMode::Lrt);
  auto rep1 = evaluate_pipeline(p, entries, cfg.seed);
  auto rep2 = evaluate_pipeline(p, entries, cfg.seed);
  REQUIRE(rep1.csv() == rep2.csv());
  REQUIRE(rep1.mean.count == 4);
  REQUIRE(rep1.mean.psnr > 0.0);

  std::filesystem::remove_all("eval_test_data3");
}

TEST_CASE("invariant battery passes") {
  std::ostringstream log;
  auto results = run_selftest(log);
  REQUIRE(results.size() >= 12);
  for (const auto& r : results) {
    INFO(r.name << " " << r.note);
    REQUIRE(r.ok);
  }
  REQUIRE(log.str().find("FAIL") == std::string::npos);
}
