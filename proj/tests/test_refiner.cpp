#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <sstream>

#include "helpers.hpp"
#include "nsr/io.hpp"
#include "nsr/refiner.hpp"

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

struct Rig {
  Codec codec;
  VarModel var;
  Refiner ref;

  explicit Rig(const RunConfig& cfg)
      : codec([&] { Rng r(5); return Codec(cfg, r); }()),
        var([&] { Rng r(11); return VarModel(TransformerConfig::from(cfg), r); }()),
        ref([&] { Rng r(17); return Refiner(RefinerConfig::from(cfg), r); }()) {}
};

}  // namespace

TEST_CASE("untrained refiner is an exact identity") {
  auto cfg = small_cfg();
  Rig rig(cfg);
  auto ex = make_refine_example(rig.codec, rig.var, rand_image(cfg.image_size, 1),
                                rand_image(cfg.image_size, 2));
  NoGrad ng;
  Tensor out = rig.ref.refine(ex.f_quant, ex.z);
  REQUIRE(out.shape() == ex.f_quant.shape());
  for (int64_t i = 0; i < out.numel(); ++i) REQUIRE(out.data()[i] == ex.f_quant.data()[i]);
}

TEST_CASE("refinement is deterministic") {
  auto cfg = small_cfg();
  Rig rig(cfg);
  // give the head real weights so the residual is nonzero
  Rng wr(23);
  Tensor* hw = rig.ref.ps.find("head.w");
  REQUIRE(hw != nullptr);
  for (int64_t i = 0; i < hw->numel(); ++i) hw->data()[i] = wr.uniform(-0.05f, 0.05f);

  auto ex = make_refine_example(rig.codec, rig.var, rand_image(cfg.image_size, 1),
                                rand_image(cfg.image_size, 2));
  NoGrad ng;
  Tensor a = rig.ref.refine(ex.f_quant, ex.z);
  Tensor b = rig.ref.refine(ex.f_quant, ex.z);
  bool moved = false;
  for (int64_t i = 0; i < a.numel(); ++i) {
    REQUIRE(a.data()[i] == b.data()[i]);
    if (a.data()[i] != ex.f_quant.data()[i]) moved = true;
  }
  REQUIRE(moved);
}

TEST_CASE("refine validates input shapes") {
  auto cfg = small_cfg();
  Rig rig(cfg);
  NoGrad ng;
  Tensor bad_latent = Tensor::zeros({cfg.latent_dim, 2, 2});
  Tensor z = Tensor::zeros({1 + 21, cfg.var_dim});
  REQUIRE_THROWS_AS(rig.ref.refine(bad_latent, z), ShapeError);

  Tensor good_latent = Tensor::zeros({cfg.latent_dim, 4, 4});
  Tensor bad_z = Tensor::zeros({22, cfg.var_dim + 1});
  REQUIRE_THROWS_AS(rig.ref.refine(good_latent, bad_z), ShapeError);
  REQUIRE_THROWS_AS(rig.ref.refine(good_latent, Tensor()), ShapeError);
}

TEST_CASE("refiner stays under the parameter budget") {
  RunConfig cfg;  // full-size defaults
  Rng r1(1), r2(2);
  VarModel var(TransformerConfig::from(cfg), r1);
  Refiner ref(RefinerConfig::from(cfg), r2);
  REQUIRE(ref.ps.param_count() * 20 <= var.ps.param_count());  // <= 5%
  REQUIRE(ref.ps.param_count() > 0);
}

TEST_CASE("initial training loss equals the quantization gap") {
  auto cfg = small_cfg();
  Rig rig(cfg);
  auto ex = make_refine_example(rig.codec, rig.var, rand_image(cfg.image_size, 1),
                                rand_image(cfg.image_size, 2));
  NoGrad ng;
  float refined = l1_loss(rig.ref.refine(ex.f_quant, ex.z), ex.f_cont).item();
  float gap = l1_loss(ex.f_quant, ex.f_cont).item();
  REQUIRE(refined == gap);
  REQUIRE(gap > 0.f);
}

TEST_CASE("short training closes part of the quantization gap") {
  auto cfg = small_cfg();
  cfg.steps_lrt = 120;
  cfg.batch_lrt = 2;
  cfg.lr_lrt = 1e-3f;
  Rig rig(cfg);

  std::vector<RefineExample> exs;
  for (int i = 0; i < 2; ++i)
    exs.push_back(make_refine_example(rig.codec, rig.var, rand_image(cfg.image_size, 10 + (uint64_t)i),
                                      rand_image(cfg.image_size, 20 + (uint64_t)i)));

  auto mean_l1 = [&](bool refined) {
    NoGrad ng;
    float s = 0.f;
    for (const auto& ex : exs)
      s += l1_loss(refined ? rig.ref.refine(ex.f_quant, ex.z) : ex.f_quant, ex.f_cont).item();
    return s / (float)exs.size();
  };

  float gap = mean_l1(false);
  std::ostringstream log;
  train_lrt(rig.ref, exs, cfg, &log);
  float closed = mean_l1(true);
  REQUIRE(closed < 0.9f * gap);
  REQUIRE(log.str().find("step=0 l1=") != std::string::npos);
}

TEST_CASE("feature-free variant trains and carries fewer parameters") {
  auto cfg = small_cfg();
  cfg.lrt_use_z = false;
  cfg.steps_lrt = 40;
  cfg.batch_lrt = 2;
  cfg.lr_lrt = 1e-3f;
  Rig rig(cfg);

  auto cfg_z = small_cfg();
  Rng rz(17);
  Refiner with_z(RefinerConfig::from(cfg_z), rz);
  REQUIRE(rig.ref.ps.param_count() < with_z.ps.param_count());

  auto ex = make_refine_example(rig.codec, rig.var, rand_image(cfg.image_size, 1),
                                rand_image(cfg.image_size, 2));
  {
    NoGrad ng;
    // z is ignored entirely in this variant
    Tensor a = rig.ref.refine(ex.f_quant, ex.z);
    Tensor b = rig.ref.refine(ex.f_quant, Tensor());
    for (int64_t i = 0; i < a.numel(); ++i) REQUIRE(a.data()[i] == b.data()[i]);
  }
  std::vector<RefineExample> exs = {ex};
  std::ostringstream log;
  train_lrt(rig.ref, exs, cfg, &log);
  NoGrad ng;
  REQUIRE(l1_loss(rig.ref.refine(ex.f_quant, ex.z), ex.f_cont).item() <
          l1_loss(ex.f_quant, ex.f_cont).item());
}

TEST_CASE("refiner training is reproducible") {
  auto cfg = small_cfg();
  cfg.steps_lrt = 15;
  cfg.batch_lrt = 2;
  auto run = [&]() {
    Rig rig(cfg);
    std::vector<RefineExample> exs;
    for (int i = 0; i < 2; ++i)
      exs.push_back(make_refine_example(rig.codec, rig.var,
                                        rand_image(cfg.image_size, 10 + (uint64_t)i),
                                        rand_image(cfg.image_size, 20 + (uint64_t)i)));
    train_lrt(rig.ref, exs, cfg, nullptr);
    return hash_store(rig.ref.ps);
  };
  REQUIRE(run() == run());
}
