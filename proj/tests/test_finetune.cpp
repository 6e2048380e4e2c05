#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <sstream>

#include "helpers.hpp"
#include "nsr/finetune.hpp"

using namespace nsr;

namespace {

RunConfig ft_cfg() {
  RunConfig cfg;
  cfg.image_size = 16;
  cfg.schedule = "1x1,2x2,4x4";
  cfg.latent_dim = 4;
  cfg.codebook_size = 8;
  cfg.codec_width = 8;
  cfg.validate();
  return cfg;
}

Tensor rand_image(int size, uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v((size_t)3 * size * size);
  for (auto& x : v) x = rng.uniform();
  return Tensor::from({3, size, size}, std::move(v));
}

// direct double-precision SSIM over valid windows
double ssim_oracle(const Tensor& x, const Tensor& y) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int win = 11;
  const double sigma = 1.5, C1 = 1e-4, C2 = 9e-4;
  std::vector<double> w((size_t)win * win);
  double wsum = 0.0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      double d2 = (i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0);
      w[(size_t)i * win + j] = std::exp(-d2 / (2.0 * sigma * sigma));
      wsum += w[(size_t)i * win + j];
    }
  for (auto& v : w) v /= wsum;

  double total = 0.0;
  int count = 0;
  for (int c = 0; c < C; ++c)
    for (int oi = 0; oi + win <= H; ++oi)
      for (int oj = 0; oj + win <= W; ++oj) {
        double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
        for (int i = 0; i < win; ++i)
          for (int j = 0; j < win; ++j) {
            double wx = w[(size_t)i * win + j];
            double a = x.at({c, oi + i, oj + j});
            double b = y.at({c, oi + i, oj + j});
            mx += wx * a;
            my += wx * b;
            mxx += wx * a * a;
            myy += wx * b * b;
            mxy += wx * a * b;
          }
        double vx = mxx - mx * mx, vy = myy - my * my, cov = mxy - mx * my;
        total += ((2 * mx * my + C1) * (2 * cov + C2)) /
                 ((mx * mx + my * my + C1) * (vx + vy + C2));
        ++count;
      }
  return total / count;
}

}  // namespace

TEST_CASE("ssim of an image with itself is exactly one") {
  auto x = rand_image(16, 1);
  NoGrad ng;
  REQUIRE(ssim(x, x).item() == 1.0f);
}

TEST_CASE("ssim is strongly negative on an inverted checkerboard") {
  const int S = 16;
  std::vector<float> a((size_t)3 * S * S), b((size_t)3 * S * S);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < S; ++i)
      for (int j = 0; j < S; ++j) {
        float v = (float)((i + j) % 2);
        a[((size_t)c * S + i) * S + j] = v;
        b[((size_t)c * S + i) * S + j] = 1.f - v;
      }
  NoGrad ng;
  float s = ssim(Tensor::from({3, S, S}, std::move(a)), Tensor::from({3, S, S}, std::move(b))).item();
  REQUIRE(s < 0.f);
}

TEST_CASE("ssim matches a double-precision oracle") {
  for (uint64_t seed : {3u, 4u, 5u}) {
    auto x = rand_image(18, seed);
    auto y = rand_image(18, seed + 100);
    NoGrad ng;
    float got = ssim(x, y).item();
    double want = ssim_oracle(x, y);
    INFO("seed " << seed);
    REQUIRE(std::abs((double)got - want) <= 1e-5);
  }
}

TEST_CASE("ssim is symmetric") {
  auto x = rand_image(16, 7);
  auto y = rand_image(16, 8);
  NoGrad ng;
  REQUIRE(std::abs(ssim(x, y).item() - ssim(y, x).item()) <= 1e-7f);
}

TEST_CASE("ssim gradients pass finite differences") {
  auto x = nsrtest::rand_tensor({1, 12, 12}, 9, true, 0.1f, 0.9f);
  auto y = nsrtest::rand_tensor({1, 12, 12}, 10, true, 0.1f, 0.9f);
  nsrtest::check_grads({x, y}, [&] { return ssim(x, y); });
}

TEST_CASE("ssim rejects mismatched shapes") {
  NoGrad ng;
  REQUIRE_THROWS_AS(ssim(Tensor::zeros({3, 16, 16}), Tensor::zeros({3, 16, 12})), ShapeError);
}

TEST_CASE("psnr identities and analytic point") {
  auto x = rand_image(16, 11);
  REQUIRE(psnr(x, x) == 99.0);

  Tensor a = Tensor::full({3, 8, 8}, 0.2f);
  Tensor b = Tensor::full({3, 8, 8}, 0.3f);
  REQUIRE(std::abs(psnr(a, b) - 20.0) <= 1e-5);  // 0.1f is not exact in binary

  auto y = rand_image(16, 12);
  REQUIRE(psnr(x, y) == psnr(y, x));
  REQUIRE_THROWS_AS(psnr(x, Tensor::zeros({3, 8, 8})), ShapeError);
}

TEST_CASE("perceptual distance identities") {
  Percep percep;
  auto x = rand_image(16, 13);
  auto y = rand_image(16, 14);
  NoGrad ng;
  REQUIRE(percep.loss(x, x).item() == 0.f);
  REQUIRE(std::abs(percep.loss(x, y).item() - percep.loss(y, x).item()) <= 1e-7f);

  // monotone under increasing noise on a fixed direction
  Rng nrng(15);
  std::vector<float> n((size_t)3 * 16 * 16);
  for (auto& v : n) v = nrng.normal();
  auto noisy = [&](float s) {
    std::vector<float> v(x.vec());
    for (size_t i = 0; i < v.size(); ++i) v[i] += s * n[i];
    return percep.loss(x, Tensor::from(x.shape(), std::move(v))).item();
  };
  float p1 = noisy(0.05f), p2 = noisy(0.1f), p3 = noisy(0.2f);
  REQUIRE(p1 < p2);
  REQUIRE(p2 < p3);
}

TEST_CASE("patch discriminator yields a logit grid") {
  Rng rng(16);
  PatchDisc disc(rng);
  NoGrad ng;
  Tensor imgs = Tensor::zeros({2, 3, 32, 32});
  Tensor out = disc(imgs);
  REQUIRE(out.shape() == Shape{2, 1, 4, 4});

  Tensor small = Tensor::zeros({1, 3, 16, 16});
  REQUIRE(disc(small).shape() == Shape{1, 1, 2, 2});
}

TEST_CASE("adversarial-free fine-tune leaves the discriminator and encoder untouched") {
  auto cfg = ft_cfg();
  cfg.steps_ft = 8;
  cfg.batch_ft = 2;
  cfg.lambda_adv = 0.f;
  Rng crng(21);
  Codec codec(cfg, crng);

  std::vector<Tensor> imgs;
  for (int i = 0; i < 4; ++i) imgs.push_back(rand_image(cfg.image_size, 30 + (uint64_t)i));

  ParamStore enc_ps = subset_store(codec.ps, "dec.", true);
  uint64_t enc_before = hash_store(enc_ps);
  uint64_t dec_before = hash_store(subset_store(codec.ps, "dec."));

  std::ostringstream log;
  auto report = finetune_decoder(codec, imgs, cfg, &log);
  REQUIRE(report.steps == 8);
  REQUIRE(hash_store(enc_ps) == enc_before);
  REQUIRE(hash_store(subset_store(codec.ps, "dec.")) != dec_before);
  REQUIRE(log.str().find("adv_g=0 adv_d=0") != std::string::npos);
  REQUIRE(log.str().find("pre_psnr=") != std::string::npos);
}

TEST_CASE("adversarial-free fine-tune is reproducible") {
  auto cfg = ft_cfg();
  cfg.steps_ft = 6;
  cfg.batch_ft = 2;
  cfg.lambda_adv = 0.f;
  auto run = [&]() {
    Rng crng(21);
    Codec codec(cfg, crng);
    std::vector<Tensor> imgs;
    for (int i = 0; i < 4; ++i) imgs.push_back(rand_image(cfg.image_size, 30 + (uint64_t)i));
    finetune_decoder(codec, imgs, cfg, nullptr);
    return hash_store(codec.ps);
  };
  REQUIRE(run() == run());
}

TEST_CASE("logged total equals the weighted component sum") {
  auto cfg = ft_cfg();
  cfg.steps_ft = 3;
  cfg.batch_ft = 2;
  Rng crng(21);
  Codec codec(cfg, crng);
  std::vector<Tensor> imgs;
  for (int i = 0; i < 4; ++i) imgs.push_back(rand_image(cfg.image_size, 30 + (uint64_t)i));

  std::ostringstream log;
  finetune_decoder(codec, imgs, cfg, &log);

  std::istringstream in(log.str());
  std::string line;
  int checked = 0;
  while (std::getline(in, line)) {
    if (line.rfind("step=", 0) != 0) continue;
    auto grab = [&](const std::string& key) {
      auto at = line.find(" " + key + "=");
      REQUIRE(at != std::string::npos);
      return std::stod(line.substr(at + key.size() + 2));
    };
    double l1 = grab("l1"), sl = grab("ssim_loss"), pc = grab("percep"), ag = grab("adv_g");
    double total = grab("total");
    double want = 2.0 * l1 + 0.4 * sl + 0.2 * pc + 0.01 * ag;
    REQUIRE(std::abs(total - want) <= 1e-6 * std::max(1.0, std::abs(want)));
    ++checked;
  }
  REQUIRE(checked >= 2);

  // discriminator trains when the adversarial weight is positive
  REQUIRE(log.str().find("adv_d=0 ") == std::string::npos);
}
