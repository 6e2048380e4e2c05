#pragma once

#include <algorithm>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "nsr/codec.hpp"
#include "nsr/config.hpp"
#include "nsr/io.hpp"
#include "nsr/metrics.hpp"
#include "nsr/optim.hpp"

// Decoder fine-tuning on continuous latents. The encoder, codebook, and
// scale-mixing convolutions stay frozen; only the decoder trains, against an
// L1 + SSIM + perceptual + adversarial composite with a patch discriminator.

namespace nsr {

struct LossWeights {
  float l1 = 2.0f, ssim_w = 0.4f, percep = 0.2f, adv = 0.01f;

  static LossWeights from(const RunConfig& cfg) {
    LossWeights w;
    w.l1 = cfg.lambda_l1;
    w.ssim_w = cfg.lambda_ssim;
    w.percep = cfg.lambda_percep;
    w.adv = cfg.lambda_adv;
    return w;
  }
};

// 3 stride-2 convs and a patch head: real/fake logits on a grid, not a
// single global score
struct PatchDisc {
  ParamStore ps;
  Conv c1, c2, c3, out;

  PatchDisc() = default;
  explicit PatchDisc(Rng& rng) {
    c1 = Conv(ps, "c1", 3, 32, 4, 2, 1, rng);
    c2 = Conv(ps, "c2", 32, 64, 4, 2, 1, rng);
    c3 = Conv(ps, "c3", 64, 64, 4, 2, 1, rng);
    out = Conv(ps, "out", 64, 1, 3, 1, 1, rng);
  }

  // [B x 3 x H x W] -> [B x 1 x h x w]
  Tensor operator()(const Tensor& imgs) const {
    Tensor x = leaky_relu(c1(imgs), 0.2f);
    x = leaky_relu(c2(x), 0.2f);
    x = leaky_relu(c3(x), 0.2f);
    return out(x);
  }
};

inline ParamStore subset_store(const ParamStore& ps, const std::string& prefix, bool invert = false) {
  ParamStore out;
  for (const auto& [n, t] : ps.items)
    if ((n.rfind(prefix, 0) == 0) != invert) out.items.emplace_back(n, t);
  return out;
}

struct FinetuneReport {
  double pre_psnr = 0.0, post_psnr = 0.0;
  int64_t steps = 0;
};

inline FinetuneReport finetune_decoder(Codec& codec, const std::vector<Tensor>& images,
                                       const RunConfig& cfg, std::ostream* log) {
  if (images.empty()) throw UsageError("finetune_decoder: empty dataset");
  LossWeights lw = LossWeights::from(cfg);

  ParamStore dec_ps = subset_store(codec.ps, "dec.");
  ParamStore frozen_ps = subset_store(codec.ps, "dec.", true);
  const uint64_t frozen_before = hash_store(frozen_ps);
  codec.ps.set_requires_grad(false);
  dec_ps.set_requires_grad(true);

  std::vector<Tensor> latents;
  {
    NoGrad ng;
    for (const auto& img : images) latents.push_back(codec.encode_continuous(img));
  }

  const int report_n = (int)std::min<size_t>(images.size(), 64);
  auto mean_recon_psnr = [&]() {
    NoGrad ng;
    double s = 0.0;
    for (int i = 0; i < report_n; ++i)
      s += psnr(codec.decode_image(latents[(size_t)i]), images[(size_t)i]);
    return s / (double)report_n;
  };

  FinetuneReport report;
  report.pre_psnr = mean_recon_psnr();

  Percep percep;
  Rng disc_rng(derive_seed(cfg.seed, "ft.disc"));
  PatchDisc disc(disc_rng);
  Rng order_rng(derive_seed(cfg.seed, "ft.order"));
  AdamW g_opt(dec_ps, cfg.weight_decay);
  AdamW d_opt(disc.ps, cfg.weight_decay);

  const int B = cfg.batch_ft;
  for (int step = 0; step < cfg.steps_ft; ++step) {
    std::vector<Tensor> xb_list, lb_list;
    for (int i = 0; i < B; ++i) {
      int pick = order_rng.uniform_int((int)images.size());
      xb_list.push_back(images[(size_t)pick]);
      lb_list.push_back(latents[(size_t)pick]);
    }
    Tensor xb = stack_batch(xb_list);
    Tensor xhat = codec.decode_batch(stack_batch(lb_list), false);
    Tensor xhat_frozen = detach(xhat);

    Tensor l1 = l1_loss(xhat, xb);
    Tensor ssim_acc, percep_acc;
    for (int i = 0; i < B; ++i) {
      Tensor s = ssim(select_batch(xhat, i), select_batch(xb, i));
      Tensor p = percep.loss(select_batch(xhat, i), select_batch(xb, i));
      ssim_acc = i == 0 ? s : add(ssim_acc, s);
      percep_acc = i == 0 ? p : add(percep_acc, p);
    }
    Tensor ssim_loss = add_scalar(scale(ssim_acc, -1.f / (float)B), 1.f);
    Tensor percep_loss = scale(percep_acc, 1.f / (float)B);
    Tensor adv_g = lw.adv > 0.f ? mean_all(softplus(scale(disc(xhat), -1.f)))
                                : Tensor::scalar(0.f);
    Tensor total = add(add(scale(l1, lw.l1), scale(ssim_loss, lw.ssim_w)),
                       add(scale(percep_loss, lw.percep), scale(adv_g, lw.adv)));

    float l1_v = l1.item(), ssim_v = ssim_loss.item(), percep_v = percep_loss.item();
    float adv_g_v = adv_g.item(), total_v = total.item();

    g_opt.zero_grad();
    backward(total);
    g_opt.step(cosine_lr(cfg.lr_ft, step, cfg.steps_ft, cfg.warmup_frac, cfg.lr_floor));

    float adv_d_v = 0.f;
    if (lw.adv > 0.f) {
      Tensor d_loss = add(mean_all(softplus(scale(disc(xb), -1.f))),
                          mean_all(softplus(disc(xhat_frozen))));
      adv_d_v = d_loss.item();
      d_opt.zero_grad();
      backward(d_loss);
      d_opt.step(cosine_lr(cfg.lr_ft, step, cfg.steps_ft, cfg.warmup_frac, cfg.lr_floor));
    }

    if (log && (step % 25 == 0 || step + 1 == cfg.steps_ft))
      (*log) << std::setprecision(9) << "step=" << step << " l1=" << l1_v << " ssim_loss="
             << ssim_v << " percep=" << percep_v << " adv_g=" << adv_g_v << " adv_d=" << adv_d_v
             << " total=" << total_v << "\n";
  }

  codec.ps.set_requires_grad(true);
  if (hash_store(frozen_ps) != frozen_before)
    throw UsageError("finetune_decoder: frozen encoder/quantizer weights changed");

  report.post_psnr = mean_recon_psnr();
  report.steps = cfg.steps_ft;
  if (log)
    (*log) << std::setprecision(6) << "pre_psnr=" << report.pre_psnr
           << " post_psnr=" << report.post_psnr << "\n";
  return report;
}

}  // namespace nsr
