#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "nsr/codec.hpp"
#include "nsr/config.hpp"
#include "nsr/nn.hpp"
#include "nsr/ops.hpp"
#include "nsr/optim.hpp"
#include "nsr/rng.hpp"
#include "nsr/transformer.hpp"

// Latent refinement transformer. Maps the discrete final-scale latent toward
// the continuous one via a residual: tokens of f_quant run through
// self-attention, cross-attention over the backbone's final-block features z,
// and a feed-forward, then a zero-initialized head. At init the refiner is an
// exact identity.

namespace nsr {

struct RefinerConfig {
  int depth = 3, dim = 64, heads = 4;
  int latent_ch = 16, var_dim = 256, tokens = 64;
  bool use_z = true;

  static RefinerConfig from(const RunConfig& cfg) {
    RefinerConfig rc;
    rc.depth = cfg.lrt_depth;
    rc.dim = cfg.lrt_dim;
    rc.heads = cfg.lrt_heads;
    rc.use_z = cfg.lrt_use_z;
    rc.latent_ch = cfg.latent_dim;
    rc.var_dim = cfg.var_dim;
    auto sched = ScaleSchedule::parse(cfg.schedule);
    rc.tokens = sched.final_h() * sched.final_w();
    return rc;
  }

  void validate() const {
    if (dim % heads != 0) throw ConfigError("refiner: dim not divisible by heads");
  }
};

struct RefBlock {
  Norm ln1, ln2, ln3;
  Linear wqkv, wo, ca_q, ca_k, ca_v, ca_o, fc1, fc2;

  RefBlock() = default;
  RefBlock(ParamStore& ps, const std::string& p, int D, bool use_z, Rng& rng) {
    ln1 = Norm(ps, p + ".ln1", D);
    wqkv = Linear(ps, p + ".wqkv", D, 3 * D, rng);
    wo = Linear(ps, p + ".wo", D, D, rng);
    if (use_z) {
      ln2 = Norm(ps, p + ".ln2", D);
      ca_q = Linear(ps, p + ".ca_q", D, D, rng);
      ca_k = Linear(ps, p + ".ca_k", D, D, rng);
      ca_v = Linear(ps, p + ".ca_v", D, D, rng);
      ca_o = Linear(ps, p + ".ca_o", D, D, rng);
    }
    ln3 = Norm(ps, p + ".ln3", D);
    fc1 = Linear(ps, p + ".fc1", D, 4 * D, rng);
    fc2 = Linear(ps, p + ".fc2", 4 * D, D, rng);
  }
};

class Refiner {
 public:
  RefinerConfig rc;
  ParamStore ps;
  Linear in_proj;       // latent channels -> dim
  Tensor pos_emb;       // [tokens x dim]
  Norm z_norm;          // over backbone feature width
  Linear z_proj;        // backbone width -> dim
  std::vector<RefBlock> blocks;
  Norm ln_f;
  Linear head;          // dim -> latent channels, zero-init

  Refiner() = default;
  Refiner(const RefinerConfig& cfg, Rng& rng) : rc(cfg) {
    rc.validate();
    in_proj = Linear(ps, "in_proj", rc.latent_ch, rc.dim, rng);
    pos_emb = ps.add("pos_emb", init_param({rc.tokens, rc.dim}, rng, Init::TruncNormal, rc.dim));
    if (rc.use_z) {
      z_norm = Norm(ps, "z_norm", rc.var_dim);
      z_proj = Linear(ps, "z_proj", rc.var_dim, rc.dim, rng);
    }
    for (int i = 0; i < rc.depth; ++i)
      blocks.emplace_back(ps, "blocks." + std::to_string(i), rc.dim, rc.use_z, rng);
    ln_f = Norm(ps, "ln_f", rc.dim);
    head = Linear(ps, "head", rc.dim, rc.latent_ch, rng, Init::Zero);
  }

  // f_quant_pred [C x H x W], z [(1+L) x var_dim]; returns f_quant_pred plus
  // the predicted residual
  Tensor refine(const Tensor& f_quant_pred, const Tensor& z) const {
    if (f_quant_pred.ndim() != 3 || f_quant_pred.dim(0) != rc.latent_ch ||
        f_quant_pred.dim(1) * f_quant_pred.dim(2) != rc.tokens)
      throw ShapeError("refine: latent " + shape_str(f_quant_pred.shape()) + " does not fit " +
                       std::to_string(rc.tokens) + " tokens of " + std::to_string(rc.latent_ch) +
                       " channels");
    Tensor zp;
    if (rc.use_z) {
      if (!z.defined() || z.ndim() != 2 || z.dim(1) != rc.var_dim)
        throw ShapeError("refine: feature input must be [*x" + std::to_string(rc.var_dim) + "]");
      zp = z_proj(z_norm(z));
    }
    Tensor x = add(in_proj(VarModel::to_tokens(f_quant_pred)), pos_emb);
    for (const auto& b : blocks) {
      Tensor h = b.ln1(x);
      Tensor qkv = b.wqkv(h);
      AttnOpts sa;
      sa.heads = rc.heads;
      x = add(x, b.wo(attn_core(slice_cols(qkv, 0, rc.dim), slice_cols(qkv, rc.dim, 2 * rc.dim),
                                slice_cols(qkv, 2 * rc.dim, 3 * rc.dim), sa)));
      if (rc.use_z) {
        AttnOpts ca;
        ca.heads = rc.heads;
        x = add(x, b.ca_o(attn_core(b.ca_q(b.ln2(x)), b.ca_k(zp), b.ca_v(zp), ca)));
      }
      x = add(x, b.fc2(gelu(b.fc1(b.ln3(x)))));
    }
    Tensor delta = head(ln_f(x));  // [tokens x C]
    Tensor delta_chw = reshape(transpose2d(delta), f_quant_pred.shape());
    return add(f_quant_pred, delta_chw);
  }
};

// frozen-backbone training example: discrete latent input, continuous target,
// teacher-forced backbone features on the paired degraded latent
struct RefineExample {
  Tensor f_quant;  // [C x H x W]
  Tensor f_cont;   // [C x H x W]
  Tensor z;        // [(1+L) x var_dim]
};

inline RefineExample make_refine_example(const Codec& codec, const VarModel& var,
                                         const Tensor& clean, const Tensor& deg) {
  NoGrad ng;
  RefineExample ex;
  ex.f_cont = codec.encode_continuous(clean);
  auto ms = codec.multiscale_encode(ex.f_cont);
  ex.f_quant = ms.pyr.f_quant.back();
  Tensor f_deg = codec.encode_continuous(deg);
  auto out = var.forward_train(var.build_teacher_input(codec, ms.maps, f_deg),
                               var.cond_tokens(f_deg));
  ex.z = out.z;
  return ex;
}

inline int64_t train_lrt(Refiner& ref, const std::vector<RefineExample>& examples,
                         const RunConfig& cfg, std::ostream* log) {
  if (examples.empty()) throw UsageError("train_lrt: empty dataset");
  Rng order_rng(derive_seed(cfg.seed, "lrt.order"));
  AdamW opt(ref.ps, cfg.weight_decay);
  for (int step = 0; step < cfg.steps_lrt; ++step) {
    Tensor loss;
    for (int i = 0; i < cfg.batch_lrt; ++i) {
      const auto& ex = examples[(size_t)order_rng.uniform_int((int)examples.size())];
      Tensor l = l1_loss(ref.refine(ex.f_quant, ex.z), ex.f_cont);
      loss = i == 0 ? l : add(loss, l);
    }
    loss = scale(loss, 1.f / (float)cfg.batch_lrt);
    opt.zero_grad();
    backward(loss);
    opt.step(cosine_lr(cfg.lr_lrt, step, cfg.steps_lrt, cfg.warmup_frac, cfg.lr_floor));
    if (log && (step % 50 == 0 || step + 1 == cfg.steps_lrt))
      (*log) << "step=" << step << " l1=" << loss.item() << "\n";
  }
  return cfg.steps_lrt;
}

}  // namespace nsr
