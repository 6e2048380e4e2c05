#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "nsr/config.hpp"
#include "nsr/nn.hpp"
#include "nsr/ops.hpp"
#include "nsr/optim.hpp"
#include "nsr/rng.hpp"
#include "nsr/schedule.hpp"

// Autoencoder with a shared-codebook multi-scale residual quantizer.
// The quantizer recurrence, per scale k = 1..K:
//   r_k       = nearest_code(resize(f_res_{k-1} to grid k))
//   h_k       = phi_k(resize(embed(r_k) to final grid))
//   f_quant_k = f_quant_{k-1} + h_k
//   f_res_k   = f_cont - f_quant_k

namespace nsr {

struct ResBlock {
  Conv c1, c2;

  ResBlock() = default;
  ResBlock(ParamStore& ps, const std::string& name, int ch, Rng& rng)
      : c1(ps, name + ".c1", ch, ch, 3, 1, 1, rng), c2(ps, name + ".c2", ch, ch, 3, 1, 1, rng) {}

  Tensor operator()(const Tensor& x) const { return add(x, c2(gelu(c1(x)))); }
};

// Nonlinearities live only inside residual branches, so the stack can express
// an exact identity map when its branch convs are zeroed.
struct Encoder {
  Conv stem, head;
  std::vector<Conv> down;
  std::vector<ResBlock> res;

  Encoder() = default;
  Encoder(ParamStore& ps, const std::string& p, int in_ch, int width, int out_ch, int factor,
          Rng& rng) {
    stem = Conv(ps, p + ".stem", in_ch, width, 3, 1, 1, rng);
    res.emplace_back(ps, p + ".res0", width, rng);
    int f = factor, i = 0;
    while (f > 1) {
      if (f % 2 != 0) throw ConfigError("encoder: spatial factor must be a power of two");
      down.emplace_back(ps, p + ".down" + std::to_string(i), width, width, 4, 2, 1, rng);
      res.emplace_back(ps, p + ".res" + std::to_string(i + 1), width, rng);
      f /= 2;
      ++i;
    }
    head = Conv(ps, p + ".head", width, out_ch, 3, 1, 1, rng);
  }

  Tensor operator()(const Tensor& x) const {
    Tensor h = res[0](stem(x));
    for (size_t i = 0; i < down.size(); ++i) h = res[i + 1](down[i](h));
    return head(h);
  }
};

struct Decoder {
  Conv stem, out;
  std::vector<Conv> up;
  std::vector<ResBlock> res;

  Decoder() = default;
  Decoder(ParamStore& ps, const std::string& p, int in_ch, int width, int out_ch, int factor,
          Rng& rng) {
    stem = Conv(ps, p + ".stem", in_ch, width, 3, 1, 1, rng);
    res.emplace_back(ps, p + ".res0", width, rng);
    int f = factor, i = 0;
    while (f > 1) {
      if (f % 2 != 0) throw ConfigError("decoder: spatial factor must be a power of two");
      up.emplace_back(ps, p + ".up" + std::to_string(i), width, width, 3, 1, 1, rng);
      res.emplace_back(ps, p + ".res" + std::to_string(i + 1), width, rng);
      f /= 2;
      ++i;
    }
    out = Conv(ps, p + ".out", width, out_ch, 3, 1, 1, rng);
  }

  Tensor operator()(const Tensor& x) const {
    Tensor h = res[0](stem(x));
    for (size_t i = 0; i < up.size(); ++i) {
      h = resize_bilinear(h, h.dim(2) * 2, h.dim(3) * 2);
      h = res[i + 1](up[i](h));
    }
    return sigmoid(out(h));
  }
};

struct LatentPyramid {
  std::vector<Tensor> h;        // per-scale contribution at the final grid
  std::vector<Tensor> f_quant;  // running sums
  std::vector<Tensor> f_res;    // f_cont - f_quant_k
};

struct MsEncodeOut {
  std::vector<IndexMap> maps;
  LatentPyramid pyr;
};

class Codec {
 public:
  ScaleSchedule sched;
  int V = 0, C = 0, width = 0, image_size = 0, factor = 4;
  ParamStore ps;
  Encoder enc;
  Decoder dec;
  Tensor codebook;            // [V x C]
  std::vector<Conv> phi_conv;  // zero-init; phi_k(x) = x + conv(x)

  Codec() = default;
  Codec(const RunConfig& cfg, Rng& rng)
      : sched(ScaleSchedule::parse(cfg.schedule)),
        V(cfg.codebook_size),
        C(cfg.latent_dim),
        width(cfg.codec_width),
        image_size(cfg.image_size) {
    enc = Encoder(ps, "enc", 3, width, C, factor, rng);
    dec = Decoder(ps, "dec", C, width, 3, factor, rng);
    codebook = ps.add("quant.codebook", init_param({V, C}, rng, Init::TruncNormal, C));
    for (int k = 0; k < sched.K(); ++k)
      phi_conv.emplace_back(ps, "phi." + std::to_string(k), C, C, 3, 1, 1, rng, Init::Zero);
  }

  int latent_h() const { return image_size / factor; }
  int latent_w() const { return image_size / factor; }

  Tensor phi(int k, const Tensor& x) const { return add(x, phi_conv[(size_t)k](x)); }

  // ---- continuous encode / decode ----

  Tensor encode_batch(const Tensor& imgs) const {
    if (imgs.ndim() != 4) throw ShapeError("encode: expected [Bx3xHxW], got " + shape_str(imgs.shape()));
    if (imgs.dim(2) % factor != 0 || imgs.dim(3) % factor != 0)
      throw ConfigError("encode: image size " + std::to_string(imgs.dim(2)) + "x" +
                        std::to_string(imgs.dim(3)) + " not divisible by spatial factor " +
                        std::to_string(factor));
    return enc(imgs);
  }

  Tensor encode_continuous(const Tensor& img) const {
    if (img.ndim() != 3) throw ShapeError("encode: expected [3xHxW], got " + shape_str(img.shape()));
    Shape s = img.shape();
    auto out = encode_batch(reshape(img, {1, s[0], s[1], s[2]}));
    return reshape(out, {out.dim(1), out.dim(2), out.dim(3)});
  }

  Tensor decode_batch(const Tensor& lat, bool eval = true) const {
    if (lat.ndim() != 4) throw ShapeError("decode: expected [BxCxhxw], got " + shape_str(lat.shape()));
    Tensor out = dec(lat);
    if (eval) {
      Tensor v = detach(out);
      for (auto& x : v.vec()) x = x < 0.f ? 0.f : (x > 1.f ? 1.f : x);
      return v;
    }
    return out;
  }

  Tensor decode_image(const Tensor& lat, bool eval = true) const {
    if (lat.ndim() != 3) throw ShapeError("decode: expected [Cxhxw], got " + shape_str(lat.shape()));
    auto out = decode_batch(reshape(lat, {1, lat.dim(0), lat.dim(1), lat.dim(2)}), eval);
    return reshape(out, {out.dim(1), out.dim(2), out.dim(3)});
  }

  // ---- quantizer ----

  // exhaustive nearest code per position; squared distance accumulated over
  // channels in ascending order, ties broken toward the lowest index
  IndexMap quantize_nearest(const Tensor& feat) const {
    if (feat.ndim() != 3 || feat.dim(0) != C)
      throw ShapeError("quantize: expected [" + std::to_string(C) + "xhxw], got " +
                       shape_str(feat.shape()));
    const int h = feat.dim(1), w = feat.dim(2), hw = h * w;
    IndexMap m;
    m.h = h;
    m.w = w;
    m.idx.resize((size_t)hw);
    const float* cb = codebook.data();
    const float* f = feat.data();
    for (int p = 0; p < hw; ++p) {
      int best = 0;
      float best_d = 0.f;
      for (int v = 0; v < V; ++v) {
        float d = 0.f;
        for (int c = 0; c < C; ++c) {
          float diff = f[(size_t)c * hw + p] - cb[(size_t)v * C + c];
          d += diff * diff;
        }
        if (v == 0 || d < best_d) {
          best = v;
          best_d = d;
        }
      }
      m.idx[(size_t)p] = best;
    }
    return m;
  }

  // codebook rows for a map, laid out [C x h x w]; differentiable into the codebook
  Tensor embed_map(const IndexMap& m) const {
    auto rows = embedding(codebook, m.idx);        // [hw x C]
    return reshape(transpose2d(rows), {C, m.h, m.w});
  }

  // ---- multi-scale residual quantization ----

  MsEncodeOut multiscale_encode(const Tensor& f_cont) const {
    const int H = latent_h(), W = latent_w();
    if (f_cont.ndim() != 3 || f_cont.dim(0) != C || f_cont.dim(1) != H || f_cont.dim(2) != W)
      throw ConfigError("multiscale_encode: latent " + shape_str(f_cont.shape()) +
                        " does not match schedule grid " + std::to_string(H) + "x" +
                        std::to_string(W));
    MsEncodeOut out;
    Tensor f_res = f_cont;
    Tensor f_quant;
    for (int k = 0; k < sched.K(); ++k) {
      auto [hk, wk] = sched.grids[(size_t)k];
      Tensor down = reshape(
          resize_bilinear(reshape(f_res, {1, C, f_res.dim(1), f_res.dim(2)}), hk, wk),
          {C, hk, wk});
      IndexMap m = quantize_nearest(down);
      Tensor up = resize_bilinear(reshape(embed_map(m), {1, C, hk, wk}), H, W);
      Tensor h_k = reshape(phi(k, up), {C, H, W});
      f_quant = k == 0 ? h_k : add(f_quant, h_k);
      f_res = sub(f_cont, f_quant);
      out.maps.push_back(std::move(m));
      out.pyr.h.push_back(h_k);
      out.pyr.f_quant.push_back(f_quant);
      out.pyr.f_res.push_back(f_res);
    }
    return out;
  }

  // sum of the first upto_k contributions, recomputed from indices alone; a
  // prefix of the schedule is enough, which generation relies on
  Tensor partial_reconstruct(const std::vector<IndexMap>& maps, int upto_k) const {
    if (upto_k < 1 || upto_k > sched.K())
      throw IndexError("partial_reconstruct: upto_k " + std::to_string(upto_k) +
                       " out of range [1," + std::to_string(sched.K()) + "]");
    if ((int)maps.size() < upto_k)
      throw ConfigError("partial_reconstruct: " + std::to_string(maps.size()) +
                        " maps cannot cover " + std::to_string(upto_k) + " scales");
    const int H = latent_h(), W = latent_w();
    Tensor acc;
    for (int k = 0; k < upto_k; ++k) {
      const auto& m = maps[(size_t)k];
      auto [hk, wk] = sched.grids[(size_t)k];
      if (m.h != hk || m.w != wk)
        throw ConfigError("partial_reconstruct: map " + std::to_string(k) + " is " +
                          std::to_string(m.h) + "x" + std::to_string(m.w) + ", schedule expects " +
                          std::to_string(hk) + "x" + std::to_string(wk));
      Tensor up = resize_bilinear(reshape(embed_map(m), {1, C, m.h, m.w}), H, W);
      Tensor h_k = reshape(phi(k, up), {C, H, W});
      acc = k == 0 ? h_k : add(acc, h_k);
    }
    return acc;
  }
};

// reconstruction MSE + codebook pull + beta * commitment, straight-through
// into the encoder; returns the step count for the checkpoint
inline int64_t train_codec(Codec& codec, const std::vector<Tensor>& images, const RunConfig& cfg,
                           std::ostream* log) {
  if (images.empty()) throw UsageError("train_codec: empty dataset");
  Rng order_rng(derive_seed(cfg.seed, "codec.order"));
  Rng revive_rng(derive_seed(cfg.seed, "codec.revive"));
  AdamW opt(codec.ps, cfg.weight_decay);
  const int B = cfg.batch_codec;
  std::vector<int> unused((size_t)codec.V, 0);

  for (int step = 0; step < cfg.steps_codec; ++step) {
    std::vector<Tensor> batch;
    for (int i = 0; i < B; ++i)
      batch.push_back(images[(size_t)order_rng.uniform_int((int)images.size())]);
    Tensor imgs = stack_batch(batch);

    Tensor f_cont = codec.encode_batch(imgs);
    std::vector<Tensor> dec_in, vq_terms, commit_terms;
    std::vector<uint8_t> used((size_t)codec.V, 0);
    for (int i = 0; i < B; ++i) {
      Tensor fc = select_batch(f_cont, i);
      auto ms = codec.multiscale_encode(fc);
      for (const auto& m : ms.maps)
        for (int v : m.idx) used[(size_t)v] = 1;
      Tensor fq = ms.pyr.f_quant.back();
      dec_in.push_back(straight_through(fc, detach(fq)));
      vq_terms.push_back(mse_loss(fq, detach(fc)));
      commit_terms.push_back(mse_loss(fc, detach(fq)));
    }
    Tensor recon = codec.decode_batch(stack_batch(dec_in), false);
    Tensor loss = mse_loss(recon, imgs);
    Tensor vq, commit;
    for (int i = 0; i < B; ++i) {
      vq = i == 0 ? vq_terms[(size_t)i] : add(vq, vq_terms[(size_t)i]);
      commit = i == 0 ? commit_terms[(size_t)i] : add(commit, commit_terms[(size_t)i]);
    }
    vq = scale(vq, 1.f / (float)B);
    commit = scale(commit, 1.f / (float)B);
    Tensor total = add(loss, add(vq, scale(commit, cfg.beta_commit)));

    opt.zero_grad();
    backward(total);
    opt.step(cosine_lr(cfg.lr_codec, step, cfg.steps_codec, cfg.warmup_frac, cfg.lr_floor));

    // revive codes unused for too long with a random encoder output token
    {
      NoGrad ng;
      const int hw = codec.latent_h() * codec.latent_w();
      for (int v = 0; v < codec.V; ++v) {
        unused[(size_t)v] = used[(size_t)v] ? 0 : unused[(size_t)v] + 1;
        if (unused[(size_t)v] >= cfg.revive_after) {
          int b = revive_rng.uniform_int(B);
          int p = revive_rng.uniform_int(hw);
          for (int c = 0; c < codec.C; ++c)
            codec.codebook.data()[(size_t)v * codec.C + c] =
                f_cont.data()[(((size_t)b * codec.C + (size_t)c) * (size_t)hw) + (size_t)p];
          unused[(size_t)v] = 0;
        }
      }
    }

    if (log && (step % 50 == 0 || step + 1 == cfg.steps_codec))
      (*log) << "step=" << step << " loss=" << total.item() << " recon=" << loss.item()
             << " vq=" << vq.item() << " commit=" << commit.item() << "\n";
  }
  return cfg.steps_codec;
}

}  // namespace nsr
