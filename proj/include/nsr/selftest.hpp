#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "nsr/codec.hpp"
#include "nsr/data.hpp"
#include "nsr/io.hpp"
#include "nsr/metrics.hpp"
#include "nsr/refiner.hpp"
#include "nsr/transformer.hpp"

// Fast invariant checks runnable from the CLI. Each check is independent,
// seeded, and small enough that the whole battery finishes in seconds.

namespace nsr {

struct CheckResult {
  std::string name;
  bool ok = false;
  std::string note;
};

namespace selfcheck {

inline RunConfig tiny_cfg() {
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

inline Tensor rand_image(int size, uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v((size_t)3 * size * size);
  for (auto& x : v) x = rng.uniform();
  return Tensor::from({3, size, size}, std::move(v));
}

// gates and the conditioning summary stay zero so the backbone ignores the
// degraded latent until a check flips them on purpose
inline void randomize_params(ParamStore& ps, uint64_t seed, bool keep_cond_dark) {
  Rng rng(seed);
  for (auto& [name, t] : ps.items) {
    if (keep_cond_dark &&
        (name.find("gate") != std::string::npos || name.find("ctx_proj") != std::string::npos))
      continue;
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-0.08f, 0.08f);
  }
}

inline std::vector<IndexMap> random_maps(const ScaleSchedule& s, int vocab, uint64_t seed) {
  Rng rng(seed);
  std::vector<IndexMap> maps;
  for (int k = 0; k < s.K(); ++k) {
    IndexMap m;
    m.h = s.grids[(size_t)k].first;
    m.w = s.grids[(size_t)k].second;
    m.idx.resize((size_t)m.h * m.w);
    for (auto& i : m.idx) i = rng.uniform_int(vocab);
    maps.push_back(std::move(m));
  }
  return maps;
}

// central finite differences against reverse-mode gradients
inline bool grads_match(std::vector<Tensor> leaves, const std::function<Tensor()>& make_loss,
                        std::string& note) {
  for (auto& l : leaves) l.node()->requires_grad = true;
  Tensor loss = make_loss();
  backward(loss);
  std::vector<std::vector<float>> analytic;
  for (auto& l : leaves) analytic.push_back(l.grad_vec());
  NoGrad ng;
  const float eps = 1e-3f;
  for (size_t li = 0; li < leaves.size(); ++li) {
    Tensor l = leaves[li];
    for (int64_t i = 0; i < l.numel(); ++i) {
      float keep = l.data()[i];
      l.data()[i] = keep + eps;
      float up = make_loss().item();
      l.data()[i] = keep - eps;
      float dn = make_loss().item();
      l.data()[i] = keep;
      float fd = (up - dn) / (2.f * eps);
      float an = analytic[li][(size_t)i];
      float err = std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-2f});
      if (err > 3e-2f) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "leaf %zu elem %lld: fd %.6g vs grad %.6g", li,
                      (long long)i, fd, an);
        note = buf;
        return false;
      }
    }
  }
  return true;
}

}  // namespace selfcheck

inline std::vector<CheckResult> run_selftest(std::ostream& log) {
  using namespace selfcheck;
  std::vector<std::pair<std::string, std::function<bool(std::string&)>>> checks;

  checks.emplace_back("matmul agrees with a naive triple loop", [](std::string& note) {
    Rng rng(3);
    Tensor a = Tensor::zeros({7, 5}), b = Tensor::zeros({5, 6});
    for (int64_t i = 0; i < a.numel(); ++i) a.data()[i] = rng.uniform(-1.f, 1.f);
    for (int64_t i = 0; i < b.numel(); ++i) b.data()[i] = rng.uniform(-1.f, 1.f);
    NoGrad ng;
    Tensor c = matmul(a, b);
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 6; ++j) {
        float ref = 0.f;
        for (int k = 0; k < 5; ++k) ref += a.data()[i * 5 + k] * b.data()[k * 6 + j];
        if (std::fabs(ref - c.data()[i * 6 + j]) > 1e-5f) {
          note = "mismatch at " + std::to_string(i) + "," + std::to_string(j);
          return false;
        }
      }
    return true;
  });

  checks.emplace_back("elementwise gradients match finite differences", [](std::string& note) {
    Rng rng(5);
    Tensor x = Tensor::zeros({3, 4}), y = Tensor::zeros({3, 4});
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = rng.uniform(-1.f, 1.f);
    for (int64_t i = 0; i < y.numel(); ++i) y.data()[i] = rng.uniform(0.5f, 2.f);
    return grads_match({x, y}, [&] { return mean_all(mul(div(x, y), gelu(x))); }, note);
  });

  checks.emplace_back("convolution gradients match finite differences", [](std::string& note) {
    Rng rng(7);
    Tensor x = Tensor::zeros({1, 2, 5, 5}), w = Tensor::zeros({3, 2, 3, 3});
    Tensor b = Tensor::zeros({3});
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = rng.uniform(-1.f, 1.f);
    for (int64_t i = 0; i < w.numel(); ++i) w.data()[i] = rng.uniform(-0.5f, 0.5f);
    for (int64_t i = 0; i < b.numel(); ++i) b.data()[i] = rng.uniform(-0.2f, 0.2f);
    return grads_match({x, w, b},
                       [&] { return mean_all(gelu(conv2d(x, w, b, 2, 1))); }, note);
  });

  checks.emplace_back("layer norm gradients match finite differences", [](std::string& note) {
    Rng rng(9);
    Tensor x = Tensor::zeros({4, 8}), g = Tensor::zeros({8}), b = Tensor::zeros({8});
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = rng.uniform(-2.f, 2.f);
    for (int64_t i = 0; i < g.numel(); ++i) g.data()[i] = rng.uniform(0.5f, 1.5f);
    for (int64_t i = 0; i < b.numel(); ++i) b.data()[i] = rng.uniform(-0.3f, 0.3f);
    return grads_match({x, g, b}, [&] { return mean_all(mul(layernorm(x, g, b), x)); }, note);
  });

  checks.emplace_back("cross entropy at uniform logits equals log vocab", [](std::string& note) {
    NoGrad ng;
    Tensor logits = Tensor::zeros({5, 8});
    float ce = cross_entropy(logits, {0, 3, 7, 2, 5}).item();
    float want = std::log(8.f);
    if (std::fabs(ce - want) > 1e-5f) {
      note = "ce " + std::to_string(ce) + " vs " + std::to_string(want);
      return false;
    }
    return true;
  });

  checks.emplace_back("rotary embedding preserves row norms", [](std::string& note) {
    auto cfg = tiny_cfg();
    auto tc = TransformerConfig::from(cfg);
    auto pos = sequence_positions(tc.sched);
    auto tab = make_rope_tables(pos, tc.head_dim(), tc.rope_base);
    Rng rng(11);
    Tensor x = Tensor::zeros({(int)pos.size(), tc.dim});
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = rng.uniform(-1.f, 1.f);
    NoGrad ng;
    Tensor y = rope_apply(x, tab.cos_t, tab.sin_t, tc.heads);
    for (int s = 0; s < (int)pos.size(); ++s) {
      double nx = 0, ny = 0;
      for (int d = 0; d < tc.dim; ++d) {
        nx += (double)x.data()[s * tc.dim + d] * x.data()[s * tc.dim + d];
        ny += (double)y.data()[s * tc.dim + d] * y.data()[s * tc.dim + d];
      }
      if (std::fabs(std::sqrt(nx) - std::sqrt(ny)) > 1e-4) {
        note = "row " + std::to_string(s);
        return false;
      }
    }
    return true;
  });

  checks.emplace_back("later scales cannot reach earlier positions", [](std::string& note) {
    auto cfg = tiny_cfg();
    Rng cr(21), vr(22);
    Codec codec(cfg, cr);
    VarModel var(TransformerConfig::from(cfg), vr);
    randomize_params(var.ps, 31, true);
    Tensor cond = codec.encode_continuous(rand_image(cfg.image_size, 41));
    auto maps = random_maps(var.tc.sched, var.tc.vocab, 51);
    NoGrad ng;
    auto base = var.forward_maps(codec, maps, cond);
    auto bumped_maps = maps;
    for (auto& i : bumped_maps[1].idx) i = (i + 1) % var.tc.vocab;
    auto bumped = var.forward_maps(codec, bumped_maps, cond);
    const int D = var.tc.vocab;
    int guard = var.block_start[2];  // rows before the first block that sees scale 2
    for (int r = 0; r < guard; ++r)
      for (int c = 0; c < D; ++c)
        if (base.logits.data()[r * D + c] != bumped.logits.data()[r * D + c]) {
          note = "early row " + std::to_string(r) + " moved";
          return false;
        }
    bool later_moved = false;
    for (int64_t i = (int64_t)guard * D; i < base.logits.numel(); ++i)
      if (base.logits.data()[i] != bumped.logits.data()[i]) later_moved = true;
    if (!later_moved) note = "perturbation never reached later rows";
    return later_moved;
  });

  checks.emplace_back("cached generation matches full recompute", [](std::string& note) {
    auto cfg = tiny_cfg();
    Rng cr(61), vr(62);
    Codec codec(cfg, cr);
    VarModel var(TransformerConfig::from(cfg), vr);
    randomize_params(var.ps, 63, false);
    Tensor cond = codec.encode_continuous(rand_image(cfg.image_size, 64));
    Rng sr(65);
    auto gen = var.infer(codec, cond, Sampling{}, sr);
    NoGrad ng;
    auto full = var.forward_maps(codec, gen.maps, cond);
    Tensor full_block = slice_rows(full.logits, 1, var.tc.seq_len());
    for (int64_t i = 0; i < full_block.numel(); ++i)
      if (std::fabs(full_block.data()[i] - gen.block_logits.data()[i]) > 1e-4f) {
        note = "logits drift between the two paths";
        return false;
      }
    for (int64_t i = 0; i < gen.z.numel(); ++i)
      if (std::fabs(gen.z.data()[i] - full.z.data()[i]) > 1e-4f) {
        note = "summary row drift";
        return false;
      }
    return true;
  });

  checks.emplace_back("zero gates hide the conditioning branch", [](std::string& note) {
    auto cfg = tiny_cfg();
    Rng cr(71), vr(72);
    Codec codec(cfg, cr);
    VarModel var(TransformerConfig::from(cfg), vr);
    randomize_params(var.ps, 73, true);
    Tensor cond_a = codec.encode_continuous(rand_image(cfg.image_size, 74));
    Tensor cond_b = codec.encode_continuous(rand_image(cfg.image_size, 75));
    auto maps = random_maps(var.tc.sched, var.tc.vocab, 76);
    NoGrad ng;
    auto a = var.forward_maps(codec, maps, cond_a);
    auto b = var.forward_maps(codec, maps, cond_b);
    for (int64_t i = 0; i < a.logits.numel(); ++i)
      if (a.logits.data()[i] != b.logits.data()[i]) {
        note = "condition leaked through zero gates";
        return false;
      }
    for (auto& [name, t] : var.ps.items)
      if (name.find("gate") != std::string::npos) t.data()[0] = 0.05f;
    auto a2 = var.forward_maps(codec, maps, cond_a);
    auto b2 = var.forward_maps(codec, maps, cond_b);
    bool moved = false;
    for (int64_t i = 0; i < a2.logits.numel(); ++i)
      if (a2.logits.data()[i] != b2.logits.data()[i]) moved = true;
    if (!moved) note = "open gates still ignore the condition";
    return moved;
  });

  checks.emplace_back("residual quantizer telescopes", [](std::string& note) {
    auto cfg = tiny_cfg();
    Rng cr(81);
    Codec codec(cfg, cr);
    NoGrad ng;
    Tensor f_cont = codec.encode_continuous(rand_image(cfg.image_size, 82));
    auto ms = codec.multiscale_encode(f_cont);
    Tensor sum = add(ms.pyr.f_quant.back(), ms.pyr.f_res.back());
    for (int64_t i = 0; i < f_cont.numel(); ++i)
      if (std::fabs(sum.data()[i] - f_cont.data()[i]) > 1e-5f) {
        note = "quantized plus residual drifted from the input";
        return false;
      }
    Tensor rec = codec.partial_reconstruct(ms.maps, codec.sched.K());
    for (int64_t i = 0; i < rec.numel(); ++i)
      if (std::fabs(rec.data()[i] - ms.pyr.f_quant.back().data()[i]) > 1e-6f) {
        note = "index reconstruction drifted from the running sum";
        return false;
      }
    return true;
  });

  checks.emplace_back("untrained refiner is an exact identity", [](std::string& note) {
    auto cfg = tiny_cfg();
    Rng cr(91), vr(92), rr(93);
    Codec codec(cfg, cr);
    VarModel var(TransformerConfig::from(cfg), vr);
    Refiner ref(RefinerConfig::from(cfg), rr);
    auto ex = make_refine_example(codec, var, rand_image(cfg.image_size, 94),
                                  rand_image(cfg.image_size, 95));
    NoGrad ng;
    Tensor out = ref.refine(ex.f_quant, ex.z);
    for (int64_t i = 0; i < out.numel(); ++i)
      if (out.data()[i] != ex.f_quant.data()[i]) {
        note = "output differs from input at init";
        return false;
      }
    return true;
  });

  checks.emplace_back("structural similarity of an image with itself is one", [](std::string& note) {
    Tensor x = rand_image(16, 101);
    NoGrad ng;
    float v = ssim(x, x).item();
    if (v != 1.0f) {
      note = "got " + std::to_string(v);
      return false;
    }
    return true;
  });

  checks.emplace_back("peak signal-to-noise ratio saturates at the cap", [](std::string& note) {
    Tensor x = rand_image(16, 102);
    double v = psnr(x, x);
    if (v != 99.0) {
      note = "got " + std::to_string(v);
      return false;
    }
    Tensor y = rand_image(16, 103);
    if (psnr(x, y) != psnr(y, x)) {
      note = "not symmetric";
      return false;
    }
    return true;
  });

  checks.emplace_back("checkpoints round trip bit for bit", [](std::string& note) {
    auto cfg = tiny_cfg();
    Rng ar(111), br(112);
    Codec a(cfg, ar), b(cfg, br);
    std::string path = "selftest_ckpt.bin";
    save_store(path, "RVC1", 7, 42, "", a.ps);
    load_store(path, "RVC1", b.ps);
    std::remove(path.c_str());
    if (hash_store(a.ps) != hash_store(b.ps)) {
      note = "weights changed across save/load";
      return false;
    }
    return true;
  });

  checks.emplace_back("degradations are deterministic and bounded", [](std::string& note) {
    Rng gr(121);
    Tensor x = generate_clean_one(16, gr);
    for (const char* kind : {"noise", "blur", "darken", "haze"}) {
      auto spec = sample_spec(kind, 122);
      Tensor a = degrade(x, spec), b = degrade(x, spec);
      for (int64_t i = 0; i < a.numel(); ++i) {
        if (a.data()[i] != b.data()[i]) {
          note = std::string(kind) + " not deterministic";
          return false;
        }
        if (a.data()[i] < 0.f || a.data()[i] > 1.f) {
          note = std::string(kind) + " out of range";
          return false;
        }
      }
    }
    DegradationSpec id;
    id.kind = "noise";
    id.params = {{"sigma", 0.f}};
    id.seed = 5;
    Tensor same = degrade(x, id);
    for (int64_t i = 0; i < x.numel(); ++i)
      if (same.data()[i] != x.data()[i]) {
        note = "zero-strength noise is not the identity";
        return false;
      }
    return true;
  });

  std::vector<CheckResult> results;
  for (auto& [name, fn] : checks) {
    CheckResult r;
    r.name = name;
    try {
      r.ok = fn(r.note);
    } catch (const std::exception& e) {
      r.ok = false;
      r.note = e.what();
    }
    log << (r.ok ? "PASS " : "FAIL ") << r.name;
    if (!r.ok && !r.note.empty()) log << " (" << r.note << ")";
    log << "\n";
    results.push_back(std::move(r));
  }
  int failed = 0;
  for (auto& r : results)
    if (!r.ok) ++failed;
  log << "selftest: " << (results.size() - (size_t)failed) << "/" << results.size()
      << " checks passed\n";
  return results;
}

}  // namespace nsr
