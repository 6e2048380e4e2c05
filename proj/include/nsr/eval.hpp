#pragma once

#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "nsr/codec.hpp"
#include "nsr/data.hpp"
#include "nsr/metrics.hpp"
#include "nsr/refiner.hpp"
#include "nsr/transformer.hpp"

// End-to-end restoration: degraded image -> continuous latent -> scale-by-
// scale index prediction -> latent refinement -> decode. Evaluation groups
// full-reference metrics per degradation kind.

namespace nsr {

enum class RefinerMode { None, Lrt, LrtNoZ };

inline RefinerMode parse_refiner_mode(const std::string& s) {
  if (s == "none") return RefinerMode::None;
  if (s == "lrt") return RefinerMode::Lrt;
  if (s == "lrt_noz") return RefinerMode::LrtNoZ;
  throw ConfigError("unknown refiner variant '" + s + "' (expected none, lrt, or lrt_noz)");
}

inline std::string refiner_mode_name(RefinerMode m) {
  switch (m) {
    case RefinerMode::None: return "none";
    case RefinerMode::Lrt: return "lrt";
    default: return "lrt_noz";
  }
}

struct Pipeline {
  Codec codec;
  VarModel var;
  Refiner refiner;
  RefinerMode mode = RefinerMode::None;
  Sampling smp;
};

// one image through the full inference path; log receives one line per scale
inline Tensor restore_image(const Pipeline& p, const Tensor& deg, Rng& rng,
                            std::ostream* log = nullptr) {
  NoGrad ng;
  Tensor f_deg = p.codec.encode_continuous(deg);
  auto gen = p.var.infer(p.codec, f_deg, p.smp, rng, log);
  Tensor f_hat = p.codec.partial_reconstruct(gen.maps, p.codec.sched.K());
  if (p.mode != RefinerMode::None) f_hat = p.refiner.refine(f_hat, gen.z);
  return p.codec.decode_image(f_hat);
}

struct EvalRow {
  std::string kind;
  int count = 0;
  double psnr = 0.0, ssim = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;  // per kind, first-appearance order
  EvalRow mean;               // kind = "mean", count = total

  std::string csv() const {
    std::string out = "kind,count,psnr,ssim\n";
    char buf[128];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%s,%d,%.4f,%.4f\n", r.kind.c_str(), r.count, r.psnr, r.ssim);
      out += buf;
    }
    std::snprintf(buf, sizeof(buf), "mean,%d,%.4f,%.4f\n", mean.count, mean.psnr, mean.ssim);
    out += buf;
    return out;
  }
};

// restore_fn maps a degraded image to a restored one; split selects manifest
// entries (normally "test")
inline EvalReport evaluate_entries(const std::vector<ManifestEntry>& entries,
                                   const std::string& split,
                                   const std::function<Tensor(const Tensor&)>& restore_fn) {
  EvalReport rep;
  bool any = false;
  for (const auto& e : entries) {
    if (e.split != split) continue;
    any = true;
    Tensor clean = read_ppm(e.clean_path);
    Tensor deg = read_ppm(e.deg_path);
    Tensor out = restore_fn(deg);
    double p = psnr(out, clean);
    double s;
    {
      NoGrad ng;
      s = (double)ssim(out, clean).item();
    }
    EvalRow* row = nullptr;
    for (auto& r : rep.rows)
      if (r.kind == e.spec.kind) row = &r;
    if (!row) {
      rep.rows.push_back(EvalRow{e.spec.kind, 0, 0.0, 0.0});
      row = &rep.rows.back();
    }
    row->count += 1;
    row->psnr += p;
    row->ssim += s;
    rep.mean.count += 1;
    rep.mean.psnr += p;
    rep.mean.ssim += s;
  }
  if (!any) throw UsageError("evaluate: no '" + split + "' entries in the manifest");
  for (auto& r : rep.rows) {
    r.psnr /= r.count;
    r.ssim /= r.count;
  }
  rep.mean.kind = "mean";
  rep.mean.psnr /= rep.mean.count;
  rep.mean.ssim /= rep.mean.count;
  return rep;
}

inline EvalReport evaluate_pipeline(const Pipeline& p, const std::vector<ManifestEntry>& entries,
                                    uint64_t seed, const std::string& split = "test") {
  int index = 0;
  return evaluate_entries(entries, split, [&](const Tensor& deg) {
    Rng rng(derive_seed(seed, "restore." + std::to_string(index++)));
    return restore_image(p, deg, rng);
  });
}

}  // namespace nsr
