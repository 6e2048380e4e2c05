#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "nsr/config.hpp"
#include "nsr/io.hpp"
#include "nsr/rng.hpp"
#include "nsr/tensor.hpp"

// Procedural toy dataset: clean scenes from gradients, anti-aliased shapes,
// and band-limited textures, plus four synthetic degradations. Everything is
// deterministic under the run seed.

namespace nsr {

// parameter ranges sampled by gen_dataset:
//   noise   sigma in [0.05, 0.20]   additive Gaussian, clamped
//   blur    k in {3, 5}             Gaussian kernel, sigma = k/3, replicate edges
//   darken  gamma in [1.6, 3.0]     I^gamma
//   haze    t in [0.40, 0.75], airlight a in [0.75, 1.0]   I*t + (1-t)*a
struct DegradationSpec {
  std::string kind;
  std::vector<std::pair<std::string, float>> params;
  uint64_t seed = 0;

  float param(const std::string& name) const {
    for (auto& [k, v] : params)
      if (k == name) return v;
    throw ConfigError("degradation '" + kind + "' missing parameter '" + name + "'");
  }

  std::string params_str() const {
    std::ostringstream os;
    char buf[32];
    for (size_t i = 0; i < params.size(); ++i) {
      if (i) os << ",";
      std::snprintf(buf, sizeof(buf), "%.9g", (double)params[i].second);
      os << params[i].first << "=" << buf;
    }
    return os.str();
  }

  static DegradationSpec parse(const std::string& kind, const std::string& text, uint64_t seed) {
    DegradationSpec s;
    s.kind = kind;
    s.seed = seed;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
      auto eq = item.find('=');
      if (eq == std::string::npos)
        throw ConfigError("malformed degradation parameter '" + item + "'");
      s.params.emplace_back(item.substr(0, eq), std::stof(item.substr(eq + 1)));
    }
    return s;
  }
};

namespace detail {

inline float clamp01(float v) { return v < 0.f ? 0.f : (v > 1.f ? 1.f : v); }

inline Tensor gaussian_blur(const Tensor& img, int k) {
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const float sigma = (float)k / 3.f;
  std::vector<float> kern((size_t)k);
  float sum = 0.f;
  for (int i = 0; i < k; ++i) {
    float d = (float)i - (float)(k - 1) / 2.f;
    kern[(size_t)i] = std::exp(-d * d / (2.f * sigma * sigma));
    sum += kern[(size_t)i];
  }
  for (auto& v : kern) v /= sum;

  auto clampi = [](int v, int hi) { return v < 0 ? 0 : (v >= hi ? hi - 1 : v); };
  std::vector<float> tmp((size_t)C * H * W), out((size_t)C * H * W);
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        float s = 0.f;
        for (int t = 0; t < k; ++t)
          s += kern[(size_t)t] * img.data()[((size_t)c * H + i) * W + clampi(j + t - k / 2, W)];
        tmp[((size_t)c * H + i) * W + j] = s;
      }
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        float s = 0.f;
        for (int t = 0; t < k; ++t)
          s += kern[(size_t)t] * tmp[((size_t)c * H + clampi(i + t - k / 2, H)) * W + j];
        out[((size_t)c * H + i) * W + j] = s;
      }
  return Tensor::from(img.shape(), std::move(out));
}

}  // namespace detail

inline Tensor degrade(const Tensor& clean, const DegradationSpec& spec) {
  if (clean.ndim() != 3) throw ShapeError("degrade: expected [CxHxW] image");
  Rng rng(spec.seed);
  std::vector<float> v(clean.vec());

  if (spec.kind == "noise") {
    const float sigma = spec.param("sigma");
    for (auto& x : v) x = detail::clamp01(x + sigma * rng.normal());
    return Tensor::from(clean.shape(), std::move(v));
  }
  if (spec.kind == "blur") {
    const int k = (int)spec.param("k");
    if (k < 1 || k % 2 == 0) throw ConfigError("blur kernel must be odd and positive");
    if (k == 1) return Tensor::from(clean.shape(), std::move(v));
    Tensor b = detail::gaussian_blur(clean, k);
    for (auto& x : b.vec()) x = detail::clamp01(x);
    return b;
  }
  if (spec.kind == "darken") {
    const float gamma = spec.param("gamma");
    if (gamma <= 0.f) throw ConfigError("darken gamma must be positive");
    if (gamma != 1.f)
      for (auto& x : v) x = detail::clamp01(std::pow(x, gamma));
    return Tensor::from(clean.shape(), std::move(v));
  }
  if (spec.kind == "haze") {
    const float t = spec.param("t"), a = spec.param("a");
    for (auto& x : v) x = detail::clamp01(t * x + (1.f - t) * a);
    return Tensor::from(clean.shape(), std::move(v));
  }
  throw ConfigError("unknown degradation kind '" + spec.kind + "'");
}

inline DegradationSpec sample_spec(const std::string& kind, uint64_t seed) {
  Rng rng(derive_seed(seed, "params"));
  DegradationSpec s;
  s.kind = kind;
  s.seed = derive_seed(seed, "noise-draws");
  if (kind == "noise") {
    s.params.emplace_back("sigma", rng.uniform(0.05f, 0.20f));
  } else if (kind == "blur") {
    s.params.emplace_back("k", rng.uniform() < 0.5f ? 3.f : 5.f);
  } else if (kind == "darken") {
    s.params.emplace_back("gamma", rng.uniform(1.6f, 3.0f));
  } else if (kind == "haze") {
    s.params.emplace_back("t", rng.uniform(0.40f, 0.75f));
    s.params.emplace_back("a", rng.uniform(0.75f, 1.0f));
  } else {
    throw ConfigError("unknown degradation kind '" + kind + "'");
  }
  return s;
}

// one procedural scene: gradient base, a few soft shapes, low-frequency texture
inline Tensor generate_clean_one(int size, Rng& rng) {
  const int S = size;
  std::vector<float> img((size_t)3 * S * S);

  float gx = rng.uniform(-1.f, 1.f), gy = rng.uniform(-1.f, 1.f);
  float norm = std::sqrt(gx * gx + gy * gy) + 1e-6f;
  gx /= norm;
  gy /= norm;
  float col_a[3], col_b[3];
  for (int c = 0; c < 3; ++c) {
    col_a[c] = rng.uniform(0.25f, 0.75f);
    col_b[c] = rng.uniform(0.25f, 0.75f);
  }
  for (int i = 0; i < S; ++i)
    for (int j = 0; j < S; ++j) {
      float u = ((float)j / (float)(S - 1) - 0.5f) * gx + ((float)i / (float)(S - 1) - 0.5f) * gy;
      float w = u + 0.5f;
      w = w < 0.f ? 0.f : (w > 1.f ? 1.f : w);
      for (int c = 0; c < 3; ++c)
        img[((size_t)c * S + i) * S + j] = col_a[c] + (col_b[c] - col_a[c]) * w;
    }

  const int shapes = 1 + rng.uniform_int(3);
  for (int n = 0; n < shapes; ++n) {
    float cx = rng.uniform(0.2f, 0.8f) * (float)S;
    float cy = rng.uniform(0.2f, 0.8f) * (float)S;
    float r = rng.uniform(0.12f, 0.3f) * (float)S;
    bool disk = rng.uniform() < 0.5f;
    float col[3];
    for (int c = 0; c < 3; ++c) col[c] = rng.uniform(0.1f, 0.9f);
    for (int i = 0; i < S; ++i)
      for (int j = 0; j < S; ++j) {
        float dx = (float)j - cx, dy = (float)i - cy;
        float d = disk ? std::sqrt(dx * dx + dy * dy) - r
                       : std::max(std::fabs(dx), std::fabs(dy)) - r;
        float alpha = 1.f / (1.f + std::exp(d * 2.f));  // soft edge, ~1px falloff
        if (alpha < 1e-3f) continue;
        for (int c = 0; c < 3; ++c) {
          float& p = img[((size_t)c * S + i) * S + j];
          p = p + (col[c] - p) * alpha;
        }
      }
  }

  const int waves = 2 + rng.uniform_int(3);
  for (int n = 0; n < waves; ++n) {
    float fx = rng.uniform(1.f, 4.f), fy = rng.uniform(1.f, 4.f);
    float phase = rng.uniform(0.f, 6.2831853f);
    float amp = rng.uniform(0.02f, 0.06f);
    int ch = rng.uniform_int(3);
    for (int i = 0; i < S; ++i)
      for (int j = 0; j < S; ++j)
        img[((size_t)ch * S + i) * S + j] +=
            amp * std::sin(6.2831853f * (fx * (float)j + fy * (float)i) / (float)S + phase);
  }

  for (auto& v : img) v = detail::clamp01(v);
  return Tensor::from({3, S, S}, std::move(img));
}

inline std::vector<Tensor> generate_clean(int n, int size, uint64_t seed) {
  std::vector<Tensor> out;
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, "img." + std::to_string(i)));
    out.push_back(generate_clean_one(size, rng));
  }
  return out;
}

struct ManifestEntry {
  std::string split, clean_path, deg_path;
  DegradationSpec spec;
};

inline void save_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& e : entries)
    out << e.split << "\t" << e.clean_path << "\t" << e.deg_path << "\t" << e.spec.kind << "\t"
        << e.spec.params_str() << "\t" << e.spec.seed << "\n";
  if (!out) throw IoError("write failed for " + path);
}

inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string split, clean, deg, kind, params, seed;
    if (!std::getline(ls, split, '\t') || !std::getline(ls, clean, '\t') ||
        !std::getline(ls, deg, '\t') || !std::getline(ls, kind, '\t') ||
        !std::getline(ls, params, '\t') || !std::getline(ls, seed))
      throw IoError(path + ":" + std::to_string(lineno) + ": malformed manifest line");
    ManifestEntry e;
    e.split = split;
    e.clean_path = clean;
    e.deg_path = deg;
    e.spec = DegradationSpec::parse(kind, params, std::stoull(seed));
    entries.push_back(std::move(e));
  }
  return entries;
}

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// writes clean/degraded PPM pairs and the manifest under cfg.data_dir
inline std::vector<ManifestEntry> gen_dataset(const RunConfig& cfg) {
  auto kinds = split_csv(cfg.degradations);
  if (kinds.empty()) throw ConfigError("no degradation kinds enabled");
  std::filesystem::create_directories(cfg.data_dir);

  std::vector<ManifestEntry> entries;
  auto emit = [&](const std::string& split, int count, uint64_t salt) {
    for (int i = 0; i < count; ++i) {
      uint64_t img_seed = derive_seed(cfg.seed, split + ".img." + std::to_string(i));
      Rng rng(img_seed);
      Tensor clean = generate_clean_one(cfg.image_size, rng);
      const std::string& kind = kinds[(size_t)i % kinds.size()];
      DegradationSpec spec =
          sample_spec(kind, derive_seed(cfg.seed, split + ".spec." + std::to_string(i) +
                                                      "." + std::to_string(salt)));
      Tensor deg = degrade(clean, spec);

      char base[64];
      std::snprintf(base, sizeof(base), "%s_%04d", split.c_str(), i);
      ManifestEntry e;
      e.split = split;
      e.clean_path = cfg.data_dir + "/" + base + "_clean.ppm";
      e.deg_path = cfg.data_dir + "/" + base + "_deg.ppm";
      e.spec = spec;
      write_ppm(e.clean_path, clean);
      write_ppm(e.deg_path, deg);
      entries.push_back(std::move(e));
    }
  };
  emit("train", cfg.train_count, 1);
  emit("test", cfg.test_count, 2);
  save_manifest(cfg.data_dir + "/manifest.tsv", entries);
  return entries;
}

}  // namespace nsr
