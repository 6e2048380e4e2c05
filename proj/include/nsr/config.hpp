#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include "nsr/schedule.hpp"
#include "nsr/tensor.hpp"

namespace nsr {

// Flat key=value configuration. Every field has a default; unknown keys are
// rejected. Files use one key=value per line with '#' comments.
struct RunConfig {
  // run
  uint64_t seed = 1;           // master seed; stages derive substreams from it
  std::string data_dir = "data";    // dataset root (manifest + images)
  std::string out_dir = "runs";     // checkpoints and reports
  int threads = 1;             // worker cap; RV_THREADS lowers it further
  int image_size = 32;         // square image side
  std::string schedule = "1x1,2x2,4x4,8x8";  // coarse-to-fine quantizer grids

  // autoencoder / quantizer
  int codebook_size = 512;     // vocabulary V
  int latent_dim = 16;         // latent channels C
  int codec_width = 64;        // encoder/decoder hidden channels
  float beta_commit = 0.25f;   // commitment loss weight
  int revive_after = 200;      // steps a code may sit unused before reseeding
  float lr_codec = 1e-3f;
  int steps_codec = 2500;
  int batch_codec = 8;

  // scale-space transformer
  int var_depth = 6;
  int var_dim = 256;
  int var_heads = 8;
  int ffn_mult = 4;            // FFN expansion factor
  float rope_base = 100.0f;    // rotary frequency base, sized for small grids
  int class_count = 1;         // restoration uses a single class token
  int topk = 1;                // 1 = greedy decoding
  float temperature = 1.0f;
  float lr_var = 6e-4f;
  int steps_var = 1500;
  int batch_var = 4;

  // latent refiner
  int lrt_depth = 3;
  int lrt_dim = 64;
  int lrt_heads = 4;
  bool lrt_use_z = true;       // cross-attend to transformer activations
  float lr_lrt = 3e-4f;
  int steps_lrt = 800;
  int batch_lrt = 8;

  // decoder fine-tune
  float lambda_l1 = 2.0f;
  float lambda_ssim = 0.4f;
  float lambda_percep = 0.2f;
  float lambda_adv = 0.01f;
  float lr_ft = 1e-4f;         // generator and discriminator rate
  int steps_ft = 700;
  int batch_ft = 4;

  // optimizer shape shared by all stages
  float weight_decay = 0.01f;
  float warmup_frac = 0.05f;   // fraction of steps spent in linear warmup
  float lr_floor = 0.1f;       // cosine decays to this fraction of base lr

  // dataset
  int train_count = 256;
  int test_count = 64;
  std::string degradations = "noise,blur,darken,haze";  // enabled kinds

  struct Key {
    const char* name;
    char kind;  // i=int f=float u=uint64 s=string b=bool
    void* ptr;
    const char* doc;
  };

  std::vector<Key> keys() {
    return {
        {"seed", 'u', &seed, "master seed; stages derive substreams"},
        {"data_dir", 's', &data_dir, "dataset root"},
        {"out_dir", 's', &out_dir, "checkpoint and report directory"},
        {"threads", 'i', &threads, "worker cap (RV_THREADS lowers it further)"},
        {"image_size", 'i', &image_size, "square image side"},
        {"schedule", 's', &schedule, "comma list of HxW quantizer grids, coarse to fine"},
        {"codebook_size", 'i', &codebook_size, "quantizer vocabulary"},
        {"latent_dim", 'i', &latent_dim, "latent channels"},
        {"codec_width", 'i', &codec_width, "encoder/decoder hidden channels"},
        {"beta_commit", 'f', &beta_commit, "commitment loss weight"},
        {"revive_after", 'i', &revive_after, "unused-code steps before reseeding"},
        {"lr_codec", 'f', &lr_codec, "autoencoder learning rate"},
        {"steps_codec", 'i', &steps_codec, "autoencoder training steps"},
        {"batch_codec", 'i', &batch_codec, "autoencoder batch size"},
        {"var_depth", 'i', &var_depth, "transformer blocks"},
        {"var_dim", 'i', &var_dim, "transformer width"},
        {"var_heads", 'i', &var_heads, "attention heads"},
        {"ffn_mult", 'i', &ffn_mult, "FFN expansion factor"},
        {"rope_base", 'f', &rope_base, "rotary frequency base"},
        {"class_count", 'i', &class_count, "label vocabulary for the start token"},
        {"topk", 'i', &topk, "sampling pool size; 1 is greedy"},
        {"temperature", 'f', &temperature, "sampling temperature"},
        {"lr_var", 'f', &lr_var, "transformer learning rate"},
        {"steps_var", 'i', &steps_var, "transformer training steps"},
        {"batch_var", 'i', &batch_var, "transformer batch size"},
        {"lrt_depth", 'i', &lrt_depth, "refiner blocks"},
        {"lrt_dim", 'i', &lrt_dim, "refiner width"},
        {"lrt_heads", 'i', &lrt_heads, "refiner attention heads"},
        {"lrt_use_z", 'b', &lrt_use_z, "cross-attend to transformer activations"},
        {"lr_lrt", 'f', &lr_lrt, "refiner learning rate"},
        {"steps_lrt", 'i', &steps_lrt, "refiner training steps"},
        {"batch_lrt", 'i', &batch_lrt, "refiner batch size"},
        {"lambda_l1", 'f', &lambda_l1, "fine-tune L1 weight"},
        {"lambda_ssim", 'f', &lambda_ssim, "fine-tune SSIM weight"},
        {"lambda_percep", 'f', &lambda_percep, "fine-tune perceptual weight"},
        {"lambda_adv", 'f', &lambda_adv, "fine-tune adversarial weight"},
        {"lr_ft", 'f', &lr_ft, "fine-tune learning rate (both networks)"},
        {"steps_ft", 'i', &steps_ft, "fine-tune steps"},
        {"batch_ft", 'i', &batch_ft, "fine-tune batch size"},
        {"weight_decay", 'f', &weight_decay, "decoupled weight decay on matrices"},
        {"warmup_frac", 'f', &warmup_frac, "fraction of steps in linear warmup"},
        {"lr_floor", 'f', &lr_floor, "cosine floor as fraction of base lr"},
        {"train_count", 'i', &train_count, "training pairs to generate"},
        {"test_count", 'i', &test_count, "test pairs to generate"},
        {"degradations", 's', &degradations, "comma list of enabled degradation kinds"},
    };
  }

  void set(const std::string& name, const std::string& value) {
    for (auto& k : keys()) {
      if (name != k.name) continue;
      try {
        switch (k.kind) {
          case 'i': *(int*)k.ptr = std::stoi(value); return;
          case 'f': *(float*)k.ptr = std::stof(value); return;
          case 'u': *(uint64_t*)k.ptr = std::stoull(value); return;
          case 's': *(std::string*)k.ptr = value; return;
          case 'b':
            if (value == "true" || value == "1") {
              *(bool*)k.ptr = true;
              return;
            }
            if (value == "false" || value == "0") {
              *(bool*)k.ptr = false;
              return;
            }
            throw ConfigError("config: key '" + name + "' expects true/false, got '" + value + "'");
        }
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception&) {
        throw ConfigError("config: cannot parse value '" + value + "' for key '" + name + "'");
      }
    }
    throw ConfigError("config: unknown key '" + name + "'");
  }

  void load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      size_t hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      size_t a = line.find_first_not_of(" \t\r");
      if (a == std::string::npos) continue;
      size_t b = line.find_last_not_of(" \t\r");
      line = line.substr(a, b - a + 1);
      size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config: " + path + ":" + std::to_string(lineno) + ": expected key=value");
      std::string key = line.substr(0, eq);
      std::string val = line.substr(eq + 1);
      while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
      size_t v0 = val.find_first_not_of(" \t");
      val = v0 == std::string::npos ? "" : val.substr(v0);
      set(key, val);
    }
  }

  std::string format_value(const Key& k) const {
    char buf[64];
    switch (k.kind) {
      case 'i': return std::to_string(*(const int*)k.ptr);
      case 'u': return std::to_string(*(const uint64_t*)k.ptr);
      case 's': return *(const std::string*)k.ptr;
      case 'b': return *(const bool*)k.ptr ? "true" : "false";
      case 'f':
        std::snprintf(buf, sizeof buf, "%.9g", (double)*(const float*)k.ptr);
        return buf;
    }
    return "";
  }

  std::string to_lines() {
    std::string out;
    for (auto& k : keys()) out += std::string(k.name) + "=" + format_value(k) + "\n";
    return out;
  }

  void apply_env() {
    if (const char* e = std::getenv("RV_THREADS")) {
      int v = 0;
      try {
        v = std::stoi(e);
      } catch (const std::exception&) {
        throw ConfigError("RV_THREADS: cannot parse '" + std::string(e) + "'");
      }
      if (v < 1) throw ConfigError("RV_THREADS must be >= 1");
      if (v < threads) threads = v;
    }
  }

  void validate() {
    auto positive = [](const char* n, int64_t v) {
      if (v <= 0) throw ConfigError(std::string("config: ") + n + " must be positive");
    };
    positive("threads", threads);
    positive("image_size", image_size);
    positive("codebook_size", codebook_size);
    positive("latent_dim", latent_dim);
    positive("codec_width", codec_width);
    positive("var_depth", var_depth);
    positive("var_dim", var_dim);
    positive("var_heads", var_heads);
    positive("ffn_mult", ffn_mult);
    positive("class_count", class_count);
    positive("topk", topk);
    positive("lrt_depth", lrt_depth);
    positive("lrt_dim", lrt_dim);
    positive("lrt_heads", lrt_heads);
    positive("train_count", train_count);
    positive("test_count", test_count);
    positive("steps_codec", steps_codec);
    positive("steps_var", steps_var);
    positive("steps_lrt", steps_lrt);
    positive("steps_ft", steps_ft);
    positive("batch_codec", batch_codec);
    positive("batch_var", batch_var);
    positive("batch_lrt", batch_lrt);
    positive("batch_ft", batch_ft);
    if (temperature <= 0.f) throw ConfigError("config: temperature must be positive");
    if (image_size % 4 != 0) throw ConfigError("config: image_size must be divisible by 4");
    if (var_dim % var_heads != 0) throw ConfigError("config: var_dim must divide by var_heads");
    if ((var_dim / var_heads) % 4 != 0)
      throw ConfigError("config: head width must divide by 4 for two-axis rotary pairs");
    if (lrt_dim % lrt_heads != 0) throw ConfigError("config: lrt_dim must divide by lrt_heads");
    if ((lrt_dim / lrt_heads) % 4 != 0)
      throw ConfigError("config: refiner head width must divide by 4");
    auto sch = ScaleSchedule::parse(schedule);
    if (sch.final_h() != image_size / 4 || sch.final_w() != image_size / 4)
      throw ConfigError("config: final schedule grid " + std::to_string(sch.final_h()) + "x" +
                        std::to_string(sch.final_w()) + " must equal the latent grid " +
                        std::to_string(image_size / 4) + "x" + std::to_string(image_size / 4));
    for (float l : {lambda_l1, lambda_ssim, lambda_percep, lambda_adv})
      if (l < 0.f) throw ConfigError("config: loss weights must be nonnegative");
  }
};

}  // namespace nsr
