#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

// Deterministic randomness. The mt19937 engine is fully specified by the
// standard; distributions are hand-rolled because stdlib ones are not.

namespace nsr {

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_((std::mt19937::result_type)(seed & 0xffffffffu)) {}

  uint32_t next_u32() { return eng_(); }

  // [0,1) with 24 bits of mantissa
  float uniform() { return (float)(eng_() >> 8) * (1.0f / 16777216.0f); }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  // [0,n)
  int uniform_int(int n) {
    return (int)(((uint64_t)eng_() * (uint64_t)n) >> 32);
  }

  float normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    float u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 1e-12f);
    u2 = uniform();
    float r = std::sqrt(-2.f * std::log(u1));
    float a = 6.2831853071795864f * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  float normal(float mean, float stddev) { return mean + stddev * normal(); }

  // resample outside two standard deviations
  float trunc_normal(float stddev) {
    float x;
    do {
      x = normal() * stddev;
    } while (std::fabs(x) > 2.f * stddev);
    return x;
  }

  void fill_normal(float* p, size_t n, float stddev) {
    for (size_t i = 0; i < n; ++i) p[i] = normal() * stddev;
  }

  void fill_trunc_normal(float* p, size_t n, float stddev) {
    for (size_t i = 0; i < n; ++i) p[i] = trunc_normal(stddev);
  }

  void fill_uniform(float* p, size_t n, float lo, float hi) {
    for (size_t i = 0; i < n; ++i) p[i] = uniform(lo, hi);
  }

  // He init for a conv/linear weight with the given fan-in
  void fill_kaiming(float* p, size_t n, int fan_in) {
    float s = std::sqrt(2.f / (float)fan_in);
    fill_normal(p, n, s);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = (size_t)uniform_int((int)i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937 eng_;
  float spare_ = 0.f;
  bool have_spare_ = false;
};

// stable substream seed from a base seed and a label
inline uint64_t derive_seed(uint64_t base, const std::string& tag) {
  uint64_t h = 1469598103934665603ull ^ base;
  h *= 1099511628211ull;
  for (char c : tag) {
    h ^= (uint64_t)(uint8_t)c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace nsr
