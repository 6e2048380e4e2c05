#pragma once

#include <cmath>
#include <vector>

#include "nsr/nn.hpp"
#include "nsr/tensor.hpp"

namespace nsr {

// Adam with decoupled weight decay. Decay applies only to matrices and
// convolution kernels; vectors (biases, norm affines, gates) are exempt.
class AdamW {
 public:
  float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f, weight_decay = 0.01f;

  explicit AdamW(ParamStore& ps, float wd = 0.01f) : weight_decay(wd), ps_(&ps) {
    slots_.resize(ps.items.size());
    for (size_t i = 0; i < ps.items.size(); ++i) {
      size_t n = (size_t)ps.items[i].second.numel();
      slots_[i].m.assign(n, 0.f);
      slots_[i].v.assign(n, 0.f);
    }
  }

  void step(float lr) {
    ++t_;
    float bc1 = 1.f - std::pow(beta1, (float)t_);
    float bc2 = 1.f - std::pow(beta2, (float)t_);
    for (size_t i = 0; i < ps_->items.size(); ++i) {
      Tensor& p = ps_->items[i].second;
      const float* g = p.grad();
      float* x = p.data();
      auto& m = slots_[i].m;
      auto& v = slots_[i].v;
      bool decay = p.ndim() >= 2;
      for (size_t j = 0; j < m.size(); ++j) {
        m[j] = beta1 * m[j] + (1.f - beta1) * g[j];
        v[j] = beta2 * v[j] + (1.f - beta2) * g[j] * g[j];
        float mh = m[j] / bc1;
        float vh = v[j] / bc2;
        float upd = mh / (std::sqrt(vh) + eps);
        if (decay) upd += weight_decay * x[j];
        x[j] -= lr * upd;
      }
    }
  }

  void zero_grad() { ps_->zero_grads(); }
  int64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    std::vector<float> m, v;
  };
  ParamStore* ps_;
  std::vector<Slot> slots_;
  int64_t t_ = 0;
};

// linear warmup then cosine decay to a floor fraction of the base rate
inline float cosine_lr(float base, int64_t step, int64_t total, float warmup_frac = 0.05f,
                       float floor_frac = 0.1f) {
  if (total <= 0) return base;
  int64_t warm = (int64_t)((double)total * warmup_frac);
  if (warm > 0 && step < warm) return base * (float)(step + 1) / (float)warm;
  double t = (double)(step - warm) / (double)std::max<int64_t>(1, total - warm);
  if (t > 1.0) t = 1.0;
  double c = 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
  return base * (float)(floor_frac + (1.0 - floor_frac) * c);
}

}  // namespace nsr
