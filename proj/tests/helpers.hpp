#pragma once

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <functional>
#include <vector>

#include "nsr/ops.hpp"
#include "nsr/rng.hpp"
#include "nsr/tensor.hpp"

namespace nsrtest {

inline nsr::Tensor rand_tensor(nsr::Shape s, uint64_t seed, bool rg = true, float lo = -1.f,
                               float hi = 1.f) {
  nsr::Rng rng(seed);
  std::vector<float> v((size_t)nsr::numel_of(s));
  rng.fill_uniform(v.data(), v.size(), lo, hi);
  return nsr::Tensor::from(std::move(s), std::move(v), rg);
}

// scalar loss with a distinct upstream gradient at every output position
inline nsr::Tensor weighted_loss(const nsr::Tensor& t, uint64_t seed = 99) {
  nsr::Rng rng(seed);
  std::vector<float> w((size_t)t.numel());
  rng.fill_uniform(w.data(), w.size(), 0.5f, 1.5f);
  auto wt = nsr::Tensor::from(t.shape(), std::move(w), false);
  return nsr::mean_all(nsr::mul(t, wt));
}

// central finite differences against analytic gradients
inline void check_grads(const std::vector<nsr::Tensor>& inputs,
                        const std::function<nsr::Tensor()>& fn, float eps = 1e-3f,
                        float rtol = 1e-3f, float atol = 5e-4f) {
  for (nsr::Tensor in : inputs) {
    REQUIRE(in.requires_grad());
    in.zero_grad();
  }
  nsr::Tensor loss = fn();
  REQUIRE(loss.numel() == 1);
  nsr::backward(loss);

  std::vector<std::vector<float>> analytic;
  for (auto& in : inputs) {
    const float* g = in.grad();
    analytic.emplace_back(g, g + in.numel());
  }

  nsr::NoGrad ng;
  for (size_t i = 0; i < inputs.size(); ++i) {
    nsr::Tensor in = inputs[i];
    float* x = in.data();
    for (int64_t j = 0; j < in.numel(); ++j) {
      float keep = x[j];
      float step = eps * std::max(1.f, std::fabs(keep));
      x[j] = keep + step;
      float lp = fn().item();
      x[j] = keep - step;
      float lm = fn().item();
      x[j] = keep;
      float fd = (lp - lm) / (2.f * step);
      float a = analytic[i][(size_t)j];
      float err = std::fabs(a - fd);
      float bound = atol + rtol * std::max(std::fabs(a), std::fabs(fd));
      INFO("input " << i << " elem " << j << ": analytic " << a << " fd " << fd);
      REQUIRE(err <= bound);
    }
  }
}

}  // namespace nsrtest
