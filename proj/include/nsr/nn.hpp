#pragma once

#include <string>
#include <utility>
#include <vector>

#include "nsr/ops.hpp"
#include "nsr/rng.hpp"
#include "nsr/tensor.hpp"

namespace nsr {

// Ordered, named parameter registry. Registration order defines checkpoint
// and optimizer traversal order, so it must be deterministic.
struct ParamStore {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor add(const std::string& name, Tensor t) {
    for (auto& [n, _] : items)
      if (n == name) throw UsageError("ParamStore: duplicate parameter " + name);
    items.emplace_back(name, t);
    return t;
  }

  Tensor* find(const std::string& name) {
    for (auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (auto& [_, t] : items) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [_, t] : items) t.zero_grad();
  }

  void set_requires_grad(bool rg) {
    for (auto& [_, t] : items) t.node()->requires_grad = rg;
  }
};

enum class Init { TruncNormal, Kaiming, Zero };

inline Tensor init_param(Shape s, Rng& rng, Init init, int fan_in) {
  std::vector<float> v((size_t)numel_of(s), 0.f);
  switch (init) {
    case Init::TruncNormal: rng.fill_trunc_normal(v.data(), v.size(), 0.02f); break;
    case Init::Kaiming: rng.fill_kaiming(v.data(), v.size(), fan_in); break;
    case Init::Zero: break;
  }
  return Tensor::from(std::move(s), std::move(v), true);
}

struct Linear {
  Tensor w, b;

  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
         Init init = Init::TruncNormal, bool bias = true) {
    w = ps.add(name + ".w", init_param({in, out}, rng, init, in));
    if (bias) b = ps.add(name + ".b", Tensor::zeros({out}, true));
  }

  Tensor operator()(const Tensor& x) const { return b.defined() ? linear(x, w, b) : linear(x, w); }
};

struct Norm {
  Tensor g, b;

  Norm() = default;
  Norm(ParamStore& ps, const std::string& name, int dim) {
    g = ps.add(name + ".g", Tensor::full({dim}, 1.f, true));
    b = ps.add(name + ".b", Tensor::zeros({dim}, true));
  }

  Tensor operator()(const Tensor& x) const { return layernorm(x, g, b); }
};

struct Conv {
  Tensor w, b;
  int stride = 1, pad = 0;

  Conv() = default;
  Conv(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k, int stride_,
       int pad_, Rng& rng, Init init = Init::Kaiming, bool bias = true)
      : stride(stride_), pad(pad_) {
    w = ps.add(name + ".w", init_param({out_ch, in_ch, k, k}, rng, init, in_ch * k * k));
    if (bias) b = ps.add(name + ".b", Tensor::zeros({out_ch}, true));
  }

  Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

struct Embed {
  Tensor table;

  Embed() = default;
  Embed(ParamStore& ps, const std::string& name, int count, int dim, Rng& rng) {
    table = ps.add(name, init_param({count, dim}, rng, Init::TruncNormal, dim));
  }

  Tensor operator()(const std::vector<int>& idx) const { return embedding(table, idx); }
};

}  // namespace nsr
