#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "nsr/kernels.hpp"
#include "nsr/tensor.hpp"

// Differentiable operations. Forward values are float32 with per-element
// accumulation in fixed order; see kernels.hpp.

namespace nsr {

namespace detail {
inline float sigmoid_f(float x) {
  return x >= 0 ? 1.f / (1.f + std::exp(-x)) : std::exp(x) / (1.f + std::exp(x));
}
// tanh-form gelu
inline float gelu_f(float x) {
  const float c = 0.7978845608028654f;  // sqrt(2/pi)
  float t = std::tanh(c * (x + 0.044715f * x * x * x));
  return 0.5f * x * (1.f + t);
}
inline float gelu_df(float x) {
  const float c = 0.7978845608028654f;
  float u = c * (x + 0.044715f * x * x * x);
  float t = std::tanh(u);
  float du = c * (1.f + 3.f * 0.044715f * x * x);
  return 0.5f * (1.f + t) + 0.5f * x * (1.f - t * t) * du;
}
inline float softplus_f(float x) { return x > 20.f ? x : std::log1p(std::exp(std::min(x, 20.f))); }
}  // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a.shape(), b.shape());
  std::vector<float> v(a.vec());
  const float* pb = b.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] += pb[i];
  auto an = a.node(), bn = b.node();
  return make_op("add", a.shape(), std::move(v), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) kern::axpy(an->gptr(), 1.f, self.grad.data(), self.grad.size());
    if (bn->requires_grad) kern::axpy(bn->gptr(), 1.f, self.grad.data(), self.grad.size());
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a.shape(), b.shape());
  std::vector<float> v(a.vec());
  const float* pb = b.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] -= pb[i];
  auto an = a.node(), bn = b.node();
  return make_op("sub", a.shape(), std::move(v), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) kern::axpy(an->gptr(), 1.f, self.grad.data(), self.grad.size());
    if (bn->requires_grad) kern::axpy(bn->gptr(), -1.f, self.grad.data(), self.grad.size());
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a.shape(), b.shape());
  std::vector<float> v(a.vec());
  const float* pb = b.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] *= pb[i];
  auto an = a.node(), bn = b.node();
  return make_op("mul", a.shape(), std::move(v), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      float* g = an->gptr();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bn->val[i];
    }
    if (bn->requires_grad) {
      float* g = bn->gptr();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * an->val[i];
    }
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape("div", a.shape(), b.shape());
  std::vector<float> v(a.vec());
  const float* pb = b.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] /= pb[i];
  auto an = a.node(), bn = b.node();
  return make_op("div", a.shape(), std::move(v), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      float* g = an->gptr();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / bn->val[i];
    }
    if (bn->requires_grad) {
      float* g = bn->gptr();
      for (size_t i = 0; i < self.grad.size(); ++i)
        g[i] -= self.grad[i] * an->val[i] / (bn->val[i] * bn->val[i]);
    }
  });
}

inline Tensor scale(const Tensor& a, float c) {
  std::vector<float> v(a.vec());
  for (auto& x : v) x *= c;
  auto an = a.node();
  return make_op("scale", a.shape(), std::move(v), {a}, [an, c](Node& self) {
    kern::axpy(an->gptr(), c, self.grad.data(), self.grad.size());
  });
}

inline Tensor add_scalar(const Tensor& a, float c) {
  std::vector<float> v(a.vec());
  for (auto& x : v) x += c;
  auto an = a.node();
  return make_op("add_scalar", a.shape(), std::move(v), {a}, [an](Node& self) {
    kern::axpy(an->gptr(), 1.f, self.grad.data(), self.grad.size());
  });
}

// x[M x N] + row vector v[N]
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (x.ndim() != 2 || v.ndim() != 1 || x.dim(1) != v.dim(0))
    throw ShapeError("add_rowvec: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
  const int M = x.dim(0), N = x.dim(1);
  std::vector<float> out(x.vec());
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) out[(size_t)i * N + j] += v.data()[j];
  auto xn = x.node(), vn = v.node();
  return make_op("add_rowvec", x.shape(), std::move(out), {x, v}, [xn, vn, M, N](Node& self) {
    if (xn->requires_grad) kern::axpy(xn->gptr(), 1.f, self.grad.data(), self.grad.size());
    if (vn->requires_grad) {
      float* g = vn->gptr();
      for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) g[j] += self.grad[(size_t)i * N + j];
    }
  });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<float> v(a.vec().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = detail::sigmoid_f(a.data()[i]);
  auto an = a.node();
  return make_op("sigmoid", a.shape(), std::move(v), {a}, [an](Node& self) {
    float* g = an->gptr();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      float y = self.val[i];
      g[i] += self.grad[i] * y * (1.f - y);
    }
  });
}

inline Tensor gelu(const Tensor& a) {
  std::vector<float> v(a.vec().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = detail::gelu_f(a.data()[i]);
  auto an = a.node();
  return make_op("gelu", a.shape(), std::move(v), {a}, [an](Node& self) {
    float* g = an->gptr();
    for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * detail::gelu_df(an->val[i]);
  });
}

inline Tensor leaky_relu(const Tensor& a, float slope) {
  std::vector<float> v(a.vec());
  for (auto& x : v) x = x >= 0 ? x : slope * x;
  auto an = a.node();
  return make_op("leaky_relu", a.shape(), std::move(v), {a}, [an, slope](Node& self) {
    float* g = an->gptr();
    for (size_t i = 0; i < self.grad.size(); ++i)
      g[i] += self.grad[i] * (an->val[i] >= 0 ? 1.f : slope);
  });
}

inline Tensor softplus(const Tensor& a) {
  std::vector<float> v(a.vec().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = detail::softplus_f(a.data()[i]);
  auto an = a.node();
  return make_op("softplus", a.shape(), std::move(v), {a}, [an](Node& self) {
    float* g = an->gptr();
    for (size_t i = 0; i < self.grad.size(); ++i)
      g[i] += self.grad[i] * detail::sigmoid_f(an->val[i]);
  });
}

// ---- reductions & losses ----

inline Tensor sum_all(const Tensor& a) {
  float s = 0.f;
  for (float x : a.vec()) s += x;
  auto an = a.node();
  return make_op("sum", {1}, {s}, {a}, [an](Node& self) {
    float* g = an->gptr();
    float d = self.grad[0];
    for (size_t i = 0; i < an->val.size(); ++i) g[i] += d;
  });
}

inline Tensor mean_all(const Tensor& a) {
  float s = 0.f;
  for (float x : a.vec()) s += x;
  float inv = 1.f / (float)a.numel();
  auto an = a.node();
  return make_op("mean", {1}, {s * inv}, {a}, [an, inv](Node& self) {
    float* g = an->gptr();
    float d = self.grad[0] * inv;
    for (size_t i = 0; i < an->val.size(); ++i) g[i] += d;
  });
}

inline Tensor mse_loss(const Tensor& a, const Tensor& b) {
  check_same_shape("mse_loss", a.shape(), b.shape());
  float s = 0.f;
  for (size_t i = 0; i < a.vec().size(); ++i) {
    float d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  float inv = 1.f / (float)a.numel();
  auto an = a.node(), bn = b.node();
  return make_op("mse_loss", {1}, {s * inv}, {a, b}, [an, bn, inv](Node& self) {
    float c = 2.f * inv * self.grad[0];
    for (size_t i = 0; i < an->val.size(); ++i) {
      float d = c * (an->val[i] - bn->val[i]);
      if (an->requires_grad) an->gptr()[i] += d;
      if (bn->requires_grad) bn->gptr()[i] -= d;
    }
  });
}

inline Tensor l1_loss(const Tensor& a, const Tensor& b) {
  check_same_shape("l1_loss", a.shape(), b.shape());
  float s = 0.f;
  for (size_t i = 0; i < a.vec().size(); ++i) s += std::fabs(a.data()[i] - b.data()[i]);
  float inv = 1.f / (float)a.numel();
  auto an = a.node(), bn = b.node();
  return make_op("l1_loss", {1}, {s * inv}, {a, b}, [an, bn, inv](Node& self) {
    float c = inv * self.grad[0];
    for (size_t i = 0; i < an->val.size(); ++i) {
      float d = an->val[i] - bn->val[i];
      float sgn = d > 0 ? 1.f : (d < 0 ? -1.f : 0.f);
      if (an->requires_grad) an->gptr()[i] += c * sgn;
      if (bn->requires_grad) bn->gptr()[i] -= c * sgn;
    }
  });
}

// mean over trailing spatial dims of [C x H x W] -> [C]
inline Tensor spatial_mean(const Tensor& x) {
  if (x.ndim() != 3) throw ShapeError("spatial_mean: expected 3-d input, got " + shape_str(x.shape()));
  const int C = x.dim(0), HW = x.dim(1) * x.dim(2);
  std::vector<float> out((size_t)C, 0.f);
  for (int c = 0; c < C; ++c) {
    float s = 0.f;
    for (int i = 0; i < HW; ++i) s += x.data()[(size_t)c * HW + i];
    out[(size_t)c] = s / (float)HW;
  }
  auto xn = x.node();
  return make_op("spatial_mean", {C}, std::move(out), {x}, [xn, C, HW](Node& self) {
    float* g = xn->gptr();
    for (int c = 0; c < C; ++c) {
      float d = self.grad[(size_t)c] / (float)HW;
      for (int i = 0; i < HW; ++i) g[(size_t)c * HW + i] += d;
    }
  });
}

// ---- shape ops ----

inline Tensor reshape(const Tensor& a, Shape s) {
  if (numel_of(s) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(s));
  std::vector<float> v(a.vec());
  auto an = a.node();
  return make_op("reshape", std::move(s), std::move(v), {a}, [an](Node& self) {
    kern::axpy(an->gptr(), 1.f, self.grad.data(), self.grad.size());
  });
}

inline Tensor slice_rows(const Tensor& x, int r0, int r1) {
  if (x.ndim() != 2 || r0 < 0 || r1 > x.dim(0) || r0 >= r1)
    throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ") for " + shape_str(x.shape()));
  const int N = x.dim(1);
  std::vector<float> v(x.vec().begin() + (size_t)r0 * N, x.vec().begin() + (size_t)r1 * N);
  auto xn = x.node();
  return make_op("slice_rows", {r1 - r0, N}, std::move(v), {x}, [xn, r0, N](Node& self) {
    kern::axpy(xn->gptr() + (size_t)r0 * N, 1.f, self.grad.data(), self.grad.size());
  });
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
  if (x.ndim() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1)
    throw ShapeError("slice_cols: bad range for " + shape_str(x.shape()));
  const int M = x.dim(0), N = x.dim(1), W = c1 - c0;
  std::vector<float> v((size_t)M * W);
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < W; ++j) v[(size_t)i * W + j] = x.data()[(size_t)i * N + c0 + j];
  auto xn = x.node();
  return make_op("slice_cols", {M, W}, std::move(v), {x}, [xn, c0, M, N, W](Node& self) {
    float* g = xn->gptr();
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < W; ++j) g[(size_t)i * N + c0 + j] += self.grad[(size_t)i * W + j];
  });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_rows: no inputs");
  const int N = parts[0].dim(1);
  int M = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(1) != N)
      throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()));
    M += p.dim(0);
  }
  std::vector<float> v;
  v.reserve((size_t)M * N);
  for (const auto& p : parts) v.insert(v.end(), p.vec().begin(), p.vec().end());
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_op("concat_rows", {M, N}, std::move(v), parts, [nodes, N](Node& self) {
    size_t off = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) kern::axpy(n->gptr(), 1.f, self.grad.data() + off, n->val.size());
      off += n->val.size();
    }
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  const int M = parts[0].dim(0);
  int N = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != M)
      throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()));
    N += p.dim(1);
  }
  std::vector<float> v((size_t)M * N);
  int c0 = 0;
  for (const auto& p : parts) {
    int W = p.dim(1);
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < W; ++j) v[(size_t)i * N + c0 + j] = p.data()[(size_t)i * W + j];
    c0 += W;
  }
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_op("concat_cols", {M, N}, std::move(v), parts, [nodes, M, N](Node& self) {
    int c0 = 0;
    for (const auto& n : nodes) {
      int W = n->shape[1];
      if (n->requires_grad) {
        float* g = n->gptr();
        for (int i = 0; i < M; ++i)
          for (int j = 0; j < W; ++j) g[(size_t)i * W + j] += self.grad[(size_t)i * N + c0 + j];
      }
      c0 += W;
    }
  });
}

// forward takes b's values, gradient flows to a
inline Tensor straight_through(const Tensor& a, const Tensor& b) {
  check_same_shape("straight_through", a.shape(), b.shape());
  std::vector<float> v(b.vec());
  auto an = a.node();
  return make_op("straight_through", a.shape(), std::move(v), {a}, [an](Node& self) {
    kern::axpy(an->gptr(), 1.f, self.grad.data(), self.grad.size());
  });
}

inline Tensor detach(const Tensor& a) {
  return Tensor::from(a.shape(), a.vec(), false);
}

// keep[i] != 0 keeps x[i]; otherwise the output is exactly `fill`
inline Tensor masked_fill(const Tensor& x, const std::shared_ptr<std::vector<uint8_t>>& keep, float fill) {
  if ((int64_t)keep->size() != x.numel()) throw ShapeError("masked_fill: mask size mismatch");
  std::vector<float> v(x.vec());
  for (size_t i = 0; i < v.size(); ++i)
    if (!(*keep)[i]) v[i] = fill;
  auto xn = x.node();
  return make_op("masked_fill", x.shape(), std::move(v), {x}, [xn, keep](Node& self) {
    float* g = xn->gptr();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if ((*keep)[i]) g[i] += self.grad[i];
  });
}

// y = x when the scalar gate is exactly zero (bitwise), else x + g*branch.
// The gate always receives d<y,branch>.
inline Tensor gated_add(const Tensor& x, const Tensor& branch, const Tensor& gate) {
  check_same_shape("gated_add", x.shape(), branch.shape());
  if (gate.numel() != 1) throw ShapeError("gated_add: gate must be scalar");
  const float g = gate.item();
  std::vector<float> v(x.vec());
  if (g != 0.f)
    for (size_t i = 0; i < v.size(); ++i) v[i] += g * branch.data()[i];
  auto xn = x.node(), bn = branch.node(), gn = gate.node();
  return make_op("gated_add", x.shape(), std::move(v), {x, branch, gate}, [xn, bn, gn, g](Node& self) {
    if (xn->requires_grad) kern::axpy(xn->gptr(), 1.f, self.grad.data(), self.grad.size());
    if (bn->requires_grad && g != 0.f) kern::axpy(bn->gptr(), g, self.grad.data(), self.grad.size());
    if (gn->requires_grad) {
      float s = 0.f;
      for (size_t i = 0; i < self.grad.size(); ++i) s += self.grad[i] * bn->val[i];
      gn->gptr()[0] += s;
    }
  });
}

// [B,d1,d2,...] -> [d1,d2,...]
inline Tensor select_batch(const Tensor& x, int i) {
  if (x.ndim() < 2) throw ShapeError("select_batch: expected batched input, got " + shape_str(x.shape()));
  if (i < 0 || i >= x.dim(0))
    throw IndexError("select_batch: index " + std::to_string(i) + " out of range [0," +
                     std::to_string(x.dim(0)) + ")");
  Shape rest(x.shape().begin() + 1, x.shape().end());
  int n = (int)numel_of(rest);
  return reshape(slice_rows(reshape(x, {x.dim(0), n}), i, i + 1), std::move(rest));
}

// inverse of select_batch over a full batch
inline Tensor stack_batch(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw UsageError("stack_batch: no inputs");
  const Shape& s = xs[0].shape();
  std::vector<Tensor> rows;
  rows.reserve(xs.size());
  for (const auto& x : xs) {
    check_same_shape("stack_batch", x.shape(), s);
    rows.push_back(reshape(x, {1, (int)x.numel()}));
  }
  Shape out;
  out.push_back((int)xs.size());
  out.insert(out.end(), s.begin(), s.end());
  return reshape(concat_rows(rows), std::move(out));
}

// ---- linear algebra ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<float> v((size_t)M * N, 0.f);
  kern::gemm_nn(v.data(), a.data(), b.data(), M, K, N);
  auto an = a.node(), bn = b.node();
  return make_op("matmul", {M, N}, std::move(v), {a, b}, [an, bn, M, K, N](Node& self) {
    if (an->requires_grad) kern::gemm_nt(an->gptr(), self.grad.data(), bn->val.data(), M, N, K);
    if (bn->requires_grad) kern::gemm_tn(bn->gptr(), an->val.data(), self.grad.data(), K, M, N);
  });
}

// a[M x K] * b^T with b stored [N x K]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int M = a.dim(0), K = a.dim(1), N = b.dim(0);
  std::vector<float> v((size_t)M * N, 0.f);
  kern::gemm_nt(v.data(), a.data(), b.data(), M, K, N);
  auto an = a.node(), bn = b.node();
  return make_op("matmul_nt", {M, N}, std::move(v), {a, b}, [an, bn, M, K, N](Node& self) {
    if (an->requires_grad) kern::gemm_nn(an->gptr(), self.grad.data(), bn->val.data(), M, N, K);
    if (bn->requires_grad) kern::gemm_tn(bn->gptr(), self.grad.data(), an->val.data(), N, M, K);
  });
}

inline Tensor transpose2d(const Tensor& x) {
  if (x.ndim() != 2) throw ShapeError("transpose2d: expected 2-d input, got " + shape_str(x.shape()));
  const int M = x.dim(0), N = x.dim(1);
  std::vector<float> v((size_t)M * N);
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) v[(size_t)j * M + i] = x.data()[(size_t)i * N + j];
  auto xn = x.node();
  return make_op("transpose2d", {N, M}, std::move(v), {x}, [xn, M, N](Node& self) {
    float* g = xn->gptr();
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < N; ++j) g[(size_t)i * N + j] += self.grad[(size_t)j * M + i];
  });
}

// x[M x K] * w[K x N] (+ b[N])
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor()) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(0))
    throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const int M = x.dim(0), K = x.dim(1), N = w.dim(1);
  std::vector<float> v((size_t)M * N, 0.f);
  kern::gemm_nn(v.data(), x.data(), w.data(), M, K, N);
  if (b.defined()) {
    if (b.numel() != N) throw ShapeError("linear: bias size mismatch");
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < N; ++j) v[(size_t)i * N + j] += b.data()[j];
  }
  std::vector<Tensor> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  auto xn = x.node(), wn = w.node();
  NodePtr bnode = b.defined() ? b.node() : nullptr;
  return make_op("linear", {M, N}, std::move(v), parents, [xn, wn, bnode, M, K, N](Node& self) {
    if (xn->requires_grad) kern::gemm_nt(xn->gptr(), self.grad.data(), wn->val.data(), M, N, K);
    if (wn->requires_grad) kern::gemm_tn(wn->gptr(), xn->val.data(), self.grad.data(), K, M, N);
    if (bnode && bnode->requires_grad) {
      float* g = bnode->gptr();
      for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) g[j] += self.grad[(size_t)i * N + j];
    }
  });
}

inline Tensor embedding(const Tensor& table, const std::vector<int>& idx) {
  if (table.ndim() != 2) throw ShapeError("embedding: table must be 2-d");
  const int V = table.dim(0), C = table.dim(1);
  for (size_t i = 0; i < idx.size(); ++i)
    if (idx[i] < 0 || idx[i] >= V)
      throw IndexError("embedding: index " + std::to_string(idx[i]) + " at row " + std::to_string(i) +
                       " out of range [0," + std::to_string(V) + ")");
  std::vector<float> v((size_t)idx.size() * C);
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(table.data() + (size_t)idx[i] * C, C, v.data() + i * C);
  auto tn = table.node();
  auto ids = idx;
  return make_op("embedding", {(int)idx.size(), C}, std::move(v), {table}, [tn, ids, C](Node& self) {
    float* g = tn->gptr();
    for (size_t i = 0; i < ids.size(); ++i)
      kern::axpy(g + (size_t)ids[i] * C, 1.f, self.grad.data() + i * C, (size_t)C);
  });
}

// ---- normalization / attention pieces ----

inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f) {
  if (x.ndim() != 2) throw ShapeError("layernorm: expected 2-d input, got " + shape_str(x.shape()));
  const int M = x.dim(0), N = x.dim(1);
  if (gamma.numel() != N || beta.numel() != N) throw ShapeError("layernorm: affine size mismatch");
  std::vector<float> v((size_t)M * N);
  std::vector<float> inv_sigma((size_t)M), xhat((size_t)M * N);
  for (int i = 0; i < M; ++i) {
    const float* row = x.data() + (size_t)i * N;
    float mu = 0.f;
    for (int j = 0; j < N; ++j) mu += row[j];
    mu /= (float)N;
    float var = 0.f;
    for (int j = 0; j < N; ++j) {
      float d = row[j] - mu;
      var += d * d;
    }
    var /= (float)N;
    float is = 1.f / std::sqrt(var + eps);
    inv_sigma[(size_t)i] = is;
    for (int j = 0; j < N; ++j) {
      float h = (row[j] - mu) * is;
      xhat[(size_t)i * N + j] = h;
      v[(size_t)i * N + j] = h * gamma.data()[j] + beta.data()[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  auto is_saved = std::make_shared<std::vector<float>>(std::move(inv_sigma));
  auto xh_saved = std::make_shared<std::vector<float>>(std::move(xhat));
  return make_op("layernorm", x.shape(), std::move(v), {x, gamma, beta},
                 [xn, gn, bn, is_saved, xh_saved, M, N](Node& self) {
    const auto& is = *is_saved;
    const auto& xh = *xh_saved;
    for (int i = 0; i < M; ++i) {
      const float* dy = self.grad.data() + (size_t)i * N;
      const float* h = xh.data() + (size_t)i * N;
      if (gn->requires_grad || bn->requires_grad) {
        float* gg = gn->gptr();
        float* gb = bn->gptr();
        for (int j = 0; j < N; ++j) {
          gg[j] += dy[j] * h[j];
          gb[j] += dy[j];
        }
      }
      if (xn->requires_grad) {
        float s1 = 0.f, s2 = 0.f;
        for (int j = 0; j < N; ++j) {
          float t = dy[j] * gn->val[(size_t)j];
          s1 += t;
          s2 += t * h[j];
        }
        s1 /= (float)N;
        s2 /= (float)N;
        float* gx = xn->gptr() + (size_t)i * N;
        for (int j = 0; j < N; ++j) {
          float t = dy[j] * gn->val[(size_t)j];
          gx[j] += (t - s1 - h[j] * s2) * is[(size_t)i];
        }
      }
    }
  });
}

// rows sum to one; computed with max subtraction
inline Tensor softmax_rows(const Tensor& x) {
  if (x.ndim() != 2) throw ShapeError("softmax_rows: expected 2-d input, got " + shape_str(x.shape()));
  const int M = x.dim(0), N = x.dim(1);
  std::vector<float> v((size_t)M * N);
  for (int i = 0; i < M; ++i) {
    const float* row = x.data() + (size_t)i * N;
    float m = row[0];
    for (int j = 1; j < N; ++j) m = std::max(m, row[j]);
    float z = 0.f;
    for (int j = 0; j < N; ++j) {
      float e = std::exp(row[j] - m);
      v[(size_t)i * N + j] = e;
      z += e;
    }
    float iz = 1.f / z;
    for (int j = 0; j < N; ++j) v[(size_t)i * N + j] *= iz;
  }
  auto xn = x.node();
  return make_op("softmax_rows", x.shape(), std::move(v), {x}, [xn, M, N](Node& self) {
    float* g = xn->gptr();
    for (int i = 0; i < M; ++i) {
      const float* y = self.val.data() + (size_t)i * N;
      const float* dy = self.grad.data() + (size_t)i * N;
      float dot = 0.f;
      for (int j = 0; j < N; ++j) dot += y[j] * dy[j];
      for (int j = 0; j < N; ++j) g[(size_t)i * N + j] += y[j] * (dy[j] - dot);
    }
  });
}

// mean of -log softmax(logits)[i, target_i]
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.ndim() != 2) throw ShapeError("cross_entropy: logits must be 2-d");
  const int N = logits.dim(0), V = logits.dim(1);
  if ((int)targets.size() != N)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(N) + " rows");
  for (int i = 0; i < N; ++i)
    if (targets[(size_t)i] < 0 || targets[(size_t)i] >= V)
      throw IndexError("cross_entropy: target " + std::to_string(targets[(size_t)i]) + " at row " +
                       std::to_string(i) + " out of range [0," + std::to_string(V) + ")");
  std::vector<float> probs((size_t)N * V);
  float loss = 0.f;
  for (int i = 0; i < N; ++i) {
    const float* row = logits.data() + (size_t)i * V;
    float m = row[0];
    for (int j = 1; j < V; ++j) m = std::max(m, row[j]);
    float z = 0.f;
    for (int j = 0; j < V; ++j) {
      float e = std::exp(row[j] - m);
      probs[(size_t)i * V + j] = e;
      z += e;
    }
    float iz = 1.f / z;
    for (int j = 0; j < V; ++j) probs[(size_t)i * V + j] *= iz;
    loss += (m + std::log(z)) - row[targets[(size_t)i]];
  }
  loss /= (float)N;
  auto ln = logits.node();
  auto p_saved = std::make_shared<std::vector<float>>(std::move(probs));
  auto t_saved = targets;
  return make_op("cross_entropy", {1}, {loss}, {logits}, [ln, p_saved, t_saved, N, V](Node& self) {
    float* g = ln->gptr();
    const float c = self.grad[0] / (float)N;
    const auto& p = *p_saved;
    for (int i = 0; i < N; ++i) {
      for (int j = 0; j < V; ++j) g[(size_t)i * V + j] += c * p[(size_t)i * V + j];
      g[(size_t)i * V + t_saved[(size_t)i]] -= c;
    }
  });
}

// ---- conv / resize ----

namespace detail {
inline void im2col(const float* x, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int Ho, int Wo, float* col) {
  // col is [C*kh*kw x Ho*Wo]
  int r = 0;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj, ++r) {
        float* dst = col + (size_t)r * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
          int ih = oh * stride + ki - pad;
          for (int ow = 0; ow < Wo; ++ow) {
            int iw = ow * stride + kj - pad;
            dst[(size_t)oh * Wo + ow] =
                (ih >= 0 && ih < H && iw >= 0 && iw < W) ? x[((size_t)c * H + ih) * W + iw] : 0.f;
          }
        }
      }
}

inline void col2im_acc(const float* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                       int Ho, int Wo, float* gx) {
  int r = 0;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj, ++r) {
        const float* src = col + (size_t)r * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
          int ih = oh * stride + ki - pad;
          if (ih < 0 || ih >= H) continue;
          for (int ow = 0; ow < Wo; ++ow) {
            int iw = ow * stride + kj - pad;
            if (iw >= 0 && iw < W) gx[((size_t)c * H + ih) * W + iw] += src[(size_t)oh * Wo + ow];
          }
        }
      }
}
}  // namespace detail

// cross-correlation with zero padding; x[B,C,H,W], w[O,C,kh,kw], b[O]
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  if (x.ndim() != 4 || w.ndim() != 4)
    throw ShapeError("conv2d: expected 4-d input and weight, got " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C)
    throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (kh > H + 2 * pad || kw > W + 2 * pad)
    throw ConfigError("conv2d: kernel larger than padded input");
  if ((H + 2 * pad - kh) % stride != 0 || (W + 2 * pad - kw) % stride != 0)
    throw ConfigError("conv2d: non-integral output size for H=" + std::to_string(H) + " W=" +
                      std::to_string(W) + " k=" + std::to_string(kh) + " stride=" + std::to_string(stride) +
                      " pad=" + std::to_string(pad));
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  const int CKK = C * kh * kw, HWo = Ho * Wo;

  std::vector<float> out((size_t)B * O * HWo, 0.f);
  std::vector<float> col((size_t)CKK * HWo);
  for (int n = 0; n < B; ++n) {
    detail::im2col(x.data() + (size_t)n * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
    kern::gemm_nn(out.data() + (size_t)n * O * HWo, w.data(), col.data(), O, CKK, HWo);
  }
  if (b.defined()) {
    if (b.numel() != O) throw ShapeError("conv2d: bias size mismatch");
    for (int n = 0; n < B; ++n)
      for (int o = 0; o < O; ++o) {
        float bv = b.data()[o];
        float* dst = out.data() + ((size_t)n * O + o) * HWo;
        for (int i = 0; i < HWo; ++i) dst[i] += bv;
      }
  }
  std::vector<Tensor> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  auto xn = x.node(), wn = w.node();
  NodePtr bnode = b.defined() ? b.node() : nullptr;
  return make_op("conv2d", {B, O, Ho, Wo}, std::move(out), parents,
                 [xn, wn, bnode, B, C, H, W, O, kh, kw, stride, pad, Ho, Wo, CKK,
                  HWo](Node& self) {
    // im2col is recomputed here rather than stored: it is pure data movement
    std::vector<float> col((size_t)CKK * HWo);
    for (int n = 0; n < B; ++n) {
      const float* dy = self.grad.data() + (size_t)n * O * HWo;
      if (wn->requires_grad) {
        detail::im2col(xn->val.data() + (size_t)n * C * H * W, C, H, W, kh, kw, stride, pad, Ho,
                       Wo, col.data());
        kern::gemm_nt(wn->gptr(), dy, col.data(), O, HWo, CKK);
      }
      if (bnode && bnode->requires_grad) {
        float* gb = bnode->gptr();
        for (int o = 0; o < O; ++o) {
          float s = 0.f;
          for (int i = 0; i < HWo; ++i) s += dy[(size_t)o * HWo + i];
          gb[o] += s;
        }
      }
      if (xn->requires_grad) {
        std::vector<float> dcol((size_t)CKK * HWo, 0.f);
        kern::gemm_tn(dcol.data(), wn->val.data(), dy, CKK, O, HWo);
        detail::col2im_acc(dcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                           xn->gptr() + (size_t)n * C * H * W);
      }
    }
  });
}

// align-corners-false bilinear; exact identity at equal sizes, exact on constants
inline Tensor resize_bilinear(const Tensor& x, int oh, int ow) {
  if (x.ndim() != 4) throw ShapeError("resize_bilinear: expected 4-d input, got " + shape_str(x.shape()));
  if (oh < 1 || ow < 1) throw ShapeError("resize_bilinear: output size must be positive");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  struct Tap {
    int i0, i1;
    float f;
  };
  auto taps_for = [](int in, int out) {
    std::vector<Tap> t((size_t)out);
    float s = (float)in / (float)out;
    for (int o = 0; o < out; ++o) {
      float src = ((float)o + 0.5f) * s - 0.5f;
      if (src < 0.f) src = 0.f;
      int i0 = (int)src;
      if (i0 > in - 1) i0 = in - 1;
      int i1 = std::min(i0 + 1, in - 1);
      t[(size_t)o] = {i0, i1, src - (float)i0};
    }
    return t;
  };
  auto ty = std::make_shared<std::vector<Tap>>(taps_for(H, oh));
  auto tx = std::make_shared<std::vector<Tap>>(taps_for(W, ow));
  std::vector<float> out((size_t)B * C * oh * ow);
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < C; ++c) {
      const float* src = x.data() + ((size_t)n * C + c) * H * W;
      float* dst = out.data() + ((size_t)n * C + c) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        const Tap& a = (*ty)[(size_t)y];
        for (int xo = 0; xo < ow; ++xo) {
          const Tap& b = (*tx)[(size_t)xo];
          float v00 = src[(size_t)a.i0 * W + b.i0], v01 = src[(size_t)a.i0 * W + b.i1];
          float v10 = src[(size_t)a.i1 * W + b.i0], v11 = src[(size_t)a.i1 * W + b.i1];
          float top = v00 + b.f * (v01 - v00);
          float bot = v10 + b.f * (v11 - v10);
          dst[(size_t)y * ow + xo] = top + a.f * (bot - top);
        }
      }
    }
  auto xn = x.node();
  return make_op("resize_bilinear", {B, C, oh, ow}, std::move(out), {x},
                 [xn, ty, tx, B, C, H, W, oh, ow](Node& self) {
    float* g = xn->gptr();
    for (int n = 0; n < B; ++n)
      for (int c = 0; c < C; ++c) {
        float* gx = g + ((size_t)n * C + c) * H * W;
        const float* dy = self.grad.data() + ((size_t)n * C + c) * oh * ow;
        for (int y = 0; y < oh; ++y) {
          const Tap& a = (*ty)[(size_t)y];
          for (int xo = 0; xo < ow; ++xo) {
            const Tap& b = (*tx)[(size_t)xo];
            float d = dy[(size_t)y * ow + xo];
            gx[(size_t)a.i0 * W + b.i0] += (1.f - a.f) * (1.f - b.f) * d;
            gx[(size_t)a.i0 * W + b.i1] += (1.f - a.f) * b.f * d;
            gx[(size_t)a.i1 * W + b.i0] += a.f * (1.f - b.f) * d;
            gx[(size_t)a.i1 * W + b.i1] += a.f * b.f * d;
          }
        }
      }
  });
}

// ---- rotary embedding ----

// cos/sin tables laid out [S x pair_dim]; within a pair both dims carry the
// same angle. Applies the rotation per head slice of width pair_dim.
inline Tensor rope_apply(const Tensor& x, const std::shared_ptr<std::vector<float>>& cos_t,
                         const std::shared_ptr<std::vector<float>>& sin_t, int heads) {
  if (x.ndim() != 2) throw ShapeError("rope_apply: expected 2-d input");
  const int S = x.dim(0), D = x.dim(1);
  if (D % heads != 0) throw ShapeError("rope_apply: dim not divisible by heads");
  const int dh = D / heads;
  if (dh % 4 != 0) throw ShapeError("rope_apply: head dim must be divisible by 4");
  if ((int64_t)cos_t->size() != (int64_t)S * dh || (int64_t)sin_t->size() != (int64_t)S * dh)
    throw ShapeError("rope_apply: table size mismatch");
  std::vector<float> v((size_t)S * D);
  for (int s = 0; s < S; ++s) {
    const float* ct = cos_t->data() + (size_t)s * dh;
    const float* st = sin_t->data() + (size_t)s * dh;
    for (int h = 0; h < heads; ++h) {
      const float* xr = x.data() + (size_t)s * D + (size_t)h * dh;
      float* yr = v.data() + (size_t)s * D + (size_t)h * dh;
      for (int d = 0; d < dh; d += 2) {
        float c = ct[d], sn = st[d];
        yr[d] = xr[d] * c - xr[d + 1] * sn;
        yr[d + 1] = xr[d] * sn + xr[d + 1] * c;
      }
    }
  }
  auto xn = x.node();
  return make_op("rope_apply", x.shape(), std::move(v), {x}, [xn, cos_t, sin_t, S, D, dh, heads](Node& self) {
    float* g = xn->gptr();
    for (int s = 0; s < S; ++s) {
      const float* ct = cos_t->data() + (size_t)s * dh;
      const float* st = sin_t->data() + (size_t)s * dh;
      for (int h = 0; h < heads; ++h) {
        const float* dy = self.grad.data() + (size_t)s * D + (size_t)h * dh;
        float* gx = g + (size_t)s * D + (size_t)h * dh;
        for (int d = 0; d < dh; d += 2) {
          float c = ct[d], sn = st[d];
          gx[d] += dy[d] * c + dy[d + 1] * sn;
          gx[d + 1] += -dy[d] * sn + dy[d + 1] * c;
        }
      }
    }
  });
}

// ---- fused multi-head attention core ----

struct AttnOpts {
  int heads = 1;
  // keep[i*Sk+j] != 0 lets query i attend to key j; empty means full attention
  std::shared_ptr<std::vector<uint8_t>> mask;
  std::shared_ptr<std::vector<float>> rope_cos_q, rope_sin_q;  // [S x dh]
  std::shared_ptr<std::vector<float>> rope_cos_k, rope_sin_k;  // [Sk x dh]
};

// q[S x D], k[Sk x D], v[Sk x D] -> [S x D]; scores masked to exactly -1e30
// so attention weights at disallowed positions underflow to exactly zero.
inline Tensor attn_core(const Tensor& q, const Tensor& k, const Tensor& v, const AttnOpts& opt) {
  if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 || q.dim(1) != k.dim(1) ||
      k.shape() != v.shape())
    throw ShapeError("attn_core: incompatible shapes q=" + shape_str(q.shape()) + " k=" +
                     shape_str(k.shape()) + " v=" + shape_str(v.shape()));
  const int S = q.dim(0), D = q.dim(1), Sk = k.dim(0);
  const int H = opt.heads, dh = D / H;
  if (D % H != 0) throw ShapeError("attn_core: dim not divisible by heads");
  if (opt.mask && (int64_t)opt.mask->size() != (int64_t)S * Sk)
    throw ShapeError("attn_core: mask size mismatch");
  const float sc = 1.f / std::sqrt((float)dh);

  auto rot = [dh](float* buf, int rows, int stride, const std::vector<float>& ct,
                  const std::vector<float>& st) {
    for (int s = 0; s < rows; ++s) {
      float* xr = buf + (size_t)s * stride;
      const float* c = ct.data() + (size_t)s * dh;
      const float* sn = st.data() + (size_t)s * dh;
      for (int d = 0; d < dh; d += 2) {
        float a = xr[d], b = xr[d + 1];
        xr[d] = a * c[d] - b * sn[d];
        xr[d + 1] = a * sn[d] + b * c[d];
      }
    }
  };

  // per-head roped copies and probabilities, saved for backward
  auto Qr = std::make_shared<std::vector<float>>((size_t)H * S * dh);
  auto Kr = std::make_shared<std::vector<float>>((size_t)H * Sk * dh);
  auto Vh = std::make_shared<std::vector<float>>((size_t)H * Sk * dh);
  auto P = std::make_shared<std::vector<float>>((size_t)H * S * Sk);
  std::vector<float> out((size_t)S * D, 0.f);

  for (int h = 0; h < H; ++h) {
    float* qh = Qr->data() + (size_t)h * S * dh;
    float* kh = Kr->data() + (size_t)h * Sk * dh;
    float* vh = Vh->data() + (size_t)h * Sk * dh;
    for (int s = 0; s < S; ++s)
      std::copy_n(q.data() + (size_t)s * D + (size_t)h * dh, dh, qh + (size_t)s * dh);
    for (int s = 0; s < Sk; ++s) {
      std::copy_n(k.data() + (size_t)s * D + (size_t)h * dh, dh, kh + (size_t)s * dh);
      std::copy_n(v.data() + (size_t)s * D + (size_t)h * dh, dh, vh + (size_t)s * dh);
    }
    if (opt.rope_cos_q) rot(qh, S, dh, *opt.rope_cos_q, *opt.rope_sin_q);
    if (opt.rope_cos_k) rot(kh, Sk, dh, *opt.rope_cos_k, *opt.rope_sin_k);

    float* p = P->data() + (size_t)h * S * Sk;
    std::fill(p, p + (size_t)S * Sk, 0.f);
    kern::gemm_nt(p, qh, kh, S, dh, Sk);
    for (size_t i = 0; i < (size_t)S * Sk; ++i) p[i] *= sc;
    if (opt.mask) {
      const auto& m = *opt.mask;
      for (size_t i = 0; i < (size_t)S * Sk; ++i)
        if (!m[i]) p[i] = -1e30f;
    }
    for (int s = 0; s < S; ++s) {
      float* row = p + (size_t)s * Sk;
      float mx = row[0];
      for (int j = 1; j < Sk; ++j) mx = std::max(mx, row[j]);
      float z = 0.f;
      for (int j = 0; j < Sk; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      float iz = 1.f / z;
      for (int j = 0; j < Sk; ++j) row[j] *= iz;
    }
    // ctx into the head's column slice
    std::vector<float> ctx((size_t)S * dh, 0.f);
    kern::gemm_nn(ctx.data(), p, vh, S, Sk, dh);
    for (int s = 0; s < S; ++s)
      std::copy_n(ctx.data() + (size_t)s * dh, dh, out.data() + (size_t)s * D + (size_t)h * dh);
  }

  auto qn = q.node(), kn = k.node(), vn = v.node();
  auto o = opt;
  return make_op("attn_core", {S, D}, std::move(out), {q, k, v},
                 [qn, kn, vn, Qr, Kr, Vh, P, o, S, D, Sk, H, dh, sc](Node& self) {
    std::vector<float> dctx((size_t)S * dh), dP((size_t)S * Sk), dS((size_t)S * Sk);
    std::vector<float> dQr((size_t)S * dh), dKr((size_t)Sk * dh);
    for (int h = 0; h < H; ++h) {
      const float* p = P->data() + (size_t)h * S * Sk;
      const float* qh = Qr->data() + (size_t)h * S * dh;
      const float* kh = Kr->data() + (size_t)h * Sk * dh;
      const float* vh = Vh->data() + (size_t)h * Sk * dh;
      for (int s = 0; s < S; ++s)
        std::copy_n(self.grad.data() + (size_t)s * D + (size_t)h * dh, dh, dctx.data() + (size_t)s * dh);

      // dV then dP
      if (vn->requires_grad) {
        std::vector<float> dvh((size_t)Sk * dh, 0.f);
        kern::gemm_tn(dvh.data(), p, dctx.data(), Sk, S, dh);
        float* gv = vn->gptr();
        for (int s = 0; s < Sk; ++s)
          kern::axpy(gv + (size_t)s * D + (size_t)h * dh, 1.f, dvh.data() + (size_t)s * dh, (size_t)dh);
      }
      std::fill(dP.begin(), dP.end(), 0.f);
      kern::gemm_nt(dP.data(), dctx.data(), vh, S, dh, Sk);
      for (int s = 0; s < S; ++s) {
        const float* pr = p + (size_t)s * Sk;
        const float* dpr = dP.data() + (size_t)s * Sk;
        float dot = 0.f;
        for (int j = 0; j < Sk; ++j) dot += pr[j] * dpr[j];
        float* dsr = dS.data() + (size_t)s * Sk;
        for (int j = 0; j < Sk; ++j) dsr[j] = pr[j] * (dpr[j] - dot) * sc;
      }
      if (qn->requires_grad) {
        std::fill(dQr.begin(), dQr.end(), 0.f);
        kern::gemm_nn(dQr.data(), dS.data(), kh, S, Sk, dh);
        if (o.rope_cos_q) {  // inverse rotation on the gradient
          for (int s = 0; s < S; ++s) {
            float* r = dQr.data() + (size_t)s * dh;
            const float* c = o.rope_cos_q->data() + (size_t)s * dh;
            const float* sn = o.rope_sin_q->data() + (size_t)s * dh;
            for (int d = 0; d < dh; d += 2) {
              float a = r[d], b = r[d + 1];
              r[d] = a * c[d] + b * sn[d];
              r[d + 1] = -a * sn[d] + b * c[d];
            }
          }
        }
        float* gq = qn->gptr();
        for (int s = 0; s < S; ++s)
          kern::axpy(gq + (size_t)s * D + (size_t)h * dh, 1.f, dQr.data() + (size_t)s * dh, (size_t)dh);
      }
      if (kn->requires_grad) {
        std::fill(dKr.begin(), dKr.end(), 0.f);
        kern::gemm_tn(dKr.data(), dS.data(), qh, Sk, S, dh);
        if (o.rope_cos_k) {
          for (int s = 0; s < Sk; ++s) {
            float* r = dKr.data() + (size_t)s * dh;
            const float* c = o.rope_cos_k->data() + (size_t)s * dh;
            const float* sn = o.rope_sin_k->data() + (size_t)s * dh;
            for (int d = 0; d < dh; d += 2) {
              float a = r[d], b = r[d + 1];
              r[d] = a * c[d] + b * sn[d];
              r[d + 1] = -a * sn[d] + b * c[d];
            }
          }
        }
        float* gk = kn->gptr();
        for (int s = 0; s < Sk; ++s)
          kern::axpy(gk + (size_t)s * D + (size_t)h * dh, 1.f, dKr.data() + (size_t)s * dh, (size_t)dh);
      }
    }
  });
}

}  // namespace nsr
