#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "nsr/nn.hpp"
#include "nsr/ops.hpp"
#include "nsr/rng.hpp"

// Full-reference image metrics. SSIM and the perceptual distance are built
// from differentiable ops so they double as training losses; PSNR is a plain
// double-precision measurement.

namespace nsr {

inline Tensor gaussian_window(int size = 11, float sigma = 1.5f) {
  std::vector<float> w((size_t)size * size);
  const float c = (float)(size - 1) / 2.f;
  float sum = 0.f;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      float d2 = ((float)i - c) * ((float)i - c) + ((float)j - c) * ((float)j - c);
      float v = std::exp(-d2 / (2.f * sigma * sigma));
      w[(size_t)i * size + j] = v;
      sum += v;
    }
  for (auto& v : w) v /= sum;
  return Tensor::from({1, 1, size, size}, std::move(w));
}

// windowed SSIM over valid positions, Gaussian window, standard constants;
// images are [C x H x W] in [0,1]; channels are scored independently and
// averaged
inline Tensor ssim(const Tensor& x, const Tensor& y) {
  if (x.shape() != y.shape() || x.ndim() != 3)
    throw ShapeError("ssim: expected matching 3-d images, got " + shape_str(x.shape()) + " and " +
                     shape_str(y.shape()));
  static const Tensor win = gaussian_window();
  const float C1 = 0.01f * 0.01f, C2 = 0.03f * 0.03f;
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);

  Tensor xb = reshape(x, {C, 1, H, W});
  Tensor yb = reshape(y, {C, 1, H, W});
  Tensor mu_x = conv2d(xb, win, Tensor(), 1, 0);
  Tensor mu_y = conv2d(yb, win, Tensor(), 1, 0);
  Tensor xx = conv2d(mul(xb, xb), win, Tensor(), 1, 0);
  Tensor yy = conv2d(mul(yb, yb), win, Tensor(), 1, 0);
  Tensor xy = conv2d(mul(xb, yb), win, Tensor(), 1, 0);

  Tensor mu_xy = mul(mu_x, mu_y);
  Tensor var_x = sub(xx, mul(mu_x, mu_x));
  Tensor var_y = sub(yy, mul(mu_y, mu_y));
  Tensor cov = sub(xy, mu_xy);

  Tensor num = mul(add_scalar(scale(mu_xy, 2.f), C1), add_scalar(scale(cov, 2.f), C2));
  Tensor den = mul(add_scalar(add(mul(mu_x, mu_x), mul(mu_y, mu_y)), C1),
                   add_scalar(add(var_x, var_y), C2));
  return mean_all(div(num, den));
}

// 10*log10(1/MSE) in double precision, capped at 99 dB
inline double psnr(const Tensor& x, const Tensor& y) {
  if (x.shape() != y.shape())
    throw ShapeError("psnr: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  double mse = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    double d = (double)x.data()[i] - (double)y.data()[i];
    mse += d * d;
  }
  mse /= (double)x.numel();
  if (mse <= 0.0) return 99.0;
  return std::min(10.0 * std::log10(1.0 / mse), 99.0);
}

// frozen random conv pyramid; L1 across its three feature stages makes a
// crude but stable perceptual distance
class Percep {
 public:
  Percep() {
    Rng rng(424242);
    c1_ = Conv(ps_, "c1", 3, 16, 4, 2, 1, rng);
    c2_ = Conv(ps_, "c2", 16, 32, 4, 2, 1, rng);
    c3_ = Conv(ps_, "c3", 32, 64, 4, 2, 1, rng);
    ps_.set_requires_grad(false);
  }

  // img [3 x H x W]
  std::vector<Tensor> features(const Tensor& img) const {
    if (img.ndim() != 3 || img.dim(0) != 3)
      throw ShapeError("perceptual features: expected [3xHxW], got " + shape_str(img.shape()));
    Tensor x = reshape(img, {1, 3, img.dim(1), img.dim(2)});
    Tensor f1 = leaky_relu(c1_(x), 0.2f);
    Tensor f2 = leaky_relu(c2_(f1), 0.2f);
    Tensor f3 = leaky_relu(c3_(f2), 0.2f);
    return {f1, f2, f3};
  }

  Tensor loss(const Tensor& a, const Tensor& b) const {
    auto fa = features(a), fb = features(b);
    Tensor total;
    for (size_t i = 0; i < fa.size(); ++i) {
      Tensor l = l1_loss(fa[i], fb[i]);
      total = i == 0 ? l : add(total, l);
    }
    return total;
  }

 private:
  ParamStore ps_;
  Conv c1_, c2_, c3_;
};

}  // namespace nsr
