#include "iif/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace iif {

namespace {

void check_pair(const ImageF& a, const ImageF& b, const PixelMask& mask) {
  if (!a.same_shape(b)) throw std::runtime_error("metrics: image shapes differ");
  if (!mask.empty() && mask.size() != a.pixel_count())
    throw std::runtime_error("metrics: mask size does not match image");
}

bool masked_in(const PixelMask& mask, size_t i) { return mask.empty() || mask[i]; }

}  // namespace

double l2(const ImageF& a, const ImageF& b, const PixelMask& mask) {
  check_pair(a, b, mask);
  double sum = 0;
  size_t n = 0;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      const size_t i = size_t(y) * a.width + x;
      if (!masked_in(mask, i)) continue;
      for (int c = 0; c < a.channels; ++c) {
        const double d = double(a.at(x, y, c)) - b.at(x, y, c);
        sum += d * d;
      }
      n += a.channels;
    }
  if (n == 0) throw std::runtime_error("metrics: empty mask");
  return sum / double(n);
}

double psnr(const ImageF& a, const ImageF& b, const PixelMask& mask) {
  const double mse = l2(a, b, mask);
  if (mse <= 0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

double ssim(const ImageF& a, const ImageF& b, const PixelMask& mask) {
  check_pair(a, b, mask);
  constexpr int kHalf = 5;  // 11x11 window
  constexpr double kSigma = 1.5;
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  if (a.width < 2 * kHalf + 1 || a.height < 2 * kHalf + 1)
    throw std::runtime_error("metrics: image smaller than the SSIM window");

  double kernel[11][11];
  for (int dy = -kHalf; dy <= kHalf; ++dy)
    for (int dx = -kHalf; dx <= kHalf; ++dx)
      kernel[dy + kHalf][dx + kHalf] = std::exp(-(dx * dx + dy * dy) / (2.0 * kSigma * kSigma));

  const auto luma = [](const ImageF& im, int x, int y) {
    return im.channels == 1 ? double(im.at(x, y)) : luminance(im.rgb(x, y));
  };

  double total = 0;
  size_t windows = 0;
  for (int y = kHalf; y < a.height - kHalf; ++y)
    for (int x = kHalf; x < a.width - kHalf; ++x) {
      if (!masked_in(mask, size_t(y) * a.width + x)) continue;
      double wsum = 0, mu_a = 0, mu_b = 0;
      for (int dy = -kHalf; dy <= kHalf; ++dy)
        for (int dx = -kHalf; dx <= kHalf; ++dx) {
          const size_t i = size_t(y + dy) * a.width + (x + dx);
          if (!masked_in(mask, i)) continue;
          const double w = kernel[dy + kHalf][dx + kHalf];
          wsum += w;
          mu_a += w * luma(a, x + dx, y + dy);
          mu_b += w * luma(b, x + dx, y + dy);
        }
      if (wsum <= 0) continue;
      mu_a /= wsum;
      mu_b /= wsum;
      double var_a = 0, var_b = 0, cov = 0;
      for (int dy = -kHalf; dy <= kHalf; ++dy)
        for (int dx = -kHalf; dx <= kHalf; ++dx) {
          const size_t i = size_t(y + dy) * a.width + (x + dx);
          if (!masked_in(mask, i)) continue;
          const double w = kernel[dy + kHalf][dx + kHalf] / wsum;
          const double da = luma(a, x + dx, y + dy) - mu_a;
          const double db = luma(b, x + dx, y + dy) - mu_b;
          var_a += w * da * da;
          var_b += w * db * db;
          cov += w * da * db;
        }
      total += (2 * mu_a * mu_b + c1) * (2 * cov + c2) /
               ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
      ++windows;
    }
  if (windows == 0) throw std::runtime_error("metrics: empty mask");
  return total / double(windows);
}

PixelMask material_eval_mask(const ImageF& rough, const ImageF& metal,
                             const PixelMask* emitter_pixels) {
  if (rough.width != metal.width || rough.height != metal.height)
    throw std::runtime_error("metrics: rough/metal shapes differ");
  PixelMask mask(rough.pixel_count(), 1);
  for (int y = 0; y < rough.height; ++y)
    for (int x = 0; x < rough.width; ++x) {
      const size_t i = size_t(y) * rough.width + x;
      if (rough.at(x, y) < 0.05f && metal.at(x, y) > 0.95f) mask[i] = 0;
      if (emitter_pixels && (*emitter_pixels)[i]) mask[i] = 0;
    }
  return mask;
}

}  // namespace iif
