#pragma once

#include <cstdint>
#include <vector>

#include "iif/image.hpp"

namespace iif {

// Masks are per-pixel (not per-channel); empty mask means all pixels.
// Excluded pixels affect neither numerator nor denominator.
using PixelMask = std::vector<uint8_t>;

// Mean squared error over masked pixels, all channels.
double l2(const ImageF& a, const ImageF& b, const PixelMask& mask = {});

// 10 log10(1 / MSE) against peak 1; identical images cap at 99 dB.
double psnr(const ImageF& a, const ImageF& b, const PixelMask& mask = {});

// Mean local SSIM on Rec.709 luma, 11x11 Gaussian window sigma 1.5,
// C1 = 0.01^2, C2 = 0.03^2. A window contributes when its center is masked-in
// and fully inside the image; masked-out pixels inside a window drop out with
// the Gaussian weights renormalized.
double ssim(const ImageF& a, const ImageF& b, const PixelMask& mask = {});

// Evaluation mask excluding near-mirror surfaces (r < 0.05 and m > 0.95) and,
// when provided, emitter pixels.
PixelMask material_eval_mask(const ImageF& rough, const ImageF& metal,
                             const PixelMask* emitter_pixels = nullptr);

}  // namespace iif
