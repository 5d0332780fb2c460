#pragma once

#include "jointseg/tensor.hpp"

namespace jointseg {

// Pixel-importance weights derived from the mask alone:
//   w = 1 + 5 * |boxmean15(y) - y|,   so  1 <= w <= 6,
// where boxmean15 is the stride-1 15x15 windowed mean taken over in-bounds
// pixels only. Pixels whose whole window is constant get w == 1 exactly,
// image borders included; pixels near a boundary between regions are
// up-weighted. Computed with integer prefix sums (y is binary), so the map
// is an exact rational per pixel and mirrors bit-exactly under flips.
// Returns a [H,W] data tensor with no gradient tracking.
Tensor importance_weights(const Tensor& y);

// Importance-weighted binary cross-entropy:
//   sum(w * bce(clamp(p), y)) / sum(w),  clamp to [1e-7, 1-1e-7] before log.
Tensor weighted_bce(const Tensor& p, const Tensor& y, const Tensor& w);

// Importance-weighted soft IoU loss:
//   1 - (sum(w*p*y) + 1) / (sum(w*(p + y - p*y)) + 1),  in [0,1),
// exactly 0 when p == y binary (the +1-smoothed ratio cancels).
Tensor weighted_iou(const Tensor& p, const Tensor& y, const Tensor& w);

// Per-image position-aware loss: weighted_bce + weighted_iou with w built
// from y. Batch losses are the mean of per-image values (trainer's job).
Tensor ppa_loss(const Tensor& p, const Tensor& y);

}  // namespace jointseg
