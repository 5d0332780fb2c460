#include "jointseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "jointseg/errors.hpp"

namespace jointseg {

namespace {

void require_mask_pair(const Tensor& p, const Tensor& y) {
    if (p.shape() != y.shape())
        throw ShapeError("loss inputs differ in shape: " + shape_str(p.shape()) + " vs " +
                         shape_str(y.shape()));
    if (p.rank() != 2) throw ShapeError("loss inputs must be [H,W], got " + shape_str(p.shape()));
}

void require_binary(const Tensor& y) {
    for (double v : y.data())
        if (v != 0.0 && v != 1.0) throw ContractError("mask is not strictly binary");
}

}  // namespace

Tensor importance_weights(const Tensor& y) {
    if (y.rank() != 2) throw ShapeError("importance_weights wants [H,W], got " + shape_str(y.shape()));
    require_binary(y);
    const int64_t h = y.shape()[0], w = y.shape()[1];
    const auto& yd = y.data();

    // sat[i][j] = number of foreground pixels in y[0..i) x [0..j), exact.
    std::vector<int64_t> sat(static_cast<size_t>(h + 1) * (w + 1), 0);
    auto at = [&](int64_t i, int64_t j) -> int64_t& { return sat[static_cast<size_t>(i) * (w + 1) + j]; };
    for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j)
            at(i + 1, j + 1) =
                at(i, j + 1) + at(i + 1, j) - at(i, j) + (yd[static_cast<size_t>(i) * w + j] == 1.0);

    constexpr int64_t r = 7;  // 15x15 window
    std::vector<double> out(yd.size());
    for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j) {
            int64_t y0 = std::max<int64_t>(0, i - r), y1 = std::min(h, i + r + 1);
            int64_t x0 = std::max<int64_t>(0, j - r), x1 = std::min(w, j + r + 1);
            int64_t fg = at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0);
            int64_t count = (y1 - y0) * (x1 - x0);
            // |mean - y| as an exact integer ratio: fg/count or (count-fg)/count.
            int64_t diff = yd[static_cast<size_t>(i) * w + j] == 1.0 ? count - fg : fg;
            out[static_cast<size_t>(i) * w + j] =
                1.0 + 5.0 * (static_cast<double>(diff) / static_cast<double>(count));
        }
    return Tensor::from(y.shape(), std::move(out));
}

Tensor weighted_bce(const Tensor& p, const Tensor& y, const Tensor& w) {
    require_mask_pair(p, y);
    require_mask_pair(w, y);
    Tensor pc = clamp(p, 1e-7, 1.0 - 1e-7);
    Tensor bce = sub(0.0, add(mul(y, log(pc)), mul(sub(1.0, y), log(sub(1.0, pc)))));
    return div(sum(mul(w, bce)), sum(w));
}

Tensor weighted_iou(const Tensor& p, const Tensor& y, const Tensor& w) {
    require_mask_pair(p, y);
    require_mask_pair(w, y);
    Tensor inter = sum(mul(w, mul(p, y)));
    Tensor uni = sum(mul(w, sub(add(p, y), mul(p, y))));
    return sub(1.0, div(add(inter, 1.0), add(uni, 1.0)));
}

Tensor ppa_loss(const Tensor& p, const Tensor& y) {
    require_mask_pair(p, y);
    Tensor w = importance_weights(y);
    return add(weighted_bce(p, y, w), weighted_iou(p, y, w));
}

}  // namespace jointseg
