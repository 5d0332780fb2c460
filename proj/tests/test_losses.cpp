#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "jointseg/losses.hpp"
#include "jointseg/rng.hpp"
#include "jointseg/tensor.hpp"

using namespace jointseg;

namespace {

Tensor random_binary(Rng& rng, int64_t h, int64_t w, double density) {
    std::vector<double> v(static_cast<size_t>(h * w));
    for (auto& x : v) x = rng.uniform() < density ? 1.0 : 0.0;
    return Tensor::from({h, w}, std::move(v));
}

Tensor flip_h(const Tensor& t) {
    int64_t h = t.shape()[0], w = t.shape()[1];
    std::vector<double> v(t.data().size());
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            v[static_cast<size_t>(y) * w + x] = t.data()[static_cast<size_t>(y) * w + (w - 1 - x)];
    return Tensor::from(t.shape(), std::move(v));
}

}  // namespace

TEST_CASE("importance weights: bounds, constant regions, exact values") {
    Rng rng(31);
    Tensor y = random_binary(rng, 20, 20, 0.4);
    Tensor w = importance_weights(y);
    for (double v : w.data()) {
        CHECK(v >= 1.0);
        CHECK(v <= 6.0);
    }

    // Constant masks give w == 1 everywhere, including at the borders: the
    // window mean is taken over in-bounds pixels only.
    for (double level : {0.0, 1.0}) {
        Tensor wc = importance_weights(Tensor::full({9, 9}, level));
        for (double v : wc.data()) CHECK(v == 1.0);
    }

    // Single foreground pixel in the middle of 31x31.
    Tensor single = Tensor::zeros({31, 31});
    {
        std::vector<double> v(31 * 31, 0.0);
        v[15 * 31 + 15] = 1.0;
        single = Tensor::from({31, 31}, std::move(v));
    }
    Tensor ws = importance_weights(single);
    auto wat = [&](int yy, int xx) { return ws.data()[static_cast<size_t>(yy) * 31 + xx]; };
    CHECK(wat(15, 15) == 1.0 + 5.0 * (224.0 / 225.0));  // fg pixel: |1/225 - 1|
    CHECK(wat(15, 16) == 1.0 + 5.0 * (1.0 / 225.0));    // bg neighbour sees the fg pixel
    CHECK(wat(0, 0) == 1.0);                            // corner window misses it entirely

    // Vertically split mask: w == 1 deep inside each half, > 1 at the seam.
    Tensor split = Tensor::zeros({40, 40});
    {
        std::vector<double> v(40 * 40, 0.0);
        for (int yy = 0; yy < 40; ++yy)
            for (int xx = 0; xx < 20; ++xx) v[static_cast<size_t>(yy) * 40 + xx] = 1.0;
        split = Tensor::from({40, 40}, std::move(v));
    }
    Tensor wsp = importance_weights(split);
    auto wspat = [&](int yy, int xx) { return wsp.data()[static_cast<size_t>(yy) * 40 + xx]; };
    CHECK(wspat(0, 0) == 1.0);
    CHECK(wspat(39, 5) == 1.0);
    CHECK(wspat(20, 35) == 1.0);
    CHECK(wspat(20, 19) > 1.0);
    CHECK(wspat(20, 20) > 1.0);

    CHECK_THROWS_AS(importance_weights(Tensor::full({2, 2}, 0.5)), ContractError);
    CHECK_THROWS_AS(importance_weights(Tensor::zeros({4})), ShapeError);
}

TEST_CASE("weighted bce: perfect, symmetric-half, and 2x2 hand case") {
    Rng rng(32);
    Tensor y = random_binary(rng, 8, 8, 0.5);
    Tensor w = importance_weights(y);

    CHECK(weighted_bce(y, y, w).item() <= 1e-6);  // clamp leaves ~1e-7 residue

    Tensor half = Tensor::full({8, 8}, 0.5);
    CHECK(weighted_bce(half, y, w).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));  // weights cancel

    Tensor y2 = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor p2 = Tensor::from({2, 2}, {0.8, 0.3, 0.6, 0.9});
    Tensor w2 = Tensor::from({2, 2}, {1, 2, 3, 4});
    double hand = (1.0 * -std::log(0.8) + 2.0 * -std::log(0.7) + 3.0 * -std::log(0.4) +
                   4.0 * -std::log(0.9)) /
                  10.0;
    CHECK(weighted_bce(p2, y2, w2).item() == doctest::Approx(hand).epsilon(1e-12));

    CHECK_THROWS_AS(weighted_bce(Tensor::zeros({2, 3}), y2, w2), ShapeError);
}

TEST_CASE("weighted iou: exact zero at perfect, closed form, monotonicity") {
    Rng rng(33);
    Tensor y = random_binary(rng, 8, 8, 0.5);
    Tensor w = importance_weights(y);
    CHECK(weighted_iou(y, y, w).item() == 0.0);

    Tensor ones = Tensor::full({2, 3}, 1.0);
    Tensor zeros = Tensor::zeros({2, 3});
    Tensor unit_w = Tensor::full({2, 3}, 1.0);
    CHECK(weighted_iou(zeros, ones, unit_w).item() == 1.0 - 1.0 / 7.0);

    // Moving p from 0.5 toward y never increases the loss.
    Tensor y2 = Tensor::from({2, 2}, {1, 0, 1, 0});
    double prev = 2.0;
    for (int k = 0; k <= 10; ++k) {
        double a = k / 10.0;
        std::vector<double> pv(4);
        for (int i = 0; i < 4; ++i) pv[i] = 0.5 + a * (y2.data()[i] - 0.5);
        double cur = weighted_iou(Tensor::from({2, 2}, pv), y2, Tensor::full({2, 2}, 1.0)).item();
        CHECK(cur <= prev + 1e-15);
        prev = cur;
    }
}

TEST_CASE("ppa loss: perfect prediction, single-pixel hand case") {
    Rng rng(34);
    Tensor y = random_binary(rng, 16, 16, 0.3);
    CHECK(ppa_loss(y, y).item() < 1e-5);

    // p == 0.5 with one fg pixel: bce term is log 2; iou term from sums.
    Tensor y1 = Tensor::zeros({9, 9});
    {
        std::vector<double> v(81, 0.0);
        v[4 * 9 + 4] = 1.0;
        y1 = Tensor::from({9, 9}, std::move(v));
    }
    Tensor half = Tensor::full({9, 9}, 0.5);
    Tensor w1 = importance_weights(y1);
    double sw = 0.0, swy = 0.0;
    for (size_t i = 0; i < 81; ++i) {
        sw += w1.data()[i];
        swy += w1.data()[i] * y1.data()[i];
    }
    // inter = 0.5*swy; union = sum(w*(0.5 + y - 0.5y)) = 0.5*sw + 0.5*swy
    double iou_hand = 1.0 - (0.5 * swy + 1.0) / (0.5 * sw + 0.5 * swy + 1.0);
    CHECK(ppa_loss(half, y1).item() ==
          doctest::Approx(std::log(2.0) + iou_hand).epsilon(1e-12));
}

TEST_CASE("ppa loss gradient matches finite differences") {
    Rng rng(0x10559E5);
    gradcheck::Stats stats;
    for (int round = 0; round < 3; ++round) {
        Tensor y = random_binary(rng, 6, 6, 0.4);
        std::vector<double> pv(36);
        for (auto& v : pv) v = rng.uniform(0.05, 0.95);
        Tensor p = Tensor::from({6, 6}, std::move(pv));
        gradcheck::check(
            "ppa_loss", [&](const std::vector<Tensor>& in) { return ppa_loss(in[0], y); }, {p},
            rng, stats);
    }
    CHECK(stats.instances == 3);
    CHECK(stats.max_rel < 1e-4);
}

TEST_CASE("flip applied to p and y together leaves the loss unchanged") {
    Rng rng(36);
    for (int round = 0; round < 5; ++round) {
        Tensor y = random_binary(rng, 11, 7, 0.35);
        std::vector<double> pv(77);
        for (auto& v : pv) v = rng.uniform();
        Tensor p = Tensor::from({11, 7}, std::move(pv));

        // The weight map itself mirrors bit-exactly (integer window sums).
        Tensor w = importance_weights(y);
        Tensor wf = importance_weights(flip_h(y));
        CHECK(flip_h(w).data() == wf.data());

        double a = ppa_loss(p, y).item();
        double b = ppa_loss(flip_h(p), flip_h(y)).item();
        CHECK(a == doctest::Approx(b).epsilon(1e-12));
    }
}
