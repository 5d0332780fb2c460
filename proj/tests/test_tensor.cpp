#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <thread>

#include "gradcheck.hpp"
#include "jointseg/tensor.hpp"

using namespace jointseg;

namespace {
Tensor leaf(Shape s, std::vector<double> v) { return Tensor::from(std::move(s), std::move(v), true); }
}  // namespace

TEST_CASE("matmul hand values and gradients") {
    // [[1,2],[3,4]] x [[0],[1]] = [[2],[4]]
    Tensor a = leaf({2, 2}, {1, 2, 3, 4});
    Tensor b = leaf({2, 1}, {0, 1});
    Tensor c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 1});
    CHECK(c.data()[0] == doctest::Approx(2.0));
    CHECK(c.data()[1] == doctest::Approx(4.0));
    backward(sum(c));
    // d(sum)/dA = ones x B^T = [[0,1],[0,1]]; d/dB = A^T x ones = [[4],[6]]
    CHECK(a.grad() == std::vector<double>{0, 1, 0, 1});
    CHECK(b.grad() == std::vector<double>{4, 6});
}

TEST_CASE("matmul shape errors") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
    CHECK_THROWS_AS(matmul(a, Tensor::zeros({2})), ShapeError);
}

TEST_CASE("sqrt value and gradient") {
    Tensor x = leaf({1}, {4.0});
    Tensor y = sqrt(x);
    CHECK(y.item() == doctest::Approx(2.0));
    backward(sum(y));
    CHECK(x.grad()[0] == doctest::Approx(0.25));  // 1/(2*sqrt(4))
}

TEST_CASE("broadcast add and gradient reduction over broadcast axes") {
    Tensor a = leaf({2}, {1, 2});
    Tensor b = leaf({1}, {10});
    Tensor c = add(a, b);
    CHECK(c.data() == std::vector<double>{11, 12});
    backward(sum(c));
    CHECK(a.grad() == std::vector<double>{1, 1});
    CHECK(b.grad() == std::vector<double>{2});  // summed over the broadcast axis

    Tensor m = leaf({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor r = leaf({3}, {10, 20, 30});
    Tensor s = add(m, r);
    CHECK(s.data() == std::vector<double>{11, 22, 33, 14, 25, 36});
    backward(sum(s));
    CHECK(r.grad() == std::vector<double>{2, 2, 2});
}

TEST_CASE("incompatible broadcast raises shape error") {
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
}

TEST_CASE("div values and gradients") {
    Tensor a = leaf({2}, {1, 2});
    Tensor b = leaf({2}, {4, 8});
    Tensor c = div(a, b);
    CHECK(c.data()[0] == doctest::Approx(0.25));
    CHECK(c.data()[1] == doctest::Approx(0.25));
    backward(sum(c));
    CHECK(a.grad()[0] == doctest::Approx(0.25));
    CHECK(a.grad()[1] == doctest::Approx(0.125));
    CHECK(b.grad()[0] == doctest::Approx(-1.0 / 16));
    CHECK(b.grad()[1] == doctest::Approx(-2.0 / 64));
}

TEST_CASE("mean and max reductions") {
    Tensor x = leaf({4}, {1, 2, 3, 6});
    Tensor m = mean(x);
    CHECK(m.item() == doctest::Approx(3.0));
    backward(m);
    CHECK(x.grad() == std::vector<double>{0.25, 0.25, 0.25, 0.25});

    Tensor y = leaf({3}, {2, 5, 5});
    Tensor mx = max(y);
    CHECK(mx.item() == doctest::Approx(5.0));
    backward(mx);
    // tie broken toward the lowest flat index
    CHECK(y.grad() == std::vector<double>{0, 1, 0});
}

TEST_CASE("reduction over explicit axes with keepdims") {
    Tensor x = leaf({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor s0 = sum(x, {0});
    CHECK(s0.shape() == Shape{3});
    CHECK(s0.data() == std::vector<double>{5, 7, 9});
    Tensor s1 = sum(x, {1}, /*keepdims=*/true);
    CHECK(s1.shape() == Shape{2, 1});
    CHECK(s1.data() == std::vector<double>{6, 15});
    CHECK_THROWS_AS(sum(x, {2}), ContractError);
    CHECK_THROWS_AS(sum(x, {0, 0}), ContractError);
}

TEST_CASE("sum of elementwise square gradient") {
    Tensor w = leaf({2}, {1, -2});
    Tensor loss = sum(mul(w, w));
    CHECK(loss.item() == doctest::Approx(5.0));
    backward(loss);
    CHECK(w.grad() == std::vector<double>{2, -4});
}

TEST_CASE("sigmoid is stable at extreme logits") {
    Tensor x = Tensor::from({4}, {0.0, 800.0, -800.0, 30.0});
    Tensor y = sigmoid(x);
    CHECK(y.data()[0] == doctest::Approx(0.5));
    CHECK(std::isfinite(y.data()[1]));
    CHECK(std::isfinite(y.data()[2]));
    CHECK(y.data()[1] <= 1.0);
    CHECK(y.data()[2] >= 0.0);
    CHECK(y.data()[3] == doctest::Approx(1.0).epsilon(1e-9));

    Tensor z = leaf({1}, {0.0});
    Tensor s = sigmoid(z);
    backward(sum(s));
    CHECK(z.grad()[0] == doctest::Approx(0.25));
}

TEST_CASE("clamp forwards and blocks gradient outside range") {
    Tensor x = leaf({4}, {-1.0, 0.5, 2.0, 0.0});
    Tensor y = clamp(x, 0.0, 1.0);
    CHECK(y.data() == std::vector<double>{0.0, 0.5, 1.0, 0.0});
    backward(sum(y));
    // pass-through exactly on lo <= x <= hi, boundary included
    CHECK(x.grad() == std::vector<double>{0, 1, 0, 1});
}

TEST_CASE("exp/log/sqrt roundtrip and log gradient") {
    Tensor x = leaf({3}, {0.5, 1.0, 2.0});
    Tensor y = log(exp(x));
    for (int i = 0; i < 3; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));
    backward(sum(log(x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(1.0));
    CHECK(x.grad()[2] == doctest::Approx(0.5));
}

TEST_CASE("reshape and permute preserve values exactly") {
    Tensor x = leaf({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor r = reshape(x, {3, 2});
    CHECK(r.data() == x.data());
    CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeError);

    Tensor t = permute_axes(x, {1, 0});  // transpose
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.data() == std::vector<double>{1, 4, 2, 5, 3, 6});
    backward(sum(mul(t, t)));
    CHECK(x.grad() == std::vector<double>{2, 4, 6, 8, 10, 12});
    CHECK_THROWS_AS(permute_axes(x, {0, 0}), ContractError);
}

TEST_CASE("gather with repeated indices scatter-adds on backward") {
    Tensor x = leaf({2}, {10, 20});
    Tensor g = gather(x, {1, 1, 0}, {3});
    CHECK(g.data() == std::vector<double>{20, 20, 10});
    backward(sum(g));
    CHECK(x.grad() == std::vector<double>{1, 2});
    CHECK_THROWS_AS(gather(x, {2}, {1}), ContractError);
}

TEST_CASE("attention: uniform logits average values; rows are stochastic") {
    // T=2, D=1, q=k=0 -> uniform attention -> output is the mean of v.
    Tensor q = Tensor::zeros({1, 2, 1});
    Tensor k = Tensor::zeros({1, 2, 1});
    Tensor v = Tensor::from({1, 2, 1}, {3.0, 5.0});
    Tensor o = softmax_attention(q, k, v);
    CHECK(o.data()[0] == doctest::Approx(4.0));
    CHECK(o.data()[1] == doctest::Approx(4.0));

    // Row-stochastic weights: with v == 1 the output must be exactly 1.
    Rng rng(7);
    Tensor q2 = Tensor::randn({2, 4, 3}, rng, 1.0);
    Tensor k2 = Tensor::randn({2, 4, 3}, rng, 1.0);
    Tensor ones = Tensor::full({2, 4, 3}, 1.0);
    Tensor o2 = softmax_attention(q2, k2, ones);
    for (double x : o2.data()) CHECK(std::abs(x - 1.0) <= 1e-12);

    CHECK_THROWS_AS(softmax_attention(q2, k2, Tensor::zeros({2, 4, 2})), ShapeError);
}

TEST_CASE("diamond reuse accumulates gradient once per path") {
    Tensor x = leaf({1}, {3.0});
    Tensor a = mul(x, 2.0);
    Tensor b = mul(x, 3.0);
    Tensor c = add(a, b);
    backward(sum(c));
    CHECK(x.grad()[0] == doctest::Approx(5.0));

    Tensor y = leaf({1}, {2.0});
    Tensor s = mul(y, y);       // y^2, y used twice by one op
    Tensor t = add(s, s);       // s used twice
    backward(sum(t));           // d/dy 2y^2 = 4y = 8
    CHECK(y.grad()[0] == doctest::Approx(8.0));
}

TEST_CASE("backward contract: scalar only, one pass per graph") {
    Tensor x = leaf({2}, {1, 2});
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(backward(y), ContractError);  // non-scalar

    Tensor loss = sum(y);
    backward(loss);
    CHECK_THROWS_AS(backward(loss), StateError);  // consumed

    // Building on top of a consumed graph is also a state error.
    Tensor more = mul(loss, 2.0);
    CHECK_THROWS_AS(backward(more), StateError);
}

TEST_CASE("unreachable parameter keeps no gradient") {
    Tensor used = leaf({2}, {1, 2});
    Tensor unused = leaf({2}, {5, 5});
    Tensor loss = sum(mul(used, used));
    backward(loss);
    CHECK(used.has_grad());
    CHECK_FALSE(unused.has_grad());
    CHECK_THROWS_AS(unused.grad(), StateError);
}

TEST_CASE("gradients accumulate across backward passes until zero_grad") {
    Tensor w = leaf({1}, {2.0});
    backward(sum(mul(w, w)));
    CHECK(w.grad()[0] == doctest::Approx(4.0));
    backward(sum(mul(w, w)));  // second, fresh graph
    CHECK(w.grad()[0] == doctest::Approx(8.0));
    w.zero_grad();
    CHECK_FALSE(w.has_grad());
}

TEST_CASE("inference on frozen tensors records nothing") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});  // requires_grad=false
    Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
    Tensor c = matmul(a, b);
    CHECK_FALSE(c.requires_grad());
    CHECK_FALSE(c.impl()->is_recorded());
    // And it is safe to run concurrently on shared frozen inputs.
    std::vector<std::vector<double>> results(4);
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t)
        threads.emplace_back([&, t] {
            Tensor r = matmul(a, b);
            for (int i = 0; i < 16; ++i) r = sigmoid(add(r, mul(c, 0.0)));
            results[t] = r.data();
        });
    for (auto& th : threads) th.join();
    for (int t = 1; t < 4; ++t) CHECK(results[t] == results[0]);
}

TEST_CASE("scalar constructors and item contract") {
    Tensor s = Tensor::scalar(3.5);
    CHECK(s.item() == doctest::Approx(3.5));
    CHECK_THROWS_AS(Tensor::zeros({2}).item(), ContractError);
    CHECK_THROWS_AS(Tensor::from({3}, {1, 2}), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({0}), ShapeError);
}

TEST_CASE("finite-difference suite over every op") {
    auto stats = gradcheck::run_all_ops(/*rounds=*/20);
    CHECK(stats.ops == 17);
    CHECK(stats.instances == 17 * 20);
    CHECK(stats.max_rel < 1e-4);
}
