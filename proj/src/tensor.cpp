#include "jointseg/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace jointseg {

namespace {

std::atomic<uint64_t> g_seq{1};

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

std::vector<double>& grad_buf(TensorImpl& t) {
    if (!t.grad) t.grad = std::make_unique<std::vector<double>>(shape_numel(t.shape), 0.0);
    return *t.grad;
}

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<double> data) {
    auto impl = std::make_shared<TensorImpl>();
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
        throw ShapeError("tensor data size " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    return impl;
}

// Wrap an op result: the tape records parents + backward_fn only when some
// input requires grad, so pure inference stays pure.
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(TensorImpl&)> backward_fn) {
    auto impl = new_impl(std::move(shape), std::move(data));
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    impl->requires_grad = rg;
    if (rg) {
        for (const auto& in : inputs) impl->parents.push_back(in.impl());
        impl->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(impl));
}

void check_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

// ---- broadcasting ----

Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Row-major strides of `in` aligned to the trailing dims of `out`, with 0
// where `in` is broadcast.
std::vector<int64_t> aligned_strides(const Shape& in, const Shape& out) {
    std::vector<int64_t> st(out.size(), 0);
    int64_t stride = 1;
    for (size_t i = 0; i < in.size(); ++i) {
        size_t d = in.size() - 1 - i;            // dim of `in`
        size_t od = out.size() - 1 - i;          // aligned dim of `out`
        st[od] = (in[d] == 1 && out[od] != 1) ? 0 : stride;
        stride *= in[d];
    }
    return st;
}

// Visit every output element of a broadcast binary op in ascending flat
// order; f(out_flat, a_flat, b_flat). Odometer iteration, no div/mod.
template <typename F>
void for_each_bcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
    int64_t n = shape_numel(out);
    auto sa = aligned_strides(a, out);
    auto sb = aligned_strides(b, out);
    size_t r = out.size();
    std::vector<int64_t> idx(r, 0);
    int64_t oa = 0, ob = 0;
    for (int64_t o = 0; o < n; ++o) {
        f(o, oa, ob);
        for (size_t d = r; d-- > 0;) {
            ++idx[d];
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < out[d]) break;
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

// Generic broadcast binary op. fwd(a,b)->out; bwd accumulates into da/db
// given (go, a, b) per element. Backward iterates outputs in ascending order,
// so reductions over broadcast axes are deterministic.
template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
    check_defined(a, name);
    check_defined(b, name);
    Shape out_shape = broadcast_shape(a.shape(), b.shape());
    std::vector<double> out(shape_numel(out_shape));
    const auto& ad = a.data();
    const auto& bd = b.data();
    for_each_bcast(out_shape, a.shape(), b.shape(),
                   [&](int64_t o, int64_t i, int64_t j) { out[o] = fwd(ad[i], bd[j]); });
    auto ai = a.impl();
    auto bi = b.impl();
    Shape ash = a.shape(), bsh = b.shape();
    return make_result(
        out_shape, std::move(out), {a, b},
        [ai, bi, ash, bsh, bwd_a, bwd_b](TensorImpl& self) {
            const auto& go = *self.grad;
            std::vector<double>* ga = ai->requires_grad ? &grad_buf(*ai) : nullptr;
            std::vector<double>* gb = bi->requires_grad ? &grad_buf(*bi) : nullptr;
            for_each_bcast(self.shape, ash, bsh, [&](int64_t o, int64_t i, int64_t j) {
                if (ga) (*ga)[i] += bwd_a(go[o], ai->data[i], bi->data[j]);
                if (gb) (*gb)[j] += bwd_b(go[o], ai->data[i], bi->data[j]);
            });
        });
}

// Generic elementwise unary op; bwd(go, x, y) where y is the forward output.
template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Bwd bwd) {
    check_defined(x, name);
    std::vector<double> out(x.numel());
    const auto& xd = x.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
    auto xi = x.impl();
    return make_result(x.shape(), std::move(out), {x}, [xi, bwd](TensorImpl& self) {
        if (!xi->requires_grad) return;
        const auto& go = *self.grad;
        auto& gx = grad_buf(*xi);
        for (size_t i = 0; i < go.size(); ++i) gx[i] += bwd(go[i], xi->data[i], self.data[i]);
    });
}

std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t stride = 1;
    for (size_t d = s.size(); d-- > 0;) {
        st[d] = stride;
        stride *= s[d];
    }
    return st;
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

// ---- Tensor handle ----

Tensor::Tensor() = default;

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    int64_t n = shape_numel(shape);
    auto impl = new_impl(std::move(shape), std::vector<double>(n, value));
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    auto impl = new_impl(std::move(shape), std::move(values));
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    int64_t n = shape_numel(shape);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal() * stddev;
    return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::trunc_normal(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    int64_t n = shape_numel(shape);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.truncated_normal(stddev);
    return from(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!impl_) throw ContractError("shape() on undefined tensor");
    return impl_->shape;
}

int64_t Tensor::numel() const { return shape_numel(shape()); }
int64_t Tensor::rank() const { return static_cast<int64_t>(shape().size()); }

const std::vector<double>& Tensor::data() const {
    if (!impl_) throw ContractError("data() on undefined tensor");
    return impl_->data;
}

std::vector<double>& Tensor::mutable_data() {
    if (!impl_) throw ContractError("mutable_data() on undefined tensor");
    if (impl_->is_recorded())
        throw StateError("mutable_data() is for leaves; op results are immutable");
    return impl_->data;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
    if (!impl_) throw ContractError("set_requires_grad() on undefined tensor");
    if (impl_->is_recorded()) throw StateError("set_requires_grad() is for leaves only");
    impl_->requires_grad = v;
    return *this;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad != nullptr; }

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw StateError("grad() called but no gradient was accumulated");
    return *impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.reset();
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() needs a one-element tensor, got " + shape_str(shape()));
    return data()[0];
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double g, double, double y) { return g * y; },
        [](double g, double x, double) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double g, double, double y) { return g / y; },
        [](double g, double x, double y) { return -g * x / (y * y); });
}

Tensor add(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor sub(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
Tensor mul(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }

Tensor exp(const Tensor& x) {
    return unary_op(
        "exp", x, [](double v) { return std::exp(v); },
        [](double g, double, double y) { return g * y; });
}

Tensor log(const Tensor& x) {
    return unary_op(
        "log", x, [](double v) { return std::log(v); },
        [](double g, double v, double) { return g / v; });
}

Tensor sqrt(const Tensor& x) {
    return unary_op(
        "sqrt", x, [](double v) { return std::sqrt(v); },
        [](double g, double, double y) { return g / (2.0 * y); });
}

Tensor sigmoid(const Tensor& x) {
    // Stable two-branch form; never overflows.
    return unary_op(
        "sigmoid", x,
        [](double v) {
            if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
            double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double g, double, double y) { return g * y * (1.0 - y); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (lo > hi) throw ContractError("clamp: lo > hi");
    return unary_op(
        "clamp", x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](double g, double v, double) { return (v >= lo && v <= hi) ? g : 0.0; });
}

// ---- reductions ----

namespace {

struct ReducePlan {
    Shape out_shape;           // result shape (keepdims applied)
    std::vector<int64_t> map;  // input flat index -> output flat index
    int64_t group = 1;         // elements reduced per output slot
};

ReducePlan reduce_plan(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
    const Shape& in = x.shape();
    int rank = static_cast<int>(in.size());
    std::vector<bool> red(rank, false);
    if (axes.empty()) {
        red.assign(rank, true);
    } else {
        for (int a : axes) {
            if (a < 0 || a >= rank)
                throw ContractError("reduce: axis " + std::to_string(a) + " out of range for " + shape_str(in));
            if (red[a]) throw ContractError("reduce: duplicate axis " + std::to_string(a));
            red[a] = true;
        }
    }
    ReducePlan plan;
    Shape kept = in;
    for (int d = 0; d < rank; ++d)
        if (red[d]) {
            plan.group *= in[d];
            kept[d] = 1;
        }
    if (keepdims) {
        plan.out_shape = kept;
    } else {
        for (int d = 0; d < rank; ++d)
            if (!red[d]) plan.out_shape.push_back(in[d]);
        if (plan.out_shape.empty()) plan.out_shape = {1};
    }
    // Input flat -> output flat via strides that are 0 on reduced dims.
    auto out_strides = row_major_strides(kept);
    for (int d = 0; d < rank; ++d)
        if (red[d]) out_strides[d] = 0;
    // Compact the kept strides to the actual packed output layout.
    // kept layout already matches: kept dims sized 1 contribute stride*idx=0.
    plan.map.resize(x.numel());
    std::vector<int64_t> idx(rank, 0);
    int64_t o = 0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        plan.map[i] = o;
        for (int d = rank; d-- > 0;) {
            ++idx[d];
            o += out_strides[d];
            if (idx[d] < in[d]) break;
            o -= out_strides[d] * in[d];
            idx[d] = 0;
        }
    }
    return plan;
}

}  // namespace

Tensor sum(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
    check_defined(x, "sum");
    auto plan = reduce_plan(x, axes, keepdims);
    std::vector<double> out(shape_numel(plan.out_shape), 0.0);
    const auto& xd = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) out[plan.map[i]] += xd[i];
    auto xi = x.impl();
    auto map = std::make_shared<std::vector<int64_t>>(std::move(plan.map));
    return make_result(plan.out_shape, std::move(out), {x}, [xi, map](TensorImpl& self) {
        if (!xi->requires_grad) return;
        const auto& go = *self.grad;
        auto& gx = grad_buf(*xi);
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[(*map)[i]];
    });
}

Tensor mean(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
    check_defined(x, "mean");
    auto plan = reduce_plan(x, axes, keepdims);
    double inv = 1.0 / static_cast<double>(plan.group);
    std::vector<double> out(shape_numel(plan.out_shape), 0.0);
    const auto& xd = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) out[plan.map[i]] += xd[i];
    for (auto& v : out) v *= inv;
    auto xi = x.impl();
    auto map = std::make_shared<std::vector<int64_t>>(std::move(plan.map));
    return make_result(plan.out_shape, std::move(out), {x}, [xi, map, inv](TensorImpl& self) {
        if (!xi->requires_grad) return;
        const auto& go = *self.grad;
        auto& gx = grad_buf(*xi);
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[(*map)[i]] * inv;
    });
}

Tensor max(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
    check_defined(x, "max");
    auto plan = reduce_plan(x, axes, keepdims);
    int64_t out_n = shape_numel(plan.out_shape);
    std::vector<double> out(out_n);
    // argmax per slot; strict > keeps the lowest flat input index on ties.
    auto arg = std::make_shared<std::vector<int64_t>>(out_n, -1);
    const auto& xd = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) {
        int64_t o = plan.map[i];
        if ((*arg)[o] < 0 || xd[i] > out[o]) {
            out[o] = xd[i];
            (*arg)[o] = i;
        }
    }
    auto xi = x.impl();
    return make_result(plan.out_shape, std::move(out), {x}, [xi, arg](TensorImpl& self) {
        if (!xi->requires_grad) return;
        const auto& go = *self.grad;
        auto& gx = grad_buf(*xi);
        for (size_t o = 0; o < go.size(); ++o) gx[(*arg)[o]] += go[o];
    });
}

// ---- matmul & attention ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul needs rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    int64_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul inner dims differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    std::vector<double> out(m * n);
    {
        CMap A(a.data().data(), m, k), B(b.data().data(), k, n);
        MMap C(out.data(), m, n);
        C.noalias() = A * B;
    }
    auto ai = a.impl();
    auto bi = b.impl();
    return make_result({m, n}, std::move(out), {a, b}, [ai, bi, m, k, n](TensorImpl& self) {
        CMap G(self.grad->data(), m, n);
        CMap A(ai->data.data(), m, k), B(bi->data.data(), k, n);
        if (ai->requires_grad) {
            MMap GA(grad_buf(*ai).data(), m, k);
            GA.noalias() += G * B.transpose();
        }
        if (bi->requires_grad) {
            MMap GB(grad_buf(*bi).data(), k, n);
            GB.noalias() += A.transpose() * G;
        }
    });
}

Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    check_defined(q, "softmax_attention");
    check_defined(k, "softmax_attention");
    check_defined(v, "softmax_attention");
    if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape())
        throw ShapeError("softmax_attention needs equal [heads,tokens,dim] shapes, got " +
                         shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                         shape_str(v.shape()));
    int64_t H = q.shape()[0], T = q.shape()[1], D = q.shape()[2];
    double scale = 1.0 / std::sqrt(static_cast<double>(D));
    std::vector<double> out(H * T * D);
    auto attn = std::make_shared<std::vector<double>>(H * T * T);  // saved weights
    for (int64_t h = 0; h < H; ++h) {
        CMap Q(q.data().data() + h * T * D, T, D), K(k.data().data() + h * T * D, T, D),
            V(v.data().data() + h * T * D, T, D);
        MMap A(attn->data() + h * T * T, T, T);
        A.noalias() = Q * K.transpose() * scale;
        for (int64_t r = 0; r < T; ++r) {
            double mx = A(r, 0);
            for (int64_t c = 1; c < T; ++c) mx = std::max(mx, A(r, c));
            double s = 0.0;
            for (int64_t c = 0; c < T; ++c) {
                double e = std::exp(A(r, c) - mx);
                A(r, c) = e;
                s += e;
            }
            for (int64_t c = 0; c < T; ++c) A(r, c) /= s;
        }
        MMap O(out.data() + h * T * D, T, D);
        O.noalias() = A * V;
    }
    auto qi = q.impl();
    auto ki = k.impl();
    auto vi = v.impl();
    return make_result(q.shape(), std::move(out), {q, k, v},
                       [qi, ki, vi, attn, H, T, D, scale](TensorImpl& self) {
        for (int64_t h = 0; h < H; ++h) {
            CMap GO(self.grad->data() + h * T * D, T, D);
            CMap A(attn->data() + h * T * T, T, T);
            CMap Q(qi->data.data() + h * T * D, T, D), K(ki->data.data() + h * T * D, T, D),
                V(vi->data.data() + h * T * D, T, D);
            if (vi->requires_grad) {
                MMap GV(grad_buf(*vi).data() + h * T * D, T, D);
                GV.noalias() += A.transpose() * GO;
            }
            if (qi->requires_grad || ki->requires_grad) {
                EMat GA = GO * V.transpose();                      // [T,T]
                EMat GS(T, T);                                     // grad wrt logits
                for (int64_t r = 0; r < T; ++r) {
                    double dot = 0.0;
                    for (int64_t c = 0; c < T; ++c) dot += GA(r, c) * A(r, c);
                    for (int64_t c = 0; c < T; ++c) GS(r, c) = A(r, c) * (GA(r, c) - dot);
                }
                if (qi->requires_grad) {
                    MMap GQ(grad_buf(*qi).data() + h * T * D, T, D);
                    GQ.noalias() += GS * K * scale;
                }
                if (ki->requires_grad) {
                    MMap GK(grad_buf(*ki).data() + h * T * D, T, D);
                    GK.noalias() += GS.transpose() * Q * scale;
                }
            }
        }
    });
}

// ---- movement ----

Tensor reshape(const Tensor& x, Shape new_shape) {
    check_defined(x, "reshape");
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                         " changes element count");
    std::vector<double> out = x.data();
    auto xi = x.impl();
    return make_result(std::move(new_shape), std::move(out), {x}, [xi](TensorImpl& self) {
        if (!xi->requires_grad) return;
        const auto& go = *self.grad;
        auto& gx = grad_buf(*xi);
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
    });
}

Tensor permute_axes(const Tensor& x, const std::vector<int>& perm) {
    check_defined(x, "permute_axes");
    int rank = static_cast<int>(x.rank());
    if (static_cast<int>(perm.size()) != rank)
        throw ContractError("permute_axes: perm size != rank");
    std::vector<bool> seen(rank, false);
    for (int p : perm) {
        if (p < 0 || p >= rank || seen[p]) throw ContractError("permute_axes: invalid permutation");
        seen[p] = true;
    }
    const Shape& in = x.shape();
    Shape out_shape(rank);
    for (int d = 0; d < rank; ++d) out_shape[d] = in[perm[d]];
    auto in_strides = row_major_strides(in);
    std::vector<int64_t> step(rank);
    for (int d = 0; d < rank; ++d) step[d] = in_strides[perm[d]];
    int64_t n = x.numel();
    // Map output flat index -> input flat index (odometer over output dims).
    auto idx_map = std::make_shared<std::vector<int64_t>>(n);
    {
        std::vector<int64_t> idx(rank, 0);
        int64_t off = 0;
        for (int64_t o = 0; o < n; ++o) {
            (*idx_map)[o] = off;
            for (int d = rank; d-- > 0;) {
                ++idx[d];
                off += step[d];
                if (idx[d] < out_shape[d]) break;
                off -= step[d] * out_shape[d];
                idx[d] = 0;
            }
        }
    }
    std::vector<double> out(n);
    const auto& xd = x.data();
    for (int64_t o = 0; o < n; ++o) out[o] = xd[(*idx_map)[o]];
    auto xi = x.impl();
    return make_result(std::move(out_shape), std::move(out), {x}, [xi, idx_map](TensorImpl& self) {
        if (!xi->requires_grad) return;
        const auto& go = *self.grad;
        auto& gx = grad_buf(*xi);
        for (size_t o = 0; o < go.size(); ++o) gx[(*idx_map)[o]] += go[o];
    });
}

Tensor gather(const Tensor& x, const std::vector<int64_t>& indices, Shape out_shape) {
    check_defined(x, "gather");
    if (shape_numel(out_shape) != static_cast<int64_t>(indices.size()))
        throw ShapeError("gather: out shape " + shape_str(out_shape) + " needs " +
                         std::to_string(indices.size()) + " indices");
    int64_t n = x.numel();
    for (int64_t i : indices)
        if (i < 0 || i >= n) throw ContractError("gather: index " + std::to_string(i) + " out of range");
    std::vector<double> out(indices.size());
    const auto& xd = x.data();
    for (size_t i = 0; i < indices.size(); ++i) out[i] = xd[indices[i]];
    auto xi = x.impl();
    auto idx = std::make_shared<std::vector<int64_t>>(indices);
    return make_result(std::move(out_shape), std::move(out), {x}, [xi, idx](TensorImpl& self) {
        if (!xi->requires_grad) return;
        const auto& go = *self.grad;
        auto& gx = grad_buf(*xi);
        for (size_t i = 0; i < go.size(); ++i) gx[(*idx)[i]] += go[i];
    });
}

// ---- backward ----

void backward(const Tensor& loss) {
    if (!loss.defined()) throw ContractError("backward: undefined tensor");
    if (loss.numel() != 1)
        throw ContractError("backward needs a scalar loss, got " + shape_str(loss.shape()));
    // Collect the reachable graph.
    std::vector<std::shared_ptr<TensorImpl>> nodes;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::shared_ptr<TensorImpl>> stack{loss.impl()};
    while (!stack.empty()) {
        auto cur = stack.back();
        stack.pop_back();
        if (!seen.insert(cur.get()).second) continue;
        if (cur->is_recorded() && cur->consumed)
            throw StateError("backward: graph already consumed by an earlier backward pass");
        nodes.push_back(cur);
        for (auto& p : cur->parents) stack.push_back(p);
    }
    // Reverse creation order == reverse append order: every node is created
    // after all of its parents, so descending seq is a valid topological
    // order and each node is visited exactly once.
    std::sort(nodes.begin(), nodes.end(),
              [](const auto& a, const auto& b) { return a->seq > b->seq; });
    grad_buf(*loss.impl())[0] += 1.0;
    for (auto& node : nodes) {
        if (node->is_recorded()) {
            if (node->grad) node->backward_fn(*node);
            node->consumed = true;
        }
    }
    loss.impl()->consumed = true;
}

}  // namespace jointseg
