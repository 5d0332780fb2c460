#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "jointseg/errors.hpp"
#include "jointseg/rng.hpp"

namespace jointseg {

// Row-major dense shapes. Rank 0 is not used; scalars are shape {1}.
using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

struct TensorImpl;

// Tensor: a handle (shared_ptr) to a dense double buffer plus the reverse-mode
// autodiff record. Semantics:
//   * Ops never mutate their inputs; every op allocates a fresh result.
//   * A result participates in the tape iff some input requires grad. Pure
//     inference on frozen parameters records nothing and allocates no tape.
//   * backward() walks the recorded graph exactly once in reverse creation
//     order (creation order == append order since inputs exist before the op
//     that consumes them), accumulating into .grad of every reachable tensor
//     that requires grad. Running backward twice through the same graph is a
//     StateError.
class Tensor {
public:
    Tensor();  // empty handle; most calls on it throw

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    // iid samples from rng: normal(0, stddev) / truncated normal / uniform.
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);
    static Tensor trunc_normal(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int64_t numel() const;
    int64_t rank() const;

    const std::vector<double>& data() const;
    std::vector<double>& mutable_data();  // leaves only (optimizer updates)

    bool requires_grad() const;
    Tensor& set_requires_grad(bool v);  // leaves only

    bool has_grad() const;                  // grad buffer materialized?
    const std::vector<double>& grad() const;  // throws if !has_grad()
    void zero_grad();                       // drops the grad buffer

    double item() const;  // numel()==1 only

    // Internal: used by ops and backward.
    std::shared_ptr<TensorImpl> impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<TensorImpl> impl_;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::unique_ptr<std::vector<double>> grad;  // lazily materialized

    // Tape record (empty on leaves and on untracked results).
    uint64_t seq = 0;  // global creation counter; larger == created later
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;  // reads this->grad
    bool consumed = false;  // backward already ran through this node

    bool is_recorded() const { return static_cast<bool>(backward_fn); }
};

// ---- ops ----
// Binary elementwise ops broadcast on trailing dimensions (numpy rules
// restricted to: shapes align right; each aligned pair must be equal or one
// of them 1; missing leading dims act as 1).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor sub(double a, const Tensor& b);
Tensor mul(const Tensor& a, double b);

// Unary elementwise. Domains: log needs x > 0, sqrt needs x >= 0 (the
// gradient 1/(2 sqrt x) additionally needs x > 0); callers clamp first.
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// clamp passes gradient exactly where lo <= x <= hi and blocks it elsewhere.
Tensor clamp(const Tensor& x, double lo, double hi);

// Reductions over an explicit axis list (empty == all axes). Invalid or
// duplicate axes raise ContractError. max breaks ties toward the lowest
// flattened input index, so its gradient goes to exactly one element.
Tensor sum(const Tensor& x, const std::vector<int>& axes = {}, bool keepdims = false);
Tensor mean(const Tensor& x, const std::vector<int>& axes = {}, bool keepdims = false);
Tensor max(const Tensor& x, const std::vector<int>& axes = {}, bool keepdims = false);

// Strictly 2-D matrix product [m,k]x[k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

// Fused scaled-dot-product attention. q,k,v: [heads, tokens, head_dim].
// Returns softmax(q k^T / sqrt(head_dim)) v, saving the attention weights for
// the backward pass. Softmax rows sum to 1 within 1e-12 by construction
// (max-subtracted exp normalized by its own sum).
Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Row-major reshape (same numel).
Tensor reshape(const Tensor& x, Shape new_shape);
// Axis permutation, e.g. {1,0,2}.
Tensor permute_axes(const Tensor& x, const std::vector<int>& perm);
// out[i] = x.flat[indices[i]]; backward scatter-adds. indices must be in
// range; out_shape.numel() == indices.size(). This is the primitive behind
// patchify/unpatchify.
Tensor gather(const Tensor& x, const std::vector<int64_t>& indices, Shape out_shape);

// Reverse-mode sweep from a scalar loss. ContractError if loss is not scalar,
// StateError if the graph was already consumed.
void backward(const Tensor& loss);

}  // namespace jointseg
