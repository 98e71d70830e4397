#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mscc/common.hpp"

namespace mscc {

using Shape = std::vector<i64>;

i64 numel_of(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

/// One tape node: the value buffer plus the links and rule needed to replay
/// the backward pass. Parent links make the tape; it is acyclic because ops
/// only ever point at already-built nodes.
struct Node {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated on first use, same extent as data
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // pulls this->grad into parents
    const char* op = "leaf";

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

/// Dense float64 tensor, row-major contiguous, at most 5 axes. A Tensor is a
/// cheap handle; copies alias the same node. Values are immutable once an op
/// has produced them — only leaf parameters are edited in place, between
/// optimizer steps. Ops record backward rules when any input requires grad.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from_data(Shape shape, std::vector<double> data);
    static Tensor scalar(double value);  // shape {1}

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    i64 dim(int axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }
    i64 numel() const { return static_cast<i64>(impl_->data.size()); }

    std::span<const double> data() const { return impl_->data; }
    /// Mutable view of the value buffer. Reserved for leaf parameters and
    /// plain data tensors; editing an op output invalidates the tape.
    std::span<double> data_mut() { return impl_->data; }

    double item() const;
    double at(std::initializer_list<i64> idx) const;

    Tensor& set_requires_grad(bool value = true);
    bool requires_grad() const { return impl_->requires_grad; }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const;
    void zero_grad();

    /// Reverse-mode sweep from a scalar. Visits every reachable tape node
    /// exactly once; gradient accumulation is additive, both across fan-out
    /// within one sweep and across repeated sweeps.
    void backward() const;

    bool all_finite() const;

    detail::Node* node() const { return impl_.get(); }

    static Tensor wrap(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.impl_ = std::move(n);
        return t;
    }
    const std::shared_ptr<detail::Node>& impl() const { return impl_; }

private:
    std::shared_ptr<detail::Node> impl_;
};

// Elementwise ops with trailing-axis broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double s);
Tensor sub(const Tensor& a, double s);
Tensor mul(const Tensor& a, double s);
Tensor relu(const Tensor& a);

/// Batched matrix product: [..,p,q] x [..,q,r] -> [..,p,r]; leading extents
/// must match exactly.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Cross-correlation of x[C_in,h,w] with kernel[C_out,C_in,kh,kw].
Tensor conv2d(const Tensor& x, const Tensor& kernel, i64 stride, i64 pad);

/// Numerically stabilized softmax along one axis; slices sum to 1.
Tensor softmax(const Tensor& x, int axis);

Tensor upsample_bilinear(const Tensor& x, i64 factor);  // [C,h,w] -> [C,h*f,w*f]
Tensor avg_pool2d(const Tensor& x, i64 factor);         // [C,h,w] -> [C,h/f,w/f]
Tensor global_avg_pool(const Tensor& x);                // [C,h,w] -> [C]

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor slice(const Tensor& x, int axis, i64 start, i64 len);
Tensor concat(const std::vector<Tensor>& parts, int axis);

Tensor sum(const Tensor& x);   // -> shape {1}
Tensor mean(const Tensor& x);  // -> shape {1}

/// Mean cross-entropy of softmax(logits) along `axis` against one integer
/// class id per remaining position (positions enumerated row-major).
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<i64>& targets, int axis);

}  // namespace mscc
