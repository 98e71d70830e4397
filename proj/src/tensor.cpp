#include "mscc/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "mscc/kernels.hpp"

namespace mscc {

namespace {

constexpr int kMaxRank = 5;

void check_shape(const Shape& s) {
    require(!s.empty() && s.size() <= kMaxRank, "tensor rank must be 1..5, got " + shape_str(s));
    for (i64 d : s) require(d >= 1, "tensor extents must be positive, got " + shape_str(s));
}

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> data) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return n;
}

bool wants_grad(const Tensor& t) { return t.node()->requires_grad; }

// Trailing-axis broadcast: align shapes at the last axis, extents must match
// or be 1 (missing leading axes count as 1).
Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
    const int ro = std::max(ra, rb);
    Shape out(static_cast<std::size_t>(ro));
    for (int i = 0; i < ro; ++i) {
        const i64 da = i < ra ? a[static_cast<std::size_t>(ra - 1 - i)] : 1;
        const i64 db = i < rb ? b[static_cast<std::size_t>(rb - 1 - i)] : 1;
        if (da != db && da != 1 && db != 1)
            throw ContractViolation(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                    shape_str(b) + " do not broadcast");
        out[static_cast<std::size_t>(ro - 1 - i)] = std::max(da, db);
    }
    return out;
}

std::array<i64, kMaxRank> strides_of(const Shape& s) {
    std::array<i64, kMaxRank> st{};
    i64 acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<std::size_t>(i)] = acc;
        acc *= s[static_cast<std::size_t>(i)];
    }
    return st;
}

// Per-out-axis strides into an operand, zero where the operand broadcasts.
std::array<i64, kMaxRank> bcast_strides(const Shape& out, const Shape& in) {
    const int ro = static_cast<int>(out.size()), ri = static_cast<int>(in.size());
    const auto ist = strides_of(in);
    std::array<i64, kMaxRank> st{};
    for (int i = 0; i < ro; ++i) {
        const int j = i - (ro - ri);
        if (j < 0 || in[static_cast<std::size_t>(j)] == 1)
            st[static_cast<std::size_t>(i)] = 0;
        else
            st[static_cast<std::size_t>(i)] = ist[static_cast<std::size_t>(j)];
    }
    return st;
}

struct AddOp {
    static double apply(double x, double y) { return x + y; }
    static double da(double, double, double g) { return g; }
    static double db(double, double, double g) { return g; }
};
struct SubOp {
    static double apply(double x, double y) { return x - y; }
    static double da(double, double, double g) { return g; }
    static double db(double, double, double g) { return -g; }
};
struct MulOp {
    static double apply(double x, double y) { return x * y; }
    static double da(double, double y, double g) { return g * y; }
    static double db(double x, double, double g) { return g * x; }
};
struct DivOp {
    static double apply(double x, double y) { return x / y; }
    static double da(double, double y, double g) { return g / y; }
    static double db(double x, double y, double g) { return -g * x / (y * y); }
};

template <typename Op>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const bool same = sa == sb;
    Shape so = same ? sa : broadcast_shape(sa, sb, name);
    const i64 n = numel_of(so);
    std::vector<double> out(static_cast<std::size_t>(n));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    if (same) {
#pragma omp parallel for schedule(static) if (n > 16384)
        for (i64 i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = Op::apply(pa[i], pb[i]);
    } else {
        const int rank = static_cast<int>(so.size());
        const auto stA = bcast_strides(so, sa);
        const auto stB = bcast_strides(so, sb);
        std::array<i64, kMaxRank> idx{};
        i64 oa = 0, ob = 0;
        for (i64 i = 0; i < n; ++i) {
            out[static_cast<std::size_t>(i)] = Op::apply(pa[oa], pb[ob]);
            for (int ax = rank - 1; ax >= 0; --ax) {
                const auto u = static_cast<std::size_t>(ax);
                ++idx[u];
                oa += stA[u];
                ob += stB[u];
                if (idx[u] < so[u]) break;
                idx[u] = 0;
                oa -= stA[u] * so[u];
                ob -= stB[u] * so[u];
            }
        }
    }
    auto node = make_node(std::move(so), std::move(out));
    if (wants_grad(a) || wants_grad(b)) {
        node->requires_grad = true;
        node->parents = {a.impl(), b.impl()};
        node->op = name;
        node->backward_fn = [](detail::Node& nd) {
            detail::Node& A = *nd.parents[0];
            detail::Node& B = *nd.parents[1];
            const bool ga = A.requires_grad, gb = B.requires_grad;
            if (ga) A.ensure_grad();
            if (gb) B.ensure_grad();
            const i64 n2 = static_cast<i64>(nd.data.size());
            if (A.shape == B.shape) {
                for (i64 i = 0; i < n2; ++i) {
                    const double g = nd.grad[static_cast<std::size_t>(i)];
                    if (ga) A.grad[static_cast<std::size_t>(i)] += Op::da(A.data[static_cast<std::size_t>(i)], B.data[static_cast<std::size_t>(i)], g);
                    if (gb) B.grad[static_cast<std::size_t>(i)] += Op::db(A.data[static_cast<std::size_t>(i)], B.data[static_cast<std::size_t>(i)], g);
                }
            } else {
                const int rank = static_cast<int>(nd.shape.size());
                const auto stA = bcast_strides(nd.shape, A.shape);
                const auto stB = bcast_strides(nd.shape, B.shape);
                std::array<i64, kMaxRank> idx{};
                i64 oa = 0, ob = 0;
                for (i64 i = 0; i < n2; ++i) {
                    const double g = nd.grad[static_cast<std::size_t>(i)];
                    if (ga) A.grad[static_cast<std::size_t>(oa)] += Op::da(A.data[static_cast<std::size_t>(oa)], B.data[static_cast<std::size_t>(ob)], g);
                    if (gb) B.grad[static_cast<std::size_t>(ob)] += Op::db(A.data[static_cast<std::size_t>(oa)], B.data[static_cast<std::size_t>(ob)], g);
                    for (int ax = rank - 1; ax >= 0; --ax) {
                        const auto u = static_cast<std::size_t>(ax);
                        ++idx[u];
                        oa += stA[u];
                        ob += stB[u];
                        if (idx[u] < nd.shape[u]) break;
                        idx[u] = 0;
                        oa -= stA[u] * nd.shape[u];
                        ob -= stB[u] * nd.shape[u];
                    }
                }
            }
        };
    }
    return Tensor::wrap(std::move(node));
}

Tensor unary_scalar(const Tensor& a, double s, double (*fwd)(double, double), const char* name) {
    const i64 n = a.numel();
    std::vector<double> out(static_cast<std::size_t>(n));
    const double* pa = a.data().data();
    for (i64 i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = fwd(pa[i], s);
    auto node = make_node(a.shape(), std::move(out));
    if (wants_grad(a)) {
        node->requires_grad = true;
        node->parents = {a.impl()};
        node->op = name;
        const bool is_mul = std::strcmp(name, "mul_scalar") == 0;
        const double factor = is_mul ? s : 1.0;
        node->backward_fn = [factor](detail::Node& nd) {
            detail::Node& A = *nd.parents[0];
            A.ensure_grad();
            for (std::size_t i = 0; i < nd.data.size(); ++i) A.grad[i] += factor * nd.grad[i];
        };
    }
    return Tensor::wrap(std::move(node));
}

}  // namespace

i64 numel_of(const Shape& s) {
    i64 n = 1;
    for (i64 d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
    check_shape(shape);
    const auto n = static_cast<std::size_t>(numel_of(shape));
    return wrap(make_node(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
    check_shape(shape);
    require(numel_of(shape) == static_cast<i64>(data.size()),
            "from_data: " + shape_str(shape) + " does not hold " + std::to_string(data.size()) +
                " values");
    return wrap(make_node(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

double Tensor::item() const {
    require(defined() && numel() == 1, "item: tensor is not scalar");
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<i64> idx) const {
    require(static_cast<int>(idx.size()) == rank(), "at: index rank mismatch");
    const auto st = strides_of(impl_->shape);
    i64 off = 0;
    int ax = 0;
    for (i64 v : idx) {
        require(v >= 0 && v < impl_->shape[static_cast<std::size_t>(ax)], "at: index out of range");
        off += v * st[static_cast<std::size_t>(ax)];
        ++ax;
    }
    return impl_->data[static_cast<std::size_t>(off)];
}

Tensor& Tensor::set_requires_grad(bool value) {
    impl_->requires_grad = value;
    return *this;
}

std::span<const double> Tensor::grad() const {
    require(has_grad(), "grad: no gradient recorded");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

bool Tensor::all_finite() const {
    for (double v : impl_->data)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::backward() const {
    require(defined(), "backward: undefined tensor");
    require(numel() == 1, "backward: loss must be a scalar");
    require(impl_->requires_grad, "backward: tape is empty");

    // Post-order over the grad-requiring subgraph; reversed, every node is
    // processed after all of its consumers.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    struct Frame {
        detail::Node* n;
        std::size_t next;
    };
    std::vector<Frame> stack;
    visited.insert(impl_.get());
    stack.push_back({impl_.get(), 0});
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            detail::Node* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }
    impl_->ensure_grad();
    impl_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_op<AddOp>(a, b, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op<SubOp>(a, b, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op<MulOp>(a, b, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op<DivOp>(a, b, "div"); }

Tensor add(const Tensor& a, double s) {
    return unary_scalar(a, s, [](double x, double v) { return x + v; }, "add_scalar");
}
Tensor sub(const Tensor& a, double s) {
    return unary_scalar(a, s, [](double x, double v) { return x - v; }, "sub_scalar");
}
Tensor mul(const Tensor& a, double s) {
    return unary_scalar(a, s, [](double x, double v) { return x * v; }, "mul_scalar");
}

Tensor relu(const Tensor& a) {
    const i64 n = a.numel();
    std::vector<double> out(static_cast<std::size_t>(n));
    const double* pa = a.data().data();
    for (i64 i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = pa[i] > 0.0 ? pa[i] : 0.0;
    auto node = make_node(a.shape(), std::move(out));
    if (wants_grad(a)) {
        node->requires_grad = true;
        node->parents = {a.impl()};
        node->op = "relu";
        node->backward_fn = [](detail::Node& nd) {
            detail::Node& A = *nd.parents[0];
            A.ensure_grad();
            for (std::size_t i = 0; i < nd.data.size(); ++i)
                if (A.data[i] > 0.0) A.grad[i] += nd.grad[i];
        };
    }
    return Tensor::wrap(std::move(node));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() >= 2 && b.rank() >= 2, "matmul: operands must have rank >= 2");
    require(a.rank() == b.rank(), "matmul: rank mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
    const int r = a.rank();
    const i64 p = a.dim(r - 2), q = a.dim(r - 1);
    const i64 q2 = b.dim(r - 2), rr = b.dim(r - 1);
    require(q == q2, "matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    i64 batch = 1;
    Shape out_shape;
    for (int i = 0; i < r - 2; ++i) {
        require(a.dim(i) == b.dim(i), "matmul: batch extents differ, " + shape_str(a.shape()) +
                                          " x " + shape_str(b.shape()));
        batch *= a.dim(i);
        out_shape.push_back(a.dim(i));
    }
    out_shape.push_back(p);
    out_shape.push_back(rr);
    std::vector<double> out(static_cast<std::size_t>(batch * p * rr));
    kern::matmul(a.data().data(), b.data().data(), out.data(), batch, p, q, rr, false, false);
    auto node = make_node(std::move(out_shape), std::move(out));
    if (wants_grad(a) || wants_grad(b)) {
        node->requires_grad = true;
        node->parents = {a.impl(), b.impl()};
        node->op = "matmul";
        node->backward_fn = [batch, p, q, rr](detail::Node& nd) {
            detail::Node& A = *nd.parents[0];
            detail::Node& B = *nd.parents[1];
            if (A.requires_grad) {
                A.ensure_grad();
                std::vector<double> da(A.data.size());
                // dA = dC * B^T
                kern::matmul(nd.grad.data(), B.data.data(), da.data(), batch, p, rr, q, false,
                             true);
                for (std::size_t i = 0; i < da.size(); ++i) A.grad[i] += da[i];
            }
            if (B.requires_grad) {
                B.ensure_grad();
                std::vector<double> db(B.data.size());
                // dB = A^T * dC
                kern::matmul(A.data.data(), nd.grad.data(), db.data(), batch, q, p, rr, true,
                             false);
                for (std::size_t i = 0; i < db.size(); ++i) B.grad[i] += db[i];
            }
        };
    }
    return Tensor::wrap(std::move(node));
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, i64 stride, i64 pad) {
    require(x.rank() == 3, "conv2d: input must be [C,h,w], got " + shape_str(x.shape()));
    require(kernel.rank() == 4,
            "conv2d: kernel must be [C_out,C_in,kh,kw], got " + shape_str(kernel.shape()));
    require(kernel.dim(1) == x.dim(0), "conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                                           " input channels, got " + std::to_string(x.dim(0)));
    const auto spec = kern::Conv2dSpec::make(x.dim(0), x.dim(1), x.dim(2), kernel.dim(0),
                                             kernel.dim(2), kernel.dim(3), stride, pad);
    std::vector<double> out(static_cast<std::size_t>(spec.c_out * spec.out_h * spec.out_w));
    kern::conv2d_fwd(x.data().data(), kernel.data().data(), out.data(), spec);
    auto node = make_node({spec.c_out, spec.out_h, spec.out_w}, std::move(out));
    if (wants_grad(x) || wants_grad(kernel)) {
        node->requires_grad = true;
        node->parents = {x.impl(), kernel.impl()};
        node->op = "conv2d";
        node->backward_fn = [spec](detail::Node& nd) {
            detail::Node& X = *nd.parents[0];
            detail::Node& K = *nd.parents[1];
            if (X.requires_grad) {
                X.ensure_grad();
                std::vector<double> dx(X.data.size());
                kern::conv2d_bwd_input(nd.grad.data(), K.data.data(), dx.data(), spec);
                for (std::size_t i = 0; i < dx.size(); ++i) X.grad[i] += dx[i];
            }
            if (K.requires_grad) {
                K.ensure_grad();
                std::vector<double> dw(K.data.size());
                kern::conv2d_bwd_kernel(nd.grad.data(), X.data.data(), dw.data(), spec);
                for (std::size_t i = 0; i < dw.size(); ++i) K.grad[i] += dw[i];
            }
        };
    }
    return Tensor::wrap(std::move(node));
}

Tensor softmax(const Tensor& x, int axis) {
    require(axis >= 0 && axis < x.rank(), "softmax: axis out of range");
    require(x.all_finite(), "softmax: input must be finite");
    const i64 k = x.dim(axis);
    i64 outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    std::vector<double> out(static_cast<std::size_t>(x.numel()));
    const double* px = x.data().data();
    for (i64 o = 0; o < outer; ++o) {
        for (i64 in = 0; in < inner; ++in) {
            const i64 base = o * k * inner + in;
            double mx = px[base];
            for (i64 j = 1; j < k; ++j) mx = std::max(mx, px[base + j * inner]);
            double denom = 0.0;
            for (i64 j = 0; j < k; ++j) {
                const double e = std::exp(px[base + j * inner] - mx);
                out[static_cast<std::size_t>(base + j * inner)] = e;
                denom += e;
            }
            const double inv = 1.0 / denom;
            for (i64 j = 0; j < k; ++j) out[static_cast<std::size_t>(base + j * inner)] *= inv;
        }
    }
    auto node = make_node(x.shape(), std::move(out));
    if (wants_grad(x)) {
        node->requires_grad = true;
        node->parents = {x.impl()};
        node->op = "softmax";
        node->backward_fn = [k, outer, inner](detail::Node& nd) {
            detail::Node& X = *nd.parents[0];
            X.ensure_grad();
            for (i64 o = 0; o < outer; ++o) {
                for (i64 in = 0; in < inner; ++in) {
                    const i64 base = o * k * inner + in;
                    double dot = 0.0;
                    for (i64 j = 0; j < k; ++j) {
                        const auto u = static_cast<std::size_t>(base + j * inner);
                        dot += nd.grad[u] * nd.data[u];
                    }
                    for (i64 j = 0; j < k; ++j) {
                        const auto u = static_cast<std::size_t>(base + j * inner);
                        X.grad[u] += nd.data[u] * (nd.grad[u] - dot);
                    }
                }
            }
        };
    }
    return Tensor::wrap(std::move(node));
}

Tensor upsample_bilinear(const Tensor& x, i64 factor) {
    require(x.rank() == 3, "upsample_bilinear: input must be [C,h,w]");
    require(factor >= 1, "upsample_bilinear: factor must be >= 1");
    const i64 c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::vector<double> out(static_cast<std::size_t>(c * h * factor * w * factor));
    kern::upsample_bilinear_fwd(x.data().data(), out.data(), c, h, w, factor);
    auto node = make_node({c, h * factor, w * factor}, std::move(out));
    if (wants_grad(x)) {
        node->requires_grad = true;
        node->parents = {x.impl()};
        node->op = "upsample_bilinear";
        node->backward_fn = [c, h, w, factor](detail::Node& nd) {
            detail::Node& X = *nd.parents[0];
            X.ensure_grad();
            std::vector<double> dx(X.data.size());
            kern::upsample_bilinear_bwd(nd.grad.data(), dx.data(), c, h, w, factor);
            for (std::size_t i = 0; i < dx.size(); ++i) X.grad[i] += dx[i];
        };
    }
    return Tensor::wrap(std::move(node));
}

Tensor avg_pool2d(const Tensor& x, i64 factor) {
    require(x.rank() == 3, "avg_pool2d: input must be [C,h,w]");
    require(factor >= 1, "avg_pool2d: factor must be >= 1");
    const i64 c = x.dim(0), h = x.dim(1), w = x.dim(2);
    require_config(h % factor == 0 && w % factor == 0,
                   "avg_pool2d: spatial extents " + std::to_string(h) + "x" + std::to_string(w) +
                       " not divisible by factor " + std::to_string(factor));
    std::vector<double> out(static_cast<std::size_t>(c * (h / factor) * (w / factor)));
    kern::avgpool_fwd(x.data().data(), out.data(), c, h, w, factor);
    auto node = make_node({c, h / factor, w / factor}, std::move(out));
    if (wants_grad(x)) {
        node->requires_grad = true;
        node->parents = {x.impl()};
        node->op = "avg_pool2d";
        node->backward_fn = [c, h, w, factor](detail::Node& nd) {
            detail::Node& X = *nd.parents[0];
            X.ensure_grad();
            std::vector<double> dx(X.data.size());
            kern::avgpool_bwd(nd.grad.data(), dx.data(), c, h, w, factor);
            for (std::size_t i = 0; i < dx.size(); ++i) X.grad[i] += dx[i];
        };
    }
    return Tensor::wrap(std::move(node));
}

Tensor global_avg_pool(const Tensor& x) {
    require(x.rank() == 3, "global_avg_pool: input must be [C,h,w]");
    const i64 c = x.dim(0), plane = x.dim(1) * x.dim(2);
    const double inv = 1.0 / static_cast<double>(plane);
    std::vector<double> out(static_cast<std::size_t>(c));
    const double* px = x.data().data();
    for (i64 ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (i64 i = 0; i < plane; ++i) acc += px[ch * plane + i];
        out[static_cast<std::size_t>(ch)] = acc * inv;
    }
    auto node = make_node({c}, std::move(out));
    if (wants_grad(x)) {
        node->requires_grad = true;
        node->parents = {x.impl()};
        node->op = "global_avg_pool";
        node->backward_fn = [c, plane, inv](detail::Node& nd) {
            detail::Node& X = *nd.parents[0];
            X.ensure_grad();
            for (i64 ch = 0; ch < c; ++ch) {
                const double g = nd.grad[static_cast<std::size_t>(ch)] * inv;
                for (i64 i = 0; i < plane; ++i) X.grad[static_cast<std::size_t>(ch * plane + i)] += g;
            }
        };
    }
    return Tensor::wrap(std::move(node));
}

Tensor reshape(const Tensor& x, Shape shape) {
    check_shape(shape);
    require(numel_of(shape) == x.numel(), "reshape: " + shape_str(x.shape()) + " -> " +
                                              shape_str(shape) + " changes element count");
    std::vector<double> out(x.data().begin(), x.data().end());
    auto node = make_node(std::move(shape), std::move(out));
    if (wants_grad(x)) {
        node->requires_grad = true;
        node->parents = {x.impl()};
        node->op = "reshape";
        node->backward_fn = [](detail::Node& nd) {
            detail::Node& X = *nd.parents[0];
            X.ensure_grad();
            for (std::size_t i = 0; i < nd.grad.size(); ++i) X.grad[i] += nd.grad[i];
        };
    }
    return Tensor::wrap(std::move(node));
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    const int r = x.rank();
    require(static_cast<int>(perm.size()) == r, "permute: perm rank mismatch");
    std::vector<bool> seen(static_cast<std::size_t>(r), false);
    for (int p : perm) {
        require(p >= 0 && p < r && !seen[static_cast<std::size_t>(p)], "permute: invalid permutation");
        seen[static_cast<std::size_t>(p)] = true;
    }
    Shape out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = x.dim(perm[static_cast<std::size_t>(i)]);
    const auto in_st = strides_of(x.shape());
    // stride in the source for a unit step along each output axis
    std::array<i64, kMaxRank> step{};
    for (int i = 0; i < r; ++i) step[static_cast<std::size_t>(i)] = in_st[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    const i64 n = x.numel();
    std::vector<double> out(static_cast<std::size_t>(n));
    const double* px = x.data().data();
    {
        std::array<i64, kMaxRank> idx{};
        i64 src = 0;
        for (i64 i = 0; i < n; ++i) {
            out[static_cast<std::size_t>(i)] = px[src];
            for (int ax = r - 1; ax >= 0; --ax) {
                const auto u = static_cast<std::size_t>(ax);
                ++idx[u];
                src += step[u];
                if (idx[u] < out_shape[u]) break;
                idx[u] = 0;
                src -= step[u] * out_shape[u];
            }
        }
    }
    auto node = make_node(out_shape, std::move(out));
    if (wants_grad(x)) {
        node->requires_grad = true;
        node->parents = {x.impl()};
        node->op = "permute";
        node->backward_fn = [step, out_shape, r](detail::Node& nd) {
            detail::Node& X = *nd.parents[0];
            X.ensure_grad();
            std::array<i64, kMaxRank> idx{};
            i64 src = 0;
            const i64 n2 = static_cast<i64>(nd.grad.size());
            for (i64 i = 0; i < n2; ++i) {
                X.grad[static_cast<std::size_t>(src)] += nd.grad[static_cast<std::size_t>(i)];
                for (int ax = r - 1; ax >= 0; --ax) {
                    const auto u = static_cast<std::size_t>(ax);
                    ++idx[u];
                    src += step[u];
                    if (idx[u] < out_shape[u]) break;
                    idx[u] = 0;
                    src -= step[u] * out_shape[u];
                }
            }
        };
    }
    return Tensor::wrap(std::move(node));
}

Tensor slice(const Tensor& x, int axis, i64 start, i64 len) {
    require(axis >= 0 && axis < x.rank(), "slice: axis out of range");
    require(start >= 0 && len >= 1 && start + len <= x.dim(axis),
            "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                ") exceeds axis extent " + std::to_string(x.dim(axis)));
    i64 outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const i64 d = x.dim(axis);
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    std::vector<double> out(static_cast<std::size_t>(outer * len * inner));
    const double* px = x.data().data();
    for (i64 o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * len * inner, px + (o * d + start) * inner,
                    sizeof(double) * static_cast<std::size_t>(len * inner));
    auto node = make_node(std::move(out_shape), std::move(out));
    if (wants_grad(x)) {
        node->requires_grad = true;
        node->parents = {x.impl()};
        node->op = "slice";
        node->backward_fn = [outer, inner, d, start, len](detail::Node& nd) {
            detail::Node& X = *nd.parents[0];
            X.ensure_grad();
            for (i64 o = 0; o < outer; ++o) {
                const double* g = nd.grad.data() + o * len * inner;
                double* dst = X.grad.data() + (o * d + start) * inner;
                for (i64 i = 0; i < len * inner; ++i) dst[i] += g[i];
            }
        };
    }
    return Tensor::wrap(std::move(node));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    require(!parts.empty(), "concat: no operands");
    const Tensor& first = parts.front();
    require(axis >= 0 && axis < first.rank(), "concat: axis out of range");
    i64 total = 0;
    bool any_grad = false;
    for (const Tensor& t : parts) {
        require(t.rank() == first.rank(), "concat: rank mismatch");
        for (int i = 0; i < first.rank(); ++i)
            if (i != axis)
                require(t.dim(i) == first.dim(i), "concat: extent mismatch at axis " +
                                                      std::to_string(i));
        total += t.dim(axis);
        any_grad = any_grad || wants_grad(t);
    }
    i64 outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= first.dim(i);
    for (int i = axis + 1; i < first.rank(); ++i) inner *= first.dim(i);
    Shape out_shape = first.shape();
    out_shape[static_cast<std::size_t>(axis)] = total;
    std::vector<double> out(static_cast<std::size_t>(outer * total * inner));
    i64 off = 0;
    for (const Tensor& t : parts) {
        const i64 d = t.dim(axis);
        const double* p = t.data().data();
        for (i64 o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * total + off) * inner, p + o * d * inner,
                        sizeof(double) * static_cast<std::size_t>(d * inner));
        off += d;
    }
    auto node = make_node(std::move(out_shape), std::move(out));
    if (any_grad) {
        node->requires_grad = true;
        node->parents.reserve(parts.size());
        for (const Tensor& t : parts) node->parents.push_back(t.impl());
        node->op = "concat";
        std::vector<i64> extents;
        extents.reserve(parts.size());
        for (const Tensor& t : parts) extents.push_back(t.dim(axis));
        node->backward_fn = [outer, inner, total, extents](detail::Node& nd) {
            i64 off2 = 0;
            for (std::size_t pi = 0; pi < nd.parents.size(); ++pi) {
                detail::Node& P = *nd.parents[pi];
                const i64 d = extents[pi];
                if (P.requires_grad) {
                    P.ensure_grad();
                    for (i64 o = 0; o < outer; ++o) {
                        const double* g = nd.grad.data() + (o * total + off2) * inner;
                        double* dst = P.grad.data() + o * d * inner;
                        for (i64 i = 0; i < d * inner; ++i) dst[i] += g[i];
                    }
                }
                off2 += d;
            }
        };
    }
    return Tensor::wrap(std::move(node));
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    auto node = make_node({1}, {acc});
    if (wants_grad(x)) {
        node->requires_grad = true;
        node->parents = {x.impl()};
        node->op = "sum";
        node->backward_fn = [](detail::Node& nd) {
            detail::Node& X = *nd.parents[0];
            X.ensure_grad();
            const double g = nd.grad[0];
            for (double& v : X.grad) v += g;
        };
    }
    return Tensor::wrap(std::move(node));
}

Tensor mean(const Tensor& x) { return mul(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<i64>& targets, int axis) {
    require(axis >= 0 && axis < logits.rank(), "cross_entropy: axis out of range");
    const i64 k = logits.dim(axis);
    i64 outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= logits.dim(i);
    for (int i = axis + 1; i < logits.rank(); ++i) inner *= logits.dim(i);
    const i64 positions = outer * inner;
    require(static_cast<i64>(targets.size()) == positions,
            "cross_entropy: expected " + std::to_string(positions) + " targets, got " +
                std::to_string(targets.size()));
    for (i64 t : targets)
        require(t >= 0 && t < k, "cross_entropy: target class " + std::to_string(t) +
                                     " out of range [0," + std::to_string(k) + ")");
    const double* px = logits.data().data();
    const double inv_p = 1.0 / static_cast<double>(positions);
    // cache softmax probabilities for the backward rule
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(logits.numel()));
    double total = 0.0;
    for (i64 o = 0; o < outer; ++o) {
        for (i64 in = 0; in < inner; ++in) {
            const i64 base = o * k * inner + in;
            double mx = px[base];
            for (i64 j = 1; j < k; ++j) mx = std::max(mx, px[base + j * inner]);
            double denom = 0.0;
            for (i64 j = 0; j < k; ++j) {
                const double e = std::exp(px[base + j * inner] - mx);
                (*probs)[static_cast<std::size_t>(base + j * inner)] = e;
                denom += e;
            }
            const double inv = 1.0 / denom;
            for (i64 j = 0; j < k; ++j) (*probs)[static_cast<std::size_t>(base + j * inner)] *= inv;
            const i64 t = targets[static_cast<std::size_t>(o * inner + in)];
            total += (mx + std::log(denom)) - px[base + t * inner];
        }
    }
    auto node = make_node({1}, {total * inv_p});
    if (wants_grad(logits)) {
        node->requires_grad = true;
        node->parents = {logits.impl()};
        node->op = "softmax_cross_entropy";
        auto tgt = std::make_shared<std::vector<i64>>(targets);
        node->backward_fn = [k, outer, inner, inv_p, probs, tgt](detail::Node& nd) {
            detail::Node& X = *nd.parents[0];
            X.ensure_grad();
            const double g = nd.grad[0] * inv_p;
            for (i64 o = 0; o < outer; ++o) {
                for (i64 in = 0; in < inner; ++in) {
                    const i64 base = o * k * inner + in;
                    const i64 t = (*tgt)[static_cast<std::size_t>(o * inner + in)];
                    for (i64 j = 0; j < k; ++j) {
                        const auto u = static_cast<std::size_t>(base + j * inner);
                        X.grad[u] += g * ((*probs)[u] - (j == t ? 1.0 : 0.0));
                    }
                }
            }
        };
    }
    return Tensor::wrap(std::move(node));
}

}  // namespace mscc
