#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "lcdforge/common.hpp"

namespace lcd {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// Dense row-major n-d tensor with reverse-mode autodiff.
///
/// A Tensor is a cheap handle onto a shared graph node. Ops are free
/// functions that record a backward closure when any input is tracked.
/// Training runs in float, oracle/finite-difference checks in double.
template <typename T>
class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;       // same length as data once touched by backward
        bool requires_grad = false;
        bool grad_live = false;    // leaf has a grad from a previous backward
        bool is_leaf = true;
        std::string op = "leaf";
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward_fn;
        bool backward_root_done = false;

        int64_t numel() const { return static_cast<int64_t>(data.size()); }
        void ensure_grad() {
            if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        }
    };

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match data length " +
                                        std::to_string(data.size()));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        const auto n = static_cast<size_t>(shape_numel(shape));
        return from(std::move(shape), std::vector<T>(n, v), requires_grad);
    }
    static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(0), requires_grad); }
    static Tensor ones(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(1), requires_grad); }

    static Tensor randn(Shape shape, Rng& rng, T scale = T(1), bool requires_grad = false) {
        std::vector<T> d(static_cast<size_t>(shape_numel(shape)));
        for (auto& x : d) x = static_cast<T>(rng.normal()) * scale;
        return from(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int64_t numel() const { return n_->numel(); }
    int64_t dim(size_t i) const { return n_->shape[i]; }
    size_t ndim() const { return n_->shape.size(); }
    bool requires_grad() const { return n_->requires_grad; }
    bool is_leaf() const { return n_->is_leaf; }
    const std::string& op() const { return n_->op; }

    std::vector<T>& data() { return n_->data; }
    const std::vector<T>& data() const { return n_->data; }
    std::vector<T>& grad() { return n_->grad; }
    const std::vector<T>& grad() const { return n_->grad; }

    T item() const {
        if (numel() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(numel()) + " elements");
        return n_->data[0];
    }

    void set_requires_grad(bool v) {
        if (!n_->is_leaf) throw std::invalid_argument("requires_grad can only be toggled on leaf tensors");
        n_->requires_grad = v;
    }

    void zero_grad() {
        n_->grad.assign(n_->data.size(), T(0));
        n_->grad_live = false;
    }

    std::shared_ptr<Node> node() const { return n_; }

    /// True when this tensor participates in gradient tracking.
    bool tracked() const { return n_->requires_grad || (!n_->is_leaf && n_->backward_fn); }

private:
    std::shared_ptr<Node> n_;
};

/// RAII scope that disables graph recording (inference paths).
struct NoGradGuard {
    NoGradGuard() { ++depth(); }
    ~NoGradGuard() { --depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    static int& depth() {
        thread_local int d = 0;
        return d;
    }
    static bool active() { return depth() > 0; }
};

namespace detail {

template <typename T>
std::shared_ptr<typename Tensor<T>::Node> make_op_node(Shape shape, std::vector<T> data, const char* op,
                                                       std::vector<Tensor<T>> parents,
                                                       std::function<void(typename Tensor<T>::Node&)> backward_fn) {
    auto n = std::make_shared<typename Tensor<T>::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    bool track = false;
    if (!NoGradGuard::active())
        for (const auto& p : parents)
            if (p.tracked()) track = true;
    if (track) {
        n->is_leaf = false;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward_fn);
    }
    return n;
}

inline void check(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

// b may equal a's shape, or match a trailing suffix of it (leading-batch
// expansion). Returns the number of leading elements a spans per b element.
template <typename T>
int64_t broadcast_repeat(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    check(sb.size() <= sa.size(), std::string(op) + ": shape " + shape_str(sb) + " has more dims than " + shape_str(sa));
    const size_t off = sa.size() - sb.size();
    for (size_t i = 0; i < sb.size(); ++i)
        check(sa[off + i] == sb[i], std::string(op) + ": shape mismatch " + shape_str(sa) + " vs " + shape_str(sb) +
                                        " (only leading-batch expansion is supported)");
    return a.numel() / std::max<int64_t>(b.numel(), 1);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <typename T, typename Fwd, typename BwdA, typename BwdB>
Tensor<T> binary_broadcast_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
    const int64_t rep = detail::broadcast_repeat(name, a, b);
    const int64_t nb = b.numel();
    std::vector<T> out(static_cast<size_t>(a.numel()));
    const auto& da = a.data();
    const auto& db = b.data();
    for (int64_t r = 0; r < rep; ++r)
        for (int64_t i = 0; i < nb; ++i) out[static_cast<size_t>(r * nb + i)] = fwd(da[static_cast<size_t>(r * nb + i)], db[static_cast<size_t>(i)]);
    auto an = a.node();
    auto bn = b.node();
    auto node = detail::make_op_node<T>(
        a.shape(), std::move(out), name, {a, b}, [an, bn, rep, nb, bwd_a, bwd_b](typename Tensor<T>::Node& self) {
            if (an->requires_grad || !an->is_leaf) {
                an->ensure_grad();
                for (int64_t i = 0; i < self.numel(); ++i)
                    an->grad[static_cast<size_t>(i)] +=
                        bwd_a(self.grad[static_cast<size_t>(i)], an->data[static_cast<size_t>(i)],
                              bn->data[static_cast<size_t>(i % nb)]);
            }
            if (bn->requires_grad || !bn->is_leaf) {
                bn->ensure_grad();
                for (int64_t r = 0; r < rep; ++r)
                    for (int64_t i = 0; i < nb; ++i)
                        bn->grad[static_cast<size_t>(i)] +=
                            bwd_b(self.grad[static_cast<size_t>(r * nb + i)],
                                  an->data[static_cast<size_t>(r * nb + i)], bn->data[static_cast<size_t>(i)]);
            }
        });
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_broadcast_op<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_broadcast_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_broadcast_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; }, [](T g, T x, T) { return g * x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.data());
    for (auto& v : out) v *= c;
    auto an = a.node();
    auto node = detail::make_op_node<T>(a.shape(), std::move(out), "scale", {a}, [an, c](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) an->grad[static_cast<size_t>(i)] += c * self.grad[static_cast<size_t>(i)];
    });
    return Tensor<T>(std::move(node));
}

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, Fwd fwd, Bwd bwd) {
    std::vector<T> out(static_cast<size_t>(a.numel()));
    for (int64_t i = 0; i < a.numel(); ++i) out[static_cast<size_t>(i)] = fwd(a.data()[static_cast<size_t>(i)]);
    auto an = a.node();
    auto node = detail::make_op_node<T>(a.shape(), std::move(out), name, {a}, [an, bwd](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i)
            an->grad[static_cast<size_t>(i)] += bwd(self.grad[static_cast<size_t>(i)], an->data[static_cast<size_t>(i)],
                                                    self.data[static_cast<size_t>(i)]);
    });
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
    return unary_op<T>(
        "silu", a, [](T x) { T s = T(1) / (T(1) + std::exp(-x)); return x * s; },
        [](T g, T x, T) {
            T s = T(1) / (T(1) + std::exp(-x));
            return g * (s * (T(1) + x * (T(1) - s)));
        });
}

namespace detail {

// tanh(softplus(x)) and the mish derivative from a single exp:
// with e = exp(x), tanh(log1p(e)) = (e^2 + 2e) / (e^2 + 2e + 2).
template <typename T>
inline T mish_fwd(T x) {
    if (x > T(20)) return x;
    const T e = std::exp(x);
    const T u = e * e + T(2) * e;
    return x * (u / (u + T(2)));
}

template <typename T>
inline T mish_bwd(T x) {
    if (x > T(20)) return T(1);
    const T e = std::exp(x);
    const T u = e * e + T(2) * e;
    const T th = u / (u + T(2));
    const T sig = e / (T(1) + e);
    return th + x * (T(1) - th * th) * sig;
}

}  // namespace detail

template <typename T>
Tensor<T> mish(const Tensor<T>& a) {
    return unary_op<T>(
        "mish", a, [](T x) { return detail::mish_fwd(x); },
        [](T g, T x, T) { return g * detail::mish_bwd(x); });
}

template <typename T>
Tensor<T> tanh_act(const Tensor<T>& a) {
    return unary_op<T>(
        "tanh", a, [](T x) { return std::tanh(x); }, [](T g, T, T y) { return g * (T(1) - y * y); });
}

template <typename T>
Tensor<T> sin_act(const Tensor<T>& a) {
    return unary_op<T>(
        "sin", a, [](T x) { return std::sin(x); }, [](T g, T x, T) { return g * std::cos(x); });
}

template <typename T>
Tensor<T> abs_act(const Tensor<T>& a) {
    return unary_op<T>(
        "abs", a, [](T x) { return std::abs(x); },
        [](T g, T x, T) { return x >= T(0) ? g : -g; });
}

// ---------------------------------------------------------------------------
// matmul / bmm
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.ndim() == 2 && b.ndim() == 2,
                  "matmul: expects 2-d operands, got " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int64_t M = a.dim(0), K = a.dim(1), K2 = b.dim(0), N = b.dim(1);
    detail::check(K == K2, "matmul: inner dims differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<T> out(static_cast<size_t>(M * N), T(0));
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (int64_t m = 0; m < M; ++m)
        for (int64_t k = 0; k < K; ++k) {
            const T av = pa[m * K + k];
            T* po = out.data() + m * N;
            const T* pbk = pb + k * N;
            for (int64_t n = 0; n < N; ++n) po[n] += av * pbk[n];
        }
    auto an = a.node();
    auto bn = b.node();
    auto node = detail::make_op_node<T>({M, N}, std::move(out), "matmul", {a, b},
                                        [an, bn, M, K, N](typename Tensor<T>::Node& self) {
        const T* g = self.grad.data();
        if (an->requires_grad || !an->is_leaf) {
            an->ensure_grad();
            // dA = dOut * B^T
            for (int64_t m = 0; m < M; ++m)
                for (int64_t n = 0; n < N; ++n) {
                    const T gv = g[m * N + n];
                    const T* pb = bn->data.data();
                    T* pga = an->grad.data() + m * K;
                    for (int64_t k = 0; k < K; ++k) pga[k] += gv * pb[k * N + n];
                }
        }
        if (bn->requires_grad || !bn->is_leaf) {
            bn->ensure_grad();
            // dB = A^T * dOut
            for (int64_t m = 0; m < M; ++m)
                for (int64_t k = 0; k < K; ++k) {
                    const T av = an->data[static_cast<size_t>(m * K + k)];
                    T* pgb = bn->grad.data() + k * N;
                    const T* pg = g + m * N;
                    for (int64_t n = 0; n < N; ++n) pgb[n] += av * pg[n];
                }
        }
    });
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.ndim() == 3 && b.ndim() == 3,
                  "bmm: expects 3-d operands, got " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    detail::check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
                  "bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int64_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
    std::vector<T> out(static_cast<size_t>(B * M * N), T(0));
    for (int64_t bb = 0; bb < B; ++bb) {
        const T* pa = a.data().data() + bb * M * K;
        const T* pb = b.data().data() + bb * K * N;
        T* po = out.data() + bb * M * N;
        for (int64_t m = 0; m < M; ++m)
            for (int64_t k = 0; k < K; ++k) {
                const T av = pa[m * K + k];
                for (int64_t n = 0; n < N; ++n) po[m * N + n] += av * pb[k * N + n];
            }
    }
    auto an = a.node();
    auto bn = b.node();
    auto node = detail::make_op_node<T>({B, M, N}, std::move(out), "bmm", {a, b},
                                        [an, bn, B, M, K, N](typename Tensor<T>::Node& self) {
        if (an->requires_grad || !an->is_leaf) {
            an->ensure_grad();
            for (int64_t bb = 0; bb < B; ++bb) {
                const T* g = self.grad.data() + bb * M * N;
                const T* pb = bn->data.data() + bb * K * N;
                T* pga = an->grad.data() + bb * M * K;
                for (int64_t m = 0; m < M; ++m)
                    for (int64_t n = 0; n < N; ++n) {
                        const T gv = g[m * N + n];
                        for (int64_t k = 0; k < K; ++k) pga[m * K + k] += gv * pb[k * N + n];
                    }
            }
        }
        if (bn->requires_grad || !bn->is_leaf) {
            bn->ensure_grad();
            for (int64_t bb = 0; bb < B; ++bb) {
                const T* g = self.grad.data() + bb * M * N;
                const T* pa = an->data.data() + bb * M * K;
                T* pgb = bn->grad.data() + bb * K * N;
                for (int64_t m = 0; m < M; ++m)
                    for (int64_t k = 0; k < K; ++k) {
                        const T av = pa[m * K + k];
                        for (int64_t n = 0; n < N; ++n) pgb[k * N + n] += av * g[m * N + n];
                    }
            }
        }
    });
    return Tensor<T>(std::move(node));
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    detail::check(shape_numel(shape) == a.numel(),
                  "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    auto an = a.node();
    auto node = detail::make_op_node<T>(std::move(shape), std::vector<T>(a.data()), "reshape", {a},
                                        [an](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) an->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)];
    });
    return Tensor<T>(std::move(node));
}

/// Swap the two trailing axes of a 3-d tensor.
template <typename T>
Tensor<T> transpose12(const Tensor<T>& a) {
    detail::check(a.ndim() == 3, "transpose12: expects 3-d tensor, got " + shape_str(a.shape()));
    const int64_t B = a.dim(0), X = a.dim(1), Y = a.dim(2);
    std::vector<T> out(static_cast<size_t>(B * X * Y));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t x = 0; x < X; ++x)
            for (int64_t y = 0; y < Y; ++y)
                out[static_cast<size_t>((b * Y + y) * X + x)] = a.data()[static_cast<size_t>((b * X + x) * Y + y)];
    auto an = a.node();
    auto node = detail::make_op_node<T>({B, Y, X}, std::move(out), "transpose12", {a},
                                        [an, B, X, Y](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t x = 0; x < X; ++x)
                for (int64_t y = 0; y < Y; ++y)
                    an->grad[static_cast<size_t>((b * X + x) * Y + y)] += self.grad[static_cast<size_t>((b * Y + y) * X + x)];
    });
    return Tensor<T>(std::move(node));
}

/// Repeat a tensor along a new leading batch axis.
template <typename T>
Tensor<T> expand0(const Tensor<T>& a, int64_t batch) {
    Shape shape;
    shape.push_back(batch);
    for (int64_t d : a.shape()) shape.push_back(d);
    const int64_t n = a.numel();
    std::vector<T> out(static_cast<size_t>(batch * n));
    for (int64_t b = 0; b < batch; ++b)
        std::copy(a.data().begin(), a.data().end(), out.begin() + static_cast<std::ptrdiff_t>(b * n));
    auto an = a.node();
    auto node = detail::make_op_node<T>(std::move(shape), std::move(out), "expand0", {a},
                                        [an, batch, n](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t i = 0; i < n; ++i) an->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(b * n + i)];
    });
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, size_t axis) {
    detail::check(!parts.empty(), "concat: empty input list");
    const Shape& s0 = parts[0].shape();
    detail::check(axis < s0.size(), "concat: axis out of range for " + shape_str(s0));
    int64_t axis_total = 0;
    for (const auto& p : parts) {
        detail::check(p.ndim() == s0.size(), "concat: rank mismatch " + shape_str(p.shape()) + " vs " + shape_str(s0));
        for (size_t i = 0; i < s0.size(); ++i)
            if (i != axis)
                detail::check(p.shape()[i] == s0[i],
                              "concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(s0));
        axis_total += p.shape()[axis];
    }
    Shape out_shape = s0;
    out_shape[axis] = axis_total;
    int64_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

    std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t pa = p.shape()[axis];
        for (int64_t o = 0; o < outer; ++o)
            std::copy(p.data().begin() + static_cast<std::ptrdiff_t>(o * pa * inner),
                      p.data().begin() + static_cast<std::ptrdiff_t>((o + 1) * pa * inner),
                      out.begin() + static_cast<std::ptrdiff_t>((o * axis_total + off) * inner));
        off += pa;
    }
    std::vector<std::shared_ptr<typename Tensor<T>::Node>> pnodes;
    std::vector<int64_t> paxis;
    for (const auto& p : parts) {
        pnodes.push_back(p.node());
        paxis.push_back(p.shape()[axis]);
    }
    auto node = detail::make_op_node<T>(out_shape, std::move(out), "concat", parts,
                                        [pnodes, paxis, outer, inner, axis_total](typename Tensor<T>::Node& self) {
        int64_t off = 0;
        for (size_t pi = 0; pi < pnodes.size(); ++pi) {
            auto& pn = pnodes[pi];
            const int64_t pa = paxis[pi];
            if (pn->requires_grad || !pn->is_leaf) {
                pn->ensure_grad();
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t i = 0; i < pa * inner; ++i)
                        pn->grad[static_cast<size_t>(o * pa * inner + i)] +=
                            self.grad[static_cast<size_t>((o * axis_total + off) * inner + i)];
            }
            off += pa;
        }
    });
    return Tensor<T>(std::move(node));
}

// ---------------------------------------------------------------------------
// reductions & softmax
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T s = T(0);
    for (T v : a.data()) s += v;
    auto an = a.node();
    auto node = detail::make_op_node<T>({1}, std::vector<T>{s}, "sum", {a}, [an](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        const T g = self.grad[0];
        for (auto& gv : an->grad) gv += g;
    });
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    const T inv = T(1) / static_cast<T>(a.numel());
    T s = T(0);
    for (T v : a.data()) s += v;
    s *= inv;
    auto an = a.node();
    auto node = detail::make_op_node<T>({1}, std::vector<T>{s}, "mean", {a}, [an, inv](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        const T g = self.grad[0] * inv;
        for (auto& gv : an->grad) gv += g;
    });
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, size_t axis) {
    detail::check(axis < a.ndim(), "softmax: axis out of range for " + shape_str(a.shape()));
    const Shape& s = a.shape();
    int64_t outer = 1, inner = 1;
    const int64_t n = s[axis];
    for (size_t i = 0; i < axis; ++i) outer *= s[i];
    for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    std::vector<T> out(a.data().size());
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            const int64_t base = o * n * inner + i;
            T mx = a.data()[static_cast<size_t>(base)];
            for (int64_t k = 1; k < n; ++k) mx = std::max(mx, a.data()[static_cast<size_t>(base + k * inner)]);
            T z = T(0);
            for (int64_t k = 0; k < n; ++k) {
                T e = std::exp(a.data()[static_cast<size_t>(base + k * inner)] - mx);
                out[static_cast<size_t>(base + k * inner)] = e;
                z += e;
            }
            for (int64_t k = 0; k < n; ++k) out[static_cast<size_t>(base + k * inner)] /= z;
        }
    auto an = a.node();
    auto node = detail::make_op_node<T>(a.shape(), std::move(out), "softmax", {a},
                                        [an, outer, inner, n](typename Tensor<T>::Node& self) {
        an->ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < inner; ++i) {
                const int64_t base = o * n * inner + i;
                T dot = T(0);
                for (int64_t k = 0; k < n; ++k)
                    dot += self.grad[static_cast<size_t>(base + k * inner)] * self.data[static_cast<size_t>(base + k * inner)];
                for (int64_t k = 0; k < n; ++k) {
                    const size_t idx = static_cast<size_t>(base + k * inner);
                    an->grad[idx] += self.data[idx] * (self.grad[idx] - dot);
                }
            }
    });
    return Tensor<T>(std::move(node));
}

// ---------------------------------------------------------------------------
// conv1d / upsample / group norm
// ---------------------------------------------------------------------------

/// Cross-correlation over the trailing (time) axis. x: [B,C,L], w: [O,C,K],
/// optional bias [O]. Symmetric zero padding; out length (L+2p-K)/stride+1.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int64_t stride = 1, int64_t pad = 0) {
    detail::check(x.ndim() == 3, "conv1d: input must be [B,C,L], got " + shape_str(x.shape()));
    detail::check(w.ndim() == 3, "conv1d: weight must be [O,C,K], got " + shape_str(w.shape()));
    detail::check(x.dim(1) == w.dim(1), "conv1d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    detail::check(stride >= 1 && pad >= 0, "conv1d: invalid stride/pad");
    const int64_t B = x.dim(0), C = x.dim(1), L = x.dim(2), O = w.dim(0), K = w.dim(2);
    const int64_t Lp = L + 2 * pad;
    detail::check(Lp >= K, "conv1d: kernel " + shape_str(w.shape()) + " longer than padded input " + shape_str(x.shape()));
    const int64_t Lo = (Lp - K) / stride + 1;
    const bool has_bias = bias.defined();
    if (has_bias)
        detail::check(bias.ndim() == 1 && bias.dim(0) == O,
                      "conv1d: bias must be [O]=" + std::to_string(O) + ", got " + shape_str(bias.shape()));

    // padded copy of x, contiguous [B,C,Lp]
    std::vector<T> xp(static_cast<size_t>(B * C * Lp), T(0));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            std::copy(x.data().begin() + static_cast<std::ptrdiff_t>((b * C + c) * L),
                      x.data().begin() + static_cast<std::ptrdiff_t>((b * C + c + 1) * L),
                      xp.begin() + static_cast<std::ptrdiff_t>((b * C + c) * Lp + pad));

    std::vector<T> out(static_cast<size_t>(B * O * Lo), T(0));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t o = 0; o < O; ++o) {
            T* po = out.data() + (b * O + o) * Lo;
            if (has_bias) {
                const T bv = bias.data()[static_cast<size_t>(o)];
                for (int64_t l = 0; l < Lo; ++l) po[l] = bv;
            }
            for (int64_t c = 0; c < C; ++c) {
                const T* px = xp.data() + (b * C + c) * Lp;
                const T* pw = w.data().data() + (o * C + c) * K;
                for (int64_t k = 0; k < K; ++k) {
                    const T wv = pw[k];
                    if (stride == 1) {
                        const T* pxk = px + k;
                        for (int64_t l = 0; l < Lo; ++l) po[l] += wv * pxk[l];
                    } else {
                        for (int64_t l = 0; l < Lo; ++l) po[l] += wv * px[l * stride + k];
                    }
                }
            }
        }

    auto xn = x.node();
    auto wn = w.node();
    auto biasn = has_bias ? bias.node() : nullptr;
    std::vector<Tensor<T>> parents = {x, w};
    if (has_bias) parents.push_back(bias);
    auto node = detail::make_op_node<T>(
        {B, O, Lo}, std::move(out), "conv1d", parents,
        [xn, wn, biasn, xp = std::move(xp), B, C, L, O, K, Lo, Lp, stride, pad](typename Tensor<T>::Node& self) {
            const T* g = self.grad.data();
            if (xn->requires_grad || !xn->is_leaf) {
                xn->ensure_grad();
                std::vector<T> gxp(static_cast<size_t>(B * C * Lp), T(0));
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t o = 0; o < O; ++o) {
                        const T* pg = g + (b * O + o) * Lo;
                        for (int64_t c = 0; c < C; ++c) {
                            T* pgx = gxp.data() + (b * C + c) * Lp;
                            const T* pw = wn->data.data() + (o * C + c) * K;
                            for (int64_t k = 0; k < K; ++k) {
                                const T wv = pw[k];
                                for (int64_t l = 0; l < Lo; ++l) pgx[l * stride + k] += wv * pg[l];
                            }
                        }
                    }
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t l = 0; l < L; ++l)
                            xn->grad[static_cast<size_t>((b * C + c) * L + l)] += gxp[static_cast<size_t>((b * C + c) * Lp + pad + l)];
            }
            if (wn->requires_grad || !wn->is_leaf) {
                wn->ensure_grad();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t o = 0; o < O; ++o) {
                        const T* pg = g + (b * O + o) * Lo;
                        for (int64_t c = 0; c < C; ++c) {
                            const T* px = xp.data() + (b * C + c) * Lp;
                            T* pgw = wn->grad.data() + (o * C + c) * K;
                            for (int64_t k = 0; k < K; ++k) {
                                T acc = T(0);
                                for (int64_t l = 0; l < Lo; ++l) acc += px[l * stride + k] * pg[l];
                                pgw[k] += acc;
                            }
                        }
                    }
            }
            if (biasn && (biasn->requires_grad || !biasn->is_leaf)) {
                biasn->ensure_grad();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t o = 0; o < O; ++o) {
                        T acc = T(0);
                        const T* pg = g + (b * O + o) * Lo;
                        for (int64_t l = 0; l < Lo; ++l) acc += pg[l];
                        biasn->grad[static_cast<size_t>(o)] += acc;
                    }
            }
        });
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, int64_t stride = 1, int64_t pad = 0) {
    return conv1d(x, w, Tensor<T>(), stride, pad);
}

/// Nearest-neighbor upsampling along the time axis.
template <typename T>
Tensor<T> upsample_nearest1d(const Tensor<T>& x, int64_t factor) {
    detail::check(x.ndim() == 3, "upsample_nearest1d: input must be [B,C,L], got " + shape_str(x.shape()));
    detail::check(factor >= 1, "upsample_nearest1d: factor must be >= 1");
    const int64_t B = x.dim(0), C = x.dim(1), L = x.dim(2), Lo = L * factor;
    std::vector<T> out(static_cast<size_t>(B * C * Lo));
    for (int64_t bc = 0; bc < B * C; ++bc)
        for (int64_t l = 0; l < L; ++l) {
            const T v = x.data()[static_cast<size_t>(bc * L + l)];
            for (int64_t f = 0; f < factor; ++f) out[static_cast<size_t>(bc * Lo + l * factor + f)] = v;
        }
    auto xn = x.node();
    auto node = detail::make_op_node<T>({B, C, Lo}, std::move(out), "upsample_nearest1d", {x},
                                        [xn, B, C, L, factor](typename Tensor<T>::Node& self) {
        xn->ensure_grad();
        const int64_t Lo = L * factor;
        for (int64_t bc = 0; bc < B * C; ++bc)
            for (int64_t l = 0; l < L; ++l) {
                T acc = T(0);
                for (int64_t f = 0; f < factor; ++f) acc += self.grad[static_cast<size_t>(bc * Lo + l * factor + f)];
                xn->grad[static_cast<size_t>(bc * L + l)] += acc;
            }
    });
    return Tensor<T>(std::move(node));
}

/// Group normalization over channel groups of a [B,C,L] tensor.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int64_t groups, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    detail::check(x.ndim() == 3, "group_norm: input must be [B,C,L], got " + shape_str(x.shape()));
    const int64_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
    detail::check(groups >= 1 && C % groups == 0,
                  "group_norm: channels " + std::to_string(C) + " not divisible by groups " + std::to_string(groups));
    detail::check(gamma.ndim() == 1 && gamma.dim(0) == C && beta.ndim() == 1 && beta.dim(0) == C,
                  "group_norm: gamma/beta must be [C]=" + std::to_string(C) + ", got " + shape_str(gamma.shape()) +
                      " and " + shape_str(beta.shape()));
    const int64_t cg = C / groups;
    const int64_t gs = cg * L;  // elements per group
    std::vector<T> out(x.data().size());
    std::vector<T> mean(static_cast<size_t>(B * groups)), rstd(static_cast<size_t>(B * groups));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t g = 0; g < groups; ++g) {
            const T* px = x.data().data() + (b * C + g * cg) * L;
            T m = T(0);
            for (int64_t i = 0; i < gs; ++i) m += px[i];
            m /= static_cast<T>(gs);
            T v = T(0);
            for (int64_t i = 0; i < gs; ++i) {
                const T d = px[i] - m;
                v += d * d;
            }
            v /= static_cast<T>(gs);
            const T r = T(1) / std::sqrt(v + eps);
            mean[static_cast<size_t>(b * groups + g)] = m;
            rstd[static_cast<size_t>(b * groups + g)] = r;
            T* po = out.data() + (b * C + g * cg) * L;
            for (int64_t c = 0; c < cg; ++c) {
                const T ga = gamma.data()[static_cast<size_t>(g * cg + c)];
                const T be = beta.data()[static_cast<size_t>(g * cg + c)];
                for (int64_t l = 0; l < L; ++l) po[c * L + l] = (px[c * L + l] - m) * r * ga + be;
            }
        }
    auto xn = x.node();
    auto gn = gamma.node();
    auto btn = beta.node();
    auto node = detail::make_op_node<T>(
        x.shape(), std::move(out), "group_norm", {x, gamma, beta},
        [xn, gn, btn, mean = std::move(mean), rstd = std::move(rstd), B, C, L, groups, cg, gs](typename Tensor<T>::Node& self) {
            const T* g = self.grad.data();
            const bool need_x = xn->requires_grad || !xn->is_leaf;
            if (need_x) xn->ensure_grad();
            if (gn->requires_grad || !gn->is_leaf) gn->ensure_grad();
            if (btn->requires_grad || !btn->is_leaf) btn->ensure_grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t gi = 0; gi < groups; ++gi) {
                    const T m = mean[static_cast<size_t>(b * groups + gi)];
                    const T r = rstd[static_cast<size_t>(b * groups + gi)];
                    const T* px = xn->data.data() + (b * C + gi * cg) * L;
                    const T* pg = g + (b * C + gi * cg) * L;
                    // gamma/beta grads
                    if (gn->grad.size() == gn->data.size() || btn->grad.size() == btn->data.size()) {
                        for (int64_t c = 0; c < cg; ++c) {
                            T dg = T(0), db = T(0);
                            for (int64_t l = 0; l < L; ++l) {
                                const T xhat = (px[c * L + l] - m) * r;
                                dg += pg[c * L + l] * xhat;
                                db += pg[c * L + l];
                            }
                            if (gn->grad.size() == gn->data.size()) gn->grad[static_cast<size_t>(gi * cg + c)] += dg;
                            if (btn->grad.size() == btn->data.size()) btn->grad[static_cast<size_t>(gi * cg + c)] += db;
                        }
                    }
                    if (need_x) {
                        // dL/dx = r/gs * (gs*dy*gamma - sum(dy*gamma) - xhat*sum(dy*gamma*xhat))
                        T sum_dyg = T(0), sum_dygx = T(0);
                        for (int64_t c = 0; c < cg; ++c) {
                            const T ga = gn->data[static_cast<size_t>(gi * cg + c)];
                            for (int64_t l = 0; l < L; ++l) {
                                const T dyg = pg[c * L + l] * ga;
                                const T xhat = (px[c * L + l] - m) * r;
                                sum_dyg += dyg;
                                sum_dygx += dyg * xhat;
                            }
                        }
                        T* pgx = xn->grad.data() + (b * C + gi * cg) * L;
                        const T inv_gs = T(1) / static_cast<T>(gs);
                        for (int64_t c = 0; c < cg; ++c) {
                            const T ga = gn->data[static_cast<size_t>(gi * cg + c)];
                            for (int64_t l = 0; l < L; ++l) {
                                const T dyg = pg[c * L + l] * ga;
                                const T xhat = (px[c * L + l] - m) * r;
                                pgx[c * L + l] += r * (dyg - inv_gs * (sum_dyg + xhat * sum_dygx));
                            }
                        }
                    }
                }
        });
    return Tensor<T>(std::move(node));
}

/// Scaled dot-product attention assembled from bmm/softmax primitives.
/// q: [B,M,D], k: [B,N,D], v: [B,N,D] -> [B,M,D].
template <typename T>
Tensor<T> sdp_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    detail::check(q.ndim() == 3 && k.ndim() == 3 && v.ndim() == 3, "sdp_attention: operands must be 3-d");
    detail::check(q.dim(2) == k.dim(2) && k.dim(1) == v.dim(1) && k.dim(0) == q.dim(0) && v.dim(0) == q.dim(0),
                  "sdp_attention: incompatible shapes " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                      shape_str(v.shape()));
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q.dim(2)));
    auto scores = scale(bmm(q, transpose12(k)), inv_sqrt_d);  // [B,M,N]
    return bmm(softmax(scores, 2), v);
}

// ---------------------------------------------------------------------------
// backward & grad check
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    auto root = loss.node();
    if (root->backward_root_done) throw std::runtime_error("backward: already called on this loss");

    // iterative topological sort
    std::vector<typename Tensor<T>::Node*> order;
    std::unordered_set<typename Tensor<T>::Node*> visited;
    struct Frame {
        typename Tensor<T>::Node* n;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({root.get(), 0});
    visited.insert(root.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.n->parents.size()) {
            auto* p = f.n->parents[f.next_parent++].get();
            if (!visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    // refuse to silently accumulate over a previous backward
    for (auto* n : order)
        if (n->is_leaf && n->requires_grad && n->grad_live)
            throw std::runtime_error("backward: leaf '" + n->op + "' still holds a gradient; call zero_grad first");

    for (auto* n : order) n->ensure_grad();
    root->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);

    for (auto* n : order)
        if (n->is_leaf && n->requires_grad) {
            n->grad_live = true;
            for (size_t i = 0; i < n->grad.size(); ++i)
                if (!std::isfinite(static_cast<double>(n->grad[i])))
                    throw std::runtime_error("backward: non-finite gradient at leaf coordinate " + std::to_string(i));
        }
    root->backward_root_done = true;
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    int64_t worst_coord = -1;
};

/// Central-difference check of d f(x) / dx against the reverse pass.
/// Relative error uses max(1, |numeric|) as denominator.
template <typename T>
GradCheckResult grad_check_full(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x, T eps) {
    x.set_requires_grad(true);
    x.zero_grad();
    auto loss = f(x);
    if (loss.numel() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
    backward(loss);
    std::vector<T> analytic = x.grad();

    GradCheckResult res;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const T orig = x.data()[static_cast<size_t>(i)];
        x.data()[static_cast<size_t>(i)] = orig + eps;
        const T fp = f(x).item();
        x.data()[static_cast<size_t>(i)] = orig - eps;
        const T fm = f(x).item();
        x.data()[static_cast<size_t>(i)] = orig;
        if (!std::isfinite(static_cast<double>(fp)) || !std::isfinite(static_cast<double>(fm)))
            throw std::runtime_error("grad_check: non-finite value at coordinate " + std::to_string(i));
        const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * static_cast<double>(eps));
        const double rel = std::abs(static_cast<double>(analytic[static_cast<size_t>(i)]) - numeric) /
                           std::max(1.0, std::abs(numeric));
        if (rel > res.max_rel_error) {
            res.max_rel_error = rel;
            res.worst_coord = i;
        }
    }
    return res;
}

template <typename T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, T eps) {
    Tensor<T> copy = Tensor<T>::from(x.shape(), x.data(), false);
    return grad_check_full<T>(f, copy, eps).max_rel_error;
}

// Named parameter collection; insertion order is the serialization order.
template <typename T>
struct Params {
    std::vector<std::string> names;
    std::vector<Tensor<T>> tensors;

    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        for (const auto& n : names)
            if (n == name) throw std::invalid_argument("params: duplicate name '" + name + "'");
        t.set_requires_grad(true);
        t.node()->op = name;
        names.push_back(name);
        tensors.push_back(std::move(t));
        return tensors.back();
    }

    Tensor<T>& at(const std::string& name) {
        for (size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return tensors[i];
        throw std::out_of_range("params: no tensor named '" + name + "'");
    }
    const Tensor<T>& at(const std::string& name) const { return const_cast<Params*>(this)->at(name); }

    size_t size() const { return tensors.size(); }

    int64_t total_numel() const {
        int64_t n = 0;
        for (const auto& t : tensors) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& t : tensors) t.zero_grad();
    }

    template <typename U>
    Params<U> cast() const {
        Params<U> out;
        for (size_t i = 0; i < tensors.size(); ++i) {
            std::vector<U> d(tensors[i].data().size());
            for (size_t j = 0; j < d.size(); ++j) d[j] = static_cast<U>(tensors[i].data()[j]);
            out.add(names[i], Tensor<U>::from(tensors[i].shape(), std::move(d)));
        }
        return out;
    }
};

}  // namespace lcd
