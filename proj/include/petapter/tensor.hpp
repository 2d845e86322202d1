#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "petapter/errors.hpp"

namespace petapter {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) {
        n *= e;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        os << s[i] << (i + 1 < s.size() ? "x" : "");
    }
    os << "]";
    return os.str();
}

// Thread-local switch that disables tape recording (inference mode).
inline bool& autograd_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    NoGradGuard() : prev_(autograd_enabled()) { autograd_enabled() = false; }
    ~NoGradGuard() { autograd_enabled() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// One node of the recorded computation graph. Results hold shared ownership
// of their operands, so a graph lives exactly as long as its outputs do;
// parameters outlive the per-step graphs that reference them.
template <typename Real>
struct TensorNode {
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad; // allocated on demand, same length as value
    bool requires_grad{false};
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop; // empty for leaves

    bool is_leaf() const { return !backprop; }

    void ensure_grad() {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), Real(0));
        }
    }
};

template <typename Real>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return from_data(std::move(shape), {});
    }

    static Tensor full(Shape shape, Real v) {
        auto t = zeros(std::move(shape));
        std::fill(t.node_->value.begin(), t.node_->value.end(), v);
        return t;
    }

    static Tensor scalar(Real v) { return full({1}, v); }

    static Tensor from_data(Shape shape, std::vector<Real> data) {
        auto node = std::make_shared<TensorNode<Real>>();
        const std::size_t n = numel(shape);
        node->shape = std::move(shape);
        if (data.empty()) {
            node->value.assign(n, Real(0));
        } else {
            if (data.size() != n) {
                throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                     " does not match shape " + shape_str(node->shape));
            }
            node->value = std::move(data);
        }
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

    std::vector<Real>& values() { return node_->value; }
    const std::vector<Real>& values() const { return node_->value; }
    Real item() const {
        if (size() != 1) {
            throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        }
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        node_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    std::vector<Real>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) {
            std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
        }
    }
    void drop_grad() { node_->grad.clear(); }

    std::shared_ptr<TensorNode<Real>> node() const { return node_; }

    // Runs reverse-mode accumulation from this scalar. Non-leaf grads are
    // reset per call; leaf grads accumulate across calls.
    void backward() const {
        if (size() != 1) {
            throw ContractError("backward() requires a scalar loss, got " + shape_str(shape()));
        }
        if (!node_->requires_grad) {
            return;
        }
        std::vector<TensorNode<Real>*> order = topo_order();
        for (TensorNode<Real>* n : order) {
            if (n->is_leaf()) {
                n->ensure_grad();
            } else {
                n->grad.assign(n->value.size(), Real(0));
            }
        }
        node_->grad.assign(1, Real(1));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            TensorNode<Real>* n = *it;
            if (n->backprop) {
                n->backprop(*n);
            }
        }
    }

private:
    std::shared_ptr<TensorNode<Real>> node_;

    // Iterative post-order DFS over grad-requiring ancestors.
    std::vector<TensorNode<Real>*> topo_order() const {
        std::vector<TensorNode<Real>*> order;
        std::unordered_set<TensorNode<Real>*> visited;
        struct Frame {
            TensorNode<Real>* node;
            std::size_t next_parent;
        };
        std::vector<Frame> stack;
        stack.push_back({node_.get(), 0});
        visited.insert(node_.get());
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_parent < f.node->parents.size()) {
                TensorNode<Real>* p = f.node->parents[f.next_parent++].get();
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(f.node);
                stack.pop_back();
            }
        }
        return order;
    }
};

namespace detail {

template <typename Real>
Tensor<Real> make_result(Shape shape, std::vector<Real> value,
                         std::vector<Tensor<Real>> parents,
                         std::function<void(TensorNode<Real>&)> backprop) {
    Tensor<Real> out = Tensor<Real>::from_data(std::move(shape), std::move(value));
    bool needs_grad = false;
    if (autograd_enabled()) {
        for (const auto& p : parents) {
            needs_grad = needs_grad || p.requires_grad();
        }
    }
    if (needs_grad) {
        auto node = out.node();
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (const auto& p : parents) {
            node->parents.push_back(p.node());
        }
        node->backprop = std::move(backprop);
    }
    return out;
}

template <typename Real>
void check_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<Real> v(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = av[i] + bv[i];
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<Real>(
        a.shape(), std::move(v), {a, b}, [an, bn](TensorNode<Real>& out) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < out.grad.size(); ++i) {
                    an->grad[i] += out.grad[i];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < out.grad.size(); ++i) {
                    bn->grad[i] += out.grad[i];
                }
            }
        });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<Real> v(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = av[i] * bv[i];
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<Real>(
        a.shape(), std::move(v), {a, b}, [an, bn](TensorNode<Real>& out) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < out.grad.size(); ++i) {
                    an->grad[i] += out.grad[i] * bn->value[i];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < out.grad.size(); ++i) {
                    bn->grad[i] += out.grad[i] * an->value[i];
                }
            }
        });
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
    std::vector<Real> v(a.size());
    const auto& av = a.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = av[i] * c;
    }
    auto an = a.node();
    return detail::make_result<Real>(
        a.shape(), std::move(v), {a}, [an, c](TensorNode<Real>& out) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < out.grad.size(); ++i) {
                    an->grad[i] += out.grad[i] * c;
                }
            }
        });
}

// x [n x d] plus a bias row [d], broadcast over rows.
template <typename Real>
Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& bias) {
    if (x.shape().size() != 2 || bias.shape().size() != 1 || x.dim(1) != bias.dim(0)) {
        throw DimensionError("add_bias: " + shape_str(x.shape()) + " vs " + shape_str(bias.shape()));
    }
    const std::size_t n = x.dim(0);
    const std::size_t d = x.dim(1);
    std::vector<Real> v(n * d);
    const auto& xv = x.values();
    const auto& bv = bias.values();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            v[i * d + j] = xv[i * d + j] + bv[j];
        }
    }
    auto xn = x.node();
    auto bn = bias.node();
    return detail::make_result<Real>(
        x.shape(), std::move(v), {x, bias}, [xn, bn, n, d](TensorNode<Real>& out) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < out.grad.size(); ++i) {
                    xn->grad[i] += out.grad[i];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < d; ++j) {
                        bn->grad[j] += out.grad[i * d + j];
                    }
                }
            }
        });
}

// x [n x d] scaled columnwise by s [d] (the IA3 hook).
template <typename Real>
Tensor<Real> col_scale(const Tensor<Real>& x, const Tensor<Real>& s) {
    if (x.shape().size() != 2 || s.shape().size() != 1 || x.dim(1) != s.dim(0)) {
        throw DimensionError("col_scale: " + shape_str(x.shape()) + " vs " + shape_str(s.shape()));
    }
    const std::size_t n = x.dim(0);
    const std::size_t d = x.dim(1);
    std::vector<Real> v(n * d);
    const auto& xv = x.values();
    const auto& sv = s.values();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            v[i * d + j] = xv[i * d + j] * sv[j];
        }
    }
    auto xn = x.node();
    auto sn = s.node();
    return detail::make_result<Real>(
        x.shape(), std::move(v), {x, s}, [xn, sn, n, d](TensorNode<Real>& out) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < d; ++j) {
                        xn->grad[i * d + j] += out.grad[i * d + j] * sn->value[j];
                    }
                }
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < d; ++j) {
                        sn->grad[j] += out.grad[i * d + j] * xn->value[i * d + j];
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<Real> v(m * n, Real(0));
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
            const Real aa = av[i * k + l];
            const Real* brow = bv.data() + l * n;
            Real* crow = v.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += aa * brow[j];
            }
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<Real>(
        {m, n}, std::move(v), {a, b}, [an, bn, m, k, n](TensorNode<Real>& out) {
            if (an->requires_grad) {
                an->ensure_grad();
                // dA = dC * B^T
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t l = 0; l < k; ++l) {
                        Real s = 0;
                        const Real* grow = out.grad.data() + i * n;
                        const Real* brow = bn->value.data() + l * n;
                        for (std::size_t j = 0; j < n; ++j) {
                            s += grow[j] * brow[j];
                        }
                        an->grad[i * k + l] += s;
                    }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                // dB = A^T * dC
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t l = 0; l < k; ++l) {
                        const Real aa = an->value[i * k + l];
                        const Real* grow = out.grad.data() + i * n;
                        Real* brow = bn->grad.data() + l * n;
                        for (std::size_t j = 0; j < n; ++j) {
                            brow[j] += aa * grow[j];
                        }
                    }
                }
            }
        });
}

// a [m x k] times b^T where b is [n x k]; the layout every linear layer uses
// (weights stored one output row each) and the tied MLM decoder.
template <typename Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(1)) {
        throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    std::vector<Real> v(m * n);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < m; ++i) {
        const Real* arow = av.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const Real* brow = bv.data() + j * k;
            Real s = 0;
            for (std::size_t l = 0; l < k; ++l) {
                s += arow[l] * brow[l];
            }
            v[i * n + j] = s;
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<Real>(
        {m, n}, std::move(v), {a, b}, [an, bn, m, k, n](TensorNode<Real>& out) {
            if (an->requires_grad) {
                an->ensure_grad();
                // dA = dC * B
                for (std::size_t i = 0; i < m; ++i) {
                    const Real* grow = out.grad.data() + i * n;
                    Real* arow = an->grad.data() + i * k;
                    for (std::size_t j = 0; j < n; ++j) {
                        const Real g = grow[j];
                        const Real* brow = bn->value.data() + j * k;
                        for (std::size_t l = 0; l < k; ++l) {
                            arow[l] += g * brow[l];
                        }
                    }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                // dB = dC^T * A
                for (std::size_t i = 0; i < m; ++i) {
                    const Real* grow = out.grad.data() + i * n;
                    const Real* arow = an->value.data() + i * k;
                    for (std::size_t j = 0; j < n; ++j) {
                        const Real g = grow[j];
                        Real* brow = bn->grad.data() + j * k;
                        for (std::size_t l = 0; l < k; ++l) {
                            brow[l] += g * arow[l];
                        }
                    }
                }
            }
        });
}

// y = x * W^T + b with W stored [d_out x d_in].
template <typename Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b) {
    return add_bias(matmul_nt(x, w), b);
}

// ---------------------------------------------------------------------------
// gathers
// ---------------------------------------------------------------------------

// Selects rows of x [R x d] by index; backward scatter-adds. Doubles as the
// embedding lookup.
template <typename Real>
Tensor<Real> take_rows(const Tensor<Real>& x, const std::vector<std::size_t>& idx) {
    if (x.shape().size() != 2) {
        throw DimensionError("take_rows: expected matrix, got " + shape_str(x.shape()));
    }
    const std::size_t rows = x.dim(0), d = x.dim(1);
    for (std::size_t r : idx) {
        if (r >= rows) {
            throw ContractError("take_rows: index " + std::to_string(r) + " out of range " +
                                std::to_string(rows));
        }
    }
    std::vector<Real> v(idx.size() * d);
    const auto& xv = x.values();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy_n(xv.data() + idx[i] * d, d, v.data() + i * d);
    }
    auto xn = x.node();
    auto indices = idx;
    return detail::make_result<Real>(
        {idx.size(), d}, std::move(v), {x},
        [xn, indices = std::move(indices), d](TensorNode<Real>& out) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < indices.size(); ++i) {
                    Real* dst = xn->grad.data() + indices[i] * d;
                    const Real* src = out.grad.data() + i * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        dst[j] += src[j];
                    }
                }
            }
        });
}

// Selects columns of x [r x C] by index; the sub-vocabulary restriction.
template <typename Real>
Tensor<Real> take_cols(const Tensor<Real>& x, const std::vector<std::size_t>& idx) {
    if (x.shape().size() != 2) {
        throw DimensionError("take_cols: expected matrix, got " + shape_str(x.shape()));
    }
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    for (std::size_t c : idx) {
        if (c >= cols) {
            throw ContractError("take_cols: index " + std::to_string(c) + " out of range " +
                                std::to_string(cols));
        }
    }
    std::vector<Real> v(rows * idx.size());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < idx.size(); ++j) {
            v[i * idx.size() + j] = xv[i * cols + idx[j]];
        }
    }
    auto xn = x.node();
    auto indices = idx;
    const std::size_t k = idx.size();
    return detail::make_result<Real>(
        {rows, k}, std::move(v), {x},
        [xn, indices = std::move(indices), rows, cols, k](TensorNode<Real>& out) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < rows; ++i) {
                    for (std::size_t j = 0; j < k; ++j) {
                        xn->grad[i * cols + indices[j]] += out.grad[i * k + j];
                    }
                }
            }
        });
}

// out[o] = sum_i x[i, cols[o][i]] for x [m x t]; each output coordinate sums
// one chosen column per row. cols must have m entries per output.
template <typename Real>
Tensor<Real> gather_sum(const Tensor<Real>& x, const std::vector<std::vector<std::size_t>>& cols) {
    if (x.shape().size() != 2) {
        throw DimensionError("gather_sum: expected matrix, got " + shape_str(x.shape()));
    }
    const std::size_t m = x.dim(0), t = x.dim(1);
    std::vector<Real> v(cols.size(), Real(0));
    const auto& xv = x.values();
    for (std::size_t o = 0; o < cols.size(); ++o) {
        if (cols[o].size() != m) {
            throw ContractError("gather_sum: index row length " + std::to_string(cols[o].size()) +
                                " does not match rows " + std::to_string(m));
        }
        Real s = 0;
        for (std::size_t i = 0; i < m; ++i) {
            if (cols[o][i] >= t) {
                throw ContractError("gather_sum: column index " + std::to_string(cols[o][i]) +
                                    " out of range " + std::to_string(t));
            }
            s += xv[i * t + cols[o][i]];
        }
        v[o] = s;
    }
    auto xn = x.node();
    auto indices = cols;
    return detail::make_result<Real>(
        {cols.size()}, std::move(v), {x},
        [xn, indices = std::move(indices), m, t](TensorNode<Real>& out) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t o = 0; o < indices.size(); ++o) {
                    for (std::size_t i = 0; i < m; ++i) {
                        xn->grad[i * t + indices[o][i]] += out.grad[o];
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// nonlinearities and normalization
// ---------------------------------------------------------------------------

// Exact GELU, x * Phi(x) with the Gaussian CDF via erf.
template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
    std::vector<Real> v(x.size());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        const Real cdf = Real(0.5) * (Real(1) + std::erf(xv[i] * Real(0.7071067811865475244)));
        v[i] = xv[i] * cdf;
    }
    auto xn = x.node();
    return detail::make_result<Real>(
        x.shape(), std::move(v), {x}, [xn](TensorNode<Real>& out) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                constexpr Real inv_sqrt2 = Real(0.7071067811865475244);
                constexpr Real inv_sqrt2pi = Real(0.3989422804014326779);
                for (std::size_t i = 0; i < out.grad.size(); ++i) {
                    const Real xi = xn->value[i];
                    const Real cdf = Real(0.5) * (Real(1) + std::erf(xi * inv_sqrt2));
                    const Real pdf = inv_sqrt2pi * std::exp(Real(-0.5) * xi * xi);
                    xn->grad[i] += out.grad[i] * (cdf + xi * pdf);
                }
            }
        });
}

template <typename Real>
Tensor<Real> tanh_act(const Tensor<Real>& x) {
    std::vector<Real> v(x.size());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = std::tanh(xv[i]);
    }
    auto xn = x.node();
    return detail::make_result<Real>(
        x.shape(), std::move(v), {x}, [xn](TensorNode<Real>& out) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < out.grad.size(); ++i) {
                    const Real th = std::tanh(xn->value[i]);
                    xn->grad[i] += out.grad[i] * (Real(1) - th * th);
                }
            }
        });
}

// Per-row normalization over the last axis of x [n x h]: zero mean, unit
// variance (population variance, stabilized by eps), then gamma/beta.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gamma, const Tensor<Real>& beta,
                        Real eps = Real(1e-5)) {
    if (x.shape().size() != 2 || gamma.shape().size() != 1 || beta.shape().size() != 1 ||
        x.dim(1) != gamma.dim(0) || x.dim(1) != beta.dim(0)) {
        throw DimensionError("layer_norm: " + shape_str(x.shape()) + " with gamma " +
                             shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
    }
    const std::size_t n = x.dim(0), h = x.dim(1);
    std::vector<Real> v(n * h);
    std::vector<Real> mean(n), inv_std(n);
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    for (std::size_t i = 0; i < n; ++i) {
        const Real* row = xv.data() + i * h;
        Real mu = 0;
        for (std::size_t j = 0; j < h; ++j) {
            mu += row[j];
        }
        mu /= Real(h);
        Real var = 0;
        for (std::size_t j = 0; j < h; ++j) {
            const Real d = row[j] - mu;
            var += d * d;
        }
        var /= Real(h);
        const Real istd = Real(1) / std::sqrt(var + eps);
        mean[i] = mu;
        inv_std[i] = istd;
        for (std::size_t j = 0; j < h; ++j) {
            v[i * h + j] = (row[j] - mu) * istd * gv[j] + bv[j];
        }
    }
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return detail::make_result<Real>(
        x.shape(), std::move(v), {x, gamma, beta},
        [xn, gn, bn, mean = std::move(mean), inv_std = std::move(inv_std), n,
         h](TensorNode<Real>& out) {
            for (std::size_t i = 0; i < n; ++i) {
                const Real* xrow = xn->value.data() + i * h;
                const Real* grow = out.grad.data() + i * h;
                const Real istd = inv_std[i];
                const Real mu = mean[i];
                if (gn->requires_grad || bn->requires_grad) {
                    if (gn->requires_grad) {
                        gn->ensure_grad();
                    }
                    if (bn->requires_grad) {
                        bn->ensure_grad();
                    }
                    for (std::size_t j = 0; j < h; ++j) {
                        const Real xhat = (xrow[j] - mu) * istd;
                        if (gn->requires_grad) {
                            gn->grad[j] += grow[j] * xhat;
                        }
                        if (bn->requires_grad) {
                            bn->grad[j] += grow[j];
                        }
                    }
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    // dx = istd * (g - mean(g) - xhat * mean(g * xhat)), g = gamma .* dy
                    Real sum_g = 0, sum_gx = 0;
                    for (std::size_t j = 0; j < h; ++j) {
                        const Real g = grow[j] * gn->value[j];
                        const Real xhat = (xrow[j] - mu) * istd;
                        sum_g += g;
                        sum_gx += g * xhat;
                    }
                    const Real mg = sum_g / Real(h);
                    const Real mgx = sum_gx / Real(h);
                    for (std::size_t j = 0; j < h; ++j) {
                        const Real g = grow[j] * gn->value[j];
                        const Real xhat = (xrow[j] - mu) * istd;
                        xn->grad[i * h + j] += istd * (g - mg - xhat * mgx);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

// Scaled dot-product attention probabilities, [heads, n, n] row-major.
// key_mask marks valid key positions; masked keys receive probability zero,
// every row over valid keys sums to one.
template <typename Real>
Tensor<Real> attention_probs(const Tensor<Real>& q, const Tensor<Real>& k, std::size_t heads,
                             const std::vector<std::uint8_t>& key_mask) {
    if (q.shape() != k.shape() || q.shape().size() != 2) {
        throw DimensionError("attention_probs: q " + shape_str(q.shape()) + " vs k " +
                             shape_str(k.shape()));
    }
    const std::size_t n = q.dim(0), h = q.dim(1);
    if (h % heads != 0) {
        throw DimensionError("attention_probs: width " + std::to_string(h) +
                             " not divisible by heads " + std::to_string(heads));
    }
    if (key_mask.size() != n) {
        throw ContractError("attention_probs: key mask length mismatch");
    }
    bool any_valid = false;
    for (std::uint8_t m : key_mask) {
        any_valid = any_valid || (m != 0);
    }
    if (!any_valid) {
        throw ContractError("attention_probs: all key positions masked");
    }
    const std::size_t hd = h / heads;
    const Real inv_sqrt = Real(1) / std::sqrt(Real(hd));
    std::vector<Real> probs(heads * n * n, Real(0));
    const auto& qv = q.values();
    const auto& kv = k.values();
    std::vector<Real> scores(n);
    for (std::size_t hh = 0; hh < heads; ++hh) {
        const std::size_t off = hh * hd;
        for (std::size_t i = 0; i < n; ++i) {
            const Real* qrow = qv.data() + i * h + off;
            Real maxs = -std::numeric_limits<Real>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
                if (!key_mask[j]) {
                    continue;
                }
                const Real* krow = kv.data() + j * h + off;
                Real s = 0;
                for (std::size_t c = 0; c < hd; ++c) {
                    s += qrow[c] * krow[c];
                }
                s *= inv_sqrt;
                scores[j] = s;
                maxs = std::max(maxs, s);
            }
            Real denom = 0;
            for (std::size_t j = 0; j < n; ++j) {
                if (key_mask[j]) {
                    denom += std::exp(scores[j] - maxs);
                }
            }
            Real* prow = probs.data() + (hh * n + i) * n;
            for (std::size_t j = 0; j < n; ++j) {
                prow[j] = key_mask[j] ? std::exp(scores[j] - maxs) / denom : Real(0);
            }
        }
    }
    auto qn = q.node();
    auto kn = k.node();
    auto mask = key_mask;
    return detail::make_result<Real>(
        {heads, n, n}, std::move(probs), {q, k},
        [qn, kn, heads, n, h, hd, inv_sqrt, mask = std::move(mask)](TensorNode<Real>& out) {
            if (!qn->requires_grad && !kn->requires_grad) {
                return;
            }
            if (qn->requires_grad) {
                qn->ensure_grad();
            }
            if (kn->requires_grad) {
                kn->ensure_grad();
            }
            std::vector<Real> ds(n);
            for (std::size_t hh = 0; hh < heads; ++hh) {
                const std::size_t off = hh * hd;
                for (std::size_t i = 0; i < n; ++i) {
                    const Real* prow = out.value.data() + (hh * n + i) * n;
                    const Real* dprow = out.grad.data() + (hh * n + i) * n;
                    Real dot = 0;
                    for (std::size_t j = 0; j < n; ++j) {
                        dot += dprow[j] * prow[j];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        ds[j] = mask[j] ? prow[j] * (dprow[j] - dot) * inv_sqrt : Real(0);
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        if (!mask[j] || ds[j] == Real(0)) {
                            continue;
                        }
                        if (qn->requires_grad) {
                            Real* dq = qn->grad.data() + i * h + off;
                            const Real* krow = kn->value.data() + j * h + off;
                            for (std::size_t c = 0; c < hd; ++c) {
                                dq[c] += ds[j] * krow[c];
                            }
                        }
                        if (kn->requires_grad) {
                            Real* dk = kn->grad.data() + j * h + off;
                            const Real* qrow = qn->value.data() + i * h + off;
                            for (std::size_t c = 0; c < hd; ++c) {
                                dk[c] += ds[j] * qrow[c];
                            }
                        }
                    }
                }
            }
        });
}

// Applies attention probabilities [heads, n, n] to values [n x h].
template <typename Real>
Tensor<Real> attention_mix(const Tensor<Real>& probs, const Tensor<Real>& v) {
    if (probs.shape().size() != 3 || v.shape().size() != 2 || probs.dim(1) != v.dim(0) ||
        probs.dim(1) != probs.dim(2)) {
        throw DimensionError("attention_mix: probs " + shape_str(probs.shape()) + " vs v " +
                             shape_str(v.shape()));
    }
    const std::size_t heads = probs.dim(0), n = probs.dim(1), h = v.dim(1);
    if (h % heads != 0) {
        throw DimensionError("attention_mix: width not divisible by heads");
    }
    const std::size_t hd = h / heads;
    std::vector<Real> outv(n * h, Real(0));
    const auto& pv = probs.values();
    const auto& vv = v.values();
    for (std::size_t hh = 0; hh < heads; ++hh) {
        const std::size_t off = hh * hd;
        for (std::size_t i = 0; i < n; ++i) {
            const Real* prow = pv.data() + (hh * n + i) * n;
            Real* orow = outv.data() + i * h + off;
            for (std::size_t j = 0; j < n; ++j) {
                const Real p = prow[j];
                if (p == Real(0)) {
                    continue;
                }
                const Real* vrow = vv.data() + j * h + off;
                for (std::size_t c = 0; c < hd; ++c) {
                    orow[c] += p * vrow[c];
                }
            }
        }
    }
    auto pn = probs.node();
    auto vn = v.node();
    return detail::make_result<Real>(
        {n, h}, std::move(outv), {probs, v}, [pn, vn, heads, n, h, hd](TensorNode<Real>& out) {
            if (pn->requires_grad) {
                pn->ensure_grad();
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
            }
            for (std::size_t hh = 0; hh < heads; ++hh) {
                const std::size_t off = hh * hd;
                for (std::size_t i = 0; i < n; ++i) {
                    const Real* grow = out.grad.data() + i * h + off;
                    const Real* prow = pn->value.data() + (hh * n + i) * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        if (pn->requires_grad) {
                            const Real* vrow = vn->value.data() + j * h + off;
                            Real s = 0;
                            for (std::size_t c = 0; c < hd; ++c) {
                                s += grow[c] * vrow[c];
                            }
                            pn->grad[(hh * n + i) * n + j] += s;
                        }
                        if (vn->requires_grad && prow[j] != Real(0)) {
                            Real* dv = vn->grad.data() + j * h + off;
                            for (std::size_t c = 0; c < hd; ++c) {
                                dv[c] += prow[j] * grow[c];
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

// Same data, new shape; gradients pass through untouched.
template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(shape));
    }
    auto xn = x.node();
    return detail::make_result<Real>(
        std::move(shape), x.values(), {x}, [xn](TensorNode<Real>& out) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < out.grad.size(); ++i) {
                    xn->grad[i] += out.grad[i];
                }
            }
        });
}

template <typename Real>
Tensor<Real> sum_all(const Tensor<Real>& x) {
    Real s = 0;
    for (Real v : x.values()) {
        s += v;
    }
    auto xn = x.node();
    return detail::make_result<Real>(
        {1}, {s}, {x}, [xn](TensorNode<Real>& out) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < xn->grad.size(); ++i) {
                    xn->grad[i] += out.grad[0];
                }
            }
        });
}

// Cross-entropy of a single score vector s [c] against a gold index, through
// the log-sum-exp form: loss = log(sum exp(s - max)) - (s[gold] - max).
template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& s, std::size_t gold) {
    if (s.shape().size() != 1) {
        throw DimensionError("cross_entropy: expected vector, got " + shape_str(s.shape()));
    }
    const std::size_t c = s.dim(0);
    if (gold >= c) {
        throw ContractError("cross_entropy: gold index " + std::to_string(gold) +
                            " out of range " + std::to_string(c));
    }
    const auto& sv = s.values();
    Real maxs = sv[0];
    for (std::size_t i = 1; i < c; ++i) {
        maxs = std::max(maxs, sv[i]);
    }
    Real sumexp = 0;
    for (std::size_t i = 0; i < c; ++i) {
        sumexp += std::exp(sv[i] - maxs);
    }
    const Real loss = std::log(sumexp) - (sv[gold] - maxs);
    auto sn = s.node();
    return detail::make_result<Real>(
        {1}, {loss}, {s}, [sn, gold, c, maxs, sumexp](TensorNode<Real>& out) {
            if (sn->requires_grad) {
                sn->ensure_grad();
                const Real dl = out.grad[0];
                for (std::size_t i = 0; i < c; ++i) {
                    const Real q = std::exp(sn->value[i] - maxs) / sumexp;
                    sn->grad[i] += dl * q;
                }
                sn->grad[gold] -= dl;
            }
        });
}

template <typename Real>
bool all_finite(const Tensor<Real>& t) {
    for (Real v : t.values()) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

} // namespace petapter
