// Copyright (C) 2026 sdg authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with reverse-mode automatic differentiation.
// Row-major storage, no views, no broadcasting beyond the row case the
// model needs. Every differentiable operation used by the models lives
// here; matrix products are delegated to Eigen behind the same surface.

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sdg/error.hpp"
#include "sdg/rng.hpp"

namespace sdg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream oss;
    oss << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) oss << "x";
        oss << shape[i];
    }
    oss << "]";
    return oss.str();
}

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // allocated on first use, same length as values
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn;  // accumulates this node's grad into parents

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

// Forward passes without graph recording (generation, finite differences).
inline thread_local bool t_grad_enabled = true;

}  // namespace detail

/// RAII switch that disables graph recording on the current thread.
struct NoGradGuard {
    bool previous;
    NoGradGuard() : previous(detail::t_grad_enabled) { detail::t_grad_enabled = false; }
    ~NoGradGuard() { detail::t_grad_enabled = previous; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::t_grad_enabled; }

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : node_(std::make_shared<detail::TensorNode>()) {
        if (numel(shape) != values.size())
            throw ShapeError("tensor shape " + shape_str(shape) + " does not match value count " +
                             std::to_string(values.size()));
        node_->shape = std::move(shape);
        node_->values = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::size_t n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double fill, bool requires_grad = false) {
        std::size_t n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, fill), requires_grad);
    }

    static Tensor ones(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 1.0, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
        std::size_t n = numel(shape);
        std::vector<double> v(n);
        for (double& x : v) x = rand_normal(rng) * stddev;
        return Tensor(std::move(shape), std::move(v), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->values.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t ndim() const { return node_->shape.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& values() const { return node_->values; }
    /// Mutable access for parameter updates and test rigs. Mutating a tensor
    /// that sits inside a live graph invalidates that graph.
    std::vector<double>& mutable_values() { return node_->values; }

    double operator()(std::size_t i) const { return node_->values.at(i); }
    double operator()(std::size_t r, std::size_t c) const {
        return node_->values.at(r * node_->shape.at(1) + c);
    }

    /// Value of a scalar (single-element) tensor.
    double value() const {
        if (size() != 1)
            throw ShapeError("value() requires scalar tensor, got shape " + shape_str(shape()));
        return node_->values[0];
    }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const { return node_->grad; }
    std::vector<double>& mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    /// Leaf copy of the values (no graph history), optionally tracking grads.
    Tensor detached_copy(bool requires_grad = false) const {
        return Tensor(node_->shape, node_->values, requires_grad);
    }

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

    /// Generic differentiable operation: the hook used internally by every op
    /// and available to extensions and tests. `backward` receives the output
    /// tensor (whose grad is populated) and the input tensors, and must
    /// accumulate into the inputs' mutable_grad() buffers.
    static Tensor from_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                          std::function<void(Tensor&, std::vector<Tensor>&)> backward) {
        Tensor out(std::move(shape), std::move(values));
        bool any_grad = false;
        for (const Tensor& t : inputs) any_grad = any_grad || t.requires_grad();
        if (detail::t_grad_enabled && any_grad) {
            out.node_->requires_grad = true;
            for (const Tensor& t : inputs) out.node_->parents.push_back(t.node_);
            // Capture a raw self pointer: owning it would create a cycle. The
            // closure only runs from backward(), which keeps the node alive.
            detail::TensorNode* self = out.node_.get();
            out.node_->backward_fn = [self, inputs = std::move(inputs),
                                      backward = std::move(backward)]() mutable {
                Tensor out_view;
                out_view.node_ =
                    std::shared_ptr<detail::TensorNode>(std::shared_ptr<detail::TensorNode>(),
                                                        self);
                backward(out_view, inputs);
            };
        }
        return out;
    }

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// --------------------------------------------------------------------------
// backward
// --------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar loss. Populates grad for every reachable
/// tensor that requires gradients; repeated calls accumulate.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw ShapeError("backward() requires a scalar loss, got shape " +
                         shape_str(loss.shape()));
    // Iterative post-order over parents.
    std::vector<detail::TensorNode*> topo;
    std::unordered_set<detail::TensorNode*> visited;
    std::vector<std::pair<detail::TensorNode*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            detail::TensorNode* child = node->parents[next_child++].get();
            if (visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    // Interior (op-produced) grads are scratch space for this sweep; only
    // leaf grads accumulate across calls.
    for (detail::TensorNode* node : topo)
        if (node->backward_fn) node->grad.assign(node->values.size(), 0.0);
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
}

// --------------------------------------------------------------------------
// Eigen plumbing
// --------------------------------------------------------------------------

namespace detail {
using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

inline ECMap as_mat(const std::vector<double>& v, std::size_t r, std::size_t c) {
    return ECMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline EMap as_mat(std::vector<double>& v, std::size_t r, std::size_t c) {
    return EMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline void require_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2)
        throw ShapeError(std::string(op) + " requires a 2-d tensor, got " + shape_str(t.shape()));
}
}  // namespace detail

// --------------------------------------------------------------------------
// Elementwise and structural operations
// --------------------------------------------------------------------------

/// Elementwise sum. Also accepts b of shape [1 x c] against a of shape
/// [r x c], broadcasting b over rows (the style-routing case).
inline Tensor add(const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape();
    const bool row_bcast = !same && a.ndim() == 2 && b.ndim() == 2 && b.dim(0) == 1 &&
                           a.dim(1) == b.dim(1);
    if (!same && !row_bcast)
        throw ShapeError("add: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    std::vector<double> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    if (same) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    } else {
        std::size_t cols = a.dim(1);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i % cols];
    }
    return Tensor::from_op(a.shape(), std::move(out), {a, b},
                           [same](Tensor& out_t, std::vector<Tensor>& in) {
                               const auto& g = out_t.grad();
                               auto& ga = in[0].mutable_grad();
                               auto& gb = in[1].mutable_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                               if (same) {
                                   for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                               } else {
                                   std::size_t cols = gb.size();
                                   for (std::size_t i = 0; i < g.size(); ++i) gb[i % cols] += g[i];
                               }
                           });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    return Tensor::from_op(a.shape(), std::move(out), {a, b},
                           [](Tensor& out_t, std::vector<Tensor>& in) {
                               const auto& g = out_t.grad();
                               auto& ga = in[0].mutable_grad();
                               auto& gb = in[1].mutable_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   ga[i] += g[i];
                                   gb[i] -= g[i];
                               }
                           });
}

/// Elementwise (Hadamard) product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    return Tensor::from_op(a.shape(), std::move(out), {a, b},
                           [](Tensor& out_t, std::vector<Tensor>& in) {
                               const auto& g = out_t.grad();
                               const auto& av = in[0].values();
                               const auto& bv = in[1].values();
                               auto& ga = in[0].mutable_grad();
                               auto& gb = in[1].mutable_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   ga[i] += g[i] * bv[i];
                                   gb[i] += g[i] * av[i];
                               }
                           });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
    return Tensor::from_op(a.shape(), std::move(out), {a},
                           [c](Tensor& out_t, std::vector<Tensor>& in) {
                               const auto& g = out_t.grad();
                               auto& ga = in[0].mutable_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
                           });
}

/// Matrix product of a [m x k] and b [k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n);
    detail::as_mat(out, m, n).noalias() =
        detail::as_mat(a.values(), m, k) * detail::as_mat(b.values(), k, n);
    return Tensor::from_op({m, n}, std::move(out), {a, b},
                           [m, k, n](Tensor& out_t, std::vector<Tensor>& in) {
                               auto gc = detail::as_mat(out_t.mutable_grad(), m, n);
                               auto av = detail::as_mat(in[0].values(), m, k);
                               auto bv = detail::as_mat(in[1].values(), k, n);
                               detail::as_mat(in[0].mutable_grad(), m, k).noalias() +=
                                   gc * bv.transpose();
                               detail::as_mat(in[1].mutable_grad(), k, n).noalias() +=
                                   av.transpose() * gc;
                           });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_2d(a, "transpose");
    std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(r * c);
    detail::as_mat(out, c, r) = detail::as_mat(a.values(), r, c).transpose();
    return Tensor::from_op({c, r}, std::move(out), {a},
                           [r, c](Tensor& out_t, std::vector<Tensor>& in) {
                               detail::as_mat(in[0].mutable_grad(), r, c) +=
                                   detail::as_mat(out_t.mutable_grad(), c, r).transpose();
                           });
}

// --------------------------------------------------------------------------
// Reductions and nonlinearities
// --------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double s = std::accumulate(a.values().begin(), a.values().end(), 0.0);
    return Tensor::from_op({1}, {s}, {a}, [](Tensor& out_t, std::vector<Tensor>& in) {
        double g = out_t.grad()[0];
        auto& ga = in[0].mutable_grad();
        for (double& x : ga) x += g;
    });
}

inline Tensor mean(const Tensor& a) {
    double s = std::accumulate(a.values().begin(), a.values().end(), 0.0);
    double n = static_cast<double>(a.size());
    return Tensor::from_op({1}, {s / n}, {a}, [n](Tensor& out_t, std::vector<Tensor>& in) {
        double g = out_t.grad()[0] / n;
        auto& ga = in[0].mutable_grad();
        for (double& x : ga) x += g;
    });
}

/// Single element of a tensor as a scalar.
inline Tensor select(const Tensor& a, std::size_t flat_index) {
    if (flat_index >= a.size())
        throw std::out_of_range("select: index " + std::to_string(flat_index) +
                                " out of range for size " + std::to_string(a.size()));
    return Tensor::from_op({1}, {a.values()[flat_index]}, {a},
                           [flat_index](Tensor& out_t, std::vector<Tensor>& in) {
                               in[0].mutable_grad()[flat_index] += out_t.grad()[0];
                           });
}

/// Gaussian error linear unit (tanh approximation), smooth everywhere.
inline Tensor gelu(const Tensor& a) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double x = a.values()[i];
        out[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
    }
    return Tensor::from_op(a.shape(), std::move(out), {a},
                           [](Tensor& out_t, std::vector<Tensor>& in) {
                               const auto& g = out_t.grad();
                               const auto& xv = in[0].values();
                               auto& ga = in[0].mutable_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   double x = xv[i];
                                   double u = kC * (x + kA * x * x * x);
                                   double t = std::tanh(u);
                                   double du = kC * (1.0 + 3.0 * kA * x * x);
                                   double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                                   ga[i] += g[i] * d;
                               }
                           });
}

/// Softmax along `axis` (negative counts from the end). Stabilized by
/// max-subtraction; rows sum to one and are strictly positive.
inline Tensor softmax(const Tensor& a, int axis = -1) {
    int nd = static_cast<int>(a.ndim());
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd)
        throw ShapeError("softmax: axis out of range for shape " + shape_str(a.shape()));
    std::size_t n = a.dim(static_cast<std::size_t>(axis));
    std::size_t inner = 1, outer = 1;
    for (int i = axis + 1; i < nd; ++i) inner *= a.dim(static_cast<std::size_t>(i));
    for (int i = 0; i < axis; ++i) outer *= a.dim(static_cast<std::size_t>(i));

    std::vector<double> out(a.size());
    const auto& av = a.values();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in_i = 0; in_i < inner; ++in_i) {
            std::size_t base = o * n * inner + in_i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, av[base + j * inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                double e = std::exp(av[base + j * inner] - mx);
                out[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
        }
    }
    return Tensor::from_op(
        a.shape(), std::move(out), {a},
        [n, inner, outer](Tensor& out_t, std::vector<Tensor>& in) {
            const auto& g = out_t.grad();
            const auto& y = out_t.values();
            auto& ga = in[0].mutable_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in_i = 0; in_i < inner; ++in_i) {
                    std::size_t base = o * n * inner + in_i;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        std::size_t idx = base + j * inner;
                        dot += g[idx] * y[idx];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        std::size_t idx = base + j * inner;
                        ga[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
        });
}

/// Per-position standardization over the last axis, then affine transform.
/// gain and bias are 1-d tensors of length h (the last axis).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    if (x.ndim() < 1) throw ShapeError("layer_norm: needs at least 1 axis");
    std::size_t h = x.dim(x.ndim() - 1);
    if (gain.size() != h || bias.size() != h)
        throw ShapeError("layer_norm: gain/bias length must match last axis, got " +
                         shape_str(gain.shape()) + " and " + shape_str(bias.shape()) + " for " +
                         shape_str(x.shape()));
    if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
    std::size_t rows = x.size() / h;
    std::vector<double> out(x.size());
    std::vector<double> inv_std(rows), xhat(x.size());
    const auto& xv = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * h;
        double m = 0.0;
        for (std::size_t j = 0; j < h; ++j) m += row[j];
        m /= static_cast<double>(h);
        double var = 0.0;
        for (std::size_t j = 0; j < h; ++j) {
            double d = row[j] - m;
            var += d * d;
        }
        var /= static_cast<double>(h);
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < h; ++j) {
            double xh = (row[j] - m) * is;
            xhat[r * h + j] = xh;
            out[r * h + j] = xh * gain.values()[j] + bias.values()[j];
        }
    }
    return Tensor::from_op(
        x.shape(), std::move(out), {x, gain, bias},
        [h, rows, inv_std = std::move(inv_std),
         xhat = std::move(xhat)](Tensor& out_t, std::vector<Tensor>& in) {
            const auto& g = out_t.grad();
            const auto& gainv = in[1].values();
            auto& gx = in[0].mutable_grad();
            auto& ggain = in[1].mutable_grad();
            auto& gbias = in[2].mutable_grad();
            double hn = static_cast<double>(h);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* grow = g.data() + r * h;
                const double* xh = xhat.data() + r * h;
                double sum_dy = 0.0, sum_dy_xh = 0.0;
                for (std::size_t j = 0; j < h; ++j) {
                    double dy = grow[j] * gainv[j];
                    sum_dy += dy;
                    sum_dy_xh += dy * xh[j];
                }
                for (std::size_t j = 0; j < h; ++j) {
                    double dy = grow[j] * gainv[j];
                    gx[r * h + j] +=
                        inv_std[r] * (dy - sum_dy / hn - xh[j] * sum_dy_xh / hn);
                    ggain[j] += grow[j] * xh[j];
                    gbias[j] += grow[j];
                }
            }
        });
}

// --------------------------------------------------------------------------
// Token-level operations
// --------------------------------------------------------------------------

/// Rows of an embedding table [V x h] gathered by token id.
inline Tensor embed(const Tensor& table, const std::vector<int>& ids) {
    detail::require_2d(table, "embed");
    std::size_t v = table.dim(0), h = table.dim(1);
    std::vector<double> out(ids.size() * h);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        int id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= v)
            throw std::out_of_range("embed: token id " + std::to_string(id) +
                                    " out of range for vocab " + std::to_string(v));
        std::copy_n(table.values().data() + static_cast<std::size_t>(id) * h, h,
                    out.data() + i * h);
    }
    return Tensor::from_op({ids.size(), h}, std::move(out), {table},
                           [ids, h](Tensor& out_t, std::vector<Tensor>& in) {
                               const auto& g = out_t.grad();
                               auto& gt = in[0].mutable_grad();
                               for (std::size_t i = 0; i < ids.size(); ++i) {
                                   double* dst = gt.data() + static_cast<std::size_t>(ids[i]) * h;
                                   const double* src = g.data() + i * h;
                                   for (std::size_t j = 0; j < h; ++j) dst[j] += src[j];
                               }
                           });
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` [l x V], restricted to unmasked positions. An empty mask means
/// every position counts.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<std::uint8_t>& mask = {}) {
    detail::require_2d(logits, "cross_entropy");
    std::size_t l = logits.dim(0), v = logits.dim(1);
    if (targets.size() != l)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
    if (!mask.empty() && mask.size() != l)
        throw ShapeError("cross_entropy: mask length " + std::to_string(mask.size()) +
                         " does not match " + std::to_string(l) + " positions");
    std::size_t active = 0;
    for (std::size_t i = 0; i < l; ++i) {
        bool on = mask.empty() || mask[i];
        if (!on) continue;
        ++active;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
            throw std::out_of_range("cross_entropy: target id " + std::to_string(targets[i]) +
                                    " out of range for vocab " + std::to_string(v));
    }
    if (active == 0) throw ContractError("cross_entropy: all positions masked");

    // Stable log-softmax; keep probabilities for the backward pass.
    std::vector<double> probs(l * v);
    double loss = 0.0;
    const auto& lv = logits.values();
    for (std::size_t i = 0; i < l; ++i) {
        const double* row = lv.data() + i * v;
        double mx = *std::max_element(row, row + v);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        double log_z = std::log(z) + mx;
        for (std::size_t j = 0; j < v; ++j) probs[i * v + j] = std::exp(row[j] - log_z);
        if (mask.empty() || mask[i])
            loss -= row[static_cast<std::size_t>(targets[i])] - log_z;
    }
    loss /= static_cast<double>(active);
    return Tensor::from_op(
        {1}, {loss}, {logits},
        [l, v, active, targets, mask, probs = std::move(probs)](Tensor& out_t,
                                                                std::vector<Tensor>& in) {
            double g = out_t.grad()[0] / static_cast<double>(active);
            auto& gl = in[0].mutable_grad();
            for (std::size_t i = 0; i < l; ++i) {
                if (!mask.empty() && !mask[i]) continue;
                const double* p = probs.data() + i * v;
                double* dst = gl.data() + i * v;
                for (std::size_t j = 0; j < v; ++j) dst[j] += g * p[j];
                dst[static_cast<std::size_t>(targets[i])] -= g;
            }
        });
}

// --------------------------------------------------------------------------
// Column slicing (multi-head attention support)
// --------------------------------------------------------------------------

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
    detail::require_2d(a, "slice_cols");
    std::size_t r = a.dim(0), c = a.dim(1);
    if (start + count > c)
        throw ShapeError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") exceeds " + shape_str(a.shape()));
    std::vector<double> out(r * count);
    for (std::size_t i = 0; i < r; ++i)
        std::copy_n(a.values().data() + i * c + start, count, out.data() + i * count);
    return Tensor::from_op({r, count}, std::move(out), {a},
                           [r, c, start, count](Tensor& out_t, std::vector<Tensor>& in) {
                               const auto& g = out_t.grad();
                               auto& ga = in[0].mutable_grad();
                               for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < count; ++j)
                                       ga[i * c + start + j] += g[i * count + j];
                           });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    std::size_t r = parts[0].dim(0), total = 0;
    for (const Tensor& p : parts) {
        detail::require_2d(p, "concat_cols");
        if (p.dim(0) != r)
            throw ShapeError("concat_cols: row mismatch, " + shape_str(parts[0].shape()) +
                             " vs " + shape_str(p.shape()));
        total += p.dim(1);
    }
    std::vector<double> out(r * total);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        offsets.push_back(off);
        std::size_t c = p.dim(1);
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(p.values().data() + i * c, c, out.data() + i * total + off);
        off += c;
    }
    return Tensor::from_op({r, total}, std::move(out), parts,
                           [r, total, offsets](Tensor& out_t, std::vector<Tensor>& in) {
                               const auto& g = out_t.grad();
                               for (std::size_t k = 0; k < in.size(); ++k) {
                                   std::size_t c = in[k].dim(1);
                                   auto& gp = in[k].mutable_grad();
                                   for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < c; ++j)
                                           gp[i * c + j] += g[i * total + offsets[k] + j];
                               }
                           });
}

// --------------------------------------------------------------------------
// Gradient checking
// --------------------------------------------------------------------------

/// Central-difference check of a scalar-valued tensor function at x.
/// Returns the worst per-element relative error with denominator
/// max(|analytic|, |numeric|, 1e-8).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h = 1e-5) {
    if (h <= 0.0) throw ConfigError("grad_check: step must be positive");
    Tensor probe = x.detached_copy(/*requires_grad=*/true);
    Tensor loss = f(probe);
    if (loss.size() != 1) throw ContractError("grad_check: f must be scalar-valued");
    backward(loss);
    std::vector<double> analytic = probe.grad();
    if (analytic.empty()) analytic.assign(probe.size(), 0.0);

    double worst = 0.0;
    NoGradGuard no_grad;
    std::vector<double> work = x.values();
    for (std::size_t i = 0; i < work.size(); ++i) {
        double orig = work[i];
        work[i] = orig + h;
        double up = f(Tensor(x.shape(), work)).value();
        work[i] = orig - h;
        double down = f(Tensor(x.shape(), work)).value();
        work[i] = orig;
        double numeric = (up - down) / (2.0 * h);
        double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

}  // namespace sdg
