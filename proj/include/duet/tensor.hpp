#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "duet/error.hpp"
#include "duet/rng.hpp"

namespace duet {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) {
        if (d <= 0) throw ShapeError("shape dimensions must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

/// One node of the reverse-mode graph: the op's output buffer, references to
/// its inputs, and a closure that pushes this node's grad into the parents.
/// Creation order is topological; backward() revisits each node exactly once.
struct GraphNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // lazily allocated, same length as data
    std::vector<std::shared_ptr<GraphNode>> parents;
    std::function<void(GraphNode&)> backward_fn;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

/// Thread-local switch: with grads disabled, ops produce plain buffers and
/// record no graph. Used for sampling and evaluation.
class GradMode {
  public:
    static bool enabled() { return flag(); }
    static void set(bool on) { flag() = on; }

  private:
    static bool& flag() {
        thread_local bool f = true;
        return f;
    }
};

struct NoGradGuard {
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev_); }
    bool prev_;
};

/// Dense fp64 tensor, row-major flat storage, value-semantic handle into the
/// autodiff graph. Leaves with requires_grad accumulate into grad on
/// backward(); calling backward() again without zero_grad() keeps
/// accumulating.
class Tensor {
  public:
    Tensor() : n_(std::make_shared<detail::GraphNode>()) {}

    static Tensor zeros(Shape s) {
        Tensor t;
        t.n_->data.assign(shape_numel(s), 0.0);
        t.n_->shape = std::move(s);
        return t;
    }

    static Tensor full(Shape s, double v) {
        Tensor t = zeros(std::move(s));
        std::fill(t.n_->data.begin(), t.n_->data.end(), v);
        return t;
    }

    static Tensor ones(Shape s) { return full(std::move(s), 1.0); }

    static Tensor scalar(double v) { return full({1}, v); }

    static Tensor from_data(Shape s, std::vector<double> d) {
        if (static_cast<std::int64_t>(d.size()) != shape_numel(s))
            throw ShapeError("from_data: " + std::to_string(d.size()) +
                             " values for shape " + shape_str(s));
        Tensor t;
        t.n_->shape = std::move(s);
        t.n_->data = std::move(d);
        return t;
    }

    static Tensor randn(Shape s, Rng& rng, double stddev = 1.0) {
        Tensor t = zeros(std::move(s));
        for (auto& v : t.n_->data) v = rng.normal() * stddev;
        return t;
    }

    const Shape& shape() const { return n_->shape; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    std::int64_t dim(int i) const { return n_->shape.at(static_cast<std::size_t>(i)); }
    std::int64_t numel() const { return n_->numel(); }

    std::vector<double>& data() { return n_->data; }
    const std::vector<double>& data() const { return n_->data; }
    double& at(std::int64_t i) { return n_->data[static_cast<std::size_t>(i)]; }
    double at(std::int64_t i) const { return n_->data[static_cast<std::size_t>(i)]; }

    /// Scalar extraction; anything but a single-element tensor is a contract
    /// violation.
    double value() const {
        if (numel() != 1) throw ContractError("value(): tensor " + shape_str(shape()) + " is not scalar");
        return n_->data[0];
    }

    bool requires_grad() const { return n_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        n_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !n_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (n_->grad.empty()) throw ContractError("grad(): no gradient accumulated");
        return n_->grad;
    }
    std::vector<double>& grad_mut() {
        if (n_->grad.empty()) throw ContractError("grad_mut(): no gradient accumulated");
        return n_->grad;
    }
    void zero_grad() { n_->grad.clear(); }

    /// Same data, fresh leaf outside any graph.
    Tensor detached() const { return from_data(n_->shape, n_->data); }

    bool all_finite() const {
        for (double v : n_->data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    /// NaN/Inf is a detectable error state, never silent: callers that need
    /// the guarantee invoke this and get a NumericError naming the context.
    void check_finite(const std::string& what) const {
        if (!all_finite()) throw NumericError("non-finite values in " + what);
    }

    bool same_data(const Tensor& o) const { return n_->data == o.n_->data; }

    std::shared_ptr<detail::GraphNode> node() const { return n_; }

  private:
    std::shared_ptr<detail::GraphNode> n_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<Tensor> inputs,
                      std::function<void(GraphNode&)> backward_fn) {
    Tensor out = Tensor::zeros(std::move(shape));
    if (!GradMode::enabled()) return out;
    bool need = false;
    for (const auto& t : inputs)
        if (t.node()->requires_grad) need = true;
    if (!need) return out;
    auto n = out.node();
    n->requires_grad = true;
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backward_fn = std::move(backward_fn);
    return out;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    auto an = a.node(), bn = b.node();
    Tensor out = detail::make_op(a.shape(), {a, b}, [an, bn](detail::GraphNode& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i];
        }
    });
    auto& o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] + b.data()[i];
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    auto an = a.node(), bn = b.node();
    Tensor out = detail::make_op(a.shape(), {a, b}, [an, bn](detail::GraphNode& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] -= n.grad[i];
        }
    });
    auto& o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] - b.data()[i];
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    auto an = a.node(), bn = b.node();
    Tensor out = detail::make_op(a.shape(), {a, b}, [an, bn](detail::GraphNode& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i] * an->data[i];
        }
    });
    auto& o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * b.data()[i];
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    auto an = a.node();
    Tensor out = detail::make_op(a.shape(), {a}, [an, s](detail::GraphNode& n) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * s;
    });
    auto& o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * s;
    return out;
}

inline Tensor add_scalar(const Tensor& a, double s) {
    auto an = a.node();
    Tensor out = detail::make_op(a.shape(), {a}, [an](detail::GraphNode& n) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
    });
    auto& o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] + s;
    return out;
}

/// Exact GELU, 0.5*x*(1+erf(x/sqrt(2))). Smooth, so finite differences agree
/// tightly everywhere.
inline Tensor gelu(const Tensor& a) {
    auto an = a.node();
    Tensor out = detail::make_op(a.shape(), {a}, [an](detail::GraphNode& n) {
        an->ensure_grad();
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            double x = an->data[i];
            double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            an->grad[i] += n.grad[i] * (cdf + x * pdf);
        }
    });
    auto& o = out.data();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::size_t i = 0; i < o.size(); ++i) {
        double x = a.data()[i];
        o[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    return out;
}

// ---------------------------------------------------------------------------
// matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: need rank-2 operands, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto an = a.node(), bn = b.node();
    Tensor out = detail::make_op({m, n}, {a, b}, [an, bn, m, k, n](detail::GraphNode& nd) {
        // dA = dC * B^T, dB = A^T * dC
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j) {
                    double g = nd.grad[static_cast<std::size_t>(i * n + j)];
                    if (g == 0.0) continue;
                    for (std::int64_t p = 0; p < k; ++p)
                        an->grad[static_cast<std::size_t>(i * k + p)] +=
                            g * bn->data[static_cast<std::size_t>(p * n + j)];
                }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t p = 0; p < k; ++p) {
                    double av = an->data[static_cast<std::size_t>(i * k + p)];
                    if (av == 0.0) continue;
                    for (std::int64_t j = 0; j < n; ++j)
                        bn->grad[static_cast<std::size_t>(p * n + j)] +=
                            av * nd.grad[static_cast<std::size_t>(i * n + j)];
                }
        }
    });
    auto& o = out.data();
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t p = 0; p < k; ++p) {
            double av = ad[static_cast<std::size_t>(i * k + p)];
            if (av == 0.0) continue;
            for (std::int64_t j = 0; j < n; ++j)
                o[static_cast<std::size_t>(i * n + j)] += av * bd[static_cast<std::size_t>(p * n + j)];
        }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: need rank-2, got " + shape_str(a.shape()));
    const std::int64_t m = a.dim(0), n = a.dim(1);
    auto an = a.node();
    Tensor out = detail::make_op({n, m}, {a}, [an, m, n](detail::GraphNode& nd) {
        an->ensure_grad();
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j)
                an->grad[static_cast<std::size_t>(i * n + j)] +=
                    nd.grad[static_cast<std::size_t>(j * m + i)];
    });
    auto& o = out.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j)
            o[static_cast<std::size_t>(j * m + i)] = a.data()[static_cast<std::size_t>(i * n + j)];
    return out;
}

/// Broadcast add of a length-d bias over the rows of an n x d matrix.
inline Tensor add_bias(const Tensor& a, const Tensor& bias) {
    if (a.rank() != 2 || bias.rank() != 1 || a.dim(1) != bias.dim(0))
        throw ShapeError("add_bias: " + shape_str(a.shape()) + " with bias " + shape_str(bias.shape()));
    const std::int64_t rows = a.dim(0), cols = a.dim(1);
    auto an = a.node(), bn = bias.node();
    Tensor out = detail::make_op(a.shape(), {a, bias}, [an, bn, rows, cols](detail::GraphNode& nd) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < nd.grad.size(); ++i) an->grad[i] += nd.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t c = 0; c < cols; ++c)
                    bn->grad[static_cast<std::size_t>(c)] +=
                        nd.grad[static_cast<std::size_t>(r * cols + c)];
        }
    });
    auto& o = out.data();
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < cols; ++c)
            o[static_cast<std::size_t>(r * cols + c)] =
                a.data()[static_cast<std::size_t>(r * cols + c)] + bias.data()[static_cast<std::size_t>(c)];
    return out;
}

// ---------------------------------------------------------------------------
// reductions and normalizations
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    auto an = a.node();
    Tensor out = detail::make_op({1}, {a}, [an](detail::GraphNode& nd) {
        an->ensure_grad();
        for (auto& g : an->grad) g += nd.grad[0];
    });
    out.data()[0] = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    return out;
}

inline Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    auto an = a.node();
    Tensor out = detail::make_op({1}, {a}, [an, inv](detail::GraphNode& nd) {
        an->ensure_grad();
        for (auto& g : an->grad) g += nd.grad[0] * inv;
    });
    out.data()[0] = std::accumulate(a.data().begin(), a.data().end(), 0.0) * inv;
    return out;
}

namespace detail {

// Iterates all slices along `axis`: calls fn(base_offset, stride, length).
template <typename Fn>
void for_each_lane(const Shape& shape, int axis, Fn&& fn) {
    const int r = static_cast<int>(shape.size());
    std::int64_t stride = 1;
    for (int i = axis + 1; i < r; ++i) stride *= shape[static_cast<std::size_t>(i)];
    const std::int64_t len = shape[static_cast<std::size_t>(axis)];
    std::int64_t outer = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t s = 0; s < stride; ++s) fn(o * stride * len + s, stride, len);
}

}  // namespace detail

/// Softmax along `axis` (negative axes count from the back), computed with
/// max subtraction. Outputs along the reduced axis sum to 1.
inline Tensor softmax(const Tensor& a, int axis) {
    int r = a.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
    auto an = a.node();
    Shape shape = a.shape();
    Tensor out = detail::make_op(shape, {a}, [an, shape, axis](detail::GraphNode& nd) {
        an->ensure_grad();
        // ds_i = y_i * (dy_i - sum_j dy_j y_j)
        detail::for_each_lane(shape, axis, [&](std::int64_t base, std::int64_t stride, std::int64_t len) {
            double dot = 0.0;
            for (std::int64_t i = 0; i < len; ++i) {
                auto idx = static_cast<std::size_t>(base + i * stride);
                dot += nd.grad[idx] * nd.data[idx];
            }
            for (std::int64_t i = 0; i < len; ++i) {
                auto idx = static_cast<std::size_t>(base + i * stride);
                an->grad[idx] += nd.data[idx] * (nd.grad[idx] - dot);
            }
        });
    });
    auto& o = out.data();
    detail::for_each_lane(a.shape(), axis, [&](std::int64_t base, std::int64_t stride, std::int64_t len) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t i = 0; i < len; ++i)
            mx = std::max(mx, a.data()[static_cast<std::size_t>(base + i * stride)]);
        double denom = 0.0;
        for (std::int64_t i = 0; i < len; ++i) {
            auto idx = static_cast<std::size_t>(base + i * stride);
            o[idx] = std::exp(a.data()[idx] - mx);
            denom += o[idx];
        }
        for (std::int64_t i = 0; i < len; ++i) o[static_cast<std::size_t>(base + i * stride)] /= denom;
    });
    return out;
}

/// Per-row normalization over the last dimension: zero mean, unit variance
/// (population), then gamma/beta affine. Row statistics are recomputed in the
/// backward pass from the still-live input buffer.
inline Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
    if (eps <= 0.0) throw ParamError("layer_norm: eps must be positive");
    if (a.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
    const std::int64_t d = a.dim(a.rank() - 1);
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
        throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " must match last dim " + std::to_string(d));
    const std::int64_t rows = a.numel() / d;
    auto an = a.node(), gn = gamma.node(), bn = beta.node();
    Tensor out = detail::make_op(a.shape(), {a, gamma, beta},
                                 [an, gn, bn, rows, d, eps](detail::GraphNode& nd) {
        std::vector<double> xhat(static_cast<std::size_t>(d));
        for (std::int64_t r = 0; r < rows; ++r) {
            const auto base = static_cast<std::size_t>(r * d);
            double mu = 0.0, var = 0.0;
            for (std::int64_t i = 0; i < d; ++i) mu += an->data[base + static_cast<std::size_t>(i)];
            mu /= static_cast<double>(d);
            for (std::int64_t i = 0; i < d; ++i) {
                double c = an->data[base + static_cast<std::size_t>(i)] - mu;
                var += c * c;
            }
            var /= static_cast<double>(d);
            const double inv = 1.0 / std::sqrt(var + eps);
            for (std::int64_t i = 0; i < d; ++i)
                xhat[static_cast<std::size_t>(i)] =
                    (an->data[base + static_cast<std::size_t>(i)] - mu) * inv;
            if (gn->requires_grad || bn->requires_grad) {
                if (gn->requires_grad) gn->ensure_grad();
                if (bn->requires_grad) bn->ensure_grad();
                for (std::int64_t i = 0; i < d; ++i) {
                    double g = nd.grad[base + static_cast<std::size_t>(i)];
                    if (gn->requires_grad) gn->grad[static_cast<std::size_t>(i)] += g * xhat[static_cast<std::size_t>(i)];
                    if (bn->requires_grad) bn->grad[static_cast<std::size_t>(i)] += g;
                }
            }
            if (an->requires_grad) {
                an->ensure_grad();
                // dx = inv/d * (d*dy' - sum(dy') - xhat * sum(dy' * xhat)),
                // where dy' = dy * gamma
                double s1 = 0.0, s2 = 0.0;
                for (std::int64_t i = 0; i < d; ++i) {
                    double gy = nd.grad[base + static_cast<std::size_t>(i)] * gn->data[static_cast<std::size_t>(i)];
                    s1 += gy;
                    s2 += gy * xhat[static_cast<std::size_t>(i)];
                }
                for (std::int64_t i = 0; i < d; ++i) {
                    double gy = nd.grad[base + static_cast<std::size_t>(i)] * gn->data[static_cast<std::size_t>(i)];
                    an->grad[base + static_cast<std::size_t>(i)] +=
                        inv * (gy - (s1 + xhat[static_cast<std::size_t>(i)] * s2) / static_cast<double>(d));
                }
            }
        }
    });
    auto& o = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const auto base = static_cast<std::size_t>(r * d);
        double mu = 0.0, var = 0.0;
        for (std::int64_t i = 0; i < d; ++i) mu += a.data()[base + static_cast<std::size_t>(i)];
        mu /= static_cast<double>(d);
        for (std::int64_t i = 0; i < d; ++i) {
            double c = a.data()[base + static_cast<std::size_t>(i)] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::int64_t i = 0; i < d; ++i)
            o[base + static_cast<std::size_t>(i)] =
                (a.data()[base + static_cast<std::size_t>(i)] - mu) * inv *
                    gamma.data()[static_cast<std::size_t>(i)] +
                beta.data()[static_cast<std::size_t>(i)];
    }
    return out;
}

// ---------------------------------------------------------------------------
// row selection / assembly
// ---------------------------------------------------------------------------

/// out[i, :] = a[idx[i], :]. Backward scatter-adds, so repeated indices
/// accumulate. Also serves as the embedding lookup.
inline Tensor gather_rows(const Tensor& a, const std::vector<std::int64_t>& idx) {
    if (a.rank() != 2) throw ShapeError("gather_rows: need rank-2, got " + shape_str(a.shape()));
    const std::int64_t rows = a.dim(0), cols = a.dim(1);
    for (auto i : idx)
        if (i < 0 || i >= rows)
            throw IndexError("gather_rows: index " + std::to_string(i) + " out of [0," +
                             std::to_string(rows) + ")");
    const auto m = static_cast<std::int64_t>(idx.size());
    auto an = a.node();
    Tensor out = detail::make_op({m, cols}, {a}, [an, idx, cols](detail::GraphNode& nd) {
        an->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::int64_t c = 0; c < cols; ++c)
                an->grad[static_cast<std::size_t>(idx[i] * cols + c)] +=
                    nd.grad[i * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)];
    });
    auto& o = out.data();
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::int64_t c = 0; c < cols; ++c)
            o[i * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)] =
                a.data()[static_cast<std::size_t>(idx[i] * cols + c)];
    return out;
}

/// Rows of `block` placed into a fresh n x d zero matrix at positions idx;
/// indices must be distinct. Inverse companion of gather_rows for routing.
inline Tensor scatter_rows(const Tensor& block, const std::vector<std::int64_t>& idx, std::int64_t n) {
    if (block.rank() != 2) throw ShapeError("scatter_rows: need rank-2 block");
    if (static_cast<std::int64_t>(idx.size()) != block.dim(0))
        throw ShapeError("scatter_rows: " + std::to_string(idx.size()) + " indices for " +
                         std::to_string(block.dim(0)) + " rows");
    std::unordered_set<std::int64_t> seen;
    for (auto i : idx) {
        if (i < 0 || i >= n)
            throw IndexError("scatter_rows: index " + std::to_string(i) + " out of [0," +
                             std::to_string(n) + ")");
        if (!seen.insert(i).second)
            throw IndexError("scatter_rows: duplicate index " + std::to_string(i));
    }
    const std::int64_t cols = block.dim(1);
    auto bn = block.node();
    Tensor out = detail::make_op({n, cols}, {block}, [bn, idx, cols](detail::GraphNode& nd) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::int64_t c = 0; c < cols; ++c)
                bn->grad[i * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)] +=
                    nd.grad[static_cast<std::size_t>(idx[i] * cols + c)];
    });
    auto& o = out.data();
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::int64_t c = 0; c < cols; ++c)
            o[static_cast<std::size_t>(idx[i] * cols + c)] =
                block.data()[i * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)];
    return out;
}

inline Tensor slice_rows(const Tensor& a, std::int64_t begin, std::int64_t end) {
    if (a.rank() != 2) throw ShapeError("slice_rows: need rank-2");
    if (begin < 0 || end > a.dim(0) || begin >= end)
        throw IndexError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + std::to_string(a.dim(0)) + " rows");
    std::vector<std::int64_t> idx(static_cast<std::size_t>(end - begin));
    std::iota(idx.begin(), idx.end(), begin);
    return gather_rows(a, idx);
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    const std::int64_t cols = parts[0].dim(1);
    std::int64_t rows = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != cols)
            throw ShapeError("concat_rows: incompatible part " + shape_str(p.shape()));
        rows += p.dim(0);
    }
    std::vector<std::shared_ptr<detail::GraphNode>> pn;
    for (const auto& p : parts) pn.push_back(p.node());
    Tensor out = detail::make_op({rows, cols}, parts, [pn, cols](detail::GraphNode& nd) {
        std::size_t off = 0;
        for (auto& p : pn) {
            const std::size_t len = p->data.size();
            if (p->requires_grad) {
                p->ensure_grad();
                for (std::size_t i = 0; i < len; ++i) p->grad[i] += nd.grad[off + i];
            }
            off += len;
        }
        (void)cols;
    });
    auto& o = out.data();
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), o.begin() + static_cast<std::ptrdiff_t>(off));
        off += p.data().size();
    }
    return out;
}

inline Tensor reshape(const Tensor& a, Shape s) {
    if (shape_numel(s) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(s));
    auto an = a.node();
    Tensor out = detail::make_op(std::move(s), {a}, [an](detail::GraphNode& nd) {
        an->ensure_grad();
        for (std::size_t i = 0; i < nd.grad.size(); ++i) an->grad[i] += nd.grad[i];
    });
    std::copy(a.data().begin(), a.data().end(), out.data().begin());
    return out;
}

// ---------------------------------------------------------------------------
// losses and stochastic ops
// ---------------------------------------------------------------------------

/// Mean token cross-entropy over rows of logits [n, V] against integer
/// targets; target < 0 marks an ignored row. Computed as
/// logsumexp(row) - row[target], averaged over counted rows.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be rank-2");
    const std::int64_t n = logits.dim(0), V = logits.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != n)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
    std::int64_t counted = 0;
    for (auto t : targets) {
        if (t >= V) throw IndexError("cross_entropy: target " + std::to_string(t) + " out of vocab " + std::to_string(V));
        if (t >= 0) ++counted;
    }
    if (counted == 0) throw ContractError("cross_entropy: every row ignored");
    auto ln = logits.node();
    const double inv = 1.0 / static_cast<double>(counted);
    Tensor out = detail::make_op({1}, {logits}, [ln, targets, n, V, inv](detail::GraphNode& nd) {
        ln->ensure_grad();
        const double g = nd.grad[0] * inv;
        for (std::int64_t r = 0; r < n; ++r) {
            if (targets[static_cast<std::size_t>(r)] < 0) continue;
            const auto base = static_cast<std::size_t>(r * V);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t j = 0; j < V; ++j) mx = std::max(mx, ln->data[base + static_cast<std::size_t>(j)]);
            double denom = 0.0;
            for (std::int64_t j = 0; j < V; ++j) denom += std::exp(ln->data[base + static_cast<std::size_t>(j)] - mx);
            for (std::int64_t j = 0; j < V; ++j) {
                double p = std::exp(ln->data[base + static_cast<std::size_t>(j)] - mx) / denom;
                double onehot = (j == targets[static_cast<std::size_t>(r)]) ? 1.0 : 0.0;
                ln->grad[base + static_cast<std::size_t>(j)] += g * (p - onehot);
            }
        }
    });
    double total = 0.0;
    for (std::int64_t r = 0; r < n; ++r) {
        const auto t = targets[static_cast<std::size_t>(r)];
        if (t < 0) continue;
        const auto base = static_cast<std::size_t>(r * V);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < V; ++j) mx = std::max(mx, logits.data()[base + static_cast<std::size_t>(j)]);
        double denom = 0.0;
        for (std::int64_t j = 0; j < V; ++j) denom += std::exp(logits.data()[base + static_cast<std::size_t>(j)] - mx);
        total += mx + std::log(denom) - logits.data()[base + static_cast<std::size_t>(t)];
    }
    out.data()[0] = total * inv;
    return out;
}

/// mean((a-b)^2) over all elements.
inline Tensor mse(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mse");
    Tensor d = sub(a, b);
    return mean(mul(d, d));
}

/// Inverted dropout drawing its mask from the caller's stream. p = 0 is the
/// identity (no RNG draws at all, keeping streams aligned when disabled).
inline Tensor dropout(const Tensor& a, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ParamError("dropout: p must lie in [0,1)");
    if (p == 0.0) return a;
    std::vector<double> mask(a.data().size());
    const double keep = 1.0 - p;
    for (auto& m : mask) m = (rng.uniform() < keep) ? 1.0 / keep : 0.0;
    return mul(a, Tensor::from_data(a.shape(), std::move(mask)));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar loss. Topological order is rebuilt by DFS
/// over parents; each node's closure runs exactly once even across diamonds.
/// Leaf grads accumulate across successive backward() calls.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ContractError("backward: loss " + shape_str(loss.shape()) + " is not scalar");
    auto root = loss.node();
    if (!root->requires_grad)
        throw ContractError("backward: loss does not depend on any tracked tensor");
    std::vector<detail::GraphNode*> order;
    std::unordered_set<detail::GraphNode*> seen;
    std::vector<std::pair<detail::GraphNode*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::GraphNode* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::GraphNode* n = *it;
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
        } else {
            n->ensure_grad();  // leaf: grads stay where accumulated
        }
    }
}

// ---------------------------------------------------------------------------
// finite-difference oracle
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::int64_t worst_index = -1;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
};

/// Central-difference check of df/dx for scalar f. The function is evaluated
/// twice up front and must reproduce its forward value bitwise, otherwise the
/// determinism contract is broken. Relative error uses a unit floor:
/// |a-n| / max(1, |a|, |n|), so near-zero gradients compare absolutely.
inline GradCheckReport grad_check(const std::function<Tensor(Tensor&)>& f, Tensor x, double h) {
    if (!(h >= 1e-7 && h <= 1e-3)) throw ParamError("grad_check: h must lie in [1e-7, 1e-3]");
    x.set_requires_grad(true);
    x.zero_grad();
    Tensor out1 = f(x);
    {
        Tensor probe = x.detached();
        probe.set_requires_grad(true);
        Tensor out2 = f(probe);
        if (out1.value() != out2.value())
            throw ContractError("grad_check: function is not deterministic");
    }
    backward(out1);
    const std::vector<double> analytic = x.grad();

    GradCheckReport rep;
    NoGradGuard ng;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        Tensor xp = x.detached();
        Tensor xm = x.detached();
        xp.at(i) += h;
        xm.at(i) -= h;
        const double fp = f(xp).value();
        const double fm = f(xm).value();
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic[static_cast<std::size_t>(i)];
        const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_index = i;
            rep.analytic_at_worst = a;
            rep.numeric_at_worst = numeric;
        }
    }
    return rep;
}

}  // namespace duet
