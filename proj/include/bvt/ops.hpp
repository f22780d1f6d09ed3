#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "bvt/tensor.hpp"

// Differentiable operations. Each function computes its value eagerly and, when
// recording, registers a backward rule on the active tape.

namespace bvt {

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t n = std::max(a.size(), b.size());
    Shape out(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
        const std::size_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                                 shape_str(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `in` expressed over the axes of `out`; broadcast axes get stride 0.
inline std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> s(out.size(), 0);
    std::size_t stride = 1;
    for (std::size_t k = in.size(); k-- > 0;) {
        const std::size_t axis = k + (out.size() - in.size());
        s[axis] = in[k] == 1 ? 0 : stride;
        stride *= in[k];
    }
    return s;
}

// Calls f(i, ia, ib) for every output element i with the matching input offsets.
template <class F>
void broadcast_loop(const Shape& out, const Shape& a, const Shape& b, F&& f) {
    const std::size_t total = numel_of(out);
    if (a == b) {
        for (std::size_t i = 0; i < total; ++i) f(i, i, i);
        return;
    }
    if (numel_of(b) == 1 && a == out) {
        for (std::size_t i = 0; i < total; ++i) f(i, i, std::size_t{0});
        return;
    }
    if (numel_of(a) == 1 && b == out) {
        for (std::size_t i = 0; i < total; ++i) f(i, std::size_t{0}, i);
        return;
    }
    const auto sa = aligned_strides(a, out);
    const auto sb = aligned_strides(b, out);
    const std::size_t n = out.size();
    std::vector<std::size_t> idx(n, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < total; ++i) {
        f(i, ia, ib);
        for (std::size_t d = n; d-- > 0;) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out[d]) break;
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

struct AxisSplit {
    std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
    if (axis >= shape.size()) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                             shape_str(shape));
    }
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

inline Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdim) {
    Shape out = shape;
    if (keepdim) {
        out[axis] = 1;
    } else {
        out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    }
    return out;
}

template <class Real, class Fwd, class DA, class DB>
TensorT<Real> binary_op(const char* op, const TensorT<Real>& a, const TensorT<Real>& b, Fwd fwd, DA da, DB db) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
    std::vector<Real> out(numel_of(out_shape));
    const auto& av = a.values();
    const auto& bv = b.values();
    broadcast_loop(out_shape, a.shape(), b.shape(),
                   [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(av[ia], bv[ib]); });
    auto ai = a.impl();
    auto bi = b.impl();
    return record<Real>(op, out_shape, std::move(out), {ai, bi},
                        [ai, bi, out_shape, da, db](std::span<const Real> g) {
                            const auto& x = ai->data;
                            const auto& y = bi->data;
                            if (ai->requires_grad) {
                                auto& ga = ai->grad_buffer();
                                broadcast_loop(out_shape, ai->shape, bi->shape,
                                               [&](std::size_t i, std::size_t ia, std::size_t ib) {
                                                   ga[ia] += g[i] * da(x[ia], y[ib]);
                                               });
                            }
                            if (bi->requires_grad) {
                                auto& gb = bi->grad_buffer();
                                broadcast_loop(out_shape, ai->shape, bi->shape,
                                               [&](std::size_t i, std::size_t ia, std::size_t ib) {
                                                   gb[ib] += g[i] * db(x[ia], y[ib]);
                                               });
                            }
                        });
}

// d(out)/d(x) may use both the input and the output value.
template <class Real, class Fwd, class Deriv>
TensorT<Real> unary_op(const char* op, const TensorT<Real>& x, Fwd fwd, Deriv deriv) {
    const auto& xv = x.values();
    std::vector<Real> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    auto xi = x.impl();
    auto result = record<Real>(op, x.shape(), std::move(out), {xi}, {});
    if (result.on_tape()) {
        auto oi = std::weak_ptr<TensorImpl<Real>>(result.impl());
        auto tape = active_tape<Real>();
        tape->records.back().backward = [xi, oi, deriv](std::span<const Real> g) {
            auto o = oi.lock();
            auto& gx = xi->grad_buffer();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * deriv(xi->data[i], o->data[i]);
        };
    }
    return result;
}

template <class Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <class Real>
TensorT<Real> add(const TensorT<Real>& a, const TensorT<Real>& b) {
    return detail::binary_op<Real>(
        "add", a, b, [](Real x, Real y) { return x + y; }, [](Real, Real) { return Real(1); },
        [](Real, Real) { return Real(1); });
}

template <class Real>
TensorT<Real> sub(const TensorT<Real>& a, const TensorT<Real>& b) {
    return detail::binary_op<Real>(
        "sub", a, b, [](Real x, Real y) { return x - y; }, [](Real, Real) { return Real(1); },
        [](Real, Real) { return Real(-1); });
}

template <class Real>
TensorT<Real> mul(const TensorT<Real>& a, const TensorT<Real>& b) {
    return detail::binary_op<Real>(
        "mul", a, b, [](Real x, Real y) { return x * y; }, [](Real, Real y) { return y; },
        [](Real x, Real) { return x; });
}

template <class Real>
TensorT<Real> div(const TensorT<Real>& a, const TensorT<Real>& b) {
    return detail::binary_op<Real>(
        "div", a, b, [](Real x, Real y) { return x / y; }, [](Real, Real y) { return Real(1) / y; },
        [](Real x, Real y) { return -x / (y * y); });
}

// Ties route the gradient to the first argument.
template <class Real>
TensorT<Real> maximum(const TensorT<Real>& a, const TensorT<Real>& b) {
    return detail::binary_op<Real>(
        "maximum", a, b, [](Real x, Real y) { return x >= y ? x : y; },
        [](Real x, Real y) { return x >= y ? Real(1) : Real(0); },
        [](Real x, Real y) { return x >= y ? Real(0) : Real(1); });
}

template <class Real>
TensorT<Real> neg(const TensorT<Real>& x) {
    return detail::unary_op<Real>("neg", x, [](Real v) { return -v; }, [](Real, Real) { return Real(-1); });
}

template <class Real>
TensorT<Real> abs(const TensorT<Real>& x) {
    return detail::unary_op<Real>(
        "abs", x, [](Real v) { return std::abs(v); },
        [](Real v, Real) { return v > 0 ? Real(1) : (v < 0 ? Real(-1) : Real(0)); });
}

template <class Real>
TensorT<Real> sign(const TensorT<Real>& x) {
    return detail::unary_op<Real>(
        "sign", x, [](Real v) { return v > 0 ? Real(1) : (v < 0 ? Real(-1) : Real(0)); },
        [](Real, Real) { return Real(0); });
}

template <class Real>
TensorT<Real> exp(const TensorT<Real>& x) {
    return detail::unary_op<Real>("exp", x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

template <class Real>
TensorT<Real> log(const TensorT<Real>& x) {
    return detail::unary_op<Real>("log", x, [](Real v) { return std::log(v); },
                                  [](Real v, Real) { return Real(1) / v; });
}

template <class Real>
TensorT<Real> relu(const TensorT<Real>& x) {
    return detail::unary_op<Real>(
        "relu", x, [](Real v) { return v > 0 ? v : Real(0); }, [](Real v, Real) { return v > 0 ? Real(1) : Real(0); });
}

template <class Real>
TensorT<Real> pow(const TensorT<Real>& x, Real p) {
    const bool integral = std::floor(p) == p;
    if (!integral) {
        for (Real v : x.values()) {
            if (v < 0) throw std::domain_error("pow: non-integer exponent requires a non-negative base");
        }
    }
    return detail::unary_op<Real>(
        "pow", x, [p](Real v) { return std::pow(v, p); },
        [p](Real v, Real) { return p == Real(0) ? Real(0) : p * std::pow(v, p - Real(1)); });
}

template <class Real>
TensorT<Real> scale(const TensorT<Real>& x, Real s) {
    return detail::unary_op<Real>("scale", x, [s](Real v) { return v * s; }, [s](Real, Real) { return s; });
}

template <class Real>
TensorT<Real> add_scalar(const TensorT<Real>& x, Real s) {
    return detail::unary_op<Real>("add_scalar", x, [s](Real v) { return v + s; }, [](Real, Real) { return Real(1); });
}

template <class Real>
TensorT<Real> operator+(const TensorT<Real>& a, const TensorT<Real>& b) { return add(a, b); }
template <class Real>
TensorT<Real> operator-(const TensorT<Real>& a, const TensorT<Real>& b) { return sub(a, b); }
template <class Real>
TensorT<Real> operator*(const TensorT<Real>& a, const TensorT<Real>& b) { return mul(a, b); }
template <class Real>
TensorT<Real> operator/(const TensorT<Real>& a, const TensorT<Real>& b) { return div(a, b); }
template <class Real>
TensorT<Real> operator-(const TensorT<Real>& a) { return neg(a); }
template <class Real>
TensorT<Real> operator*(const TensorT<Real>& a, Real s) { return scale(a, s); }
template <class Real>
TensorT<Real> operator*(Real s, const TensorT<Real>& a) { return scale(a, s); }

// ---------------------------------------------------------------------------
// linear algebra

template <class Real>
TensorT<Real> matmul(const TensorT<Real>& a, const TensorT<Real>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    using Mat = detail::RowMat<Real>;
    const auto m = static_cast<Eigen::Index>(a.dim(0));
    const auto k = static_cast<Eigen::Index>(a.dim(1));
    const auto n = static_cast<Eigen::Index>(b.dim(1));
    std::vector<Real> out(static_cast<std::size_t>(m * n));
    Eigen::Map<Mat>(out.data(), m, n).noalias() =
        Eigen::Map<const Mat>(a.values().data(), m, k) * Eigen::Map<const Mat>(b.values().data(), k, n);
    auto ai = a.impl();
    auto bi = b.impl();
    return detail::record<Real>("matmul", Shape{a.dim(0), b.dim(1)}, std::move(out), {ai, bi},
                                [ai, bi, m, k, n](std::span<const Real> g) {
                                    Eigen::Map<const Mat> G(g.data(), m, n);
                                    if (ai->requires_grad) {
                                        Eigen::Map<Mat>(ai->grad_buffer().data(), m, k).noalias() +=
                                            G * Eigen::Map<const Mat>(bi->data.data(), k, n).transpose();
                                    }
                                    if (bi->requires_grad) {
                                        Eigen::Map<Mat>(bi->grad_buffer().data(), k, n).noalias() +=
                                            Eigen::Map<const Mat>(ai->data.data(), m, k).transpose() * G;
                                    }
                                });
}

// ---------------------------------------------------------------------------
// reductions

template <class Real>
TensorT<Real> sum(const TensorT<Real>& x) {
    Real s = 0;
    for (Real v : x.values()) s += v;
    auto xi = x.impl();
    return detail::record<Real>("sum", Shape{}, {s}, {xi}, [xi](std::span<const Real> g) {
        for (auto& v : xi->grad_buffer()) v += g[0];
    });
}

template <class Real>
TensorT<Real> mean(const TensorT<Real>& x) {
    return scale(sum(x), Real(1) / static_cast<Real>(x.numel()));
}

template <class Real>
TensorT<Real> sum(const TensorT<Real>& x, std::size_t axis, bool keepdim = false) {
    const auto s = detail::split_axis(x.shape(), axis, "sum");
    std::vector<Real> out(s.outer * s.inner, Real(0));
    const auto& xv = x.values();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t l = 0; l < s.len; ++l)
            for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xv[(o * s.len + l) * s.inner + i];
    auto xi = x.impl();
    return detail::record<Real>("sum_axis", detail::reduced_shape(x.shape(), axis, keepdim), std::move(out), {xi},
                                [xi, s](std::span<const Real> g) {
                                    auto& gx = xi->grad_buffer();
                                    for (std::size_t o = 0; o < s.outer; ++o)
                                        for (std::size_t l = 0; l < s.len; ++l)
                                            for (std::size_t i = 0; i < s.inner; ++i)
                                                gx[(o * s.len + l) * s.inner + i] += g[o * s.inner + i];
                                });
}

template <class Real>
TensorT<Real> mean(const TensorT<Real>& x, std::size_t axis, bool keepdim = false) {
    const auto len = detail::split_axis(x.shape(), axis, "mean").len;
    return scale(sum(x, axis, keepdim), Real(1) / static_cast<Real>(len));
}

/// Numerically stable softmax (max subtraction) along `axis`.
template <class Real>
TensorT<Real> softmax(const TensorT<Real>& x, std::size_t axis) {
    const auto s = detail::split_axis(x.shape(), axis, "softmax");
    const auto& xv = x.values();
    std::vector<Real> out(xv.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + i; };
            Real mx = xv[at(0)];
            for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, xv[at(l)]);
            Real z = 0;
            for (std::size_t l = 0; l < s.len; ++l) z += (out[at(l)] = std::exp(xv[at(l)] - mx));
            for (std::size_t l = 0; l < s.len; ++l) out[at(l)] /= z;
        }
    }
    auto xi = x.impl();
    auto result = detail::record<Real>("softmax", x.shape(), std::move(out), {xi}, {});
    if (result.on_tape()) {
        std::weak_ptr<detail::TensorImpl<Real>> oi = result.impl();
        detail::active_tape<Real>()->records.back().backward = [xi, oi, s](std::span<const Real> g) {
            auto o_impl = oi.lock();
            const auto& y = o_impl->data;
            auto& gx = xi->grad_buffer();
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t i = 0; i < s.inner; ++i) {
                    auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + i; };
                    Real dot = 0;
                    for (std::size_t l = 0; l < s.len; ++l) dot += g[at(l)] * y[at(l)];
                    for (std::size_t l = 0; l < s.len; ++l) gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                }
            }
        };
    }
    return result;
}

/// sqrt(sum of squares along axis + eps^2). The gradient x / value is taken as
/// 0 where the value itself is 0 (eps = 0 at the origin).
template <class Real>
TensorT<Real> l2_norm(const TensorT<Real>& x, std::size_t axis, Real eps = Real(1e-12), bool keepdim = false) {
    if (eps < 0) throw ValidationError("l2_norm: eps must be non-negative");
    const auto s = detail::split_axis(x.shape(), axis, "l2_norm");
    const auto& xv = x.values();
    std::vector<Real> out(s.outer * s.inner, Real(0));
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t l = 0; l < s.len; ++l)
            for (std::size_t i = 0; i < s.inner; ++i) {
                const Real v = xv[(o * s.len + l) * s.inner + i];
                out[o * s.inner + i] += v * v;
            }
    for (auto& v : out) v = std::sqrt(v + eps * eps);
    auto xi = x.impl();
    auto result = detail::record<Real>("l2_norm", detail::reduced_shape(x.shape(), axis, keepdim), std::move(out),
                                       {xi}, {});
    if (result.on_tape()) {
        std::weak_ptr<detail::TensorImpl<Real>> oi = result.impl();
        detail::active_tape<Real>()->records.back().backward = [xi, oi, s](std::span<const Real> g) {
            const auto& n = oi.lock()->data;
            auto& gx = xi->grad_buffer();
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t l = 0; l < s.len; ++l)
                    for (std::size_t i = 0; i < s.inner; ++i) {
                        const std::size_t r = o * s.inner + i;
                        if (n[r] > 0) {
                            const std::size_t k = (o * s.len + l) * s.inner + i;
                            gx[k] += g[r] * xi->data[k] / n[r];
                        }
                    }
        };
    }
    return result;
}

// ---------------------------------------------------------------------------
// shape manipulation

template <class Real>
TensorT<Real> reshape(const TensorT<Real>& x, Shape shape) {
    if (numel_of(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    auto xi = x.impl();
    return detail::record<Real>("reshape", std::move(shape), x.values(), {xi}, [xi](std::span<const Real> g) {
        auto& gx = xi->grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
}

/// Swaps two axes (materialized copy).
template <class Real>
TensorT<Real> transpose(const TensorT<Real>& x, std::size_t axis0 = 0, std::size_t axis1 = 1) {
    if (axis0 >= x.rank() || axis1 >= x.rank()) {
        throw DimensionError("transpose: axes out of range for " + shape_str(x.shape()));
    }
    Shape out_shape = x.shape();
    std::swap(out_shape[axis0], out_shape[axis1]);
    // source offset of every output element
    const std::size_t n = x.numel();
    std::vector<std::size_t> src(n);
    {
        std::vector<std::size_t> in_strides(x.rank(), 1);
        for (std::size_t k = x.rank(); k-- > 1;) in_strides[k - 1] = in_strides[k] * x.dim(k);
        std::swap(in_strides[axis0], in_strides[axis1]);
        std::vector<std::size_t> idx(x.rank(), 0);
        std::size_t off = 0;
        for (std::size_t i = 0; i < n; ++i) {
            src[i] = off;
            for (std::size_t d = x.rank(); d-- > 0;) {
                ++idx[d];
                off += in_strides[d];
                if (idx[d] < out_shape[d]) break;
                off -= in_strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
    }
    std::vector<Real> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = x.values()[src[i]];
    auto xi = x.impl();
    return detail::record<Real>("transpose", std::move(out_shape), std::move(out), {xi},
                                [xi, src = std::move(src)](std::span<const Real> g) {
                                    auto& gx = xi->grad_buffer();
                                    for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += g[i];
                                });
}

template <class Real>
TensorT<Real> concat(const std::vector<TensorT<Real>>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + shape_str(ref));
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        Shape a = p.shape(), b = ref;
        if (a.size() != b.size()) throw DimensionError("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
        a[axis] = b[axis] = 0;
        if (a != b) throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(ref));
        out_shape[axis] += p.dim(axis);
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
    for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
    const std::size_t total_len = out_shape[axis];
    std::vector<Real> out(numel_of(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t start = 0;
    std::vector<detail::ImplPtr<Real>> inputs;
    for (const auto& p : parts) {
        const std::size_t len = p.dim(axis);
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p.values().begin() + static_cast<std::ptrdiff_t>(o * len * inner), len * inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * total_len + start) * inner));
        offsets.push_back(start);
        start += len;
        inputs.push_back(p.impl());
    }
    auto ins = inputs;
    return detail::record<Real>("concat", std::move(out_shape), std::move(out), std::move(inputs),
                                [ins, offsets, outer, inner, total_len, axis](std::span<const Real> g) {
                                    for (std::size_t k = 0; k < ins.size(); ++k) {
                                        if (!ins[k]->requires_grad) continue;
                                        const std::size_t len = ins[k]->shape[axis];
                                        auto& gx = ins[k]->grad_buffer();
                                        for (std::size_t o = 0; o < outer; ++o)
                                            for (std::size_t j = 0; j < len * inner; ++j)
                                                gx[o * len * inner + j] += g[(o * total_len + offsets[k]) * inner + j];
                                    }
                                });
}

/// Elements [start, end) along `axis`.
template <class Real>
TensorT<Real> slice(const TensorT<Real>& x, std::size_t axis, std::size_t start, std::size_t end) {
    const auto s = detail::split_axis(x.shape(), axis, "slice");
    if (start >= end || end > s.len) {
        throw DimensionError("slice: range [" + std::to_string(start) + "," + std::to_string(end) +
                             ") invalid for " + shape_str(x.shape()));
    }
    Shape out_shape = x.shape();
    out_shape[axis] = end - start;
    const std::size_t len = end - start;
    std::vector<Real> out(s.outer * len * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o)
        std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>((o * s.len + start) * s.inner), len * s.inner,
                    out.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner));
    auto xi = x.impl();
    return detail::record<Real>("slice", std::move(out_shape), std::move(out), {xi},
                                [xi, s, start, len](std::span<const Real> g) {
                                    auto& gx = xi->grad_buffer();
                                    for (std::size_t o = 0; o < s.outer; ++o)
                                        for (std::size_t j = 0; j < len * s.inner; ++j)
                                            gx[(o * s.len + start) * s.inner + j] += g[o * len * s.inner + j];
                                });
}

/// Selects rows (entries along axis 0) by index; repeated indices are allowed
/// and their gradients accumulate.
template <class Real>
TensorT<Real> gather_rows(const TensorT<Real>& x, std::vector<std::size_t> indices) {
    if (x.rank() == 0) throw DimensionError("gather_rows: scalar input");
    const std::size_t rows = x.dim(0);
    const std::size_t width = x.numel() / rows;
    for (auto i : indices) {
        if (i >= rows) throw DimensionError("gather_rows: index " + std::to_string(i) + " out of range for " +
                                            shape_str(x.shape()));
    }
    Shape out_shape = x.shape();
    out_shape[0] = indices.size();
    std::vector<Real> out(indices.size() * width);
    for (std::size_t r = 0; r < indices.size(); ++r)
        std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(indices[r] * width), width,
                    out.begin() + static_cast<std::ptrdiff_t>(r * width));
    auto xi = x.impl();
    return detail::record<Real>("gather_rows", std::move(out_shape), std::move(out), {xi},
                                [xi, width, indices = std::move(indices)](std::span<const Real> g) {
                                    auto& gx = xi->grad_buffer();
                                    for (std::size_t r = 0; r < indices.size(); ++r)
                                        for (std::size_t j = 0; j < width; ++j) gx[indices[r] * width + j] += g[r * width + j];
                                });
}

}  // namespace bvt
