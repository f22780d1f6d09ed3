#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "bvt/layers.hpp"

// B-cos transforms: a unit responds with ||x|| |cos(x, w)|^B sgn(cos(x, w)),
// so its output magnitude can only reach ||x|| when weight and input align.
// Pairs of units are combined by MaxOut.

namespace bvt {

inline constexpr double kBcosEps = 1e-12;

namespace detail {

template <class Real>
Real dot(std::span<const Real> a, std::span<const Real> b) {
    Real s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

template <class Real>
Real norm(std::span<const Real> a) {
    return std::sqrt(dot(a, a));
}

template <class Real>
Real int_pow(Real base, int e) {
    Real r = 1;
    for (int i = 0; i < e; ++i) r *= base;
    return r;
}

}  // namespace detail

/// <x, w_hat> / max(||x||, eps); zero when ||x|| <= eps. `w_hat` is expected
/// to be unit norm.
template <class Real>
Real cosine_similarity(std::span<const Real> x, std::span<const Real> w_hat, Real eps = Real(kBcosEps)) {
    if (x.size() != w_hat.size()) {
        throw DimensionError("cosine_similarity: lengths " + std::to_string(x.size()) + " and " +
                             std::to_string(w_hat.size()));
    }
    const Real nx = detail::norm(x);
    if (nx <= eps) return Real(0);
    return detail::dot(x, w_hat) / std::max(nx, eps);
}

/// Single B-cos* response, evaluated directly from its definition.
template <class Real>
Real bcos_star(std::span<const Real> x, std::span<const Real> w, int B) {
    if (B < 1) throw ValidationError("bcos_star: exponent must be >= 1");
    if (x.size() != w.size()) {
        throw DimensionError("bcos_star: lengths " + std::to_string(x.size()) + " and " + std::to_string(w.size()));
    }
    const Real nw = detail::norm(w);
    if (!(nw > 0)) throw ValidationError("bcos_star: weight vector has zero norm");
    std::vector<Real> w_hat(w.begin(), w.end());
    for (auto& v : w_hat) v /= nw;
    if (B == 1) return detail::dot<Real>(w_hat, x);
    const Real c = cosine_similarity<Real>(x, w_hat);
    const Real sgn = c > 0 ? Real(1) : (c < 0 ? Real(-1) : Real(0));
    return detail::norm(x) * detail::int_pow(std::abs(c), B) * sgn;
}

/// A bank of B-cos* units; weight rows are raw (normalized on every forward).
template <class Real>
struct BcosUnit {
    TensorT<Real> weight;  // [out x in]
    int B = 2;

    BcosUnit() = default;
    BcosUnit(TensorT<Real> w, int exponent) : weight(std::move(w)), B(exponent) { validate(); }
    BcosUnit(std::size_t in, std::size_t out, int exponent, Rng& rng)
        : BcosUnit(init_truncated_normal<Real>({out, in}, rng), exponent) {}

    void validate() const {
        if (B < 1) throw ValidationError("B-cos exponent must be >= 1, got " + std::to_string(B));
        if (weight.rank() != 2) throw DimensionError("B-cos weight must be [out x in], got " + shape_str(weight.shape()));
        const std::size_t in = weight.dim(1);
        for (std::size_t r = 0; r < weight.dim(0); ++r) {
            Real ss = 0;
            for (std::size_t c = 0; c < in; ++c) ss += weight.at(r, c) * weight.at(r, c);
            if (!(ss > 0)) throw ValidationError("B-cos weight row " + std::to_string(r) + " has zero norm");
        }
    }

    std::size_t in_features() const { return weight.dim(1); }
    std::size_t out_features() const { return weight.dim(0); }

    // Unit-norm rows, differentiable through the normalization.
    TensorT<Real> normalized_weight(PassMode mode = PassMode::standard) const {
        auto w = use_param(weight, mode);
        return div(w, l2_norm(w, 1, Real(kBcosEps), true));
    }

    /// x: [rows x in] -> [rows x out], computed as <w_hat, x> |c|^(B-1).
    /// In relevance mode the |c|^(B-1) factor is a constant.
    TensorT<Real> operator()(const TensorT<Real>& x, PassMode mode = PassMode::standard) const {
        if (x.shape().back() != in_features()) {
            throw DimensionError("bcos: input " + shape_str(x.shape()) + " does not match weight " +
                                 shape_str(weight.shape()));
        }
        return over_rows(x, out_features(), [&](const TensorT<Real>& rows) {
            auto w_hat_t = transpose(normalized_weight(mode));
            auto lin = matmul(rows, w_hat_t);
            if (B == 1) return lin;
            auto src = mode == PassMode::relevance ? rows.detach() : rows;
            auto src_lin = mode == PassMode::relevance ? matmul(src, w_hat_t) : lin;
            auto c = div(src_lin, l2_norm(src, 1, Real(kBcosEps), true));
            auto factor = B == 2 ? abs(c) : pow(abs(c), Real(B - 1));
            return mul(lin, factor);
        });
    }
};

/// MaxOut over two B-cos* banks of the same shape: the larger signed response
/// passes. No bias.
template <class Real>
struct BcosLayer {
    BcosUnit<Real> branch_a;
    BcosUnit<Real> branch_b;

    BcosLayer() = default;
    BcosLayer(BcosUnit<Real> a, BcosUnit<Real> b) : branch_a(std::move(a)), branch_b(std::move(b)) {
        if (branch_a.weight.shape() != branch_b.weight.shape() || branch_a.B != branch_b.B) {
            throw ValidationError("B-cos branches must share shape and exponent");
        }
    }
    BcosLayer(std::size_t in, std::size_t out, int B, Rng& rng)
        : branch_a(in, out, B, rng), branch_b(in, out, B, rng) {}

    std::size_t in_features() const { return branch_a.in_features(); }
    std::size_t out_features() const { return branch_a.out_features(); }
    int exponent() const { return branch_a.B; }

    TensorT<Real> operator()(const TensorT<Real>& x, PassMode mode = PassMode::standard) const {
        return maximum(branch_a(x, mode), branch_b(x, mode));
    }

    void visit(const std::string& prefix, const ParamVisitor<Real>& f) {
        f(prefix + ".a.weight", branch_a.weight);
        f(prefix + ".b.weight", branch_b.weight);
    }
};

/// Input-dependent effective weight W(x) [out x in] of a B-cos layer: row i is
/// |c_i|^(B-1) w_hat_i of the winning branch, so W(x) x reproduces the layer
/// output. Uses the same eps-stabilized norms as the forward pass.
template <class Real>
TensorT<Real> dynamic_linear_summary(std::span<const Real> x, const BcosLayer<Real>& layer) {
    const std::size_t in = layer.in_features(), out = layer.out_features();
    if (x.size() != in) throw DimensionError("dynamic_linear_summary: input length " + std::to_string(x.size()));
    const int B = layer.exponent();
    const Real eps2 = Real(kBcosEps) * Real(kBcosEps);
    const Real x_norm = std::sqrt(detail::dot(x, x) + eps2);
    std::vector<Real> eff(out * in);
    std::vector<Real> row_a(in), row_b(in);
    auto effective_row = [&](const BcosUnit<Real>& u, std::size_t r, std::vector<Real>& row) {
        std::span<const Real> w(u.weight.values().data() + r * in, in);
        const Real w_norm = std::sqrt(detail::dot(w, w) + eps2);
        for (std::size_t k = 0; k < in; ++k) row[k] = w[k] / w_norm;
        const Real lin = detail::dot<Real>(row, x);
        const Real factor = B == 1 ? Real(1) : detail::int_pow(std::abs(lin / x_norm), B - 1);
        for (auto& v : row) v *= factor;
        return lin * factor;
    };
    for (std::size_t r = 0; r < out; ++r) {
        const Real ya = effective_row(layer.branch_a, r, row_a);
        const Real yb = effective_row(layer.branch_b, r, row_b);
        const auto& win = ya >= yb ? row_a : row_b;
        std::copy(win.begin(), win.end(), eff.begin() + static_cast<std::ptrdiff_t>(r * in));
    }
    return TensorT<Real>(Shape{out, in}, std::move(eff));
}

}  // namespace bvt
