#pragma once

#include <functional>
#include <string>
#include <vector>

#include "bvt/ops.hpp"
#include "bvt/random.hpp"

namespace bvt {

/// How a forward pass treats its nonlinear factors.
///
/// `relevance` freezes every input-dependent factor (B-cos scaling, LayerNorm
/// scale, attention weights) and detaches parameters, so the recorded graph is
/// linear in the tracked inputs. Relevance propagation runs on that graph.
enum class PassMode { standard, relevance };

template <class Real>
using ParamVisitor = std::function<void(const std::string&, TensorT<Real>&)>;

template <class Real>
TensorT<Real> use_param(const TensorT<Real>& p, PassMode mode) {
    return mode == PassMode::relevance ? p.detach() : p;
}

namespace detail {

// While set, relevance-mode passes add every bias as a fresh tracked leaf here.
template <class Real>
std::vector<TensorT<Real>>*& bias_sink_slot() {
    thread_local std::vector<TensorT<Real>>* slot = nullptr;
    return slot;
}

}  // namespace detail

/// Collects the bias leaves of relevance-mode passes run in its lifetime.
template <class Real>
class BiasSinkScope {
   public:
    explicit BiasSinkScope(std::vector<TensorT<Real>>& sinks) : previous_(detail::bias_sink_slot<Real>()) {
        detail::bias_sink_slot<Real>() = &sinks;
    }
    ~BiasSinkScope() { detail::bias_sink_slot<Real>() = previous_; }
    BiasSinkScope(const BiasSinkScope&) = delete;
    BiasSinkScope& operator=(const BiasSinkScope&) = delete;

   private:
    std::vector<TensorT<Real>>* previous_;
};

/// Like use_param, but in relevance mode the bias can receive relevance.
template <class Real>
TensorT<Real> use_bias(const TensorT<Real>& b, PassMode mode) {
    auto* sinks = detail::bias_sink_slot<Real>();
    if (mode != PassMode::relevance || !sinks) return use_param(b, mode);
    sinks->push_back(b.detach().leaf_copy(true));
    return sinks->back();
}

template <class Real>
TensorT<Real> init_truncated_normal(Shape shape, Rng& rng, double std = 0.02) {
    std::vector<Real> v(numel_of(shape));
    for (auto& x : v) x = static_cast<Real>(rng.truncated_normal(std));
    return TensorT<Real>(std::move(shape), std::move(v), true);
}

// Applies `f` to x viewed as [rows x features] and restores the leading axes.
template <class Real, class F>
TensorT<Real> over_rows(const TensorT<Real>& x, std::size_t out_features, F&& f) {
    if (x.rank() == 2) return f(x);
    if (x.rank() == 0) throw DimensionError("expected at least one axis, got a scalar");
    const std::size_t in = x.shape().back();
    auto y = f(reshape(x, {x.numel() / in, in}));
    Shape out_shape = x.shape();
    out_shape.back() = out_features;
    return reshape(y, out_shape);
}

/// y = x W^T (+ b); weight is [out x in].
template <class Real>
struct Linear {
    TensorT<Real> weight;
    TensorT<Real> bias;
    bool has_bias = true;

    Linear() = default;
    Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng)
        : weight(init_truncated_normal<Real>({out, in}, rng)),
          bias(Shape{out}, Real(0), true),
          has_bias(with_bias) {}

    std::size_t in_features() const { return weight.dim(1); }
    std::size_t out_features() const { return weight.dim(0); }

    TensorT<Real> operator()(const TensorT<Real>& x, PassMode mode = PassMode::standard) const {
        if (x.shape().back() != in_features()) {
            throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                                 shape_str(weight.shape()));
        }
        return over_rows(x, out_features(), [&](const TensorT<Real>& rows) {
            auto y = matmul(rows, transpose(use_param(weight, mode)));
            return has_bias ? add(y, use_bias(bias, mode)) : y;
        });
    }

    void visit(const std::string& prefix, const ParamVisitor<Real>& f) {
        f(prefix + ".weight", weight);
        if (has_bias) f(prefix + ".bias", bias);
    }
};

/// Normalization over the trailing axis with affine scale and optional shift.
template <class Real>
struct LayerNorm {
    TensorT<Real> gamma;
    TensorT<Real> beta;
    bool has_bias = true;
    Real eps = Real(1e-5);

    LayerNorm() = default;
    LayerNorm(std::size_t dim, bool with_bias)
        : gamma(Shape{dim}, Real(1), true), beta(Shape{dim}, Real(0), true), has_bias(with_bias) {}

    TensorT<Real> operator()(const TensorT<Real>& x, PassMode mode = PassMode::standard) const {
        const std::size_t axis = x.rank() - 1;
        auto centered = sub(x, mean(x, axis, true));
        auto source = mode == PassMode::relevance ? centered.detach() : centered;
        auto inv_std = pow(add_scalar(mean(mul(source, source), axis, true), eps), Real(-0.5));
        auto y = mul(mul(centered, inv_std), use_param(gamma, mode));
        return has_bias ? add(y, use_bias(beta, mode)) : y;
    }

    void visit(const std::string& prefix, const ParamVisitor<Real>& f) {
        f(prefix + ".gamma", gamma);
        if (has_bias) f(prefix + ".beta", beta);
    }
};

}  // namespace bvt
