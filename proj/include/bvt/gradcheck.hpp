#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "bvt/ops.hpp"

namespace bvt {

/// Compares the tape gradient of a scalar function against central
/// differences (f(x + h e_i) - f(x - h e_i)) / 2h.
///
/// Returns max_i |g_fd - g_ad| / max(1, |g_ad|).
template <class Real, class F>
Real finite_difference_check(F&& f, const TensorT<Real>& x, Real h = Real(1e-5)) {
    std::vector<Real> analytic(x.numel(), Real(0));
    {
        Tape<Real> tape;
        TapeScope<Real> scope(tape);
        auto leaf = x.leaf_copy(true);
        auto y = f(leaf);
        if (y.on_tape()) {
            backward(y);
            if (leaf.has_grad()) analytic.assign(leaf.grad().begin(), leaf.grad().end());
        }
    }
    NoTapeScope<Real> no_tape;
    Real worst = 0;
    std::vector<Real> probe = x.values();
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const Real orig = probe[i];
        probe[i] = orig + h;
        const Real up = f(TensorT<Real>(x.shape(), probe)).item();
        probe[i] = orig - h;
        const Real down = f(TensorT<Real>(x.shape(), probe)).item();
        probe[i] = orig;
        const Real numeric = (up - down) / (Real(2) * h);
        worst = std::max(worst, std::abs(numeric - analytic[i]) / std::max(Real(1), std::abs(analytic[i])));
    }
    return worst;
}

/// Same check over model parameters: `loss` rebuilds the scalar from the
/// current parameter values. Parameters are perturbed in place and restored.
/// `stride` > 1 checks every stride-th coordinate of each parameter.
template <class Real, class F>
Real gradient_check_parameters(F&& loss, std::vector<TensorT<Real>> params, Real h = Real(1e-5),
                               std::size_t stride = 1) {
    for (auto& p : params) p.zero_grad();
    {
        Tape<Real> tape;
        TapeScope<Real> scope(tape);
        backward(loss());
    }
    NoTapeScope<Real> no_tape;
    Real worst = 0;
    for (auto& p : params) {
        std::vector<Real> analytic(p.numel(), Real(0));
        if (p.has_grad()) analytic.assign(p.grad().begin(), p.grad().end());
        auto values = p.mutable_data();
        for (std::size_t i = 0; i < values.size(); i += stride) {
            const Real orig = values[i];
            values[i] = orig + h;
            const Real up = loss().item();
            values[i] = orig - h;
            const Real down = loss().item();
            values[i] = orig;
            const Real numeric = (up - down) / (Real(2) * h);
            worst = std::max(worst, std::abs(numeric - analytic[i]) / std::max(Real(1), std::abs(analytic[i])));
        }
        p.zero_grad();
    }
    return worst;
}

}  // namespace bvt
