#pragma once

#include <string>

#include "bvt/bcos.hpp"
#include "bvt/layers.hpp"

namespace bvt {

enum class ProjectionKind { linear, bcos };

inline const char* to_string(ProjectionKind k) { return k == ProjectionKind::linear ? "linear" : "bcos"; }

/// A learned in -> out map: affine (with bias) or a MaxOut B-cos layer.
template <class Real>
struct Projection {
    ProjectionKind kind = ProjectionKind::linear;
    Linear<Real> linear;
    BcosLayer<Real> bcos;

    Projection() = default;
    Projection(std::size_t in, std::size_t out, ProjectionKind k, int B, Rng& rng) : kind(k) {
        if (k == ProjectionKind::linear) {
            linear = Linear<Real>(in, out, true, rng);
        } else {
            bcos = BcosLayer<Real>(in, out, B, rng);
        }
    }

    std::size_t in_features() const { return kind == ProjectionKind::linear ? linear.in_features() : bcos.in_features(); }
    std::size_t out_features() const {
        return kind == ProjectionKind::linear ? linear.out_features() : bcos.out_features();
    }

    TensorT<Real> operator()(const TensorT<Real>& x, PassMode mode = PassMode::standard) const {
        return kind == ProjectionKind::linear ? linear(x, mode) : bcos(x, mode);
    }

    void visit(const std::string& prefix, const ParamVisitor<Real>& f) {
        if (kind == ProjectionKind::linear) {
            linear.visit(prefix, f);
        } else {
            bcos.visit(prefix, f);
        }
    }
};

}  // namespace bvt
