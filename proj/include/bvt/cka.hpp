#pragma once

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bvt/data.hpp"
#include "bvt/model.hpp"

namespace bvt {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

inline Matrix centered_columns(const Matrix& x) { return x.rowwise() - x.colwise().mean(); }

}  // namespace detail

/// ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) with column-centred X, Y.
inline double linear_cka(const Matrix& x, const Matrix& y) {
    if (x.rows() != y.rows()) throw DimensionError("linear_cka: sample counts differ");
    if (x.rows() < 2) throw ValidationError("linear_cka: need at least 2 samples");
    const Matrix xc = detail::centered_columns(x), yc = detail::centered_columns(y);
    const double xx = (xc.transpose() * xc).norm(), yy = (yc.transpose() * yc).norm();
    if (!(xx > 0) || !(yy > 0)) {
        throw ValidationError("linear_cka: similarity undefined for a representation with zero variance");
    }
    return (yc.transpose() * xc).squaredNorm() / (xx * yy);
}

enum class Pooling { mean_patch, cls };

inline const char* to_string(Pooling p) { return p == Pooling::cls ? "cls" : "mean_patch"; }

inline Pooling parse_pooling(const std::string& s) {
    if (s == "mean_patch") return Pooling::mean_patch;
    if (s == "cls") return Pooling::cls;
    throw ValidationError("unknown pooling '" + s + "' (expected mean_patch or cls)");
}

/// Per-layer pooled activations, X_l[n_samples x d_l].
struct ActivationStack {
    std::vector<std::string> layer_names;
    std::vector<Matrix> layers;
    std::vector<std::string> sample_ids;
    Pooling pooling = Pooling::mean_patch;

    void validate() const {
        if (layers.empty()) throw ValidationError("activation stack: no layers");
        for (const auto& l : layers) {
            if (static_cast<std::size_t>(l.rows()) != sample_ids.size() && !sample_ids.empty()) {
                throw DimensionError("activation stack: layers disagree on sample count");
            }
            if (l.rows() != layers.front().rows()) throw DimensionError("activation stack: layers disagree on sample count");
        }
        if (layers.front().rows() < 2) throw ValidationError("activation stack: need at least 2 samples");
    }
};

struct CkaResult {
    std::vector<std::string> names;
    Matrix matrix;

    double mean_off_diagonal() const {
        const auto l = matrix.rows();
        if (l < 2) return 1.0;
        return (matrix.sum() - matrix.trace()) / static_cast<double>(l * (l - 1));
    }
};

inline CkaResult cka_matrix(const ActivationStack& stack) {
    stack.validate();
    const auto l = static_cast<Eigen::Index>(stack.layers.size());
    CkaResult r;
    r.names = stack.layer_names;
    r.matrix = Matrix::Identity(l, l);
    for (Eigen::Index i = 0; i < l; ++i) {
        linear_cka(stack.layers[static_cast<std::size_t>(i)], stack.layers[static_cast<std::size_t>(i)]);  // rejects degenerate layers
        for (Eigen::Index j = i + 1; j < l; ++j) {
            const double v = linear_cka(stack.layers[static_cast<std::size_t>(i)], stack.layers[static_cast<std::size_t>(j)]);
            r.matrix(i, j) = v;
            r.matrix(j, i) = v;
        }
    }
    return r;
}

/// Header row and column of layer names, values with 6 decimals.
inline void write_cka_csv(std::ostream& os, const CkaResult& r) {
    os << "layer";
    for (const auto& n : r.names) os << "," << n;
    os << "\n";
    char buf[32];
    for (Eigen::Index i = 0; i < r.matrix.rows(); ++i) {
        os << r.names[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < r.matrix.cols(); ++j) {
            std::snprintf(buf, sizeof buf, "%.6f", r.matrix(i, j));
            os << "," << buf;
        }
        os << "\n";
    }
}

/// Block outputs of every sample in `indices`, pooled per image.
inline ActivationStack collect_activations(const Model& model, const Dataset& ds, const std::vector<std::size_t>& indices,
                                           Pooling pooling = Pooling::mean_patch, std::size_t batch_size = 32) {
    if (indices.empty()) throw ValidationError("collect_activations: no samples");
    if (pooling == Pooling::cls && !model.cfg.has_cls()) throw ValidationError("collect_activations: model has no [cls] token");
    ActivationStack stack;
    stack.pooling = pooling;
    NoTapeScope<double> no_tape;
    for (std::size_t lo = 0; lo < indices.size(); lo += batch_size) {
        const std::size_t hi = std::min(indices.size(), lo + batch_size);
        std::vector<std::size_t> idx(indices.begin() + static_cast<std::ptrdiff_t>(lo), indices.begin() + static_cast<std::ptrdiff_t>(hi));
        auto batch = make_batch(ds, idx, model.cfg.family);
        ForwardCapture<double> cap;
        model.forward(batch.images, PassMode::standard, &cap);
        if (stack.layers.empty()) {
            for (std::size_t l = 0; l < cap.block_outputs.size(); ++l) {
                stack.layer_names.push_back("block" + std::to_string(l));
                stack.layers.emplace_back(static_cast<Eigen::Index>(indices.size()),
                                          static_cast<Eigen::Index>(cap.block_outputs[l].dim(2)));
            }
        }
        for (std::size_t l = 0; l < cap.block_outputs.size(); ++l) {
            const auto& out = cap.block_outputs[l];
            const std::size_t n = out.dim(1), d = out.dim(2);
            const bool has_cls = cap.geometry[l].has_cls;
            const auto& v = out.values();
            for (std::size_t b = 0; b < idx.size(); ++b) {
                auto row = stack.layers[l].row(static_cast<Eigen::Index>(lo + b));
                row.setZero();
                if (pooling == Pooling::cls) {
                    for (std::size_t k = 0; k < d; ++k) row(static_cast<Eigen::Index>(k)) = v[(b * n) * d + k];
                    continue;
                }
                const std::size_t first = has_cls ? 1 : 0;
                for (std::size_t t = first; t < n; ++t)
                    for (std::size_t k = 0; k < d; ++k) row(static_cast<Eigen::Index>(k)) += v[(b * n + t) * d + k];
                row /= static_cast<double>(n - first);
            }
        }
        for (auto i : idx) stack.sample_ids.push_back(ds.samples[i].id);
    }
    return stack;
}

}  // namespace bvt
