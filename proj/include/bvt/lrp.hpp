#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "bvt/bcos.hpp"
#include "bvt/explain.hpp"
#include "bvt/model.hpp"
#include "bvt/trace.hpp"

namespace bvt {

inline double stabilizer_sign(double z) { return z >= 0 ? 1.0 : -1.0; }

/// Dense epsilon rule for z = W x: R_in = x * (W^T (R_out / (z + eps sign(z)))).
/// W is [out x in] row-major.
inline std::vector<double> epsilon_rule(std::span<const double> w, std::span<const double> x, std::span<const double> r_out,
                                        double eps) {
    const std::size_t out = r_out.size(), in = x.size();
    if (w.size() != out * in) throw DimensionError("epsilon_rule: weight does not match input and relevance sizes");
    std::vector<double> ratio(out);
    for (std::size_t o = 0; o < out; ++o) {
        double z = 0;
        for (std::size_t i = 0; i < in; ++i) z += w[o * in + i] * x[i];
        const double den = z + eps * stabilizer_sign(z);
        if (den == 0) throw NumericalError("epsilon_rule: zero denominator at output " + std::to_string(o) + " with eps = 0");
        ratio[o] = r_out[o] / den;
    }
    std::vector<double> r_in(in, 0.0);
    for (std::size_t i = 0; i < in; ++i) {
        double s = 0;
        for (std::size_t o = 0; o < out; ++o) s += w[o * in + i] * ratio[o];
        r_in[i] = x[i] * s;
    }
    return r_in;
}

/// Epsilon rule through a B-cos layer using its dynamic-linear weight W(x).
inline std::vector<double> bcos_epsilon_rule(const BcosLayer<double>& layer, std::span<const double> x,
                                             std::span<const double> r_out, double eps) {
    auto w = dynamic_linear_summary<double>(x, layer);
    return epsilon_rule(w.values(), x, r_out, eps);
}

/// Runs relevance propagation backwards from `output` on its tape. `seed` is
/// the initial gradient at `output`; at every matmul the incoming gradient is
/// scaled by z / (z + eps sign(z)). Afterwards the relevance of any tracked
/// tensor t is t ⊙ t.grad(). The graph must come from a relevance-mode pass
/// (linear in its tracked inputs).
template <class Real>
void propagate_relevance(const TensorT<Real>& output, std::span<const Real> seed, Real eps) {
    const auto& impl = output.impl();
    if (impl->node == detail::kNoNode) throw TapeError("propagate_relevance: output is not recorded on a tape");
    auto tape = impl->tape.lock();
    if (!tape || tape->epoch != impl->epoch) throw TapeError("propagate_relevance: stale or missing tape");
    if (tape->consumed) throw TapeError("propagate_relevance: tape already swept; reset it first");
    if (seed.size() != output.numel()) throw DimensionError("propagate_relevance: seed size mismatch");
    auto& g = impl->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    std::vector<Real> scaled;
    detail::reverse_sweep<Real>(*tape, impl->node, [&](const detail::Record<Real>& r) -> std::span<const Real> {
        const auto& grad = r.out->grad;
        if (std::string_view(r.op) != "matmul") return grad;
        const auto& z = r.out->data;
        scaled.resize(z.size());
        for (std::size_t i = 0; i < z.size(); ++i) {
            const Real den = z[i] + eps * Real(stabilizer_sign(static_cast<double>(z[i])));
            if (den == 0) {
                if (grad[i] == 0) {
                    scaled[i] = 0;
                    continue;
                }
                throw NumericalError("relevance propagation: zero denominator in a matmul output with eps = 0");
            }
            scaled[i] = grad[i] * z[i] / den;
        }
        return scaled;
    });
}

/// Sum over the last axis of t ⊙ t.grad(), giving one score per row.
template <class Real>
std::vector<double> relevance_per_row(const TensorT<Real>& t) {
    const std::size_t d = t.shape().back(), rows = t.numel() / d;
    std::vector<double> out(rows, 0.0);
    if (!t.has_grad()) return out;
    auto g = t.grad();
    const auto& v = t.values();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < d; ++k) out[r] += static_cast<double>(v[r * d + k] * g[r * d + k]);
    return out;
}

template <class Real>
double relevance_total(const TensorT<Real>& t) {
    double s = 0;
    for (double v : relevance_per_row(t)) s += v;
    return s;
}

// ---------------------------------------------------------------------------
// model-level helpers

namespace detail {

template <class Real>
TensorT<Real> as_batch(const TransformerModel<Real>& model, const TensorT<Real>& image) {
    auto batch = image.rank() == 3 ? reshape(image.detach(), {1, image.dim(0), image.dim(1), image.dim(2)}) : image.detach();
    if (batch.rank() != 4 || batch.dim(0) != 1) {
        throw DimensionError("explain: expected one image [C x H x W], got " + shape_str(image.shape()));
    }
    return model.prepare(batch);
}

template <class Real>
std::size_t argmax_row(const TensorT<Real>& logits) {
    const auto& v = logits.values();
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

template <class Real>
void clear_parameter_grads(const TransformerModel<Real>& model) {
    for (auto& [name, p] : model.named_parameters()) p.zero_grad();
}

}  // namespace detail

struct TracedPrediction {
    ExecutionTrace trace;
    std::vector<double> logits;
    std::size_t predicted = 0;
    std::size_t target = 0;
};

/// Forward pass on one image (RGB images are encoded for six-channel models),
/// then backward from logit `target` (default: the predicted class) so the
/// trace carries attention and token gradients. Parameter gradients are
/// cleared again afterwards.
template <class Real>
TracedPrediction trace_prediction(const TransformerModel<Real>& model, const TensorT<Real>& image,
                                  std::optional<std::size_t> target = std::nullopt, bool keep_window_maps = false,
                                  bool with_gradients = true) {
    auto batch = detail::as_batch(model, image);
    TracedPrediction out;
    ForwardCapture<Real> cap;
    cap.keep_window_maps = keep_window_maps;
    Tape<Real> tape;
    {
        TapeScope<Real> scope(tape);
        auto logits = model.forward(batch, PassMode::standard, &cap);
        out.logits.assign(logits.values().begin(), logits.values().end());
        out.predicted = detail::argmax_row(logits);
        out.target = target.value_or(out.predicted);
        if (out.target >= model.cfg.num_classes) throw ValidationError("explain: class index out of range");
        if (with_gradients) {
            detail::clear_parameter_grads(model);
            backward(sum(slice(logits, 1, out.target, out.target + 1)));
        }
    }
    out.trace = make_trace(cap, model.cfg.family, 0);
    detail::clear_parameter_grads(model);
    return out;
}

enum class LrpReadout { all, second, last };

inline LrpReadout parse_readout(const std::string& s) {
    if (s == "all") return LrpReadout::all;
    if (s == "second") return LrpReadout::second;
    if (s == "last") return LrpReadout::last;
    throw ValidationError("unknown LRP readout '" + s + "' (expected all, second or last)");
}

inline const char* to_string(LrpReadout r) {
    switch (r) {
        case LrpReadout::all: return "lrp";
        case LrpReadout::second: return "lrp_second";
        case LrpReadout::last: return "lrp_last";
    }
    return "?";
}

struct LrpResult {
    SaliencyMap map;
    double logit = 0;
    double patch_relevance = 0;  // summed over all input patches
    double cls_relevance = 0;
    double pos_relevance = 0;
    double bias_relevance = 0;  // absorbed by linear and normalization biases; zero for B-cos models

    /// Relevance arriving at the input: patches, [cls] and position embedding.
    double total() const { return patch_relevance + cls_relevance + pos_relevance; }
    /// |input relevance - logit| / max(1, |logit|).
    double conservation_error() const { return std::abs(total() - logit) / std::max(1.0, std::abs(logit)); }
    /// Same with the bias share counted as a source.
    double accounted_error() const { return std::abs(total() + bias_relevance - logit) / std::max(1.0, std::abs(logit)); }
};

/// Epsilon-LRP for class `target` of one image. Relevance starts as the
/// target logit, B-cos layers propagate through W(x), attention weights and
/// normalization scales act as constants. The map shows the input patches
/// ("all") or the token relevance entering the second or the last block.
template <class Real>
LrpResult lrp_epsilon(const TransformerModel<Real>& model, const TensorT<Real>& image, std::size_t target,
                      LrpReadout readout = LrpReadout::all, Real eps = Real(1e-6)) {
    if (target >= model.cfg.num_classes) throw ValidationError("lrp: class index out of range");
    auto batch = detail::as_batch(model, image);
    auto patches = patchify(batch, model.cfg.patch_size).detach().leaf_copy(true);
    ForwardCapture<Real> cap;
    Tape<Real> tape;
    std::vector<TensorT<Real>> biases;
    LrpResult out;
    {
        TapeScope<Real> scope(tape);
        BiasSinkScope<Real> sinks(biases);
        auto logits = model.forward_patches(patches, PassMode::relevance, &cap);
        out.logit = static_cast<double>(logits.values()[target]);
        std::vector<Real> seed(logits.numel(), Real(0));
        seed[target] = Real(1);
        propagate_relevance<Real>(logits, seed, eps);
    }
    out.patch_relevance = relevance_total(patches);
    if (cap.cls_source) out.cls_relevance = relevance_total(*cap.cls_source);
    if (cap.pos_source) out.pos_relevance = relevance_total(*cap.pos_source);
    for (const auto& b : biases) out.bias_relevance += relevance_total(b);

    const std::size_t grid = model.cfg.grid();
    std::vector<double> scores;
    std::size_t gh = grid, gw = grid;
    std::optional<std::size_t> layer;
    if (readout == LrpReadout::all) {
        scores = relevance_per_row(patches);
    } else {
        const std::size_t l = readout == LrpReadout::second ? 1 : cap.block_inputs.size() - 1;
        if (l >= cap.block_inputs.size()) throw ValidationError("lrp: model has fewer than two blocks");
        const auto& g = cap.geometry[l];
        scores = relevance_per_row(cap.block_inputs[l]);
        if (g.has_cls) scores.erase(scores.begin());
        gh = g.grid_h;
        gw = g.grid_w;
        layer = l;
    }
    out.map = finalize_map(to_string(readout), target, std::move(scores), gh, gw, layer);
    return out;
}

}  // namespace bvt
