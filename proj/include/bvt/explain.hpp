#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "bvt/image_io.hpp"
#include "bvt/trace.hpp"

namespace bvt {

/// Non-negative relevance over a token grid. `raw` keeps the unrectified,
/// unnormalized scores; `values` is rectified and scaled to max 1, or all
/// zero with `degenerate` set.
struct SaliencyMap {
    std::string method;
    std::size_t class_index = 0;
    std::optional<std::size_t> layer;
    std::size_t grid_h = 0, grid_w = 0;
    std::vector<double> raw;
    std::vector<double> values;
    bool degenerate = false;
    std::string normalization = "max";

    double at(std::size_t r, std::size_t c) const { return values[r * grid_w + c]; }
};

inline SaliencyMap finalize_map(std::string method, std::size_t class_index, std::vector<double> raw, std::size_t gh,
                                std::size_t gw, std::optional<std::size_t> layer = std::nullopt) {
    if (raw.size() != gh * gw) throw DimensionError(method + ": " + std::to_string(raw.size()) + " scores for a " +
                                                    std::to_string(gh) + "x" + std::to_string(gw) + " grid");
    SaliencyMap m;
    m.method = std::move(method);
    m.class_index = class_index;
    m.layer = layer;
    m.grid_h = gh;
    m.grid_w = gw;
    m.values.resize(raw.size());
    double top = 0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        m.values[i] = std::max(raw[i], 0.0);
        top = std::max(top, m.values[i]);
    }
    if (!(top > 0) || !std::isfinite(top)) {
        m.degenerate = true;
        std::fill(m.values.begin(), m.values.end(), 0.0);
    } else {
        for (auto& v : m.values) v /= top;
    }
    m.raw = std::move(raw);
    return m;
}

inline nlohmann::json sidecar_json(const SaliencyMap& m) {
    nlohmann::json j{{"method", m.method},       {"class", m.class_index}, {"grid", {m.grid_h, m.grid_w}},
                     {"normalization", m.normalization}, {"degenerate", m.degenerate}};
    j["layer"] = m.layer ? nlohmann::json(*m.layer) : nlohmann::json(nullptr);
    return j;
}

namespace detail {

using SquareMatrix = std::vector<double>;  // row-major n x n

inline SquareMatrix identity(std::size_t n) {
    SquareMatrix m(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) m[i * n + i] = 1.0;
    return m;
}

inline SquareMatrix matmul_square(const SquareMatrix& a, const SquareMatrix& b, std::size_t n) {
    SquareMatrix c(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k) {
            const double aik = a[i * n + k];
            if (aik == 0) continue;
            for (std::size_t j = 0; j < n; ++j) c[i * n + j] += aik * b[k * n + j];
        }
    return c;
}

inline SquareMatrix head_mean(const AttentionRecord& r) {
    const std::size_t n = r.tokens;
    SquareMatrix m(n * n, 0.0);
    for (std::size_t h = 0; h < r.heads; ++h)
        for (std::size_t i = 0; i < n * n; ++i) m[i] += r.attention[h * n * n + i];
    for (auto& v : m) v /= static_cast<double>(r.heads);
    return m;
}

// Relevance of patch tokens read from row `cls` of an n x n matrix, or the
// mean over query rows when there is no [cls] token.
inline std::vector<double> patch_scores(const SquareMatrix& m, std::size_t n, bool has_cls) {
    const std::size_t first = has_cls ? 1 : 0;
    std::vector<double> out(n - first, 0.0);
    if (has_cls) {
        for (std::size_t j = first; j < n; ++j) out[j - first] = m[j];
    } else {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) out[j] += m[i * n + j] / static_cast<double>(n);
    }
    return out;
}

inline const std::vector<AttentionRecord>& global_records(const ExecutionTrace& t, const char* method) {
    if (t.attention.empty()) {
        throw ValidationError(std::string(method) +
                              ": the trace has no global attention layer; windowed models need the modified variant "
                              "whose last block uses global attention");
    }
    return t.attention;
}

inline void require_grad(const AttentionRecord& r, const char* method) {
    if (!r.has_grad()) {
        throw ValidationError(std::string(method) + ": attention gradients missing for layer " + std::to_string(r.layer) +
                              "; run backward for the target class first");
    }
}

}  // namespace detail

/// Head-averaged attention of the last global layer, read from the [cls] row.
inline SaliencyMap attention_last(const ExecutionTrace& t, std::size_t class_index = 0) {
    const auto& r = detail::global_records(t, "attention_last").back();
    auto scores = detail::patch_scores(detail::head_mean(r), r.tokens, r.has_cls);
    return finalize_map("attention_last", class_index, std::move(scores), r.grid_h, r.grid_w, r.layer);
}

/// Cumulative products R_l = A_l ... A_1 with A = rownorm(0.5 mean_h(A) + 0.5 I),
/// one matrix per global layer.
inline std::vector<std::vector<double>> rollout_matrices(const ExecutionTrace& t) {
    const auto& records = detail::global_records(t, "rollout");
    const std::size_t n = records.front().tokens;
    std::vector<std::vector<double>> out;
    auto r = detail::identity(n);
    for (const auto& rec : records) {
        if (rec.tokens != n) throw DimensionError("rollout: global layers disagree on token count");
        auto a = detail::head_mean(rec);
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < n; ++j) {
                auto& v = a[i * n + j];
                v = 0.5 * v + (i == j ? 0.5 : 0.0);
                s += v;
            }
            for (std::size_t j = 0; j < n; ++j) a[i * n + j] /= s;
        }
        r = detail::matmul_square(a, r, n);
        out.push_back(r);
    }
    return out;
}

inline SaliencyMap rollout(const ExecutionTrace& t, std::size_t class_index = 0) {
    auto mats = rollout_matrices(t);
    const auto& last = detail::global_records(t, "rollout").back();
    auto scores = detail::patch_scores(mats.back(), last.tokens, last.has_cls);
    return finalize_map("rollout", class_index, std::move(scores), last.grid_h, last.grid_w);
}

/// relu(sum_k alpha_k T[:, k]) over patch tokens, alpha = token mean of G.
inline std::vector<double> grad_cam_scores(std::span<const double> tokens, std::span<const double> grads, std::size_t n,
                                           std::size_t d, bool has_cls) {
    std::vector<double> alpha(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) alpha[k] += grads[i * d + k] / static_cast<double>(n);
    const std::size_t first = has_cls ? 1 : 0;
    std::vector<double> out;
    for (std::size_t i = first; i < n; ++i) {
        double s = 0;
        for (std::size_t k = 0; k < d; ++k) s += alpha[k] * tokens[i * d + k];
        out.push_back(std::max(s, 0.0));
    }
    return out;
}

/// Grad-CAM on the input activations of block `layer` (default: last block).
inline SaliencyMap grad_cam(const ExecutionTrace& t, std::size_t class_index, std::optional<std::size_t> layer = std::nullopt) {
    if (t.blocks.empty()) throw ValidationError("grad_cam: empty trace");
    const std::size_t l = layer.value_or(t.blocks.size() - 1);
    if (l >= t.blocks.size()) throw ValidationError("grad_cam: layer " + std::to_string(l) + " out of range");
    const auto& b = t.blocks[l];
    if (b.input_grad.empty()) throw ValidationError("grad_cam: token gradients missing; run backward for the target class first");
    auto scores = grad_cam_scores(b.input, b.input_grad, b.tokens, b.dim, b.has_cls);
    return finalize_map("grad_cam", class_index, std::move(scores), b.grid_h, b.grid_w, l);
}

/// R = I, then per global layer R <- R + mean_h relu(dA * A) R.
inline std::vector<double> attribution_matrix(const std::vector<AttentionRecord>& records) {
    const std::size_t n = records.front().tokens;
    auto r = detail::identity(n);
    for (const auto& rec : records) {
        detail::require_grad(rec, "transformer_attribution");
        detail::SquareMatrix a(n * n, 0.0);
        for (std::size_t h = 0; h < rec.heads; ++h)
            for (std::size_t i = 0; i < n * n; ++i)
                a[i] += std::max(rec.grad[h * n * n + i] * rec.attention[h * n * n + i], 0.0) / static_cast<double>(rec.heads);
        auto ar = detail::matmul_square(a, r, n);
        for (std::size_t i = 0; i < n * n; ++i) r[i] += ar[i];
    }
    return r;
}

inline SaliencyMap transformer_attribution(const ExecutionTrace& t, std::size_t class_index) {
    const auto& records = detail::global_records(t, "transformer_attribution");
    auto r = attribution_matrix(records);
    const auto& last = records.back();
    auto scores = detail::patch_scores(r, last.tokens, last.has_cls);
    // without [cls], drop the identity's uniform share
    if (!last.has_cls) {
        auto base = detail::patch_scores(detail::identity(last.tokens), last.tokens, false);
        for (std::size_t i = 0; i < scores.size(); ++i) scores[i] -= base[i];
    }
    return finalize_map("transformer_attribution", class_index, std::move(scores), last.grid_h, last.grid_w);
}

struct HeadMass {
    std::size_t heads = 0, tokens = 0, grid_h = 0, grid_w = 0;
    bool has_cls = false;
    std::vector<std::vector<bool>> kept;  // [head][token], over the whole query row
    std::vector<std::size_t> counts;      // heads keeping each patch token, [grid_h x grid_w]
};

/// Per head, the smallest set of keys (largest first, ties by index) holding
/// at least `mass` of query row `query`'s attention.
inline HeadMass accumulate_heads(const AttentionRecord& r, double mass = 0.5, std::size_t query = 0) {
    if (!(mass > 0) || mass > 1) throw ValidationError("accumulate_heads: mass must be in (0, 1]");
    if (query >= r.tokens) throw ValidationError("accumulate_heads: query row out of range");
    if (r.groups != 1) throw ValidationError("accumulate_heads: needs a global attention record");
    HeadMass out;
    out.heads = r.heads;
    out.tokens = r.tokens;
    out.grid_h = r.grid_h;
    out.grid_w = r.grid_w;
    out.has_cls = r.has_cls;
    const std::size_t first = r.has_cls ? 1 : 0;
    out.counts.assign(r.tokens - first, 0);
    for (std::size_t h = 0; h < r.heads; ++h) {
        std::vector<double> row(r.tokens);
        for (std::size_t j = 0; j < r.tokens; ++j) row[j] = r.at(h, query, j);
        std::vector<std::size_t> order(r.tokens);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
        const double total = std::accumulate(row.begin(), row.end(), 0.0);
        const double target = mass * total * (1 - 1e-12);
        std::vector<bool> kept(r.tokens, false);
        double acc = 0;
        for (std::size_t j : order) {
            if (acc >= target && acc > 0) break;
            if (row[j] <= 0) break;
            kept[j] = true;
            acc += row[j];
        }
        for (std::size_t j = first; j < r.tokens; ++j) out.counts[j - first] += kept[j];
        out.kept.push_back(std::move(kept));
    }
    return out;
}

// ---------------------------------------------------------------------------
// rendering

enum class Interpolation { nearest, bilinear };

inline Interpolation parse_interpolation(const std::string& s) {
    if (s == "nearest") return Interpolation::nearest;
    if (s == "bilinear") return Interpolation::bilinear;
    throw ValidationError("unknown interpolation '" + s + "' (expected nearest or bilinear)");
}

/// Upsamples a grid to height x width with pixel centres aligned (edges clamp).
inline std::vector<double> upsample(std::span<const double> grid, std::size_t gh, std::size_t gw, std::size_t height,
                                    std::size_t width, Interpolation mode) {
    std::vector<double> out(height * width);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            double v;
            if (mode == Interpolation::nearest) {
                v = grid[(y * gh / height) * gw + x * gw / width];
            } else {
                const double sy = std::clamp((y + 0.5) * gh / height - 0.5, 0.0, static_cast<double>(gh - 1));
                const double sx = std::clamp((x + 0.5) * gw / width - 0.5, 0.0, static_cast<double>(gw - 1));
                const auto y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
                const std::size_t y1 = std::min(y0 + 1, gh - 1), x1 = std::min(x0 + 1, gw - 1);
                const double fy = sy - y0, fx = sx - x0;
                v = (1 - fy) * ((1 - fx) * grid[y0 * gw + x0] + fx * grid[y0 * gw + x1]) +
                    fy * ((1 - fx) * grid[y1 * gw + x0] + fx * grid[y1 * gw + x1]);
            }
            out[y * width + x] = v;
        }
    }
    return out;
}

inline GrayImage render_saliency(const SaliencyMap& m, std::size_t height, std::size_t width,
                                 Interpolation mode = Interpolation::nearest) {
    auto up = upsample(m.values, m.grid_h, m.grid_w, height, width, mode);
    GrayImage g{height, width, std::vector<std::uint8_t>(up.size())};
    for (std::size_t i = 0; i < up.size(); ++i) g.pixels[i] = quantize(up[i]);
    return g;
}

struct Localization {
    double inside_fraction = 0;  // of the top pixels' saliency mass
    std::size_t top_pixels = 0;
    bool degenerate = false;
};

/// Share of the saliency mass of the top `fraction` of pixels (ties by
/// index) that falls inside `mask` (non-zero pixels), after upsampling the
/// map to the mask resolution.
inline Localization localization_score(const SaliencyMap& m, const GrayImage& mask, double fraction = 0.1,
                                       Interpolation mode = Interpolation::bilinear) {
    if (mask.pixels.empty()) throw ValidationError("localization_score: sample has no mask");
    Localization out;
    if (m.degenerate) {
        out.degenerate = true;
        return out;
    }
    auto up = upsample(m.values, m.grid_h, m.grid_w, mask.height, mask.width, mode);
    std::vector<std::size_t> order(up.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return up[a] > up[b]; });
    out.top_pixels = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(up.size())));
    double total = 0, inside = 0;
    for (std::size_t k = 0; k < out.top_pixels; ++k) {
        total += up[order[k]];
        if (mask.pixels[order[k]]) inside += up[order[k]];
    }
    if (!(total > 0)) {
        out.degenerate = true;
        return out;
    }
    out.inside_fraction = inside / total;
    return out;
}

}  // namespace bvt
