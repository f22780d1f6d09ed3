#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "bvt/projection.hpp"

namespace bvt {

inline constexpr double kMaskedLogit = -1e9;

struct WindowSpec {
    std::size_t size = 7;
    std::size_t shift = 0;
};

struct AttentionConfig {
    std::size_t dim = 64;
    std::size_t heads = 4;
    ProjectionKind kind = ProjectionKind::linear;
    int B = 2;
    std::optional<WindowSpec> window;

    std::size_t head_dim() const { return dim / heads; }

    void validate() const {
        if (dim == 0 || heads == 0) throw ValidationError("attention: dim and heads must be positive");
        if (dim % heads != 0) {
            throw ValidationError("attention: dim " + std::to_string(dim) + " is not divisible by heads " +
                                  std::to_string(heads));
        }
        if (window) {
            if (window->size == 0) throw ValidationError("attention: window size must be positive");
            if (window->shift >= window->size) {
                throw ValidationError("attention: shift " + std::to_string(window->shift) + " outside [0, " +
                                      std::to_string(window->size) + ")");
            }
        }
    }
};

template <class Real>
struct AttentionResult {
    TensorT<Real> output;     // [n x dh]
    TensorT<Real> attention;  // [n x n]
};

/// A = softmax(scale * Q K^T + mask) row-wise; output = A V. With `freeze`
/// the attention weights enter the graph as constants.
template <class Real>
AttentionResult<Real> scaled_dot_product_attention(const TensorT<Real>& q, const TensorT<Real>& k,
                                                   const TensorT<Real>& v, Real scale_factor,
                                                   const TensorT<Real>* mask = nullptr, bool freeze = false) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
        throw DimensionError("attention: incompatible Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) +
                             ", V " + shape_str(v.shape()));
    }
    auto logits = scale(matmul(q, transpose(k)), scale_factor);
    if (mask) logits = add(logits, *mask);
    auto a = softmax(logits, 1);
    if (freeze) a = a.detach();
    return {matmul(a, v), a};
}

/// Maps window-major token order back to the row-major grid for a (cyclically
/// shifted) window partition: entry k is the grid index of windowed token k.
inline std::vector<std::size_t> window_permutation(std::size_t h, std::size_t w, std::size_t ws, std::size_t shift) {
    std::vector<std::size_t> perm;
    perm.reserve(h * w);
    for (std::size_t wr = 0; wr < h / ws; ++wr) {
        for (std::size_t wc = 0; wc < w / ws; ++wc) {
            for (std::size_t r = 0; r < ws; ++r) {
                for (std::size_t c = 0; c < ws; ++c) {
                    const std::size_t i = (wr * ws + r + shift) % h;
                    const std::size_t j = (wc * ws + c + shift) % w;
                    perm.push_back(i * w + j);
                }
            }
        }
    }
    return perm;
}

/// Additive masks [ws^2 x ws^2], one per window, that block attention between
/// tokens which were not neighbours before the cyclic shift. Empty when shift = 0.
template <class Real>
std::vector<TensorT<Real>> shifted_window_masks(std::size_t h, std::size_t w, std::size_t ws, std::size_t shift) {
    std::vector<TensorT<Real>> masks;
    if (shift == 0) return masks;
    auto region = [&](std::size_t i, std::size_t extent) -> std::size_t {
        return i < extent - ws ? 0 : (i < extent - shift ? 1 : 2);
    };
    const std::size_t m = ws * ws;
    for (std::size_t wr = 0; wr < h / ws; ++wr) {
        for (std::size_t wc = 0; wc < w / ws; ++wc) {
            std::vector<std::size_t> label(m);
            for (std::size_t r = 0; r < ws; ++r) {
                for (std::size_t c = 0; c < ws; ++c) {
                    label[r * ws + c] = region(wr * ws + r, h) * 3 + region(wc * ws + c, w);
                }
            }
            std::vector<Real> mask(m * m, Real(0));
            for (std::size_t a = 0; a < m; ++a) {
                for (std::size_t b = 0; b < m; ++b) {
                    if (label[a] != label[b]) mask[a * m + b] = Real(kMaskedLogit);
                }
            }
            masks.emplace_back(Shape{m, m}, std::move(mask));
        }
    }
    return masks;
}

/// Attention maps collected during a forward pass: maps[image][group * heads + head],
/// where group is the window index (0 for global attention).
template <class Real>
struct AttentionCapture {
    std::vector<std::vector<TensorT<Real>>> maps;
};

/// Multi-head self-attention with Q/K/V and output projections of one kind.
template <class Real>
struct MultiHeadAttention {
    AttentionConfig cfg;
    Projection<Real> q, k, v, proj;

    MultiHeadAttention() = default;
    MultiHeadAttention(AttentionConfig c, Rng& rng) : cfg(c) {
        cfg.validate();
        q = Projection<Real>(cfg.dim, cfg.dim, cfg.kind, cfg.B, rng);
        k = Projection<Real>(cfg.dim, cfg.dim, cfg.kind, cfg.B, rng);
        v = Projection<Real>(cfg.dim, cfg.dim, cfg.kind, cfg.B, rng);
        proj = Projection<Real>(cfg.dim, cfg.dim, cfg.kind, cfg.B, rng);
    }

    Real scale_factor() const { return Real(1) / std::sqrt(static_cast<Real>(cfg.head_dim())); }

    /// x: [n x d] or [batch x n x d]; global attention over all n tokens.
    TensorT<Real> operator()(const TensorT<Real>& x, PassMode mode = PassMode::standard,
                             AttentionCapture<Real>* capture = nullptr) const {
        const bool single = x.rank() == 2;
        auto xb = single ? reshape(x, {1, x.dim(0), x.dim(1)}) : x;
        check_input(xb);
        const std::size_t n = xb.dim(1);
        std::vector<std::size_t> identity(n);
        for (std::size_t i = 0; i < n; ++i) identity[i] = i;
        auto out = run(xb, {identity}, {}, mode, capture);
        return single ? reshape(out, {n, cfg.dim}) : out;
    }

    /// x: [batch x (grid_h * grid_w) x d] in row-major grid order; attention
    /// runs independently inside each (shifted) window.
    TensorT<Real> windowed(const TensorT<Real>& x, std::size_t grid_h, std::size_t grid_w,
                           PassMode mode = PassMode::standard, AttentionCapture<Real>* capture = nullptr) const {
        if (!cfg.window) throw ValidationError("attention: windowed call without a window configuration");
        check_input(x);
        const std::size_t ws = cfg.window->size, shift = cfg.window->shift;
        if (grid_h * grid_w != x.dim(1)) {
            throw DimensionError("attention: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                                 " does not match " + std::to_string(x.dim(1)) + " tokens");
        }
        if (grid_h % ws != 0 || grid_w % ws != 0) {
            throw ValidationError("attention: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                                  " is not divisible by window " + std::to_string(ws));
        }
        auto perm = window_permutation(grid_h, grid_w, ws, shift);
        std::vector<std::vector<std::size_t>> groups;
        for (std::size_t g = 0; g < perm.size() / (ws * ws); ++g) {
            groups.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(g * ws * ws),
                                perm.begin() + static_cast<std::ptrdiff_t>((g + 1) * ws * ws));
        }
        return run(x, groups, shifted_window_masks<Real>(grid_h, grid_w, ws, shift), mode, capture);
    }

    void visit(const std::string& prefix, const ParamVisitor<Real>& f) {
        q.visit(prefix + ".q", f);
        k.visit(prefix + ".k", f);
        v.visit(prefix + ".v", f);
        proj.visit(prefix + ".proj", f);
    }

   private:
    void check_input(const TensorT<Real>& x) const {
        if (x.rank() != 3 || x.dim(2) != cfg.dim) {
            throw DimensionError("attention: expected [batch x n x " + std::to_string(cfg.dim) + "], got " +
                                 shape_str(x.shape()));
        }
    }

    // Each group lists the token indices attending to one another; the groups
    // partition the tokens.
    TensorT<Real> run(const TensorT<Real>& x, const std::vector<std::vector<std::size_t>>& groups,
                      const std::vector<TensorT<Real>>& masks, PassMode mode, AttentionCapture<Real>* capture) const {
        const std::size_t batch = x.dim(0), n = x.dim(1), d = cfg.dim, dh = cfg.head_dim();
        const bool freeze = mode == PassMode::relevance;
        auto qa = q(x, mode), ka = k(x, mode), va = v(x, mode);
        std::vector<std::size_t> order;
        for (const auto& g : groups) order.insert(order.end(), g.begin(), g.end());
        const bool is_identity = groups.size() == 1 && [&] {
            for (std::size_t i = 0; i < n; ++i)
                if (order[i] != i) return false;
            return true;
        }();
        std::vector<std::size_t> inverse(n);
        for (std::size_t i = 0; i < n; ++i) inverse[order[i]] = i;

        if (capture) capture->maps.assign(batch, {});
        std::vector<TensorT<Real>> images;
        images.reserve(batch);
        for (std::size_t b = 0; b < batch; ++b) {
            auto take = [&](const TensorT<Real>& t) {
                auto rows = reshape(slice(t, 0, b, b + 1), {n, d});
                return is_identity ? rows : gather_rows(rows, order);
            };
            auto qb = take(qa), kb = take(ka), vb = take(va);
            std::vector<TensorT<Real>> group_out;
            std::size_t start = 0;
            for (std::size_t g = 0; g < groups.size(); ++g) {
                const std::size_t m = groups[g].size();
                auto rows = [&](const TensorT<Real>& t) { return groups.size() == 1 ? t : slice(t, 0, start, start + m); };
                auto qg = rows(qb), kg = rows(kb), vg = rows(vb);
                std::vector<TensorT<Real>> heads;
                for (std::size_t h = 0; h < cfg.heads; ++h) {
                    auto cols = [&](const TensorT<Real>& t) {
                        return cfg.heads == 1 ? t : slice(t, 1, h * dh, (h + 1) * dh);
                    };
                    auto r = scaled_dot_product_attention(cols(qg), cols(kg), cols(vg), scale_factor(),
                                                          masks.empty() ? nullptr : &masks[g], freeze);
                    if (capture) capture->maps[b].push_back(r.attention);
                    heads.push_back(r.output);
                }
                group_out.push_back(heads.size() == 1 ? heads[0] : concat(heads, 1));
                start += m;
            }
            auto merged = group_out.size() == 1 ? group_out[0] : concat(group_out, 0);
            if (!is_identity) merged = gather_rows(merged, inverse);
            images.push_back(merged);
        }
        auto joined = batch == 1 ? images[0] : concat(images, 0);
        return proj(reshape(joined, {batch, n, d}), mode);
    }
};

/// Global multi-head attention over the tokens of x [n x d].
template <class Real>
TensorT<Real> multi_head_attention(const TensorT<Real>& x, const MultiHeadAttention<Real>& attn,
                                   PassMode mode = PassMode::standard, AttentionCapture<Real>* capture = nullptr) {
    return attn(x, mode, capture);
}

/// Window attention over a token grid x [H x W x d].
template <class Real>
TensorT<Real> window_attention(const TensorT<Real>& x, const MultiHeadAttention<Real>& attn,
                               PassMode mode = PassMode::standard, AttentionCapture<Real>* capture = nullptr) {
    if (x.rank() != 3) throw DimensionError("window_attention: expected [H x W x d], got " + shape_str(x.shape()));
    const std::size_t h = x.dim(0), w = x.dim(1), d = x.dim(2);
    auto y = attn.windowed(reshape(x, {1, h * w, d}), h, w, mode, capture);
    return reshape(y, {h, w, d});
}

}  // namespace bvt
