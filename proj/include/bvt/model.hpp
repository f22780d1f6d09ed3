#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "bvt/attention.hpp"

namespace bvt {

enum class Family { vit, bvt, swin, bwin };

inline const char* to_string(Family f) {
    switch (f) {
        case Family::vit: return "vit";
        case Family::bvt: return "bvt";
        case Family::swin: return "swin";
        case Family::bwin: return "bwin";
    }
    return "?";
}

inline Family parse_family(const std::string& s) {
    if (s == "vit") return Family::vit;
    if (s == "bvt") return Family::bvt;
    if (s == "swin") return Family::swin;
    if (s == "bwin") return Family::bwin;
    throw ValidationError("unknown model family '" + s + "' (expected vit, bvt, swin or bwin)");
}

inline bool uses_bcos(Family f) { return f == Family::bvt || f == Family::bwin; }
inline bool is_windowed(Family f) { return f == Family::swin || f == Family::bwin; }

struct ModelConfig {
    Family family = Family::vit;
    bool modified_last_block = false;
    std::size_t depth = 4;  // ViT/BvT only; windowed families use stage_depths
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t patch_size = 4;
    std::size_t image_size = 32;
    std::size_t in_channels = 3;
    std::size_t num_classes = 3;
    std::size_t mlp_ratio = 4;
    int B = 2;
    std::vector<std::size_t> stage_depths;
    std::size_t window_size = 4;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t num_patches() const { return grid() * grid(); }
    bool has_cls() const { return !is_windowed(family); }

    std::size_t total_blocks() const {
        if (!is_windowed(family)) return depth;
        std::size_t n = 0;
        for (auto d : stage_depths) n += d;
        return n;
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
        if (dim == 0 || heads == 0 || patch_size == 0 || image_size == 0 || num_classes == 0 || mlp_ratio == 0) {
            fail("dim, heads, patch_size, image_size, num_classes and mlp_ratio must be positive");
        }
        if (image_size % patch_size != 0) {
            fail("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                 std::to_string(patch_size));
        }
        if (dim % heads != 0) fail("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
        if (in_channels != 3 && in_channels != 6) fail("in_channels must be 3 or 6");
        if (uses_bcos(family) && B < 1) fail("B must be >= 1");
        if (!is_windowed(family)) {
            if (depth == 0) fail("depth must be positive");
            if (modified_last_block) fail("modified_last_block applies to windowed families only");
            return;
        }
        if (stage_depths.empty()) fail("windowed families need at least one stage");
        for (auto d : stage_depths)
            if (d == 0) fail("every stage needs at least one block");
        if (window_size == 0) fail("window_size must be positive");
        const std::size_t reduce = window_size << (stage_depths.size() - 1);
        if (grid() % reduce != 0) {
            fail("patch grid " + std::to_string(grid()) + " is not divisible by window_size * 2^(stages-1) = " +
                 std::to_string(reduce));
        }
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"family", to_string(c.family)},
                       {"modified_last_block", c.modified_last_block},
                       {"depth", c.depth},
                       {"dim", c.dim},
                       {"heads", c.heads},
                       {"patch_size", c.patch_size},
                       {"image_size", c.image_size},
                       {"in_channels", c.in_channels},
                       {"num_classes", c.num_classes},
                       {"mlp_ratio", c.mlp_ratio},
                       {"B", c.B},
                       {"stage_depths", c.stage_depths},
                       {"window_size", c.window_size}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    static const char* known[] = {"family",      "modified_last_block", "depth",       "dim",       "heads",
                                  "patch_size",  "image_size",          "in_channels", "num_classes", "mlp_ratio",
                                  "B",           "stage_depths",        "window_size", "preset"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(std::begin(known), std::end(known), it.key()) == std::end(known)) {
            throw ValidationError("model config: unknown key '" + it.key() + "'");
        }
    }
    if (j.contains("family")) c.family = parse_family(j.at("family").get<std::string>());
    auto opt = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    opt("modified_last_block", c.modified_last_block);
    opt("depth", c.depth);
    opt("dim", c.dim);
    opt("heads", c.heads);
    opt("patch_size", c.patch_size);
    opt("image_size", c.image_size);
    opt("in_channels", c.in_channels);
    opt("num_classes", c.num_classes);
    opt("mlp_ratio", c.mlp_ratio);
    opt("B", c.B);
    opt("stage_depths", c.stage_depths);
    opt("window_size", c.window_size);
}

/// Named configurations. ViT/BvT: micro, tiny-proxy, T/8, S/8.
/// Swin/Bwin: micro, swin-t.
inline ModelConfig preset(const std::string& name, Family family, std::size_t num_classes = 3) {
    ModelConfig c;
    c.family = family;
    c.num_classes = num_classes;
    c.in_channels = uses_bcos(family) ? 6 : 3;
    if (is_windowed(family)) {
        if (name == "micro") {
            c.dim = 32, c.heads = 2, c.stage_depths = {2, 2}, c.window_size = 4, c.patch_size = 4, c.image_size = 32;
        } else if (name == "swin-t") {
            c.dim = 96, c.heads = 3, c.stage_depths = {2, 2, 6, 2}, c.window_size = 7, c.patch_size = 4,
            c.image_size = 224;
        } else {
            throw ValidationError("unknown preset '" + name + "' for family " + to_string(family) +
                                  " (expected micro or swin-t)");
        }
        c.depth = 0;
        return c;
    }
    if (name == "micro") {
        c.dim = 64, c.depth = 4, c.heads = 4, c.patch_size = 4, c.image_size = 32;
    } else if (name == "tiny-proxy") {
        c.dim = 128, c.depth = 6, c.heads = 4, c.patch_size = 8, c.image_size = 64;
    } else if (name == "T/8") {
        c.dim = 192, c.depth = 12, c.heads = 3, c.patch_size = 8, c.image_size = 224;
    } else if (name == "S/8") {
        c.dim = 384, c.depth = 12, c.heads = 6, c.patch_size = 8, c.image_size = 224;
    } else {
        throw ValidationError("unknown preset '" + name + "' for family " + to_string(family) +
                              " (expected micro, tiny-proxy, T/8 or S/8)");
    }
    return c;
}

/// [r, g, b] in [0, 1] -> [r, g, b, 1-r, 1-g, 1-b] along the channel axis.
/// Accepts [3 x H x W] or [batch x 3 x H x W]. Out-of-range values are an
/// error when `strict`, clamped otherwise.
template <class Real>
TensorT<Real> encode_six_channel(const TensorT<Real>& image, bool strict = true) {
    const bool batched = image.rank() == 4;
    if ((image.rank() != 3 && !batched) || image.dim(batched ? 1 : 0) != 3) {
        throw DimensionError("encode_six_channel: expected [3 x H x W] or [batch x 3 x H x W], got " +
                             shape_str(image.shape()));
    }
    const std::size_t batch = batched ? image.dim(0) : 1;
    const std::size_t plane = image.numel() / (batch * 3);
    Shape out_shape = image.shape();
    out_shape[batched ? 1 : 0] = 6;
    std::vector<Real> out(image.numel() * 2);
    const auto& v = image.values();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < 3 * plane; ++i) {
            Real x = v[b * 3 * plane + i];
            if (!(x >= 0 && x <= 1)) {
                if (strict) throw ValidationError("encode_six_channel: value " + std::to_string(x) + " outside [0, 1]");
                x = std::clamp(x, Real(0), Real(1));
            }
            out[b * 6 * plane + i] = x;
            out[b * 6 * plane + 3 * plane + i] = Real(1) - x;
        }
    }
    return TensorT<Real>(std::move(out_shape), std::move(out));
}

/// [batch x C x H x W] -> [batch x patches x (C p p)]; patches in row-major
/// grid order, each flattened as (channel, row, column).
template <class Real>
TensorT<Real> patchify(const TensorT<Real>& images, std::size_t p) {
    if (images.rank() != 4) throw DimensionError("patchify: expected [batch x C x H x W], got " + shape_str(images.shape()));
    const std::size_t batch = images.dim(0), ch = images.dim(1), h = images.dim(2), w = images.dim(3);
    if (h % p != 0 || w % p != 0) {
        throw DimensionError("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                             " is not divisible by patch size " + std::to_string(p));
    }
    const std::size_t gh = h / p, gw = w / p, len = ch * p * p;
    std::vector<std::size_t> source;
    source.reserve(images.numel());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t pr = 0; pr < gh; ++pr)
            for (std::size_t pc = 0; pc < gw; ++pc)
                for (std::size_t c = 0; c < ch; ++c)
                    for (std::size_t r = 0; r < p; ++r)
                        for (std::size_t q = 0; q < p; ++q)
                            source.push_back(((b * ch + c) * h + pr * p + r) * w + pc * p + q);
    std::vector<Real> out(source.size());
    const auto& v = images.values();
    for (std::size_t o = 0; o < source.size(); ++o) out[o] = v[source[o]];
    auto xi = images.impl();
    return detail::record<Real>("patchify", Shape{batch, gh * gw, len}, std::move(out), {xi},
                                [xi, source = std::move(source)](std::span<const Real> g) {
                                    auto& gx = xi->grad_buffer();
                                    for (std::size_t o = 0; o < source.size(); ++o) gx[source[o]] += g[o];
                                });
}

/// Pre-norm transformer block: x += Attn(LN(x)); x += MLP(LN(x)).
template <class Real>
struct Block {
    LayerNorm<Real> norm1, norm2;
    MultiHeadAttention<Real> attn;
    Projection<Real> fc1, fc2;
    bool relu_mlp = true;

    Block() = default;
    Block(const ModelConfig& cfg, std::size_t dim, std::size_t heads, std::optional<WindowSpec> window, Rng& rng) {
        const bool bcos = uses_bcos(cfg.family);
        const auto kind = bcos ? ProjectionKind::bcos : ProjectionKind::linear;
        norm1 = LayerNorm<Real>(dim, !bcos);
        attn = MultiHeadAttention<Real>(AttentionConfig{dim, heads, kind, cfg.B, window}, rng);
        norm2 = LayerNorm<Real>(dim, !bcos);
        fc1 = Projection<Real>(dim, dim * cfg.mlp_ratio, kind, cfg.B, rng);
        fc2 = Projection<Real>(dim * cfg.mlp_ratio, dim, kind, cfg.B, rng);
        relu_mlp = !bcos;
    }

    bool windowed() const { return attn.cfg.window.has_value(); }

    TensorT<Real> operator()(const TensorT<Real>& x, std::size_t grid_h, std::size_t grid_w, PassMode mode,
                             AttentionCapture<Real>* capture) const {
        auto h = norm1(x, mode);
        h = windowed() ? attn.windowed(h, grid_h, grid_w, mode, capture) : attn(h, mode, capture);
        auto y = add(x, h);
        auto m = fc1(norm2(y, mode), mode);
        if (relu_mlp) m = relu(m);
        return add(y, fc2(m, mode));
    }

    void visit(const std::string& prefix, const ParamVisitor<Real>& f) {
        norm1.visit(prefix + ".norm1", f);
        attn.visit(prefix + (windowed() ? ".wattn" : ".attn"), f);
        norm2.visit(prefix + ".norm2", f);
        fc1.visit(prefix + ".mlp.fc1", f);
        fc2.visit(prefix + ".mlp.fc2", f);
    }
};

/// Where a block sits in the token layout.
struct BlockGeometry {
    std::size_t stage = 0;
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    std::size_t dim = 0;
    bool has_cls = false;
    bool global = true;
};

/// Live tensors retained from one forward pass. After backward() their
/// gradients are available too; see make_trace().
template <class Real>
struct ForwardCapture {
    bool keep_window_maps = false;
    TensorT<Real> patches;                         // [batch x patches x (C p p)]
    std::optional<TensorT<Real>> cls_source;       // relevance mode only
    std::optional<TensorT<Real>> pos_source;       // relevance mode only
    std::vector<TensorT<Real>> block_inputs;       // [batch x n x d] per block
    std::vector<TensorT<Real>> block_outputs;
    std::vector<AttentionCapture<Real>> attention; // per block
    std::vector<BlockGeometry> geometry;
    TensorT<Real> logits;
};

/// ViT, BvT, Swin-style and Bwin classifiers sharing one parameter layout.
///
/// Parameter count, d = dim, n = tokens, P = C p^2, m = mlp_ratio d:
///   ViT block = 2(2d) + 4(d^2 + d) + (d m + m) + (m d + d), plus patch (P d + d),
///   cls d, pos n d, final norm 2d, head (d K + K).
///   BvT replaces every projection in -> out by 2 in out (two branches, no
///   bias) and every norm by its d scale parameters.
///   Windowed families add one 4d -> 2d merge projection between stages and
///   have no cls token.
template <class Real>
class TransformerModel {
   public:
    ModelConfig cfg;

    explicit TransformerModel(ModelConfig config, std::uint64_t seed = 0) : cfg(std::move(config)) {
        cfg.validate();
        Rng rng(derive_seed(seed, 0x6d6f64656cULL));
        const bool bcos = uses_bcos(cfg.family);
        const auto kind = bcos ? ProjectionKind::bcos : ProjectionKind::linear;
        const std::size_t patch_len = cfg.in_channels * cfg.patch_size * cfg.patch_size;
        patch_embed_ = Projection<Real>(patch_len, cfg.dim, kind, cfg.B, rng);
        const std::size_t tokens = cfg.num_patches() + (cfg.has_cls() ? 1 : 0);
        if (cfg.has_cls()) cls_token_ = init_normal({1, cfg.dim}, rng);
        pos_embed_ = init_normal({tokens, cfg.dim}, rng);

        if (!is_windowed(cfg.family)) {
            for (std::size_t i = 0; i < cfg.depth; ++i) {
                blocks_.emplace_back(cfg, cfg.dim, cfg.heads, std::nullopt, rng);
                geometry_.push_back({0, cfg.grid(), cfg.grid(), cfg.dim, true, true});
            }
        } else {
            std::size_t dim = cfg.dim, heads = cfg.heads, grid = cfg.grid();
            for (std::size_t s = 0; s < cfg.stage_depths.size(); ++s) {
                for (std::size_t j = 0; j < cfg.stage_depths[s]; ++j) {
                    const bool last = s + 1 == cfg.stage_depths.size() && j + 1 == cfg.stage_depths[s];
                    std::optional<WindowSpec> window;
                    if (!(last && cfg.modified_last_block)) {
                        const bool shifted = j % 2 == 1 && grid > cfg.window_size;
                        window = WindowSpec{cfg.window_size, shifted ? cfg.window_size / 2 : 0};
                    }
                    blocks_.emplace_back(cfg, dim, heads, window, rng);
                    geometry_.push_back({s, grid, grid, dim, false, !window.has_value()});
                }
                if (s + 1 < cfg.stage_depths.size()) {
                    merges_.emplace_back(4 * dim, 2 * dim, kind, cfg.B, rng);
                    dim *= 2, heads *= 2, grid /= 2;
                }
            }
        }
        const std::size_t final_dim = geometry_.back().dim;
        norm_ = LayerNorm<Real>(final_dim, !bcos);
        head_ = Projection<Real>(final_dim, cfg.num_classes, kind, cfg.B, rng);
    }

    const std::vector<Block<Real>>& blocks() const { return blocks_; }
    const std::vector<BlockGeometry>& geometry() const { return geometry_; }

    void visit_parameters(const ParamVisitor<Real>& f) {
        patch_embed_.visit("patch_embed", f);
        if (cfg.has_cls()) f("cls_token", cls_token_);
        f("pos_embed", pos_embed_);
        if (!is_windowed(cfg.family)) {
            for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].visit("blocks." + std::to_string(i), f);
        } else {
            std::size_t i = 0;
            for (std::size_t s = 0; s < cfg.stage_depths.size(); ++s) {
                for (std::size_t j = 0; j < cfg.stage_depths[s]; ++j, ++i) {
                    blocks_[i].visit("stages." + std::to_string(s) + ".blocks." + std::to_string(j), f);
                }
                if (s < merges_.size()) merges_[s].visit("stages." + std::to_string(s) + ".merge", f);
            }
        }
        norm_.visit("norm", f);
        head_.visit("head", f);
    }

    /// Named parameter handles in a fixed order. The tensors share storage
    /// with the model.
    std::vector<std::pair<std::string, TensorT<Real>>> named_parameters() const {
        std::vector<std::pair<std::string, TensorT<Real>>> out;
        const_cast<TransformerModel*>(this)->visit_parameters(
            [&](const std::string& n, TensorT<Real>& t) { out.emplace_back(n, t); });
        return out;
    }

    std::vector<TensorT<Real>> parameters() const {
        std::vector<TensorT<Real>> out;
        for (auto& [n, t] : named_parameters()) out.push_back(t);
        return out;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (auto& [name, t] : named_parameters()) n += t.numel();
        return n;
    }

    /// Applies the family's input encoding: six-channel complement for B-cos
    /// families when the image has three channels.
    TensorT<Real> prepare(const TensorT<Real>& images) const {
        if (cfg.in_channels == 6 && images.rank() == 4 && images.dim(1) == 3) return encode_six_channel(images);
        return images;
    }

    /// images: [batch x C x H x W] with C = in_channels -> logits [batch x K].
    TensorT<Real> forward(const TensorT<Real>& images, PassMode mode = PassMode::standard,
                          ForwardCapture<Real>* capture = nullptr) const {
        if (images.rank() != 4) throw DimensionError("forward: expected [batch x C x H x W], got " + shape_str(images.shape()));
        if (images.dim(1) != cfg.in_channels) {
            throw DimensionError("forward: model expects " + std::to_string(cfg.in_channels) + " channels, got " +
                                 std::to_string(images.dim(1)));
        }
        if (images.dim(2) != cfg.image_size || images.dim(3) != cfg.image_size) {
            throw DimensionError("forward: model expects " + std::to_string(cfg.image_size) + "x" +
                                 std::to_string(cfg.image_size) + " images, got " + shape_str(images.shape()));
        }
        return forward_patches(patchify(images, cfg.patch_size), mode, capture);
    }

    /// Forward from already patchified input [batch x patches x (C p p)]; the
    /// patch tensor may be a gradient leaf.
    TensorT<Real> forward_patches(const TensorT<Real>& patches, PassMode mode = PassMode::standard,
                                  ForwardCapture<Real>* capture = nullptr) const {
        const std::size_t patch_len = cfg.in_channels * cfg.patch_size * cfg.patch_size;
        if (patches.rank() != 3 || patches.dim(1) != cfg.num_patches() || patches.dim(2) != patch_len) {
            throw DimensionError("forward: expected patches [batch x " + std::to_string(cfg.num_patches()) + " x " +
                                 std::to_string(patch_len) + "], got " + shape_str(patches.shape()));
        }
        const std::size_t batch = patches.dim(0);
        const bool relevance = mode == PassMode::relevance;
        if (capture) {
            const bool keep = capture->keep_window_maps;
            *capture = ForwardCapture<Real>{};
            capture->keep_window_maps = keep;
            capture->patches = patches;
        }
        auto x = patch_embed_(patches, mode);
        auto pos = relevance ? pos_embed_.leaf_copy(true) : pos_embed_;
        if (cfg.has_cls()) {
            auto cls = relevance ? cls_token_.leaf_copy(true) : cls_token_;
            std::vector<TensorT<Real>> rows(batch, reshape(cls, {1, 1, cfg.dim}));
            x = concat<Real>({batch == 1 ? rows[0] : concat(rows, 0), x}, 1);
            if (capture && relevance) capture->cls_source = cls;
        }
        if (capture && relevance) capture->pos_source = pos;
        x = add(x, pos);

        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const auto& g = geometry_[i];
            if (i > 0 && g.stage != geometry_[i - 1].stage) x = merge(x, geometry_[i - 1], merges_[g.stage - 1], mode);
            AttentionCapture<Real> maps;
            const bool keep_maps = capture && (g.global || capture->keep_window_maps);
            auto y = blocks_[i](x, g.grid_h, g.grid_w, mode, keep_maps ? &maps : nullptr);
            if (capture) {
                capture->block_inputs.push_back(x);
                capture->block_outputs.push_back(y);
                capture->attention.push_back(std::move(maps));
                capture->geometry.push_back(g);
            }
            x = y;
        }
        x = norm_(x, mode);
        const std::size_t d = geometry_.back().dim;
        auto pooled = cfg.has_cls() ? reshape(slice(x, 1, 0, 1), {batch, d}) : mean(x, 1);
        auto logits = head_(pooled, mode);
        if (capture) capture->logits = logits;
        return logits;
    }

   private:
    Projection<Real> patch_embed_;
    TensorT<Real> cls_token_;
    TensorT<Real> pos_embed_;
    std::vector<Block<Real>> blocks_;
    std::vector<BlockGeometry> geometry_;
    std::vector<Projection<Real>> merges_;
    LayerNorm<Real> norm_;
    Projection<Real> head_;

    static TensorT<Real> init_normal(Shape shape, Rng& rng) {
        std::vector<Real> v(numel_of(shape));
        for (auto& x : v) x = static_cast<Real>(0.02 * rng.normal());
        return TensorT<Real>(std::move(shape), std::move(v), true);
    }

    // Concatenates each 2x2 neighbourhood (x0 = (2i, 2j), x1 = (2i+1, 2j),
    // x2 = (2i, 2j+1), x3 = (2i+1, 2j+1)) and projects 4d -> 2d.
    static TensorT<Real> merge(const TensorT<Real>& x, const BlockGeometry& g, const Projection<Real>& proj,
                               PassMode mode) {
        const std::size_t batch = x.dim(0), n = x.dim(1), d = x.dim(2);
        const std::size_t gh = g.grid_h / 2, gw = g.grid_w / 2;
        auto flat = reshape(x, {batch * n, d});
        std::vector<TensorT<Real>> parts;
        const std::pair<std::size_t, std::size_t> offsets[4] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
        for (auto [dr, dc] : offsets) {
            std::vector<std::size_t> idx;
            idx.reserve(batch * gh * gw);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < gh; ++i)
                    for (std::size_t j = 0; j < gw; ++j) idx.push_back(b * n + (2 * i + dr) * g.grid_w + 2 * j + dc);
            parts.push_back(gather_rows(flat, std::move(idx)));
        }
        auto y = proj(concat(parts, 1), mode);
        return reshape(y, {batch, gh * gw, 2 * d});
    }
};

using Model = TransformerModel<double>;

}  // namespace bvt
