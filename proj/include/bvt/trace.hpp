#pragma once

#include <filesystem>
#include <span>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "bvt/model.hpp"
#include "bvt/serialize.hpp"

namespace bvt {

/// Per-head attention maps of one layer for one image, values in row-major
/// [group x head x n x n] order. Global layers have a single group; windowed
/// layers have one group per window with n = window tokens.
struct AttentionRecord {
    std::size_t layer = 0;
    std::size_t heads = 0;
    std::size_t tokens = 0;
    std::size_t groups = 1;
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    bool has_cls = false;
    bool global = true;
    std::vector<double> attention;
    std::vector<double> grad;  // d(objective)/dA when a backward pass ran, else empty

    bool has_grad() const { return !grad.empty(); }
    std::size_t offset(std::size_t head, std::size_t i, std::size_t j, std::size_t group = 0) const {
        return ((group * heads + head) * tokens + i) * tokens + j;
    }
    double at(std::size_t head, std::size_t i, std::size_t j) const { return attention[offset(head, i, j)]; }
};

/// Token activations entering and leaving one block, [tokens x dim].
struct TokenRecord {
    std::size_t layer = 0;
    std::size_t tokens = 0;
    std::size_t dim = 0;
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    bool has_cls = false;
    std::vector<double> input, input_grad;
    std::vector<double> output, output_grad;
};

/// Detached snapshot of one image's forward pass (and gradients, if any).
struct ExecutionTrace {
    std::string family;
    std::size_t num_layers = 0;
    std::vector<AttentionRecord> attention;         // global layers, ordered by layer
    std::vector<AttentionRecord> window_attention;  // only when window maps were kept
    std::vector<TokenRecord> blocks;
};

namespace detail {

template <class Real>
std::vector<double> image_slice(std::span<const Real> all, std::size_t image, std::size_t per_image) {
    if (all.empty()) return {};
    return std::vector<double>(all.begin() + static_cast<std::ptrdiff_t>(image * per_image),
                               all.begin() + static_cast<std::ptrdiff_t>((image + 1) * per_image));
}

}  // namespace detail

/// Snapshot of image `image` from a capture. Call after backward() to
/// include gradients.
template <class Real>
ExecutionTrace make_trace(const ForwardCapture<Real>& cap, Family family, std::size_t image = 0) {
    ExecutionTrace t;
    t.family = to_string(family);
    t.num_layers = cap.block_inputs.size();
    for (std::size_t l = 0; l < t.num_layers; ++l) {
        const auto& g = cap.geometry[l];
        const auto& in = cap.block_inputs[l];
        const auto& out = cap.block_outputs[l];
        if (image >= in.dim(0)) throw DimensionError("make_trace: image index out of range");
        TokenRecord tr;
        tr.layer = l;
        tr.tokens = in.dim(1);
        tr.dim = in.dim(2);
        tr.grid_h = g.grid_h;
        tr.grid_w = g.grid_w;
        tr.has_cls = g.has_cls;
        const std::size_t per = tr.tokens * tr.dim;
        tr.input = detail::image_slice<Real>(in.values(), image, per);
        tr.output = detail::image_slice<Real>(out.values(), image, per);
        if (in.has_grad()) tr.input_grad = detail::image_slice<Real>(in.grad(), image, per);
        if (out.has_grad()) tr.output_grad = detail::image_slice<Real>(out.grad(), image, per);
        t.blocks.push_back(std::move(tr));

        const auto& maps = cap.attention[l].maps;
        if (maps.empty()) continue;
        AttentionRecord r;
        r.layer = l;
        r.heads = cap.attention[l].maps[image].size();
        r.tokens = maps[image].front().dim(0);
        r.grid_h = g.grid_h;
        r.grid_w = g.grid_w;
        r.has_cls = g.has_cls;
        r.global = g.global;
        bool any_grad = false;
        for (const auto& a : maps[image]) any_grad = any_grad || a.has_grad();
        for (const auto& a : maps[image]) {
            r.attention.insert(r.attention.end(), a.values().begin(), a.values().end());
            if (any_grad) {
                if (a.has_grad()) {
                    r.grad.insert(r.grad.end(), a.grad().begin(), a.grad().end());
                } else {
                    r.grad.insert(r.grad.end(), a.numel(), 0.0);
                }
            }
        }
        if (!g.global) {
            r.groups = (g.grid_h * g.grid_w) / r.tokens;
            r.heads /= r.groups;
            t.window_attention.push_back(std::move(r));
        } else {
            t.attention.push_back(std::move(r));
        }
    }
    return t;
}

/// Writes every array of the trace as a tensor file plus `index.json`
/// describing them.
inline void dump_trace(const ExecutionTrace& t, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json index;
    index["family"] = t.family;
    index["num_layers"] = t.num_layers;
    auto write = [&](const std::string& name, const std::vector<double>& v, Shape shape) {
        std::ofstream os(dir / name, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + (dir / name).string());
        write_tensor(os, Tensor(std::move(shape), v));
        return name;
    };
    auto attention_entries = [&](const std::vector<AttentionRecord>& recs, const std::string& tag) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& r : recs) {
            const std::string stem = tag + "_" + std::to_string(r.layer);
            const Shape shape{r.groups, r.heads, r.tokens, r.tokens};
            nlohmann::json e{{"layer", r.layer},   {"heads", r.heads},   {"tokens", r.tokens},
                             {"groups", r.groups}, {"grid_h", r.grid_h}, {"grid_w", r.grid_w},
                             {"has_cls", r.has_cls}, {"global", r.global}};
            e["attention"] = write(stem + ".bin", r.attention, shape);
            if (r.has_grad()) e["grad"] = write(stem + "_grad.bin", r.grad, shape);
            arr.push_back(e);
        }
        return arr;
    };
    index["attention"] = attention_entries(t.attention, "attention");
    index["window_attention"] = attention_entries(t.window_attention, "window_attention");
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : t.blocks) {
        const std::string stem = "block_" + std::to_string(b.layer);
        const Shape shape{b.tokens, b.dim};
        nlohmann::json e{{"layer", b.layer},   {"tokens", b.tokens}, {"dim", b.dim},
                         {"grid_h", b.grid_h}, {"grid_w", b.grid_w}, {"has_cls", b.has_cls}};
        e["input"] = write(stem + "_input.bin", b.input, shape);
        e["output"] = write(stem + "_output.bin", b.output, shape);
        if (!b.input_grad.empty()) e["input_grad"] = write(stem + "_input_grad.bin", b.input_grad, shape);
        if (!b.output_grad.empty()) e["output_grad"] = write(stem + "_output_grad.bin", b.output_grad, shape);
        blocks.push_back(e);
    }
    index["blocks"] = blocks;
    std::ofstream os(dir / "index.json");
    os << index.dump(2) << "\n";
}

inline ExecutionTrace load_trace(const std::filesystem::path& dir) {
    std::ifstream is(dir / "index.json");
    if (!is) throw FormatError("missing trace index in " + dir.string());
    nlohmann::json index;
    try {
        index = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad trace index: ") + e.what());
    }
    auto read = [&](const nlohmann::json& e, const char* key) -> std::vector<double> {
        if (!e.contains(key)) return {};
        std::ifstream ts(dir / e.at(key).get<std::string>(), std::ios::binary);
        if (!ts) throw FormatError("missing trace tensor " + e.at(key).get<std::string>());
        return read_tensor<double>(ts).values();
    };
    ExecutionTrace t;
    t.family = index.at("family").get<std::string>();
    t.num_layers = index.at("num_layers").get<std::size_t>();
    auto attention_entries = [&](const nlohmann::json& arr) {
        std::vector<AttentionRecord> out;
        for (const auto& e : arr) {
            AttentionRecord r;
            r.layer = e.at("layer");
            r.heads = e.at("heads");
            r.tokens = e.at("tokens");
            r.groups = e.at("groups");
            r.grid_h = e.at("grid_h");
            r.grid_w = e.at("grid_w");
            r.has_cls = e.at("has_cls");
            r.global = e.at("global");
            r.attention = read(e, "attention");
            r.grad = read(e, "grad");
            out.push_back(std::move(r));
        }
        return out;
    };
    t.attention = attention_entries(index.at("attention"));
    t.window_attention = attention_entries(index.at("window_attention"));
    for (const auto& e : index.at("blocks")) {
        TokenRecord b;
        b.layer = e.at("layer");
        b.tokens = e.at("tokens");
        b.dim = e.at("dim");
        b.grid_h = e.at("grid_h");
        b.grid_w = e.at("grid_w");
        b.has_cls = e.at("has_cls");
        b.input = read(e, "input");
        b.output = read(e, "output");
        b.input_grad = read(e, "input_grad");
        b.output_grad = read(e, "output_grad");
        t.blocks.push_back(std::move(b));
    }
    return t;
}

}  // namespace bvt
