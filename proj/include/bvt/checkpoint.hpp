#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <algorithm>
#include <string>
#include <vector>

#include "json.hpp"

#include "bvt/model.hpp"
#include "bvt/serialize.hpp"

// Checkpoint file: magic "BVTCKPT0", u64 little-endian header length, JSON
// header, then every parameter as little-endian f64 in header order.

namespace bvt {

inline constexpr std::array<char, 8> kCheckpointMagic = {'B', 'V', 'T', 'C', 'K', 'P', 'T', '0'};

struct Checkpoint {
    ModelConfig config;
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> names;
    std::vector<Shape> shapes;
    std::vector<std::vector<double>> values;

    std::size_t index_of(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return i;
        return names.size();
    }
};

template <class Real>
Checkpoint make_checkpoint(const TransformerModel<Real>& model, std::uint64_t step, std::uint64_t seed) {
    Checkpoint c;
    c.config = model.cfg;
    c.step = step;
    c.seed = seed;
    for (auto& [name, t] : model.named_parameters()) {
        c.names.push_back(name);
        c.shapes.push_back(t.shape());
        c.values.emplace_back(t.values().begin(), t.values().end());
    }
    return c;
}

inline void write_checkpoint(std::ostream& os, const Checkpoint& c) {
    nlohmann::json header;
    header["config"] = c.config;
    header["step"] = c.step;
    header["seed"] = c.seed;
    nlohmann::json tensors = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < c.names.size(); ++i) {
        tensors.push_back({{"name", c.names[i]}, {"shape", c.shapes[i]}, {"offset", offset}});
        offset += c.values[i].size() * sizeof(double);
    }
    header["tensors"] = tensors;
    const std::string text = header.dump();
    os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    io::put_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& v : c.values)
        for (double x : v) io::put_f64(os, x);
}

inline Checkpoint read_checkpoint(std::istream& is) {
    std::array<char, 8> magic{};
    io::read_exact(is, magic.data(), magic.size(), "checkpoint magic");
    if (magic != kCheckpointMagic) throw FormatError("not a checkpoint: bad magic bytes");
    const std::uint64_t len = io::get_u64(is);
    if (len > (std::uint64_t{1} << 30)) throw FormatError("implausible checkpoint header length");
    std::string text(len, '\0');
    io::read_exact(is, text.data(), len, "checkpoint header");
    Checkpoint c;
    try {
        auto header = nlohmann::json::parse(text);
        c.config = header.at("config").get<ModelConfig>();
        c.step = header.at("step").get<std::uint64_t>();
        c.seed = header.at("seed").get<std::uint64_t>();
        std::uint64_t expected = 0;
        for (const auto& t : header.at("tensors")) {
            c.names.push_back(t.at("name").get<std::string>());
            c.shapes.push_back(t.at("shape").get<Shape>());
            if (t.at("offset").get<std::uint64_t>() != expected) throw FormatError("checkpoint offsets are not contiguous");
            expected += numel_of(c.shapes.back()) * sizeof(double);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad checkpoint header: ") + e.what());
    }
    for (const auto& s : c.shapes) {
        std::vector<double> v(numel_of(s));
        for (auto& x : v) x = io::get_f64(is);
        c.values.push_back(std::move(v));
    }
    return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
    write_checkpoint(os, c);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    return read_checkpoint(is);
}

struct LoadReport {
    std::vector<std::string> matched;
    std::vector<std::string> missing;      // in the model, absent from the checkpoint
    std::vector<std::string> unexpected;   // in the checkpoint, absent from the model
    std::vector<std::string> reinitialized;  // shape differs; model keeps its own values
};

/// Copies matching tensors from `c` into `model`. Families must agree. With
/// `strict`, every name and shape must match exactly; otherwise shape
/// mismatches (a head with a different class count) keep the model's freshly
/// initialized values and are reported.
template <class Real>
LoadReport load_pretrained(TransformerModel<Real>& model, const Checkpoint& c, bool strict) {
    if (c.config.family != model.cfg.family) {
        throw ValidationError(std::string("checkpoint family ") + to_string(c.config.family) +
                              " does not match model family " + to_string(model.cfg.family));
    }
    LoadReport report;
    std::vector<bool> used(c.names.size(), false);
    auto params = model.named_parameters();
    for (auto& [name, t] : params) {
        const std::size_t i = c.index_of(name);
        if (i == c.names.size()) {
            report.missing.push_back(name);
            continue;
        }
        used[i] = true;
        if (c.shapes[i] != t.shape()) {
            if (strict) {
                throw DimensionError("checkpoint tensor " + name + " has shape " + shape_str(c.shapes[i]) +
                                     ", model expects " + shape_str(t.shape()));
            }
            report.reinitialized.push_back(name);
            continue;
        }
        report.matched.push_back(name);
    }
    for (std::size_t i = 0; i < c.names.size(); ++i)
        if (!used[i]) report.unexpected.push_back(c.names[i]);
    if (strict && (!report.missing.empty() || !report.unexpected.empty())) {
        throw ValidationError("checkpoint does not match the model: " + std::to_string(report.missing.size()) +
                              " missing, " + std::to_string(report.unexpected.size()) + " unexpected tensors");
    }
    for (auto& [name, t] : params) {
        if (std::find(report.matched.begin(), report.matched.end(), name) == report.matched.end()) continue;
        const auto& src = c.values[c.index_of(name)];
        auto dst = t.mutable_data();
        for (std::size_t k = 0; k < src.size(); ++k) dst[k] = static_cast<Real>(src[k]);
    }
    return report;
}

/// Rebuilds the model a checkpoint was saved from.
template <class Real = double>
TransformerModel<Real> model_from_checkpoint(const Checkpoint& c) {
    TransformerModel<Real> model(c.config, c.seed);
    load_pretrained(model, c, true);
    return model;
}

}  // namespace bvt
