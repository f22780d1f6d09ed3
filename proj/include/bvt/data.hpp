#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bvt/image_io.hpp"
#include "bvt/model.hpp"
#include "bvt/random.hpp"

namespace bvt {

enum class Split { train, val, test };

inline const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

inline std::optional<Split> parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    return std::nullopt;
}

enum class ShapeKind { disc, ring, wedge };

inline const char* to_string(ShapeKind k) {
    switch (k) {
        case ShapeKind::disc: return "disc";
        case ShapeKind::ring: return "ring";
        case ShapeKind::wedge: return "wedge";
    }
    return "?";
}

inline ShapeKind parse_shape(const std::string& s) {
    if (s == "disc") return ShapeKind::disc;
    if (s == "ring") return ShapeKind::ring;
    if (s == "wedge") return ShapeKind::wedge;
    throw ValidationError("unknown shape kind '" + s + "' (expected disc, ring or wedge)");
}

/// Placement of one rendered shape, in pixel units.
struct ShapeGeometry {
    ShapeKind kind = ShapeKind::disc;
    double cx = 0, cy = 0;
    double radius = 0;
    double inner_radius = 0;  // ring only
    double start_angle = 0;   // wedge only: covered angles [start, start + span)
    double span = 0;

    /// Whether the point (x, y) lies on the shape. Pixels are sampled at their centres.
    bool contains(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        const double d2 = dx * dx + dy * dy;
        if (d2 > radius * radius) return false;
        if (kind == ShapeKind::ring) return d2 >= inner_radius * inner_radius;
        if (kind == ShapeKind::wedge) {
            double a = std::atan2(dy, dx) - start_angle;
            a = std::fmod(a, 2 * std::numbers::pi);
            if (a < 0) a += 2 * std::numbers::pi;
            return a < span;
        }
        return true;
    }
};

struct Sample {
    std::string id;
    std::string path;  // empty for generated samples
    Image image;
    int label = 0;
    Split split = Split::train;
    GrayImage mask;  // 255 on the object, empty when unknown
    std::optional<ShapeGeometry> geometry;
};

struct Dataset {
    std::vector<Sample> samples;
    std::vector<std::string> class_names;
    std::vector<std::string> errors;  // malformed input rows, one message each

    std::size_t num_classes() const { return class_names.size(); }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(num_classes(), 0);
        for (const auto& s : samples) counts[static_cast<std::size_t>(s.label)]++;
        return counts;
    }

    /// Largest over smallest class count; infinite when a class has no samples.
    double imbalance_ratio() const {
        auto counts = class_counts();
        if (counts.empty()) return std::numeric_limits<double>::infinity();
        const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
        if (*lo == 0) return std::numeric_limits<double>::infinity();
        return static_cast<double>(*hi) / static_cast<double>(*lo);
    }

    std::vector<std::size_t> indices(Split split) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (samples[i].split == split) out.push_back(i);
        return out;
    }

    /// Throws unless labels are in range and every class has training samples.
    void validate() const {
        if (num_classes() == 0) throw ValidationError("dataset has zero classes");
        std::vector<bool> in_train(num_classes(), false);
        for (const auto& s : samples) {
            if (s.label < 0 || static_cast<std::size_t>(s.label) >= num_classes()) {
                throw ValidationError("sample " + s.id + " has label " + std::to_string(s.label) + " outside [0, " +
                                      std::to_string(num_classes()) + ")");
            }
            if (s.split == Split::train) in_train[static_cast<std::size_t>(s.label)] = true;
        }
        for (std::size_t k = 0; k < in_train.size(); ++k) {
            if (!in_train[k]) throw ValidationError("class " + class_names[k] + " has no training samples");
        }
    }
};

/// Split of a sample as a pure function of (seed, sample id).
inline Split assign_split(std::uint64_t seed, std::uint64_t id, double val_fraction, double test_fraction) {
    Rng rng(derive_seed(seed ^ 0x73706c6974ULL, id));
    const double u = rng.uniform();
    if (u < test_fraction) return Split::test;
    if (u < test_fraction + val_fraction) return Split::val;
    return Split::train;
}

// ---------------------------------------------------------------------------
// synthetic shapes

struct ClassSpec {
    ShapeKind shape = ShapeKind::disc;
    double hue = 0.0;    // [0, 1)
    double noise = 0.1;  // texture amplitude on the shape
    std::size_t count = 100;
};

struct SyntheticSpec {
    std::uint64_t seed = 0;
    std::size_t image_size = 32;
    std::vector<ClassSpec> classes;
    double val_fraction = 0.15;
    double test_fraction = 0.15;
    double background_noise = 0.12;

    /// Red discs, green rings, blue wedges with `per_class` samples each.
    static SyntheticSpec three_class(std::uint64_t seed, std::size_t per_class, std::size_t image_size = 32) {
        SyntheticSpec s;
        s.seed = seed;
        s.image_size = image_size;
        s.classes = {{ShapeKind::disc, 0.00, 0.1, per_class},
                     {ShapeKind::ring, 0.33, 0.1, per_class},
                     {ShapeKind::wedge, 0.62, 0.1, per_class}};
        return s;
    }

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& c : classes) n += c.count;
        return n;
    }

    void validate() const {
        if (classes.empty()) throw ValidationError("synthetic spec: no classes");
        if (image_size < 8) throw ValidationError("synthetic spec: image_size must be at least 8");
        if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction > 1) {
            throw ValidationError("synthetic spec: split fractions must be non-negative and sum to at most 1");
        }
    }
};

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
    h = h - std::floor(h);
    const double x = h * 6.0;
    const int sector = static_cast<int>(x) % 6;
    const double f = x - std::floor(x);
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    const double table[6][3] = {{v, t, p}, {q, v, p}, {p, v, t}, {p, q, v}, {t, p, v}, {v, p, q}};
    for (int c = 0; c < 3; ++c) rgb[c] = table[sector][c];
}

inline double quantized(double v) { return quantize(v) / 255.0; }

}  // namespace detail

/// Renders sample `index`: a saturated class-coloured shape on a grey,
/// low-saturation textured background. Pure function of (spec, index).
inline Sample render_synthetic(const SyntheticSpec& spec, std::size_t index) {
    std::size_t label = 0, offset = index;
    while (label < spec.classes.size() && offset >= spec.classes[label].count) offset -= spec.classes[label++].count;
    if (label == spec.classes.size()) throw ValidationError("synthetic index " + std::to_string(index) + " out of range");
    const auto& cls = spec.classes[label];
    Rng rng(derive_seed(spec.seed, index));
    const double n = static_cast<double>(spec.image_size);

    ShapeGeometry g;
    g.kind = cls.shape;
    g.radius = n * rng.uniform(0.22, 0.34);
    g.cx = rng.uniform(g.radius + 1, n - g.radius - 1);
    g.cy = rng.uniform(g.radius + 1, n - g.radius - 1);
    g.inner_radius = 0.5 * g.radius;
    g.start_angle = rng.uniform(0, 2 * std::numbers::pi);
    g.span = 1.5 * std::numbers::pi;

    double shape_rgb[3];
    detail::hsv_to_rgb(cls.hue + rng.uniform(-0.03, 0.03), rng.uniform(0.75, 0.95), rng.uniform(0.7, 0.9), shape_rgb);
    const double base = rng.uniform(0.4, 0.6);
    double tint[3];
    for (auto& t : tint) t = rng.uniform(-0.03, 0.03);

    Sample s;
    s.id = "syn" + std::to_string(index);
    s.label = static_cast<int>(label);
    s.split = assign_split(spec.seed, index, spec.val_fraction, spec.test_fraction);
    s.geometry = g;
    s.image = Image{3, spec.image_size, spec.image_size, std::vector<double>(3 * spec.image_size * spec.image_size)};
    s.mask = GrayImage{spec.image_size, spec.image_size, std::vector<std::uint8_t>(spec.image_size * spec.image_size)};
    for (std::size_t y = 0; y < spec.image_size; ++y) {
        for (std::size_t x = 0; x < spec.image_size; ++x) {
            const bool on = g.contains(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
            s.mask.pixels[y * spec.image_size + x] = on ? 255 : 0;
            const double grain = spec.background_noise * (rng.uniform() - 0.5);
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = on ? shape_rgb[c] + cls.noise * (rng.uniform() - 0.5)
                                    : base + tint[c] + grain + 0.02 * (rng.uniform() - 0.5);
                s.image.at(c, y, x) = detail::quantized(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return s;
}

inline Dataset generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    Dataset ds;
    for (const auto& c : spec.classes) ds.class_names.push_back(std::string(to_string(c.shape)) + "_" + std::to_string(ds.class_names.size()));
    for (std::size_t i = 0; i < spec.total(); ++i) ds.samples.push_back(render_synthetic(spec, i));
    return ds;
}

// ---------------------------------------------------------------------------
// folders of PPM files

namespace detail {

inline std::string trim(std::string s) {
    auto ws = [](unsigned char c) { return std::isspace(c); };
    while (!s.empty() && ws(static_cast<unsigned char>(s.back()))) s.pop_back();
    std::size_t i = 0;
    while (i < s.size() && ws(static_cast<unsigned char>(s[i]))) ++i;
    return s.substr(i);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(trim(field));
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline std::filesystem::path mask_path_for(const std::filesystem::path& image) {
    auto p = image;
    p.replace_extension(".mask.pgm");
    return p;
}

}  // namespace detail

/// Reads `labels_csv` (columns path,label,split; optional header) with image
/// paths relative to `root`. Malformed rows are collected in `errors`; a
/// sibling "<name>.mask.pgm" is loaded as the object mask when present.
inline Dataset load_image_folder(const std::filesystem::path& root, const std::filesystem::path& labels_csv) {
    std::ifstream is(labels_csv);
    if (!is) throw std::runtime_error("cannot open labels file " + labels_csv.string());
    Dataset ds;
    std::string line;
    std::size_t line_no = 0;
    int max_label = -1;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (detail::trim(line).empty()) continue;
        auto fields = detail::split_csv_line(line);
        if (line_no == 1 && fields.size() >= 2 && fields[0] == "path" && fields[1] == "label") continue;
        auto fail = [&](const std::string& why) {
            ds.errors.push_back(labels_csv.filename().string() + ":" + std::to_string(line_no) + ": " + why);
        };
        if (fields.size() != 3) {
            fail("expected 3 columns (path,label,split), got " + std::to_string(fields.size()));
            continue;
        }
        int label = 0;
        try {
            std::size_t used = 0;
            label = std::stoi(fields[1], &used);
            if (used != fields[1].size() || label < 0) throw std::invalid_argument("label");
        } catch (const std::exception&) {
            fail("label '" + fields[1] + "' is not a non-negative integer");
            continue;
        }
        auto split = parse_split(fields[2]);
        if (!split) {
            fail("split '" + fields[2] + "' is not train, val or test");
            continue;
        }
        const auto path = root / fields[0];
        Sample s;
        try {
            s.image = load_ppm(path);
        } catch (const FormatError& e) {
            fail(fields[0] + ": " + e.what());
            continue;
        } catch (const std::exception&) {
            fail(fields[0] + ": missing or unreadable file");
            continue;
        }
        const auto mask = detail::mask_path_for(path);
        if (std::filesystem::exists(mask)) {
            try {
                s.mask = load_pgm(mask);
            } catch (const std::exception& e) {
                fail(mask.filename().string() + ": " + e.what());
            }
        }
        s.id = std::filesystem::path(fields[0]).stem().string();
        s.path = fields[0];
        s.label = label;
        s.split = *split;
        max_label = std::max(max_label, label);
        ds.samples.push_back(std::move(s));
    }
    for (int k = 0; k <= max_label; ++k) ds.class_names.push_back("class_" + std::to_string(k));
    if (ds.num_classes() == 0) {
        std::string msg = "dataset " + labels_csv.string() + " has zero classes";
        if (!ds.errors.empty()) msg += " (" + std::to_string(ds.errors.size()) + " malformed rows, first: " + ds.errors[0] + ")";
        throw ValidationError(msg);
    }
    return ds;
}

/// Writes images as PPM, masks as ".mask.pgm" and a labels.csv under `dir`.
inline void write_image_folder(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "images");
    std::ofstream csv(dir / "labels.csv");
    csv << "path,label,split\n";
    for (const auto& s : ds.samples) {
        const std::string rel = "images/" + s.id + ".ppm";
        save_ppm(dir / rel, s.image);
        if (!s.mask.pixels.empty()) save_pgm(detail::mask_path_for(dir / rel), s.mask);
        csv << rel << "," << s.label << "," << to_string(s.split) << "\n";
    }
}

// ---------------------------------------------------------------------------
// batching

struct ChannelNormalization {
    double mean[3] = {0.5, 0.5, 0.5};
    double std[3] = {0.25, 0.25, 0.25};
};

struct Batch {
    Tensor images;  // [batch x C x H x W]
    std::vector<int> labels;
};

/// Stacks the given samples for a model family: six channels
/// [r, g, b, 1-r, 1-g, 1-b] for B-cos families (never normalized, the
/// complement structure must survive), three channels otherwise with optional
/// per-channel normalization.
inline Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices, Family family,
                        const std::optional<ChannelNormalization>& norm = std::nullopt) {
    if (indices.empty()) throw ValidationError("make_batch: no samples");
    const auto& first = ds.samples.at(indices[0]).image;
    const std::size_t h = first.height, w = first.width, plane = h * w;
    std::vector<double> rgb(indices.size() * 3 * plane);
    Batch b;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& s = ds.samples.at(indices[i]);
        if (s.image.height != h || s.image.width != w || s.image.channels != 3) {
            throw DimensionError("make_batch: sample " + s.id + " does not match the batch image size");
        }
        std::copy(s.image.pixels.begin(), s.image.pixels.end(), rgb.begin() + static_cast<std::ptrdiff_t>(i * 3 * plane));
        b.labels.push_back(s.label);
    }
    Tensor images({indices.size(), 3, h, w}, std::move(rgb));
    if (uses_bcos(family)) {
        b.images = encode_six_channel(images);
        return b;
    }
    if (norm) {
        auto v = images.values();
        for (std::size_t i = 0; i < indices.size(); ++i)
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t p = 0; p < plane; ++p) {
                    auto& x = v[(i * 3 + c) * plane + p];
                    x = (x - norm->mean[c]) / norm->std[c];
                }
        images = Tensor(images.shape(), std::move(v));
    }
    b.images = images;
    return b;
}

}  // namespace bvt
