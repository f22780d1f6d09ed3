#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "bvt/data.hpp"
#include "bvt/explain.hpp"
#include "bvt/model.hpp"
#include "bvt/training.hpp"

namespace bvt {

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
    if (!j.is_object()) throw ValidationError(where + ": expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw ValidationError(where + ": unknown key '" + it.key() + "'");
    }
}

}  // namespace detail

/// Where samples come from: a generated shape set or a folder with labels.csv.
struct DataConfig {
    enum class Source { synthetic, folder };
    Source source = Source::synthetic;
    std::vector<std::size_t> per_class{100, 100, 100};
    std::size_t image_size = 32;
    double val_fraction = 0.15;
    double test_fraction = 0.15;
    double background_noise = 0.12;
    std::optional<std::uint64_t> seed;  // run seed when unset
    std::filesystem::path root;
    std::filesystem::path labels;  // root / "labels.csv" when empty

    std::filesystem::path labels_path() const { return labels.empty() ? root / "labels.csv" : labels; }

    /// Three shape classes, then one more hue per extra class.
    SyntheticSpec synthetic_spec(std::uint64_t run_seed) const {
        SyntheticSpec s = SyntheticSpec::three_class(seed.value_or(run_seed), 0, image_size);
        s.classes.resize(per_class.size());
        for (std::size_t k = 0; k < per_class.size(); ++k) {
            if (k >= 3) s.classes[k] = {static_cast<ShapeKind>(k % 3), std::fmod(0.17 + 0.29 * static_cast<double>(k), 1.0), 0.1, 0};
            s.classes[k].count = per_class[k];
        }
        s.val_fraction = val_fraction;
        s.test_fraction = test_fraction;
        s.background_noise = background_noise;
        return s;
    }

    void validate() const {
        if (source == Source::folder) {
            if (!std::filesystem::is_directory(root)) throw ValidationError("data root does not exist: " + root.string());
            if (!std::filesystem::is_regular_file(labels_path())) {
                throw ValidationError("labels file does not exist: " + labels_path().string());
            }
            return;
        }
        if (per_class.size() < 2) throw ValidationError("data: per_class needs at least two classes");
        synthetic_spec(0).validate();
    }

    Dataset load(std::uint64_t run_seed) const {
        validate();
        if (source == Source::folder) return load_image_folder(root, labels_path());
        return generate_synthetic(synthetic_spec(run_seed));
    }
};

inline void to_json(nlohmann::json& j, const DataConfig& d) {
    if (d.source == DataConfig::Source::folder) {
        j = {{"source", "folder"}, {"root", d.root.string()}, {"labels", d.labels_path().string()}};
        return;
    }
    j = {{"source", "synthetic"},           {"per_class", d.per_class},         {"image_size", d.image_size},
         {"val_fraction", d.val_fraction}, {"test_fraction", d.test_fraction}, {"background_noise", d.background_noise}};
    j["seed"] = d.seed ? nlohmann::json(*d.seed) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, DataConfig& d) {
    const std::string source = j.value("source", "synthetic");
    if (source == "folder") {
        detail::reject_unknown_keys(j, {"source", "root", "labels"}, "data config");
        d.source = DataConfig::Source::folder;
        d.root = j.at("root").get<std::string>();
        if (j.contains("labels")) d.labels = j.at("labels").get<std::string>();
        return;
    }
    if (source != "synthetic") throw ValidationError("data config: unknown source '" + source + "' (expected synthetic or folder)");
    detail::reject_unknown_keys(j, {"source", "per_class", "image_size", "val_fraction", "test_fraction", "background_noise", "seed"},
                                "data config");
    d.source = DataConfig::Source::synthetic;
    if (j.contains("per_class")) {
        const auto& p = j.at("per_class");
        d.per_class = p.is_array() ? p.get<std::vector<std::size_t>>() : std::vector<std::size_t>(3, p.get<std::size_t>());
    }
    if (j.contains("image_size")) j.at("image_size").get_to(d.image_size);
    if (j.contains("val_fraction")) j.at("val_fraction").get_to(d.val_fraction);
    if (j.contains("test_fraction")) j.at("test_fraction").get_to(d.test_fraction);
    if (j.contains("background_noise")) j.at("background_noise").get_to(d.background_noise);
    if (j.contains("seed") && !j.at("seed").is_null()) d.seed = j.at("seed").get<std::uint64_t>();
}

struct ExplainConfig {
    std::vector<std::string> methods{"attn-last", "rollout"};
    std::optional<std::size_t> layer;  // grad-cam block; last block when unset
    double mass = 0.5;
    std::string interpolation = "nearest";
};

inline const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> m{"attn-last", "rollout", "grad-cam", "ta", "lrp", "lrp-second", "lrp-last"};
    return m;
}

inline void to_json(nlohmann::json& j, const ExplainConfig& e) {
    j = {{"methods", e.methods}, {"mass", e.mass}, {"interpolation", e.interpolation}};
    j["layer"] = e.layer ? nlohmann::json(*e.layer) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, ExplainConfig& e) {
    detail::reject_unknown_keys(j, {"methods", "layer", "mass", "interpolation"}, "explain config");
    if (j.contains("methods")) e.methods = j.at("methods").get<std::vector<std::string>>();
    if (j.contains("layer")) {
        if (j.at("layer").is_null()) e.layer.reset();
        else e.layer = j.at("layer").get<std::size_t>();
    }
    if (j.contains("mass")) j.at("mass").get_to(e.mass);
    if (j.contains("interpolation")) j.at("interpolation").get_to(e.interpolation);
}

struct RunConfig {
    std::uint64_t seed = 0;
    ModelConfig model = preset("micro", Family::vit);
    bool num_classes_set = false;  // otherwise taken from the data
    TrainConfig train;
    DataConfig data;
    std::filesystem::path out = "out";
    ExplainConfig explain;

    void validate() const {
        model.validate();
        train.validate(model.family);
        data.validate();
        if (data.source == DataConfig::Source::synthetic && data.image_size != model.image_size) {
            throw ValidationError("data image_size " + std::to_string(data.image_size) + " does not match model image_size " +
                                  std::to_string(model.image_size));
        }
        if (data.source == DataConfig::Source::synthetic && num_classes_set && data.per_class.size() != model.num_classes) {
            throw ValidationError("model num_classes " + std::to_string(model.num_classes) + " does not match the " +
                                  std::to_string(data.per_class.size()) + " data classes");
        }
        validate_explain();
    }

    void validate_explain() const {
        if (!(explain.mass > 0) || explain.mass > 1) throw ValidationError("explain mass must be in (0, 1]");
        for (const auto& m : explain.methods) {
            if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end()) {
                throw ValidationError("unknown explain method '" + m + "'");
            }
        }
        parse_interpolation(explain.interpolation);
    }

    /// Synthetic data fixes the class count; a folder fixes it once loaded.
    void adopt_classes(std::size_t k) {
        if (num_classes_set && model.num_classes != k) {
            throw ValidationError("model num_classes " + std::to_string(model.num_classes) + " does not match the " +
                                  std::to_string(k) + " data classes");
        }
        model.num_classes = k;
    }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"seed", c.seed}, {"model", c.model}, {"train", c.train}, {"data", c.data}, {"out", c.out.string()}, {"explain", c.explain}};
    j["train"].erase("seed");
}

/// Model section: an optional "preset" gives the starting point, the other
/// keys override it. in_channels follows the family unless given.
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("model config: expected a JSON object");
    const Family family = parse_family(j.value("family", "vit"));
    ModelConfig c;
    if (j.contains("preset")) {
        c = preset(j.at("preset").get<std::string>(), family);
    } else {
        c.family = family;
        c.in_channels = uses_bcos(family) ? 6 : 3;
        if (is_windowed(family)) c.depth = 0;
    }
    from_json(j, c);
    return c;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j, {"seed", "model", "train", "data", "out", "explain"}, "config");
    RunConfig c;
    try {
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("model")) {
            c.model = model_config_from_json(j.at("model"));
            c.num_classes_set = j.at("model").contains("num_classes");
        }
        if (j.contains("train")) {
            if (j.at("train").contains("seed")) throw ValidationError("train config: set the seed at the top level");
            c.train = j.at("train").get<TrainConfig>();
        }
        if (j.contains("data")) c.data = j.at("data").get<DataConfig>();
        if (j.contains("out")) c.out = j.at("out").get<std::string>();
        if (j.contains("explain")) c.explain = j.at("explain").get<ExplainConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
    c.train.seed = c.seed;
    if (c.data.source == DataConfig::Source::synthetic && !c.num_classes_set) c.model.num_classes = c.data.per_class.size();
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open config file " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace bvt
