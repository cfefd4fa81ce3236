#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "futh/coop.hpp"
#include "futh/model.hpp"

namespace futh {

/// Everything a CLI run needs. Defaults follow the reference training recipe
/// (352 px inputs, lr 7e-5, lambda 1, 200 epochs); toy configs override them.
struct RunConfig {
    ModelConfig model;
    AdamConfig adam;
    double lambda = 1.0;
    std::size_t epochs = 200;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    std::string data_dir;
    std::string out_dir = "out";
    std::size_t synth_count = 8;
    std::size_t checkpoint_every = 1;
    // Stop once the epoch objective has not improved by min_delta for this
    // many epochs; 0 keeps the fixed epoch budget.
    std::size_t early_stop_patience = 0;
    double early_stop_min_delta = 1e-4;

    void validate() const {
        model.validate();
        if (model.image_size % model.encoder.patch_size != 0) {
            throw ConfigError("patch_size must divide image_size");
        }
        if (!(lambda > 0)) throw ConfigError("lambda must be > 0");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(adam.lr > 0)) throw ConfigError("lr must be > 0");
        if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
        if (!(early_stop_min_delta >= 0)) throw ConfigError("early_stop_min_delta must be >= 0");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename V>
V parse_number(const std::string& key, const std::string& text) {
    std::istringstream in(text);
    V v{};
    in >> v;
    if (!in || !in.eof()) {
        // allow trailing whitespace only
        std::string rest;
        if (in.fail() || (in >> rest, !rest.empty())) throw ConfigError("bad value for '" + key + "': " + text);
    }
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "1" || text == "true" || text == "on" || text == "yes") return true;
    if (text == "0" || text == "false" || text == "off" || text == "no") return false;
    throw ConfigError("bad boolean for '" + key + "': " + text);
}

}  // namespace detail

/// Applies one `key = value` setting. Unknown keys are rejected.
inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
    using detail::parse_bool;
    using detail::parse_number;
    using Setter = std::function<void(const std::string&)>;
    const std::map<std::string, Setter> setters{
        {"image_size", [&](const std::string& v) { cfg.model.image_size = parse_number<std::size_t>(key, v); }},
        {"patch_size", [&](const std::string& v) { cfg.model.encoder.patch_size = parse_number<std::size_t>(key, v); }},
        {"depth", [&](const std::string& v) { cfg.model.encoder.depth = parse_number<std::size_t>(key, v); }},
        {"d_model", [&](const std::string& v) { cfg.model.encoder.d_model = parse_number<std::size_t>(key, v); }},
        {"heads", [&](const std::string& v) { cfg.model.encoder.heads = parse_number<std::size_t>(key, v); }},
        {"mlp_ratio", [&](const std::string& v) { cfg.model.encoder.mlp_ratio = parse_number<double>(key, v); }},
        {"stem_channels", [&](const std::string& v) { cfg.model.cnn.stem_channels = parse_number<std::size_t>(key, v); }},
        {"c4", [&](const std::string& v) { cfg.model.cnn.c4 = cfg.model.fusion.channels[2] = parse_number<std::size_t>(key, v); }},
        {"c8", [&](const std::string& v) { cfg.model.cnn.c8 = cfg.model.fusion.channels[1] = parse_number<std::size_t>(key, v); }},
        {"c16", [&](const std::string& v) { cfg.model.cnn.c16 = cfg.model.fusion.channels[0] = parse_number<std::size_t>(key, v); }},
        {"units_per_stage", [&](const std::string& v) { cfg.model.cnn.units_per_stage = parse_number<std::size_t>(key, v); }},
        {"head_channels", [&](const std::string& v) { cfg.model.cnn.head_channels = parse_number<std::size_t>(key, v); }},
        {"cbam_reduction", [&](const std::string& v) { cfg.model.fusion.cbam_reduction = parse_number<std::size_t>(key, v); }},
        {"glff", [&](const std::string& v) { cfg.model.fusion.glff_on = parse_bool(key, v); }},
        {"dfm", [&](const std::string& v) { cfg.model.fusion.dfm_on = parse_bool(key, v); }},
        {"head_upsample", [&](const std::string& v) { cfg.model.head_upsample = parse_head_upsample(v); }},
        {"lr", [&](const std::string& v) { cfg.adam.lr = parse_number<double>(key, v); }},
        {"beta1", [&](const std::string& v) { cfg.adam.beta1 = parse_number<double>(key, v); }},
        {"beta2", [&](const std::string& v) { cfg.adam.beta2 = parse_number<double>(key, v); }},
        {"adam_eps", [&](const std::string& v) { cfg.adam.eps = parse_number<double>(key, v); }},
        {"lambda", [&](const std::string& v) { cfg.lambda = parse_number<double>(key, v); }},
        {"epochs", [&](const std::string& v) { cfg.epochs = parse_number<std::size_t>(key, v); }},
        {"batch_size", [&](const std::string& v) { cfg.batch_size = parse_number<std::size_t>(key, v); }},
        {"seed", [&](const std::string& v) { cfg.seed = cfg.model.seed = parse_number<std::uint64_t>(key, v); }},
        {"data_dir", [&](const std::string& v) { cfg.data_dir = v; }},
        {"out_dir", [&](const std::string& v) { cfg.out_dir = v; }},
        {"synth_count", [&](const std::string& v) { cfg.synth_count = parse_number<std::size_t>(key, v); }},
        {"checkpoint_every", [&](const std::string& v) { cfg.checkpoint_every = parse_number<std::size_t>(key, v); }},
        {"early_stop_patience", [&](const std::string& v) { cfg.early_stop_patience = parse_number<std::size_t>(key, v); }},
        {"early_stop_min_delta", [&](const std::string& v) { cfg.early_stop_min_delta = parse_number<double>(key, v); }},
    };
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(value);
}

/// Parses flat `key = value` text; '#' starts a comment.
inline void parse_config(RunConfig& cfg, std::istream& in) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        apply_setting(cfg, key, value);
    }
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    RunConfig cfg;
    parse_config(cfg, in);
    return cfg;
}

}  // namespace futh
