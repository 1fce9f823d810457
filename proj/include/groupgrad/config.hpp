/**
 * Experiment configuration: a flat key = value file with JSON-typed values.
 *
 *   # comment
 *   scenario = "toy_unified"
 *   estimator = "gspo_seq"
 *   eta = 0.01
 *   w_grid = [0.5, 0.8, 1.2, 1.5]
 *
 * Unknown keys are rejected so typos fail loudly.  "G" and "K" are accepted
 * as aliases for group_size and steps.
 */
#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "groupgrad/transforms.hpp"

namespace groupgrad {

using json = nlohmann::ordered_json;

struct ExperimentConfig {
    std::string scenario;
    EstimatorSpec estimator;
    TransformSpec transform;
    bool use_dfpo = false;  // route the estimator through the transform pipeline
    AdvantageMode advantage_mode = AdvantageMode::mean;
    int group_size = 3;
    int t_max = 8;
    double eta = 0.01;
    int steps = 100;
    std::uint64_t seed = 0;
    std::string mode = "replay";  // replay | sample
    std::string reward_fn;        // empty: scenario default
    double reward_scale = 1.0;
    bool energy_raw_score = false;  // energy on raw score norms instead of weighted ones

    // scenario knobs: initial importance-ratio offsets for minimal_prefix,
    // and the ratio grid swept by clip_break
    double rho1 = 1.0, rho2 = 1.0;
    double lambda1 = 1.0, lambda2 = 1.0;
    std::vector<double> w_grid = {0.5, 0.7, 0.79, 0.8, 1.0, 1.2, 1.21, 1.5};

    std::string out;  // CSV path; the JSON summary lands next to it

    void validate() const {
        if (scenario != "toy_unified" && scenario != "minimal_prefix" && scenario != "clip_break")
            throw ConfigError("unknown scenario: " + scenario);
        if (!(eta > 0.0)) throw ConfigError("eta must be > 0");
        if (steps < 1) throw ConfigError("steps must be >= 1");
        if (group_size < 2) throw ConfigError("group_size must be >= 2");
        if (t_max < 1) throw ConfigError("t_max must be >= 1");
        if (mode != "replay" && mode != "sample") throw ConfigError("mode must be replay or sample");
        if (scenario == "minimal_prefix" && mode != "replay")
            throw ConfigError("minimal_prefix is a fixed algebraic construction; mode must be replay");
        if (scenario == "minimal_prefix" && group_size != 2)
            throw ConfigError("minimal_prefix replays a fixed pair; group_size must be 2");
        if (scenario == "toy_unified" && mode == "replay" && group_size != 3)
            throw ConfigError("toy_unified replays the three fixed trajectories; group_size must be 3");
        if (scenario == "clip_break") {
            if (group_size != 2) throw ConfigError("clip_break uses group_size 2");
            if (w_grid.empty()) throw ConfigError("clip_break needs a nonempty w_grid");
            for (double w : w_grid)
                if (!(w > 0.0)) throw ConfigError("w_grid entries must be > 0");
        }
        estimator.validate();
        transform.validate();
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline double as_number(const json& v, const std::string& key) {
    if (!v.is_number()) throw ConfigError("config key '" + key + "' must be a number");
    return v.get<double>();
}

inline int as_int(const json& v, const std::string& key) {
    if (!v.is_number_integer()) throw ConfigError("config key '" + key + "' must be an integer");
    return v.get<int>();
}

inline bool as_bool(const json& v, const std::string& key) {
    if (!v.is_boolean()) throw ConfigError("config key '" + key + "' must be a boolean");
    return v.get<bool>();
}

inline std::string as_string(const json& v, const std::string& key) {
    if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string");
    return v.get<std::string>();
}

}  // namespace detail

/// Applies one key/value override onto the config.  Shared by the file
/// parser and the sweep subcommand.
inline void apply_config_field(ExperimentConfig& cfg, std::string key, const json& value) {
    using detail::as_bool;
    using detail::as_int;
    using detail::as_number;
    using detail::as_string;

    if (key == "G") key = "group_size";
    if (key == "K") key = "steps";

    if (key == "scenario") cfg.scenario = as_string(value, key);
    else if (key == "estimator") cfg.estimator.family = estimator_family_from_string(as_string(value, key));
    else if (key == "clip_eps") cfg.estimator.clip_eps = as_number(value, key);
    else if (key == "length_norm") cfg.estimator.length_norm = as_bool(value, key);
    else if (key == "transform") cfg.transform.kind = transform_kind_from_string(as_string(value, key));
    else if (key == "floor_eps") cfg.transform.floor_eps = as_number(value, key);
    else if (key == "transform_on_postclip") cfg.transform.on_postclip = as_bool(value, key);
    else if (key == "use_dfpo") cfg.use_dfpo = as_bool(value, key);
    else if (key == "advantage_mode") cfg.advantage_mode = advantage_mode_from_string(as_string(value, key));
    else if (key == "group_size") cfg.group_size = as_int(value, key);
    else if (key == "t_max") cfg.t_max = as_int(value, key);
    else if (key == "eta") cfg.eta = as_number(value, key);
    else if (key == "steps") cfg.steps = as_int(value, key);
    else if (key == "seed") {
        if (!value.is_number_integer() && !value.is_number_unsigned())
            throw ConfigError("config key 'seed' must be an integer");
        cfg.seed = value.get<std::uint64_t>();
    }
    else if (key == "mode") cfg.mode = as_string(value, key);
    else if (key == "reward_fn") cfg.reward_fn = as_string(value, key);
    else if (key == "reward_scale") cfg.reward_scale = as_number(value, key);
    else if (key == "energy_raw_score") cfg.energy_raw_score = as_bool(value, key);
    else if (key == "rho1") cfg.rho1 = as_number(value, key);
    else if (key == "rho2") cfg.rho2 = as_number(value, key);
    else if (key == "lambda1") cfg.lambda1 = as_number(value, key);
    else if (key == "lambda2") cfg.lambda2 = as_number(value, key);
    else if (key == "w_grid") {
        if (!value.is_array()) throw ConfigError("config key 'w_grid' must be an array");
        cfg.w_grid.clear();
        for (const auto& v : value) cfg.w_grid.push_back(as_number(v, key));
    }
    else if (key == "out") cfg.out = as_string(value, key);
    else throw ConfigError("unknown config key: " + key);
}

inline ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(t.substr(0, eq));
        const std::string raw = detail::trim(t.substr(eq + 1));
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::parse_error&) {
            throw ConfigError("config line " + std::to_string(lineno) + ": value for '" + key +
                              "' is not a JSON literal: " + raw);
        }
        apply_config_field(cfg, key, value);
    }
    return cfg;
}

inline ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

/// Config echo for the JSON summary; field order is fixed.
inline json config_to_json(const ExperimentConfig& cfg) {
    json j;
    j["scenario"] = cfg.scenario;
    j["estimator"] = to_string(cfg.estimator.family);
    j["clip_eps"] = cfg.estimator.clip_eps;
    j["length_norm"] = cfg.estimator.length_norm;
    j["use_dfpo"] = cfg.use_dfpo;
    j["transform"] = to_string(cfg.transform.kind);
    j["floor_eps"] = cfg.transform.floor_eps;
    j["transform_on_postclip"] = cfg.transform.on_postclip;
    j["advantage_mode"] = to_string(cfg.advantage_mode);
    j["group_size"] = cfg.group_size;
    j["t_max"] = cfg.t_max;
    j["eta"] = cfg.eta;
    j["steps"] = cfg.steps;
    j["seed"] = cfg.seed;
    j["mode"] = cfg.mode;
    j["reward_fn"] = cfg.reward_fn;
    j["reward_scale"] = cfg.reward_scale;
    j["energy_raw_score"] = cfg.energy_raw_score;
    j["rho1"] = cfg.rho1;
    j["rho2"] = cfg.rho2;
    j["lambda1"] = cfg.lambda1;
    j["lambda2"] = cfg.lambda2;
    j["w_grid"] = cfg.w_grid;
    j["out"] = cfg.out;
    return j;
}

}  // namespace groupgrad
