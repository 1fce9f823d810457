/**
 * Command-line front end.
 *
 *   groupgrad run --config toy.cfg [--seed N] [--out path.csv]
 *   groupgrad verify
 *   groupgrad sweep --config toy.cfg --field group_size --values 2,4,8,16
 *   groupgrad list-scenarios
 *
 * Exit codes: 0 success, 1 failed verification, 2 config/parse error.
 */
#pragma once

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "groupgrad/verify.hpp"

namespace groupgrad {

namespace cli_detail {

inline std::string default_out(const ExperimentConfig& cfg) {
    return cfg.out.empty() ? cfg.scenario + ".csv" : cfg.out;
}

inline void execute_run(const ExperimentConfig& cfg, const std::string& out) {
    const RunRecord rec = run_scenario(cfg);
    write_csv(rec, out);
    write_summary(rec, cfg, out);
    std::cout << "wrote " << out << " and " << summary_path_for(out) << " (" << rec.rows.size()
              << " rows, " << rec.budget_tokens << " tokens)\n";
}

inline std::vector<std::string> split_csv_list(const std::string& values) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : values) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

/// Sweep values are JSON literals when they parse as such, plain strings
/// otherwise (so --values grpo_token,gspo_seq works unquoted).
inline json parse_sweep_value(const std::string& raw) {
    try {
        return json::parse(raw);
    } catch (const json::parse_error&) {
        return json(raw);
    }
}

inline std::string sweep_out_path(const std::string& base, const std::string& field,
                                  const std::string& value) {
    std::string stem = base;
    if (stem.size() >= 4 && stem.compare(stem.size() - 4, 4, ".csv") == 0)
        stem = stem.substr(0, stem.size() - 4);
    return stem + "_" + field + "=" + value + ".csv";
}

}  // namespace cli_detail

inline int cli_main(int argc, const char* const* argv) {
    CLI::App app{"desk-scale laboratory for group-relative policy-gradient estimators"};
    app.require_subcommand(1);

    std::string config_path, out_override, field, values;
    std::optional<std::uint64_t> seed_override;

    auto* run = app.add_subcommand("run", "execute one experiment config");
    run->add_option("--config", config_path, "config file")->required();
    run->add_option("--seed", seed_override, "override the config seed");
    run->add_option("--out", out_override, "override the CSV output path");

    auto* verify_cmd = app.add_subcommand("verify", "run the invariant suite");

    auto* sweep = app.add_subcommand("sweep", "vary one config field over a list of values");
    sweep->add_option("--config", config_path, "base config file")->required();
    sweep->add_option("--field", field, "config key to vary")->required();
    sweep->add_option("--values", values, "comma-separated values")->required();
    sweep->add_option("--out", out_override, "base CSV output path");
    sweep->add_option("--seed", seed_override, "override the config seed");

    auto* list = app.add_subcommand("list-scenarios", "list registered scenarios");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;  // bad usage is a config error
    }

    try {
        if (run->parsed()) {
            ExperimentConfig cfg = parse_config_file(config_path);
            if (seed_override) cfg.seed = *seed_override;
            if (!out_override.empty()) cfg.out = out_override;
            cfg.validate();
            cli_detail::execute_run(cfg, cli_detail::default_out(cfg));
            return 0;
        }
        if (verify_cmd->parsed()) {
            const auto checks = verify::run_all();
            bool all = true;
            for (const auto& c : checks) {
                std::cout << (c.pass ? "[PASS] " : "[FAIL] ") << c.name;
                if (!c.detail.empty()) std::cout << "  (" << c.detail << ")";
                std::cout << "\n";
                all = all && c.pass;
            }
            std::cout << (all ? "verification OK\n" : "verification FAILED\n");
            return all ? 0 : 1;
        }
        if (sweep->parsed()) {
            const ExperimentConfig base = parse_config_file(config_path);
            const std::string base_out = out_override.empty()
                                             ? cli_detail::default_out(base)
                                             : out_override;
            for (const std::string& raw : cli_detail::split_csv_list(values)) {
                ExperimentConfig cfg = base;
                if (seed_override) cfg.seed = *seed_override;
                apply_config_field(cfg, field, cli_detail::parse_sweep_value(raw));
                cfg.validate();
                cli_detail::execute_run(cfg, cli_detail::sweep_out_path(base_out, field, raw));
            }
            return 0;
        }
        if (list->parsed()) {
            for (const auto& sc : list_scenarios())
                std::cout << sc.name << "  -  " << sc.description << "\n";
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace groupgrad
