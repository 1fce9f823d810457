/**
 * Run records and their serialized forms: an RFC-4180 CSV with one row per
 * step, and a JSON summary with the config echo and final metrics.
 *
 * Doubles are printed with %.17g so identical runs produce byte-identical
 * files.
 */
#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "groupgrad/config.hpp"
#include "groupgrad/diagnostics.hpp"
#include "groupgrad/version.hpp"

namespace groupgrad {

struct RunRecord {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
    long long budget_tokens = 0;  // total tokens consumed (sampled or replayed)
    int degenerate_groups = 0;

    double at(std::size_t row, const std::string& column) const {
        for (std::size_t c = 0; c < columns.size(); ++c)
            if (columns[c] == column) return rows.at(row).at(c);
        throw std::invalid_argument("no such column: " + column);
    }

    std::vector<double> series(const std::string& column) const {
        std::vector<double> out;
        out.reserve(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) out.push_back(at(r, column));
        return out;
    }

    bool has_column(const std::string& column) const {
        for (const auto& c : columns)
            if (c == column) return true;
        return false;
    }

    void validate(int expected_rows) const {
        if (static_cast<int>(rows.size()) != expected_rows)
            throw std::logic_error("run record row count mismatch");
        for (const auto& row : rows) {
            if (row.size() != columns.size()) throw std::logic_error("run record column mismatch");
            if (!all_finite(row)) throw std::logic_error("run record contains non-finite values");
        }
    }
};

inline std::string format_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

inline std::string csv_escape(const std::string& field) {
    if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
    std::string out = "\"";
    for (char ch : field) {
        if (ch == '"') out += "\"\"";
        else out += ch;
    }
    out += "\"";
    return out;
}

inline std::string render_csv(const RunRecord& rec) {
    std::string out;
    for (std::size_t c = 0; c < rec.columns.size(); ++c) {
        if (c) out += ',';
        out += csv_escape(rec.columns[c]);
    }
    out += '\n';
    for (const auto& row : rec.rows) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c) out += ',';
            out += format_double(row[c]);
        }
        out += '\n';
    }
    return out;
}

inline void write_csv(const RunRecord& rec, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write CSV file: " + path);
    f << render_csv(rec);
}

inline json summary_json(const RunRecord& rec, const ExperimentConfig& cfg) {
    json j;
    j["version"] = kVersion;
    j["config"] = config_to_json(cfg);
    j["rows"] = rec.rows.size();
    j["budget_tokens"] = rec.budget_tokens;
    j["degenerate_groups"] = rec.degenerate_groups;
    json fin;
    if (!rec.rows.empty())
        for (std::size_t c = 0; c < rec.columns.size(); ++c)
            fin[rec.columns[c]] = rec.rows.back()[c];
    j["final"] = fin;
    if (rec.has_column("mean_reward") && rec.rows.size() >= 3)
        j["jitter2_mean_reward"] = jitter2(rec.series("mean_reward"));
    return j;
}

/// toy.csv -> toy.json; anything else gets .json appended.
inline std::string summary_path_for(const std::string& csv_path) {
    if (csv_path.size() >= 4 && csv_path.compare(csv_path.size() - 4, 4, ".csv") == 0)
        return csv_path.substr(0, csv_path.size() - 4) + ".json";
    return csv_path + ".json";
}

inline void write_summary(const RunRecord& rec, const ExperimentConfig& cfg,
                          const std::string& csv_path) {
    std::ofstream f(summary_path_for(csv_path), std::ios::binary);
    if (!f) throw ConfigError("cannot write summary file: " + summary_path_for(csv_path));
    f << summary_json(rec, cfg).dump(2) << '\n';
}

}  // namespace groupgrad
