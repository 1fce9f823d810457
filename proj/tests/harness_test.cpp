#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "groupgrad/cli.hpp"

using namespace groupgrad;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string write_temp_config(const std::string& name, const std::string& text) {
    const auto path = (std::filesystem::temp_directory_path() / name).string();
    std::ofstream f(path);
    f << text;
    return path;
}

int run_cli(std::vector<std::string> args) {
    std::vector<const char*> argv = {"groupgrad"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return cli_main(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST_CASE("config files parse flat JSON-typed key/value pairs") {
    const auto cfg = parse_config_text(R"(
# a comment
scenario = "toy_unified"
estimator = "gspo_clipped"
clip_eps = 0.25
length_norm = false
transform = "min_replace"
use_dfpo = true
advantage_mode = "standardized"
G = 3
K = 42
eta = 0.05
seed = 99
mode = "replay"
w_grid = [0.5, 1.5]
out = "x.csv"
)");
    CHECK(cfg.scenario == "toy_unified");
    CHECK(cfg.estimator.family == EstimatorFamily::gspo_clipped);
    CHECK(cfg.estimator.clip_eps == 0.25);
    CHECK_FALSE(cfg.estimator.length_norm);
    CHECK(cfg.transform.kind == TransformKind::min_replace);
    CHECK(cfg.use_dfpo);
    CHECK(cfg.advantage_mode == AdvantageMode::standardized);
    CHECK(cfg.group_size == 3);
    CHECK(cfg.steps == 42);
    CHECK(cfg.eta == 0.05);
    CHECK(cfg.seed == 99);
    CHECK(cfg.w_grid == std::vector<double>{0.5, 1.5});
    CHECK(cfg.out == "x.csv");
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("config parsing rejects malformed input") {
    CHECK_THROWS_AS(parse_config_text("scenario toy\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("scenario = toy_unified\n"), ConfigError);  // not JSON
    CHECK_THROWS_AS(parse_config_text("no_such_key = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("eta = \"fast\"\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_file("/nonexistent/path.cfg"), ConfigError);
}

TEST_CASE("config validation pins scenario constraints") {
    ExperimentConfig cfg;
    cfg.scenario = "mystery";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.scenario = "toy_unified";
    cfg.eta = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.eta = 0.01;
    cfg.steps = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.steps = 5;
    cfg.group_size = 4;  // replay toy needs exactly the three fixed answers
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.group_size = 4;
    cfg.mode = "sample";
    CHECK_NOTHROW(cfg.validate());
    cfg.scenario = "minimal_prefix";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);  // sample mode not defined for it
}

TEST_CASE("toy_unified step-0 state matches the analytic initial condition") {
    ExperimentConfig cfg;
    cfg.scenario = "toy_unified";
    cfg.steps = 3;
    const auto rec = run_scenario(cfg);
    rec.validate(3);
    CHECK(rec.at(0, "mean_reward") == Catch::Approx(2.0 / 3.0));
    CHECK(rec.at(0, "adv_1") == Catch::Approx(-2.0 / 3.0));
    CHECK(rec.at(0, "adv_2") == Catch::Approx(1.0 / 3.0));
    CHECK(rec.at(0, "adv_3") == Catch::Approx(1.0 / 3.0));
    CHECK(rec.at(0, "s_min") == Catch::Approx(1.0).margin(1e-13));
    CHECK(rec.at(0, "s_max") == Catch::Approx(1.0).margin(1e-13));
    CHECK(rec.at(0, "coeff_gap") == Catch::Approx(0.0).margin(1e-13));
    // uniform theta_0: log-odds is (T3 - T2) ln V = -3 ln 7
    CHECK(rec.at(0, "log_odds") == Catch::Approx(-3.0 * std::log(7.0)).epsilon(1e-12));
}

TEST_CASE("minimal_prefix reproduces the sequence-coupling coefficient") {
    ExperimentConfig cfg;
    cfg.scenario = "minimal_prefix";
    cfg.group_size = 2;
    cfg.steps = 4;
    cfg.estimator.family = EstimatorFamily::gspo_seq;
    cfg.estimator.length_norm = false;  // the un-normalized algebraic setting
    cfg.reward_scale = 2.0;             // advantages (-1, +1)
    cfg.lambda1 = 0.9;
    cfg.lambda2 = 1.1;
    const auto rec = run_scenario(cfg);
    // A rho1 rho2 (lambda2 - lambda1) = 0.2 at step 0, identically at both
    // shared-prefix steps
    CHECK(rec.at(0, "shared_coeff_t1") == Catch::Approx(0.2).margin(1e-12));
    CHECK(rec.at(0, "shared_coeff_t2") == Catch::Approx(0.2).margin(1e-12));
    CHECK(rec.at(0, "s_1") == Catch::Approx(0.9).margin(1e-12));
    CHECK(rec.at(0, "s_2") == Catch::Approx(1.1).margin(1e-12));

    SECTION("lambda1 == lambda2 cancels the coefficient") {
        cfg.lambda1 = cfg.lambda2 = 1.05;
        const auto rec2 = run_scenario(cfg);
        CHECK(rec2.at(0, "shared_coeff_t1") == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("grpo_token cancels on the shared prefix") {
        cfg.estimator.family = EstimatorFamily::grpo_token;
        const auto rec3 = run_scenario(cfg);
        CHECK(rec3.at(0, "shared_coeff_t1") == Catch::Approx(0.0).margin(1e-12));
        CHECK(rec3.at(0, "shared_coeff_t2") == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("DFPO variants cancel on the shared prefix") {
        cfg.use_dfpo = true;
        for (TransformKind kind : {TransformKind::min_replace, TransformKind::truncate_rebalance}) {
            cfg.transform.kind = kind;
            const auto rec4 = run_scenario(cfg);
            CHECK(rec4.at(0, "shared_coeff_t1") == Catch::Approx(0.0).margin(1e-10));
        }
    }
}

TEST_CASE("clip_break sweeps the ratio across the band") {
    ExperimentConfig cfg;
    cfg.scenario = "clip_break";
    cfg.group_size = 2;
    cfg.reward_scale = 2.0;  // A = 1
    cfg.estimator.clip_eps = 0.2;
    const auto rec = run_scenario(cfg);
    rec.validate(static_cast<int>(cfg.w_grid.size()));
    for (std::size_t k = 0; k < cfg.w_grid.size(); ++k) {
        const double w = cfg.w_grid[k];
        double expect = 0.0;
        if (w > 1.2) expect = 1.2 - w;
        else if (w < 0.8) expect = w - 0.8;
        CHECK(rec.at(k, "w") == w);
        CHECK(rec.at(k, "coeff_clipped") == Catch::Approx(expect).margin(1e-12));
        CHECK(rec.at(k, "coeff_symclip") == Catch::Approx(0.0).margin(1e-12));
    }
}

TEST_CASE("identical configs and seeds produce byte-identical CSV") {
    ExperimentConfig cfg;
    cfg.scenario = "toy_unified";
    cfg.mode = "sample";
    cfg.group_size = 6;
    cfg.steps = 12;
    cfg.seed = 2024;
    const auto a = render_csv(run_scenario(cfg));
    const auto b = render_csv(run_scenario(cfg));
    CHECK(a == b);

    cfg.seed = 2025;
    const auto c = render_csv(run_scenario(cfg));
    CHECK(a != c);
}

TEST_CASE("the run subcommand is deterministic at the file level") {
    const auto cfg_path = write_temp_config("gg_run.cfg", R"(
scenario = "toy_unified"
estimator = "gspo_seq"
mode = "sample"
group_size = 4
steps = 8
eta = 0.01
)");
    const auto out = (std::filesystem::temp_directory_path() / "gg_run.csv").string();
    REQUIRE(run_cli({"run", "--config", cfg_path, "--seed", "7", "--out", out}) == 0);
    const std::string first = slurp(out);
    REQUIRE(run_cli({"run", "--config", cfg_path, "--seed", "7", "--out", out}) == 0);
    CHECK(first == slurp(out));
    CHECK(first.substr(0, 5) == "step,");

    // summary JSON sits next to the CSV and echoes the config
    const auto sum = json::parse(slurp(summary_path_for(out)));
    CHECK(sum["config"]["scenario"] == "toy_unified");
    CHECK(sum["config"]["seed"] == 7);
    CHECK(sum["rows"] == 8);
    CHECK(sum["version"].is_string());
}

TEST_CASE("cli exit codes distinguish config errors") {
    CHECK(run_cli({"run", "--config", "/nonexistent.cfg"}) == 2);
    const auto bad = write_temp_config("gg_bad.cfg", "scenario = \"nope\"\n");
    CHECK(run_cli({"run", "--config", bad}) == 2);
    CHECK(run_cli({"bogus-subcommand"}) == 2);
    CHECK(run_cli({"list-scenarios"}) == 0);
}

TEST_CASE("sweep emits one output file per value") {
    const auto cfg_path = write_temp_config("gg_sweep.cfg", R"(
scenario = "toy_unified"
mode = "sample"
group_size = 2
steps = 4
seed = 3
)");
    const auto dir = std::filesystem::temp_directory_path() / "gg_sweep_out";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    const auto base = (dir / "run.csv").string();
    REQUIRE(run_cli({"sweep", "--config", cfg_path, "--field", "G", "--values", "2,4,8,16",
                     "--out", base}) == 0);
    for (const std::string g : {"2", "4", "8", "16"}) {
        CHECK(std::filesystem::exists(dir / ("run_G=" + g + ".csv")));
        CHECK(std::filesystem::exists(dir / ("run_G=" + g + ".json")));
    }
}

TEST_CASE("compute-matched runs share budgets and report jitter") {
    ExperimentConfig gspo;
    gspo.scenario = "toy_unified";
    gspo.steps = 20;
    gspo.seed = 11;
    gspo.estimator.family = EstimatorFamily::gspo_seq;
    ExperimentConfig dfpo = gspo;
    dfpo.use_dfpo = true;
    dfpo.transform.kind = TransformKind::min_replace;

    const auto cmp = run_compute_matched({gspo, dfpo});
    REQUIRE(cmp.records.size() == 2);
    CHECK(cmp.records[0].budget_tokens == cmp.records[1].budget_tokens);
    CHECK(cmp.report["runs"][0].contains("jitter2_mean_reward"));
    CHECK(cmp.report["runs"][1].contains("jitter2_mean_reward"));

    SECTION("identical configs give bitwise-identical outputs") {
        const auto twin = run_compute_matched({gspo, gspo});
        CHECK(render_csv(twin.records[0]) == render_csv(twin.records[1]));
    }
    SECTION("mismatched budgets are a config error") {
        ExperimentConfig other = gspo;
        other.steps = 21;
        CHECK_THROWS_AS(run_compute_matched({gspo, other}), ConfigError);
    }
}

TEST_CASE("toy log-odds drift accumulates linearly and DFPO slows the collapse") {
    ExperimentConfig gspo;
    gspo.scenario = "toy_unified";
    gspo.estimator.family = EstimatorFamily::gspo_seq;
    gspo.steps = 200;
    gspo.eta = 1e-2;
    const auto rg = run_scenario(gspo);

    // run-and-regress: |log-odds| grows approximately linearly in the step
    const auto lo = rg.series("log_odds");
    double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
    const double n = static_cast<double>(lo.size());
    for (std::size_t k = 0; k < lo.size(); ++k) {
        const double x = static_cast<double>(k);
        sx += x;
        sy += lo[k];
        sxx += x * x;
        sxy += x * lo[k];
        syy += lo[k] * lo[k];
    }
    const double r =
        (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
    CHECK(r * r > 0.999);
    CHECK(std::abs(lo.back() - lo.front()) > 0.1);

    // equalized coefficients slow the equivalent-set entropy decay
    ExperimentConfig dfpo = gspo;
    dfpo.use_dfpo = true;
    dfpo.transform.kind = TransformKind::min_replace;
    const auto rd = run_scenario(dfpo);
    const auto eg = rg.series("equiv_entropy");
    const auto ed = rd.series("equiv_entropy");
    CHECK(eg.front() - eg.back() > 0.0);
    CHECK(ed.front() - ed.back() < eg.front() - eg.back());
}

TEST_CASE("per-step log-odds change follows the drift coefficient to first order") {
    // d_log_odds ~= eta * c * (A_2 s_2 - A_3 s_3) + structural term + O(eta^2):
    // regressing the per-step change on the measured coefficient gap gives a
    // positive slope, a residual that is second-order small, and a slope/eta
    // ratio that is stable across step sizes
    auto fit = [](const ExperimentConfig& cfg) {
        const auto rec = run_scenario(cfg);
        const auto y = rec.series("d_log_odds");
        const auto x = rec.series("coeff_gap");
        const double n = static_cast<double>(y.size());
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        for (std::size_t k = 0; k < y.size(); ++k) {
            sx += x[k];
            sy += y[k];
            sxx += x[k] * x[k];
            sxy += x[k] * y[k];
        }
        const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        const double intercept = (sy - slope * sx) / n;
        double rss = 0, ymin = 1e18, ymax = -1e18;
        for (std::size_t k = 0; k < y.size(); ++k) {
            const double r = y[k] - slope * x[k] - intercept;
            rss += r * r;
            ymin = std::min(ymin, y[k]);
            ymax = std::max(ymax, y[k]);
        }
        return std::array<double, 2>{slope, std::sqrt(rss / n) / (ymax - ymin)};
    };

    ExperimentConfig cfg;
    cfg.scenario = "toy_unified";
    cfg.estimator.family = EstimatorFamily::gspo_seq;
    cfg.steps = 200;
    cfg.eta = 1e-2;
    const auto coarse = fit(cfg);
    cfg.eta = 1e-3;
    const auto fine = fit(cfg);

    CHECK(coarse[0] > 0.0);
    CHECK(coarse[1] < 0.01);            // residual below 1% of the drift range
    CHECK(fine[1] < coarse[1]);         // and it shrinks with the step size
    CHECK(coarse[0] / cfg.eta / 10.0 ==  // c = slope/eta stable to first order
          Catch::Approx(fine[0] / cfg.eta).epsilon(0.1));
}

TEST_CASE("the verify subcommand passes on a correct build") {
    CHECK(run_cli({"verify"}) == 0);
}

TEST_CASE("csv fields are quoted per RFC 4180") {
    CHECK(csv_escape("plain") == "plain");
    CHECK(csv_escape("with,comma") == "\"with,comma\"");
    CHECK(csv_escape("say \"hi\"") == "\"say \"\"hi\"\"\"");
    CHECK(csv_escape("line\nbreak") == "\"line\nbreak\"");
}

TEST_CASE("run records reject non-finite values and row mismatches") {
    RunRecord rec;
    rec.columns = {"a"};
    rec.rows = {{1.0}};
    CHECK_NOTHROW(rec.validate(1));
    CHECK_THROWS_AS(rec.validate(2), std::logic_error);
    rec.rows[0][0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(rec.validate(1), std::logic_error);
}

TEST_CASE("sample-mode toy runs stay finite with verifier-range rewards") {
    ExperimentConfig cfg;
    cfg.scenario = "toy_unified";
    cfg.mode = "sample";
    cfg.group_size = 8;
    cfg.steps = 30;
    cfg.eta = 0.05;
    cfg.seed = 5;
    const auto rec = run_scenario(cfg);
    rec.validate(30);
    CHECK(rec.budget_tokens > 0);
    // binary verifier: every group mean sits in [0, 1]
    for (double r : rec.series("mean_reward")) {
        CHECK(r >= 0.0);
        CHECK(r <= 1.0);
    }
    // budget grows by the sampled token count each step
    const auto budget = rec.series("budget_tokens");
    for (std::size_t k = 1; k < budget.size(); ++k) CHECK(budget[k] > budget[k - 1]);
    // truncation is surfaced per step
    for (double t : rec.series("truncated_count")) {
        CHECK(t >= 0.0);
        CHECK(t <= 8.0);
    }
}

TEST_CASE("min-replace runs emit the bias report columns") {
    ExperimentConfig cfg;
    cfg.scenario = "toy_unified";
    cfg.use_dfpo = true;
    cfg.transform.kind = TransformKind::min_replace;
    cfg.steps = 10;
    const auto rec = run_scenario(cfg);
    REQUIRE(rec.has_column("bias_norm"));
    for (std::size_t k = 0; k < rec.rows.size(); ++k) {
        CHECK(rec.at(k, "bias_norm") <= rec.at(k, "bias_bound") + 1e-9);
        CHECK(rec.at(k, "phi_min") > 0.0);
        CHECK(rec.at(k, "phi_min") <= 1.0 + 1e-15);
        CHECK(rec.at(k, "phi_min") >= std::exp(-2.0 * rec.at(k, "trust_delta")) - 1e-12);
    }
    // theta_0 == theta_old: no dispersion, no bias at step 0
    CHECK(rec.at(0, "bias_norm") == Catch::Approx(0.0).margin(1e-13));
}
