/**
 * Experiment runner: the algebraic scenarios, the replay/sample training
 * loops, and the compute-matched comparison protocol.
 *
 * Scenarios:
 *   toy_unified     one prompt, three fixed answers with rewards (0, 1, 1);
 *                   tracks the log-odds and entropy over the two correct
 *                   answers, which differ only in surface form and length.
 *   minimal_prefix  G=2, T=3, shared two-token prefix, differing final
 *                   token; records the aggregated effective weight on the
 *                   shared-prefix tokens each step.
 *   clip_break      G=2 single shared token with mixed-sign advantages;
 *                   sweeps the importance ratio w across the clip band and
 *                   records the group-aggregated effective clip weight for
 *                   grpo_clipped and grpo_symclip.
 *
 * Replay mode freezes the old policy at step 0 and reuses the fixed group
 * every step (the algebraic setting); sample mode draws a fresh group from
 * the current policy each step.
 */
#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "groupgrad/io.hpp"

namespace groupgrad {

struct ScenarioInfo {
    std::string name;
    std::string description;
};

inline std::vector<ScenarioInfo> list_scenarios() {
    return {
        {"toy_unified",
         "three fixed answers, rewards (0,1,1); tracks log-odds drift and entropy over the two "
         "correct answers"},
        {"minimal_prefix",
         "G=2, T=3 shared-prefix pair; records the aggregated effective weight on shared tokens"},
        {"clip_break",
         "single shared token, mixed-sign advantages; sweeps the ratio across the clip band"},
    };
}

namespace detail {

struct ScenarioData {
    PolicyParams params;  // theta_0, prompts registered, replay contexts materialized
    std::string prompt;
    std::optional<TokenId> eos;
    RewardFn reward;
    GroupBatch replay_group;               // fixed group with old_logps and advantages
    std::vector<Context> tracked;          // contexts whose KL drift is recorded
    std::vector<std::string> tracked_names;
    std::vector<std::vector<TokenId>> equiv;  // equivalent-solution set (toy only)
};

inline GroupBatch fixed_group(const std::string& prompt,
                              const std::vector<std::vector<TokenId>>& token_seqs) {
    GroupBatch g;
    g.prompt_id = prompt;
    for (const auto& toks : token_seqs) {
        Trajectory t;
        t.prompt_id = prompt;
        t.tokens = toks;
        g.trajectories.push_back(std::move(t));
    }
    return g;
}

inline ScenarioData build_toy_unified(const ExperimentConfig& cfg) {
    VocabSpec vocab({"The", "answer", "is", "25.", "20.", "10+10=20.", "<eos>"});
    const TokenId eos = vocab.id_of("<eos>");
    const std::string prompt = "what-is-10+10";

    ScenarioData sc{PolicyParams(vocab, cfg.t_max), prompt, eos, nullptr, {}, {}, {}, {}};
    sc.params.register_prompt(prompt);

    const std::vector<std::vector<TokenId>> seqs = {
        {vocab.id_of("The"), vocab.id_of("answer"), vocab.id_of("is"), vocab.id_of("25."), eos},
        {vocab.id_of("The"), vocab.id_of("answer"), vocab.id_of("is"), vocab.id_of("20."), eos},
        {vocab.id_of("10+10=20."), eos},
    };
    sc.replay_group = fixed_group(prompt, seqs);

    const std::string reward_name =
        cfg.reward_fn.empty() ? "final_token_ends_with:20." : cfg.reward_fn;
    const RewardFn base = make_reward_fn(reward_name, sc.params.vocab(), eos);
    const double scale = cfg.reward_scale;
    sc.reward = [base, scale](const std::vector<TokenId>& t) { return scale * base(t); };

    sc.tracked = {Context{prompt, {}},
                  Context{prompt, {seqs[0][0], seqs[0][1], seqs[0][2]}}};
    sc.tracked_names = {"kl_root", "kl_shared"};
    sc.equiv = {seqs[1], seqs[2]};
    return sc;
}

inline ScenarioData build_minimal_prefix(const ExperimentConfig& cfg) {
    VocabSpec vocab({"answer", "is", "25", "20", "<eos>"});
    const std::string prompt = "minimal-prefix";

    ScenarioData sc{PolicyParams(vocab, cfg.t_max), prompt, vocab.id_of("<eos>"), nullptr, {}, {}, {}, {}};
    sc.params.register_prompt(prompt);

    const std::vector<std::vector<TokenId>> seqs = {
        {vocab.id_of("answer"), vocab.id_of("is"), vocab.id_of("25")},
        {vocab.id_of("answer"), vocab.id_of("is"), vocab.id_of("20")},
    };
    sc.replay_group = fixed_group(prompt, seqs);

    const std::string reward_name = cfg.reward_fn.empty() ? "final_token_equals:20" : cfg.reward_fn;
    const RewardFn base = make_reward_fn(reward_name, sc.params.vocab(), sc.eos);
    const double scale = cfg.reward_scale;
    sc.reward = [base, scale](const std::vector<TokenId>& t) { return scale * base(t); };

    sc.tracked = {Context{prompt, {}}, Context{prompt, {seqs[0][0]}}};
    sc.tracked_names = {"kl_root", "kl_mid"};
    return sc;
}

/// Overwrites the cached old logp of one token so its importance ratio at
/// theta_0 equals the requested value.
inline void pin_ratio(Trajectory& traj, const PolicyParams& params, int t, double ratio) {
    if (!(ratio > 0.0)) throw ConfigError("pinned ratios must be > 0");
    Context ctx{traj.prompt_id, std::vector<TokenId>(traj.tokens.begin(), traj.tokens.begin() + t)};
    traj.old_logps[static_cast<std::size_t>(t)] =
        log_prob(params, ctx, traj.tokens[static_cast<std::size_t>(t)]) - std::log(ratio);
}

/// Per-trajectory modulation weight under the active pipeline; feeds Asym.
/// Sequence families modulate with their stage weight, token families with
/// the mean per-token effective weight.
inline std::vector<double> modulation_weights(const PolicyParams& params, const GroupBatch& group,
                                              const std::vector<double>& adv,
                                              const ExperimentConfig& cfg,
                                              const WeightStages& stages) {
    if (cfg.use_dfpo) return stages.s_tilde;
    switch (cfg.estimator.family) {
        case EstimatorFamily::gspo_seq: return stages.s;
        case EstimatorFamily::gspo_clipped: return stages.s_bar;
        default: break;
    }
    const auto ratios = token_ratios(params, group);
    const double hi = 1.0 + cfg.estimator.clip_eps;
    const double lo = 1.0 - cfg.estimator.clip_eps;
    std::vector<double> w(ratios.size(), 0.0);
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        double acc = 0.0;
        for (double r : ratios[i]) {
            switch (cfg.estimator.family) {
                case EstimatorFamily::grpo_token: acc += r; break;
                case EstimatorFamily::grpo_symclip: acc += clip(r, 0.0, hi); break;
                default: {
                    const double rc = clip(r, lo, hi);
                    acc += adv[i] >= 0.0 ? std::min(r, rc) : std::max(r, rc);
                }
            }
        }
        w[i] = acc / static_cast<double>(ratios[i].size());
    }
    return w;
}

/// sum_i A_i * (effective weight of trajectory i at token t) under the
/// active pipeline; un-normalized (no 1/G, no 1/T).
inline double aggregated_effective_weight(const PolicyParams& params, const GroupBatch& group,
                                          const std::vector<double>& adv,
                                          const ExperimentConfig& cfg, const WeightStages& stages,
                                          int t) {
    double acc = 0.0;
    if (cfg.use_dfpo || cfg.estimator.family == EstimatorFamily::gspo_seq ||
        cfg.estimator.family == EstimatorFamily::gspo_clipped) {
        const auto& w = cfg.use_dfpo ? stages.s_tilde
                        : cfg.estimator.family == EstimatorFamily::gspo_seq ? stages.s
                                                                            : stages.s_bar;
        for (std::size_t i = 0; i < w.size(); ++i) acc += adv[i] * w[i];
        return acc;
    }
    const auto ratios = token_ratios(params, group);
    const double hi = 1.0 + cfg.estimator.clip_eps;
    const double lo = 1.0 - cfg.estimator.clip_eps;
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        const double r = ratios[i].at(static_cast<std::size_t>(t));
        double w = r;
        if (cfg.estimator.family == EstimatorFamily::grpo_symclip) w = clip(r, 0.0, hi);
        else if (cfg.estimator.family == EstimatorFamily::grpo_clipped) {
            const double rc = clip(r, lo, hi);
            w = adv[i] >= 0.0 ? std::min(r, rc) : std::max(r, rc);
        }
        acc += adv[i] * w;
    }
    return acc;
}

/// Per-token |coefficient| * ||score|| (or raw score norms), tagged by token
/// id, for the energy metric.
inline std::vector<std::pair<TokenId, double>> per_token_energy(
    const PolicyParams& params, const GroupBatch& group,
    const std::vector<std::vector<double>>& coeff, bool raw_score) {
    std::vector<std::pair<TokenId, double>> out;
    for (std::size_t i = 0; i < group.trajectories.size(); ++i) {
        const auto& traj = group.trajectories[i];
        Context ctx{traj.prompt_id, {}};
        for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
            const auto p = softmax(params.logits(ctx));
            double n2 = 0.0;
            for (std::size_t k = 0; k < p.size(); ++k) {
                const double e = (static_cast<TokenId>(k) == traj.tokens[t] ? 1.0 : 0.0) - p[k];
                n2 += e * e;
            }
            const double scale = raw_score ? 1.0 : std::abs(coeff[i][t]);
            out.emplace_back(traj.tokens[t], scale * std::sqrt(n2));
            ctx.prefix.push_back(traj.tokens[t]);
        }
    }
    return out;
}

inline FrequencyBuckets buckets_for_group(const GroupBatch& group) {
    std::map<TokenId, int> counts;
    for (const auto& traj : group.trajectories)
        for (TokenId t : traj.tokens) ++counts[t];
    return FrequencyBuckets::from_counts(std::move(counts));
}

inline std::vector<std::vector<double>> decoupled_coefficients(const GroupBatch& group,
                                                               const std::vector<double>& adv,
                                                               const std::vector<double>& weights,
                                                               bool length_norm) {
    const double inv_g = 1.0 / static_cast<double>(group.size());
    std::vector<std::vector<double>> coeff(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const auto& traj = group.trajectories[i];
        coeff[i].assign(static_cast<std::size_t>(traj.length()),
                        inv_g * weights[i] * adv[i] * alpha_factor(length_norm, traj.length()));
    }
    return coeff;
}

inline RunRecord run_training_scenario(const ExperimentConfig& cfg) {
    ScenarioData sc = cfg.scenario == "toy_unified" ? build_toy_unified(cfg)
                                                    : build_minimal_prefix(cfg);
    const bool replay = cfg.mode == "replay";
    const bool toy = cfg.scenario == "toy_unified";

    PolicyParams params = sc.params;
    for (const auto& ctx : sc.tracked) params.touch(ctx);

    GroupBatch replay_group = sc.replay_group;
    long long replay_step_tokens = 0;
    if (replay) {
        cache_old_logps(replay_group, params);  // theta_old frozen at theta_0
        if (cfg.scenario == "minimal_prefix") {
            pin_ratio(replay_group.trajectories[0], params, 0, cfg.rho1);
            pin_ratio(replay_group.trajectories[1], params, 0, cfg.rho1);
            pin_ratio(replay_group.trajectories[0], params, 1, cfg.rho2);
            pin_ratio(replay_group.trajectories[1], params, 1, cfg.rho2);
            pin_ratio(replay_group.trajectories[0], params, 2, cfg.lambda1);
            pin_ratio(replay_group.trajectories[1], params, 2, cfg.lambda2);
        }
        assign_rewards(replay_group, sc.reward);
        set_advantages(replay_group, cfg.advantage_mode);
        materialize_group_contexts(params, replay_group);
        for (const auto& t : replay_group.trajectories) replay_step_tokens += t.length();
    }

    RunRecord rec;
    rec.columns = {"step", "mean_reward"};
    if (replay)
        for (int i = 0; i < replay_group.size(); ++i)
            rec.columns.push_back("adv_" + std::to_string(i + 1));
    if (toy) {
        rec.columns.insert(rec.columns.end(), {"log_odds", "equiv_entropy", "d_log_odds"});
        if (replay) rec.columns.push_back("coeff_gap");
    } else {
        rec.columns.insert(rec.columns.end(), {"shared_coeff_t1", "shared_coeff_t2", "s_1", "s_2"});
    }
    for (const auto& name : sc.tracked_names) rec.columns.push_back(name);
    rec.columns.insert(rec.columns.end(),
                       {"asym", "s_min", "s_mean", "s_max", "sbar_min", "stilde_min", "stilde_max"});
    const std::size_t n_buckets = FrequencyBuckets::from_counts({}).size();
    for (std::size_t b = 0; b < n_buckets; ++b)
        rec.columns.push_back("energy_b" + std::to_string(b + 1));
    const bool with_bias =
        cfg.use_dfpo && cfg.transform.kind == TransformKind::min_replace;
    if (with_bias)
        rec.columns.insert(rec.columns.end(),
                           {"bias_norm", "bias_bound", "trust_delta", "phi_min"});
    if (!replay) rec.columns.push_back("truncated_count");
    rec.columns.push_back("budget_tokens");

    for (int step = 0; step < cfg.steps; ++step) {
        GroupBatch group;
        if (replay) {
            group = replay_group;
            rec.budget_tokens += replay_step_tokens;
        } else {
            group = sample_group(params, sc.prompt, cfg.group_size, cfg.t_max,
                                 mix_seed(cfg.seed, static_cast<std::uint64_t>(step)), sc.eos);
            assign_rewards(group, sc.reward);
            set_advantages(group, cfg.advantage_mode);
            materialize_group_contexts(params, group);
            for (const auto& t : group.trajectories) rec.budget_tokens += t.length();
        }
        const auto& adv = group.advantages;
        if (group.degenerate) ++rec.degenerate_groups;

        const WeightStages stages =
            compute_weight_stages(params, group, adv, cfg.estimator, cfg.transform);
        const auto coeff =
            cfg.use_dfpo
                ? decoupled_coefficients(group, adv, stages.s_tilde, cfg.estimator.length_norm)
                : per_token_coefficients(params, group, adv, cfg.estimator);
        const GradientVector grad = grad_weighted_scores(params, group, coeff);
        const PolicyParams next = apply_update(params, grad, cfg.eta);

        std::vector<double> row;
        row.push_back(static_cast<double>(step));
        row.push_back(mean_of(rewards_of(group)));
        if (replay)
            for (double a : adv) row.push_back(a);
        if (toy) {
            const double lo_now = log_odds(params, sc.prompt, sc.equiv[0], sc.equiv[1]);
            const double lo_next = log_odds(next, sc.prompt, sc.equiv[0], sc.equiv[1]);
            row.push_back(lo_now);
            row.push_back(equiv_set_entropy(params, sc.prompt, sc.equiv));
            row.push_back(lo_next - lo_now);
            if (replay) {
                // drift coefficient between the two correct answers (group
                // indices 1 and 2 in the fixed replay group)
                row.push_back(adv[1] * stages.s_tilde[1] - adv[2] * stages.s_tilde[2]);
            }
        } else {
            row.push_back(aggregated_effective_weight(params, group, adv, cfg, stages, 0));
            row.push_back(aggregated_effective_weight(params, group, adv, cfg, stages, 1));
            row.push_back(stages.s[0]);
            row.push_back(stages.s[1]);
        }
        for (const auto& ctx : sc.tracked) row.push_back(kl_conditional(next, params, ctx));
        row.push_back(asym(modulation_weights(params, group, adv, cfg, stages), adv));
        row.push_back(*std::min_element(stages.s.begin(), stages.s.end()));
        row.push_back(mean_of(stages.s));
        row.push_back(*std::max_element(stages.s.begin(), stages.s.end()));
        row.push_back(*std::min_element(stages.s_bar.begin(), stages.s_bar.end()));
        row.push_back(*std::min_element(stages.s_tilde.begin(), stages.s_tilde.end()));
        row.push_back(*std::max_element(stages.s_tilde.begin(), stages.s_tilde.end()));
        const auto shares =
            energy(per_token_energy(params, group, coeff, cfg.energy_raw_score),
                   buckets_for_group(group));
        for (double s : shares.shares) row.push_back(s);
        if (with_bias) {
            const auto rep = minrep_bias_report(params, group, adv, cfg.estimator.clip_eps);
            row.push_back(rep.bias_norm);
            row.push_back(rep.bias_norm_bound);
            row.push_back(rep.trust_delta);
            row.push_back(*std::min_element(rep.phi.begin(), rep.phi.end()));
        }
        if (!replay) {
            int truncated = 0;
            for (const auto& t : group.trajectories) truncated += t.truncated ? 1 : 0;
            row.push_back(static_cast<double>(truncated));
        }
        row.push_back(static_cast<double>(rec.budget_tokens));

        rec.rows.push_back(std::move(row));
        params = next;
    }
    rec.validate(cfg.steps);
    return rec;
}

inline RunRecord run_clip_break(const ExperimentConfig& cfg) {
    VocabSpec vocab({"x", "y", "<eos>"});
    const std::string prompt = "clip-break";
    PolicyParams params(vocab, cfg.t_max);
    params.register_prompt(prompt);

    GroupBatch group = fixed_group(prompt, {{vocab.id_of("x")}, {vocab.id_of("x")}});
    // identical sequences cannot be separated by a verifier; the rewards are
    // part of the construction
    group.trajectories[0].reward = 0.0;
    group.trajectories[0].reward_set = true;
    group.trajectories[1].reward = cfg.reward_scale;
    group.trajectories[1].reward_set = true;
    set_advantages(group, cfg.advantage_mode);
    materialize_group_contexts(params, group);

    RunRecord rec;
    rec.columns = {"step", "w", "coeff_clipped", "coeff_symclip"};
    const auto& adv = group.advantages;
    for (std::size_t k = 0; k < cfg.w_grid.size(); ++k) {
        const double w = cfg.w_grid[k];
        cache_old_logps(group, params);
        pin_ratio(group.trajectories[0], params, 0, w);
        pin_ratio(group.trajectories[1], params, 0, w);

        const auto wc = effective_clip_weights_at(params, group, adv, 0, cfg.estimator.clip_eps,
                                                  EstimatorFamily::grpo_clipped);
        const auto ws = effective_clip_weights_at(params, group, adv, 0, cfg.estimator.clip_eps,
                                                  EstimatorFamily::grpo_symclip);
        double coeff_clipped = 0.0, coeff_symclip = 0.0;
        for (std::size_t i = 0; i < wc.size(); ++i) {
            coeff_clipped += adv[i] * wc[i];
            coeff_symclip += adv[i] * ws[i];
        }
        rec.rows.push_back({static_cast<double>(k), w, coeff_clipped, coeff_symclip});
        rec.budget_tokens += group.trajectories[0].length() + group.trajectories[1].length();
    }
    rec.validate(static_cast<int>(cfg.w_grid.size()));
    return rec;
}

}  // namespace detail

inline RunRecord run_scenario(const ExperimentConfig& cfg) {
    cfg.validate();
    if (cfg.scenario == "clip_break") return detail::run_clip_break(cfg);
    return detail::run_training_scenario(cfg);
}

struct ComparisonReport {
    std::vector<RunRecord> records;
    json report;
};

/// Runs each config under the shared (G, K, t_max, seed) budget and emits a
/// paired report: per-run jitter2 of the reward series, steps to the reward
/// threshold, and the (equal) token budgets.
inline ComparisonReport run_compute_matched(const std::vector<ExperimentConfig>& configs,
                                            double reward_threshold = 0.7) {
    if (configs.empty()) throw ConfigError("run_compute_matched needs at least one config");
    for (const auto& cfg : configs) {
        if (cfg.group_size != configs[0].group_size || cfg.steps != configs[0].steps ||
            cfg.t_max != configs[0].t_max || cfg.seed != configs[0].seed)
            throw ConfigError("compute-matched runs must share G, steps, t_max, and seed");
    }
    ComparisonReport cmp;
    cmp.report["reward_threshold"] = reward_threshold;
    json runs = json::array();
    for (const auto& cfg : configs) {
        RunRecord rec = run_scenario(cfg);
        json entry;
        entry["config"] = config_to_json(cfg);
        entry["budget_tokens"] = rec.budget_tokens;
        if (rec.has_column("mean_reward")) {
            const auto reward = rec.series("mean_reward");
            if (reward.size() >= 3) entry["jitter2_mean_reward"] = jitter2(reward);
            const auto hit = steps_to_threshold(reward, reward_threshold);
            entry["steps_to_threshold"] = hit ? json(*hit) : json(nullptr);
        }
        runs.push_back(std::move(entry));
        cmp.records.push_back(std::move(rec));
    }
    for (std::size_t i = 1; i < cmp.records.size(); ++i)
        if (cmp.records[i].budget_tokens != cmp.records[0].budget_tokens)
            throw ConfigError("compute-matched runs produced unequal token budgets");
    cmp.report["runs"] = std::move(runs);
    return cmp;
}

}  // namespace groupgrad
