/**
 * The invariant suite behind `groupgrad verify`: every structural property
 * the library promises, run on freshly generated random instances and
 * reported as one pass/fail line each.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "groupgrad/harness.hpp"

namespace groupgrad::verify {

struct Check {
    std::string name;
    bool pass = false;
    std::string detail;
};

namespace detail {

/// A randomized policy/group instance: trajectories with cached old-policy
/// log-probabilities, a perturbed current policy, continuous rewards, and
/// zero-mean advantages.
struct World {
    PolicyParams params;  // perturbed theta
    GroupBatch group;     // old_logps cached at unperturbed theta_old
};

inline World make_world(std::mt19937_64& rng, int vocab_size = 5, int group_size = 4,
                        int max_len = 4, double perturb = 0.3) {
    std::vector<std::string> symbols;
    for (int i = 0; i < vocab_size; ++i) symbols.push_back("t" + std::to_string(i));
    PolicyParams params_old(VocabSpec(symbols), 8);
    params_old.register_prompt("p");

    GroupBatch group;
    group.prompt_id = "p";
    for (int i = 0; i < group_size; ++i) {
        Trajectory traj;
        traj.prompt_id = "p";
        const int len = 1 + static_cast<int>(canonical(rng) * max_len);
        for (int t = 0; t < len; ++t)
            traj.tokens.push_back(static_cast<TokenId>(canonical(rng) * vocab_size));
        group.trajectories.push_back(std::move(traj));
    }
    cache_old_logps(group, params_old);
    for (auto& traj : group.trajectories) {
        traj.reward = gaussian(rng);
        traj.reward_set = true;
    }
    set_advantages(group, AdvantageMode::mean);

    World w{params_old, std::move(group)};
    materialize_group_contexts(w.params, w.group);
    for (auto& [ctx, blk] : w.params.table())
        for (double& x : blk) x += perturb * gaussian(rng);
    return w;
}

/// Positive weight vector with lognormal spread.
inline std::vector<double> random_weights(std::mt19937_64& rng, std::size_t n, double sigma = 0.4) {
    std::vector<double> w(n);
    for (double& x : w) x = std::exp(sigma * gaussian(rng));
    return w;
}

inline bool near_clip_boundary(double x, double eps, double margin) {
    return std::abs(x - (1.0 - eps)) < margin || std::abs(x - (1.0 + eps)) < margin;
}

inline bool world_near_boundary(const World& w, double eps, double margin) {
    const auto ratios = token_ratios(w.params, w.group);
    for (const auto& rs : ratios)
        for (double r : rs)
            if (near_clip_boundary(r, eps, margin)) return true;
    for (bool ln : {true, false})
        for (double s : seq_weights(w.params, w.group, ln))
            if (near_clip_boundary(s, eps, margin)) return true;
    return false;
}

inline double weighted_logprob_objective(const PolicyParams& params, const GroupBatch& group,
                                         const std::vector<std::vector<double>>& coeff) {
    double acc = 0.0;
    for (std::size_t i = 0; i < group.trajectories.size(); ++i) {
        const auto& traj = group.trajectories[i];
        Context ctx{traj.prompt_id, {}};
        for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
            acc += coeff[i][t] * log_prob(params, ctx, traj.tokens[t]);
            ctx.prefix.push_back(traj.tokens[t]);
        }
    }
    return acc;
}

inline double max_block_abs_diff(const GradientVector& a, const GradientVector& b) {
    double m = 0.0;
    GradientVector d = a;
    d.axpy(-1.0, b);
    for (const auto& [ctx, blk] : d.entries())
        for (double x : blk) m = std::max(m, std::abs(x));
    return m;
}

}  // namespace detail

inline std::vector<Check> run_all(std::uint64_t seed = 20240601) {
    using namespace detail;
    std::vector<Check> checks;
    auto add = [&checks](const std::string& name, bool pass, const std::string& det = "") {
        checks.push_back({name, pass, det});
    };

    // --- policy core ---------------------------------------------------
    {
        std::mt19937_64 rng(mix_seed(seed, 1));
        bool ok = true;
        double worst = 0.0;
        for (int n = 0; n < 100 && ok; ++n) {
            World w = make_world(rng);
            for (const auto& [ctx, blk] : w.params.table()) {
                double total = 0.0;
                for (int tok = 0; tok < w.params.vocab_size(); ++tok)
                    total += std::exp(log_prob(w.params, ctx, tok));
                worst = std::max(worst, std::abs(total - 1.0));
                ok = ok && std::abs(total - 1.0) <= 1e-12;
            }
        }
        add("softmax_normalization", ok, "max |sum(p) - 1| = " + format_double(worst));
    }
    {
        std::mt19937_64 rng(mix_seed(seed, 2));
        double worst = 0.0;
        for (int n = 0; n < 100; ++n) {
            World w = make_world(rng);
            const auto& [ctx, blk] = *w.params.table().begin();
            const TokenId tok = static_cast<TokenId>(canonical(rng) * w.params.vocab_size());
            const auto analytic = score_gradient(w.params, ctx, tok);
            const auto numeric = finite_diff_gradient(
                [&ctx, tok](const PolicyParams& p) { return log_prob(p, ctx, tok); }, w.params,
                1e-5);
            worst = std::max(worst, max_block_abs_diff(analytic, numeric));
        }
        add("score_matches_finite_diff", worst < 1e-7, "max abs dev = " + format_double(worst));
    }
    {
        std::mt19937_64 rng(mix_seed(seed, 3));
        double worst = 0.0;
        for (int n = 0; n < 100; ++n) {
            World w = make_world(rng);
            const auto& ctx = w.params.table().begin()->first;
            const auto f = fisher_matrix(w.params, ctx);
            for (int k = 0; k < 20; ++k) {
                std::vector<double> v(static_cast<std::size_t>(w.params.vocab_size()));
                for (double& x : v) x = gaussian(rng);
                worst = std::min(worst, quadratic_form(f, v));
            }
        }
        add("fisher_psd", worst >= -1e-12, "min v'Fv = " + format_double(worst));
    }
    {
        std::mt19937_64 rng(mix_seed(seed, 4));
        bool ok = true;
        for (int n = 0; n < 20 && ok; ++n) {
            World w = make_world(rng);
            const auto& ctx = w.params.table().begin()->first;
            GradientVector g;
            auto& blk = g.block(ctx, w.params.vocab_size());
            for (double& x : blk) x = gaussian(rng);
            double norm = 0.0;
            for (double x : blk) norm += x * x;
            norm = std::sqrt(norm);
            for (double& x : blk) x /= norm;
            const auto* gb = g.find_block(ctx);
            const double quad = quadratic_form(fisher_matrix(w.params, ctx), *gb);
            if (quad < 1e-8) continue;  // direction in the Fisher null space
            double prev_err = 1e18;
            for (double eta : {1e-2, 1e-3, 1e-4}) {
                const auto drift = kl_drift_check(w.params, ctx, g, eta);
                const double err = std::abs(drift.measured - drift.predicted) / drift.predicted;
                ok = ok && err <= prev_err;
                prev_err = err;
            }
        }
        add("kl_second_order_shrinkage", ok);
    }

    // --- rollout ---------------------------------------------------------
    {
        std::mt19937_64 rng(mix_seed(seed, 5));
        double worst = 0.0;
        for (int n = 0; n < 1000; ++n) {
            World w = make_world(rng, 4, 2 + static_cast<int>(canonical(rng) * 5));
            for (AdvantageMode mode : {AdvantageMode::mean, AdvantageMode::standardized}) {
                set_advantages(w.group, mode);
                double total = 0.0;
                for (double a : w.group.advantages) total += a;
                worst = std::max(worst, std::abs(total));
            }
        }
        add("advantages_zero_mean", worst <= 1e-10, "max |sum A| = " + format_double(worst));
    }
    {
        std::mt19937_64 rng(mix_seed(seed, 6));
        double worst = 0.0;
        for (int n = 0; n < 200; ++n) {
            World w = make_world(rng, 5, 3, 4, /*perturb=*/0.0);  // theta == theta_old
            for (const auto& rs : token_ratios(w.params, w.group))
                for (double r : rs) worst = std::max(worst, std::abs(r - 1.0));
        }
        add("ratios_one_at_theta_old", worst <= 1e-12, "max |r - 1| = " + format_double(worst));
    }
    {
        std::mt19937_64 rng(mix_seed(seed, 7));
        double worst = 0.0;
        for (int n = 0; n < 200; ++n) {
            World w = make_world(rng);
            for (const auto& traj : w.group.trajectories) {
                const double via_cache = sequence_weight(w.params, traj);
                double old_lp = 0.0;
                for (double l : traj.old_logps) old_lp += l;
                const double cur_lp = sequence_log_prob(w.params, traj.prompt_id, traj.tokens);
                const double via_likelihood =
                    std::exp((cur_lp - old_lp) / static_cast<double>(traj.length()));
                worst = std::max(worst, std::abs(via_cache - via_likelihood));
            }
        }
        add("sequence_weight_two_routes", worst <= 1e-12, "max route gap = " + format_double(worst));
    }

    // --- transforms ------------------------------------------------------
    {
        std::mt19937_64 rng(mix_seed(seed, 8));
        double worst = 0.0;
        bool nonneg = true;
        for (int n = 0; n < 10000; ++n) {
            const int g = 2 + static_cast<int>(canonical(rng) * 5);
            std::vector<double> adv(static_cast<std::size_t>(g));
            for (double& a : adv) a = gaussian(rng);
            const double m = mean_of(adv);
            for (double& a : adv) a -= m;
            if (!advantages_have_both_signs(adv)) continue;
            const auto w = random_weights(rng, static_cast<std::size_t>(g));

            const auto wo = orth_proj(w, adv);
            const auto qp = positive_orth_proj_qp(w, adv);
            const auto tr = truncate_rebalance(w, adv);
            for (const auto* v : {&wo, &qp.s_tilde, &tr.s_tilde}) {
                double dot = 0.0;
                for (std::size_t i = 0; i < v->size(); ++i) dot += adv[i] * (*v)[i];
                worst = std::max(worst, std::abs(dot));
            }
            for (double x : qp.s_tilde) nonneg = nonneg && x >= 0.0;
            for (double x : tr.s_tilde) nonneg = nonneg && x > 0.0;
        }
        add("transform_orthogonality", worst < 1e-10, "max |A.s~| = " + format_double(worst));
        add("transform_nonnegativity", nonneg);
    }
    {
        std::mt19937_64 rng(mix_seed(seed, 9));
        bool ok = true;
        for (int n = 0; n < 10000 && ok; ++n) {
            const int g = 2 + static_cast<int>(canonical(rng) * 5);
            std::vector<double> adv(static_cast<std::size_t>(g));
            for (double& a : adv) a = gaussian(rng);
            const double m = mean_of(adv);
            for (double& a : adv) a -= m;
            const auto s_bar = random_weights(rng, static_cast<std::size_t>(g));
            const auto s_tilde = min_replace(s_bar);
            for (std::size_t i = 0; i < s_bar.size(); ++i) {
                const double before = adv[i] * s_bar[i];
                const double after = adv[i] * s_tilde[i];
                ok = ok && ((before > 0) == (after > 0)) && ((before < 0) == (after < 0));
                const double phi = s_tilde[i] / s_bar[i];
                ok = ok && phi > 0.0 && phi <= 1.0 + 1e-15;
            }
        }
        add("minrep_no_reverse_update", ok);
    }
    {
        std::mt19937_64 rng(mix_seed(seed, 10));
        bool ok = true;
        for (int n = 0; n < 1000 && ok; ++n) {
            World w = make_world(rng);
            const auto rep = minrep_bias_report(w.params, w.group, w.group.advantages, 0.2);
            ok = ok && rep.bias_norm <= rep.bias_norm_bound + 1e-9;
            for (double phi : rep.phi)
                ok = ok && phi >= std::exp(-2.0 * rep.trust_delta) - 1e-12 && phi <= 1.0 + 1e-15;
        }
        add("minrep_bias_bound", ok);
    }
    {
        std::mt19937_64 rng(mix_seed(seed, 11));
        bool ok = true;
        for (int n = 0; n < 50 && ok; ++n) {
            World w = make_world(rng);
            const auto& adv = w.group.advantages;
            EstimatorSpec espec;
            TransformSpec tspec;
            tspec.kind = TransformKind::min_replace;
            const auto st = compute_weight_stages(w.params, w.group, adv, espec, tspec);
            const auto direct = grad_dfpo(w.params, w.group, adv, espec, tspec);
            // same numbers injected as plain constants must give the same gradient
            std::vector<double> injected(st.s_tilde.begin(), st.s_tilde.end());
            const auto via_injection =
                grad_decoupled(w.params, w.group, adv, injected, espec.length_norm);
            ok = ok && max_block_abs_diff(direct, via_injection) == 0.0;
        }
        add("stopgrad_weight_injection", ok);
    }
    {
        std::mt19937_64 rng(mix_seed(seed, 12));
        bool ok = true;
        int tested = 0;
        for (int n = 0; n < 200 && tested < 50; ++n) {
            World w = make_world(rng);
            const auto& adv = w.group.advantages;
            EstimatorSpec espec;
            TransformSpec ident, minrep;
            minrep.kind = TransformKind::min_replace;
            const auto st = compute_weight_stages(w.params, w.group, adv, espec, ident);
            const double spread = *std::max_element(st.s_bar.begin(), st.s_bar.end()) -
                                  *std::min_element(st.s_bar.begin(), st.s_bar.end());
            if (spread < 0.05) continue;
            const auto g_id = grad_dfpo(w.params, w.group, adv, espec, ident);
            const auto g_min = grad_dfpo(w.params, w.group, adv, espec, minrep);
            const double denom = g_id.dot(g_id);
            if (denom < 1e-12 || g_min.norm() < 1e-9) continue;
            ++tested;
            const double lam = g_min.dot(g_id) / denom;
            GradientVector resid = g_min;
            resid.axpy(-lam, g_id);
            ok = ok && resid.norm() / g_min.norm() > 1e-6;
        }
        add("minrep_not_global_rescale", ok && tested >= 20,
            "generic groups tested: " + std::to_string(tested));
    }

    // --- estimator/surrogate consistency ----------------------------------
    {
        std::mt19937_64 rng(mix_seed(seed, 13));
        double worst = 0.0;
        const EstimatorFamily families[] = {EstimatorFamily::grpo_token,
                                            EstimatorFamily::grpo_clipped,
                                            EstimatorFamily::grpo_symclip,
                                            EstimatorFamily::gspo_seq,
                                            EstimatorFamily::gspo_clipped};
        for (int n = 0; n < 10; ++n) {
            World w = make_world(rng);
            while (world_near_boundary(w, 0.2, 1e-3)) w = make_world(rng);
            const auto adv = w.group.advantages;
            for (EstimatorFamily fam : families) {
                EstimatorSpec spec;
                spec.family = fam;
                const auto analytic = grad_estimator(w.params, w.group, adv, spec);
                GradientVector numeric;
                if (fam == EstimatorFamily::grpo_symclip) {
                    const auto frozen = per_token_coefficients(w.params, w.group, adv, spec);
                    numeric = finite_diff_gradient(
                        [&](const PolicyParams& p) {
                            return weighted_logprob_objective(p, w.group, frozen);
                        },
                        w.params, 1e-5);
                } else {
                    numeric = finite_diff_gradient(
                        [&](const PolicyParams& p) {
                            return surrogate_value(p, w.group, adv, spec);
                        },
                        w.params, 1e-5);
                }
                worst = std::max(worst, max_block_abs_diff(analytic, numeric));
            }
            // decoupled estimator against its frozen-weight objective
            EstimatorSpec espec;
            TransformSpec tspec;
            tspec.kind = TransformKind::truncate_rebalance;
            const auto st = compute_weight_stages(w.params, w.group, adv, espec, tspec);
            const auto frozen =
                groupgrad::detail::decoupled_coefficients(w.group, adv, st.s_tilde, true);
            const auto analytic = grad_decoupled(w.params, w.group, adv, st.s_tilde, true);
            const auto numeric = finite_diff_gradient(
                [&](const PolicyParams& p) {
                    return weighted_logprob_objective(p, w.group, frozen);
                },
                w.params, 1e-5);
            worst = std::max(worst, max_block_abs_diff(analytic, numeric));
        }
        add("surrogate_gradient_consistency", worst < 1e-7,
            "max abs dev = " + format_double(worst));
    }

    // --- diagnostics -------------------------------------------------------
    {
        std::mt19937_64 rng(mix_seed(seed, 14));
        bool ok = true;
        for (int n = 0; n < 100 && ok; ++n) {
            std::vector<double> series(10);
            for (double& x : series) x = gaussian(rng);
            const double a = gaussian(rng), b = gaussian(rng);
            std::vector<double> shifted = series;
            for (std::size_t t = 0; t < shifted.size(); ++t) shifted[t] += a + b * static_cast<double>(t);
            ok = ok && std::abs(jitter2(series) - jitter2(shifted)) < 1e-12;
        }
        add("jitter2_affine_invariance", ok);
    }
    {
        std::mt19937_64 rng(mix_seed(seed, 15));
        bool ok = true;
        for (int n = 0; n < 1000 && ok; ++n) {
            const int g = 2 + static_cast<int>(canonical(rng) * 5);
            std::vector<double> adv(static_cast<std::size_t>(g));
            for (double& a : adv) a = gaussian(rng);
            const double m = mean_of(adv);
            for (double& a : adv) a -= m;
            bool zero = false;
            for (double a : adv) zero = zero || a == 0.0;
            if (zero) continue;
            const auto s_bar = random_weights(rng, static_cast<std::size_t>(g));
            ok = ok && asym(min_replace(s_bar), adv) <= asym(s_bar, adv) + 1e-15;
        }
        add("asym_minrep_reduction", ok);
    }

    {
        // statistical cancellation: weights independent of the advantages
        // cancel in expectation; weights coupled to them do not
        std::mt19937_64 rng(mix_seed(seed, 16));
        const int groups = 4000;
        double exch_sum = 0.0, exch_sq = 0.0, coup_sum = 0.0;
        for (int n = 0; n < groups; ++n) {
            std::vector<double> adv(4);
            for (double& a : adv) a = gaussian(rng);
            const double m = mean_of(adv);
            for (double& a : adv) a -= m;
            const auto w = random_weights(rng, 4);
            double exch = 0.0, coup = 0.0;
            for (std::size_t i = 0; i < 4; ++i) {
                exch += w[i] * adv[i];
                coup += (1.0 + 0.5 * adv[i]) * adv[i];
            }
            exch_sum += exch;
            exch_sq += exch * exch;
            coup_sum += coup;
        }
        const double exch_mean = exch_sum / groups;
        const double exch_se = std::sqrt((exch_sq / groups - exch_mean * exch_mean) / groups);
        add("statistical_cancellation",
            std::abs(exch_mean) < 3.0 * exch_se && coup_sum / groups > 0.5,
            "exchangeable mean " + format_double(exch_mean) + ", coupled mean " +
                format_double(coup_sum / groups));
    }

    // --- harness ------------------------------------------------------------
    {
        ExperimentConfig cfg;
        cfg.scenario = "toy_unified";
        cfg.estimator.family = EstimatorFamily::gspo_seq;
        cfg.steps = 5;
        cfg.seed = 7;
        const std::string a = render_csv(run_scenario(cfg));
        const std::string b = render_csv(run_scenario(cfg));
        add("run_determinism", a == b);

        const RunRecord rec = run_scenario(cfg);
        const bool s0 = std::abs(rec.at(0, "s_min") - 1.0) < 1e-12 &&
                        std::abs(rec.at(0, "s_max") - 1.0) < 1e-12;
        add("step0_weights_are_one", s0);
    }

    return checks;
}

}  // namespace groupgrad::verify
