/**
 * Gradient estimators for the group-relative objective families.
 *
 * Every family reduces to the same template: a per-token scalar coefficient
 * times the score direction at that token, summed over the group and divided
 * by G.  The families differ only in how the coefficient is built:
 *
 *   grpo_token    A_i * alpha * r_{i,t}
 *   grpo_clipped  A_i * alpha * r_{i,t}            if the unclipped branch of
 *                                                  min(rA, clip(r)A) is active,
 *                 0                                otherwise
 *   grpo_symclip  A_i * alpha * clip(r, 0, 1+eps)  (clip frozen, sign-blind)
 *   gspo_seq      A_i * s_i * alpha                (s differentiated)
 *   gspo_clipped  like gspo_seq when the unclipped branch of min(sA, cA) is
 *                 active, 0 otherwise
 *
 * alpha is 1/T_i under length normalization and 1 otherwise; the sequence
 * weight s_i is the geometric-mean ratio under length normalization and the
 * raw product otherwise (the two choices are what make the respective
 * objective's analytic gradient come out of the template).
 *
 * Branch rule at clip ties: the unclipped branch wins, and the subgradient
 * at clip kinks is the interior derivative.
 */
#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "groupgrad/rollout.hpp"

namespace groupgrad {

enum class EstimatorFamily { grpo_token, grpo_clipped, grpo_symclip, gspo_seq, gspo_clipped };

inline const char* to_string(EstimatorFamily f) {
    switch (f) {
        case EstimatorFamily::grpo_token: return "grpo_token";
        case EstimatorFamily::grpo_clipped: return "grpo_clipped";
        case EstimatorFamily::grpo_symclip: return "grpo_symclip";
        case EstimatorFamily::gspo_seq: return "gspo_seq";
        case EstimatorFamily::gspo_clipped: return "gspo_clipped";
    }
    throw std::logic_error("unreachable");
}

inline EstimatorFamily estimator_family_from_string(const std::string& s) {
    if (s == "grpo_token") return EstimatorFamily::grpo_token;
    if (s == "grpo_clipped") return EstimatorFamily::grpo_clipped;
    if (s == "grpo_symclip") return EstimatorFamily::grpo_symclip;
    if (s == "gspo_seq") return EstimatorFamily::gspo_seq;
    if (s == "gspo_clipped") return EstimatorFamily::gspo_clipped;
    throw ConfigError("unknown estimator family: " + s);
}

inline bool is_clipping_family(EstimatorFamily f) {
    return f == EstimatorFamily::grpo_clipped || f == EstimatorFamily::grpo_symclip ||
           f == EstimatorFamily::gspo_clipped;
}

struct EstimatorSpec {
    EstimatorFamily family = EstimatorFamily::gspo_seq;
    double clip_eps = 0.2;
    bool length_norm = true;

    void validate() const {
        if (clip_eps < 0.0) throw ConfigError("clip_eps must be >= 0");
        if (is_clipping_family(family) && clip_eps >= 1.0)
            throw ConfigError("clip_eps must be < 1 for clipping families");
    }
};

/// Weight pipeline stages for one group: raw s, clipped c, sign-aware
/// post-clip s_bar, and the transformed s_tilde filled in by the transforms
/// module.
struct WeightStages {
    std::vector<double> s;
    std::vector<double> c;
    std::vector<double> s_bar;
    std::vector<double> s_tilde;
    bool degenerate = false;
};

inline double clip(double x, double lo, double hi) { return std::min(std::max(x, lo), hi); }

/// Sequence weight under the active normalization convention.
inline double seq_weight(const PolicyParams& params, const Trajectory& traj, bool length_norm) {
    return length_norm ? sequence_weight(params, traj) : sequence_weight_raw(params, traj);
}

inline std::vector<double> seq_weights(const PolicyParams& params, const GroupBatch& group,
                                       bool length_norm) {
    std::vector<double> s;
    s.reserve(group.trajectories.size());
    for (const auto& traj : group.trajectories) s.push_back(seq_weight(params, traj, length_norm));
    return s;
}

/// c_i = clip(s_i, 1-eps, 1+eps) and the sign-aware post-clip weight
///   s_bar_i = min(s_i, c_i) when A_i >= 0, max(s_i, c_i) when A_i < 0,
/// which satisfies A_i * s_bar_i = min(s_i A_i, c_i A_i) identically.
inline std::pair<std::vector<double>, std::vector<double>> postclip_weights(
    const std::vector<double>& s, const std::vector<double>& adv, double eps) {
    if (s.size() != adv.size()) throw std::invalid_argument("weights/advantages size mismatch");
    std::vector<double> c(s.size()), s_bar(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!(s[i] > 0.0)) throw std::invalid_argument("sequence weights must be positive");
        c[i] = clip(s[i], 1.0 - eps, 1.0 + eps);
        s_bar[i] = adv[i] >= 0.0 ? std::min(s[i], c[i]) : std::max(s[i], c[i]);
    }
    return {std::move(c), std::move(s_bar)};
}

/// True iff gradient flows through the unclipped branch of min(wA, clip(w)A);
/// ties go to the unclipped branch.
inline bool unclipped_branch_active(double w, double w_clipped, double adv) {
    return w * adv <= w_clipped * adv;
}

inline double alpha_factor(bool length_norm, int traj_len) {
    return length_norm ? 1.0 / static_cast<double>(traj_len) : 1.0;
}

/// The per-token scalar coefficients of the active family, including the
/// 1/G factor.  The gradient is exactly sum of coeff * score over all tokens;
/// the same numbers feed the per-token energy diagnostic.
inline std::vector<std::vector<double>> per_token_coefficients(const PolicyParams& params,
                                                               const GroupBatch& group,
                                                               const std::vector<double>& adv,
                                                               const EstimatorSpec& spec) {
    spec.validate();
    if (static_cast<int>(adv.size()) != group.size())
        throw std::invalid_argument("advantage vector size mismatch");
    const double inv_g = 1.0 / static_cast<double>(group.size());
    const auto ratios = token_ratios(params, group);
    const double lo = 1.0 - spec.clip_eps;
    const double hi = 1.0 + spec.clip_eps;

    std::vector<std::vector<double>> coeff(ratios.size());
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        const auto& traj = group.trajectories[i];
        const double a = adv[i];
        const double al = alpha_factor(spec.length_norm, traj.length());
        coeff[i].assign(ratios[i].size(), 0.0);

        switch (spec.family) {
            case EstimatorFamily::grpo_token:
                for (std::size_t t = 0; t < ratios[i].size(); ++t)
                    coeff[i][t] = inv_g * a * al * ratios[i][t];
                break;
            case EstimatorFamily::grpo_clipped:
                for (std::size_t t = 0; t < ratios[i].size(); ++t) {
                    const double r = ratios[i][t];
                    if (unclipped_branch_active(r, clip(r, lo, hi), a))
                        coeff[i][t] = inv_g * a * al * r;
                }
                break;
            case EstimatorFamily::grpo_symclip:
                for (std::size_t t = 0; t < ratios[i].size(); ++t)
                    coeff[i][t] = inv_g * a * al * clip(ratios[i][t], 0.0, hi);
                break;
            case EstimatorFamily::gspo_seq: {
                const double s = seq_weight(params, traj, spec.length_norm);
                for (std::size_t t = 0; t < ratios[i].size(); ++t) coeff[i][t] = inv_g * a * s * al;
                break;
            }
            case EstimatorFamily::gspo_clipped: {
                const double s = seq_weight(params, traj, spec.length_norm);
                if (unclipped_branch_active(s, clip(s, lo, hi), a))
                    for (std::size_t t = 0; t < ratios[i].size(); ++t)
                        coeff[i][t] = inv_g * a * s * al;
                break;
            }
        }
    }
    return coeff;
}

/// Template instantiation: sum coeff[i][t] * score(h_{i,t}, a_{i,t}).
inline GradientVector grad_weighted_scores(const PolicyParams& params, const GroupBatch& group,
                                           const std::vector<std::vector<double>>& coeff) {
    GradientVector g;
    for (std::size_t i = 0; i < group.trajectories.size(); ++i) {
        const auto& traj = group.trajectories[i];
        Context ctx{traj.prompt_id, {}};
        for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
            if (coeff[i][t] != 0.0) accumulate_score(g, params, ctx, traj.tokens[t], coeff[i][t]);
            ctx.prefix.push_back(traj.tokens[t]);
        }
    }
    return g;
}

inline GradientVector grad_estimator(const PolicyParams& params, const GroupBatch& group,
                                     const std::vector<double>& adv, const EstimatorSpec& spec) {
    return grad_weighted_scores(params, group, per_token_coefficients(params, group, adv, spec));
}

inline GradientVector grad_grpo_token(const PolicyParams& params, const GroupBatch& group,
                                      const std::vector<double>& adv, EstimatorSpec spec) {
    spec.family = EstimatorFamily::grpo_token;
    return grad_estimator(params, group, adv, spec);
}

inline GradientVector grad_gspo_seq(const PolicyParams& params, const GroupBatch& group,
                                    const std::vector<double>& adv, EstimatorSpec spec) {
    spec.family = EstimatorFamily::gspo_seq;
    return grad_estimator(params, group, adv, spec);
}

inline GradientVector grad_gspo_clipped(const PolicyParams& params, const GroupBatch& group,
                                        const std::vector<double>& adv, EstimatorSpec spec) {
    spec.family = EstimatorFamily::gspo_clipped;
    return grad_estimator(params, group, adv, spec);
}

inline GradientVector grad_grpo_clipped(const PolicyParams& params, const GroupBatch& group,
                                        const std::vector<double>& adv, EstimatorSpec spec) {
    spec.family = EstimatorFamily::grpo_clipped;
    return grad_estimator(params, group, adv, spec);
}

inline GradientVector grad_grpo_symclip(const PolicyParams& params, const GroupBatch& group,
                                        const std::vector<double>& adv, EstimatorSpec spec) {
    spec.family = EstimatorFamily::grpo_symclip;
    return grad_estimator(params, group, adv, spec);
}

/// Scalar objective value of the family at the current parameters (the
/// surrogate whose ascent direction grad_estimator follows; for grpo_symclip
/// this is the sign-blind weighted objective with the clip as a fixed
/// pointwise weight).
inline double surrogate_value(const PolicyParams& params, const GroupBatch& group,
                              const std::vector<double>& adv, const EstimatorSpec& spec) {
    spec.validate();
    const double inv_g = 1.0 / static_cast<double>(group.size());
    const auto ratios = token_ratios(params, group);
    const double lo = 1.0 - spec.clip_eps;
    const double hi = 1.0 + spec.clip_eps;
    double acc = 0.0;
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        const auto& traj = group.trajectories[i];
        const double a = adv[i];
        const double al = alpha_factor(spec.length_norm, traj.length());
        switch (spec.family) {
            case EstimatorFamily::grpo_token:
                for (double r : ratios[i]) acc += inv_g * a * al * r;
                break;
            case EstimatorFamily::grpo_clipped:
                for (double r : ratios[i]) acc += inv_g * al * std::min(r * a, clip(r, lo, hi) * a);
                break;
            case EstimatorFamily::grpo_symclip:
                for (double r : ratios[i]) acc += inv_g * a * al * clip(r, 0.0, hi);
                break;
            case EstimatorFamily::gspo_seq:
                acc += inv_g * a * seq_weight(params, traj, spec.length_norm);
                break;
            case EstimatorFamily::gspo_clipped: {
                const double s = seq_weight(params, traj, spec.length_norm);
                acc += inv_g * std::min(s * a, clip(s, lo, hi) * a);
                break;
            }
        }
    }
    return acc;
}

/// Asserts that every group member visits the same (context, token) pair at
/// step t_star and returns that pair.
inline std::pair<Context, TokenId> shared_pair_at(const GroupBatch& group, int t_star) {
    if (group.trajectories.empty()) throw std::invalid_argument("empty group");
    const auto& first = group.trajectories.front();
    if (t_star < 0 || t_star >= first.length())
        throw std::invalid_argument("t_star out of range");
    for (const auto& traj : group.trajectories) {
        if (traj.length() <= t_star ||
            !std::equal(first.tokens.begin(), first.tokens.begin() + t_star + 1,
                        traj.tokens.begin()) ||
            traj.prompt_id != first.prompt_id)
            throw std::invalid_argument("group members do not share the (context, token) pair");
    }
    Context ctx{first.prompt_id,
                std::vector<TokenId>(first.tokens.begin(), first.tokens.begin() + t_star)};
    return {std::move(ctx), first.tokens[static_cast<std::size_t>(t_star)]};
}

/// Diagnostic scalar multiplying the common score direction of a pair shared
/// by the whole group: sum_i weights_i * A_i / T_i.
inline double shared_token_coefficient(const GroupBatch& group, const std::vector<double>& weights,
                                       const std::vector<double>& adv, int t_star) {
    (void)shared_pair_at(group, t_star);
    if (weights.size() != adv.size() || static_cast<int>(weights.size()) != group.size())
        throw std::invalid_argument("weights/advantages size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i)
        acc += weights[i] * adv[i] / static_cast<double>(group.trajectories[i].length());
    return acc;
}

/// Per-trajectory effective weight applied to the shared token at t_star by
/// a clipping family, at the objective (weight) level: the sign-aware
/// post-clip weight for grpo_clipped, the sign-blind clip for grpo_symclip.
/// This is the quantity whose group aggregation breaks (or keeps) the
/// cancellation identity under mixed-sign advantages.
inline std::vector<double> effective_clip_weights_at(const PolicyParams& params,
                                                     const GroupBatch& group,
                                                     const std::vector<double>& adv, int t_star,
                                                     double eps, EstimatorFamily family) {
    (void)shared_pair_at(group, t_star);
    const auto ratios = token_ratios(params, group);
    std::vector<double> w(ratios.size());
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        const double r = ratios[i][static_cast<std::size_t>(t_star)];
        if (family == EstimatorFamily::grpo_symclip) {
            w[i] = clip(r, 0.0, 1.0 + eps);
        } else {
            const double rc = clip(r, 1.0 - eps, 1.0 + eps);
            w[i] = adv[i] >= 0.0 ? std::min(r, rc) : std::max(r, rc);
        }
    }
    return w;
}

}  // namespace groupgrad
