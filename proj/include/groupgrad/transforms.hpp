/**
 * Intra-group weight transformations and the decoupled gradient estimator.
 *
 * The transformations act on the group's weight vector (post-clip by
 * default) and return weights satisfying the group orthogonality condition
 * adv . s_tilde = 0 (orth_proj, positive_orth_proj_qp, truncate_rebalance)
 * or a group-constant weight (min_replace).  The decoupled estimator applies
 * the transformed weights as frozen scalars: no gradient flows through the
 * transformation or through the sequence weights it consumed.
 *
 * positive_orth_proj_qp solves min ||v - s_bar||^2 s.t. adv.v = 0, v >= 0
 * exactly by enumerating active sets over the 2^G sign patterns; it doubles
 * as the oracle for the closed-form truncate_rebalance path.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "groupgrad/objectives.hpp"

namespace groupgrad {

enum class TransformKind { identity, min_replace, orth_proj, positive_orth_proj_qp, truncate_rebalance };

inline const char* to_string(TransformKind k) {
    switch (k) {
        case TransformKind::identity: return "identity";
        case TransformKind::min_replace: return "min_replace";
        case TransformKind::orth_proj: return "orth_proj";
        case TransformKind::positive_orth_proj_qp: return "positive_orth_proj_qp";
        case TransformKind::truncate_rebalance: return "truncate_rebalance";
    }
    throw std::logic_error("unreachable");
}

inline TransformKind transform_kind_from_string(const std::string& s) {
    if (s == "identity") return TransformKind::identity;
    if (s == "min_replace") return TransformKind::min_replace;
    if (s == "orth_proj") return TransformKind::orth_proj;
    if (s == "positive_orth_proj_qp") return TransformKind::positive_orth_proj_qp;
    if (s == "truncate_rebalance") return TransformKind::truncate_rebalance;
    throw ConfigError("unknown transform kind: " + s);
}

struct TransformSpec {
    TransformKind kind = TransformKind::identity;
    double floor_eps = 1e-8;  // nonnegativity floor in truncate_rebalance
    bool stop_grad = true;    // transformed weights are frozen coefficients
    bool on_postclip = true;  // transform s_bar (clip first); false: transform raw s

    void validate() const {
        if (!(floor_eps > 0.0)) throw ConfigError("floor_eps must be > 0");
        if (!stop_grad)
            throw ConfigError("transform backpropagation is not a supported training mode");
    }
};

struct TransformResult {
    std::vector<double> s_tilde;
    bool degenerate = false;  // transform skipped, s_tilde is the input
};

/// Broadcast the group minimum: s_tilde_i = min_j s_bar_j.
inline std::vector<double> min_replace(const std::vector<double>& s_bar) {
    if (s_bar.empty()) throw std::invalid_argument("empty weight vector");
    for (double w : s_bar)
        if (!(w > 0.0)) throw std::invalid_argument("weights must be positive");
    const double lo = *std::min_element(s_bar.begin(), s_bar.end());
    return std::vector<double>(s_bar.size(), lo);
}

/// Euclidean projection onto the hyperplane adv . v = 0:
///   w_tilde = w - (adv.w / ||adv||^2) adv.
inline std::vector<double> orth_proj(const std::vector<double>& w, const std::vector<double>& adv,
                                     bool* degenerate = nullptr) {
    if (w.size() != adv.size()) throw std::invalid_argument("weights/advantages size mismatch");
    double a2 = 0.0, aw = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        a2 += adv[i] * adv[i];
        aw += adv[i] * w[i];
    }
    if (degenerate) *degenerate = false;
    if (a2 <= 0.0) {
        if (degenerate) *degenerate = true;
        return w;
    }
    std::vector<double> out(w.size());
    const double lam = aw / a2;
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] - lam * adv[i];
    return out;
}

inline bool advantages_have_both_signs(const std::vector<double>& adv) {
    bool pos = false, neg = false;
    for (double a : adv) {
        pos = pos || a > 0.0;
        neg = neg || a < 0.0;
    }
    return pos && neg;
}

/// Exact nonnegative orthogonal projection:
///   argmin 0.5 ||v - s_bar||^2  s.t.  adv.v = 0, v >= 0,
/// by enumerating which coordinates are pinned to zero (G <= 16).  For each
/// candidate active set the free coordinates are the plain hyperplane
/// projection; the cheapest primal-feasible candidate is the minimizer.
inline TransformResult positive_orth_proj_qp(const std::vector<double>& s_bar,
                                             const std::vector<double>& adv,
                                             double floor_eps = 1e-8) {
    (void)floor_eps;
    const std::size_t g = s_bar.size();
    if (g != adv.size()) throw std::invalid_argument("weights/advantages size mismatch");
    if (g > 16) throw std::invalid_argument("active-set enumeration supports G <= 16");
    if (!advantages_have_both_signs(adv)) return {s_bar, true};

    double best_obj = std::numeric_limits<double>::infinity();
    std::vector<double> best;
    std::vector<double> v(g);

    for (std::uint32_t mask = 0; mask < (1u << g); ++mask) {
        double a2 = 0.0, aw = 0.0;
        for (std::size_t i = 0; i < g; ++i) {
            if (mask & (1u << i)) continue;  // pinned to zero
            a2 += adv[i] * adv[i];
            aw += adv[i] * s_bar[i];
        }
        const double lam = a2 > 0.0 ? aw / a2 : 0.0;
        bool feasible = true;
        double dot = 0.0, obj = 0.0;
        for (std::size_t i = 0; i < g; ++i) {
            if (mask & (1u << i)) {
                v[i] = 0.0;
            } else {
                v[i] = s_bar[i] - lam * adv[i];
                if (v[i] < 0.0) {
                    feasible = false;
                    break;
                }
            }
            dot += adv[i] * v[i];
            obj += (v[i] - s_bar[i]) * (v[i] - s_bar[i]);
        }
        if (!feasible) continue;
        if (a2 == 0.0 && std::abs(dot) > 1e-12) continue;  // hyperplane unreachable on this set
        if (obj < best_obj) {
            best_obj = obj;
            best = v;
        }
    }
    if (best.empty()) return {s_bar, true};  // no feasible active set (degenerate data)
    return {std::move(best), false};
}

/// Closed-form nonnegative rebalancing: floor the weights at floor_eps, then
/// scale whichever advantage side overshoots so that adv . s_tilde returns
/// to zero.  alpha/beta land in (0, 1] whenever their branch triggers.
inline TransformResult truncate_rebalance(const std::vector<double>& s_bar,
                                          const std::vector<double>& adv, double floor_eps = 1e-8) {
    const std::size_t g = s_bar.size();
    if (g != adv.size()) throw std::invalid_argument("weights/advantages size mismatch");
    if (!advantages_have_both_signs(adv)) return {s_bar, true};

    std::vector<double> sp(g);
    for (std::size_t i = 0; i < g; ++i) sp[i] = std::max(s_bar[i], floor_eps);

    double pos_sum = 0.0, neg_sum = 0.0;  // adv-weighted side sums of sp
    for (std::size_t i = 0; i < g; ++i) {
        if (adv[i] > 0.0) pos_sum += adv[i] * sp[i];
        if (adv[i] < 0.0) neg_sum += adv[i] * sp[i];
    }
    // side sums this small make alpha/beta ill-conditioned; skip and flag
    if (pos_sum < 1e-10 || -neg_sum < 1e-10) return {std::move(sp), true};

    const double delta = pos_sum + neg_sum;
    if (delta > 0.0) {
        const double alpha = -neg_sum / pos_sum;
        for (std::size_t i = 0; i < g; ++i)
            if (adv[i] > 0.0) sp[i] *= alpha;
    } else if (delta < 0.0) {
        const double beta = -pos_sum / neg_sum;  // == pos_sum / (-neg_sum)
        for (std::size_t i = 0; i < g; ++i)
            if (adv[i] < 0.0) sp[i] *= beta;
    }
    return {std::move(sp), false};
}

inline TransformResult apply_transform(const TransformSpec& spec, const std::vector<double>& w,
                                       const std::vector<double>& adv) {
    spec.validate();
    switch (spec.kind) {
        case TransformKind::identity: return {w, false};
        case TransformKind::min_replace: return {min_replace(w), false};
        case TransformKind::orth_proj: {
            bool degenerate = false;
            auto out = orth_proj(w, adv, &degenerate);
            return {std::move(out), degenerate};
        }
        case TransformKind::positive_orth_proj_qp: return positive_orth_proj_qp(w, adv, spec.floor_eps);
        case TransformKind::truncate_rebalance: return truncate_rebalance(w, adv, spec.floor_eps);
    }
    throw std::logic_error("unreachable");
}

/// Full weight pipeline: s -> c -> s_bar (sign-aware clip) -> s_tilde.
/// All-zero advantage vectors skip the transform and flag the group.
inline WeightStages compute_weight_stages(const PolicyParams& params, const GroupBatch& group,
                                          const std::vector<double>& adv,
                                          const EstimatorSpec& espec, const TransformSpec& tspec) {
    WeightStages st;
    st.s = seq_weights(params, group, espec.length_norm);
    auto [c, s_bar] = postclip_weights(st.s, adv, espec.clip_eps);
    st.c = std::move(c);
    st.s_bar = std::move(s_bar);

    bool all_zero = true;
    for (double a : adv) all_zero = all_zero && a == 0.0;
    if (all_zero) {
        st.s_tilde = tspec.on_postclip ? st.s_bar : st.s;
        st.degenerate = true;
        return st;
    }
    auto res = apply_transform(tspec, tspec.on_postclip ? st.s_bar : st.s, adv);
    st.s_tilde = std::move(res.s_tilde);
    st.degenerate = res.degenerate;
    return st;
}

/// Decoupled estimator with injected weights: (1/G) sum_i w_i A_i sum_t
/// alpha_{i,t} score.  The weights enter as constants, which is the whole
/// point -- the gradient depends only on their numeric values, not on how
/// they were produced.
inline GradientVector grad_decoupled(const PolicyParams& params, const GroupBatch& group,
                                     const std::vector<double>& adv,
                                     const std::vector<double>& weights, bool length_norm) {
    if (weights.size() != adv.size() || static_cast<int>(weights.size()) != group.size())
        throw std::invalid_argument("weights/advantages size mismatch");
    const double inv_g = 1.0 / static_cast<double>(group.size());
    std::vector<std::vector<double>> coeff(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const auto& traj = group.trajectories[i];
        const double al = alpha_factor(length_norm, traj.length());
        coeff[i].assign(static_cast<std::size_t>(traj.length()), inv_g * weights[i] * adv[i] * al);
    }
    return grad_weighted_scores(params, group, coeff);
}

inline GradientVector grad_dfpo(const PolicyParams& params, const GroupBatch& group,
                                const std::vector<double>& adv, const EstimatorSpec& espec,
                                const TransformSpec& tspec) {
    const auto st = compute_weight_stages(params, group, adv, espec, tspec);
    return grad_decoupled(params, group, adv, st.s_tilde, espec.length_norm);
}

/// Shrinkage and bias analytics for min_replace on the post-clip weights.
struct BiasReport {
    std::vector<double> phi;      // per-trajectory shrink ratio s_bar_min / s_bar_i
    GradientVector bias_vector;   // single-sample g_min - g_base
    double bias_norm = 0.0;
    double bias_norm_bound = 0.0;  // (1/G) sum |A_i| (s_bar_i - s_bar_min) ||G_i||
    double trust_delta = 0.0;      // max_i |ln s_bar_i|
};

inline BiasReport minrep_bias_report(const PolicyParams& params, const GroupBatch& group,
                                     const std::vector<double>& adv, double clip_eps) {
    const auto s = seq_weights(params, group, /*length_norm=*/true);
    const auto [c, s_bar] = postclip_weights(s, adv, clip_eps);
    const double s_min = *std::min_element(s_bar.begin(), s_bar.end());
    const double inv_g = 1.0 / static_cast<double>(group.size());

    BiasReport rep;
    rep.phi.resize(s_bar.size());
    GradientVector g_base, g_min;
    for (std::size_t i = 0; i < s_bar.size(); ++i) {
        rep.phi[i] = s_min / s_bar[i];
        rep.trust_delta = std::max(rep.trust_delta, std::abs(std::log(s_bar[i])));

        // trajectory score sum G_i with alpha = 1/T_i
        const auto& traj = group.trajectories[i];
        GradientVector gi;
        Context ctx{traj.prompt_id, {}};
        const double al = 1.0 / static_cast<double>(traj.length());
        for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
            accumulate_score(gi, params, ctx, traj.tokens[t], al);
            ctx.prefix.push_back(traj.tokens[t]);
        }
        g_base.axpy(inv_g * adv[i] * s_bar[i], gi);
        g_min.axpy(inv_g * adv[i] * s_min, gi);
        rep.bias_norm_bound += inv_g * std::abs(adv[i]) * (s_bar[i] - s_min) * gi.norm();
    }
    rep.bias_vector = g_min;
    rep.bias_vector.axpy(-1.0, g_base);
    rep.bias_norm = rep.bias_vector.norm();
    return rep;
}

}  // namespace groupgrad
