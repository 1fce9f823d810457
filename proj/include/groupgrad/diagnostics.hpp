/**
 * Mechanism metrics and prediction checks: modulation asymmetry, per-bucket
 * gradient energy, second-difference jitter, conditional KL drift against
 * its Fisher quadratic-form prediction, log-odds between sequences, entropy
 * over an equivalent-solution set, and steps-to-threshold.
 */
#pragma once

#include <climits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "groupgrad/policy.hpp"

namespace groupgrad {

struct TimeSeries {
    std::string name;
    std::vector<double> values;
};

/// Partition of the in-use vocabulary by token occurrence count.  Default
/// boundaries are logarithmic: counts 1, 2-3, 4-7, and 8+.
struct FrequencyBuckets {
    std::vector<std::pair<int, int>> bounds;  // inclusive [lo, hi]
    std::map<TokenId, int> counts;

    static FrequencyBuckets from_counts(std::map<TokenId, int> counts) {
        FrequencyBuckets b;
        b.bounds = {{1, 1}, {2, 3}, {4, 7}, {8, INT_MAX}};
        b.counts = std::move(counts);
        return b;
    }

    std::size_t size() const { return bounds.size(); }

    /// Bucket index for a token, or -1 if the token never occurred.
    int bucket_of(TokenId token) const {
        auto it = counts.find(token);
        if (it == counts.end() || it->second <= 0) return -1;
        for (std::size_t k = 0; k < bounds.size(); ++k)
            if (it->second >= bounds[k].first && it->second <= bounds[k].second)
                return static_cast<int>(k);
        return -1;
    }
};

/// Var_i(w_i * A_i), population form.  The group's non-cancellation proxy.
inline double asym(const std::vector<double>& weights, const std::vector<double>& adv) {
    if (weights.size() != adv.size() || weights.size() < 2)
        throw std::invalid_argument("asym needs matching vectors of size >= 2");
    std::vector<double> prod(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) prod[i] = weights[i] * adv[i];
    return variance_of(prod);
}

struct EnergyShares {
    std::vector<double> shares;
    bool zero_total = false;
};

/// Per-bucket share of the total per-token gradient norm.
inline EnergyShares energy(const std::vector<std::pair<TokenId, double>>& per_token_grad_norms,
                           const FrequencyBuckets& buckets) {
    EnergyShares out;
    out.shares.assign(buckets.size(), 0.0);
    double total = 0.0;
    for (const auto& [token, norm] : per_token_grad_norms) {
        const int k = buckets.bucket_of(token);
        if (k >= 0) out.shares[static_cast<std::size_t>(k)] += norm;
        total += norm;
    }
    if (total <= 0.0) {
        out.zero_total = true;
        for (double& s : out.shares) s = 0.0;
        return out;
    }
    for (double& s : out.shares) s /= total;
    return out;
}

/// Mean absolute second difference of a series; zero on any affine series.
inline double jitter2(const std::vector<double>& series) {
    const std::size_t n = series.size();
    if (n < 3) throw std::invalid_argument("jitter2 needs at least 3 points");
    double acc = 0.0;
    for (std::size_t t = 0; t + 2 < n; ++t)
        acc += std::abs(series[t + 2] - 2.0 * series[t + 1] + series[t]);
    return acc / static_cast<double>(n - 2);
}

struct KlDrift {
    double measured = 0.0;
    double predicted = 0.0;  // 0.5 eta^2 g_block^T F(h*) g_block
};

/// Applies theta+ = theta + eta * g restricted to the h_star block and
/// compares the conditional KL against the second-order prediction.
inline KlDrift kl_drift_check(const PolicyParams& params, const Context& h_star,
                              const GradientVector& g, double eta) {
    if (!(eta > 0.0)) throw std::invalid_argument("eta must be positive");
    KlDrift out;
    const GradientVector g_block = g.restricted_to(h_star);
    const auto* blk = g_block.find_block(h_star);
    if (!blk) return out;  // zero block: both stay 0
    const PolicyParams updated = apply_update(params, g_block, eta);
    out.measured = kl_conditional(updated, params, h_star);
    out.predicted = 0.5 * eta * eta * quadratic_form(fisher_matrix(params, h_star), *blk);
    return out;
}

/// Same check but applying the whole gradient; the conditional KL at h_star
/// only depends on that block, so measured coincides with the restricted
/// variant.  Exposed for exploratory use.
inline KlDrift kl_drift_check_full(const PolicyParams& params, const Context& h_star,
                                   const GradientVector& g, double eta) {
    if (!(eta > 0.0)) throw std::invalid_argument("eta must be positive");
    KlDrift out;
    const PolicyParams updated = apply_update(params, g, eta);
    out.measured = kl_conditional(updated, params, h_star);
    if (const auto* blk = g.find_block(h_star))
        out.predicted = 0.5 * eta * eta * quadratic_form(fisher_matrix(params, h_star), *blk);
    return out;
}

inline double log_odds(const PolicyParams& params, const std::string& prompt_id,
                       std::span<const TokenId> y_a, std::span<const TokenId> y_b) {
    return sequence_log_prob(params, prompt_id, y_a) - sequence_log_prob(params, prompt_id, y_b);
}

/// Shannon entropy (nats) of the policy renormalized over the given set of
/// sequences.
inline double equiv_set_entropy(const PolicyParams& params, const std::string& prompt_id,
                                const std::vector<std::vector<TokenId>>& members) {
    if (members.size() < 2) throw std::invalid_argument("equivalent set needs >= 2 members");
    std::vector<double> lp;
    lp.reserve(members.size());
    for (const auto& y : members) lp.push_back(sequence_log_prob(params, prompt_id, y));
    const double z = logsumexp(lp);
    double h = 0.0;
    for (double l : lp) {
        const double p = std::exp(l - z);
        if (p > 0.0) h -= p * (l - z);
    }
    return h;
}

inline std::optional<std::size_t> steps_to_threshold(const std::vector<double>& series,
                                                     double kappa) {
    for (std::size_t i = 0; i < series.size(); ++i)
        if (series[i] >= kappa) return i;
    return std::nullopt;
}

}  // namespace groupgrad
