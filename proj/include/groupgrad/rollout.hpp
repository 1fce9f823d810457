/**
 * Group rollout machinery: ancestral sampling from a frozen old policy,
 * terminal reward assignment, group-relative advantages, and importance
 * ratios against the cached old-policy log-probabilities.
 */
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "groupgrad/policy.hpp"

namespace groupgrad {

struct Trajectory {
    std::string prompt_id;
    std::vector<TokenId> tokens;
    double reward = 0.0;
    bool reward_set = false;
    std::vector<double> old_logps;  // cached at sampling time, one per token
    bool truncated = false;         // hit T_max without the terminator

    int length() const { return static_cast<int>(tokens.size()); }
};

enum class AdvantageMode { mean, standardized };

inline const char* to_string(AdvantageMode m) {
    return m == AdvantageMode::mean ? "mean" : "standardized";
}

inline AdvantageMode advantage_mode_from_string(const std::string& s) {
    if (s == "mean") return AdvantageMode::mean;
    if (s == "standardized") return AdvantageMode::standardized;
    throw ConfigError("unknown advantage mode: " + s);
}

struct GroupBatch {
    std::string prompt_id;
    std::vector<Trajectory> trajectories;
    std::vector<double> advantages;  // empty until computed; always zero-mean
    AdvantageMode mode = AdvantageMode::mean;
    bool degenerate = false;  // zero reward spread under standardization

    int size() const { return static_cast<int>(trajectories.size()); }
    bool rewards_set() const {
        for (const auto& t : trajectories)
            if (!t.reward_set) return false;
        return !trajectories.empty();
    }
};

/// Terminal verifier: full token sequence -> scalar reward.
using RewardFn = std::function<double(const std::vector<TokenId>&)>;

/// Builds a verifier from its registered name.  Supported forms:
///   constant:<x>
///   final_token_equals:<symbol>
///   final_token_ends_with:<suffix>
///   contains_token:<symbol>
/// "final" skips a trailing end-of-sequence token when one is designated.
inline RewardFn make_reward_fn(const std::string& name, const VocabSpec& vocab,
                               std::optional<TokenId> eos = std::nullopt) {
    const auto colon = name.find(':');
    const std::string kind = name.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : name.substr(colon + 1);

    auto last_content_token = [eos](const std::vector<TokenId>& tokens) -> std::optional<TokenId> {
        for (auto it = tokens.rbegin(); it != tokens.rend(); ++it)
            if (!eos || *it != *eos) return *it;
        return std::nullopt;
    };

    if (kind == "constant") {
        const double v = std::stod(arg);
        return [v](const std::vector<TokenId>&) { return v; };
    }
    if (kind == "final_token_equals") {
        const TokenId want = vocab.id_of(arg);
        return [want, last_content_token](const std::vector<TokenId>& tokens) {
            const auto last = last_content_token(tokens);
            return (last && *last == want) ? 1.0 : 0.0;
        };
    }
    if (kind == "final_token_ends_with") {
        // match on the symbol text so e.g. "20." accepts both "20." and "10+10=20."
        return [arg, &vocab, last_content_token](const std::vector<TokenId>& tokens) {
            const auto last = last_content_token(tokens);
            if (!last) return 0.0;
            const std::string& sym = vocab.symbol(*last);
            return sym.size() >= arg.size() && sym.compare(sym.size() - arg.size(), arg.size(), arg) == 0
                       ? 1.0
                       : 0.0;
        };
    }
    if (kind == "contains_token") {
        const TokenId want = vocab.id_of(arg);
        return [want](const std::vector<TokenId>& tokens) {
            for (TokenId t : tokens)
                if (t == want) return 1.0;
            return 0.0;
        };
    }
    throw ConfigError("unknown reward function: " + name);
}

/// G independent ancestral samples from params_old.  Tokens are drawn by
/// inverse CDF over the conditional softmax using a 53-bit uniform, so a
/// fixed seed reproduces the group bit-exactly on any platform.  A designated
/// eos token terminates a trajectory; otherwise it is cut at t_max and
/// flagged truncated.
inline GroupBatch sample_group(const PolicyParams& params_old, const std::string& prompt_id,
                               int group_size, int t_max, std::uint64_t seed,
                               std::optional<TokenId> eos = std::nullopt) {
    if (group_size < 2) throw std::invalid_argument("group size must be >= 2");
    if (!params_old.prompt_known(prompt_id)) throw ConfigError("unknown prompt id: " + prompt_id);

    std::mt19937_64 rng(seed);
    GroupBatch group;
    group.prompt_id = prompt_id;
    group.trajectories.reserve(static_cast<std::size_t>(group_size));

    for (int i = 0; i < group_size; ++i) {
        Trajectory traj;
        traj.prompt_id = prompt_id;
        Context ctx{prompt_id, {}};
        for (int t = 0; t < t_max; ++t) {
            const auto& lg = params_old.logits(ctx);
            const double lse = logsumexp(lg);
            const double u = canonical(rng);
            double cum = 0.0;
            TokenId drawn = static_cast<TokenId>(lg.size() - 1);
            for (std::size_t k = 0; k < lg.size(); ++k) {
                cum += std::exp(lg[k] - lse);
                if (u < cum) {
                    drawn = static_cast<TokenId>(k);
                    break;
                }
            }
            traj.tokens.push_back(drawn);
            traj.old_logps.push_back(lg[static_cast<std::size_t>(drawn)] - lse);
            ctx.prefix.push_back(drawn);
            if (eos && drawn == *eos) break;
        }
        traj.truncated = !(eos && !traj.tokens.empty() && traj.tokens.back() == *eos);
        group.trajectories.push_back(std::move(traj));
    }
    return group;
}

inline void assign_rewards(GroupBatch& group, const RewardFn& reward_fn) {
    for (auto& traj : group.trajectories) {
        if (traj.reward_set) throw std::invalid_argument("rewards already assigned");
        const double r = reward_fn(traj.tokens);
        if (!std::isfinite(r)) throw std::invalid_argument("reward function produced a non-finite value");
        traj.reward = r;
        traj.reward_set = true;
    }
}

inline std::vector<double> rewards_of(const GroupBatch& group) {
    std::vector<double> r;
    r.reserve(group.trajectories.size());
    for (const auto& t : group.trajectories) {
        if (!t.reward_set) throw std::invalid_argument("rewards not assigned");
        r.push_back(t.reward);
    }
    return r;
}

/// A_i = R_i - mean(R).
inline std::vector<double> advantages_mean(const GroupBatch& group) {
    auto r = rewards_of(group);
    const double m = mean_of(r);
    for (double& x : r) x -= m;
    return r;
}

/// A_i = (R_i - mean) / population std; a spread below 1e-12 zeroes the
/// vector and flags the group degenerate instead of dividing by ~0.
inline std::vector<double> advantages_standardized(const GroupBatch& group,
                                                   bool* degenerate = nullptr) {
    auto a = advantages_mean(group);
    const double sd = std::sqrt(variance_of(a));
    if (degenerate) *degenerate = false;
    if (sd < 1e-12) {
        if (degenerate) *degenerate = true;
        for (double& x : a) x = 0.0;
        return a;
    }
    for (double& x : a) x /= sd;
    return a;
}

inline void set_advantages(GroupBatch& group, AdvantageMode mode) {
    group.mode = mode;
    if (mode == AdvantageMode::mean) {
        group.advantages = advantages_mean(group);
        group.degenerate = variance_of(group.advantages) < 1e-24;
    } else {
        group.advantages = advantages_standardized(group, &group.degenerate);
    }
}

/// r_{i,t} = exp(log pi_theta - cached old logp); positive by construction.
inline std::vector<std::vector<double>> token_ratios(const PolicyParams& params,
                                                     const GroupBatch& group) {
    std::vector<std::vector<double>> out;
    out.reserve(group.trajectories.size());
    for (const auto& traj : group.trajectories) {
        std::vector<double> r(traj.tokens.size());
        Context ctx{traj.prompt_id, {}};
        for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
            r[t] = std::exp(log_prob(params, ctx, traj.tokens[t]) - traj.old_logps[t]);
            ctx.prefix.push_back(traj.tokens[t]);
        }
        out.push_back(std::move(r));
    }
    return out;
}

/// Length-normalized sequence weight: the geometric mean of token ratios,
/// computed in log space.
inline double sequence_weight(const PolicyParams& params, const Trajectory& traj) {
    if (traj.tokens.empty()) throw std::invalid_argument("trajectory must be nonempty");
    double acc = 0.0;
    Context ctx{traj.prompt_id, {}};
    for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
        acc += log_prob(params, ctx, traj.tokens[t]) - traj.old_logps[t];
        ctx.prefix.push_back(traj.tokens[t]);
    }
    return std::exp(acc / static_cast<double>(traj.tokens.size()));
}

/// Un-normalized sequence weight: the plain product of token ratios.
inline double sequence_weight_raw(const PolicyParams& params, const Trajectory& traj) {
    if (traj.tokens.empty()) throw std::invalid_argument("trajectory must be nonempty");
    double acc = 0.0;
    Context ctx{traj.prompt_id, {}};
    for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
        acc += log_prob(params, ctx, traj.tokens[t]) - traj.old_logps[t];
        ctx.prefix.push_back(traj.tokens[t]);
    }
    return std::exp(acc);
}

/// Caches old_logps for every trajectory from the given (old) policy and
/// materializes the visited contexts in params so finite differences can see
/// them.  Used by replay-style scenarios and test constructions.
inline void cache_old_logps(GroupBatch& group, const PolicyParams& params_old) {
    for (auto& traj : group.trajectories) {
        traj.old_logps.resize(traj.tokens.size());
        Context ctx{traj.prompt_id, {}};
        for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
            traj.old_logps[t] = log_prob(params_old, ctx, traj.tokens[t]);
            ctx.prefix.push_back(traj.tokens[t]);
        }
    }
}

inline void materialize_group_contexts(PolicyParams& params, const GroupBatch& group) {
    for (const auto& traj : group.trajectories)
        for (const auto& ctx : context_chain(traj.prompt_id, traj.tokens)) params.touch(ctx);
}

}  // namespace groupgrad
