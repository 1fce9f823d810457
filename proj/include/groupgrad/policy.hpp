/**
 * Tabular autoregressive softmax policy.
 *
 * The policy maps a context (prompt id + token prefix) to a logit vector of
 * vocabulary size.  Everything is exact and dense per context: closed-form
 * log-probabilities, score-function gradients, conditional Fisher matrices,
 * and conditional KL divergences.  Parameter blocks are created lazily from
 * a base logit vector; reads never mutate the table, so evaluation is safe
 * for concurrent readers while updates require exclusive access.
 */
#pragma once

#include <compare>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "groupgrad/core.hpp"

namespace groupgrad {

class VocabSpec {
public:
    explicit VocabSpec(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
        if (tokens_.size() < 2) throw std::invalid_argument("vocabulary needs at least 2 tokens");
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
                throw std::invalid_argument("duplicate token symbol: " + tokens_[i]);
        }
    }

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::string& symbol(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

    TokenId id_of(const std::string& symbol) const {
        auto it = index_.find(symbol);
        if (it == index_.end()) throw std::invalid_argument("unknown token symbol: " + symbol);
        return it->second;
    }

    bool contains(const std::string& symbol) const { return index_.count(symbol) > 0; }

private:
    std::vector<std::string> tokens_;
    std::map<std::string, TokenId> index_;
};

/// Exact context key: prompt id plus full token prefix.  Ordering is
/// lexicographic so std::map iteration (and hence every reduction in the
/// library) is deterministic.
struct Context {
    std::string prompt_id;
    std::vector<TokenId> prefix;

    auto operator<=>(const Context&) const = default;
};

/// θ: a dense logit table over visited contexts.
class PolicyParams {
public:
    PolicyParams(VocabSpec vocab, int t_max = 8)
        : vocab_(std::move(vocab)),
          t_max_(t_max),
          base_logits_(static_cast<std::size_t>(vocab_.size()), 0.0) {
        if (t_max_ < 1) throw std::invalid_argument("t_max must be >= 1");
    }

    const VocabSpec& vocab() const { return vocab_; }
    int vocab_size() const { return vocab_.size(); }
    int t_max() const { return t_max_; }

    void register_prompt(const std::string& prompt_id) { prompts_.insert(prompt_id); }
    bool prompt_known(const std::string& prompt_id) const { return prompts_.count(prompt_id) > 0; }

    void set_base_logits(std::vector<double> base) {
        if (static_cast<int>(base.size()) != vocab_.size())
            throw std::invalid_argument("base logits size must match vocabulary");
        base_logits_ = std::move(base);
    }
    const std::vector<double>& base_logits() const { return base_logits_; }

    void check_context(const Context& ctx) const {
        if (!prompt_known(ctx.prompt_id))
            throw ConfigError("unknown prompt id: " + ctx.prompt_id);
        if (static_cast<int>(ctx.prefix.size()) > t_max_)
            throw std::invalid_argument("context prefix exceeds t_max");
    }

    /// Read-only logits: stored block if present, otherwise the base vector.
    /// Never inserts, so concurrent readers are safe.
    const std::vector<double>& logits(const Context& ctx) const {
        check_context(ctx);
        auto it = table_.find(ctx);
        return it == table_.end() ? base_logits_ : it->second;
    }

    /// Materializes the block on first write.
    std::vector<double>& mutable_logits(const Context& ctx) {
        check_context(ctx);
        auto [it, inserted] = table_.try_emplace(ctx, base_logits_);
        return it->second;
    }

    void touch(const Context& ctx) { (void)mutable_logits(ctx); }

    const std::map<Context, std::vector<double>>& table() const { return table_; }
    std::map<Context, std::vector<double>>& table() { return table_; }

private:
    VocabSpec vocab_;
    int t_max_;
    std::vector<double> base_logits_;
    std::set<std::string> prompts_;
    std::map<Context, std::vector<double>> table_;
};

/// Parameter-shaped sparse vector: one V-sized block per touched context.
/// Missing contexts act as zero blocks in all arithmetic.
class GradientVector {
public:
    std::map<Context, std::vector<double>>& entries() { return entries_; }
    const std::map<Context, std::vector<double>>& entries() const { return entries_; }

    bool empty() const { return entries_.empty(); }

    std::vector<double>& block(const Context& ctx, int vocab_size) {
        auto [it, inserted] =
            entries_.try_emplace(ctx, static_cast<std::size_t>(vocab_size), 0.0);
        if (static_cast<int>(it->second.size()) != vocab_size)
            throw std::invalid_argument("gradient block size mismatch");
        return it->second;
    }

    const std::vector<double>* find_block(const Context& ctx) const {
        auto it = entries_.find(ctx);
        return it == entries_.end() ? nullptr : &it->second;
    }

    /// this += a * other
    void axpy(double a, const GradientVector& other) {
        for (const auto& [ctx, blk] : other.entries_) {
            auto& dst = block(ctx, static_cast<int>(blk.size()));
            for (std::size_t i = 0; i < blk.size(); ++i) dst[i] += a * blk[i];
        }
    }

    void scale(double a) {
        for (auto& [ctx, blk] : entries_)
            for (double& x : blk) x *= a;
    }

    double dot(const GradientVector& other) const {
        double acc = 0.0;
        for (const auto& [ctx, blk] : entries_) {
            const auto* ob = other.find_block(ctx);
            if (!ob) continue;
            for (std::size_t i = 0; i < blk.size(); ++i) acc += blk[i] * (*ob)[i];
        }
        return acc;
    }

    double norm() const { return std::sqrt(dot(*this)); }

    GradientVector restricted_to(const Context& ctx) const {
        GradientVector out;
        if (const auto* blk = find_block(ctx)) out.entries_[ctx] = *blk;
        return out;
    }

private:
    std::map<Context, std::vector<double>> entries_;
};

using Matrix = std::vector<std::vector<double>>;

/// log π(token | ctx) = logit[token] - logsumexp(logits).
inline double log_prob(const PolicyParams& params, const Context& ctx, TokenId token) {
    if (token < 0 || token >= params.vocab_size())
        throw std::invalid_argument("token id out of range");
    const auto& lg = params.logits(ctx);
    return lg[static_cast<std::size_t>(token)] - logsumexp(lg);
}

inline std::vector<Context> context_chain(const std::string& prompt_id,
                                          std::span<const TokenId> tokens) {
    std::vector<Context> chain;
    chain.reserve(tokens.size());
    Context ctx{prompt_id, {}};
    for (TokenId t : tokens) {
        chain.push_back(ctx);
        ctx.prefix.push_back(t);
    }
    return chain;
}

inline double sequence_log_prob(const PolicyParams& params, const std::string& prompt_id,
                                std::span<const TokenId> tokens) {
    if (tokens.empty()) throw std::invalid_argument("sequence must be nonempty");
    if (static_cast<int>(tokens.size()) > params.t_max())
        throw std::invalid_argument("sequence exceeds t_max");
    double acc = 0.0;
    Context ctx{prompt_id, {}};
    for (TokenId t : tokens) {
        acc += log_prob(params, ctx, t);
        ctx.prefix.push_back(t);
    }
    return acc;
}

/// Adds coeff * (onehot(token) - softmax(logits)) onto the ctx block of g.
inline void accumulate_score(GradientVector& g, const PolicyParams& params, const Context& ctx,
                             TokenId token, double coeff) {
    if (token < 0 || token >= params.vocab_size())
        throw std::invalid_argument("token id out of range");
    const auto p = softmax(params.logits(ctx));
    auto& blk = g.block(ctx, params.vocab_size());
    for (std::size_t i = 0; i < p.size(); ++i) blk[i] -= coeff * p[i];
    blk[static_cast<std::size_t>(token)] += coeff;
}

/// ∇_θ log π(token | ctx); nonzero only on the ctx block.
inline GradientVector score_gradient(const PolicyParams& params, const Context& ctx,
                                     TokenId token) {
    GradientVector g;
    accumulate_score(g, params, ctx, token, 1.0);
    return g;
}

/// Conditional Fisher matrix diag(p) - p p^T at ctx.
inline Matrix fisher_matrix(const PolicyParams& params, const Context& ctx) {
    const auto p = softmax(params.logits(ctx));
    const std::size_t v = p.size();
    Matrix f(v, std::vector<double>(v, 0.0));
    for (std::size_t i = 0; i < v; ++i) {
        for (std::size_t j = 0; j < v; ++j) f[i][j] = -p[i] * p[j];
        f[i][i] += p[i];
    }
    return f;
}

inline double quadratic_form(const Matrix& m, std::span<const double> v) {
    double acc = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i)
        for (std::size_t j = 0; j < m[i].size(); ++j) acc += v[i] * m[i][j] * v[j];
    return acc;
}

/// KL(π_a(.|ctx) || π_b(.|ctx)).
inline double kl_conditional(const PolicyParams& params_a, const PolicyParams& params_b,
                             const Context& ctx) {
    const auto& la = params_a.logits(ctx);
    const auto& lb = params_b.logits(ctx);
    const double za = logsumexp(la);
    const double zb = logsumexp(lb);
    double acc = 0.0;
    for (std::size_t i = 0; i < la.size(); ++i) {
        const double pa = std::exp(la[i] - za);
        acc += pa * ((la[i] - za) - (lb[i] - zb));
    }
    return acc;
}

/// θ+ = θ + eta * grad, blockwise; untouched contexts are unchanged.
inline PolicyParams apply_update(const PolicyParams& params, const GradientVector& grad,
                                 double eta) {
    if (!std::isfinite(eta)) throw std::invalid_argument("eta must be finite");
    PolicyParams out = params;
    for (const auto& [ctx, blk] : grad.entries()) {
        auto& dst = out.mutable_logits(ctx);
        if (blk.size() != dst.size()) throw std::invalid_argument("gradient block size mismatch");
        for (std::size_t i = 0; i < blk.size(); ++i) dst[i] += eta * blk[i];
    }
    return out;
}

/// Central finite differences of f over every stored parameter of params.
/// The oracle counterpart to the analytic gradients above.
inline GradientVector finite_diff_gradient(const std::function<double(const PolicyParams&)>& f,
                                           const PolicyParams& params, double step) {
    if (!(step > 0.0)) throw std::invalid_argument("step must be positive");
    PolicyParams work = params;
    GradientVector g;
    for (auto& [ctx, blk] : work.table()) {
        auto& out = g.block(ctx, static_cast<int>(blk.size()));
        for (std::size_t i = 0; i < blk.size(); ++i) {
            const double saved = blk[i];
            blk[i] = saved + step;
            const double fp = f(work);
            blk[i] = saved - step;
            const double fm = f(work);
            blk[i] = saved;
            out[i] = (fp - fm) / (2.0 * step);
        }
    }
    return g;
}

}  // namespace groupgrad
