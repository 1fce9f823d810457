#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "groupgrad/transforms.hpp"
#include "test_support.hpp"

using namespace groupgrad;
using ggtest::lognormal_weights;
using ggtest::make_shared_pair;
using ggtest::make_world;
using ggtest::max_block_abs_diff;
using ggtest::pin_ratio;
using ggtest::zero_mean_gaussians;

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double dist2(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return acc;
}

// orthonormal basis of the nullspace of adv^T (Gram-Schmidt over the
// standard basis); oracle machinery for the grid searches
std::vector<std::vector<double>> nullspace_basis(const std::vector<double>& adv) {
    const std::size_t g = adv.size();
    std::vector<std::vector<double>> basis;
    const double a2 = dot(adv, adv);
    for (std::size_t k = 0; k < g && basis.size() < g - 1; ++k) {
        std::vector<double> v(g, 0.0);
        v[k] = 1.0;
        for (std::size_t i = 0; i < g; ++i) v[i] -= adv[i] * adv[k] / a2;
        for (const auto& b : basis) {
            const double c = dot(v, b);
            for (std::size_t i = 0; i < g; ++i) v[i] -= c * b[i];
        }
        const double n = std::sqrt(dot(v, v));
        if (n < 1e-9) continue;
        for (double& x : v) x /= n;
        basis.push_back(std::move(v));
    }
    return basis;
}

}  // namespace

TEST_CASE("min_replace broadcasts the group minimum") {
    CHECK(min_replace({0.8, 1.2, 1.0}) == std::vector<double>{0.8, 0.8, 0.8});
    CHECK(min_replace({1.1, 1.1}) == std::vector<double>{1.1, 1.1});
    CHECK_THROWS_AS(min_replace({1.0, -0.5}), std::invalid_argument);

    std::mt19937_64 rng(1);
    for (int n = 0; n < 1000; ++n) {
        const auto w = lognormal_weights(rng, 2 + static_cast<std::size_t>(canonical(rng) * 6));
        const auto out = min_replace(w);
        CHECK(*std::min_element(out.begin(), out.end()) ==
              *std::min_element(w.begin(), w.end()));
        for (double x : out) CHECK(x == out[0]);  // exactly constant
        CHECK(variance_of(out) < 1e-30);
    }
}

TEST_CASE("orth_proj projects onto the advantage-orthogonal hyperplane") {
    const auto w = orth_proj({1.0, 2.0}, {1.0, -1.0});
    CHECK(w[0] == Catch::Approx(1.5));
    CHECK(w[1] == Catch::Approx(1.5));
    CHECK(dot(w, {1.0, -1.0}) == Catch::Approx(0.0).margin(1e-12));

    // already orthogonal: identity
    const std::vector<double> base = {1.5, 1.5};
    CHECK(orth_proj(base, {1.0, -1.0}) == base);

    // zero advantage vector: flagged, input returned
    bool degenerate = false;
    CHECK(orth_proj({1.0, 2.0}, {0.0, 0.0}, &degenerate) == std::vector<double>{1.0, 2.0});
    CHECK(degenerate);
}

TEST_CASE("orth_proj is the nearest point on the hyperplane (grid oracle)") {
    std::mt19937_64 rng(2);
    for (int n = 0; n < 20; ++n) {
        const std::size_t g = 2 + static_cast<std::size_t>(canonical(rng) * 2);  // G in {2,3}
        auto adv = zero_mean_gaussians(rng, g);
        if (std::sqrt(dot(adv, adv)) < 0.3) continue;
        const auto w = lognormal_weights(rng, g);
        const auto proj = orth_proj(w, adv);

        const auto basis = nullspace_basis(adv);
        const double h = 0.01;
        double best = 1e18;
        std::vector<int> idx(basis.size(), 0);
        const int steps = 101;
        for (;;) {
            std::vector<double> v = proj;
            for (std::size_t k = 0; k < basis.size(); ++k) {
                const double c = (idx[k] - steps / 2) * h;
                for (std::size_t i = 0; i < g; ++i) v[i] += c * basis[k][i];
            }
            best = std::min(best, dist2(v, w));
            std::size_t k = 0;
            while (k < idx.size() && ++idx[k] == steps) idx[k++] = 0;
            if (k == idx.size()) break;
        }
        // the analytic projection can't be beaten, and the grid gets close
        CHECK(dist2(proj, w) <= best + 1e-12);
        CHECK(best - dist2(proj, w) <= h * h * static_cast<double>(g));
    }
}

TEST_CASE("positive_orth_proj_qp solves the constrained projection") {
    SECTION("feasible unconstrained projection is returned as-is") {
        const auto res = positive_orth_proj_qp({2.0, 1.0}, {1.0, -1.0});
        CHECK_FALSE(res.degenerate);
        CHECK(res.s_tilde[0] == Catch::Approx(1.5));
        CHECK(res.s_tilde[1] == Catch::Approx(1.5));
    }
    SECTION("already orthogonal and nonnegative: fixed point") {
        const std::vector<double> s = {1.0, 1.0};
        const auto res = positive_orth_proj_qp(s, {0.5, -0.5});
        CHECK_FALSE(res.degenerate);
        CHECK(res.s_tilde == s);
    }
    SECTION("active sets produce exact zeros when needed") {
        const auto res = positive_orth_proj_qp({5.0, 0.01, 0.01}, {1.0, 1.0, -2.0});
        CHECK_FALSE(res.degenerate);
        CHECK(std::abs(dot(res.s_tilde, {1.0, 1.0, -2.0})) < 1e-12);
        for (double x : res.s_tilde) CHECK(x >= 0.0);
    }
    SECTION("single-sign advantages are infeasible: identity with flag") {
        const std::vector<double> s = {1.0, 2.0};
        const auto res = positive_orth_proj_qp(s, {1.0, 2.0});
        CHECK(res.degenerate);
        CHECK(res.s_tilde == s);
    }
}

TEST_CASE("positive_orth_proj_qp matches a dense-grid brute force for G <= 4") {
    std::mt19937_64 rng(3);
    int done = 0;
    while (done < 12) {
        const std::size_t g = 2 + static_cast<std::size_t>(canonical(rng) * 3);  // 2..4
        auto adv = zero_mean_gaussians(rng, g);
        if (!advantages_have_both_signs(adv) || std::sqrt(dot(adv, adv)) < 0.3) continue;
        const auto s_bar = lognormal_weights(rng, g, 0.6);
        const auto qp = positive_orth_proj_qp(s_bar, adv);
        if (qp.degenerate) continue;
        ++done;

        CHECK(std::abs(dot(qp.s_tilde, adv)) < 1e-10);
        for (double x : qp.s_tilde) CHECK(x >= 0.0);

        // brute force over the feasible hyperplane patch
        const auto basis = nullspace_basis(adv);
        const double h = 0.02;
        const int steps = 81;
        double best = 1e18;
        std::vector<double> best_v;
        std::vector<int> idx(basis.size(), 0);
        for (;;) {
            std::vector<double> v = qp.s_tilde;
            for (std::size_t k = 0; k < basis.size(); ++k) {
                const double c = (idx[k] - steps / 2) * h;
                for (std::size_t i = 0; i < g; ++i) v[i] += c * basis[k][i];
            }
            bool feasible = true;
            for (double x : v) feasible = feasible && x >= 0.0;
            if (feasible) {
                const double d = dist2(v, s_bar);
                if (d < best) {
                    best = d;
                    best_v = v;
                }
            }
            std::size_t k = 0;
            while (k < idx.size() && ++idx[k] == steps) idx[k++] = 0;
            if (k == idx.size()) break;
        }
        REQUIRE_FALSE(best_v.empty());
        // the QP point is optimal among all feasible grid points, and by
        // strong convexity the grid minimizer sits within grid resolution
        CHECK(dist2(qp.s_tilde, s_bar) <= best + 1e-12);
        CHECK(std::sqrt(dist2(best_v, qp.s_tilde)) <=
              h * std::sqrt(static_cast<double>(g)) + 1e-9);
    }
}

TEST_CASE("truncate_rebalance restores orthogonality by one-sided scaling") {
    SECTION("positive overshoot scales the positive side") {
        const auto res = truncate_rebalance({2.0, 1.0}, {1.0, -1.0});
        CHECK_FALSE(res.degenerate);
        CHECK(res.s_tilde[0] == Catch::Approx(1.0));  // alpha = 1/2
        CHECK(res.s_tilde[1] == Catch::Approx(1.0));
        CHECK(std::abs(dot(res.s_tilde, {1.0, -1.0})) < 1e-15);
    }
    SECTION("zero deviation is a fixed point") {
        const auto res = truncate_rebalance({1.5, 1.5}, {1.0, -1.0});
        CHECK_FALSE(res.degenerate);
        CHECK(res.s_tilde == std::vector<double>{1.5, 1.5});
    }
    SECTION("single-sign advantages are flagged") {
        CHECK(truncate_rebalance({1.0, 2.0}, {0.5, 0.5}).degenerate);
    }
    SECTION("scaling factors stay in (0, 1] over random groups") {
        std::mt19937_64 rng(4);
        for (int n = 0; n < 1000; ++n) {
            const std::size_t g = 2 + static_cast<std::size_t>(canonical(rng) * 5);
            const auto adv = zero_mean_gaussians(rng, g);
            if (!advantages_have_both_signs(adv)) continue;
            const auto s_bar = lognormal_weights(rng, g);
            const auto res = truncate_rebalance(s_bar, adv);
            if (res.degenerate) continue;
            CHECK(std::abs(dot(res.s_tilde, adv)) < 1e-12);
            for (std::size_t i = 0; i < g; ++i) {
                CHECK(res.s_tilde[i] > 0.0);
                const double factor = res.s_tilde[i] / std::max(s_bar[i], 1e-8);
                CHECK(factor <= 1.0 + 1e-12);
                CHECK(factor > 0.0);
            }
        }
    }
}

TEST_CASE("transform orthogonality holds to 1e-10 over random feasible groups") {
    std::mt19937_64 rng(5);
    double worst = 0.0;
    int done = 0;
    for (int n = 0; n < 2000; ++n) {
        const std::size_t g = 2 + static_cast<std::size_t>(canonical(rng) * 7);
        const auto adv = zero_mean_gaussians(rng, g);
        if (!advantages_have_both_signs(adv)) continue;
        const auto w = lognormal_weights(rng, g);
        ++done;
        worst = std::max(worst, std::abs(dot(orth_proj(w, adv), adv)));
        worst = std::max(worst, std::abs(dot(positive_orth_proj_qp(w, adv).s_tilde, adv)));
        worst = std::max(worst, std::abs(dot(truncate_rebalance(w, adv).s_tilde, adv)));
    }
    CHECK(done > 1500);
    CHECK(worst < 1e-10);
}

TEST_CASE("min_replace preserves the update sign of every trajectory") {
    std::mt19937_64 rng(6);
    for (int n = 0; n < 1000; ++n) {
        const std::size_t g = 2 + static_cast<std::size_t>(canonical(rng) * 5);
        const auto adv = zero_mean_gaussians(rng, g);
        const auto s_bar = lognormal_weights(rng, g);
        const auto s_tilde = min_replace(s_bar);
        for (std::size_t i = 0; i < g; ++i) {
            const double before = adv[i] * s_bar[i];
            const double after = adv[i] * s_tilde[i];
            CHECK((before > 0.0) == (after > 0.0));
            CHECK((before < 0.0) == (after < 0.0));
        }
    }
}

TEST_CASE("grad_dfpo with the identity transform at theta_old is group REINFORCE") {
    ggtest::World w = make_shared_pair(1, 2, 0.6);
    EstimatorSpec espec;
    TransformSpec ident;
    const auto stages =
        compute_weight_stages(w.params, w.group, w.group.advantages, espec, ident);
    for (double s : stages.s_tilde) CHECK(s == Catch::Approx(1.0).margin(1e-13));

    const auto g = grad_dfpo(w.params, w.group, w.group.advantages, espec, ident);
    const auto reinforce =
        grad_decoupled(w.params, w.group, w.group.advantages,
                       std::vector<double>(w.group.trajectories.size(), 1.0), true);
    CHECK(max_block_abs_diff(g, reinforce) < 1e-13);
}

TEST_CASE("grad_dfpo with min_replace on a fully shared group is exactly zero") {
    ggtest::World w = make_shared_pair(3, 0, 1.0);  // identical token streams
    EstimatorSpec espec;
    TransformSpec minrep;
    minrep.kind = TransformKind::min_replace;
    // rewards differ but every (h, a) pair is shared: constant weights times
    // zero-mean advantages over identical score sums
    const auto g = grad_dfpo(w.params, w.group, w.group.advantages, espec, minrep);
    CHECK(g.norm() == 0.0);
}

TEST_CASE("orth-family transforms zero the shared coefficient but not the gradient") {
    std::mt19937_64 rng(7);
    for (TransformKind kind : {TransformKind::orth_proj, TransformKind::positive_orth_proj_qp,
                               TransformKind::truncate_rebalance}) {
        ggtest::World w = make_shared_pair(1, 1, 1.0);
        pin_ratio(w, 0, 1, 0.8 + 0.3 * canonical(rng));
        pin_ratio(w, 1, 1, 0.9 + 0.4 * canonical(rng));
        EstimatorSpec espec;
        TransformSpec tspec;
        tspec.kind = kind;
        const auto stages =
            compute_weight_stages(w.params, w.group, w.group.advantages, espec, tspec);
        REQUIRE_FALSE(stages.degenerate);
        // equal lengths: shared_token_coefficient is A.s~ / T
        CHECK(std::abs(shared_token_coefficient(w.group, stages.s_tilde, w.group.advantages, 0)) <
              1e-12);
        const auto g = grad_dfpo(w.params, w.group, w.group.advantages, espec, tspec);
        const auto* shared_blk = g.find_block(Context{"p", {}});
        if (shared_blk)
            for (double x : *shared_blk) CHECK(std::abs(x) < 1e-12);
        CHECK(g.norm() > 1e-6);  // the overall learning signal survives
    }
}

TEST_CASE("grad_dfpo depends only on the numeric transformed weights") {
    std::mt19937_64 rng(8);
    for (int n = 0; n < 20; ++n) {
        ggtest::World w = make_world(rng);
        EstimatorSpec espec;
        TransformSpec tspec;
        tspec.kind = TransformKind::min_replace;
        const auto stages =
            compute_weight_stages(w.params, w.group, w.group.advantages, espec, tspec);
        const auto direct = grad_dfpo(w.params, w.group, w.group.advantages, espec, tspec);
        // recompute the same numbers through an unrelated expression
        std::vector<double> injected(stages.s_tilde.size());
        for (std::size_t i = 0; i < injected.size(); ++i)
            injected[i] = stages.s_tilde[i] * 2.0 / 2.0;
        const auto via_injection =
            grad_decoupled(w.params, w.group, w.group.advantages, injected, espec.length_norm);
        CHECK(max_block_abs_diff(direct, via_injection) == 0.0);
    }
}

TEST_CASE("min_replace is not a global rescaling of the identity gradient") {
    std::mt19937_64 rng(9);
    int tested = 0;
    for (int n = 0; n < 100 && tested < 20; ++n) {
        ggtest::World w = make_world(rng);
        EstimatorSpec espec;
        TransformSpec ident, minrep;
        minrep.kind = TransformKind::min_replace;
        const auto st = compute_weight_stages(w.params, w.group, w.group.advantages, espec, ident);
        const double spread = *std::max_element(st.s_bar.begin(), st.s_bar.end()) -
                              *std::min_element(st.s_bar.begin(), st.s_bar.end());
        if (spread < 0.05) continue;
        const auto g_id = grad_dfpo(w.params, w.group, w.group.advantages, espec, ident);
        const auto g_min = grad_dfpo(w.params, w.group, w.group.advantages, espec, minrep);
        if (g_id.norm() < 1e-9 || g_min.norm() < 1e-9) continue;
        ++tested;
        const double lam = g_min.dot(g_id) / g_id.dot(g_id);
        GradientVector resid = g_min;
        resid.axpy(-lam, g_id);
        CHECK(resid.norm() / g_min.norm() > 1e-6);
    }
    CHECK(tested >= 20);
}

TEST_CASE("minrep_bias_report on equal weights is all zeros") {
    ggtest::World w = make_shared_pair(2, 1, 1.0);  // theta == theta_old: s_bar all 1
    const auto rep = minrep_bias_report(w.params, w.group, w.group.advantages, 0.2);
    CHECK(rep.bias_norm == Catch::Approx(0.0).margin(1e-15));
    CHECK(rep.bias_norm_bound == Catch::Approx(0.0).margin(1e-15));
    CHECK(rep.trust_delta == Catch::Approx(0.0).margin(1e-13));
    for (double phi : rep.phi) CHECK(phi == Catch::Approx(1.0).margin(1e-13));
}

TEST_CASE("minrep bias norm respects the dispersion bound") {
    std::mt19937_64 rng(10);
    for (int n = 0; n < 300; ++n) {
        ggtest::World w = make_world(rng);
        const auto rep = minrep_bias_report(w.params, w.group, w.group.advantages, 0.2);
        CHECK(rep.bias_norm <= rep.bias_norm_bound + 1e-9);
        for (double phi : rep.phi) {
            CHECK(phi > 0.0);
            CHECK(phi <= 1.0 + 1e-15);
        }
    }
}

TEST_CASE("trust region bounds the shrink ratios") {
    std::mt19937_64 rng(11);
    for (double delta : {0.01, 0.1}) {
        for (int n = 0; n < 50; ++n) {
            ggtest::World w = make_shared_pair(1, 2, 1.0);
            // pin every token ratio within e^{±delta}: |ln s| <= delta, and
            // the post-clip weights inherit the bound for delta < ln(1.2)
            for (int i = 0; i < 2; ++i)
                for (int t = 0; t < 3; ++t)
                    pin_ratio(w, i, t, std::exp(delta * (2.0 * canonical(rng) - 1.0)));
            const auto rep = minrep_bias_report(w.params, w.group, w.group.advantages, 0.2);
            CHECK(rep.trust_delta <= delta + 1e-12);
            for (double phi : rep.phi) CHECK(phi >= std::exp(-2.0 * delta) - 1e-12);
        }
    }
}

TEST_CASE("weight stages respect the transform placement flag") {
    ggtest::World w = make_shared_pair(1, 1, 1.0);
    pin_ratio(w, 0, 1, 2.5);  // s_0 well above the clip band
    EstimatorSpec espec;
    TransformSpec on_raw;
    on_raw.kind = TransformKind::min_replace;
    on_raw.on_postclip = false;
    const auto raw = compute_weight_stages(w.params, w.group, w.group.advantages, espec, on_raw);
    TransformSpec on_bar;
    on_bar.kind = TransformKind::min_replace;
    const auto bar = compute_weight_stages(w.params, w.group, w.group.advantages, espec, on_bar);
    CHECK(raw.s_tilde[0] == Catch::Approx(*std::min_element(raw.s.begin(), raw.s.end())));
    CHECK(bar.s_tilde[0] == Catch::Approx(*std::min_element(bar.s_bar.begin(), bar.s_bar.end())));
    CHECK(raw.s == bar.s);
    CHECK(raw.c == bar.c);
}

TEST_CASE("all-zero advantage vectors skip the transform with a flag") {
    ggtest::World w = make_shared_pair(1, 1, 1.0);
    std::vector<double> zeros = {0.0, 0.0};
    EstimatorSpec espec;
    TransformSpec tspec;
    tspec.kind = TransformKind::truncate_rebalance;
    const auto st = compute_weight_stages(w.params, w.group, zeros, espec, tspec);
    CHECK(st.degenerate);
    CHECK(st.s_tilde == st.s_bar);
    const auto g = grad_dfpo(w.params, w.group, zeros, espec, tspec);
    CHECK(g.norm() == 0.0);
}

TEST_CASE("transform spec validation") {
    TransformSpec t;
    t.floor_eps = 0.0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t.floor_eps = 1e-8;
    t.stop_grad = false;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    CHECK(transform_kind_from_string("truncate_rebalance") == TransformKind::truncate_rebalance);
    CHECK_THROWS_AS(transform_kind_from_string("nope"), ConfigError);
}
