//==============================================================================
// test_measure.cpp
// Diophantine and Melnikov checkers, binomial confidence bands, Monte-Carlo
// measure of the excluded frequency sets and its scaling laws.
//==============================================================================
#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "kamtor/measure.hpp"

using namespace kamtor;

namespace {

Model small_model(double eps) {
    auto idx = IndexSets::make({-1, 0, 1}, 2, 4);
    Vec xi(3);
    xi << 0.9, 1.1, 1.3;
    return Model(idx, xi, eps, {{1.0, 1, 4, 0}, {0.5, 0, 2, 2}});
}

// Diagonal integrable seed blocks at actions xi.
BlockNormalForm seed_blocks(const Model& mdl, const Vec& xi) {
    ActionVector I(mdl.idx);
    I.tang = xi;
    BlockNormalForm nf;
    nf.omega = mdl.omega_tangential(xi);
    nf.ks = mdl.idx.S_perp_plus;
    for (int k : nf.ks) {
        Mat2c A = Mat2c::Zero();
        A(0, 0) = mdl.omega_site(k, I);
        A(1, 1) = mdl.omega_site(-k, I);
        nf.blocks.emplace(k, A);
    }
    return nf;
}

}  // namespace

//------------------------------------------------------------------------------
TEST_CASE("diophantine check: closed forms, witnesses, monotonicity") {
    SECTION("single frequency omega = 1 passes at gamma = 0.1, tau = 2") {
        Vec om(1);
        om << 1.0;
        DiophantineVerdict v = diophantine_test(om, 0.1, 2.0, 8);
        CHECK(v.ok);
        // |l| >= 1 gives |om.l| |l|^2 >= 1, margin >= 1/gamma = 10.
        CHECK(v.min_margin == Catch::Approx(10.0));
    }

    SECTION("exact rational resonance is caught with its witness") {
        Vec om(3);
        om << 1.0, 2.0, 5.0;
        DiophantineVerdict v = diophantine_test(om, 1e-6, 2.0, 4);
        CHECK_FALSE(v.ok);
        CHECK(v.min_margin == 0.0);
        double wl = 0;
        for (int i = 0; i < 3; ++i) wl += om[i] * v.witness[i];
        CHECK(wl == 0.0);
    }

    SECTION("shrinking gamma never turns ok into violated") {
        Vec om(2);
        om << 1.0, std::sqrt(2.0);
        for (double g : {1e-2, 1e-3, 1e-4}) {
            DiophantineVerdict v1 = diophantine_test(om, g, 3.0, 6);
            DiophantineVerdict v2 = diophantine_test(om, g / 10, 3.0, 6);
            if (v1.ok) CHECK(v2.ok);
            CHECK(v2.min_margin == Catch::Approx(10.0 * v1.min_margin));
        }
    }
}

//------------------------------------------------------------------------------
TEST_CASE("exact binomial confidence bands") {
    SECTION("reference value 5 of 10") {
        auto [lo, hi] = binom_ci95(5, 10);
        CHECK(lo == Catch::Approx(0.187).margin(0.005));
        CHECK(hi == Catch::Approx(0.813).margin(0.005));
    }
    SECTION("edge cases and coverage") {
        auto [lo0, hi0] = binom_ci95(0, 100);
        CHECK(lo0 == 0.0);
        CHECK(hi0 > 0.0);
        CHECK(hi0 < 0.05);
        auto [lon, hin] = binom_ci95(100, 100);
        CHECK(hin == 1.0);
        CHECK(lon > 0.95);
        auto [lo, hi] = binom_ci95(40, 400);
        CHECK(lo < 0.1);
        CHECK(hi > 0.1);
    }
}

//------------------------------------------------------------------------------
TEST_CASE("melnikov survey: oracle margins, exclusion rule, stability") {
    Model mdl = small_model(0.0);
    Vec xi = mdl.xi;
    BlockNormalForm nf = seed_blocks(mdl, xi);
    const double tau = 7.0, gamma = 1e-3;

    SECTION("margins match the explicit eigenvalue differences") {
        SurveyReport rep = melnikov_survey(nf, gamma, tau, 4, std::sqrt(gamma), 4.0);
        // Closed-form scan: blocks are diagonal with equal entries.
        ActionVector I(mdl.idx);
        I.tang = xi;
        double m1 = std::numeric_limits<double>::infinity();
        double ms = m1, md = m1;
        auto visit = [&](double wl, int n1) {
            const double lb = std::max(1, n1);
            for (int j : nf.ks) {
                const double lj = mdl.omega_site(j, I);
                m1 = std::min(m1, std::abs(wl + lj) /
                                      (2.0 * gamma * j * j / std::pow(lb, tau)));
                for (int k : nf.ks) {
                    const double lk = mdl.omega_site(k, I);
                    const double jj = 1.0 * j * j, kk = 1.0 * k * k;
                    ms = std::min(ms, std::abs(wl + lj + lk) /
                                          (2.0 * gamma * jbracket(jj + kk) /
                                           std::pow(lb, tau)));
                    if (n1 == 0 && j == k) continue;
                    md = std::min(md, std::abs(wl + lj - lk) /
                                          (2.0 * gamma * jbracket(jj - kk) /
                                           std::pow(lb, tau)));
                }
            }
        };
        visit(0.0, 0);
        detail::ell_ball(3, 4, [&](const std::vector<int>& l, int n1) {
            double wl = 0;
            for (int i = 0; i < 3; ++i) wl += nf.omega[i] * l[i];
            visit(wl, n1);
        });
        CHECK(rep.margin_first == Catch::Approx(m1).epsilon(1e-9));
        CHECK(rep.margin_sum == Catch::Approx(ms).epsilon(1e-9));
        CHECK(rep.margin_diff == Catch::Approx(md).epsilon(1e-9));
    }

    SECTION("the pair (0, j, j) with the difference sign is never surveyed") {
        // At a huge level everything else violates; (0,j,j,-) must not appear.
        SurveyReport rep = melnikov_survey(nf, 1e6, tau, 2, 1.0, 4.0);
        CHECK(!rep.violations.empty());
        for (const auto& w : rep.violations) {
            if (w.sign >= 0) continue;
            int n1 = 0;
            for (int v : w.ell) n1 += std::abs(v);
            if (w.j == w.k) CHECK(n1 > 0);
        }
    }

    SECTION("margins scale inversely with the level (nesting)") {
        SurveyReport a = melnikov_survey(nf, gamma, tau, 3, std::sqrt(gamma), 4.0);
        SurveyReport b = melnikov_survey(nf, gamma / 8, tau, 3, std::sqrt(gamma / 8), 4.0);
        CHECK(b.margin_first == Catch::Approx(8.0 * a.margin_first));
        CHECK(b.margin_diff == Catch::Approx(8.0 * a.margin_diff));
    }

    SECTION("nearby normal forms shift minimum eigenvalues by at most 2 delta") {
        const double delta = 1e-4;
        BlockNormalForm nf2 = nf;
        std::mt19937 rng(3);
        std::normal_distribution<double> nd;
        for (int k : nf2.ks) {
            Mat2c H;
            H(0, 0) = nd(rng);
            H(1, 1) = nd(rng);
            H(0, 1) = 0.5 * cplx(nd(rng), nd(rng));
            H(1, 0) = std::conj(H(0, 1));
            nf2.blocks.at(k) += (delta / H.norm()) * H;
        }
        std::vector<int> ell = {1, -1, 0};
        double wl = 0;
        for (int i = 0; i < 3; ++i) wl += nf.omega[i] * ell[i];
        for (int sign : {+1, -1}) {
            MelnikovVerdict v1 = detail::melnikov_core(nf.block(2), nf.block(2), wl, 2.0, 2,
                                                       2, sign, gamma, tau);
            MelnikovVerdict v2 = detail::melnikov_core(nf2.block(2), nf2.block(2), wl, 2.0, 2,
                                                       2, sign, gamma, tau);
            CHECK(std::abs(v1.min_eig - v2.min_eig) <= 2.0 * delta + 1e-12);
        }
    }
}

//------------------------------------------------------------------------------
TEST_CASE("monte-carlo measure of the excluded sets") {
    Model mdl = small_model(0.0);
    Vec lo(3), hi(3);
    lo << 0.8, 0.8, 0.8;
    hi << 1.6, 1.6, 1.6;
    FrequencyBox box(mdl, lo, hi);

    MeasureParams prm;
    prm.n_samples = 4096;
    prm.seed = 11;
    MeasureReport rep = measure_estimate(mdl, box, prm);

    SECTION("fractions, bands and monotonicity") {
        REQUIRE(rep.rows.size() >= 4);
        for (size_t i = 0; i < rep.rows.size(); ++i) {
            const GammaRow& r = rep.rows[i];
            CHECK(r.dio_frac >= 0.0);
            CHECK(r.total_frac <= 1.0);
            CHECK(r.dio_lo <= r.dio_frac);
            CHECK(r.dio_frac <= r.dio_hi);
            CHECK(r.total_frac >= std::max(r.dio_frac, r.mel_frac));
            if (i > 0) {
                CHECK(r.dio_frac >= rep.rows[i - 1].dio_frac);
                CHECK(r.mel_frac >= rep.rows[i - 1].mel_frac);
                CHECK(r.total_frac >= rep.rows[i - 1].total_frac);
            }
        }
        // Exclusion vanishes with the level: smallest-gamma rows within CI of 0.
        CHECK(rep.rows.front().mel_lo == 0.0);
        CHECK(rep.rows.front().mel_frac <= rep.rows.back().mel_frac);
    }

    SECTION("diophantine fraction scales linearly in gamma_star") {
        INFO("fitted diophantine slope " << rep.dio_slope);
        CHECK(rep.dio_slope > 0.7);
        CHECK(rep.dio_slope < 1.3);
    }

    SECTION("fixed seed reproduces the report bit-identically") {
        MeasureReport rep2 = measure_estimate(mdl, box, prm);
        REQUIRE(rep2.rows.size() == rep.rows.size());
        for (size_t i = 0; i < rep.rows.size(); ++i) {
            CHECK(rep2.rows[i].dio_frac == rep.rows[i].dio_frac);
            CHECK(rep2.rows[i].mel_frac == rep.rows[i].mel_frac);
        }
    }
}

//------------------------------------------------------------------------------
TEST_CASE("single resonant set: linear measure in gamma") {
    Model mdl = small_model(0.0);
    Vec lo(3), hi(3);
    lo << 0.8, 0.8, 0.8;
    hi << 1.6, 1.6, 1.6;
    FrequencyBox box(mdl, lo, hi);

    // (l, j, j) with the difference sign: the statistic is |omega . l| and the
    // combination omega_{-1} - omega_1 = 2(xi_1 - xi_{-1}) sweeps through zero
    // over the box, so the excluded set is a slab of width ~ gamma.
    std::vector<double> gammas = {1e-2, 2e-2, 4e-2, 8e-2};
    std::vector<double> fr =
        resonant_set_fraction(mdl, box, {1, 0, -1}, 2, 2, -1, gammas, 2.0, 8192, 5);
    for (size_t i = 1; i < fr.size(); ++i) CHECK(fr[i] >= fr[i - 1]);
    REQUIRE(fr.front() > 0.0);
    const double slope = loglog_slope(gammas, fr);
    INFO("resonant-set slope " << slope);
    CHECK(slope > 0.7);
    CHECK(slope < 1.3);
}
