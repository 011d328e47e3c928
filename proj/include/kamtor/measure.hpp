//==============================================================================
// measure.hpp
// Non-resonance checkers and Monte-Carlo measure estimates of the excluded
// frequency sets.
// Features:
//   • diophantine_test: exhaustive |omega.l| >= gamma/|l|^tau over the l1 ball,
//     first witness or minimum margin.
//   • melnikov_survey: first/second order margins of a block normal form over
//     the l1 ball, with witnesses and the empirical index-bound constants of
//     the violated triples.
//   • FrequencyBox: image of a positive action box under the affine frequency
//     map, with a seeded uniform sampler (uniform in frequency measure).
//   • measure_estimate: per-sample sharp exclusion statistics evaluated once,
//     thresholded across a gamma sweep; exact binomial 95% confidence bands;
//     scaling-law fit of the diophantine fraction.
//   • resonant_set_fraction: empirical measure of one resonant set across a
//     gamma sweep.
//==============================================================================
#pragma once

#include <functional>
#include <random>

#include "kam.hpp"
#include "model.hpp"

namespace kamtor {

namespace detail {

// Enumerate l in Z^d with 0 < |l|_1 <= L (all of them; callers fold symmetry).
inline void ell_ball(int d, int L, const std::function<void(const std::vector<int>&, int)>& f) {
    std::vector<int> l(d, 0);
    std::function<void(int, int)> rec = [&](int axis, int used) {
        if (axis == d) {
            int n1 = 0;
            for (int v : l) n1 += std::abs(v);
            if (n1 > 0) f(l, n1);
            return;
        }
        for (int v = -(L - used); v <= L - used; ++v) {
            l[axis] = v;
            rec(axis + 1, used + std::abs(v));
        }
    };
    rec(0, 0);
}

}  // namespace detail

//------------------------------------------------------------------------------
// Exact binomial (Clopper-Pearson) 95% confidence interval for k out of n.
//------------------------------------------------------------------------------
inline std::pair<double, double> binom_ci95(int k, int n) {
    if (n <= 0) throw ValidationError("confidence interval needs n > 0");
    const double alpha = 0.05;
    // P(X >= k | p) and P(X <= k | p) via log binomial terms.
    auto tail_ge = [&](double p) {
        if (p <= 0) return k <= 0 ? 1.0 : 0.0;
        if (p >= 1) return 1.0;
        double s = 0;
        for (int i = k; i <= n; ++i)
            s += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) -
                          std::lgamma(n - i + 1.0) + i * std::log(p) +
                          (n - i) * std::log1p(-p));
        return std::min(1.0, s);
    };
    auto tail_le = [&](double p) {
        if (p <= 0) return 1.0;
        if (p >= 1) return k >= n ? 1.0 : 0.0;
        double s = 0;
        for (int i = 0; i <= k; ++i)
            s += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) -
                          std::lgamma(n - i + 1.0) + i * std::log(p) +
                          (n - i) * std::log1p(-p));
        return std::min(1.0, s);
    };
    double lo = 0.0;
    if (k > 0) {
        double a = 0, b = static_cast<double>(k) / n;
        for (int it = 0; it < 60; ++it) {
            double m = 0.5 * (a + b);
            (tail_ge(m) < alpha / 2 ? a : b) = m;
        }
        lo = 0.5 * (a + b);
    }
    double hi = 1.0;
    if (k < n) {
        double a = static_cast<double>(k) / n, b = 1.0;
        for (int it = 0; it < 60; ++it) {
            double m = 0.5 * (a + b);
            (tail_le(m) < alpha / 2 ? b : a) = m;
        }
        hi = 0.5 * (a + b);
    }
    return {lo, hi};
}

//------------------------------------------------------------------------------
// Diophantine check over the truncated l1 ball.
//------------------------------------------------------------------------------
struct DiophantineVerdict {
    bool ok = true;
    double min_margin = std::numeric_limits<double>::infinity();  // |w.l| / threshold
    std::vector<int> witness;  // minimizing l (first violation if any)
};

// Sharp statistic min |omega.l| |l|_1^tau; the verdict compares it to gamma.
inline double diophantine_stat(const Vec& omega, double tau, int L_max) {
    double stat = std::numeric_limits<double>::infinity();
    detail::ell_ball(static_cast<int>(omega.size()), L_max,
                     [&](const std::vector<int>& l, int n1) {
                         double wl = 0;
                         for (size_t i = 0; i < l.size(); ++i) wl += omega[i] * l[i];
                         stat = std::min(stat, std::abs(wl) * std::pow(n1, tau));
                     });
    return stat;
}

inline DiophantineVerdict diophantine_test(const Vec& omega, double gamma, double tau,
                                           int L_max) {
    DiophantineVerdict v;
    detail::ell_ball(static_cast<int>(omega.size()), L_max,
                     [&](const std::vector<int>& l, int n1) {
                         double wl = 0;
                         for (size_t i = 0; i < l.size(); ++i) wl += omega[i] * l[i];
                         const double margin = std::abs(wl) * std::pow(n1, tau) / gamma;
                         if (margin < v.min_margin) {
                             v.min_margin = margin;
                             v.witness.assign(l.begin(), l.end());
                         }
                     });
    v.ok = v.min_margin >= 1.0;
    return v;
}

//------------------------------------------------------------------------------
// First/second Melnikov survey of a block normal form.
//------------------------------------------------------------------------------
struct SurveyWitness {
    std::vector<int> ell;
    int j = 0, k = 0, sign = 0;  // sign 0 marks a first-order record
    double min_eig = 0, threshold = 0;
};

struct SurveyReport {
    double margin_first = std::numeric_limits<double>::infinity();
    double margin_sum = std::numeric_limits<double>::infinity();
    double margin_diff = std::numeric_limits<double>::infinity();
    SurveyWitness worst_first, worst_sum, worst_diff;
    std::vector<SurveyWitness> violations;  // margin < 1 cases
    // Empirical index-bound constants over the violated triples:
    // j^2/<l>, <j^2+k^2>/<l>, |j^2-k^2|/<l> and |j| gamma_* / <l>^tau_*.
    double bound_first = 0, bound_sum = 0, bound_diff = 0, bound_jj = 0;
    long checked = 0;
};

inline SurveyReport melnikov_survey(const BlockNormalForm& nf, double gamma, double tau,
                                    int L_max, double gamma_star, double tau_star) {
    SurveyReport rep;
    const int d = static_cast<int>(nf.omega.size());
    Eigen::SelfAdjointEigenSolver<Mat2c> es2;

    auto visit = [&](const std::vector<int>& l, int n1) {
        double wl = 0;
        for (int i = 0; i < d; ++i) wl += nf.omega[i] * l[i];
        const double lb = std::max(1, n1);
        const bool lzero = (n1 == 0);
        for (int j : nf.ks) {
            // First order.
            const double thr1 = 2.0 * gamma * j * j / std::pow(lb, tau);
            for (int s1 : {+1, -1}) {
                Mat2c L = wl * Mat2c::Identity();
                L += (s1 > 0) ? nf.block(j) : Mat2c(-nf.block(j).conjugate());
                es2.compute(L);
                const double me = es2.eigenvalues().cwiseAbs().minCoeff();
                const double m = me / thr1;
                ++rep.checked;
                if (m < rep.margin_first) {
                    rep.margin_first = m;
                    rep.worst_first = {l, j, 0, 0, me, thr1};
                }
                if (m < 1.0) {
                    rep.violations.push_back({l, j, 0, 0, me, thr1});
                    rep.bound_first = std::max(rep.bound_first, j * j / lb);
                }
            }
            // Second order.
            for (int k : nf.ks) {
                for (int sign : {+1, -1}) {
                    if (lzero && sign < 0 && j == k) continue;
                    MelnikovVerdict v = detail::melnikov_core(nf.block(j), nf.block(k), wl, lb,
                                                              j, k, sign, 2.0 * gamma, tau);
                    const double m = v.min_eig / v.threshold;
                    ++rep.checked;
                    double& margin = (sign > 0) ? rep.margin_sum : rep.margin_diff;
                    SurveyWitness& worst = (sign > 0) ? rep.worst_sum : rep.worst_diff;
                    if (m < margin) {
                        margin = m;
                        worst = {l, j, k, sign, v.min_eig, v.threshold};
                    }
                    if (m < 1.0) {
                        rep.violations.push_back({l, j, k, sign, v.min_eig, v.threshold});
                        const double combo = (sign > 0)
                                                 ? jbracket(1.0 * j * j + 1.0 * k * k)
                                                 : std::abs(1.0 * j * j - 1.0 * k * k);
                        if (sign < 0 && j == k)
                            rep.bound_jj = std::max(
                                rep.bound_jj,
                                std::abs(j) * gamma_star / std::pow(lb, tau_star));
                        else
                            (sign > 0 ? rep.bound_sum : rep.bound_diff) =
                                std::max(sign > 0 ? rep.bound_sum : rep.bound_diff,
                                         combo / lb);
                    }
                }
            }
        }
    };
    std::vector<int> zero(d, 0);
    visit(zero, 0);
    detail::ell_ball(d, L_max, visit);
    return rep;
}

//------------------------------------------------------------------------------
// FrequencyBox: image of a positive action box under the affine frequency map.
// Sampling is uniform in frequency measure (the map has constant Jacobian).
//------------------------------------------------------------------------------
struct FrequencyBox {
    const Model* mdl = nullptr;
    Vec xi_lo, xi_hi;

    FrequencyBox(const Model& m, Vec lo, Vec hi)
        : mdl(&m), xi_lo(std::move(lo)), xi_hi(std::move(hi)) {
        if (xi_lo.size() != m.nt() || xi_hi.size() != m.nt())
            throw ValidationError("action box dimension mismatch");
        for (int i = 0; i < m.nt(); ++i)
            if (!(0.0 < xi_lo[i] && xi_lo[i] < xi_hi[i]))
                throw ValidationError("action box must be positive and nonempty");
    }

    // One frequency sample and its actions.
    std::pair<Vec, Vec> sample(std::mt19937_64& rng) const {
        std::uniform_real_distribution<double> ud;
        Vec xi(xi_lo.size());
        for (int i = 0; i < xi.size(); ++i)
            xi[i] = xi_lo[i] + (xi_hi[i] - xi_lo[i]) * ud(rng);
        return {mdl->omega_tangential(xi), xi};
    }
};

//------------------------------------------------------------------------------
// Monte-Carlo measure of the excluded sets.  For the integrable seed the
// normal-form blocks are the diagonal dispersion matrices, so every margin is
// a scalar: the per-sample sharp statistics are computed once and thresholded
// across the whole gamma sweep (exact per-sample monotonicity in gamma).
//------------------------------------------------------------------------------
struct MeasureParams {
    double tau = 0;       // <= 0: 2|S| + 1
    double tau_star = 0;  // <= 0: |S| + 1
    int L_max = 6;
    int n_samples = 4096;
    unsigned long long seed = 1;
    std::vector<double> gammas = {1e-3, 2.15e-3, 4.64e-3, 1e-2, 2.15e-2, 4.64e-2, 1e-1};
};

struct GammaRow {
    double gamma = 0, gamma_star = 0;
    double dio_frac = 0, dio_lo = 0, dio_hi = 0;
    double mel_frac = 0, mel_lo = 0, mel_hi = 0;
    double total_frac = 0, total_lo = 0, total_hi = 0;
};

struct MeasureReport {
    int schema = 1;
    unsigned long long seed = 0;
    int n_samples = 0;
    double tau = 0, tau_star = 0;
    std::vector<GammaRow> rows;  // ascending in gamma
    double dio_slope = 0;        // fitted exponent of dio_frac against gamma_star
};

namespace detail {

// Sharp per-sample statistics of one frequency draw.
struct SampleStats {
    double dio = 0;    // min |w.l| |l|^tau_*           (exclude iff < gamma_*)
    double mel = 0;    // min margin * level            (exclude iff < 2 gamma)
};

inline SampleStats sample_stats(const Model& mdl, const Vec& omega, const Vec& xi,
                                double tau, double tau_star, int L_max) {
    SampleStats st;
    st.dio = diophantine_stat(omega, tau_star, L_max);

    ActionVector I(mdl.idx);
    I.tang = xi;
    std::vector<double> lam;
    for (int j : mdl.idx.S_perp_plus) lam.push_back(mdl.omega_site(j, I));
    const auto& ks = mdl.idx.S_perp_plus;
    const int nk = static_cast<int>(ks.size());

    double mel = std::numeric_limits<double>::infinity();
    auto visit = [&](double wl, int n1) {
        const double lb = std::max(1, n1);
        const double pw = std::pow(lb, tau);
        for (int a = 0; a < nk; ++a) {
            mel = std::min(mel, std::abs(wl + lam[a]) * pw / (ks[a] * ks[a]));
            for (int b = 0; b < nk; ++b) {
                const double jj = 1.0 * ks[a] * ks[a], kk = 1.0 * ks[b] * ks[b];
                mel = std::min(mel, std::abs(wl + lam[a] + lam[b]) * pw / jbracket(jj + kk));
                if (n1 == 0 && a == b) continue;
                mel = std::min(mel, std::abs(wl + lam[a] - lam[b]) * pw / jbracket(jj - kk));
            }
        }
    };
    visit(0.0, 0);
    detail::ell_ball(static_cast<int>(omega.size()), L_max,
                     [&](const std::vector<int>& l, int n1) {
                         double wl = 0;
                         for (size_t i = 0; i < l.size(); ++i) wl += omega[i] * l[i];
                         visit(wl, n1);
                     });
    st.mel = mel;
    return st;
}

}  // namespace detail

inline MeasureReport measure_estimate(const Model& mdl, const FrequencyBox& box,
                                      MeasureParams prm = {}) {
    const int d = mdl.nt();
    const double tau = (prm.tau > 0) ? prm.tau : 2.0 * d + 1.0;
    const double tau_star = (prm.tau_star > 0) ? prm.tau_star : d + 1.0;
    if (prm.n_samples < 1) throw ValidationError("n_samples must be positive");
    std::vector<double> gammas = prm.gammas;
    std::sort(gammas.begin(), gammas.end());

    std::mt19937_64 rng(prm.seed);
    std::vector<detail::SampleStats> stats;
    stats.reserve(prm.n_samples);
    for (int s = 0; s < prm.n_samples; ++s) {
        auto [omega, xi] = box.sample(rng);
        stats.push_back(detail::sample_stats(mdl, omega, xi, tau, tau_star, prm.L_max));
    }

    MeasureReport rep;
    rep.seed = prm.seed;
    rep.n_samples = prm.n_samples;
    rep.tau = tau;
    rep.tau_star = tau_star;
    std::vector<double> fit_g, fit_f;
    for (double g : gammas) {
        GammaRow row;
        row.gamma = g;
        row.gamma_star = std::sqrt(g);
        int ndio = 0, nmel = 0, ntot = 0;
        for (const auto& st : stats) {
            const bool xd = st.dio < row.gamma_star;
            const bool xm = st.mel < 2.0 * g;
            ndio += xd;
            nmel += xm;
            ntot += (xd || xm);
        }
        const int n = prm.n_samples;
        row.dio_frac = static_cast<double>(ndio) / n;
        std::tie(row.dio_lo, row.dio_hi) = binom_ci95(ndio, n);
        row.mel_frac = static_cast<double>(nmel) / n;
        std::tie(row.mel_lo, row.mel_hi) = binom_ci95(nmel, n);
        row.total_frac = static_cast<double>(ntot) / n;
        std::tie(row.total_lo, row.total_hi) = binom_ci95(ntot, n);
        rep.rows.push_back(row);
        if (ndio > 0) {
            fit_g.push_back(row.gamma_star);
            fit_f.push_back(row.dio_frac);
        }
    }
    if (fit_g.size() >= 2) rep.dio_slope = loglog_slope(fit_g, fit_f);
    return rep;
}

//------------------------------------------------------------------------------
// Empirical measure of one difference-type resonant set across a gamma sweep.
//------------------------------------------------------------------------------
inline std::vector<double> resonant_set_fraction(const Model& mdl, const FrequencyBox& box,
                                                 const std::vector<int>& ell, int j, int k,
                                                 int sign, const std::vector<double>& gammas,
                                                 double tau, int n_samples,
                                                 unsigned long long seed) {
    if (static_cast<int>(ell.size()) != mdl.nt())
        throw ValidationError("resonant-set index dimension mismatch");
    int n1 = 0;
    for (int v : ell) n1 += std::abs(v);
    const double lb = std::max(1, n1);
    const double jj = 1.0 * j * j, kk = 1.0 * k * k;
    const double combo = (sign > 0) ? jbracket(jj + kk) : jbracket(jj - kk);

    std::mt19937_64 rng(seed);
    std::vector<double> stat;
    stat.reserve(n_samples);
    for (int s = 0; s < n_samples; ++s) {
        auto [omega, xi] = box.sample(rng);
        ActionVector I(mdl.idx);
        I.tang = xi;
        double wl = 0;
        for (int i = 0; i < mdl.nt(); ++i) wl += omega[i] * ell[i];
        const double expr =
            wl + mdl.omega_site(j, I) + (sign > 0 ? 1.0 : -1.0) * mdl.omega_site(k, I);
        stat.push_back(std::abs(expr) * std::pow(lb, tau) / combo);
    }
    std::vector<double> out;
    for (double g : gammas) {
        int cnt = 0;
        for (double v : stat) cnt += (v < 2.0 * g);
        out.push_back(static_cast<double>(cnt) / n_samples);
    }
    return out;
}

}  // namespace kamtor
