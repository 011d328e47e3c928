//==============================================================================
// nashmoser.hpp
// Outer quasi-Newton loop with smoothing truncation, plus the linear-stability
// verification of a converged torus.
// Features:
//   • NashMoserConfig: chi = 3/2 truncation ladder N_n = N0^(chi^n), shrinking
//     screen levels gamma_n = gamma (1 + 2^-n), smallness gate eps gamma^-4.
//   • nash_moser_solve: isotropize -> Taylor coefficients -> transformed
//     linearization -> block reduction (Melnikov screens abort with witness)
//     -> triangular solve -> truncated update; per-iteration records.
//   • stability_check: exact evolution of the linearized flow in block
//     coordinates (phase rotations of the limit blocks + a particular solution
//     of the forced transport equation), pushed through the phi-dependent
//     stage frames evaluated on the trajectory phi = omega t.
//   • torus_size_audit: the action/normal-component norms of a torus.
//==============================================================================
#pragma once

#include <optional>
#include <random>

#include "rightinv.hpp"

namespace kamtor {

// eps gamma^-4 exceeded the configured smallness threshold.
struct SmallnessGate : std::runtime_error {
    double value = 0, threshold = 0;
    SmallnessGate(double v, double t)
        : std::runtime_error("smallness gate: eps gamma^-4 = " + std::to_string(v) +
                             " >= " + std::to_string(t)),
          value(v), threshold(t) {}
};
//------------------------------------------------------------------------------
// Configuration and reports.
//------------------------------------------------------------------------------
struct NashMoserConfig {
    double gamma = 1e-2;
    double tau = 0;       // <= 0 means the default 2|S| + 1
    double N0 = 4;        // truncation seed, N_n = N0^(chi^n)
    double chi = 1.5;
    int max_outer = 10;
    double tol_NM = 1e-10;
    double sigma = 2.0;
    int mu1 = 1;          // loss-of-derivatives budget entering the constants
    double delta2 = 1e-2; // smallness threshold for eps gamma^-4 (config knob)
    bool final_bundle = true;  // rebuild the stack at the converged torus
    ReductionOptions ropt;

    // Recorded constants of the convergence ladder (documentation-level).
    double eta1() const { return 6.0 * mu1 + 1.0; }
    double alpha1() const { return 2.0 * mu1 + 2.0 / 3.0; }
    double kappa1() const { return 6.0 * mu1 + 1.0; }
    double beta1() const { return 12.0 * mu1 + 2.0; }
};

struct OuterRecord {
    int n = 0;
    double gamma_n = 0;     // screen level of the step taken from this iterate
    double N_n = 0;         // truncation scale of that step
    double resid_low = 0;   // |F|_{s0, sigma-2}
    double resid_high = 0;  // |F|_{s0+beta1, sigma-2}
    double zeta_abs = 0;    // |zeta_n|
    double step_norm = 0;   // |iota_{n+1} - iota_n|_{s0}
    double mel_margin = 0;  // min margin of the screens on the reduced blocks
    int ladder_steps = 0;
    bool gate_ok = false;
    double tri_resid = 0;   // audited residual of the triangular solve
};

struct RunReport {
    int schema = 1;
    bool converged = false;
    int iters = 0;           // outer iterations actually performed
    double final_resid = 0;  // |F|_{s0, sigma-2} at the returned torus
    std::vector<OuterRecord> log;
    std::vector<double> lam_minus, lam_plus;  // limit eigenvalues (last stack)
    double c_fit = 0;
    double decay_fit = 0;  // fitted exponent of resid_n against N_{n-1}
};

struct NashMoserResult {
    TorusEmbedding iota;
    Vec zeta;
    RunReport report;
    std::optional<RightInverseBundle> bundle;  // stack at the returned torus
};

//------------------------------------------------------------------------------
// Minimum screen margin (ratio min-eigenvalue / threshold) of the first and
// second order conditions on a set of reduced blocks, over |l|_1 <= Lmax.
//------------------------------------------------------------------------------
inline double melnikov_margin_scan(const BlockNormalForm& nf, const AngleLattice& lat,
                                   double gamma, double tau, int Lmax) {
    double margin = std::numeric_limits<double>::infinity();
    Eigen::SelfAdjointEigenSolver<Mat2c> es2;
    for (int p = 0; p < lat.P; ++p) {
        if (lat.ell1_of[p] > Lmax) continue;
        const double wl = lat.omega_dot(nf.omega, p);
        const double lb = lat.lbracket(p);
        const bool lzero = (p == lat.zero);
        for (int j : nf.ks) {
            // First order: wl I +/- A_j against 2 gamma j^2 / <l>^tau.
            const double thr1 = 2.0 * gamma * j * j / std::pow(lb, tau);
            for (int sign : {+1, -1}) {
                Mat2c L = wl * Mat2c::Identity();
                L += (sign > 0) ? nf.block(j) : Mat2c(-nf.block(j).conjugate());
                es2.compute(L);
                margin = std::min(margin, es2.eigenvalues().cwiseAbs().minCoeff() / thr1);
            }
            // Second order over ordered pairs.
            for (int k : nf.ks) {
                for (int sign : {+1, -1}) {
                    if (lzero && sign < 0 && j == k) continue;
                    MelnikovVerdict v = detail::melnikov_core(nf.block(j), nf.block(k), wl, lb,
                                                              j, k, sign, gamma, tau);
                    margin = std::min(margin, v.min_eig / v.threshold);
                }
            }
        }
    }
    return margin;
}

//------------------------------------------------------------------------------
// Outer loop.  The model's actions must already match omega (xi = xi(omega)).
//------------------------------------------------------------------------------
inline NashMoserResult nash_moser_solve(const Model& mdl, const Vec& omega,
                                        const NashMoserConfig& cfg) {
    const int d = mdl.nt(), s0 = mdl.idx.s0();
    if (!(cfg.gamma > 0.0 && cfg.gamma < 0.25))
        throw ValidationError("gamma must lie in (0, 1/4)");
    const double tau = (cfg.tau > 0) ? cfg.tau : 2.0 * d + 1.0;
    const double small = mdl.eps * std::pow(cfg.gamma, -4.0);
    if (small >= cfg.delta2) throw SmallnessGate(small, cfg.delta2);
    const double omdef = (mdl.omega_tangential(mdl.xi) - omega).norm();
    if (omdef > 1e-8 * std::max(1.0, omega.norm()))
        throw ValidationError("model actions do not match omega (use xi_of_omega)");

    NashMoserResult res;
    res.iota = TorusEmbedding(mdl.lat, mdl.idx);
    res.zeta = Vec::Zero(d);

    std::vector<double> fit_N, fit_r;
    for (int n = 0; n <= cfg.max_outer; ++n) {
        ResidualTriple E = mdl.residual_F(res.iota, res.zeta, omega);
        OuterRecord rec;
        rec.n = n;
        rec.resid_low = E.norm(s0, cfg.sigma - 2.0);
        rec.resid_high = E.norm(s0 + cfg.beta1(), cfg.sigma - 2.0);
        rec.zeta_abs = res.zeta.norm();
        res.report.final_resid = rec.resid_low;
        res.report.iters = n;
        if (n >= 1) {
            fit_N.push_back(res.report.log.back().N_n);
            fit_r.push_back(std::max(rec.resid_low, 1e-300));
        }

        if (rec.resid_low <= cfg.tol_NM) {
            res.report.log.push_back(rec);
            res.report.converged = true;
            break;
        }
        if (n == cfg.max_outer) {
            res.report.log.push_back(rec);
            throw NoConvergence("residual " + std::to_string(rec.resid_low) +
                                " above target after " + std::to_string(n) + " outer steps");
        }

        const double gamma_n = cfg.gamma * (1.0 + std::pow(2.0, -n));
        const double level = 2.0 * gamma_n;
        MelnikovParams prm = MelnikovParams::make(level, tau);
        IsotropicEmbedding iso = isotropize(mdl, res.iota, E, omega, level, tau);
        RightInverseBundle B = build_right_inverse(mdl, iso, res.zeta, omega, prm, cfg.ropt);

        rec.gamma_n = gamma_n;
        rec.N_n = std::pow(cfg.N0, std::pow(cfg.chi, n));
        rec.ladder_steps = B.reduction.steps;
        rec.gate_ok = B.reduction.gate_ok;
        rec.mel_margin = melnikov_margin_scan(B.reduction.blocks, mdl.lat, level, tau, mdl.lat.L);

        // The box carries l1 content up to d L; the ladder widens onto it.
        const int Ncut = std::min(mdl.lat.d * mdl.lat.L, static_cast<int>(std::floor(rec.N_n)));
        ResidualTriple g;
        g.E_theta = E.E_theta.project(Ncut);
        g.E_y = E.E_y.project(Ncut);
        g.E_z = E.E_z.project(Ncut);
        g.zeta = E.zeta;
        TangentUpdate T = approximate_right_inverse(g, B, level, tau);
        rec.tri_resid = T.resid_rel;

        TorusEmbedding step;
        step.Theta = T.iota.Theta.project(Ncut);
        step.y = T.iota.y.project(Ncut);
        step.z = T.iota.z.project(Ncut);
        step.Theta.C *= cplx{-1.0};
        step.y.C *= cplx{-1.0};
        step.z.C *= cplx{-1.0};
        rec.step_norm = step.norm(s0, cfg.sigma);
        res.iota += step;
        res.zeta -= T.zeta;
        res.report.log.push_back(rec);
    }

    if (fit_N.size() >= 2) res.report.decay_fit = loglog_slope(fit_N, fit_r);

    // Rebuild the stack at the returned torus for stability diagnostics.
    if (!cfg.final_bundle) return res;
    ResidualTriple E = mdl.residual_F(res.iota, res.zeta, omega);
    MelnikovParams prm = MelnikovParams::make(2.0 * cfg.gamma, tau);
    IsotropicEmbedding iso = isotropize(mdl, res.iota, E, omega, 2.0 * cfg.gamma, tau);
    res.bundle = build_right_inverse(mdl, iso, res.zeta, omega, prm, cfg.ropt);
    res.report.lam_minus = res.bundle->reduction.lam_minus;
    res.report.lam_plus = res.bundle->reduction.lam_plus;
    res.report.c_fit = res.bundle->reduction.c_fit;
    return res;
}

//------------------------------------------------------------------------------
// Pointwise evaluation on the trajectory phi = omega t.
//------------------------------------------------------------------------------
namespace detail {

inline CMat op_eval(const OperatorMap& A, const Vec& omega, double t) {
    CMat D = CMat::Zero(A.n, A.n);
    for (const auto& [p, B] : A.blocks)
        D += std::exp(I_UNIT * (A.lat->omega_dot(omega, p) * t)) * B;
    return D;
}

inline CVec field_eval(const Field& f, const Vec& omega, double t) {
    CVec v = CVec::Zero(f.m());
    for (int p = 0; p < f.lat->P; ++p) {
        if (f.C.col(p).isZero(0)) continue;
        v += std::exp(I_UNIT * (f.lat->omega_dot(omega, p) * t)) * f.C.col(p);
    }
    return v;
}

inline double hnorm(const CVec& v, const IndexSets& idx, double sigma) {
    const int M = idx.M();
    double acc = 0;
    for (int i = 0; i < v.size(); ++i) {
        const double w = std::pow(jbracket(idx.S_perp[i % M]), sigma);
        acc += std::norm(v[i]) * w * w;
    }
    return std::sqrt(acc);
}

}  // namespace detail

//------------------------------------------------------------------------------
// Linear stability of the converged torus.  In block coordinates the normal
// equation reads dV/dt = -N_inf V - g(omega t) with constant self-adjoint
// blocks; the solution is an exact phase rotation of the homogeneous part plus
// the quasi-periodic particular solution of the transport equation, both
// pushed back through the stage frames at phi = omega t.
//------------------------------------------------------------------------------
struct StabilityReport {
    double sup_ratio = 0;    // max_t |W(t)| / (|W(0)| + |ups0|) over samples
    double frame_cond = 0;   // max over sampled t of cond(stage stack)
    double ups_drift = 0;    // |ups(t) - ups(0)|: identically zero
    double block_defect = 0; // max_k |A_k - A_k^H|
    std::vector<double> sup_per_sample;
};

inline StabilityReport stability_check(const RightInverseBundle& B, double horizon,
                                       int n_samples, int n_times = 96, unsigned seed = 1) {
    const Model& mdl = *B.mdl;
    const IndexSets& idx = mdl.idx;
    const int M = idx.M(), d = mdl.nt();
    const double sigma = 2.0;
    const BlockNormalForm& nf = B.L.nf;

    StabilityReport rep;
    for (int k : nf.ks)
        rep.block_defect = std::max(rep.block_defect,
                                    (nf.block(k) - nf.block(k).adjoint()).norm());

    // Eigendecompositions of the limit blocks (rotation generators).
    std::unordered_map<int, Eigen::SelfAdjointEigenSolver<Mat2c>> eig;
    for (int k : nf.ks) eig.emplace(k, Eigen::SelfAdjointEigenSolver<Mat2c>(nf.block(k)));

    // Stage stack (outermost first) as dense matrices at a given time.
    auto stack_at = [&](double t) {
        CMat D = CMat::Identity(2 * M, 2 * M);
        for (const OperatorMap& Phi : B.L.Phi) D = D * detail::op_eval(Phi, B.omega, t);
        return D;
    };

    std::mt19937 rng(seed);
    std::normal_distribution<double> nd;
    const CMat D0 = stack_at(0.0);
    Eigen::PartialPivLU<CMat> lu0(D0);

    for (int s = 0; s < n_samples; ++s) {
        Vec ups0(d);
        for (int i = 0; i < d; ++i) ups0[i] = nd(rng);
        CVec W0(2 * M);
        for (int i = 0; i < M; ++i) W0[i] = cplx(nd(rng), nd(rng));
        for (int i = 0; i < M; ++i) W0[M + i] = std::conj(W0[i]);

        // Forcing in block coordinates and its quasi-periodic solution.
        Field upsf(mdl.lat, idx.S);
        upsf.C.col(mdl.lat.zero) = ups0.cast<cplx>();
        Field gdown = detail::jj2_apply(detail::k11t_apply(mdl, B.K.K11, upsf));
        for (const OperatorMap& Pi : B.L.PhiInv) gdown = Pi.apply(gdown);
        gdown *= cplx{-1.0};
        Field Vp = linf_inverse(nf, idx, gdown, B.L.prm);

        const CVec V0 = lu0.solve(W0) - detail::field_eval(Vp, B.omega, 0.0);
        const double denom = detail::hnorm(W0, idx, sigma) + ups0.norm();

        double sup = 0;
        for (int it = 0; it < n_times; ++it) {
            const double t = horizon * it / (n_times - 1.0);
            CVec V = detail::field_eval(Vp, B.omega, t);
            for (int k : nf.ks) {
                const auto& es = eig.at(k);
                Mat2c rot = es.eigenvectors() *
                            (-I_UNIT * t * es.eigenvalues().array().cast<cplx>()).exp().matrix()
                                .asDiagonal() *
                            es.eigenvectors().adjoint();
                const int rj = idx.norm_pos(k), rjm = idx.norm_pos(-k);
                Eigen::Vector2cd top(V0[rj], V0[rjm]), bot(V0[M + rj], V0[M + rjm]);
                top = rot * top;
                bot = rot.conjugate() * bot;
                V[rj] += top[0];
                V[rjm] += top[1];
                V[M + rj] += bot[0];
                V[M + rjm] += bot[1];
            }
            const CMat D = stack_at(t);
            sup = std::max(sup, detail::hnorm(D * V, idx, sigma) / denom);
            if (s == 0) {
                Eigen::JacobiSVD<CMat> svd(D);
                rep.frame_cond = std::max(
                    rep.frame_cond,
                    svd.singularValues().maxCoeff() / svd.singularValues().minCoeff());
            }
        }
        rep.sup_per_sample.push_back(sup);
        rep.sup_ratio = std::max(rep.sup_ratio, sup);
    }
    return rep;
}

//------------------------------------------------------------------------------
// Size of the torus components.
//------------------------------------------------------------------------------
struct TorusSize {
    double theta_norm = 0, y_norm = 0, z_norm = 0;
};

inline TorusSize torus_size_audit(const Model& mdl, const TorusEmbedding& iota,
                                  double sigma = 2.0) {
    const int s0 = mdl.idx.s0();
    TorusSize sz;
    sz.theta_norm = iota.Theta.sobolev_norm(s0, 0);
    sz.y_norm = iota.y.sobolev_norm(s0, 0);
    sz.z_norm = iota.z.sobolev_norm(s0, sigma);
    return sz;
}

}  // namespace kamtor
