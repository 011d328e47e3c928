//==============================================================================
// rightinv.hpp
// Approximate right inverse of the linearized invariance operator at an
// isotropic torus: the triangular chart-side solve and its conjugation by the
// chart differentials.
// Features:
//   • FrakLStack: handle for the normal-direction operator L = om.d_phi + Z,
//     inverted through the transform stack sandwich
//     L^{-1} = Phi_1 ... Phi_k . Linf^{-1} . Phi_k^{-1} ... Phi_1^{-1}
//     with defect-correction refinement against the exact residual.
//   • RightInverseBundle: Taylor coefficients, chart, reduction stack, the
//     averaged matrix Mbar = [[K20 - K11 L^{-1} J2 K11^t]] with a conditioning
//     guard, and the cached per-column solves it is built from.
//   • solve_triangular: the three-row system solved in the order
//     (zeta, ups1) -> ups0 -> W -> psi, with a full residual audit.
//   • approximate_right_inverse: conjugation by the chart differential per
//     collocation sample; returns the quasi-Newton search direction.
//   • apply_dF: directional derivative of the invariance residual by central
//     differences (for approximate-inverse defect audits).
//==============================================================================
#pragma once

#include "kam.hpp"

namespace kamtor {

// The averaged twist-like matrix [[M_omega]] is numerically singular.
struct MbarSingular : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// The triangular solve failed its residual audit.
struct TriangularResidual : std::runtime_error {
    using std::runtime_error::runtime_error;
};

//------------------------------------------------------------------------------
// Pointwise actions of the Taylor coefficient fields (grid contractions).
//------------------------------------------------------------------------------
namespace detail {

// (K20 ups)_r = sum_c K20[r d + c] ups_c, pointwise on the grid.
inline Field k20_apply(const Model& mdl, const Field& K20, const Field& ups) {
    const int d = mdl.nt(), T = mdl.grid.T;
    CMat K = mdl.grid.to_grid(K20.C), U = mdl.grid.to_grid(ups.C);
    CMat out = CMat::Zero(d, T);
    for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c) out.row(r) += K.row(r * d + c).cwiseProduct(U.row(c));
    Field f(mdl.lat, mdl.idx.S);
    f.C = mdl.grid.from_grid(out);
    return f;
}

// (K11 W)_r = sum_c K11[r 2M + c] W_c  (d rows from a doubled field).
inline Field k11_apply(const Model& mdl, const Field& K11, const Field& W) {
    const int d = mdl.nt(), n2 = 2 * mdl.idx.M(), T = mdl.grid.T;
    CMat K = mdl.grid.to_grid(K11.C), U = mdl.grid.to_grid(W.C);
    CMat out = CMat::Zero(d, T);
    for (int r = 0; r < d; ++r)
        for (int c = 0; c < n2; ++c) out.row(r) += K.row(r * n2 + c).cwiseProduct(U.row(c));
    Field f(mdl.lat, mdl.idx.S);
    f.C = mdl.grid.from_grid(out);
    return f;
}

// (K11^t ups)_c = sum_r K11[r 2M + c] ups_r  (doubled rows from a d field).
inline Field k11t_apply(const Model& mdl, const Field& K11, const Field& ups) {
    const int d = mdl.nt(), M = mdl.idx.M(), n2 = 2 * M, T = mdl.grid.T;
    CMat K = mdl.grid.to_grid(K11.C), U = mdl.grid.to_grid(ups.C);
    CMat out = CMat::Zero(n2, T);
    for (int r = 0; r < d; ++r)
        for (int c = 0; c < n2; ++c) out.row(c) += K.row(r * n2 + c).cwiseProduct(U.row(r));
    std::vector<int> ds(n2);
    for (int i = 0; i < n2; ++i) ds[i] = mdl.idx.S_perp[i % M];
    Field f(mdl.lat, ds);
    f.C = mdl.grid.from_grid(out);
    return f;
}

// J2 W: top slot i W_bottom, bottom slot -i W_top.
inline Field jj2_apply(const Field& W) {
    const int M = static_cast<int>(W.sites.size()) / 2;
    Field out = W;
    out.C.topRows(M) = I_UNIT * W.C.bottomRows(M);
    out.C.bottomRows(M) = -I_UNIT * W.C.topRows(M);
    return out;
}

// (d_phi Theta)^t x for a constant real vector x, pointwise.
inline Field dtheta_t_const(const Model& mdl, const Field& Theta, const Vec& x) {
    const int d = mdl.nt();
    Field out(mdl.lat, mdl.idx.S);
    for (int k = 0; k < d; ++k) {
        Field dk = Theta.deriv(k);
        for (int r = 0; r < d; ++r) out.C.row(k) += x[r] * dk.C.row(r);
    }
    return out;
}

}  // namespace detail

//------------------------------------------------------------------------------
// Normal-direction operator handle: the transform-stack sandwich inverse.
//------------------------------------------------------------------------------
struct FrakLStack {
    Vec omega;
    OperatorMap Z;                          // zeroth-order part in original coords
    std::vector<OperatorMap> Phi, PhiInv;   // stage maps, conjugation order
    OperatorMap Ninf;                       // limit normal form (l = 0)
    BlockNormalForm nf;
    MelnikovParams prm;
    double tol = TOL_TRI;

    Field apply_L(const Field& h) const { return h.omega_deriv(omega) + Z.apply(h); }

    // One pass of the sandwich Phi-stack . Linf^{-1} . Phi-stack^{-1}.  The
    // stack is Phi[0] Phi[1] ... (outermost first), so its inverse applies
    // the stage inverses in the listed order.
    Field sandwich(const Field& g) const {
        Field t = g;
        for (const OperatorMap& Pi : PhiInv) t = Pi.apply(t);
        t = linf_inverse(nf, *Z.idx, t, prm);
        for (int i = static_cast<int>(Phi.size()) - 1; i >= 0; --i) t = Phi[i].apply(t);
        return t;
    }

    // Full solve L h = g, refined against the exact residual.  The sandwich
    // is contractive (its defect carries the reduction remainder and the
    // field-level truncation of the stage maps), so a few passes converge.
    Field solve(const Field& g, int max_iters = 30) const {
        const double gn = std::max(1e-300, g.max_abs());
        Field h = sandwich(g);
        Field best = h;
        double best_rel = std::numeric_limits<double>::infinity();
        for (int it = 0; it < max_iters; ++it) {
            Field r = g;
            r -= apply_L(h);
            const double rel = r.max_abs() / gn;
            if (rel < best_rel) {
                best_rel = rel;
                best = h;
            }
            if (rel <= 1e-14 || rel > 10.0 * best_rel) break;
            h += sandwich(r);
        }
        return best;
    }
};

//------------------------------------------------------------------------------
// Bundle: everything the triangular solve needs at one outer iterate.
//------------------------------------------------------------------------------
struct RightInverseBundle {
    const Model* mdl = nullptr;
    Vec omega;
    IsotropicEmbedding iso;
    ChartHandle chart;
    TaylorCoefficients K;
    FrakLStack L;
    Mat Mbar;                       // [[M_omega]], real d x d
    std::vector<Field> col_solve;   // L^{-1} J2 K11^t e_j per tangential j
    ReductionResult reduction;      // kept for diagnostics (eigenvalues, trace)
};

inline RightInverseBundle build_right_inverse(const Model& mdl, const IsotropicEmbedding& iso,
                                              const Vec& zeta, const Vec& omega,
                                              const MelnikovParams& prm,
                                              const ReductionOptions& ropt = {}) {
    RightInverseBundle B;
    B.mdl = &mdl;
    B.omega = omega;
    B.iso = iso;
    B.chart = gamma_chart(mdl, iso);
    B.K = taylor_K(mdl, iso, zeta, B.chart);

    EmbeddingSamples smp = embedding_samples(mdl, iso.modified());
    Linearized lin = assemble_frakL(mdl, smp, B.K, omega);
    LinStage st1 = transform_phi1(mdl, smp, lin.Z, omega);
    LinStage st2 = transform_phi2(mdl, smp, st1.Z, omega);
    GaugeStage st3 = transform_phi3(mdl, smp, st2.Z, omega);
    B.reduction = reduce_to_limit(omega, st3.Z, prm, ropt);

    B.L.omega = omega;
    B.L.Z = lin.Z;
    B.L.Phi = {st1.Phi, st2.Phi, st3.Phi, B.reduction.Phi};
    B.L.PhiInv = {st1.PhiInv, st2.PhiInv, st3.PhiInv, B.reduction.PhiInv};
    B.L.Ninf = B.reduction.Ninf;
    B.L.nf = B.reduction.blocks;
    B.L.prm = prm;

    // Averaged matrix Mbar = [[K20 - K11 L^{-1} J2 K11^t]], column by column.
    const int d = mdl.nt();
    B.Mbar = Mat(d, d);
    B.col_solve.resize(d);
    for (int j = 0; j < d; ++j) {
        Field ej(mdl.lat, mdl.idx.S);
        ej.C(j, mdl.lat.zero) = 1.0;
        B.col_solve[j] = B.L.solve(detail::jj2_apply(detail::k11t_apply(mdl, B.K.K11, ej)));
        Field col = detail::k20_apply(mdl, B.K.K20, ej);
        col -= detail::k11_apply(mdl, B.K.K11, B.col_solve[j]);
        B.Mbar.col(j) = col.average().real();
    }
    Eigen::JacobiSVD<Mat> svd(B.Mbar);
    const double smin = svd.singularValues().minCoeff();
    if (smin <= 0 || svd.singularValues().maxCoeff() / smin > COND_CAP)
        throw MbarSingular("averaged matrix [[M_omega]] is numerically singular");
    return B;
}

//------------------------------------------------------------------------------
// Triangular solve of the chart-side linear system
//   om.d_phi psi - K20 ups - K11 W            = g1
//   om.d_phi ups + (d_phi theta)^t zeta       = g2
//   L W + J2 K11^t ups                        = g3
//------------------------------------------------------------------------------
struct TriangularSolution {
    Field psi, ups;  // over S
    Field W;         // doubled normal field
    Vec zeta;
    double resid_rel = 0;
};

namespace detail {
inline double triple_norm(const Field& a, const Field& b, const Field& c, int s0, double sigma) {
    double x = a.sobolev_norm(s0, 0), y = b.sobolev_norm(s0, 0),
           z = c.sobolev_norm(s0, sigma - 2.0);
    return std::sqrt(x * x + y * y + z * z);
}
}  // namespace detail

inline TriangularSolution solve_triangular(const Field& g1, const Field& g2, const Field& g3,
                                           const RightInverseBundle& B, double gamma, double tau,
                                           double tol = TOL_TRI, double sigma = 2.0) {
    const Model& mdl = *B.mdl;
    const int d = mdl.nt(), zero = mdl.lat.zero;
    TriangularSolution out;

    // Second equation: zeta from the average, ups1 by transport.
    out.zeta = g2.average().real();
    Field rhs2 = g2;
    rhs2 -= detail::dtheta_t_const(mdl, B.iso.base.Theta, out.zeta);
    rhs2.C.col(zero) -= g2.average();
    Field ups1 = omega_dvphi_inverse(rhs2, B.omega, gamma, tau);

    // Average condition for ups0.
    Field Lg3 = B.L.solve(g3);
    Field S1 = B.L.solve(detail::jj2_apply(detail::k11t_apply(mdl, B.K.K11, ups1)));
    Field Mups1 = detail::k20_apply(mdl, B.K.K20, ups1);
    Mups1 -= detail::k11_apply(mdl, B.K.K11, S1);
    Vec rhs0 = g1.average().real() + detail::k11_apply(mdl, B.K.K11, Lg3).average().real() +
               Mups1.average().real();
    Vec ups0 = -B.Mbar.fullPivLu().solve(rhs0);

    out.ups = ups1;
    out.ups.C.col(zero) += ups0.cast<cplx>();

    // Third equation: W from the cached solves by linearity.
    out.W = Lg3;
    out.W -= S1;
    for (int j = 0; j < d; ++j) {
        Field t = B.col_solve[j];
        t *= cplx{ups0[j]};
        out.W -= t;
    }

    // First equation: psi zero-mean by transport; the mean of the argument
    // vanishes by the choice of ups0 up to the audited solve defects.
    Field arg = g1;
    arg += detail::k11_apply(mdl, B.K.K11, out.W);
    arg += detail::k20_apply(mdl, B.K.K20, out.ups);
    arg.C.col(zero).setZero();
    out.psi = omega_dvphi_inverse(arg, B.omega, gamma, tau);

    // Residual audit of the full system.
    Field r1 = out.psi.omega_deriv(B.omega);
    r1 -= detail::k20_apply(mdl, B.K.K20, out.ups);
    r1 -= detail::k11_apply(mdl, B.K.K11, out.W);
    r1 -= g1;
    Field r2 = out.ups.omega_deriv(B.omega);
    r2 += detail::dtheta_t_const(mdl, B.iso.base.Theta, out.zeta);
    r2.C.col(zero) += out.zeta.cast<cplx>();  // (d_phi theta)^t = Id + (d_phi Theta)^t
    r2 -= g2;
    Field r3 = B.L.apply_L(out.W);
    r3 += detail::jj2_apply(detail::k11t_apply(mdl, B.K.K11, out.ups));
    r3 -= g3;

    const int s0 = mdl.idx.s0();
    const double gn = std::max(1e-300, detail::triple_norm(g1, g2, g3, s0, sigma));
    out.resid_rel = detail::triple_norm(r1, r2, r3, s0, sigma) / gn;
    if (out.resid_rel > tol)
        throw TriangularResidual("triangular-system residual " +
                                 std::to_string(out.resid_rel) + " exceeds tolerance");
    return out;
}

//------------------------------------------------------------------------------
// Chart conjugation: the quasi-Newton search direction.
//------------------------------------------------------------------------------
struct TangentUpdate {
    TorusEmbedding iota;  // hat components (Theta, y, z)
    Vec zeta;
    double resid_rel = 0;
};

inline TangentUpdate approximate_right_inverse(const ResidualTriple& g,
                                               const RightInverseBundle& B, double gamma,
                                               double tau, double tol = TOL_TRI) {
    const Model& mdl = *B.mdl;
    const int d = mdl.nt(), M = mdl.idx.M();
    std::vector<int> stacked = mdl.idx.S;
    stacked.insert(stacked.end(), mdl.idx.S.begin(), mdl.idx.S.end());
    stacked.insert(stacked.end(), mdl.idx.S_perp.begin(), mdl.idx.S_perp.end());
    stacked.insert(stacked.end(), mdl.idx.S_perp.begin(), mdl.idx.S_perp.end());

    // Pull the residual back through the chart differential.
    Field u(mdl.lat, stacked);
    u.C.topRows(d) = g.E_theta.C;
    u.C.middleRows(d, d) = g.E_y.C;
    u.C.middleRows(2 * d, M) = g.E_z.C;
    u.C.bottomRows(M) = g.E_z.conj().C;
    Field v = B.chart.apply(u, true);

    Field g1(mdl.lat, mdl.idx.S), g2(mdl.lat, mdl.idx.S);
    g1.C = v.C.topRows(d);
    g2.C = v.C.middleRows(d, d);
    std::vector<int> ds(2 * M);
    for (int i = 0; i < 2 * M; ++i) ds[i] = mdl.idx.S_perp[i % M];
    Field g3(mdl.lat, ds);
    g3.C = v.C.bottomRows(2 * M);

    TriangularSolution tri = solve_triangular(g1, g2, g3, B, gamma, tau, tol);

    // Push the chart-side solution forward.
    Field t(mdl.lat, stacked);
    t.C.topRows(d) = tri.psi.C;
    t.C.middleRows(d, d) = tri.ups.C;
    t.C.bottomRows(2 * M) = tri.W.C;
    Field w = B.chart.apply(t, false);

    TangentUpdate out;
    out.iota = TorusEmbedding(mdl.lat, mdl.idx);
    out.iota.Theta.C = w.C.topRows(d);
    out.iota.y.C = w.C.middleRows(d, d);
    out.iota.z.C = w.C.middleRows(2 * d, M);
    out.zeta = tri.zeta;
    out.resid_rel = tri.resid_rel;
    return out;
}

//------------------------------------------------------------------------------
// Directional derivative of the invariance residual (central differences).
//------------------------------------------------------------------------------
inline ResidualTriple apply_dF(const Model& mdl, const TorusEmbedding& iota, const Vec& zeta,
                               const Vec& omega, const TorusEmbedding& dir, const Vec& dzeta,
                               double step = 1e-6) {
    const double dn = std::max(1.0, dir.norm(mdl.idx.s0(), 2.0) + dzeta.norm());
    const double h = step / dn;
    TorusEmbedding up = iota, dn_ = iota;
    up.Theta.C += h * dir.Theta.C;
    up.y.C += h * dir.y.C;
    up.z.C += h * dir.z.C;
    dn_.Theta.C -= h * dir.Theta.C;
    dn_.y.C -= h * dir.y.C;
    dn_.z.C -= h * dir.z.C;
    ResidualTriple Fp = mdl.residual_F(up, zeta + h * dzeta, omega);
    ResidualTriple Fm = mdl.residual_F(dn_, zeta - h * dzeta, omega);
    ResidualTriple out;
    out.E_theta = Fp.E_theta;
    out.E_theta.C = (Fp.E_theta.C - Fm.E_theta.C) / (2.0 * h);
    out.E_y = Fp.E_y;
    out.E_y.C = (Fp.E_y.C - Fm.E_y.C) / (2.0 * h);
    out.E_z = Fp.E_z;
    out.E_z.C = (Fp.E_z.C - Fm.E_z.C) / (2.0 * h);
    out.zeta = dzeta;
    return out;
}

}  // namespace kamtor
