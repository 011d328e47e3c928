//==============================================================================
// linearize.hpp
// Linearized operator in the normal directions and the three-step conjugation
// that brings it to a constant-coefficient normal form plus a one-smoothing
// remainder.
// Features:
//   • assemble_frakL: zeroth-order part JJ2 . K02 of the normal linearization,
//     Hamiltonian-structure audit, and the diagnostic split into the model
//     part J (D^2 + Omega + eps Q) I2 and the weighted remainder R0.
//   • transform_phi1: off-diagonal kill, generator built from the smoothing
//     sandwich <<D>>^{-1} a1 <<D>>^{-1} with a1 = -(i/2) q2.
//   • transform_phi2: x-dependence kill, generator from the smoothing sandwich
//     D <<D>>^{-2} a2 + a2 D <<D>>^{-2} with 4 d_x a2 = q1 - av(q1).
//   • transform_phi3: angle gauge e^{-i beta_k} removing the remaining angle
//     dependence of the diagonal; constant normal form N0 and the asymptotic
//     seed decomposition mu_k = omega_k(xi, 0) + c + rho_k / k.
//   • Normal-form/remainder splitting rule and the paired 2x2 block accessor.
// All conjugations are carried out exactly within the truncated convolution
// algebra through defect-correction solves.
//==============================================================================
#pragma once

#include "geometry.hpp"

namespace kamtor {

struct StructureViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ExpDivergence : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Exponential with a hard failure when the series does not settle.
inline OperatorMap exp_series_checked(const OperatorMap& G) {
    OperatorMap out = OperatorMap::identity(*G.lat, *G.idx);
    OperatorMap term = out;
    for (int k = 1; k <= EXP_SERIES_CAP; ++k) {
        term = compose(term, G);
        term *= cplx{1.0 / k};
        out += term;
        if (term.max_block_norm() < TOL_EXP) return out;
    }
    throw ExpDivergence("flow exponential did not converge within the series cap");
}

//------------------------------------------------------------------------------
// Per-sample data of the embedding shared by the assembly and the transforms:
// mode amplitudes, normal frequencies at the sample actions, and the x-spectra
// of the perturbation Hessian fields q1, q2.
//------------------------------------------------------------------------------
struct EmbeddingSamples {
    CMat W;        // nsites x T mode amplitudes
    Mat omns;      // M x T normal frequencies omega_k(I(phi_t))
    CMat q1h, q2h; // Gx x T x-spectra of q1, q2 (zero when unperturbed)
    double q1_imag = 0;  // largest imaginary part seen in q1 samples
};

inline EmbeddingSamples embedding_samples(const Model& mdl, const TorusEmbedding& emb) {
    const int d = mdl.nt(), M = mdl.idx.M(), T = mdl.grid.T;
    EmbeddingSamples smp;
    smp.W = CMat(mdl.nsites(), T);
    smp.omns = Mat(M, T);
    smp.q1h = CMat::Zero(mdl.Gx, T);
    smp.q2h = CMat::Zero(mdl.Gx, T);
    CMat Th = mdl.grid.to_grid(emb.Theta.C), Y = mdl.grid.to_grid(emb.y.C),
         Z = mdl.grid.to_grid(emb.z.C);
    const bool pert = (mdl.eps != 0.0) && !mdl.terms.empty();
    CVec w(mdl.nsites());
    for (int t = 0; t < T; ++t) {
        for (int k = 0; k < d; ++k) {
            double Ik = mdl.xi[k] + Y(k, t).real();
            if (!(Ik > 0)) throw SqrtDomain("action xi_k + y_k left the positive half line");
            w[k] = std::sqrt(Ik) * std::exp(-I_UNIT * (mdl.angle(t, k) + Th(k, t).real()));
        }
        for (int m = 0; m < M; ++m) w[d + m] = Z(m, t);
        smp.W.col(t) = w;
        ActionVector I(mdl.idx);
        for (int i = 0; i < mdl.nsites(); ++i)
            (i < d ? I.tang[i] : I.norm[i - d]) = std::norm(w[i]);
        for (int m = 0; m < M; ++m) smp.omns(m, t) = mdl.omega_site(mdl.idx.S_perp[m], I);
        if (pert) {
            CVec pzb, q1, q2, q1v;
            mdl.pert_spectra(mdl.u_of_w(w), pzb, q1, q2, &q1v);
            smp.q1h.col(t) = q1;
            smp.q2h.col(t) = q2;
            smp.q1_imag = std::max(smp.q1_imag, q1v.imag().cwiseAbs().maxCoeff());
        }
    }
    return smp;
}

// Signed-bin lookup in a column spectrum.
inline cplx sbin(const CMat& spec, int col, int j) {
    int Gx = static_cast<int>(spec.rows());
    return spec(((j % Gx) + Gx) % Gx, col);
}

//------------------------------------------------------------------------------
// Hamiltonian-structure defect of a zeroth-order part Z = JJ2 . A: the
// quadratic-form matrix A must be symmetric and real in the paired sense
// conj(A(l)) = S A(-l) S with S the slot swap.
//------------------------------------------------------------------------------
inline double hamiltonian_structure_defect(const OperatorMap& Z) {
    const int M = Z.idx->M(), n = Z.n;
    CMat JJ = JJ2_mat(M);  // JJ2^{-1} = JJ2
    double worst = 0;
    for (auto& [p, B] : Z.blocks) {
        CMat A = JJ * B;
        worst = std::max(worst, (A - A.transpose()).cwiseAbs().maxCoeff());
        CMat An = JJ * Z.block(Z.lat->neg_of[p]);
        CMat SAS(n, n);
        SAS << An.block(M, M, M, M), An.block(M, 0, M, M),
               An.block(0, M, M, M), An.block(0, 0, M, M);
        worst = std::max(worst, (A.conjugate() - SAS).cwiseAbs().maxCoeff());
    }
    return worst;
}

//------------------------------------------------------------------------------
// Assembly: L = omega . d_phi I2 + JJ2 K02, with the diagnostic decomposition
// JJ2 K02 = J (D^2 + Omega + eps Q) I2 + R0 and the weighted remainder norm.
//------------------------------------------------------------------------------
struct Linearized {
    Vec omega;
    OperatorMap Z;     // full zeroth-order part
    OperatorMap main;  // model part J (D^2 + Omega + eps Q) I2
    OperatorMap R0;    // Z - main (one smoothing)
    double rem_norm = 0;  // |R0 D|_{s0, sigma-1}
    double q1_imag = 0;
};

inline Linearized assemble_frakL(const Model& mdl, const EmbeddingSamples& smp,
                                 const TaylorCoefficients& K, const Vec& omega,
                                 double sigma = 2.0) {
    const int M = mdl.idx.M(), T = mdl.grid.T;
    Linearized L;
    L.omega = omega;
    L.Z = compose(JJ2_op(mdl.lat, mdl.idx), K.K02);
    double scale = std::max(1.0, L.Z.max_block_norm());
    if (hamiltonian_structure_defect(L.Z) > TOL_STRUCT * scale)
        throw StructureViolation("zeroth-order part is not a Hamiltonian operator");

    // Model part sample by sample: diag(omega_k(I)) on both slots plus the
    // multiplication-operator sandwich of (q1, q2), then the left factor J.
    const bool pert = (mdl.eps != 0.0) && !mdl.terms.empty();
    std::vector<CMat> S(T);
    for (int t = 0; t < T; ++t) {
        CMat B = CMat::Zero(2 * M, 2 * M);
        for (int a = 0; a < M; ++a) {
            B(a, a) = smp.omns(a, t);
            B(M + a, M + a) = smp.omns(a, t);
        }
        if (pert)
            for (int a = 0; a < M; ++a)
                for (int b = 0; b < M; ++b) {
                    int kn = mdl.idx.S_perp[a], km = mdl.idx.S_perp[b];
                    B(a, b) += mdl.eps * sbin(smp.q1h, t, km - kn);          // w  -> w
                    B(a, M + b) += mdl.eps * sbin(smp.q2h, t, -kn - km);     // wb -> w
                    B(M + a, b) += mdl.eps * std::conj(sbin(smp.q2h, t, -kn - km));
                    B(M + a, M + b) += mdl.eps * sbin(smp.q1h, t, kn - km);  // wb -> wb
                }
        B.topRows(M) *= I_UNIT;
        B.bottomRows(M) *= -I_UNIT;
        S[t] = B;
    }
    L.main = op_from_samples(mdl.lat, mdl.idx, mdl.grid, S);
    L.R0 = L.Z - L.main;
    L.R0.prune(1e-16 * scale);
    L.rem_norm = L.R0.right_weight().operator_norm(mdl.idx.s0(), sigma - 1.0);
    L.q1_imag = smp.q1_imag;
    return L;
}

//------------------------------------------------------------------------------
// One conjugation stage: flow map, its exact right inverse, and the new
// zeroth-order part Z' solving Phi Z' = Z Phi + (omega . d_phi Phi).
//------------------------------------------------------------------------------
struct LinStage {
    OperatorMap Phi, PhiInv, Z;
};

inline OperatorMap conjugate_stage(const OperatorMap& Phi, const OperatorMap& PhiInv,
                                   const OperatorMap& Z, const Vec& omega) {
    OperatorMap rhs = compose(Z, Phi) + Phi.omega_deriv(omega);
    return solve_left_composition(Phi, rhs, &PhiInv);
}

inline LinStage make_stage(const Model& mdl, const std::vector<CMat>& gen,
                           const OperatorMap& Z, const Vec& omega) {
    LinStage st;
    OperatorMap G = op_from_samples(mdl.lat, mdl.idx, mdl.grid, gen);
    st.Phi = exp_series_checked(G);
    st.PhiInv = refine_inverse(st.Phi, exp_series_checked(cplx{-1.0} * G));
    st.Z = conjugate_stage(st.Phi, st.PhiInv, Z, omega);
    return st;
}

// First transform: kill the off-diagonal perturbation blocks.  Generator
// -eps J A1 with A1 the off-diagonal sandwich <<D>>^{-1} a1 <<D>>^{-1},
// a1 = -(i/2) q2.
inline LinStage transform_phi1(const Model& mdl, const EmbeddingSamples& smp,
                               const OperatorMap& Z, const Vec& omega) {
    const int M = mdl.idx.M(), T = mdl.grid.T;
    Vec chi_inv(M);
    for (int a = 0; a < M; ++a) {
        double k = mdl.idx.S_perp[a];
        chi_inv[a] = 1.0 / std::sqrt(1.0 + 4.0 * PI * PI * k * k);
    }
    std::vector<CMat> gen(T);
    for (int t = 0; t < T; ++t) {
        CMat G = CMat::Zero(2 * M, 2 * M);
        for (int a = 0; a < M; ++a)
            for (int b = 0; b < M; ++b) {
                int kn = mdl.idx.S_perp[a], km = mdl.idx.S_perp[b];
                cplx a1 = cplx{0.0, -0.5} * sbin(smp.q2h, t, -kn - km);
                cplx tr = chi_inv[a] * a1 * chi_inv[b];
                G(a, M + b) = -mdl.eps * I_UNIT * tr;                 // -eps * (J A1) top
                G(M + a, b) = -mdl.eps * (-I_UNIT) * std::conj(tr);   // -eps * (J A1) bottom
            }
        gen[t] = G;
    }
    return make_stage(mdl, gen, Z, omega);
}

// Second transform: kill the x-dependence of the surviving diagonal term.
// Generator -eps J A2 with A2 = diag(D <<D>>^{-2} a2 + a2 D <<D>>^{-2}, conj),
// a2 = (1/4) d_x^{-1} (q1 - av q1).
// a2 spectra from the q1 spectra: a2h(j) = q1h(j) / (4 * 2 pi i j) for j != 0,
// a2h(0) = 0 (the d_x^{-1} convention annihilating constants).
inline CMat a2_spectra(const CMat& q1h) {
    const int Gx = static_cast<int>(q1h.rows());
    CMat a2h = CMat::Zero(Gx, q1h.cols());
    for (int b = 0; b < Gx; ++b) {
        int j = (b <= Gx / 2) ? b : b - Gx;
        if (j == 0) continue;
        a2h.row(b) = q1h.row(b) / (4.0 * 2.0 * PI * I_UNIT * static_cast<double>(j));
    }
    return a2h;
}

inline LinStage transform_phi2(const Model& mdl, const EmbeddingSamples& smp,
                               const OperatorMap& Z, const Vec& omega) {
    const int M = mdl.idx.M(), T = mdl.grid.T;
    Vec chi2_inv(M), dmul(M);
    for (int a = 0; a < M; ++a) {
        double k = mdl.idx.S_perp[a];
        chi2_inv[a] = 1.0 / (1.0 + 4.0 * PI * PI * k * k);
        dmul[a] = -2.0 * PI * k;  // D (and conj D) multiplier on either slot
    }
    CMat a2h = a2_spectra(smp.q1h);
    std::vector<CMat> gen(T);
    for (int t = 0; t < T; ++t) {
        CMat G = CMat::Zero(2 * M, 2 * M);
        for (int a = 0; a < M; ++a)
            for (int b = 0; b < M; ++b) {
                int kn = mdl.idx.S_perp[a], km = mdl.idx.S_perp[b];
                double c = dmul[a] * chi2_inv[a] + dmul[b] * chi2_inv[b];
                G(a, b) = -mdl.eps * I_UNIT * c * sbin(a2h, t, km - kn);
                G(M + a, M + b) = -mdl.eps * (-I_UNIT) * c * sbin(a2h, t, kn - km);
            }
        gen[t] = G;
    }
    return make_stage(mdl, gen, Z, omega);
}

//------------------------------------------------------------------------------
// Third transform: angle gauge.  beta_k solves
//   omega . d_phi beta_k = omega_k(I(phi)) + eps av(q1)(phi) - mu_k,
// mu_k the space-time average, and Phi3 = diag(e^{-i beta_k}, e^{i beta_k}).
// Returns the constant normal form N0 = J diag(mu) I2 and the seed
// decomposition mu_k = omega_k(xi, 0) + c + rho_k / k.
//------------------------------------------------------------------------------
struct GaugeStage {
    OperatorMap Phi, PhiInv, Z;
    OperatorMap N0;  // J diag(mu) on both slots
    OperatorMap R;   // Z - N0
    Field beta;      // gauge phases, over the normal sites
    Vec mu;          // [[omega_k o I]] + eps [[q1]]
    double c_eps = 0;
    Vec rho;         // k (mu_k - omega_k(xi,0) - c_eps)
};

inline GaugeStage transform_phi3(const Model& mdl, const EmbeddingSamples& smp,
                                 const OperatorMap& Z2, const Vec& omega,
                                 double gamma = 0.0, double tau = 0.0) {
    const int M = mdl.idx.M(), T = mdl.grid.T;
    GaugeStage st;

    // Diagonal being gauged away, spectrally.
    CMat diagv(M, T);
    for (int t = 0; t < T; ++t)
        for (int m = 0; m < M; ++m)
            diagv(m, t) = smp.omns(m, t) + mdl.eps * smp.q1h(0, t).real();
    Field r(mdl.lat, mdl.idx.S_perp);
    r.C = mdl.grid.from_grid(diagv);
    st.mu = r.C.col(mdl.lat.zero).real();
    r.C.col(mdl.lat.zero).setZero();
    st.beta = omega_dvphi_inverse(r, omega, gamma, tau);

    // Flow samples and the exact conjugation.
    CMat bg = mdl.grid.to_grid(st.beta.C);
    std::vector<CMat> S(T), Si(T);
    for (int t = 0; t < T; ++t) {
        CMat P = CMat::Zero(2 * M, 2 * M), Pi = CMat::Zero(2 * M, 2 * M);
        for (int m = 0; m < M; ++m) {
            cplx e = std::exp(-I_UNIT * bg(m, t).real());
            P(m, m) = e;
            P(M + m, M + m) = std::conj(e);
            Pi(m, m) = std::conj(e);
            Pi(M + m, M + m) = e;
        }
        S[t] = P;
        Si[t] = Pi;
    }
    st.Phi = op_from_samples(mdl.lat, mdl.idx, mdl.grid, S);
    st.PhiInv = refine_inverse(st.Phi, op_from_samples(mdl.lat, mdl.idx, mdl.grid, Si));
    st.Z = conjugate_stage(st.Phi, st.PhiInv, Z2, omega);

    // Constant normal form and remainder.
    CVec nd(2 * M);
    for (int m = 0; m < M; ++m) {
        nd[m] = I_UNIT * st.mu[m];
        nd[M + m] = -I_UNIT * st.mu[m];
    }
    st.N0 = OperatorMap::diagonal(mdl.lat, mdl.idx, nd);
    st.R = st.Z - st.N0;
    st.R.prune(1e-16 * std::max(1e-300, st.Z.max_block_norm()));

    // Seed decomposition: least squares in the weights k^2, which minimises
    // the l2 size of the residual coefficients rho_k.
    ActionVector I0(mdl.idx);
    I0.tang = mdl.xi;
    double num = 0, den = 0;
    Vec delta(M);
    for (int m = 0; m < M; ++m) {
        double k = mdl.idx.S_perp[m];
        delta[m] = st.mu[m] - mdl.omega_site(mdl.idx.S_perp[m], I0);
        num += k * k * delta[m];
        den += k * k;
    }
    st.c_eps = num / den;
    st.rho = Vec(M);
    for (int m = 0; m < M; ++m)
        st.rho[m] = mdl.idx.S_perp[m] * (delta[m] - st.c_eps);
    return st;
}

//------------------------------------------------------------------------------
// Normal-form splitting: N keeps the angle-constant, slot-decoupled entries
// that pair sites of equal modulus; R gets everything else.
//------------------------------------------------------------------------------
inline void split_normal_form(const OperatorMap& Z, OperatorMap& N, OperatorMap& R) {
    const int M = Z.idx->M();
    N = OperatorMap(*Z.lat, *Z.idx);
    R = Z;
    if (!Z.has(Z.lat->zero)) return;
    const CMat B0 = Z.block(Z.lat->zero);
    CMat Bn = CMat::Zero(Z.n, Z.n);
    for (int a = 0; a < Z.n; ++a)
        for (int b = 0; b < Z.n; ++b) {
            bool same_slot = (a < M) == (b < M);
            int ka = Z.idx->S_perp[a % M], kb = Z.idx->S_perp[b % M];
            if (same_slot && std::abs(ka) == std::abs(kb)) Bn(a, b) = B0(a, b);
        }
    N.at(Z.lat->zero) = Bn;
    R.at(Z.lat->zero) = B0 - Bn;
    double scale = std::max(1e-300, Z.max_block_norm());
    N.prune(1e-16 * scale);
    R.prune(1e-16 * scale);
}

// Paired 2x2 block [N^{(1)}]_k^k of the first (w) slot over sites {k, -k};
// for a block-diagonal N this is the whole k-th invariant block.
inline Mat2c nf_block(const OperatorMap& N, int k) {
    const IndexSets& ix = *N.idx;
    int p = ix.norm_pos(k), q = ix.norm_pos(-k);
    const CMat& B = N.block(N.lat->zero);
    Mat2c out;
    out << B(p, p), B(p, q), B(q, p), B(q, q);
    return out;
}

}  // namespace kamtor
