//==============================================================================
// test_linearize.cpp
// Assembly of the normal linearization and its three-step reduction to a
// constant-coefficient normal form.
//==============================================================================
#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "kamtor/linearize.hpp"

using namespace kamtor;

namespace {

// L_angle = 4: the quartic perturbation carries angle harmonics of per-axis
// degree up to 3; a smaller box truncates them and breaks exactness.
Model small_model(double eps) {
    auto idx = IndexSets::make({-1, 0, 1}, 2, 4);
    Vec xi(3);
    xi << 0.9, 1.1, 1.3;
    return Model(idx, xi, eps, {{1.0, 1, 4, 0}, {0.5, 0, 2, 2}});
}

// Random real/complex embedding supported on |l|_1 <= 1, amplitude amp.
TorusEmbedding random_embedding(const Model& mdl, double amp, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<double> nd;
    TorusEmbedding iota(mdl.lat, mdl.idx);
    for (int p : mdl.lat.simplex) {
        if (mdl.lat.ell1_of[p] > 1) continue;
        int q = mdl.lat.neg_of[p];
        for (int r = 0; r < mdl.nt(); ++r) {
            cplx v = 0.5 * amp * cplx(nd(rng), nd(rng));
            iota.Theta.C(r, p) += v;
            iota.Theta.C(r, q) += std::conj(v);
            cplx u = 0.5 * amp * cplx(nd(rng), nd(rng));
            iota.y.C(r, p) += u;
            iota.y.C(r, q) += std::conj(u);
        }
        for (int r = 0; r < mdl.idx.M(); ++r) iota.z.C(r, p) = amp * cplx(nd(rng), nd(rng));
    }
    return iota;
}

Vec diophantine_omega() {
    Vec om(3);
    om << 1.0, std::sqrt(2.0), std::sqrt(5.0);
    return om;
}

// Taylor/assembly bundle at a given embedding (no isotropy correction).
struct Bundle {
    IsotropicEmbedding iso;
    EmbeddingSamples smp;
    Linearized L;
};

Bundle assemble_at(const Model& mdl, const TorusEmbedding& iota, const Vec& om) {
    Bundle b;
    b.iso.base = iota;
    b.iso.y_iso = iota.y;
    ChartHandle ch = gamma_chart(mdl, b.iso);
    TaylorCoefficients K = taylor_K(mdl, b.iso, Vec::Zero(mdl.nt()), ch);
    b.smp = embedding_samples(mdl, b.iso.modified());
    b.L = assemble_frakL(mdl, b.smp, K, om);
    return b;
}

}  // namespace

//------------------------------------------------------------------------------
TEST_CASE("assembly: flat unperturbed torus gives the diagonal multiplier") {
    Model mdl = small_model(0.0);
    TorusEmbedding iota(mdl.lat, mdl.idx);
    Vec om = diophantine_omega();
    Bundle b = assemble_at(mdl, iota, om);
    const int M = mdl.idx.M();

    ActionVector I0(mdl.idx);
    I0.tang = mdl.xi;
    CMat expect = CMat::Zero(2 * M, 2 * M);
    for (int m = 0; m < M; ++m) {
        double w = mdl.omega_site(mdl.idx.S_perp[m], I0);
        expect(m, m) = I_UNIT * w;
        expect(M + m, M + m) = -I_UNIT * w;
    }
    double scale = b.L.Z.max_block_norm();
    CHECK((b.L.Z.block(mdl.lat.zero) - expect).cwiseAbs().maxCoeff() < 1e-11 * scale);
    // no angle dependence and no remainder
    OperatorMap off = b.L.Z.project_tail(0);
    CHECK(off.max_block_norm() < 1e-11 * scale);
    CHECK(b.L.R0.max_block_norm() < 1e-11 * scale);
    CHECK(hamiltonian_structure_defect(b.L.Z) < 1e-11 * scale);
}

//------------------------------------------------------------------------------
TEST_CASE("assembly: structure audit, realness of q1, remainder linear in eps") {
    Model m0 = small_model(0.0), m1 = small_model(1e-3), m2 = small_model(2e-3);
    TorusEmbedding iota = random_embedding(m0, 1e-3, 42);
    Vec om = diophantine_omega();
    Bundle b0 = assemble_at(m0, iota, om);
    Bundle b1 = assemble_at(m1, iota, om);
    Bundle b2 = assemble_at(m2, iota, om);

    CHECK(b1.L.q1_imag < 1e-12);
    double scale = std::max(1.0, b1.L.Z.max_block_norm());
    CHECK(hamiltonian_structure_defect(b1.L.Z) < 1e-10 * scale);

    // With the embedding frozen, both Z and the model part are affine in eps,
    // hence so is R0: R0(2 eps) - R0(0) = 2 (R0(eps) - R0(0)).
    OperatorMap d1 = b1.L.R0 - b0.L.R0;
    OperatorMap d2 = b2.L.R0 - b0.L.R0;
    OperatorMap defect = d2 - (cplx{2.0} * d1);
    CHECK(defect.max_block_norm() < 1e-10 * scale);

    // One-smoothing remainder is small with eps and the embedding size.
    double size = m1.eps + iota.norm(m1.idx.s0(), 2.0);
    CHECK(b1.L.rem_norm < 1e3 * size);

    // Corrupting the quadratic form trips the structure audit.
    TaylorCoefficients Kbad;
    {
        ChartHandle ch = gamma_chart(m1, b1.iso);
        Kbad = taylor_K(m1, b1.iso, Vec::Zero(m1.nt()), ch);
        Kbad.K02.at(m1.lat.zero)(0, 1) += 1.0;  // asymmetric bump
    }
    CHECK_THROWS_AS(assemble_frakL(m1, b1.smp, Kbad, om), StructureViolation);
}

//------------------------------------------------------------------------------
TEST_CASE("phi1: symplectic flow, exact conjugacy, zero-order commutator") {
    Model mdl = small_model(1e-3);
    TorusEmbedding iota = random_embedding(mdl, 1e-3, 7);
    Vec om = diophantine_omega();
    Bundle b = assemble_at(mdl, iota, om);
    LinStage st = transform_phi1(mdl, b.smp, b.L.Z, om);

    const int M = mdl.idx.M();
    CMat JJ = JJ2_mat(M);

    // Pointwise symplecticity of the flow map.
    auto Phis = op_samples(st.Phi, mdl.grid);
    double worst = 0;
    for (auto& P : Phis)
        worst = std::max(worst, (P.transpose() * JJ * P - JJ).cwiseAbs().maxCoeff());
    CHECK(worst < 1e-10);

    // Round-trip audit: the operator conjugated back recovers the original.
    OperatorMap rhs = compose(st.Phi, st.Z) - st.Phi.omega_deriv(om);
    OperatorMap back = solve_right_composition(st.Phi, rhs, &st.PhiInv);
    double scale = std::max(1.0, b.L.Z.max_block_norm());
    CHECK((back - b.L.Z).max_block_norm() < 1e-9 * scale);

    // Zero-order commutator identity, sample by sample in the x-operators:
    // [J D^2, J A1] - J (2 i a1 off-diagonal) + RII = 0.
    Vec chi(M), chi_inv(M), d2(M);
    for (int a = 0; a < M; ++a) {
        double k = mdl.idx.S_perp[a];
        chi[a] = std::sqrt(1.0 + 4.0 * PI * PI * k * k);
        chi_inv[a] = 1.0 / chi[a];
        d2[a] = 4.0 * PI * PI * k * k;
    }
    for (int t : {0, 137, 2500}) {
        CMat A1 = CMat::Zero(2 * M, 2 * M), M0 = A1, RII = A1, JD2 = A1;
        for (int a = 0; a < M; ++a) {
            JD2(a, a) = I_UNIT * d2[a];
            JD2(M + a, M + a) = -I_UNIT * d2[a];
        }
        for (int a = 0; a < M; ++a)
            for (int c = 0; c < M; ++c) {
                int kn = mdl.idx.S_perp[a], km = mdl.idx.S_perp[c];
                cplx h = cplx{0.0, -0.5} * sbin(b.smp.q2h, t, -kn - km);  // a1 hat
                A1(a, M + c) = chi_inv[a] * h * chi_inv[c];
                A1(M + a, c) = std::conj(A1(a, M + c));
                M0(a, M + c) = 2.0 * I_UNIT * h;
                M0(M + a, c) = -2.0 * I_UNIT * std::conj(h);
                // From D^2 = <<D>>^2 - 1:
                // D^2 x a1 x + x a1 x D^2 = 2 a1 - R  (x = <<D>>^{-1}) with
                // R = 2 x a1 x + [a1, <<D>>] x + x [<<D>>, a1].
                cplx r = (2.0 * chi_inv[a] * chi_inv[c] + 2.0 - chi[a] * chi_inv[c] -
                          chi_inv[a] * chi[c]) * h;
                RII(a, M + c) = r;
                RII(M + a, c) = std::conj(r);
            }
        auto timesJ = [&](CMat X) {
            X.topRows(M) *= I_UNIT;
            X.bottomRows(M) *= -I_UNIT;
            return X;
        };
        CMat JA1 = timesJ(A1), JM0 = timesJ(M0);
        // [J D^2, J A1] = J M0 + RII (the smoothing correction adds back what
        // the <<D>>-sandwich removed from the raw multiplier 2 a1).
        CMat res = JD2 * JA1 - JA1 * JD2 - JM0 - RII;
        double ref = std::max(1.0, JM0.cwiseAbs().maxCoeff());
        CHECK(res.cwiseAbs().maxCoeff() < 1e-10 * ref);
    }
}

//------------------------------------------------------------------------------
TEST_CASE("phi2: antiderivative convention and the x-average commutator") {
    Model mdl = small_model(1e-3);
    TorusEmbedding iota = random_embedding(mdl, 1e-3, 19);
    Vec om = diophantine_omega();
    Bundle b = assemble_at(mdl, iota, om);

    const int M = mdl.idx.M(), Gx = mdl.Gx;
    CMat a2h = a2_spectra(b.smp.q1h);
    // 4 d_x a2 = q1 - av(q1): 4 (2 pi i j) a2h(j) = q1h(j) for j != 0.
    double scale = b.smp.q1h.cwiseAbs().maxCoeff();
    CHECK(a2h.row(0).cwiseAbs().maxCoeff() == 0.0);
    for (int bb = 1; bb < Gx; ++bb) {
        int j = (bb <= Gx / 2) ? bb : bb - Gx;
        CMat diff = 4.0 * (2.0 * PI * I_UNIT * static_cast<double>(j)) * a2h.row(bb) -
                    b.smp.q1h.row(bb);
        REQUIRE(diff.cwiseAbs().maxCoeff() < 1e-12 * std::max(1.0, scale));
    }

    // Commutator lemma per sample: [J D^2, J A2] = 4 J (d_x a2) - RII.
    Vec chi2_inv(M), dm(M), d2(M);
    for (int a = 0; a < M; ++a) {
        double k = mdl.idx.S_perp[a];
        chi2_inv[a] = 1.0 / (1.0 + 4.0 * PI * PI * k * k);
        dm[a] = -2.0 * PI * k;
        d2[a] = 4.0 * PI * PI * k * k;
    }
    auto g1 = [&](int t, int j) {  // (q1 - av q1) hat
        return (j == 0) ? cplx(0) : sbin(b.smp.q1h, t, j);
    };
    auto g2 = [&](int t, int j) {  // (d_x q1) hat
        return 2.0 * PI * I_UNIT * static_cast<double>(j) * sbin(b.smp.q1h, t, j);
    };
    for (int t : {0, 411, 3100}) {
        CMat A2 = CMat::Zero(2 * M, 2 * M), T0 = A2, RII = A2, JD2 = A2;
        for (int a = 0; a < M; ++a) {
            JD2(a, a) = I_UNIT * d2[a];
            JD2(M + a, M + a) = -I_UNIT * d2[a];
        }
        for (int a = 0; a < M; ++a)
            for (int c = 0; c < M; ++c) {
                int kn = mdl.idx.S_perp[a], km = mdl.idx.S_perp[c];
                double cc = dm[a] * chi2_inv[a] + dm[c] * chi2_inv[c];
                A2(a, c) = cc * sbin(a2h, t, km - kn);
                A2(M + a, M + c) = cc * sbin(a2h, t, kn - km);
                // d_x a2 = (q1 - av q1) / 4
                T0(a, c) = 0.25 * g1(t, km - kn);
                T0(M + a, M + c) = 0.25 * g1(t, kn - km);
                RII(a, c) = 0.25 * (dm[a] * chi2_inv[a] * g2(t, km - kn) -
                                    g2(t, km - kn) * dm[c] * chi2_inv[c] +
                                    2.0 * I_UNIT * chi2_inv[a] * g1(t, km - kn) +
                                    2.0 * I_UNIT * g1(t, km - kn) * chi2_inv[c]);
                RII(M + a, M + c) = 0.25 * (dm[a] * chi2_inv[a] * g2(t, kn - km) -
                                            g2(t, kn - km) * dm[c] * chi2_inv[c] -
                                            2.0 * I_UNIT * chi2_inv[a] * g1(t, kn - km) -
                                            2.0 * I_UNIT * g1(t, kn - km) * chi2_inv[c]);
            }
        auto timesJ = [&](CMat X) {
            X.topRows(M) *= I_UNIT;
            X.bottomRows(M) *= -I_UNIT;
            return X;
        };
        CMat JA2 = timesJ(A2), JT0 = timesJ(T0);
        CMat res = JD2 * JA2 - JA2 * JD2 - 4.0 * JT0 + RII;
        double ref = std::max(1.0, JT0.cwiseAbs().maxCoeff());
        CHECK(res.cwiseAbs().maxCoeff() < 1e-10 * ref);
    }

    // The stage itself: symplectic flow and exact conjugacy.
    LinStage st1 = transform_phi1(mdl, b.smp, b.L.Z, om);
    LinStage st2 = transform_phi2(mdl, b.smp, st1.Z, om);
    CMat JJ = JJ2_mat(M);
    double worst = 0;
    for (auto& P : op_samples(st2.Phi, mdl.grid))
        worst = std::max(worst, (P.transpose() * JJ * P - JJ).cwiseAbs().maxCoeff());
    CHECK(worst < 1e-10);
    OperatorMap rhs = compose(st2.Phi, st2.Z) - st2.Phi.omega_deriv(om);
    OperatorMap back = solve_right_composition(st2.Phi, rhs, &st2.PhiInv);
    CHECK((back - st1.Z).max_block_norm() < 1e-9 * std::max(1.0, st1.Z.max_block_norm()));
}

//------------------------------------------------------------------------------
TEST_CASE("phi3: gauge at the flat torus gives c = eps [[q1]], rho = 0") {
    Model mdl = small_model(1e-3);
    TorusEmbedding iota(mdl.lat, mdl.idx);
    Vec om = diophantine_omega();
    Bundle b = assemble_at(mdl, iota, om);
    LinStage st1 = transform_phi1(mdl, b.smp, b.L.Z, om);
    LinStage st2 = transform_phi2(mdl, b.smp, st1.Z, om);
    GaugeStage st3 = transform_phi3(mdl, b.smp, st2.Z, om);

    // [[q1]]: space-time average of q1 over the grid.
    double q1avg = 0;
    for (int t = 0; t < mdl.grid.T; ++t) q1avg += b.smp.q1h(0, t).real();
    q1avg /= mdl.grid.T;
    CHECK_THAT(st3.c_eps, Catch::Matchers::WithinAbs(mdl.eps * q1avg, 1e-12));
    CHECK(st3.rho.cwiseAbs().maxCoeff() < 1e-10);

    // Gauge phases are real.
    CHECK((st3.beta.C - st3.beta.conj().C).cwiseAbs().maxCoeff() < 1e-12);
}

//------------------------------------------------------------------------------
TEST_CASE("full ladder: conjugacy audit, structure, splitting") {
    // eps and amplitude at the contract scale: the gauge phases beta enter
    // through e^{-i beta}, whose harmonics beyond the angle box are the only
    // inexactness left; they scale cubically in the data size.
    Model mdl = small_model(1e-4);
    TorusEmbedding iota = random_embedding(mdl, 1e-4, 23);
    Vec om = diophantine_omega();
    Bundle b = assemble_at(mdl, iota, om);
    LinStage st1 = transform_phi1(mdl, b.smp, b.L.Z, om);
    LinStage st2 = transform_phi2(mdl, b.smp, st1.Z, om);
    GaugeStage st3 = transform_phi3(mdl, b.smp, st2.Z, om);
    double scale = std::max(1.0, b.L.Z.max_block_norm());

    // Round-trip audit of the gauge stage.
    OperatorMap rhs = compose(st3.Phi, st3.Z) - st3.Phi.omega_deriv(om);
    OperatorMap back = solve_right_composition(st3.Phi, rhs, &st3.PhiInv);
    CHECK((back - st2.Z).max_block_norm() < 1e-9 * scale);

    // Hamiltonian structure survives the whole ladder.
    CHECK(hamiltonian_structure_defect(st3.Z) < 1e-9 * scale);

    // N0 matches the mu diagonal and the splitting is an exact partition.
    Mat2c blk = nf_block(st3.N0, 2);
    int p2 = mdl.idx.norm_pos(2), pm2 = mdl.idx.norm_pos(-2);
    CHECK(std::abs(blk(0, 0) - I_UNIT * st3.mu[p2]) < 1e-12);
    CHECK(std::abs(blk(1, 1) - I_UNIT * st3.mu[pm2]) < 1e-12);
    CHECK(std::abs(blk(0, 1)) + std::abs(blk(1, 0)) == 0.0);

    OperatorMap N, R;
    split_normal_form(st3.Z, N, R);
    CHECK(((N + R) - st3.Z).max_block_norm() < 1e-14 * scale);
    // N lives at l = 0 only, slot-decoupled, pairing equal-modulus sites.
    CHECK(N.project_tail(0).max_block_norm() == 0.0);
    const int M = mdl.idx.M();
    const CMat& Bn = N.block(mdl.lat.zero);
    for (int a = 0; a < 2 * M; ++a)
        for (int c = 0; c < 2 * M; ++c) {
            bool same_slot = (a < M) == (c < M);
            bool paired = std::abs(mdl.idx.S_perp[a % M]) == std::abs(mdl.idx.S_perp[c % M]);
            if (!(same_slot && paired)) CHECK(Bn(a, c) == cplx(0));
        }

    // The residual part of Z3 beyond N0 stays small with eps and the embedding.
    CHECK(st3.R.max_block_norm() < 0.5);
}

//------------------------------------------------------------------------------
TEST_CASE("full ladder: unperturbed flat torus is a fixed point") {
    Model mdl = small_model(0.0);
    TorusEmbedding iota(mdl.lat, mdl.idx);
    Vec om = diophantine_omega();
    Bundle b = assemble_at(mdl, iota, om);
    LinStage st1 = transform_phi1(mdl, b.smp, b.L.Z, om);
    LinStage st2 = transform_phi2(mdl, b.smp, st1.Z, om);
    GaugeStage st3 = transform_phi3(mdl, b.smp, st2.Z, om);
    OperatorMap Id = OperatorMap::identity(mdl.lat, mdl.idx);
    double scale = std::max(1.0, b.L.Z.max_block_norm());
    CHECK((st1.Phi - Id).max_block_norm() < 1e-13);
    CHECK((st2.Phi - Id).max_block_norm() < 1e-13);
    CHECK((st3.Phi - Id).max_block_norm() < 1e-12);
    CHECK((st3.Z - b.L.Z).max_block_norm() < 1e-11 * scale);
    CHECK(st3.R.max_block_norm() < 1e-11 * scale);
}
