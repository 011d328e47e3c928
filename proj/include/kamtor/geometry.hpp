//==============================================================================
// geometry.hpp
// Isotropy correction of an approximate torus, the symplectic chart near the
// corrected torus, and the Taylor coefficients of the transformed Hamiltonian.
// Features:
//   • isotropize: 2-form coefficients A_{kj} recovered from the residual by an
//     angle-transport solve, Hodge potential r = -Lap^{-1} div A, and the
//     corrected action component y_iso = y + (d theta)^{-t} r.
//   • Direct 2-form evaluation and the isotropy-identity defect as oracles.
//   • gamma_chart: per-sample differential of the chart Gamma at the torus,
//     its closed-form inverse, frame conditioning guard, symplectic-form
//     pullback check, and field-level application.
//   • taylor_K: analytic chain-rule Taylor coefficients K00..K02 of H o Gamma
//     at (psi, 0, 0), with the counterterm zeta . theta included.
//==============================================================================
#pragma once

#include "model.hpp"

namespace kamtor {

//------------------------------------------------------------------------------
// Isotropic embedding bundle.
//------------------------------------------------------------------------------
struct IsotropicEmbedding {
    TorusEmbedding base;  // original embedding (Theta, y, z)
    Field y_iso;          // corrected action component, over S
    Field A;              // 2-form coefficients, d*d components (k*d + j)
    Field rho;            // co-closed potential r, over S

    TorusEmbedding modified() const {
        TorusEmbedding out = base;
        out.y = y_iso;
        return out;
    }
};

namespace detail {

// Tangent stack on the grid: rows (theta d | y d | z M | zbar M) x T.
inline CMat tangent_stack(const Model& mdl, const Field& th, const Field& yy, const Field& zz,
                          bool theta_identity_shift, int axis) {
    const int d = mdl.nt(), M = mdl.idx.M(), T = mdl.grid.T;
    CMat out(2 * d + 2 * M, T);
    out.topRows(d) = mdl.grid.to_grid(th.deriv(axis).C);
    if (theta_identity_shift) out.row(axis).array() += 1.0;  // d theta = e_axis + d Theta
    out.middleRows(d, d) = mdl.grid.to_grid(yy.deriv(axis).C);
    out.middleRows(2 * d, M) = mdl.grid.to_grid(zz.deriv(axis).C);
    out.bottomRows(M) = mdl.grid.to_grid(zz.conj().deriv(axis).C);
    return out;
}

// Symplectic pairing Lambda[u, v] of two tangent stacks, pointwise on the grid.
inline Eigen::RowVectorXcd lambda_pair(const CMat& u, const CMat& v, int d, int M) {
    Eigen::RowVectorXcd acc = Eigen::RowVectorXcd::Zero(u.cols());
    for (int r = 0; r < d; ++r)
        acc += u.row(r).cwiseProduct(v.row(d + r)) - u.row(d + r).cwiseProduct(v.row(r));
    for (int n = 0; n < M; ++n)
        acc += I_UNIT * (u.row(2 * d + n).cwiseProduct(v.row(2 * d + M + n)) -
                         u.row(2 * d + M + n).cwiseProduct(v.row(2 * d + n)));
    return acc;
}

}  // namespace detail

//------------------------------------------------------------------------------
// Direct 2-form A_{kj} = Lambda[d_k iota, d_j iota] (independent oracle).
//------------------------------------------------------------------------------
inline Field two_form_direct(const Model& mdl, const TorusEmbedding& iota) {
    const int d = mdl.nt(), M = mdl.idx.M();
    std::vector<CMat> D(d);
    for (int k = 0; k < d; ++k)
        D[k] = detail::tangent_stack(mdl, iota.Theta, iota.y, iota.z, true, k);
    CMat vals(d * d, mdl.grid.T);
    for (int k = 0; k < d; ++k)
        for (int j = 0; j < d; ++j)
            vals.row(k * d + j) = detail::lambda_pair(D[k], D[j], d, M);
    Field out(mdl.lat, std::vector<int>(d * d, 0));
    out.C = mdl.grid.from_grid(vals);
    return out;
}

//------------------------------------------------------------------------------
// Isotropy-identity defect of an embedding:
// (d theta)^t d y - (d y)^t d theta + i (d z)^t d zbar - i (d zbar)^t d z.
// Returns the largest 2-form coefficient magnitude over the grid.
//------------------------------------------------------------------------------
inline double isotropy_defect(const Model& mdl, const TorusEmbedding& iota) {
    return two_form_direct(mdl, iota).max_abs();
}

//------------------------------------------------------------------------------
// isotropize: transport-solve the 2-form, Hodge-correct the action component.
//------------------------------------------------------------------------------
inline IsotropicEmbedding isotropize(const Model& mdl, const TorusEmbedding& iota,
                                     const ResidualTriple& E, const Vec& omega,
                                     double gamma = 0.0, double tau = 0.0) {
    const int d = mdl.nt(), M = mdl.idx.M(), T = mdl.grid.T;
    const AngleLattice& lat = mdl.lat;

    // Tangent stacks of the embedding and of the residual triple.
    std::vector<CMat> Di(d), De(d);
    for (int k = 0; k < d; ++k) {
        Di[k] = detail::tangent_stack(mdl, iota.Theta, iota.y, iota.z, true, k);
        De[k] = detail::tangent_stack(mdl, E.E_theta, E.E_y, E.E_z, false, k);
    }

    // Source of the transport identity and its solve, entry by entry.
    IsotropicEmbedding iso;
    iso.base = iota;
    iso.A = Field(lat, std::vector<int>(d * d, 0));
    CMat src(d * d, T);
    src.setZero();
    for (int k = 0; k < d; ++k)
        for (int j = k + 1; j < d; ++j)
            src.row(k * d + j) = detail::lambda_pair(De[k], Di[j], d, M) +
                                 detail::lambda_pair(Di[k], De[j], d, M);
    CMat src_coeff = mdl.grid.from_grid(src);
    for (int k = 0; k < d; ++k)
        for (int j = k + 1; j < d; ++j) {
            Field g(lat, {0});
            g.C = src_coeff.row(k * d + j);
            // The transport identity forces a zero average; discard rounding.
            g.C(0, lat.zero) = 0;
            Field a = omega_dvphi_inverse(g, omega, gamma, tau);
            iso.A.C.row(k * d + j) = a.C;
            iso.A.C.row(j * d + k) = -a.C;
        }

    // r_k = -Lap^{-1} (sum_j d_j A_{kj}), spectrally, zero mode annihilated.
    iso.rho = Field(lat, std::vector<int>(d, 0));
    std::vector<int> l(d);
    for (int p = 0; p < lat.P; ++p) {
        if (p == lat.zero) continue;
        lat.comp(p, l);
        double l2 = 0;
        for (int i = 0; i < d; ++i) l2 += static_cast<double>(l[i]) * l[i];
        for (int k = 0; k < d; ++k) {
            cplx div = 0;
            for (int j = 0; j < d; ++j)
                div += I_UNIT * static_cast<double>(l[j]) * iso.A.C(k * d + j, p);
            iso.rho.C(k, p) = div / l2;
        }
    }

    // y_iso = y + (d theta)^{-t} r, sample by sample.
    CMat rg = mdl.grid.to_grid(iso.rho.C);
    std::vector<CMat> dth(d);
    for (int k = 0; k < d; ++k) dth[k] = mdl.grid.to_grid(iota.Theta.deriv(k).C);
    CMat corr(d, T);
    for (int t = 0; t < T; ++t) {
        Mat Dth(d, d);  // Dth(r, k) = d theta_r / d phi_k
        for (int k = 0; k < d; ++k)
            for (int r = 0; r < d; ++r) Dth(r, k) = (r == k ? 1.0 : 0.0) + dth[k](r, t).real();
        Vec rv(d);
        for (int k = 0; k < d; ++k) rv[k] = rg(k, t).real();
        corr.col(t) = Dth.transpose().fullPivLu().solve(rv).cast<cplx>();
    }
    iso.y_iso = iota.y;
    iso.y_iso.C += mdl.grid.from_grid(corr);
    return iso;
}

//------------------------------------------------------------------------------
// ChartHandle: per-sample differential of Gamma at the corrected torus.
// Tangent ordering: (theta d | y d | w M | wbar M) on the embedding side,
// (psi d | upsilon d | w M | wbar M) on the chart side.
//------------------------------------------------------------------------------
struct ChartHandle {
    const Model* mdl = nullptr;
    int d = 0, M = 0;
    std::vector<Mat> Dth, DthInvT;  // frame and its inverse transpose
    std::vector<CMat> Ppsi;         // d psi y_iso (d x d)
    std::vector<CMat> Zpsi;         // d psi z (M x d)
    std::vector<CMat> Yw;           // i (d theta)^{-t} (d zbar)^t  (d x M)

    int n() const { return 2 * d + 2 * M; }

    CMat dGamma(int t) const {
        CMat G = CMat::Identity(n(), n());
        G.topLeftCorner(d, d) = Dth[t].cast<cplx>();
        G.block(d, 0, d, d) = Ppsi[t];
        G.block(d, d, d, d) = DthInvT[t].cast<cplx>();
        G.block(d, 2 * d, d, M) = Yw[t];
        G.block(d, 2 * d + M, d, M) = Yw[t].conjugate();
        G.block(2 * d, 0, M, d) = Zpsi[t];
        G.block(2 * d + M, 0, M, d) = Zpsi[t].conjugate();
        return G;
    }
    CMat dGamma_inv(int t) const {
        CMat G = CMat::Identity(n(), n());
        CMat Bi = Dth[t].inverse().cast<cplx>();       // psi-hat = Dth^{-1} theta-hat
        G.topLeftCorner(d, d) = Bi;
        G.block(2 * d, 0, M, d) = -Zpsi[t] * Bi;       // w-hat = z-hat - Zpsi psi-hat
        G.block(2 * d + M, 0, M, d) = -Zpsi[t].conjugate() * Bi;
        // upsilon-hat = Dth^t (y-hat - Ppsi psi-hat - Yw w-hat - Ywb wbar-hat)
        CMat Dt = Dth[t].transpose().cast<cplx>();
        G.block(d, d, d, d) = Dt;
        G.block(d, 2 * d, d, M) = -Dt * Yw[t];
        G.block(d, 2 * d + M, d, M) = -Dt * Yw[t].conjugate();
        G.block(d, 0, d, d) =
            -Dt * (Ppsi[t] * Bi + Yw[t] * G.block(2 * d, 0, M, d) +
                   Yw[t].conjugate() * G.block(2 * d + M, 0, M, d));
        return G;
    }

    // Matrix of the symplectic form on the (theta, y, w, wbar) tangent space.
    static CMat sympl_form(int d, int M) {
        int n = 2 * d + 2 * M;
        CMat L = CMat::Zero(n, n);
        L.block(0, d, d, d) = CMat::Identity(d, d);
        L.block(d, 0, d, d) = -CMat::Identity(d, d);
        L.block(2 * d, 2 * d + M, M, M) = I_UNIT * CMat::Identity(M, M);
        L.block(2 * d + M, 2 * d, M, M) = -I_UNIT * CMat::Identity(M, M);
        return L;
    }
    // max over samples of || dGamma^t L dGamma - L ||.
    double symplectic_defect() const {
        CMat L = sympl_form(d, M);
        double worst = 0;
        for (size_t t = 0; t < Dth.size(); ++t) {
            CMat G = dGamma(t);
            worst = std::max(worst, (G.transpose() * L * G - L).cwiseAbs().maxCoeff());
        }
        return worst;
    }
    double inverse_defect() const {
        double worst = 0;
        for (size_t t = 0; t < Dth.size(); ++t)
            worst = std::max(worst, (dGamma(t) * dGamma_inv(t) -
                                     CMat::Identity(n(), n())).cwiseAbs().maxCoeff());
        return worst;
    }

    // Field-level application (tangent field with n() components).
    Field apply(const Field& u, bool inverse) const {
        CMat g = mdl->grid.to_grid(u.C);
        for (int t = 0; t < static_cast<int>(Dth.size()); ++t)
            g.col(t) = (inverse ? dGamma_inv(t) : dGamma(t)) * g.col(t);
        Field out(mdl->lat, u.sites);
        out.C = mdl->grid.from_grid(g);
        return out;
    }
};

inline ChartHandle gamma_chart(const Model& mdl, const IsotropicEmbedding& iso) {
    ChartHandle ch;
    ch.mdl = &mdl;
    ch.d = mdl.nt();
    ch.M = mdl.idx.M();
    const int d = ch.d, T = mdl.grid.T;
    std::vector<CMat> dth(d), dy(d), dz(d);
    for (int k = 0; k < d; ++k) {
        dth[k] = mdl.grid.to_grid(iso.base.Theta.deriv(k).C);
        dy[k] = mdl.grid.to_grid(iso.y_iso.deriv(k).C);
        dz[k] = mdl.grid.to_grid(iso.base.z.deriv(k).C);
    }
    ch.Dth.resize(T);
    ch.DthInvT.resize(T);
    ch.Ppsi.resize(T);
    ch.Zpsi.resize(T);
    ch.Yw.resize(T);
    for (int t = 0; t < T; ++t) {
        Mat D(d, d);
        CMat P(d, d), Z(ch.M, d);
        for (int k = 0; k < d; ++k) {
            for (int r = 0; r < d; ++r) {
                D(r, k) = (r == k ? 1.0 : 0.0) + dth[k](r, t).real();
                P(r, k) = dy[k](r, t);
            }
            for (int m = 0; m < ch.M; ++m) Z(m, k) = dz[k](m, t);
        }
        Eigen::JacobiSVD<Mat> svd(D);
        double smin = svd.singularValues().minCoeff();
        if (smin <= 0 || svd.singularValues().maxCoeff() / smin > CHART_COND_CAP)
            throw ChartSingular("chart frame d theta / d psi is numerically singular");
        ch.Dth[t] = D;
        ch.DthInvT[t] = D.transpose().inverse();
        ch.Ppsi[t] = P;
        ch.Zpsi[t] = Z;
        ch.Yw[t] = I_UNIT * ch.DthInvT[t].cast<cplx>() * Z.conjugate().transpose();
    }
    return ch;
}

//------------------------------------------------------------------------------
// Taylor coefficients of K = H_{eps, zeta} o Gamma at (psi, 0, 0).
//------------------------------------------------------------------------------
struct TaylorCoefficients {
    Field K00;   // scalar
    Field K10;   // grad_upsilon, d
    Field K01;   // grad_w / grad_wbar, 2 M
    Field Kpsi;  // grad_psi diagnostic, d
    Field K20;   // d*d, row-major
    Field K11;   // d x 2M, row-major (r * 2M + c)
    OperatorMap K02;
};

inline TaylorCoefficients taylor_K(const Model& mdl, const IsotropicEmbedding& iso,
                                   const Vec& zeta, const ChartHandle& ch) {
    const int d = mdl.nt(), M = mdl.idx.M(), T = mdl.grid.T, n2 = 2 * M;
    CMat Th = mdl.grid.to_grid(iso.base.Theta.C), Y = mdl.grid.to_grid(iso.y_iso.C),
         Z = mdl.grid.to_grid(iso.base.z.C);

    CMat g00(1, T), g10(d, T), g01(n2, T), gps(d, T), g20(d * d, T), g11(d * n2, T),
        g02(n2 * n2, T);
    CVec w(mdl.nsites());
    for (int t = 0; t < T; ++t) {
        for (int k = 0; k < d; ++k) {
            double Ik = mdl.xi[k] + Y(k, t).real();
            if (!(Ik > 0)) throw SqrtDomain("action xi_k + y_k left the positive half line");
            w[k] = std::sqrt(Ik) * std::exp(-I_UNIT * (mdl.angle(t, k) + Th(k, t).real()));
        }
        for (int m = 0; m < M; ++m) w[d + m] = Z(m, t);
        HamPoint hp = mdl.ham_point(w, true);

        // Real-coordinate first derivatives.
        CVec a(d);
        Vec gy(d), gth(d);
        for (int k = 0; k < d; ++k) {
            double Ik = mdl.xi[k] + Y(k, t).real();
            a[k] = w[k] / (2.0 * Ik);
            gy[k] = 2.0 * std::real(std::conj(hp.g[k]) * a[k]);
            gth[k] = 2.0 * std::imag(std::conj(hp.g[k]) * w[k]);
        }
        CVec gz(M), gzb(M);
        for (int m = 0; m < M; ++m) {
            gz[m] = std::conj(hp.g[d + m]);
            gzb[m] = hp.g[d + m];
        }

        // Second derivatives in (y, z, zbar) coordinates.
        auto D2 = [&](int ck, int sk, int cm, int sm) {
            // ck/cm: 0 -> w, 1 -> wbar at site positions sk, sm
            if (ck == 0 && cm == 0) return std::conj(hp.Hcbcb(sk, sm));
            if (ck == 0 && cm == 1) return hp.Hccb(sm, sk);
            if (ck == 1 && cm == 0) return hp.Hccb(sk, sm);
            return hp.Hcbcb(sk, sm);
        };
        CMat Hyy(d, d), Hyz(d, M), Hyzb(d, M), Hzz(M, M), Hzzb(M, M), Hzbz(M, M), Hzbzb(M, M);
        for (int k = 0; k < d; ++k) {
            for (int m = 0; m < d; ++m) {
                cplx v = D2(0, k, 0, m) * a[k] * a[m] + D2(0, k, 1, m) * a[k] * std::conj(a[m]) +
                         D2(1, k, 0, m) * std::conj(a[k]) * a[m] +
                         D2(1, k, 1, m) * std::conj(a[k]) * std::conj(a[m]);
                if (k == m) {
                    double Ik = mdl.xi[k] + Y(k, t).real();
                    v += 2.0 * std::real(std::conj(hp.g[k]) * (-w[k] / (4.0 * Ik * Ik)));
                }
                Hyy(k, m) = v;
            }
            for (int m = 0; m < M; ++m) {
                Hyz(k, m) = D2(0, k, 0, d + m) * a[k] + D2(1, k, 0, d + m) * std::conj(a[k]);
                Hyzb(k, m) = D2(0, k, 1, d + m) * a[k] + D2(1, k, 1, d + m) * std::conj(a[k]);
            }
        }
        for (int nn = 0; nn < M; ++nn)
            for (int m = 0; m < M; ++m) {
                Hzz(nn, m) = D2(0, d + nn, 0, d + m);
                Hzzb(nn, m) = D2(0, d + nn, 1, d + m);
                Hzbz(nn, m) = D2(1, d + nn, 0, d + m);
                Hzbzb(nn, m) = D2(1, d + nn, 1, d + m);
            }

        // Chain rule through the chart.
        const CMat Binv = ch.Dth[t].inverse().cast<cplx>();  // B^t = Dth^{-1}
        const CMat& Ywt = ch.Yw[t];
        CMat Ywb = Ywt.conjugate();
        Vec zt = zeta;
        g00(0, t) = hp.value;
        for (int k = 0; k < d; ++k) g00(0, t) += zt[k] * Th(k, t);
        g10.col(t) = Binv * gy.cast<cplx>();
        gps.col(t) = ch.Dth[t].transpose().cast<cplx>() * (gth + zt).cast<cplx>() +
                     ch.Ppsi[t].transpose() * gy.cast<cplx>() +
                     ch.Zpsi[t].transpose() * gz + ch.Zpsi[t].conjugate().transpose() * gzb;
        g01.col(t).head(M) = gz + Ywt.transpose() * gy.cast<cplx>();
        g01.col(t).tail(M) = gzb + Ywb.transpose() * gy.cast<cplx>();

        CMat K20s = Binv * Hyy * Binv.transpose();
        CMat K11w = Binv * (Hyz + Hyy * Ywt);
        CMat K11wb = Binv * (Hyzb + Hyy * Ywb);
        CMat Xww = Hzz + Hyz.transpose() * Ywt + Ywt.transpose() * Hyz +
                   Ywt.transpose() * Hyy * Ywt;
        CMat Xwwb = Hzzb + Hyz.transpose() * Ywb + Ywt.transpose() * Hyzb +
                    Ywt.transpose() * Hyy * Ywb;
        CMat Xwbw = Hzbz + Hyzb.transpose() * Ywt + Ywb.transpose() * Hyz +
                    Ywb.transpose() * Hyy * Ywt;
        CMat Xwbwb = Hzbzb + Hyzb.transpose() * Ywb + Ywb.transpose() * Hyzb +
                     Ywb.transpose() * Hyy * Ywb;
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c) g20(r * d + c, t) = K20s(r, c);
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < n2; ++c)
                g11(r * n2 + c, t) = (c < M) ? K11w(r, c) : K11wb(r, c - M);
        for (int r = 0; r < n2; ++r)
            for (int c = 0; c < n2; ++c) {
                cplx v;
                if (r < M)
                    v = (c < M) ? Xww(r, c) : Xwwb(r, c - M);
                else
                    v = (c < M) ? Xwbw(r - M, c) : Xwbwb(r - M, c - M);
                g02(r * n2 + c, t) = v;
            }
    }

    TaylorCoefficients K;
    K.K00 = Field(mdl.lat, {0});
    K.K00.C = mdl.grid.from_grid(g00);
    K.K10 = Field(mdl.lat, std::vector<int>(d, 0));
    K.K10.C = mdl.grid.from_grid(g10);
    K.K01 = Field(mdl.lat, std::vector<int>(n2, 0));
    K.K01.C = mdl.grid.from_grid(g01);
    K.Kpsi = Field(mdl.lat, std::vector<int>(d, 0));
    K.Kpsi.C = mdl.grid.from_grid(gps);
    K.K20 = Field(mdl.lat, std::vector<int>(d * d, 0));
    K.K20.C = mdl.grid.from_grid(g20);
    K.K11 = Field(mdl.lat, std::vector<int>(d * n2, 0));
    K.K11.C = mdl.grid.from_grid(g11);
    CMat c02 = mdl.grid.from_grid(g02);
    K.K02 = OperatorMap(mdl.lat, mdl.idx);
    for (int p = 0; p < mdl.lat.P; ++p) {
        CMat B(n2, n2);
        for (int r = 0; r < n2; ++r)
            for (int c = 0; c < n2; ++c) B(r, c) = c02(r * n2 + c, p);
        if (B.norm() > 1e-300) K.K02.at(p) = B;
    }
    K.K02.prune(1e-16 * K.K02.max_block_norm());
    return K;
}

}  // namespace kamtor
