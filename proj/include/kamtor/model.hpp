//==============================================================================
// model.hpp
// Truncated normal-form Hamiltonian of the defocusing lattice model with a
// semilinear perturbation, and the invariance residual operator.
// Features:
//   • Frequencies omega_k(I) = 4 pi^2 k^2 + 4 sum(I) - 2 I_k + r_k(I)/k with an
//     optional user correction hook r (omitted at k = 0).
//   • Twist (Kolmogorov) matrix 4 - 2 delta over the tangential sites and its
//     closed-form determinant; Newton inversion of the frequency map.
//   • Birkhoff derivative engine: value, gradient and Hessian of
//     H = h(I) + eps * P at a phase-space point expressed through the complex
//     mode amplitudes w_k (tangential and normal sites uniformly).
//   • Perturbation P(u) = int p(x, zeta1, zeta2) dx with p a finite list of
//     terms coeff * cos(2 pi h x) * zeta1^a * zeta2^b, evaluated
//     pseudo-spectrally on an alias-free x-grid.
//   • residual_F: E_theta = om.d_phi theta - grad_y H,
//     E_y = om.d_phi y + grad_theta H + zeta, E_z = om.d_phi z + i grad_zbar H,
//     spectral in the angles; zeta compatibility quadrature.
//==============================================================================
#pragma once

#include <functional>

#include "field.hpp"
#include "opmap.hpp"

namespace kamtor {

struct OutOfRange : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NoConvergence : std::runtime_error {
    using std::runtime_error::runtime_error;
};

//------------------------------------------------------------------------------
// Actions: tangential entries over S, normal entries over S_perp.
//------------------------------------------------------------------------------
struct ActionVector {
    const IndexSets* idx = nullptr;
    Vec tang;  // over S
    Vec norm;  // over S_perp

    ActionVector() = default;
    explicit ActionVector(const IndexSets& ix)
        : idx(&ix), tang(Vec::Zero(ix.dim())), norm(Vec::Zero(ix.M())) {}
    double sum() const { return tang.sum() + norm.sum(); }
    double at_site(int k) const {
        int t = idx->tang_pos(k);
        if (t >= 0) return tang[t];
        int n = idx->norm_pos(k);
        return (n >= 0) ? norm[n] : 0.0;
    }
};

using CorrectionHook = std::function<double(int, const ActionVector&)>;

// One perturbation term: coeff * cos(2 pi harmonic x) * zeta1^p1 * zeta2^p2.
struct PerturbTerm {
    double coeff = 0;
    int harmonic = 0;
    int p1 = 0, p2 = 0;
};

//------------------------------------------------------------------------------
// Torus embedding iota(phi) = (Theta(phi), y(phi), z(phi)) and residual triple.
//------------------------------------------------------------------------------
struct TorusEmbedding {
    Field Theta, y;  // tangential-real fields over S
    Field z;         // normal-complex field over S_perp

    TorusEmbedding() = default;
    TorusEmbedding(const AngleLattice& lat, const IndexSets& idx)
        : Theta(lat, idx.S), y(lat, idx.S), z(lat, idx.S_perp) {}

    double norm(double s, double sigma) const {
        double a = Theta.sobolev_norm(s, 0), b = y.sobolev_norm(s, 0),
               c = z.sobolev_norm(s, sigma);
        return std::sqrt(a * a + b * b + c * c);
    }
    TorusEmbedding& operator+=(const TorusEmbedding& o) {
        Theta += o.Theta;
        y += o.y;
        z += o.z;
        return *this;
    }
};

struct ResidualTriple {
    Field E_theta, E_y;  // over S
    Field E_z;           // over S_perp
    Vec zeta;            // the Lagrange counterterm used in the evaluation

    double norm(double s, double sigma) const {
        double a = E_theta.sobolev_norm(s, 0), b = E_y.sobolev_norm(s, 0),
               c = E_z.sobolev_norm(s, sigma);
        return std::sqrt(a * a + b * b + c * c);
    }
};

//------------------------------------------------------------------------------
// Pointwise Hamiltonian derivatives in the complex mode amplitudes.
//------------------------------------------------------------------------------
struct HamPoint {
    double value = 0;  // H at the point
    CVec w;            // mode amplitudes over all sites (S then S_perp)
    CVec g;            // dH/dwbar_k per site
    CMat Hccb;         // (k, m) -> d2 H / dw_m dwbar_k
    CMat Hcbcb;        // (k, m) -> d2 H / dwbar_m dwbar_k
};

//------------------------------------------------------------------------------
// Model: geometry + actions + perturbation bound together.
//------------------------------------------------------------------------------
class Model {
public:
    IndexSets idx;
    AngleLattice lat;
    PhiGrid grid;
    Vec xi;  // tangential actions
    double eps = 0;
    std::vector<PerturbTerm> terms;
    CorrectionHook corr;  // optional frequency correction r_k(I)
    std::vector<int> sites_all;  // S then S_perp
    int Gx = 64;                 // x collocation points

    Model(const IndexSets& ix, Vec xi_, double eps_, std::vector<PerturbTerm> terms_ = {},
          CorrectionHook corr_ = nullptr)
        : idx(ix), lat(ix.dim(), ix.L_angle), grid(lat), xi(std::move(xi_)), eps(eps_),
          terms(std::move(terms_)), corr(std::move(corr_)) {
        for (double v : xi)
            if (!(v > 0)) throw ValidationError("tangential actions must be positive");
        sites_all = idx.S;
        sites_all.insert(sites_all.end(), idx.S_perp.begin(), idx.S_perp.end());
        int maxdeg = 0, maxh = 0;
        for (auto& t : terms) {
            maxdeg = std::max(maxdeg, t.p1 + t.p2);
            maxh = std::max(maxh, std::abs(t.harmonic));
        }
        // Alias-free margin: grid resolves every harmonic the polynomial
        // nonlinearity can produce, and at least the mandated 4 (K+1).
        Gx = std::max(4 * (idx.K_normal + 1),
                      2 * ((std::max(maxdeg, 1) - 1) * idx.K_normal + maxh) + 1);
    }

    int nsites() const { return static_cast<int>(sites_all.size()); }
    int nt() const { return idx.dim(); }

    //--------------------------------------------------------------------------
    // Frequencies and the twist matrix.
    //--------------------------------------------------------------------------
    double omega_site(int k, const ActionVector& I) const {
        double om = 4.0 * PI * PI * k * k + 4.0 * I.sum() - 2.0 * I.at_site(k);
        if (corr && k != 0) om += corr(k, I) / k;
        return om;
    }
    // Frequencies over all sites (S then S_perp).
    Vec frequencies(const ActionVector& I) const {
        Vec om(nsites());
        for (int i = 0; i < nsites(); ++i) om[i] = omega_site(sites_all[i], I);
        return om;
    }
    // Tangential frequency vector at actions (xi0, 0).
    Vec omega_tangential(const Vec& xi0) const {
        ActionVector I(idx);
        I.tang = xi0;
        Vec om(nt());
        for (int i = 0; i < nt(); ++i) om[i] = omega_site(idx.S[i], I);
        return om;
    }

    // Twist matrix (d omega_n / d I_k) of the quartic model: 4 - 2 delta.
    static Mat twist_matrix(int m) {
        return Mat::Constant(m, m, 4.0) - 2.0 * Mat::Identity(m, m);
    }
    Mat kolmogorov_matrix() const { return twist_matrix(nt()); }
    double kolmogorov_det() const { return kolmogorov_matrix().determinant(); }

    // Newton inversion of the tangential frequency map (affine for the quartic
    // model, so a single step closes to rounding).
    Vec xi_of_omega(const Vec& omega_target) const {
        Vec x = Vec::Constant(nt(), 1.0);
        Mat Jac = kolmogorov_matrix();
        for (int it = 0; it < MAX_NEWTON; ++it) {
            Vec r = omega_tangential(x) - omega_target;
            if (r.lpNorm<Eigen::Infinity>() < TOL_NEWTON) {
                for (double v : x)
                    if (!(v > 0)) throw OutOfRange("frequency inversion left the action box");
                return x;
            }
            x -= Jac.fullPivLu().solve(r);
        }
        throw NoConvergence("frequency-map Newton did not converge");
    }

    //--------------------------------------------------------------------------
    // Pointwise derivatives of H = h(I) + eps P in the w amplitudes.
    //--------------------------------------------------------------------------
    HamPoint ham_point(const CVec& w, bool need_hess) const {
        const int n = nsites();
        HamPoint hp;
        hp.w = w;
        hp.g = CVec::Zero(n);
        if (need_hess) {
            hp.Hccb = CMat::Zero(n, n);
            hp.Hcbcb = CMat::Zero(n, n);
        }

        // Integrable part h(I) = sum 4 pi^2 k^2 I_k + 2 (sum I)^2 - sum I_k^2.
        ActionVector I(idx);
        for (int i = 0; i < n; ++i) {
            double a = std::norm(w[i]);
            if (i < nt())
                I.tang[i] = a;
            else
                I.norm[i - nt()] = a;
        }
        double S = I.sum();
        hp.value = 2.0 * S * S;
        for (int i = 0; i < n; ++i) {
            double Ik = std::norm(w[i]);
            int k = sites_all[i];
            hp.value += 4.0 * PI * PI * k * k * Ik - Ik * Ik;
            hp.g[i] = omega_site(k, I) * w[i];
        }
        if (need_hess) {
            for (int i = 0; i < n; ++i)
                for (int m = 0; m < n; ++m) {
                    double twist = 4.0 - 2.0 * (i == m ? 1.0 : 0.0);
                    hp.Hccb(i, m) = (i == m ? cplx(omega_site(sites_all[i], I)) : cplx(0)) +
                                    twist * std::conj(w[m]) * w[i];
                    hp.Hcbcb(i, m) = twist * w[m] * w[i];
                }
        }

        if (eps != 0.0 && !terms.empty()) add_perturbation(hp, need_hess);
        return hp;
    }

    //--------------------------------------------------------------------------
    // Residual of the invariance equation, spectral in the angles.
    //--------------------------------------------------------------------------
    ResidualTriple residual_F(const TorusEmbedding& iota, const Vec& zeta, const Vec& omega) const {
        const int d = nt(), M = idx.M(), T = grid.T;
        // Grid values of the embedding and its transport derivatives.
        CMat Th = grid.to_grid(iota.Theta.C), Y = grid.to_grid(iota.y.C),
             Z = grid.to_grid(iota.z.C);
        CMat dTh = grid.to_grid(iota.Theta.omega_deriv(omega).C),
             dY = grid.to_grid(iota.y.omega_deriv(omega).C),
             dZ = grid.to_grid(iota.z.omega_deriv(omega).C);

        CMat Eth(d, T), Ey(d, T), Ez(M, T);
        CVec w(nsites());
        for (int t = 0; t < T; ++t) {
            for (int k = 0; k < d; ++k) {
                double Ik = xi[k] + Y(k, t).real();
                if (!(Ik > 0)) throw SqrtDomain("action xi_k + y_k left the positive half line");
                double th = angle(t, k) + Th(k, t).real();
                w[k] = std::sqrt(Ik) * std::exp(-I_UNIT * th);
            }
            for (int m = 0; m < M; ++m) w[d + m] = Z(m, t);
            HamPoint hp = ham_point(w, false);
            for (int k = 0; k < d; ++k) {
                double Ik = xi[k] + Y(k, t).real();
                cplx a = w[k] / (2.0 * Ik);              // dw_k / dy_k
                double grad_y = 2.0 * std::real(std::conj(hp.g[k]) * a);
                double grad_th = 2.0 * std::imag(std::conj(hp.g[k]) * w[k]);
                Eth(k, t) = omega[k] + dTh(k, t) - grad_y;
                Ey(k, t) = dY(k, t) + grad_th + zeta[k];
            }
            for (int m = 0; m < M; ++m) Ez(m, t) = dZ(m, t) + I_UNIT * hp.g[d + m];
        }
        ResidualTriple E;
        E.E_theta = Field(lat, idx.S);
        E.E_theta.C = grid.from_grid(Eth);
        E.E_y = Field(lat, idx.S);
        E.E_y.C = grid.from_grid(Ey);
        E.E_z = Field(lat, idx.S_perp);
        E.E_z.C = grid.from_grid(Ez);
        E.zeta = zeta;
        return E;
    }

    // Counterterm compatibility quadrature:
    // zeta = [[ -(d theta)^t E_y + (d y)^t E_th - i (d z)^t conj(E_z) + i (d zbar)^t E_z ]].
    Vec zeta_compatibility(const TorusEmbedding& iota, const ResidualTriple& E) const {
        const int d = nt(), M = idx.M(), T = grid.T;
        std::vector<CMat> dTh(d), dY(d), dZ(d);
        for (int j = 0; j < d; ++j) {
            dTh[j] = grid.to_grid(iota.Theta.deriv(j).C);
            dY[j] = grid.to_grid(iota.y.deriv(j).C);
            dZ[j] = grid.to_grid(iota.z.deriv(j).C);
        }
        CMat Eth = grid.to_grid(E.E_theta.C), Ey = grid.to_grid(E.E_y.C),
             Ez = grid.to_grid(E.E_z.C);
        Vec zeta = Vec::Zero(d);
        for (int t = 0; t < T; ++t)
            for (int k = 0; k < d; ++k) {
                cplx acc = 0;
                for (int j = 0; j < d; ++j) {
                    double dth_kj = (j == k ? 1.0 : 0.0) + dTh[k](j, t).real();
                    acc += -dth_kj * Ey(j, t) + dY[k](j, t).real() * Eth(j, t);
                }
                for (int m = 0; m < M; ++m)
                    acc += -I_UNIT * dZ[k](m, t) * std::conj(Ez(m, t)) +
                           I_UNIT * std::conj(dZ[k](m, t)) * Ez(m, t);
                zeta[k] += acc.real();
            }
        return zeta / static_cast<double>(T);
    }

    // Angle value phi_axis at flat grid point t.
    double angle(int t, int axis) const {
        for (int i = 0; i < axis; ++i) t /= grid.G;
        return 2.0 * PI * (t % grid.G) / grid.G;
    }

    //--------------------------------------------------------------------------
    // Perturbation machinery (exposed for the linearization's q1/q2 fields).
    //--------------------------------------------------------------------------
    // u(x_g) = - sum_m w_m e^{-2 pi i m x_g} on the x-grid.
    CVec u_of_w(const CVec& w) const {
        CVec u = CVec::Zero(Gx);
        for (int i = 0; i < nsites(); ++i) {
            int m = sites_all[i];
            for (int g = 0; g < Gx; ++g)
                u[g] -= w[i] * std::exp(-I_UNIT * (2.0 * PI * m * g / Gx));
        }
        return u;
    }
    // Density Hessian entries of p at real arguments (zeta1, zeta2).
    // Returns (p, P1, P2, P11, P12, P22) contracted over the term list at x_g.
    void p_derivs(double x01, double z1, double z2, double out[6]) const {
        for (int i = 0; i < 6; ++i) out[i] = 0;
        for (auto& tm : terms) {
            double cx = tm.coeff * std::cos(2.0 * PI * tm.harmonic * x01);
            auto pw = [](double v, int e) {
                double r = 1;
                for (int i = 0; i < e; ++i) r *= v;
                return r;
            };
            int a = tm.p1, b = tm.p2;
            out[0] += cx * pw(z1, a) * pw(z2, b);
            if (a >= 1) out[1] += cx * a * pw(z1, a - 1) * pw(z2, b);
            if (b >= 1) out[2] += cx * b * pw(z1, a) * pw(z2, b - 1);
            if (a >= 2) out[3] += cx * a * (a - 1) * pw(z1, a - 2) * pw(z2, b);
            if (a >= 1 && b >= 1) out[4] += cx * a * b * pw(z1, a - 1) * pw(z2, b - 1);
            if (b >= 2) out[5] += cx * b * (b - 1) * pw(z1, a) * pw(z2, b - 2);
        }
    }
    // x-grid spectra of (d_zetabar p, q1, q2) at the point u; row j holds the
    // coefficient at x-harmonic j - Gx/2 ... packed as full bins 0..Gx-1.
    void pert_spectra(const CVec& u, CVec& pzb_hat, CVec& q1_hat, CVec& q2_hat,
                      CVec* q1_val = nullptr, CVec* q2_val = nullptr, double* pval = nullptr) const {
        CVec pzb(Gx), q1(Gx), q2(Gx);
        double val = 0;
        for (int g = 0; g < Gx; ++g) {
            double z1 = std::sqrt(2.0) * u[g].real();
            double z2 = -std::sqrt(2.0) * u[g].imag();
            double d[6];
            p_derivs(static_cast<double>(g) / Gx, z1, z2, d);
            val += d[0];
            pzb[g] = (d[1] - I_UNIT * d[2]) / std::sqrt(2.0);
            q1[g] = 0.5 * (d[3] + d[5]);
            q2[g] = 0.5 * (d[3] - d[5]) - I_UNIT * d[4];
        }
        if (pval) *pval = val / Gx;
        if (q1_val) *q1_val = q1;
        if (q2_val) *q2_val = q2;
        auto dft = [&](const CVec& f) {
            CVec out(Gx);
            for (int j = 0; j < Gx; ++j) {
                cplx acc = 0;
                for (int g = 0; g < Gx; ++g)
                    acc += f[g] * std::exp(-I_UNIT * (2.0 * PI * j * g / Gx));
                out[j] = acc / static_cast<double>(Gx);
            }
            return out;
        };
        pzb_hat = dft(pzb);
        q1_hat = dft(q1);
        q2_hat = dft(q2);
    }
    // Signed-bin lookup of a full-bin spectrum.
    cplx bin(const CVec& f_hat, int j) const { return f_hat[((j % Gx) + Gx) % Gx]; }

private:
    void add_perturbation(HamPoint& hp, bool need_hess) const {
        CVec u = u_of_w(hp.w);
        CVec pzb_hat, q1_hat, q2_hat;
        double pval = 0;
        pert_spectra(u, pzb_hat, q1_hat, q2_hat, nullptr, nullptr, &pval);
        hp.value += eps * pval;
        const int n = nsites();
        for (int i = 0; i < n; ++i) hp.g[i] += -eps * bin(pzb_hat, -sites_all[i]);
        if (need_hess)
            for (int i = 0; i < n; ++i)
                for (int m = 0; m < n; ++m) {
                    hp.Hccb(i, m) += eps * bin(q1_hat, sites_all[m] - sites_all[i]);
                    hp.Hcbcb(i, m) += eps * bin(q2_hat, -sites_all[i] - sites_all[m]);
                }
    }
};

}  // namespace kamtor
