//==============================================================================
// field.hpp
// Vector-valued spectral fields on the angle torus.
// Features:
//   • Field: m components with per-component site labels, dense box Fourier
//     coefficients (m x P), axis 0 fastest flat ordering.
//   • Weighted Sobolev norm  ||u||^2 = sum |u_n(l)|^2 <n>^{2 sigma} <l>^{2 s}
//     with <x> = max(1, |x|) and <l> the l1 bracket.
//   • Smoothing projector (l1 cutoff), angle derivatives, conjugate field,
//     averages, and the transport inverse (omega . d_phi)^{-1} with zero-mean
//     and small-divisor guards.
//==============================================================================
#pragma once

#include "lattice.hpp"

namespace kamtor {

struct Field {
    const AngleLattice* lat = nullptr;
    std::vector<int> sites;  // site label per component (weights <n>^sigma)
    CMat C;                  // m x P coefficients over the box

    Field() = default;
    Field(const AngleLattice& l, std::vector<int> site_labels)
        : lat(&l), sites(std::move(site_labels)), C(CMat::Zero(sites.size(), l.P)) {}

    int m() const { return static_cast<int>(sites.size()); }

    Field& operator+=(const Field& o) { C += o.C; return *this; }
    Field& operator-=(const Field& o) { C -= o.C; return *this; }
    Field& operator*=(cplx a) { C *= a; return *this; }
    friend Field operator+(Field a, const Field& b) { a += b; return a; }
    friend Field operator-(Field a, const Field& b) { a -= b; return a; }
    friend Field operator*(cplx a, Field f) { f *= a; return f; }

    // Coefficient at l = 0 (the angle average).
    CVec average() const { return C.col(lat->zero); }

    // d/d(phi_axis): multiply coefficient l by i l_axis.
    Field deriv(int axis) const {
        Field out = *this;
        std::vector<int> l(lat->d);
        for (int p = 0; p < lat->P; ++p) {
            lat->comp(p, l);
            out.C.col(p) *= I_UNIT * static_cast<double>(l[axis]);
        }
        return out;
    }

    // omega . d_phi applied spectrally.
    Field omega_deriv(const Vec& omega) const {
        Field out = *this;
        for (int p = 0; p < lat->P; ++p) out.C.col(p) *= I_UNIT * lat->omega_dot(omega, p);
        return out;
    }

    // Complex conjugate field: coefficients conj(u(-l)).
    Field conj() const {
        Field out = *this;
        for (int p = 0; p < lat->P; ++p) out.C.col(p) = C.col(lat->neg_of[p]).conjugate();
        return out;
    }

    // Weighted Sobolev norm.
    double sobolev_norm(double s, double sigma) const {
        double acc = 0;
        for (int p = 0; p < lat->P; ++p) {
            double wl = std::pow(lat->lbracket(p), 2.0 * s);
            for (int r = 0; r < m(); ++r)
                acc += std::norm(C(r, p)) * std::pow(jbracket(sites[r]), 2.0 * sigma) * wl;
        }
        return std::sqrt(acc);
    }

    // Smoothing projector Pi_N: keep |l|_1 <= N.
    Field project(int N) const {
        Field out = *this;
        for (int p = 0; p < lat->P; ++p)
            if (lat->ell1_of[p] > N) out.C.col(p).setZero();
        return out;
    }
    // Complement Pi_N^perp.
    Field project_tail(int N) const {
        Field out = *this;
        for (int p = 0; p < lat->P; ++p)
            if (lat->ell1_of[p] <= N) out.C.col(p).setZero();
        return out;
    }

    double max_abs() const { return C.cwiseAbs().maxCoeff(); }
};

//------------------------------------------------------------------------------
// Transport inverse: solve omega . d_phi f = g with [[f]] = 0.
// Requires [[g]] = 0 (relative tolerance TOL_MEAN_REL) and small divisors
// |omega . l| >= gamma / <l>^tau when gamma > 0 (absolute floor otherwise).
//------------------------------------------------------------------------------
inline Field omega_dvphi_inverse(const Field& g, const Vec& omega, double gamma = 0.0,
                                 double tau = 0.0) {
    const AngleLattice& lat = *g.lat;
    double g0 = 0;
    for (int p = 0; p < lat.P; ++p) g0 += g.C.col(p).squaredNorm();
    g0 = std::sqrt(g0);
    if (g.C.col(lat.zero).norm() > TOL_MEAN_REL * std::max(1e-300, g0))
        throw NonzeroMean("transport solve: right-hand side has nonzero average");
    Field f = g;
    f.C.col(lat.zero).setZero();
    for (int p = 0; p < lat.P; ++p) {
        if (p == lat.zero) continue;
        double od = lat.omega_dot(omega, p);
        double floor = (gamma > 0) ? gamma / std::pow(lat.lbracket(p), tau) : 1e-13;
        if (std::abs(od) < floor)
            throw DiophantineViolation("transport solve: small divisor at a lattice site");
        f.C.col(p) = g.C.col(p) / (I_UNIT * od);
    }
    return f;
}

}  // namespace kamtor
