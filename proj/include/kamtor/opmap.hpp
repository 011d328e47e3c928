//==============================================================================
// opmap.hpp
// Fourier-block operator calculus on the doubled normal space.
// Features:
//   • OperatorMap: sparse map l -> 2M x 2M matrix acting on (z, zbar) pairs;
//     (A u)^(l) = sum_{l'} A^(l - l') u^(l').
//   • Algebra: sums, products (convolution truncated to the l1 lattice),
//     adjoint/conjugate maps, truncated exponential, smoothing projector.
//   • Weighted operator norm  |A|_{s,sigma}^2 = sum_l ||W A^(l) W^{-1}||^2
//     <l>^{2 s}  with W = diag(<n>^sigma) over the doubled sites.
//   • Linear-operator helpers: transport term (omega . d_phi), conjugation of
//     omega . d_phi + A by a map Phi, structural multipliers J and JJ2.
//==============================================================================
#pragma once

#include <unordered_map>

#include "field.hpp"

namespace kamtor {

struct OperatorMap {
    const AngleLattice* lat = nullptr;
    const IndexSets* idx = nullptr;
    int n = 0;  // doubled dimension 2 M
    std::unordered_map<int, CMat> blocks;

    OperatorMap() = default;
    OperatorMap(const AngleLattice& l, const IndexSets& ix)
        : lat(&l), idx(&ix), n(2 * ix.M()) {}

    bool has(int p) const { return blocks.count(p) != 0; }
    const CMat& block(int p) const {
        auto it = blocks.find(p);
        if (it == blocks.end()) {
            static thread_local CMat zero;
            zero = CMat::Zero(n, n);
            return zero;
        }
        return it->second;
    }
    CMat& at(int p) {
        auto it = blocks.find(p);
        if (it == blocks.end()) it = blocks.emplace(p, CMat::Zero(n, n)).first;
        return it->second;
    }

    static OperatorMap identity(const AngleLattice& l, const IndexSets& ix) {
        OperatorMap A(l, ix);
        A.at(l.zero) = CMat::Identity(A.n, A.n);
        return A;
    }
    // Constant (l = 0) multiplier from a diagonal.
    static OperatorMap diagonal(const AngleLattice& l, const IndexSets& ix, const CVec& diag) {
        OperatorMap A(l, ix);
        A.at(l.zero) = diag.asDiagonal();
        return A;
    }

    OperatorMap& operator+=(const OperatorMap& o) {
        for (auto& [p, B] : o.blocks) at(p) += B;
        return *this;
    }
    OperatorMap& operator-=(const OperatorMap& o) {
        for (auto& [p, B] : o.blocks) at(p) -= B;
        return *this;
    }
    OperatorMap& operator*=(cplx a) {
        for (auto& [p, B] : blocks) B *= a;
        return *this;
    }
    friend OperatorMap operator+(OperatorMap a, const OperatorMap& b) { a += b; return a; }
    friend OperatorMap operator-(OperatorMap a, const OperatorMap& b) { a -= b; return a; }
    friend OperatorMap operator*(cplx a, OperatorMap A) { A *= a; return A; }

    // Drop blocks below an absolute Frobenius threshold.
    void prune(double tol) {
        for (auto it = blocks.begin(); it != blocks.end();)
            it = (it->second.norm() < tol) ? blocks.erase(it) : std::next(it);
    }

    // Composition, truncated to the l1 lattice |l|_1 <= L.
    friend OperatorMap compose(const OperatorMap& A, const OperatorMap& B) {
        OperatorMap C(*A.lat, *A.idx);
        for (auto& [pa, Ba] : A.blocks)
            for (auto& [pb, Bb] : B.blocks) {
                int p = A.lat->add(pa, pb);
                if (p < 0 || A.lat->ell1_of[p] > A.lat->L) continue;
                C.at(p).noalias() += Ba * Bb;
            }
        double scale = 0;
        for (auto& [p, Bc] : C.blocks) scale = std::max(scale, Bc.norm());
        C.prune(1e-16 * scale);
        return C;
    }

    // Apply to a doubled field (m = 2 M components).
    Field apply(const Field& u) const {
        Field out(*lat, u.sites);
        for (auto& [pb, B] : blocks)
            for (int q = 0; q < lat->P; ++q) {
                if (u.C.col(q).isZero(0)) continue;
                int p = lat->add(pb, q);
                if (p < 0) continue;
                out.C.col(p).noalias() += B * u.C.col(q);
            }
        return out;
    }

    // Adjoint map: (A*)^(l) = (A^(-l))^H.
    OperatorMap adjoint_op() const {
        OperatorMap C(*lat, *idx);
        for (auto& [p, B] : blocks) C.at(lat->neg_of[p]) = B.adjoint();
        return C;
    }
    // Conjugate map: blocks conj(A^(-l)).
    OperatorMap conj_op() const {
        OperatorMap C(*lat, *idx);
        for (auto& [p, B] : blocks) C.at(lat->neg_of[p]) = B.conjugate();
        return C;
    }
    // Transpose map: (A^t)^(l) = (A^(l))^t.
    OperatorMap transpose_op() const {
        OperatorMap C(*lat, *idx);
        for (auto& [p, B] : blocks) C.at(p) = B.transpose();
        return C;
    }

    // Smoothing projector Pi_N on the block index.
    OperatorMap project(int N) const {
        OperatorMap C(*lat, *idx);
        for (auto& [p, B] : blocks)
            if (lat->ell1_of[p] <= N) C.at(p) = B;
        return C;
    }
    OperatorMap project_tail(int N) const {
        OperatorMap C(*lat, *idx);
        for (auto& [p, B] : blocks)
            if (lat->ell1_of[p] > N) C.at(p) = B;
        return C;
    }

    // (omega . d_phi A): block l scaled by i omega . l.
    OperatorMap omega_deriv(const Vec& omega) const {
        OperatorMap C(*lat, *idx);
        for (auto& [p, B] : blocks) C.at(p) = (I_UNIT * lat->omega_dot(omega, p)) * B;
        return C;
    }

    // Weighted operator norm.
    double operator_norm(double s, double sigma) const {
        CVec w(n);
        for (int c = 0; c < n; ++c)
            w[c] = std::pow(jbracket(idx->S_perp[c % idx->M()]), sigma);
        double acc = 0;
        for (auto& [p, B] : blocks) {
            CMat WB = w.asDiagonal() * B * w.cwiseInverse().asDiagonal();
            double op2 = WB.jacobiSvd().singularValues()[0];
            acc += op2 * op2 * std::pow(lat->lbracket(p), 2.0 * s);
        }
        return std::sqrt(acc);
    }

    // Right-composed diagonal weight diag(<k>) over the doubled sites
    // (the extra power of k carried by remainders in the reduction scheme).
    OperatorMap right_weight() const {
        CVec w(n);
        for (int c = 0; c < n; ++c) w[c] = jbracket(idx->S_perp[c % idx->M()]);
        OperatorMap C(*lat, *idx);
        for (auto& [p, B] : blocks) C.at(p) = B * w.asDiagonal();
        return C;
    }

    double max_block_norm() const {
        double m = 0;
        for (auto& [p, B] : blocks) m = std::max(m, B.norm());
        return m;
    }
};

//------------------------------------------------------------------------------
// Structural multipliers on the doubled space.
//------------------------------------------------------------------------------
// J = diag(i Id_M, -i Id_M): the diagonal complex structure.
inline OperatorMap J_op(const AngleLattice& l, const IndexSets& ix) {
    CVec d(2 * ix.M());
    for (int c = 0; c < 2 * ix.M(); ++c) d[c] = (c < ix.M()) ? I_UNIT : -I_UNIT;
    return OperatorMap::diagonal(l, ix, d);
}
// JJ2 = i [[0, Id], [-Id, 0]]: the symplectic multiplier pairing (z, zbar).
inline OperatorMap JJ2_op(const AngleLattice& l, const IndexSets& ix) {
    OperatorMap A(l, ix);
    int M = ix.M();
    CMat B = CMat::Zero(2 * M, 2 * M);
    B.topRightCorner(M, M) = I_UNIT * CMat::Identity(M, M);
    B.bottomLeftCorner(M, M) = -I_UNIT * CMat::Identity(M, M);
    A.at(l.zero) = B;
    return A;
}
// Dense l = 0 matrix form of JJ2 (for pointwise structure checks).
inline CMat JJ2_mat(int M) {
    CMat B = CMat::Zero(2 * M, 2 * M);
    B.topRightCorner(M, M) = I_UNIT * CMat::Identity(M, M);
    B.bottomLeftCorner(M, M) = -I_UNIT * CMat::Identity(M, M);
    return B;
}

// Truncated exponential exp(G) = sum G^k / k!.
inline OperatorMap exp_series(const OperatorMap& G, double tol = TOL_EXP,
                              int cap = EXP_SERIES_CAP) {
    OperatorMap out = OperatorMap::identity(*G.lat, *G.idx);
    OperatorMap term = out;
    for (int k = 1; k <= cap; ++k) {
        term = compose(term, G);
        term *= cplx{1.0 / k};
        out += term;
        if (term.max_block_norm() < tol) break;
    }
    return out;
}

// Solve compose(A, X) = rhs for X within the truncated algebra by defect
// correction (A must be a near-identity map).  The truncated convolution is
// not associative, so exp(-G) is only an approximate inverse of exp(G); this
// solve makes conjugation identities hold exactly by construction.
inline OperatorMap solve_left_composition(const OperatorMap& A, const OperatorMap& rhs,
                                          const OperatorMap* guess = nullptr, int iters = 200) {
    OperatorMap X = guess ? compose(*guess, rhs) : rhs;
    double scale = std::max(1.0, rhs.max_block_norm());
    for (int k = 0; k < iters; ++k) {
        OperatorMap D = rhs - compose(A, X);
        double nd = D.max_block_norm();
        X += D;
        if (nd < 1e-15 * scale) break;
    }
    return X;
}

// Exact right inverse: compose(A, X) = Id, seeded with an approximate inverse.
inline OperatorMap refine_inverse(const OperatorMap& A, const OperatorMap& approx_inv) {
    OperatorMap Id = OperatorMap::identity(*A.lat, *A.idx);
    return solve_left_composition(A, Id, &approx_inv);
}

// Mirror solve: compose(X, A) = rhs for a near-identity A.
inline OperatorMap solve_right_composition(const OperatorMap& A, const OperatorMap& rhs,
                                           const OperatorMap* guess = nullptr, int iters = 200) {
    OperatorMap X = guess ? compose(rhs, *guess) : rhs;
    double scale = std::max(1.0, rhs.max_block_norm());
    for (int k = 0; k < iters; ++k) {
        OperatorMap D = rhs - compose(X, A);
        double nd = D.max_block_norm();
        X += D;
        if (nd < 1e-15 * scale) break;
    }
    return X;
}

//------------------------------------------------------------------------------
// Grid synthesis of an operator-valued function of the angles: per collocation
// sample t the dense matrix A(phi_t) = sum_l A^(l) e^{i l . phi_t}, and back.
// Entries are streamed through the grid in row chunks to bound memory.
//------------------------------------------------------------------------------
inline std::vector<CMat> op_samples(const OperatorMap& A, const PhiGrid& grid) {
    const int n = A.n, P = A.lat->P, T = grid.T, chunk = 64;
    std::vector<CMat> out(T, CMat::Zero(n, n));
    for (int base = 0; base < n * n; base += chunk) {
        int rows = std::min(chunk, n * n - base);
        CMat C = CMat::Zero(rows, P);
        for (auto& [p, B] : A.blocks)
            for (int e = 0; e < rows; ++e) C(e, p) = B((base + e) / n, (base + e) % n);
        CMat g = grid.to_grid(C);
        for (int t = 0; t < T; ++t)
            for (int e = 0; e < rows; ++e) out[t]((base + e) / n, (base + e) % n) = g(e, t);
    }
    return out;
}

inline OperatorMap op_from_samples(const AngleLattice& lat, const IndexSets& idx,
                                   const PhiGrid& grid, const std::vector<CMat>& S) {
    OperatorMap A(lat, idx);
    const int n = A.n, T = grid.T, chunk = 64;
    for (int base = 0; base < n * n; base += chunk) {
        int rows = std::min(chunk, n * n - base);
        CMat g(rows, T);
        for (int t = 0; t < T; ++t)
            for (int e = 0; e < rows; ++e) g(e, t) = S[t]((base + e) / n, (base + e) % n);
        CMat C = grid.from_grid(g);
        for (int p = 0; p < lat.P; ++p)
            for (int e = 0; e < rows; ++e)
                if (C(e, p) != cplx(0)) A.at(p)((base + e) / n, (base + e) % n) = C(e, p);
    }
    A.prune(1e-16 * std::max(1e-300, A.max_block_norm()));
    return A;
}

// Conjugation of a transport operator:  Phi^{-1} (omega . d_phi + A) Phi
// = omega . d_phi + Phi^{-1} A Phi + Phi^{-1} (omega . d_phi Phi).
// Returns the new zeroth-order part.
inline OperatorMap conjugate_transport(const OperatorMap& Phi, const OperatorMap& PhiInv,
                                       const OperatorMap& A, const Vec& omega) {
    OperatorMap out = compose(PhiInv, compose(A, Phi));
    out += compose(PhiInv, Phi.omega_deriv(omega));
    return out;
}

}  // namespace kamtor
