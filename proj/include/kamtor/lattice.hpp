//==============================================================================
// lattice.hpp
// Index bookkeeping for the tangential/normal site split and the truncated
// angle-Fourier lattice, plus the collocation grid used for products.
// Features:
//   • IndexSets: tangential sites S (symmetric, containing 0), normal sites
//     S_perp up to the normal cutoff, their positive representatives, and
//     doubled (z, zbar) indexing helpers.
//   • AngleLattice: dense box |l_i| <= L with flat indexing, l1-simplex
//     enumeration, negation and truncated addition of multi-indices.
//   • PhiGrid: oversampled tensor collocation grid on the angle torus with
//     exact box-spectrum synthesis/analysis (per-axis DFT matrices), sized so
//     that quadratic products truncate without folding.
//==============================================================================
#pragma once

#include <algorithm>
#include <numeric>
#include <unordered_map>
#include <vector>

#include "types.hpp"

namespace kamtor {

//------------------------------------------------------------------------------
// IndexSets: validated site bookkeeping.
//------------------------------------------------------------------------------
struct IndexSets {
    std::vector<int> S;          // tangential sites, sorted, 0 included, S = -S
    std::vector<int> S_perp;     // normal sites k not in S with |k| <= K_normal
    std::vector<int> S_perp_plus;  // positive representatives of S_perp
    int K_normal = 0;
    int L_angle = 0;

    int dim() const { return static_cast<int>(S.size()); }          // |S|
    int M() const { return static_cast<int>(S_perp.size()); }       // |S_perp|
    int Mp() const { return static_cast<int>(S_perp_plus.size()); }

    // Position lookups (-1 when absent).
    int tang_pos(int k) const {
        auto it = std::lower_bound(S.begin(), S.end(), k);
        return (it != S.end() && *it == k) ? static_cast<int>(it - S.begin()) : -1;
    }
    int norm_pos(int k) const {
        auto it = std::lower_bound(S_perp.begin(), S_perp.end(), k);
        return (it != S_perp.end() && *it == k) ? static_cast<int>(it - S_perp.begin()) : -1;
    }
    // Doubled (z, zbar) index: slot 0 holds z-components, slot 1 the conjugates.
    int dbl(int slot, int pos) const { return slot * M() + pos; }

    // Smoothing threshold s0 = [|S|/2] + 1 used as the base regularity.
    int s0() const { return dim() / 2 + 1; }

    static IndexSets make(std::vector<int> sites, int K_normal, int L_angle) {
        std::sort(sites.begin(), sites.end());
        sites.erase(std::unique(sites.begin(), sites.end()), sites.end());
        if (sites.empty()) throw ValidationError("tangential site set is empty");
        if (!std::binary_search(sites.begin(), sites.end(), 0))
            throw ValidationError("tangential site set must contain 0");
        for (int k : sites)
            if (!std::binary_search(sites.begin(), sites.end(), -k))
                throw ValidationError("tangential site set must be symmetric");
        int maxS = *std::max_element(sites.begin(), sites.end());
        if (K_normal <= maxS) throw ValidationError("normal cutoff must exceed max tangential site");
        if (L_angle < 1) throw ValidationError("angle cutoff must be >= 1");
        IndexSets idx;
        idx.S = std::move(sites);
        idx.K_normal = K_normal;
        idx.L_angle = L_angle;
        for (int k = -K_normal; k <= K_normal; ++k)
            if (idx.tang_pos(k) < 0) idx.S_perp.push_back(k);
        for (int k : idx.S_perp)
            if (k > 0) idx.S_perp_plus.push_back(k);
        return idx;
    }
};

//------------------------------------------------------------------------------
// AngleLattice: dense Fourier box with l1-simplex semantics.
// Flat index: sum_i (l_i + L) * B^i with B = 2L+1 (axis 0 fastest).
//------------------------------------------------------------------------------
struct AngleLattice {
    int d = 0;   // number of angles = |S|
    int L = 0;   // angle cutoff L_angle
    int B = 0;   // per-axis extent 2L+1
    int P = 0;   // box cardinality B^d
    std::vector<int> ell1_of;   // l1 norm per flat index
    std::vector<int> neg_of;    // flat index of -l
    std::vector<int> simplex;   // flat indices with |l|_1 <= L (the lattice proper)
    int zero = 0;               // flat index of l = 0

    AngleLattice() = default;
    AngleLattice(int d_, int L_) : d(d_), L(L_), B(2 * L_ + 1) {
        P = 1;
        for (int i = 0; i < d; ++i) P *= B;
        ell1_of.resize(P);
        neg_of.resize(P);
        std::vector<int> l(d);
        for (int p = 0; p < P; ++p) {
            comp(p, l);
            int n1 = 0, np = 0, stride = 1;
            for (int i = 0; i < d; ++i) {
                n1 += std::abs(l[i]);
                np += (-l[i] + L) * stride;
                stride *= B;
            }
            ell1_of[p] = n1;
            neg_of[p] = np;
            if (n1 <= L) simplex.push_back(p);
            if (n1 == 0) zero = p;
        }
    }

    // Decode flat index into components l_i in [-L, L].
    void comp(int p, std::vector<int>& l) const {
        for (int i = 0; i < d; ++i) {
            l[i] = p % B - L;
            p /= B;
        }
    }
    std::vector<int> comp(int p) const {
        std::vector<int> l(d);
        comp(p, l);
        return l;
    }
    int flat(const std::vector<int>& l) const {
        int p = 0, stride = 1;
        for (int i = 0; i < d; ++i) {
            p += (l[i] + L) * stride;
            stride *= B;
        }
        return p;
    }
    // Truncated addition: returns -1 when the sum leaves the box.
    int add(int p, int q) const {
        int r = 0, stride = 1;
        for (int i = 0; i < d; ++i) {
            int s = (p % B) + (q % B) - L;
            if (s < 0 || s >= B) return -1;
            r += s * stride;
            p /= B;
            q /= B;
            stride *= B;
        }
        return r;
    }
    double omega_dot(const Vec& omega, int p) const {
        double s = 0;
        for (int i = 0; i < d; ++i) {
            s += omega[i] * (p % B - L);
            p /= B;
        }
        return s;
    }
    // Angle bracket <l> = max(1, |l|_1).
    double lbracket(int p) const { return std::max(1, ell1_of[p]); }
};

//------------------------------------------------------------------------------
// PhiGrid: collocation grid with G = 4L+1 points per axis.  Synthesis is exact
// on the box; analysis of products of two box-limited functions truncates to
// the box without folding (3L < G).
//------------------------------------------------------------------------------
struct PhiGrid {
    const AngleLattice* lat = nullptr;
    int G = 0;   // points per axis
    int T = 0;   // total grid points G^d
    CMat E;      // G x B synthesis matrix, E(g, c) = exp(i 2 pi g (c - L) / G)
    CMat X;      // B x G analysis matrix, (1/G) E^H

    explicit PhiGrid(const AngleLattice& l) : lat(&l) {
        G = 4 * l.L + 1;
        T = 1;
        for (int i = 0; i < l.d; ++i) T *= G;
        E.resize(G, l.B);
        for (int g = 0; g < G; ++g)
            for (int c = 0; c < l.B; ++c)
                E(g, c) = std::exp(I_UNIT * (2.0 * PI * g * (c - l.L) / G));
        X = E.adjoint() / static_cast<double>(G);
    }

    // Apply the per-axis matrix A (rows_out x rows_in) along one tensor axis.
    static void axis_apply(const CMat& A, const cplx* in, cplx* out, int pre, int post) {
        const int ro = static_cast<int>(A.rows()), ri = static_cast<int>(A.cols());
        for (int q = 0; q < post; ++q)
            for (int g = 0; g < ro; ++g) {
                cplx acc = 0;
                for (int c = 0; c < ri; ++c) acc += A(g, c) * in[(q * ri + c) * pre + 0];
                out[(q * ro + g) * pre] = acc;
            }
    }

    // Tensor transform of a single row-vector (flattened, axis 0 fastest).
    std::vector<cplx> tensor_apply(const CMat& A, const std::vector<cplx>& in, int extent_in) const {
        const int d = lat->d;
        const int ro = static_cast<int>(A.rows());
        std::vector<cplx> cur = in, nxt;
        int pre = 1;
        int post = 1;
        for (int i = 1; i < d; ++i) post *= extent_in;
        for (int axis = 0; axis < d; ++axis) {
            nxt.assign(static_cast<size_t>(pre) * ro * post, cplx{0});
            // layout: index = (q * extent + c) * pre + r, r < pre
            const int ext = extent_in;
            for (int q = 0; q < post; ++q)
                for (int g = 0; g < ro; ++g)
                    for (int r = 0; r < pre; ++r) {
                        cplx acc = 0;
                        const cplx* base = cur.data() + (static_cast<size_t>(q) * ext) * pre + r;
                        for (int c = 0; c < ext; ++c) acc += A(g, c) * base[static_cast<size_t>(c) * pre];
                        nxt[(static_cast<size_t>(q) * ro + g) * pre + r] = acc;
                    }
            cur.swap(nxt);
            pre *= ro;
            post = (axis + 1 < d) ? post / extent_in : 1;
        }
        return cur;
    }

    // Coefficients (m x P, box order) -> grid values (m x T).
    CMat to_grid(const CMat& coeffs) const {
        CMat out(coeffs.rows(), T);
        std::vector<cplx> row(lat->P);
        for (int r = 0; r < coeffs.rows(); ++r) {
            for (int p = 0; p < lat->P; ++p) row[p] = coeffs(r, p);
            auto g = tensor_apply(E, row, lat->B);
            for (int t = 0; t < T; ++t) out(r, t) = g[t];
        }
        return out;
    }

    // Grid values (m x T) -> box coefficients (m x P); spectra beyond the box
    // are truncated (exactly, for spectra within radius 3L per axis).
    CMat from_grid(const CMat& vals) const {
        CMat out(vals.rows(), lat->P);
        std::vector<cplx> row(T);
        for (int r = 0; r < vals.rows(); ++r) {
            for (int t = 0; t < T; ++t) row[t] = vals(r, t);
            auto c = tensor_apply(X, row, G);
            for (int p = 0; p < lat->P; ++p) out(r, p) = c[p];
        }
        return out;
    }
};

}  // namespace kamtor
