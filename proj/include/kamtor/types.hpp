//==============================================================================
// types.hpp
// Shared scalar types, constants and error conditions for the kamtor library.
// Features:
//   • Complex/real aliases used throughout (Eigen-backed dense linear algebra).
//   • Error taxonomy for the solver pipeline: small-divisor failures, mean
//     obstructions, domain errors of the action square root, aliasing
//     overflow, singular chart frames and config validation failures.
//   • Default numerical tolerances shared by the modules.
//==============================================================================
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace kamtor {

using cplx = std::complex<double>;
using Vec = Eigen::VectorXd;
using CVec = Eigen::VectorXcd;
using Mat = Eigen::MatrixXd;
using CMat = Eigen::MatrixXcd;
using Mat2c = Eigen::Matrix2cd;

inline constexpr double PI = 3.14159265358979323846;
inline constexpr cplx I_UNIT{0.0, 1.0};

// Default tolerances (overridable through the corresponding call sites).
inline constexpr double TOL_MEAN_REL = 1e-12;    // zero-mean requirement of transport solves
inline constexpr double TOL_ALIAS = 1e-10;       // pseudo-spectral aliasing guard
inline constexpr double TOL_ISO = 1e-9;          // isotropy defect (relative)
inline constexpr double TOL_STRUCT = 1e-9;       // symplecticity checks
inline constexpr double TOL_EXP = 1e-13;         // operator exponential truncation
inline constexpr int EXP_SERIES_CAP = 30;        // hard cap of the exponential series
inline constexpr double TOL_NEWTON = 1e-12;      // frequency-to-action Newton solve
inline constexpr int MAX_NEWTON = 50;
inline constexpr double COND_CAP = 1e8;          // averaged twist matrix conditioning cap
inline constexpr double CHART_COND_CAP = 1e6;    // chart frame conditioning cap
inline constexpr double TOL_TRI = 1e-9;          // triangular-solve verification
inline constexpr double TOL_HOM_REL = 1e-10;     // homological-equation residual (relative)

// A small divisor fell below the admissible threshold.
struct DiophantineViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Right-hand side of an angle-transport solve has a nonzero average.
struct NonzeroMean : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Action candidate xi_k + y_k left the positive half line.
struct SqrtDomain : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Pseudo-spectral product spilled beyond the resolved lattice.
struct AliasOverflow : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// The chart frame d(theta)/d(psi) became numerically singular.
struct ChartSingular : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Configuration file failed validation.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// <x> bracket used by all weights: max(1, |x|).
inline double jbracket(double x) { return std::max(1.0, std::abs(x)); }

// Least-squares slope of log(y) against log(x) (decay/scaling-law fits).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const size_t n = std::min(x.size(), y.size());
    if (n < 2) throw ValidationError("slope fit needs at least two points");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < n; ++i) {
        const double lx = std::log(x[i]), ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double den = n * sxx - sx * sx;
    if (den == 0) throw ValidationError("slope fit: degenerate abscissae");
    return (n * sxy - sx * sy) / den;
}

}  // namespace kamtor
