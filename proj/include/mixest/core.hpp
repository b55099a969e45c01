/**
 * @file core.hpp
 * @brief Shared vocabulary types and dense linear-algebra helpers.
 *
 * Everything in mixest works on Eigen dynamic vectors/matrices of doubles.
 * Errors are reported with exceptions derived from the std hierarchy:
 * invalid inputs throw std::invalid_argument (or DimensionError), numerical
 * breakdowns throw NumericalError.
 */

#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace mixest {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Smallest admissible eigenvalue of a component covariance.
inline constexpr double kPdFloor = 1e-10;

struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw std::invalid_argument(what);
}

inline void require_dims(bool cond, const std::string& what) {
    if (!cond) throw DimensionError(what);
}

inline bool all_finite(const Eigen::Ref<const Matrix>& a) { return a.allFinite(); }

inline double smallest_eigenvalue(const Matrix& a) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(a, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

inline bool is_symmetric(const Matrix& a, double tol = 1e-12) {
    if (a.rows() != a.cols()) return false;
    const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
    return (a - a.transpose()).cwiseAbs().maxCoeff() <= tol * scale;
}

/// Condition number in the 2-norm of a symmetric PSD matrix (inf if singular).
inline double spd_condition(const Matrix& a) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(a, Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().maxCoeff();
    if (lo <= 0.0) return std::numeric_limits<double>::infinity();
    return hi / lo;
}

/// Throws unless `a` is square, symmetric and has eigenvalues above `floor`.
inline void require_spd(const Matrix& a, const std::string& name, double floor = kPdFloor) {
    require_dims(a.rows() == a.cols(), name + " must be square");
    require(all_finite(a), name + " has non-finite entries");
    require(is_symmetric(a, 1e-10), name + " must be symmetric");
    const double lo = smallest_eigenvalue(a);
    if (!(lo > floor))
        throw std::invalid_argument(name + " is not positive definite (min eigenvalue " +
                                    std::to_string(lo) + ")");
}

inline Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

/// Inverse of a symmetric positive-definite matrix via Cholesky.
inline Matrix spd_inverse(const Matrix& a) {
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() != Eigen::Success) throw NumericalError("matrix is not positive definite");
    return symmetrize(llt.solve(Matrix::Identity(a.rows(), a.cols())));
}

inline Vector spd_solve(const Matrix& a, const Vector& b) {
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() != Eigen::Success) throw NumericalError("matrix is not positive definite");
    return llt.solve(b);
}

/// Quadratic form y' A y.
inline double quad_form(const Matrix& a, const Vector& y) { return y.dot(a * y); }

/// log N(x | mu, L L') given the lower Cholesky factor L.
inline double log_normal_density(const Vector& x, const Vector& mu, const Matrix& chol_lower,
                                 double log_det) {
    const Vector z = chol_lower.triangularView<Eigen::Lower>().solve(x - mu);
    const double d = static_cast<double>(x.size());
    return -0.5 * (d * std::log(2.0 * std::numbers::pi) + log_det + z.squaredNorm());
}

/// Unbiased sample covariance of the rows of `data` (T x n).
inline Matrix sample_covariance(const Matrix& data) {
    require(data.rows() >= 2, "sample covariance needs at least two rows");
    const Eigen::RowVectorXd mean = data.colwise().mean();
    const Matrix centered = data.rowwise() - mean;
    return symmetrize(centered.transpose() * centered / static_cast<double>(data.rows() - 1));
}

/// SplitMix64 finalizer; used to derive independent stream seeds from one root.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t a, std::uint64_t b = 0) {
    return mix_seed(mix_seed(mix_seed(root) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

}  // namespace mixest
