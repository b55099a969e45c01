/**
 * @file gmm.hpp
 * @brief Gaussian mixture model of excess returns with fixed components.
 *
 * The component means and covariances are predetermined; only the mixture
 * weights are uncertain. This header provides the density, the first two
 * moments of the mixture, a seeded sampler, and an EM fit of the weights
 * that also produces the Gaussian prior (lambda_hat_minus, Phi) used by the
 * estimators.
 */

#pragma once

#include "mixest/core.hpp"
#include "mixest/simplex.hpp"

#include <algorithm>
#include <random>
#include <utility>
#include <vector>

namespace mixest {

/**
 * @brief One Gaussian component N(mu, sigma) of the return mixture.
 *
 * Immutable; validated at construction (symmetric, min eigenvalue > 1e-10).
 * The Cholesky factor and log-determinant are cached for density evaluation.
 */
class GaussianComponent {
public:
    GaussianComponent(Vector mu, Matrix sigma) : mu_(std::move(mu)), sigma_(std::move(sigma)) {
        require_dims(mu_.size() > 0, "component mean must be non-empty");
        require_dims(sigma_.rows() == mu_.size() && sigma_.cols() == mu_.size(),
                     "component covariance must be n x n with n = mean length");
        require(all_finite(mu_), "component mean has non-finite entries");
        require_spd(sigma_, "component covariance");
        sigma_ = symmetrize(sigma_);
        Eigen::LLT<Matrix> llt(sigma_);
        chol_ = llt.matrixL();
        log_det_ = 2.0 * chol_.diagonal().array().log().sum();
    }

    const Vector& mu() const noexcept { return mu_; }
    const Matrix& sigma() const noexcept { return sigma_; }
    const Matrix& cholesky_lower() const noexcept { return chol_; }
    Eigen::Index dim() const noexcept { return mu_.size(); }

    double log_density(const Vector& r) const {
        require_dims(r.size() == mu_.size(), "return vector dimension mismatch");
        return log_normal_density(r, mu_, chol_, log_det_);
    }

private:
    Vector mu_;
    Matrix sigma_;
    Matrix chol_;
    double log_det_ = 0.0;
};

class MixtureModel {
public:
    explicit MixtureModel(std::vector<GaussianComponent> components)
        : components_(std::move(components)) {
        require(!components_.empty(), "mixture needs at least one component");
        const auto n = components_.front().dim();
        for (const auto& c : components_)
            require_dims(c.dim() == n, "all components must share the asset dimension");
    }

    const std::vector<GaussianComponent>& components() const noexcept { return components_; }
    const GaussianComponent& operator[](std::size_t k) const { return components_.at(k); }
    std::size_t size() const noexcept { return components_.size(); }
    Eigen::Index n_assets() const noexcept { return components_.front().dim(); }

private:
    std::vector<GaussianComponent> components_;
};

/**
 * @brief Full mixture weight vector (length m) on the probability simplex.
 *
 * The reduced form drops the last entry; lambda_m = 1 - 1'lambda_minus.
 */
class MixtureWeights {
public:
    static constexpr double kSumTolerance = 1e-12;

    explicit MixtureWeights(Vector full) : full_(std::move(full)) {
        require(full_.size() >= 1, "weights must be non-empty");
        require(all_finite(full_), "weights must be finite");
        require((full_.array() >= 0.0).all(), "weights must be non-negative");
        require(std::abs(full_.sum() - 1.0) <= kSumTolerance, "weights must sum to one");
    }

    /// Rebuilds the full vector from lambda_minus; tiny negative drift is clipped.
    static MixtureWeights from_reduced(const Vector& reduced) {
        Vector full(reduced.size() + 1);
        full.head(reduced.size()) = reduced.cwiseMax(0.0);
        full[reduced.size()] = std::max(0.0, 1.0 - full.head(reduced.size()).sum());
        full /= full.sum();
        return MixtureWeights(std::move(full));
    }

    static MixtureWeights uniform(std::size_t m) {
        return MixtureWeights(Vector::Constant(static_cast<Eigen::Index>(m), 1.0 / static_cast<double>(m)));
    }

    const Vector& full() const noexcept { return full_; }
    Vector reduced() const { return full_.head(full_.size() - 1); }
    double operator[](Eigen::Index k) const { return full_[k]; }
    std::size_t size() const noexcept { return static_cast<std::size_t>(full_.size()); }

private:
    Vector full_;
};

/// Gaussian prior lambda_minus ~ N(lambda_hat_minus, phi). The mean may sit
/// outside Gamma (the backward estimate is then its projection).
struct PriorSpec {
    Vector lambda_hat_minus;
    Matrix phi;

    PriorSpec(Vector mean, Matrix cov) : lambda_hat_minus(std::move(mean)), phi(std::move(cov)) {
        require_dims(phi.rows() == lambda_hat_minus.size() && phi.cols() == lambda_hat_minus.size(),
                     "prior covariance must be (m-1) x (m-1)");
        if (lambda_hat_minus.size() > 0) require_spd(phi, "prior covariance Phi", 0.0);
        require(all_finite(lambda_hat_minus), "prior mean must be finite");
    }
};

struct Moments {
    Vector mean;
    Matrix cov;
};

inline void check_weights(const MixtureModel& model, const MixtureWeights& w) {
    require_dims(w.size() == model.size(), "weight count must equal component count");
}

/// Log of the mixture density, computed with log-sum-exp.
inline double mixture_log_density(const MixtureModel& model, const MixtureWeights& w, const Vector& r) {
    check_weights(model, w);
    double hi = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(model.size());
    for (std::size_t k = 0; k < model.size(); ++k) {
        const double lam = w[static_cast<Eigen::Index>(k)];
        terms[k] = lam > 0.0 ? std::log(lam) + model[k].log_density(r)
                             : -std::numeric_limits<double>::infinity();
        hi = std::max(hi, terms[k]);
    }
    double acc = 0.0;
    for (double t : terms) acc += std::exp(t - hi);
    return hi + std::log(acc);
}

inline double mixture_density(const MixtureModel& model, const MixtureWeights& w, const Vector& r) {
    return std::exp(mixture_log_density(model, w, r));
}

/// Mean and covariance of the mixture (law of total covariance).
inline Moments mixture_moments(const MixtureModel& model, const MixtureWeights& w) {
    check_weights(model, w);
    const auto n = model.n_assets();
    Vector mean = Vector::Zero(n);
    for (std::size_t k = 0; k < model.size(); ++k) mean += w[static_cast<Eigen::Index>(k)] * model[k].mu();
    Matrix cov = Matrix::Zero(n, n);
    for (std::size_t k = 0; k < model.size(); ++k) {
        const double lam = w[static_cast<Eigen::Index>(k)];
        const Vector d = model[k].mu() - mean;
        cov += lam * (model[k].sigma() + d * d.transpose());
    }
    return {std::move(mean), symmetrize(cov)};
}

struct LabeledSample {
    Matrix returns;
    std::vector<int> labels;
};

/// Draws `count` rows: pick component k with probability lambda_k, then N(mu_k, Sigma_k).
template <class Rng>
LabeledSample sample_returns_labeled(const MixtureModel& model, const MixtureWeights& w,
                                     Eigen::Index count, Rng& rng) {
    check_weights(model, w);
    require(count >= 1, "sample count must be >= 1");
    const auto n = model.n_assets();
    std::discrete_distribution<int> pick(w.full().data(), w.full().data() + w.full().size());
    std::normal_distribution<double> std_normal(0.0, 1.0);
    LabeledSample out{Matrix(count, n), std::vector<int>(static_cast<std::size_t>(count))};
    Vector z(n);
    for (Eigen::Index t = 0; t < count; ++t) {
        const int k = pick(rng);
        for (Eigen::Index i = 0; i < n; ++i) z[i] = std_normal(rng);
        const auto& c = model[static_cast<std::size_t>(k)];
        out.returns.row(t) = (c.mu() + c.cholesky_lower() * z).transpose();
        out.labels[static_cast<std::size_t>(t)] = k;
    }
    return out;
}

template <class Rng>
Matrix sample_returns(const MixtureModel& model, const MixtureWeights& w, Eigen::Index count, Rng& rng) {
    return sample_returns_labeled(model, w, count, rng).returns;
}

inline Matrix sample_returns(const MixtureModel& model, const MixtureWeights& w, Eigen::Index count,
                             std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sample_returns(model, w, count, rng);
}

// ---------------------------------------------------------------------------
// EM over the weights only
// ---------------------------------------------------------------------------

struct EmOptions {
    int max_iter = 500;
    double tol = 1e-8;           ///< stop when max |delta lambda| < tol
    double weight_floor = 1e-12; ///< boundary weights are clamped here
    double fisher_ridge = 1e-8;
};

struct EmFit {
    PriorSpec prior;
    MixtureWeights weights;
    bool converged = false;
    bool fisher_regularized = false;
    int iterations = 0;
    std::vector<double> log_likelihood;  ///< one entry per iterate, starting point first
};

/// Per-observation component log densities, T x m.
inline Matrix component_log_densities(const MixtureModel& model, const Matrix& data) {
    require_dims(data.cols() == model.n_assets(), "data columns must equal asset count");
    Matrix out(data.rows(), static_cast<Eigen::Index>(model.size()));
    for (Eigen::Index t = 0; t < data.rows(); ++t) {
        const Vector r = data.row(t).transpose();
        for (std::size_t k = 0; k < model.size(); ++k)
            out(t, static_cast<Eigen::Index>(k)) = model[k].log_density(r);
    }
    return out;
}

namespace detail {

/// Row-wise log sum_k lambda_k p_tk.
inline Vector mixture_row_log_likelihood(const Matrix& logp, const Vector& lambda) {
    Vector out(logp.rows());
    for (Eigen::Index t = 0; t < logp.rows(); ++t) {
        double hi = -std::numeric_limits<double>::infinity();
        for (Eigen::Index k = 0; k < logp.cols(); ++k)
            if (lambda[k] > 0.0) hi = std::max(hi, std::log(lambda[k]) + logp(t, k));
        double acc = 0.0;
        for (Eigen::Index k = 0; k < logp.cols(); ++k)
            if (lambda[k] > 0.0) acc += std::exp(std::log(lambda[k]) + logp(t, k) - hi);
        out[t] = hi + std::log(acc);
    }
    return out;
}

}  // namespace detail

inline double weights_log_likelihood(const Matrix& logp, const Vector& lambda) {
    return detail::mixture_row_log_likelihood(logp, lambda).sum();
}

/// One EM update of the weights: lambda_k <- mean_t responsibility_tk.
inline Vector em_step(const Matrix& logp, const Vector& lambda) {
    const Vector row_ll = detail::mixture_row_log_likelihood(logp, lambda);
    Vector next = Vector::Zero(lambda.size());
    for (Eigen::Index t = 0; t < logp.rows(); ++t)
        for (Eigen::Index k = 0; k < logp.cols(); ++k)
            if (lambda[k] > 0.0) next[k] += std::exp(std::log(lambda[k]) + logp(t, k) - row_ll[t]);
    return next / static_cast<double>(logp.rows());
}

/// Observed information of the reduced log-likelihood in lambda_minus.
inline Matrix reduced_observed_information(const Matrix& logp, const Vector& lambda) {
    const Eigen::Index m = logp.cols();
    const Vector row_ll = detail::mixture_row_log_likelihood(logp, lambda);
    Matrix info = Matrix::Zero(m - 1, m - 1);
    Vector d(m - 1);
    for (Eigen::Index t = 0; t < logp.rows(); ++t) {
        const double last = std::exp(logp(t, m - 1) - row_ll[t]);
        for (Eigen::Index j = 0; j + 1 < m; ++j) d[j] = std::exp(logp(t, j) - row_ll[t]) - last;
        info.noalias() += d * d.transpose();
    }
    return symmetrize(info);
}

/**
 * @brief Fits the mixture weights by EM with the components held fixed and
 *        builds the prior from the asymptotic covariance of the MLE.
 *
 * Phi is the inverse observed information of lambda_minus at the optimum; a
 * ridge of 1e-8 I is added to the information when it is singular.
 */
inline EmFit em_fit_weights(const MixtureModel& model, const Matrix& data, const EmOptions& opt = {}) {
    const auto m = static_cast<Eigen::Index>(model.size());
    require(m >= 2, "EM weight fit needs at least two components");
    require(data.rows() >= m, "EM needs at least as many observations as components");
    require(all_finite(data), "EM data must be finite");

    const Matrix logp = component_log_densities(model, data);
    Vector lambda = Vector::Constant(m, 1.0 / static_cast<double>(m));
    std::vector<double> trace{weights_log_likelihood(logp, lambda)};
    bool converged = false;
    int iter = 0;
    while (iter < opt.max_iter) {
        Vector next = em_step(logp, lambda).cwiseMax(opt.weight_floor);
        next /= next.sum();
        const double change = (next - lambda).cwiseAbs().maxCoeff();
        lambda = std::move(next);
        ++iter;
        trace.push_back(weights_log_likelihood(logp, lambda));
        if (change < opt.tol) {
            converged = true;
            break;
        }
    }

    Matrix info = reduced_observed_information(logp, lambda);
    bool regularized = false;
    Eigen::LLT<Matrix> llt(info);
    if (llt.info() != Eigen::Success || spd_condition(info) > 1e14) {
        info += opt.fisher_ridge * Matrix::Identity(m - 1, m - 1);
        regularized = true;
    }
    const Matrix phi = spd_inverse(info);
    const Vector lam_minus = project_onto_gamma(lambda.head(m - 1));

    return EmFit{PriorSpec(lam_minus, phi), MixtureWeights::from_reduced(lam_minus), converged,
                 regularized, iter, std::move(trace)};
}

}  // namespace mixest
