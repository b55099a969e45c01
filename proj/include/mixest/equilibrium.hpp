/**
 * @file equilibrium.hpp
 * @brief Three-investor market: informed and less-informed mean-variance
 *        investors plus a noise trader, the market-clearing portfolio, and
 *        the forward map g(lambda_minus) from mixture weights to the
 *        informed investor's holding.
 */

#pragma once

#include "mixest/core.hpp"
#include "mixest/gmm.hpp"

#include <boost/math/distributions/normal.hpp>

#include <array>
#include <random>
#include <utility>

namespace mixest {

/**
 * @brief Market parameters theta.
 *
 * sigma_noise holds the per-asset standard deviation of the noise trader's
 * position; the noise covariance is diag(sigma_noise^2).
 */
struct MarketParams {
    double alpha_I = 0.4;
    double alpha_U = 0.5;
    double alpha_N = 0.1;
    Vector sigma_noise;
    double delta_I = 2.5;
    double delta_U = 2.5;

    void validate() const {
        require(alpha_I > 0.0 && alpha_U > 0.0 && alpha_N > 0.0, "market shares must be strictly positive");
        require(std::abs(alpha_I + alpha_U + alpha_N - 1.0) <= 1e-12, "market shares must sum to one");
        require(sigma_noise.size() > 0, "noise intensities must be non-empty");
        require((sigma_noise.array() > 0.0).all() && all_finite(sigma_noise),
                "noise intensities must be positive and finite");
        require(delta_I > 0.0 && delta_U > 0.0, "risk aversion must be strictly positive");
    }

    /// Omega = alpha_N^2 diag(sigma^2), covariance of epsilon = alpha_N x_N.
    Matrix omega() const {
        return (alpha_N * alpha_N * sigma_noise.array().square()).matrix().asDiagonal();
    }

    MarketParams with_shares(double a_I, double a_U, double a_N) const {
        MarketParams p = *this;
        p.alpha_I = a_I;
        p.alpha_U = a_U;
        p.alpha_N = a_N;
        return p;
    }
};

struct InvestorHolding {
    Vector weights;
};

struct EquilibriumObservation {
    Vector x_M;
    Vector x_U_star;
    MarketParams params;

    void validate() const {
        params.validate();
        require_dims(x_M.size() == x_U_star.size() && x_M.size() == params.sigma_noise.size(),
                     "observation vectors and noise intensities must share the asset dimension");
        require(all_finite(x_M) && all_finite(x_U_star), "observation must be finite");
    }
};

struct WealthState {
    double w_I = 1.0;
    double w_U = 1.0;
    double w_N = 1.0;

    double total() const { return w_I + w_U + w_N; }
    /// (alpha_I, alpha_U, alpha_N) as wealth fractions.
    std::array<double, 3> shares() const {
        const double w = total();
        return {w_I / w, w_U / w, w_N / w};
    }
};

/// (delta Sigma)^{-1} mu.
inline InvestorHolding mv_unconstrained(const Vector& mu, const Matrix& sigma, double delta) {
    require(delta > 0.0, "risk aversion must be positive");
    require_dims(sigma.rows() == mu.size() && sigma.cols() == mu.size(), "mean/covariance size mismatch");
    Eigen::LLT<Matrix> llt(sigma);
    if (llt.info() != Eigen::Success) throw NumericalError("covariance is singular or indefinite");
    return {llt.solve(mu) / delta};
}

// ---------------------------------------------------------------------------
// Forward map g(lambda_minus) = (1/delta_I) Sigma(lambda)^{-1} mu(lambda)
// ---------------------------------------------------------------------------

struct ForwardMap {
    Vector value;       ///< g, length n
    Matrix jacobian;    ///< dg/dlambda_minus, n x (m-1); empty unless requested
    bool ridge_applied = false;
};

/// Condition-number threshold above which a ridge is added inside g.
inline constexpr double kForwardConditionLimit = 1e12;

/**
 * @brief Evaluates g and optionally its Jacobian in the reduced weights.
 *
 * When `fixed_covariance` is given, Sigma(lambda) is replaced by that matrix
 * (the known-covariance special case), so g is affine in lambda_minus.
 */
inline ForwardMap g_forward_full(const MixtureModel& model, const Vector& lambda_minus, double delta_I,
                                 bool want_jacobian, const Matrix* fixed_covariance = nullptr) {
    require(delta_I > 0.0, "delta_I must be positive");
    const auto m = static_cast<Eigen::Index>(model.size());
    require_dims(lambda_minus.size() == m - 1, "lambda_minus must have m-1 entries");
    const auto n = model.n_assets();

    Vector lam(m);
    lam.head(m - 1) = lambda_minus;
    lam[m - 1] = 1.0 - lambda_minus.sum();

    Vector mu = Vector::Zero(n);
    for (Eigen::Index k = 0; k < m; ++k) mu += lam[k] * model[static_cast<std::size_t>(k)].mu();

    Matrix sigma;
    if (fixed_covariance) {
        require_dims(fixed_covariance->rows() == n && fixed_covariance->cols() == n,
                     "fixed covariance must be n x n");
        sigma = *fixed_covariance;
    } else {
        sigma = Matrix::Zero(n, n);
        for (Eigen::Index k = 0; k < m; ++k) {
            const auto& c = model[static_cast<std::size_t>(k)];
            const Vector d = c.mu() - mu;
            sigma += lam[k] * (c.sigma() + d * d.transpose());
        }
        sigma = symmetrize(sigma);
    }

    ForwardMap out;
    if (spd_condition(sigma) > kForwardConditionLimit) {
        sigma += 1e-10 * sigma.trace() / static_cast<double>(n) * Matrix::Identity(n, n);
        out.ridge_applied = true;
    }
    Eigen::LLT<Matrix> llt(sigma);
    if (llt.info() != Eigen::Success) throw NumericalError("mixture covariance is singular");
    const Vector s = llt.solve(mu);  // Sigma^{-1} mu
    out.value = s / delta_I;

    if (want_jacobian) {
        out.jacobian.resize(n, m - 1);
        const auto& last = model[static_cast<std::size_t>(m - 1)];
        // Second moments applied to s: (Sigma_k + mu_k mu_k') s.
        const auto second_times_s = [&s](const GaussianComponent& c) -> Vector {
            return c.sigma() * s + c.mu() * c.mu().dot(s);
        };
        const Vector last_second_s = fixed_covariance ? Vector() : second_times_s(last);
        const double mu_s = mu.dot(s);
        for (Eigen::Index j = 0; j + 1 < m; ++j) {
            const auto& c = model[static_cast<std::size_t>(j)];
            const Vector dmu = c.mu() - last.mu();
            Vector rhs = dmu;
            if (!fixed_covariance) {
                // Sigma = sum_k lam_k (Sigma_k + mu_k mu_k') - mu mu'
                rhs -= second_times_s(c) - last_second_s - dmu * mu_s - mu * dmu.dot(s);
            }
            out.jacobian.col(j) = llt.solve(rhs) / delta_I;
        }
    }
    return out;
}

inline Vector g_forward(const MixtureModel& model, const MixtureWeights& w, double delta_I) {
    check_weights(model, w);
    return g_forward_full(model, w.reduced(), delta_I, false).value;
}

// ---------------------------------------------------------------------------
// Noise trader, clearing, wealth
// ---------------------------------------------------------------------------

template <class Rng>
InvestorHolding sample_noise(const MarketParams& params, Rng& rng) {
    std::normal_distribution<double> std_normal(0.0, 1.0);
    Vector x(params.sigma_noise.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = params.sigma_noise[i] * std_normal(rng);
    return {std::move(x)};
}

inline InvestorHolding sample_noise(const MarketParams& params, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sample_noise(params, rng);
}

/// x_M = alpha_U x_U + alpha_I x_I + alpha_N x_N.
inline EquilibriumObservation clear_market(const InvestorHolding& x_U, const InvestorHolding& x_I,
                                           const InvestorHolding& x_N, const MarketParams& params) {
    require_dims(x_U.weights.size() == x_I.weights.size() && x_I.weights.size() == x_N.weights.size(),
                 "holdings must share the asset dimension");
    Vector x_M = params.alpha_U * x_U.weights + params.alpha_I * x_I.weights + params.alpha_N * x_N.weights;
    return {std::move(x_M), x_U.weights, params};
}

/// Noise standard deviation whose `confidence` central interval is [-h, h].
inline double noise_sigma_from_ci(double half_width, double confidence) {
    require(half_width > 0.0, "half width must be positive");
    require(confidence > 0.0 && confidence < 1.0, "confidence must lie in (0, 1)");
    const boost::math::normal_distribution<double> std_normal(0.0, 1.0);
    return half_width / boost::math::quantile(std_normal, 0.5 * (1.0 + confidence));
}

struct WealthUpdate {
    WealthState state;
    bool clamped = false;
};

/**
 * @brief One-period self-financing wealth update.
 *
 * Each investor's wealth grows by 1 + r_f + x'r_excess; the cash leg
 * 1 - 1'x earns r_f. Non-positive wealth is clamped to 1e-12 of the total.
 */
inline WealthUpdate update_wealth(const WealthState& state, const InvestorHolding& x_I,
                                  const InvestorHolding& x_U, const InvestorHolding& x_N,
                                  const Vector& r_excess, double r_f) {
    require(all_finite(r_excess) && std::isfinite(r_f), "returns must be finite");
    require_dims(x_I.weights.size() == r_excess.size() && x_U.weights.size() == r_excess.size() &&
                     x_N.weights.size() == r_excess.size(),
                 "holding/return dimension mismatch");
    std::array<double, 3> w{state.w_I * (1.0 + r_f + x_I.weights.dot(r_excess)),
                            state.w_U * (1.0 + r_f + x_U.weights.dot(r_excess)),
                            state.w_N * (1.0 + r_f + x_N.weights.dot(r_excess))};
    double positive_total = 0.0;
    for (double v : w) positive_total += std::max(v, 0.0);
    if (positive_total <= 0.0) positive_total = state.total();
    const double floor = 1e-12 * positive_total;
    WealthUpdate out;
    for (double& v : w) {
        if (!(v > floor)) {
            v = floor;
            out.clamped = true;
        }
    }
    out.state = {w[0], w[1], w[2]};
    return out;
}

}  // namespace mixest
