// Out-of-sample backtest: rolling estimation with a market-implied fourth
// component, volatility-scaled risk aversion, long-only mean-variance
// portfolios and SR / TRN / MDD under proportional costs.
#pragma once

#include "mixest/estimator.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace mixest {

/**
 * @brief Weekly market data.
 *
 * excess_returns are decimal weekly returns in excess of the risk-free
 * rate; r_f is the annualized decimal risk-free rate of each week.
 */
struct MarketDataset {
    std::vector<std::string> dates;
    std::vector<std::string> asset_names;
    Matrix excess_returns;  ///< T x n
    Matrix market_caps;     ///< T x n
    Vector vol_index;       ///< T
    Vector r_f;             ///< T, annualized
    int weeks_per_year = 52;

    Eigen::Index periods() const { return excess_returns.rows(); }
    Eigen::Index n_assets() const { return excess_returns.cols(); }

    void validate() const {
        const auto t = periods();
        require(t >= 2 && n_assets() >= 1, "dataset needs at least two weeks and one asset");
        require_dims(static_cast<Eigen::Index>(dates.size()) == t, "one date per week required");
        require_dims(asset_names.empty() || static_cast<Eigen::Index>(asset_names.size()) == n_assets(),
                     "one name per asset required");
        require_dims(market_caps.rows() == t && market_caps.cols() == n_assets(), "market caps must be T x n");
        require_dims(vol_index.size() == t && r_f.size() == t, "vol index and risk-free rate must have T entries");
        require(all_finite(excess_returns) && all_finite(market_caps) && all_finite(r_f),
                "dataset contains non-finite values");
        require((vol_index.array() > 0.0).all() && all_finite(vol_index), "volatility index must be positive");
        require((market_caps.array() >= 0.0).all(), "market caps must be non-negative");
        require((excess_returns.array() > -1.0).all(), "weekly returns must exceed -100%");
        for (std::size_t i = 1; i < dates.size(); ++i)
            require(dates[i - 1] < dates[i], "dates must be strictly increasing");
        require(weeks_per_year >= 1, "weeks_per_year must be positive");
    }

    /// Weekly risk-free return of week t.
    double r_f_weekly(Eigen::Index t) const { return r_f[t] / weeks_per_year; }
};

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

/**
 * @brief delta0 * VIX_t / mean(VIX over the trailing `window` weeks ending at t).
 *
 * Entries before the first full window are NaN.
 */
inline Vector risk_aversion_path(const Vector& vol_index, double delta0, int window = 100) {
    require(window >= 1, "window must be >= 1");
    require(delta0 > 0.0, "delta0 must be positive");
    require((vol_index.array() > 0.0).all() && all_finite(vol_index), "volatility index must be positive");
    Vector out = Vector::Constant(vol_index.size(), std::numeric_limits<double>::quiet_NaN());
    double sum = 0.0;
    for (Eigen::Index t = 0; t < vol_index.size(); ++t) {
        sum += vol_index[t];
        if (t >= window) sum -= vol_index[t - window];
        if (t + 1 >= window) out[t] = delta0 * vol_index[t] / (sum / window);
    }
    return out;
}

/// Market-implied component N(delta Sigma x_M, Sigma).
inline GaussianComponent build_bl_component(const Matrix& cov_hat, const Vector& x_M, double delta) {
    require_dims(cov_hat.rows() == x_M.size() && cov_hat.cols() == x_M.size(), "covariance/market size mismatch");
    require(delta > 0.0 && std::isfinite(delta), "risk aversion must be positive");
    return GaussianComponent(delta * cov_hat * x_M, cov_hat);
}

struct LongOnlyPortfolio {
    Vector weights;
    double kkt_residual = 0.0;
    bool converged = false;
};

/// argmax x'mu - (delta/2) x'Sigma x over the unit simplex.
inline LongOnlyPortfolio mv_long_only(const Vector& mu, const Matrix& sigma, double delta) {
    const auto n = mu.size();
    require(n >= 1, "need at least one asset");
    require_dims(sigma.rows() == n && sigma.cols() == n, "mean/covariance size mismatch");
    require(delta > 0.0 && std::isfinite(delta), "risk aversion must be positive");
    require_spd(sigma, "covariance", 0.0);
    QuadraticProgram qp{delta * sigma, -mu, Matrix::Ones(1, n), Vector::Ones(1), -Matrix::Identity(n, n),
                        Vector::Zero(n)};
    const QpSolution sol = solve_qp(qp, Vector::Constant(n, 1.0 / static_cast<double>(n)));
    Vector x = sol.x.cwiseMax(0.0);
    x /= x.sum();
    const double scale = std::max(1.0, std::max(qp.H.cwiseAbs().maxCoeff(), mu.cwiseAbs().maxCoeff()));
    return {std::move(x), qp_stationarity_residual(qp, sol) / scale, sol.converged};
}

/// x' mu - (delta/2) x' Sigma x.
inline double mv_utility(const Vector& x, const Vector& mu, const Matrix& sigma, double delta) {
    return x.dot(mu) - 0.5 * delta * quad_form(sigma, x);
}

// ---------------------------------------------------------------------------
// Regime calibration
// ---------------------------------------------------------------------------

enum class Regime { bull = 0, oscillating = 1, bear = 2 };

struct RegimeRules {
    double bull_rise = 0.9;    ///< a swing rising more than this is bull
    double bear_fall = 0.5;    ///< a swing falling more than this is bear
    double swing_reversal = 0.2;  ///< reversal that ends a swing
};

/// Pivot indices of a zig-zag filter over index levels (first and last index included).
inline std::vector<Eigen::Index> swing_pivots(const Vector& levels, double reversal) {
    require(levels.size() >= 2, "need at least two index levels");
    require((levels.array() > 0.0).all(), "index levels must be positive");
    require(reversal > 0.0, "swing reversal must be positive");
    std::vector<Eigen::Index> pivots{0};
    int direction = 0;  // +1 rising, -1 falling, 0 not yet known
    Eigen::Index hi = 0, lo = 0;
    for (Eigen::Index t = 1; t < levels.size(); ++t) {
        const double v = levels[t];
        if (direction == 0) {
            if (v > levels[hi]) hi = t;
            if (v < levels[lo]) lo = t;
            if (v >= levels[lo] * (1.0 + reversal)) {
                if (lo > 0) pivots.push_back(lo);
                direction = 1;
                hi = t;
            } else if (v <= levels[hi] * (1.0 - reversal)) {
                if (hi > 0) pivots.push_back(hi);
                direction = -1;
                lo = t;
            }
        } else if (direction > 0) {
            if (v > levels[hi]) {
                hi = t;
            } else if (v <= levels[hi] * (1.0 - reversal)) {
                pivots.push_back(hi);
                direction = -1;
                lo = t;
            }
        } else {
            if (v < levels[lo]) {
                lo = t;
            } else if (v >= levels[lo] * (1.0 + reversal)) {
                pivots.push_back(lo);
                direction = 1;
                hi = t;
            }
        }
    }
    const Eigen::Index last_extreme = direction > 0 ? hi : direction < 0 ? lo : pivots.back();
    if (last_extreme > pivots.back()) pivots.push_back(last_extreme);
    if (pivots.back() != levels.size() - 1) pivots.push_back(levels.size() - 1);
    return pivots;
}

/**
 * @brief Labels each return by the swing it belongs to.
 *
 * levels has T+1 entries (level before the first return first); return t
 * moves the index from level t to level t+1.
 */
inline std::vector<Regime> label_regimes(const Vector& levels, const RegimeRules& rules = {}) {
    const auto pivots = swing_pivots(levels, rules.swing_reversal);
    std::vector<Regime> labels(static_cast<std::size_t>(levels.size() - 1), Regime::oscillating);
    for (std::size_t p = 0; p + 1 < pivots.size(); ++p) {
        const double change = levels[pivots[p + 1]] / levels[pivots[p]] - 1.0;
        Regime r = Regime::oscillating;
        if (change > rules.bull_rise) r = Regime::bull;
        if (change < -rules.bear_fall) r = Regime::bear;
        for (Eigen::Index t = pivots[p]; t < pivots[p + 1]; ++t) labels[static_cast<std::size_t>(t)] = r;
    }
    return labels;
}

struct StateCalibration {
    std::vector<GaussianComponent> components;  ///< bull, oscillating, bear
    std::vector<Regime> labels;
    std::array<int, 3> counts{};
    std::array<bool, 3> shrunk{};
};

/// Cumulative index levels from cap-weighted returns (caps of the previous week weight week t).
inline Vector cap_weighted_levels(const Matrix& returns, const Matrix& caps) {
    require_dims(returns.rows() == caps.rows() && returns.cols() == caps.cols(), "returns and caps must align");
    Vector levels(returns.rows() + 1);
    levels[0] = 1.0;
    for (Eigen::Index t = 0; t < returns.rows(); ++t) {
        const Eigen::Index ct = t > 0 ? t - 1 : 0;
        const double total = caps.row(ct).sum();
        require(total > 0.0, "market caps must have a positive total");
        const double r = caps.row(ct).dot(returns.row(t)) / total;
        levels[t + 1] = levels[t] * (1.0 + r);
    }
    return levels;
}

/**
 * @brief Per-regime sample moments of excess returns.
 *
 * A regime with fewer than n+2 observations gets its covariance shrunk
 * towards the diagonal (pooled variances if it has fewer than two).
 */
inline StateCalibration calibrate_state_components(const Matrix& excess_returns, const Vector& levels,
                                                   const RegimeRules& rules = {}) {
    const auto t_count = excess_returns.rows();
    const auto n = excess_returns.cols();
    require_dims(levels.size() == t_count + 1, "levels need one more entry than returns");
    StateCalibration cal;
    cal.labels = label_regimes(levels, rules);
    std::array<std::vector<Eigen::Index>, 3> rows;
    for (Eigen::Index t = 0; t < t_count; ++t) rows[static_cast<std::size_t>(cal.labels[static_cast<std::size_t>(t)])].push_back(t);
    for (std::size_t r = 0; r < 3; ++r) {
        cal.counts[r] = static_cast<int>(rows[r].size());
        if (rows[r].empty())
            throw std::invalid_argument("history spans fewer than three regimes; supply a longer calibration span");
    }
    const Vector pooled_var =
        t_count >= 2 ? Vector(sample_covariance(excess_returns).diagonal()) : Vector::Constant(n, 1e-4);

    for (std::size_t r = 0; r < 3; ++r) {
        Matrix data(static_cast<Eigen::Index>(rows[r].size()), n);
        for (std::size_t i = 0; i < rows[r].size(); ++i) data.row(static_cast<Eigen::Index>(i)) = excess_returns.row(rows[r][i]);
        const Vector mean = data.colwise().mean().transpose();
        const auto count = data.rows();
        Matrix cov;
        if (count >= n + 2) {
            cov = sample_covariance(data);
        } else {
            cal.shrunk[r] = true;
            const Matrix sample = count >= 2 ? sample_covariance(data) : Matrix(Matrix::Zero(n, n));
            const Vector target = count >= 2 ? Vector(sample.diagonal().cwiseMax(1e-12)) : pooled_var;
            const double weight = std::clamp(1.0 - static_cast<double>(count) / static_cast<double>(n + 2), 0.5, 1.0);
            cov = (1.0 - weight) * sample;
            cov.diagonal() += weight * target;
        }
        cov = symmetrize(cov);
        if (smallest_eigenvalue(cov) <= kPdFloor) {
            cov.diagonal().array() += 2.0 * kPdFloor + 1e-8 * cov.diagonal().mean();
            cal.shrunk[r] = true;
        }
        cal.components.emplace_back(mean, cov);
    }
    return cal;
}

// ---------------------------------------------------------------------------
// Performance metrics
// ---------------------------------------------------------------------------

/**
 * @brief Gross period returns Sum_i r_i x_i (1 - c Sum_i |x_t - x_{t-1}|).
 *
 * weights: periods x n target weights; gross: periods x n gross asset
 * returns over each period. The first allocation is free of cost.
 */
inline Vector portfolio_period_returns(const Matrix& weights, const Matrix& gross, double cost) {
    require_dims(weights.rows() == gross.rows() && weights.cols() == gross.cols(), "weights and returns must align");
    require(cost >= 0.0 && cost < 1.0, "cost ratio must lie in [0, 1)");
    Vector r(weights.rows());
    for (Eigen::Index t = 0; t < weights.rows(); ++t) {
        const double traded = t > 0 ? (weights.row(t) - weights.row(t - 1)).cwiseAbs().sum() : 0.0;
        r[t] = gross.row(t).dot(weights.row(t)) * (1.0 - cost * traded);
    }
    return r;
}

/// w_0 = 1, w_t = r_t w_{t-1}.
inline Vector wealth_path(const Vector& gross_returns) {
    Vector w(gross_returns.size() + 1);
    w[0] = 1.0;
    for (Eigen::Index t = 0; t < gross_returns.size(); ++t) w[t + 1] = w[t] * gross_returns[t];
    return w;
}

/// max over i < j of 1 - w_j / w_i.
inline double max_drawdown(const Vector& wealth) {
    require(wealth.size() >= 1, "wealth path is empty");
    require((wealth.array() > 0.0).all(), "wealth must stay positive");
    double peak = wealth[0], mdd = 0.0;
    for (Eigen::Index t = 1; t < wealth.size(); ++t) {
        peak = std::max(peak, wealth[t - 1]);
        mdd = std::max(mdd, 1.0 - wealth[t] / peak);
    }
    return mdd;
}

/// Buy-and-hold weights at the end of a period.
inline Vector drifted_weights(const Vector& x, const Vector& gross) {
    const Vector v = x.cwiseProduct(gross);
    const double s = v.sum();
    require(s > 0.0, "portfolio value must stay positive");
    return v / s;
}

/// (1/(T-1)) Sum_t Sum_i |x_{i,t+1} - x_{i,t+}|.
inline double turnover(const Matrix& weights, const Matrix& gross) {
    require_dims(weights.rows() == gross.rows() && weights.cols() == gross.cols(), "weights and returns must align");
    require(weights.rows() >= 2, "turnover needs at least two periods");
    double total = 0.0;
    for (Eigen::Index t = 0; t + 1 < weights.rows(); ++t)
        total += (weights.row(t + 1).transpose() - drifted_weights(weights.row(t).transpose(), gross.row(t).transpose()))
                     .cwiseAbs()
                     .sum();
    return total / static_cast<double>(weights.rows() - 1);
}

/**
 * @brief Annualized Sharpe ratio of per-period excess returns.
 *
 * `excess` holds net period returns minus the risk-free return of the
 * period; the ratio scales mean and variance by 250 / days_per_period.
 * Empty when the variance is zero.
 */
inline std::optional<double> sharpe_ratio(const Vector& excess, double days_per_period) {
    require(excess.size() >= 2, "Sharpe ratio needs at least two periods");
    require(days_per_period > 0.0, "period length must be positive");
    const double k = 250.0 / days_per_period;
    const double mean = excess.mean();
    const double var = (excess.array() - mean).square().sum() / static_cast<double>(excess.size() - 1);
    if (!(var > 0.0)) return std::nullopt;
    return k * mean / std::sqrt(k * var);
}

struct PerfMetrics {
    std::optional<double> sr;
    double trn = 0.0;
    double mdd = 0.0;
};

/// rf_period: risk-free return of each period (decimal).
inline PerfMetrics perf_metrics(const Matrix& weights, const Matrix& gross, const Vector& rf_period, double cost,
                                double days_per_period) {
    require_dims(rf_period.size() == weights.rows(), "one risk-free return per period required");
    const Vector r = portfolio_period_returns(weights, gross, cost);
    const Vector excess = (r.array() - 1.0 - rf_period.array()).matrix();
    return {sharpe_ratio(excess, days_per_period), turnover(weights, gross), max_drawdown(wealth_path(r))};
}

// ---------------------------------------------------------------------------
// Backtest driver
// ---------------------------------------------------------------------------

struct BacktestConfig {
    int window_weeks = 100;
    int rebalance_weeks = 4;
    double days_per_period = 21.0;  ///< trading days per rebalance period, for SR annualization
    double delta0 = 2.5;
    double delta_U = 2.5;
    double risk_multiplier = 1.0;
    double cost_ratio = 0.005;
    double alpha_I = 0.4;
    double alpha_N = 0.1;
    double noise_ci_half_width = 1.0;  ///< 95% interval of each noise position is [-h, h]
    int calibration_weeks = 0;         ///< calibration span; 0 means the first window
    RegimeRules regimes;
    SolverOptions solver;
    EmOptions em;

    void validate(Eigen::Index total_weeks) const {
        require(window_weeks >= 2, "window must be at least two weeks");
        require(rebalance_weeks >= 1, "rebalance period must be at least one week");
        require(days_per_period > 0.0, "period length must be positive");
        require(delta0 > 0.0 && delta_U > 0.0 && risk_multiplier > 0.0, "risk aversion must be positive");
        require(cost_ratio >= 0.0 && cost_ratio < 1.0, "cost ratio must lie in [0, 1)");
        require(alpha_I > 0.0 && alpha_N > 0.0 && alpha_I + alpha_N < 1.0, "market shares must be positive");
        require(noise_ci_half_width > 0.0, "noise interval must be positive");
        require(calibration_weeks >= 0, "calibration span must be non-negative");
        require(first_rebalance() + 2 <= total_weeks, "dataset too short for the window and at least two periods");
    }

    int calibration_end() const { return calibration_weeks > 0 ? calibration_weeks : window_weeks; }
    int first_rebalance() const { return std::max(calibration_end(), window_weeks); }

    /// Trading days per rebalance period for the usual monthly, quarterly and half-yearly windows.
    static double default_days_per_period(int rebalance_weeks) {
        switch (rebalance_weeks) {
            case 4: return 21.0;
            case 13: return 63.0;
            case 26: return 126.0;
            default: return 5.0 * rebalance_weeks;
        }
    }
};

struct StrategyResult {
    EstimationMode mode = EstimationMode::combined;
    Matrix weights;          ///< periods x n target weights
    Matrix lambdas;          ///< periods x 4 estimated weights
    Vector period_returns;   ///< gross
    Vector wealth;           ///< periods + 1
    PerfMetrics metrics;
    int failures = 0;        ///< periods where previous weights were carried
    int not_converged = 0;
};

struct BacktestReport {
    std::vector<int> rebalance_rows;    ///< first week of each period
    std::vector<std::string> rebalance_dates;
    Vector risk_aversion;               ///< delta_I used at each rebalance
    Matrix gross_returns;               ///< periods x n
    Vector rf_period;
    std::array<StrategyResult, 3> strategies;  ///< backward, combined, forward
    StateCalibration calibration;
};

/**
 * @brief Rolling out-of-sample backtest of the three strategies.
 *
 * At each rebalance week t: the covariance, the EM prior and the market
 * component use weeks [t - window, t); x_M is the cap weights of week t-1;
 * delta_I is the volatility-scaled coefficient at t-1. Weights are held
 * buy-and-hold until the next rebalance.
 */
inline BacktestReport run_backtest(const MarketDataset& data, const BacktestConfig& cfg) {
    data.validate();
    cfg.validate(data.periods());
    const auto n = data.n_assets();
    const auto total = data.periods();

    Matrix total_returns = data.excess_returns;
    for (Eigen::Index t = 0; t < total; ++t) total_returns.row(t).array() += data.r_f_weekly(t);

    BacktestReport rep;
    const int cal_end = cfg.calibration_end();
    rep.calibration = calibrate_state_components(
        data.excess_returns.topRows(cal_end),
        cap_weighted_levels(total_returns.topRows(cal_end), data.market_caps.topRows(cal_end)), cfg.regimes);
    const Vector deltas = risk_aversion_path(data.vol_index, cfg.delta0, cfg.window_weeks);

    for (int t = cfg.first_rebalance(); t < total; t += cfg.rebalance_weeks) rep.rebalance_rows.push_back(t);
    const auto periods = static_cast<Eigen::Index>(rep.rebalance_rows.size());
    rep.gross_returns = Matrix::Ones(periods, n);
    rep.rf_period = Vector::Zero(periods);
    rep.risk_aversion = Vector(periods);
    for (Eigen::Index p = 0; p < periods; ++p) {
        const int start = rep.rebalance_rows[static_cast<std::size_t>(p)];
        const int end = std::min<int>(start + cfg.rebalance_weeks, static_cast<int>(total));
        double rf_growth = 1.0;
        for (int w = start; w < end; ++w) {
            rep.gross_returns.row(p).array() *= 1.0 + total_returns.row(w).array();
            rf_growth *= 1.0 + data.r_f_weekly(w);
        }
        rep.rf_period[p] = rf_growth - 1.0;
        rep.rebalance_dates.push_back(data.dates[static_cast<std::size_t>(start)]);
    }

    MarketParams params;
    params.alpha_I = cfg.alpha_I;
    params.alpha_N = cfg.alpha_N;
    params.alpha_U = 1.0 - cfg.alpha_I - cfg.alpha_N;
    params.delta_U = cfg.delta_U;
    params.sigma_noise = Vector::Constant(n, noise_sigma_from_ci(cfg.noise_ci_half_width, 0.95));

    for (std::size_t e = 0; e < 3; ++e) {
        auto& s = rep.strategies[e];
        s.mode = kAllModes[e];
        s.weights = Matrix(periods, n);
        s.lambdas = Matrix::Constant(periods, 4, std::numeric_limits<double>::quiet_NaN());
    }

    for (Eigen::Index p = 0; p < periods; ++p) {
        const int t = rep.rebalance_rows[static_cast<std::size_t>(p)];
        const double delta_t = deltas[t - 1];
        rep.risk_aversion[p] = delta_t;
        const Matrix window = data.excess_returns.middleRows(t - cfg.window_weeks, cfg.window_weeks);
        Vector x_M = data.market_caps.row(t - 1).transpose();
        const double cap_total = x_M.sum();

        std::optional<EstimationProblem> problem;
        std::string failure;
        try {
            require(cap_total > 0.0, "market caps sum to zero");
            x_M /= cap_total;
            Matrix cov_hat = sample_covariance(window);
            if (smallest_eigenvalue(cov_hat) <= kPdFloor) cov_hat.diagonal().array() += 1e-8 * cov_hat.diagonal().mean() + 2.0 * kPdFloor;
            std::vector<GaussianComponent> comps = rep.calibration.components;
            comps.push_back(build_bl_component(cov_hat, x_M, delta_t));
            MixtureModel model(std::move(comps));
            const EmFit fit = em_fit_weights(model, window, cfg.em);
            const Moments mom_U = mixture_moments(model, fit.weights);
            MarketParams pt = params;
            pt.delta_I = delta_t;
            const InvestorHolding x_U = mv_unconstrained(mom_U.mean, mom_U.cov, pt.delta_U);
            problem.emplace(EstimationProblem{std::move(model), fit.prior, EquilibriumObservation{x_M, x_U.weights, pt},
                                              EstimationMode::combined, std::nullopt});
        } catch (const std::exception& ex) {
            failure = ex.what();
        }

        for (std::size_t e = 0; e < 3; ++e) {
            auto& s = rep.strategies[e];
            bool ok = false;
            if (problem) {
                try {
                    const auto r = solve(*problem, s.mode, cfg.solver);
                    if (!r.converged) ++s.not_converged;
                    const Moments mom = estimate_moments(problem->model, r);
                    const auto port = mv_long_only(mom.mean, mom.cov, cfg.risk_multiplier * delta_t);
                    s.weights.row(p) = port.weights.transpose();
                    s.lambdas.row(p) = r.lambda.transpose();
                    ok = true;
                } catch (const std::exception&) {
                }
            }
            if (!ok) {
                ++s.failures;
                if (p > 0)
                    s.weights.row(p) = s.weights.row(p - 1);
                else
                    s.weights.row(p).setConstant(1.0 / static_cast<double>(n));
            }
        }
    }

    for (auto& s : rep.strategies) {
        s.period_returns = portfolio_period_returns(s.weights, rep.gross_returns, cfg.cost_ratio);
        s.wealth = wealth_path(s.period_returns);
        s.metrics = perf_metrics(s.weights, rep.gross_returns, rep.rf_period, cfg.cost_ratio, cfg.days_per_period);
    }
    return rep;
}

}  // namespace mixest
