#include "mixest/backtest.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace mixest;

namespace {

/// Index levels with a planted bull leg, a bear leg and a flat wobble.
Vector planted_levels(int bull, int bear, int osc) {
    Vector lv(bull + bear + osc + 1);
    lv[0] = 1.0;
    int t = 0;
    for (int i = 0; i < bull; ++i, ++t) lv[t + 1] = lv[t] * std::pow(2.2, 1.0 / bull);
    for (int i = 0; i < bear; ++i, ++t) lv[t + 1] = lv[t] * std::pow(0.35, 1.0 / bear);
    for (int i = 0; i < osc; ++i, ++t) lv[t + 1] = lv[t] * (i % 2 == 0 ? 1.04 : 1.0 / 1.04);
    return lv;
}

/// Weekly dataset whose cap-weighted index follows planted regimes.
MarketDataset synthetic_dataset(int weeks, std::uint64_t seed) {
    const Eigen::Index n = 3;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z(0.0, 1.0);
    MarketDataset d;
    d.excess_returns.resize(weeks, n);
    d.market_caps.resize(weeks, n);
    d.vol_index.resize(weeks);
    d.r_f = Vector::Constant(weeks, 0.02);
    Vector caps(n);
    caps << 3.0, 2.0, 1.0;
    const Vector beta = (Vector(n) << 0.8, 1.0, 1.2).finished();
    for (int t = 0; t < weeks; ++t) {
        double drift = 0.0;
        if (t < 50) drift = 0.02;
        else if (t < 100) drift = -0.025;
        else drift = 0.015 * std::sin(t / 4.0);
        const double mkt = drift + 0.01 * z(rng);
        for (Eigen::Index i = 0; i < n; ++i) d.excess_returns(t, i) = beta[i] * mkt + 0.01 * z(rng);
        caps = caps.cwiseProduct((Vector::Ones(n) + d.excess_returns.row(t).transpose()));
        d.market_caps.row(t) = caps.transpose();
        d.vol_index[t] = 20.0 + 200.0 * std::abs(mkt);
        char buf[16];
        std::snprintf(buf, sizeof buf, "w%04d", t);
        d.dates.emplace_back(buf);
    }
    d.asset_names = {"A", "B", "C"};
    return d;
}

BacktestConfig small_config(int rebalance) {
    BacktestConfig c;
    c.window_weeks = 40;
    c.calibration_weeks = 150;
    c.rebalance_weeks = rebalance;
    c.days_per_period = BacktestConfig::default_days_per_period(rebalance);
    c.regimes = {0.5, 0.4, 0.2};
    return c;
}

}  // namespace

TEST(RiskAversion, ConstantIndexGivesBaseline) {
    const Vector d = risk_aversion_path(Vector::Constant(10, 17.0), 2.5, 4);
    for (int t = 0; t < 3; ++t) EXPECT_TRUE(std::isnan(d[t]));
    for (int t = 3; t < 10; ++t) EXPECT_DOUBLE_EQ(d[t], 2.5);
}

TEST(RiskAversion, DoubleTrailingMeanDoublesDelta) {
    // 3 / mean(1,1,1,3) = 2
    const Vector v = (Vector(4) << 1.0, 1.0, 1.0, 3.0).finished();
    EXPECT_DOUBLE_EQ(risk_aversion_path(v, 2.5, 4)[3], 5.0);
}

TEST(RiskAversion, RejectsNonPositiveIndex) {
    EXPECT_THROW(risk_aversion_path(Vector::Zero(5), 2.5, 2), std::invalid_argument);
}

TEST(MarketComponent, ImpliedMean) {
    const Vector x = (Vector(2) << 0.5, 0.5).finished();
    const auto c = build_bl_component(Matrix::Identity(2, 2), x, 2.0);
    EXPECT_TRUE(c.mu().isApprox(Vector::Ones(2)));
    EXPECT_TRUE(build_bl_component(Matrix::Identity(2, 2), Vector::Zero(2), 2.0).mu().isZero());
    const auto c3 = build_bl_component(Matrix::Identity(2, 2), x, 6.0);
    EXPECT_TRUE(c3.mu().isApprox(3.0 * c.mu()));
}

TEST(MarketComponent, SingularCovarianceThrows) {
    EXPECT_THROW(build_bl_component(Matrix::Zero(2, 2), Vector::Ones(2), 1.0), std::invalid_argument);
}

TEST(LongOnly, SymmetricInstanceSplitsEvenly) {
    const auto p = mv_long_only(Vector::Constant(2, 0.1), Matrix::Identity(2, 2), 3.0);
    EXPECT_NEAR(p.weights[0], 0.5, 1e-12);
    EXPECT_NEAR(p.weights[1], 0.5, 1e-12);
    EXPECT_LT(p.kkt_residual, 1e-8);
}

TEST(LongOnly, StrongFirstAssetGivesCorner) {
    const auto p = mv_long_only((Vector(2) << 1.0, 0.0).finished(), Matrix::Identity(2, 2), 0.1);
    EXPECT_NEAR(p.weights[0], 1.0, 1e-12);
    EXPECT_NEAR(p.weights[1], 0.0, 1e-12);
}

TEST(LongOnly, MatchesSimplexGrid) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> z(0.0, 1.0);
    const int n = 5;
    Matrix a(n, n);
    for (auto& v : a.reshaped()) v = z(rng);
    const Matrix sigma = 0.05 * (a * a.transpose()) + 0.02 * Matrix::Identity(n, n);
    Vector mu(n);
    for (auto& v : mu) v = 0.05 * z(rng);
    const double delta = 2.5;
    const auto p = mv_long_only(mu, sigma, delta);
    const double best = mv_utility(p.weights, mu, sigma, delta);

    const int k = 100;
    double grid_best = -1e300;
    Vector x(n);
    for (int i0 = 0; i0 <= k; ++i0)
        for (int i1 = 0; i0 + i1 <= k; ++i1)
            for (int i2 = 0; i0 + i1 + i2 <= k; ++i2)
                for (int i3 = 0; i0 + i1 + i2 + i3 <= k; ++i3) {
                    x << i0, i1, i2, i3, k - i0 - i1 - i2 - i3;
                    x /= k;
                    grid_best = std::max(grid_best, mv_utility(x, mu, sigma, delta));
                }
    EXPECT_GE(best, grid_best - 1e-12);
    EXPECT_LT(best - grid_best, 1e-4);
    EXPECT_LT(p.kkt_residual, 1e-8);
}

TEST(LongOnly, OnSimplexAndNoWorseThanEqualWeights) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> z(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 2 + trial % 6;
        Matrix a(n, n);
        for (auto& v : a.reshaped()) v = z(rng);
        const Matrix sigma = a * a.transpose() / n + 0.01 * Matrix::Identity(n, n);
        Vector mu(n);
        for (auto& v : mu) v = 0.1 * z(rng);
        const double delta = std::exp(z(rng));
        const auto p = mv_long_only(mu, sigma, delta);
        EXPECT_GE(p.weights.minCoeff(), 0.0);
        EXPECT_NEAR(p.weights.sum(), 1.0, 1e-10);
        const Vector eq = Vector::Constant(n, 1.0 / n);
        EXPECT_GE(mv_utility(p.weights, mu, sigma, delta), mv_utility(eq, mu, sigma, delta) - 1e-12);
        EXPECT_LT(p.kkt_residual, 1e-8);
    }
}

TEST(Regimes, PlantedBoundariesAreRecovered) {
    const Vector lv = planted_levels(50, 40, 60);
    const auto labels = label_regimes(lv, {0.9, 0.5, 0.2});
    ASSERT_EQ(labels.size(), 150u);
    for (int t = 0; t < 50; ++t) EXPECT_EQ(labels[static_cast<std::size_t>(t)], Regime::bull) << t;
    for (int t = 50; t < 90; ++t) EXPECT_EQ(labels[static_cast<std::size_t>(t)], Regime::bear) << t;
    for (int t = 90; t < 150; ++t) EXPECT_EQ(labels[static_cast<std::size_t>(t)], Regime::oscillating) << t;
}

TEST(Regimes, MonotoneRiseIsOneRegimeAndCalibrationRefuses) {
    Vector lv(61);
    for (int t = 0; t <= 60; ++t) lv[t] = std::pow(2.0, t / 60.0);
    const auto labels = label_regimes(lv);
    for (auto r : labels) EXPECT_EQ(r, Regime::bull);
    EXPECT_THROW(calibrate_state_components(Matrix::Zero(60, 2), lv), std::invalid_argument);
}

TEST(Regimes, CalibratedCovariancesArePositiveDefinite) {
    const Vector lv = planted_levels(50, 40, 4);  // oscillating stretch shorter than n + 2
    std::mt19937_64 rng(2);
    std::normal_distribution<double> z(0.0, 0.02);
    Matrix r(94, 8);
    for (auto& v : r.reshaped()) v = z(rng);
    const auto cal = calibrate_state_components(r, lv, {0.9, 0.5, 0.2});
    EXPECT_EQ(cal.counts[0], 50);
    EXPECT_EQ(cal.counts[2], 40);
    EXPECT_EQ(cal.counts[1], 4);
    EXPECT_TRUE(cal.shrunk[1]);
    EXPECT_FALSE(cal.shrunk[0]);
    for (const auto& c : cal.components) EXPECT_GT(smallest_eigenvalue(c.sigma()), 0.0);
}

TEST(Metrics, DrawdownOfUpDownPath) {
    EXPECT_DOUBLE_EQ(max_drawdown((Vector(3) << 1.0, 2.0, 1.0).finished()), 0.5);
    EXPECT_DOUBLE_EQ(max_drawdown(Vector::Ones(5)), 0.0);
}

TEST(Metrics, DrawdownIsScaleInvariant) {
    const Vector w = (Vector(6) << 1.0, 1.3, 0.9, 1.1, 0.7, 1.4).finished();
    EXPECT_NEAR(max_drawdown(w), max_drawdown(7.5 * w), 1e-15);
    EXPECT_NEAR(max_drawdown(w), 1.0 - 0.7 / 1.3, 1e-15);
}

TEST(Metrics, FullReallocationCostsOnePercent) {
    Matrix x(2, 2);
    x << 1.0, 0.0, 0.0, 1.0;
    const Matrix gross = Matrix::Ones(2, 2);
    const Vector r = portfolio_period_returns(x, gross, 0.005);
    EXPECT_DOUBLE_EQ(r[0], 1.0);
    EXPECT_DOUBLE_EQ(r[1], 0.99);
    EXPECT_DOUBLE_EQ(turnover(x, gross), 2.0);
}

TEST(Metrics, ConstantWeightsWithoutDriftHaveNoTurnover) {
    Matrix x(4, 3);
    x.rowwise() = (Vector(3) << 0.2, 0.3, 0.5).finished().transpose();
    Matrix gross(4, 3);
    gross.col(0).setConstant(1.01);
    gross.col(1).setConstant(1.01);
    gross.col(2).setConstant(1.01);
    gross.row(2).setConstant(0.97);
    EXPECT_NEAR(turnover(x, gross), 0.0, 1e-15);
}

TEST(Metrics, TurnoverUsesDriftedWeights) {
    Matrix x(2, 2);
    x << 0.5, 0.5, 0.5, 0.5;
    Matrix gross(2, 2);
    gross << 1.2, 0.8, 1.0, 1.0;
    // drift to (0.6, 0.4), rebalance back to (0.5, 0.5)
    EXPECT_NEAR(turnover(x, gross), 0.2, 1e-15);
}

TEST(Metrics, CostNeverRaisesWealth) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int t = 30, n = 4;
    Matrix x(t, n), gross(t, n);
    for (int i = 0; i < t; ++i) {
        for (int j = 0; j < n; ++j) {
            x(i, j) = u(rng);
            gross(i, j) = 0.9 + 0.2 * u(rng);
        }
        x.row(i) /= x.row(i).sum();
    }
    const Vector w0 = wealth_path(portfolio_period_returns(x, gross, 0.0));
    const Vector w1 = wealth_path(portfolio_period_returns(x, gross, 0.005));
    for (Eigen::Index i = 0; i < w0.size(); ++i) EXPECT_LE(w1[i], w0[i]);
}

TEST(Metrics, SingleAssetWithoutCostTracksAsset) {
    const Matrix x = Matrix::Ones(3, 1);
    const Matrix gross = (Matrix(3, 1) << 1.1, 0.9, 1.05).finished();
    const Vector w = wealth_path(portfolio_period_returns(x, gross, 0.0));
    EXPECT_NEAR(w[3], 1.1 * 0.9 * 1.05, 1e-15);
}

TEST(Metrics, SharpeRatioHandValue) {
    const Vector e = (Vector(3) << 0.01, 0.03, 0.02).finished();
    // mean 0.02, sample sd 0.01, k = 250/21
    const double k = 250.0 / 21.0;
    EXPECT_NEAR(*sharpe_ratio(e, 21.0), k * 0.02 / std::sqrt(k * 1e-4), 1e-12);
    EXPECT_FALSE(sharpe_ratio(Vector::Constant(4, 0.01), 21.0).has_value());
}

TEST(Metrics, TwoAssetFixtureByHand) {
    Matrix x(3, 2);
    x << 0.5, 0.5, 1.0, 0.0, 1.0, 0.0;
    Matrix gross(3, 2);
    gross << 1.1, 0.9, 1.2, 1.0, 0.8, 1.0;
    const Vector rf = Vector::Constant(3, 0.001);
    const auto m = perf_metrics(x, gross, rf, 0.01, 21.0);
    // period returns: 1.0, 1.2 * (1 - 0.01 * 1), 0.8
    const double r1 = 1.0, r2 = 1.2 * 0.99, r3 = 0.8;
    // drift of (0.5, 0.5) -> (0.55, 0.45); |(1,0) - (0.55,0.45)| = 0.9; then (1,0) stays
    EXPECT_NEAR(m.trn, 0.45, 1e-15);
    EXPECT_NEAR(m.mdd, 1.0 - r1 * r2 * r3 / (r1 * r2), 1e-15);
    const Vector ex = (Vector(3) << r1 - 1.001, r2 - 1.001, r3 - 1.001).finished();
    EXPECT_NEAR(*m.sr, *sharpe_ratio(ex, 21.0), 1e-12);
}

TEST(Backtest, InvariantsOnSyntheticData) {
    const MarketDataset d = synthetic_dataset(230, 21);
    d.validate();
    const BacktestReport rep = run_backtest(d, small_config(13));
    EXPECT_EQ(rep.rebalance_rows.front(), 150);
    EXPECT_EQ(rep.rebalance_rows.size(), 7u);
    for (const auto& s : rep.strategies) {
        EXPECT_EQ(s.weights.rows(), static_cast<Eigen::Index>(rep.rebalance_rows.size()));
        EXPECT_GE(s.weights.minCoeff(), 0.0);
        for (Eigen::Index r = 0; r < s.weights.rows(); ++r) EXPECT_NEAR(s.weights.row(r).sum(), 1.0, 1e-10);
        for (Eigen::Index r = 0; r < s.lambdas.rows(); ++r) EXPECT_NEAR(s.lambdas.row(r).sum(), 1.0, 1e-10);
        EXPECT_GE(s.metrics.trn, 0.0);
        EXPECT_GE(s.metrics.mdd, 0.0);
        EXPECT_LE(s.metrics.mdd, 1.0);
        EXPECT_EQ(s.wealth.size(), s.period_returns.size() + 1);
        EXPECT_EQ(s.failures, 0);
    }
    EXPECT_EQ(rep.calibration.counts[0] + rep.calibration.counts[1] + rep.calibration.counts[2], 150);
}

TEST(Backtest, Deterministic) {
    const MarketDataset d = synthetic_dataset(230, 21);
    const auto a = run_backtest(d, small_config(26));
    const auto b = run_backtest(d, small_config(26));
    for (std::size_t e = 0; e < 3; ++e) EXPECT_TRUE(a.strategies[e].weights == b.strategies[e].weights);
}

TEST(Backtest, ConfigValidation) {
    const MarketDataset d = synthetic_dataset(120, 1);
    BacktestConfig c = small_config(4);
    EXPECT_THROW(run_backtest(d, c), std::invalid_argument);  // calibration longer than data
    c.calibration_weeks = 0;
    c.cost_ratio = 1.0;
    EXPECT_THROW(run_backtest(d, c), std::invalid_argument);
}
