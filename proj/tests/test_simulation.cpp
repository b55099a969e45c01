#include "mixest/simulation.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace mixest;

namespace {

ExperimentSetup small_setup(int which, std::vector<GridRow> rows, int reps = 1, std::uint64_t seed = 11) {
    ExperimentSetup s;
    s.which = which;
    s.rows = std::move(rows);
    s.replications = reps;
    s.seed = seed;
    return s;
}

}  // namespace

TEST(Rmse, ZeroWhenIdentical) {
    Matrix t(3, 2);
    t << 0.1, 0.9, 0.5, 0.5, 0.7, 0.3;
    EXPECT_DOUBLE_EQ(rmse(t, t, all_rows(3)), 0.0);
}

TEST(Rmse, ConstantErrorIsThatError) {
    Matrix t = Matrix::Constant(4, 3, 0.2);
    Matrix e = t.array() + 0.05;
    EXPECT_NEAR(rmse(t, e, all_rows(4)), 0.05, 1e-15);
}

TEST(Rmse, TwoComponentsAverageTheirErrors) {
    Matrix t = Matrix::Zero(5, 2);
    Matrix e(5, 2);
    e.col(0).setConstant(0.3);
    e.col(1).setConstant(-0.4);
    EXPECT_NEAR(rmse(t, e, all_rows(5)), 0.35, 1e-15);
}

TEST(Rmse, SubsetOfDates) {
    Matrix t = Matrix::Zero(4, 1);
    Matrix e(4, 1);
    e << 1.0, 0.0, 3.0, 0.0;
    EXPECT_NEAR(rmse(t, e, {0, 2}), std::sqrt(5.0), 1e-15);
}

TEST(Rmse, EmptyDateSetThrows) {
    Matrix t = Matrix::Zero(2, 2);
    EXPECT_THROW(rmse(t, t, {}), std::invalid_argument);
}

TEST(Scenario, DefaultCalendar) {
    const ScenarioSpec s = default_scenario();
    EXPECT_EQ(s.total_days(), 400);
    const auto days = s.rebalance_days();
    ASSERT_EQ(days.size(), 58u);
    EXPECT_EQ(days.front(), 111);
    EXPECT_EQ(days.back(), 396);
    EXPECT_EQ(s.boundary_days(), (std::vector<int>{201, 281, 331}));
    EXPECT_EQ(s.segment_of(200), 0);
    EXPECT_EQ(s.segment_of(201), 1);
    EXPECT_EQ(s.segment_of(400), 3);
}

TEST(Scenario, TurningPointsAreFirstDatesAtOrAfterBoundaries) {
    const ScenarioSpec s = default_scenario();
    const auto idx = turning_point_indices(s);
    EXPECT_EQ(idx, (std::vector<int>{18, 19, 34, 35, 44, 45}));
    const auto days = s.rebalance_days();
    for (int b : s.boundary_days()) {
        int first = -1;
        for (std::size_t i = 0; i < days.size(); ++i)
            if (days[i] >= b) {
                first = static_cast<int>(i);
                break;
            }
        ASSERT_GE(first, 1);
        EXPECT_LT(days[static_cast<std::size_t>(first - 1)], b);
        EXPECT_NE(std::find(idx.begin(), idx.end(), first), idx.end());
    }
}

TEST(Scenario, ValidateRejectsBadInputs) {
    ScenarioSpec s = default_scenario();
    s.start_day = 20;
    EXPECT_THROW(s.validate(3), std::invalid_argument);
    s = default_scenario();
    EXPECT_THROW(s.validate(4), std::invalid_argument);
    s.segments.clear();
    EXPECT_THROW(s.validate(3), std::invalid_argument);
}

TEST(Components, DefaultFactorsArePositiveDefiniteAndOrdered) {
    const auto build = build_components(default_factor_specs(), 10, 5);
    ASSERT_EQ(build.model.size(), 3u);
    for (const auto& c : build.model.components()) EXPECT_GT(smallest_eigenvalue(c.sigma()), 0.0);
    // bull mean above bear mean on average
    EXPECT_GT(build.model.components()[0].mu().mean(), build.model.components()[2].mu().mean());
}

TEST(Streams, SeedsAreDistinctAcrossStreamsAndReplications) {
    std::set<std::uint64_t> seen;
    for (int r = 0; r < 20; ++r)
        for (auto s : {Stream::components, Stream::returns, Stream::noise}) seen.insert(replication_seed(9, r, s));
    EXPECT_EQ(seen.size(), 60u);
}

TEST(Paths, ReturnPathIsDeterministic) {
    const auto build = build_components(default_factor_specs(), 10, 5);
    const auto s = default_scenario();
    const Matrix a = simulate_path_returns(build.model, s, 77);
    const Matrix b = simulate_path_returns(build.model, s, 77);
    EXPECT_EQ(a.rows(), 400);
    EXPECT_EQ(a.cols(), 10);
    EXPECT_TRUE(a == b);
    EXPECT_FALSE(a == simulate_path_returns(build.model, s, 78));
}

TEST(Grids, DefaultGridsHaveExpectedRows) {
    EXPECT_EQ(default_grid(1, 10).size(), 10u);
    EXPECT_EQ(default_grid(2, 10).size(), 5u);
    EXPECT_EQ(default_grid(3, 10).size(), 5u);
    for (const auto& r : default_grid(1, 10)) EXPECT_NO_THROW(r.params.validate());
    const auto noise = default_grid(2, 10);
    EXPECT_NEAR(noise[0].params.sigma_noise[0], std::sqrt(2.603e3), 1e-12);
    EXPECT_THROW(default_grid(4, 10), std::invalid_argument);
}

TEST(Experiment, EmptyGridThrows) {
    EXPECT_THROW(run_experiment_grid(small_setup(1, {})), std::invalid_argument);
}

TEST(Experiment, BackwardErrorIgnoresMarketParameters) {
    auto rows = default_grid(1, 10);
    auto setup = small_setup(1, {rows[1], rows[5], rows[9]});
    const auto table = run_experiment_grid(setup);
    for (std::size_t g = 1; g < table.rows.size(); ++g) {
        EXPECT_EQ(table.rows[g].eta_turning[0], table.rows[0].eta_turning[0]);
        EXPECT_EQ(table.rows[g].eta_full[0], table.rows[0].eta_full[0]);
    }
    auto deltas = default_grid(3, 10);
    const auto t3 = run_experiment_grid(small_setup(3, {deltas[0], deltas[4]}));
    EXPECT_EQ(t3.rows[0].eta_full[0], table.rows[0].eta_full[0]);
    EXPECT_EQ(t3.rows[1].eta_full[0], table.rows[0].eta_full[0]);
}

TEST(Experiment, SingleReplicationIsBitReproducible) {
    auto rows = default_grid(3, 10);
    const auto a = run_experiment_grid(small_setup(3, {rows[2]}), true);
    const auto b = run_experiment_grid(small_setup(3, {rows[2]}), true);
    for (std::size_t e = 0; e < 3; ++e) {
        EXPECT_EQ(a.rows[0].eta_full[e], b.rows[0].eta_full[e]);
        EXPECT_TRUE(a.reports[0][0].estimates[e] == b.reports[0][0].estimates[e]);
    }
}

TEST(Experiment, ReportShapesAndEstimatesOnSimplex) {
    auto rows = default_grid(1, 10);
    const auto t = run_experiment_grid(small_setup(1, {rows[4]}), true);
    const auto& rep = t.reports[0][0];
    EXPECT_EQ(rep.days.size(), 58u);
    EXPECT_EQ(rep.turning_rows.size(), 6u);
    EXPECT_EQ(rep.truth.rows(), 58);
    for (const auto& est : rep.estimates) {
        ASSERT_EQ(est.rows(), 58);
        ASSERT_EQ(est.cols(), 3);
        EXPECT_GE(est.minCoeff(), -1e-12);
        for (Eigen::Index r = 0; r < est.rows(); ++r) EXPECT_NEAR(est.row(r).sum(), 1.0, 1e-12);
    }
    for (std::size_t e = 0; e < 3; ++e) {
        EXPECT_TRUE(std::isfinite(t.rows[0].eta_turning[e]));
        EXPECT_GE(t.rows[0].eta_turning[e], 0.0);
    }
}

TEST(Experiment, TinyInformedRiskAversionMakesMarketEstimatorsExact) {
    auto rows = default_grid(3, 10);
    const auto t = run_experiment_grid(small_setup(3, {rows[4]}));
    EXPECT_LT(t.rows[0].eta_full[1], 5e-3);
    EXPECT_LT(t.rows[0].eta_full[2], 5e-3);
    EXPECT_GT(t.rows[0].eta_full[0], 0.05);
}
