// Monte Carlo market with informed, less-informed and noise investors, and
// RMSE comparison of the backward, forward and combined estimators.
#pragma once

#include "mixest/estimator.hpp"

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace mixest {

/**
 * @brief Single-factor description of one market state.
 *
 * Asset i has alpha_scale * tau, beta = beta_base - beta_scale * tau and
 * idiosyncratic variance idio_scale * U(0,1), with tau ~ N(0,1).
 */
struct FactorSpec {
    double market_mean = 0.0;
    double market_var = 0.001;
    double alpha_scale = 1e-5;
    double beta_base = 1.2;
    double beta_scale = 0.6;
    double idio_scale = 0.002;

    void validate() const {
        require(market_var > 0.0 && std::isfinite(market_var), "market variance must be positive");
        require(idio_scale >= 0.0, "idiosyncratic scale must be non-negative");
        require(std::isfinite(market_mean) && std::isfinite(alpha_scale) && std::isfinite(beta_base) &&
                    std::isfinite(beta_scale),
                "factor parameters must be finite");
    }
};

/// Bull, oscillating and bear states in that order.
inline std::vector<FactorSpec> default_factor_specs() {
    FactorSpec bull, osc, bear;
    bull.market_mean = 0.004;
    bull.market_var = 0.001;
    osc.market_mean = 0.0;
    osc.market_var = 0.0002;
    bear.market_mean = -0.008;
    bear.market_var = 0.002;
    return {bull, osc, bear};
}

struct Segment {
    int length_days = 1;
    Vector lambda_true;  ///< full weights
};

struct ScenarioSpec {
    std::vector<Segment> segments;
    Eigen::Index n_assets = 10;
    int start_day = 111;
    int rebalance_every_days = 5;
    int em_window_days = 30;
    double r_f_annual = 0.035;
    int days_per_year = 250;
    int turning_dates_per_boundary = 2;

    int total_days() const {
        int d = 0;
        for (const auto& s : segments) d += s.length_days;
        return d;
    }
    double r_f_daily() const { return r_f_annual / days_per_year; }

    void validate(std::size_t n_components) const {
        require(!segments.empty(), "scenario needs at least one segment");
        for (const auto& s : segments) {
            require(s.length_days >= 1, "segment lengths must be >= 1");
            require_dims(s.lambda_true.size() == static_cast<Eigen::Index>(n_components),
                         "segment weights must have one entry per component");
            MixtureWeights check(s.lambda_true);
        }
        require(n_assets >= 2, "scenario needs at least two assets");
        require(em_window_days >= 1 && rebalance_every_days >= 1, "window and rebalance step must be >= 1");
        require(start_day > em_window_days, "start day must leave room for the estimation window");
        require(start_day <= total_days(), "start day lies beyond the scenario");
        require(turning_dates_per_boundary >= 1, "need at least one turning date per boundary");
    }

    /// 0-based segment index of a 1-based day.
    int segment_of(int day) const {
        int end = 0;
        for (std::size_t s = 0; s < segments.size(); ++s) {
            end += segments[s].length_days;
            if (day <= end) return static_cast<int>(s);
        }
        return static_cast<int>(segments.size()) - 1;
    }

    std::vector<int> rebalance_days() const {
        std::vector<int> days;
        for (int d = start_day; d <= total_days(); d += rebalance_every_days) days.push_back(d);
        return days;
    }

    /// First segment day of every segment after the first.
    std::vector<int> boundary_days() const {
        std::vector<int> out;
        int day = 1;
        for (std::size_t s = 0; s + 1 < segments.size(); ++s) {
            day += segments[s].length_days;
            out.push_back(day);
        }
        return out;
    }
};

/// Four segments of 200/80/50/70 days over bull, oscillating and bear states.
inline ScenarioSpec default_scenario() {
    ScenarioSpec s;
    s.segments = {{200, Vector{{0.0, 0.5, 0.5}}},
                  {80, Vector{{0.7, 0.3, 0.0}}},
                  {50, Vector{{0.0, 0.5, 0.5}}},
                  {70, Vector{{0.2, 0.8, 0.0}}}};
    return s;
}

/// Indices into the rebalance calendar that are turning points.
inline std::vector<int> turning_point_indices(const ScenarioSpec& s) {
    const auto days = s.rebalance_days();
    std::vector<int> out;
    for (int b : s.boundary_days()) {
        int taken = 0;
        for (std::size_t i = 0; i < days.size() && taken < s.turning_dates_per_boundary; ++i) {
            if (days[i] >= b) {
                if (out.empty() || out.back() < static_cast<int>(i)) out.push_back(static_cast<int>(i));
                ++taken;
            }
        }
    }
    return out;
}

struct ComponentBuild {
    MixtureModel model;
    bool floored = false;  ///< an idiosyncratic variance was raised to the 1e-8 floor
};

template <class Rng>
ComponentBuild build_components(const std::vector<FactorSpec>& specs, Eigen::Index n, Rng& rng) {
    require(n >= 2, "need at least two assets");
    require(!specs.empty(), "need at least one factor spec");
    std::normal_distribution<double> std_normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<GaussianComponent> comps;
    bool floored = false;
    for (const auto& f : specs) {
        f.validate();
        Vector alpha(n), beta(n), idio(n);
        for (Eigen::Index i = 0; i < n; ++i) alpha[i] = f.alpha_scale * std_normal(rng);
        for (Eigen::Index i = 0; i < n; ++i) beta[i] = f.beta_base - f.beta_scale * std_normal(rng);
        for (Eigen::Index i = 0; i < n; ++i) {
            idio[i] = f.idio_scale * unit(rng);
            if (idio[i] < 1e-8) {
                idio[i] = 1e-8;
                floored = true;
            }
        }
        Matrix sigma = f.market_var * beta * beta.transpose();
        sigma.diagonal() += idio;
        comps.emplace_back(alpha + f.market_mean * beta, symmetrize(sigma));
    }
    return {MixtureModel(std::move(comps)), floored};
}

inline ComponentBuild build_components(const std::vector<FactorSpec>& specs, Eigen::Index n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return build_components(specs, n, rng);
}

/// Daily excess returns for days 1..T (row d-1 is day d), drawn from each day's segment mixture.
inline Matrix simulate_path_returns(const MixtureModel& model, const ScenarioSpec& scenario, std::uint64_t seed) {
    scenario.validate(model.size());
    std::mt19937_64 rng(seed);
    Matrix out(scenario.total_days(), model.n_assets());
    Eigen::Index row = 0;
    for (const auto& seg : scenario.segments) {
        out.middleRows(row, seg.length_days) =
            sample_returns(model, MixtureWeights(seg.lambda_true), seg.length_days, rng);
        row += seg.length_days;
    }
    return out;
}

/**
 * @brief Mean over components of per-component RMSE across the selected rows.
 *
 * truth and estimate are dates x m.
 */
inline double rmse(const Matrix& truth, const Matrix& estimate, const std::vector<int>& rows) {
    require_dims(truth.rows() == estimate.rows() && truth.cols() == estimate.cols(), "trajectories must align");
    require(!rows.empty(), "rmse needs at least one date");
    require(truth.cols() >= 1, "rmse needs at least one component");
    double total = 0.0;
    for (Eigen::Index k = 0; k < truth.cols(); ++k) {
        double ss = 0.0;
        for (int r : rows) {
            require(r >= 0 && r < truth.rows(), "date index out of range");
            const double e = estimate(r, k) - truth(r, k);
            ss += e * e;
        }
        total += std::sqrt(ss / static_cast<double>(rows.size()));
    }
    return total / static_cast<double>(truth.cols());
}

inline std::vector<int> all_rows(Eigen::Index count) {
    std::vector<int> r(static_cast<std::size_t>(count));
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = static_cast<int>(i);
    return r;
}

/**
 * How market shares move between rebalance dates: held at their initial
 * values, or set to wealth fractions that compound with each investor's
 * returns.
 */
enum class ShareDynamics { fixed, wealth };

struct ScenarioOptions {
    ShareDynamics shares = ShareDynamics::fixed;
    SolverOptions solver;
    EmOptions em;
};

struct ExperimentReport {
    std::vector<int> days;           ///< rebalance days
    std::vector<int> turning_rows;   ///< rows of `days` counted as turning points
    Matrix truth;                    ///< dates x m
    std::array<Matrix, 3> estimates; ///< backward, combined, forward (order of kAllModes)
    Matrix shares;                   ///< dates x 3: alpha_I, alpha_U, alpha_N used at each date
    std::array<double, 3> eta_turning{};
    std::array<double, 3> eta_full{};
    std::array<int, 3> failures{};       ///< dates where the solver threw (previous estimate carried)
    std::array<int, 3> not_converged{};
    int wealth_clamps = 0;
    std::uint64_t returns_seed = 0;
    std::uint64_t noise_seed = 0;
};

/**
 * @brief Runs the rebalance loop on a pre-drawn return path.
 *
 * At each rebalance day t the less-informed investor fits weights by EM on
 * days t-window..t-1, the informed investor holds g at the true weights of
 * day t, the noise position is sigma * z with a fresh standard normal z, and
 * the market clears at the current shares. All three estimators are solved
 * from that observation, then holdings are kept until the next rebalance
 * while wealth compounds daily.
 */
inline ExperimentReport run_scenario(const MixtureModel& model, const Matrix& path_returns,
                                     const ScenarioSpec& scenario, const MarketParams& market0,
                                     std::uint64_t noise_seed, const ScenarioOptions& opt = {}) {
    scenario.validate(model.size());
    market0.validate();
    const auto m = static_cast<Eigen::Index>(model.size());
    const auto n = model.n_assets();
    require(m >= 2, "simulation needs at least two components");
    require_dims(n == scenario.n_assets, "model and scenario asset counts differ");
    require_dims(market0.sigma_noise.size() == n, "noise intensities must have one entry per asset");
    require_dims(path_returns.rows() == scenario.total_days() && path_returns.cols() == n,
                 "return path does not match the scenario");

    const auto days = scenario.rebalance_days();
    const auto dates = static_cast<Eigen::Index>(days.size());
    ExperimentReport rep;
    rep.days = days;
    rep.turning_rows = turning_point_indices(scenario);
    rep.truth = Matrix(dates, m);
    for (auto& e : rep.estimates) e = Matrix(dates, m);
    rep.shares = Matrix(dates, 3);
    rep.noise_seed = noise_seed;

    std::mt19937_64 noise_rng(noise_seed);
    std::normal_distribution<double> std_normal(0.0, 1.0);
    WealthState wealth{market0.alpha_I, market0.alpha_U, market0.alpha_N};
    std::array<Vector, 3> previous;
    for (auto& p : previous) p = Vector();

    for (Eigen::Index row = 0; row < dates; ++row) {
        const int day = days[static_cast<std::size_t>(row)];
        const Vector lam_true = scenario.segments[static_cast<std::size_t>(scenario.segment_of(day))].lambda_true;
        rep.truth.row(row) = lam_true.transpose();

        const auto share = opt.shares == ShareDynamics::wealth
                               ? wealth.shares()
                               : std::array<double, 3>{market0.alpha_I, market0.alpha_U, market0.alpha_N};
        MarketParams params = market0.with_shares(share[0], share[1], share[2]);
        rep.shares.row(row) << share[0], share[1], share[2];

        const Matrix window = path_returns.middleRows(day - 1 - scenario.em_window_days, scenario.em_window_days);
        const EmFit fit = em_fit_weights(model, window, opt.em);
        const Moments mom_U = mixture_moments(model, fit.weights);
        const InvestorHolding x_U = mv_unconstrained(mom_U.mean, mom_U.cov, params.delta_U);
        const InvestorHolding x_I{g_forward_full(model, lam_true.head(m - 1), params.delta_I, false).value};
        Vector z(n);
        for (Eigen::Index i = 0; i < n; ++i) z[i] = std_normal(noise_rng);
        const InvestorHolding x_N{params.sigma_noise.cwiseProduct(z)};
        EquilibriumObservation obs = clear_market(x_U, x_I, x_N, params);

        const EstimationProblem problem{model, fit.prior, std::move(obs), EstimationMode::combined, std::nullopt};
        for (std::size_t e = 0; e < kAllModes.size(); ++e) {
            Vector lam;
            try {
                const auto r = solve(problem, kAllModes[e], opt.solver);
                if (!r.converged) ++rep.not_converged[e];
                lam = r.lambda;
            } catch (const std::exception&) {
                ++rep.failures[e];
                lam = previous[e].size() ? previous[e] : fit.weights.full();
            }
            previous[e] = lam;
            rep.estimates[e].row(row) = lam.transpose();
        }

        // Hold until the next rebalance while wealth compounds daily.
        const int next = row + 1 < dates ? days[static_cast<std::size_t>(row + 1)] : scenario.total_days() + 1;
        for (int d = day; d < next; ++d) {
            const auto u = update_wealth(wealth, x_I, x_U, x_N, path_returns.row(d - 1).transpose(),
                                         scenario.r_f_daily());
            wealth = u.state;
            if (u.clamped) ++rep.wealth_clamps;
        }
    }

    const auto full = all_rows(dates);
    for (std::size_t e = 0; e < 3; ++e) {
        rep.eta_full[e] = rmse(rep.truth, rep.estimates[e], full);
        rep.eta_turning[e] = rep.turning_rows.empty() ? 0.0 : rmse(rep.truth, rep.estimates[e], rep.turning_rows);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Experiment grids
// ---------------------------------------------------------------------------

/// Random streams of one replication.
enum class Stream : std::uint64_t { components = 1, returns = 2, noise = 3 };

inline std::uint64_t replication_seed(std::uint64_t root, int replication, Stream s) {
    return derive_seed(root, static_cast<std::uint64_t>(replication), static_cast<std::uint64_t>(s));
}

struct GridRow {
    double value = 0.0;  ///< grid label (alpha_I, noise variance or delta_I)
    MarketParams params;
};

struct ExperimentSetup {
    int which = 1;
    std::vector<GridRow> rows;
    int replications = 20;
    std::uint64_t seed = 1;
    ScenarioSpec scenario = default_scenario();
    std::vector<FactorSpec> factors = default_factor_specs();
    ScenarioOptions options;
};

/// Noise standard deviation for a 95% interval of [-1, 1] on each asset.
inline MarketParams default_market(Eigen::Index n) {
    MarketParams p;
    p.sigma_noise = Vector::Constant(n, noise_sigma_from_ci(1.0, 0.95));
    return p;
}

/// (alpha_I, alpha_U, alpha_N) rows of the market-share experiment.
inline std::vector<std::array<double, 3>> default_share_rows() {
    std::vector<std::array<double, 3>> rows{{0.001, 0.009, 0.990}};
    for (int i = 1; i <= 8; ++i) {
        const double a = 0.1 * i;
        rows.push_back({a, 0.9 - a, 0.1});
    }
    rows.push_back({0.990, 0.009, 0.001});
    return rows;
}

/// Noise variances of the noise-intensity experiment.
inline std::vector<double> default_noise_variances() { return {2.603e3, 2.603e1, 2.603e-1, 2.603e-3, 2.603e-5}; }

inline std::vector<double> default_risk_aversions() { return {2.250e3, 7.500e1, 2.500e0, 8.333e-2, 2.777e-3}; }

inline std::vector<GridRow> share_grid(const std::vector<std::array<double, 3>>& shares, const MarketParams& base) {
    std::vector<GridRow> rows;
    for (const auto& s : shares) rows.push_back({s[0], base.with_shares(s[0], s[1], s[2])});
    return rows;
}

/// Grid values are variances of the noise position.
inline std::vector<GridRow> noise_grid(const std::vector<double>& variances, const MarketParams& base) {
    std::vector<GridRow> rows;
    for (double v : variances) {
        require(v > 0.0, "noise variance must be positive");
        MarketParams p = base;
        p.sigma_noise = Vector::Constant(base.sigma_noise.size(), std::sqrt(v));
        rows.push_back({v, p});
    }
    return rows;
}

inline std::vector<GridRow> risk_aversion_grid(const std::vector<double>& deltas, const MarketParams& base) {
    std::vector<GridRow> rows;
    for (double d : deltas) {
        MarketParams p = base;
        p.delta_I = d;
        rows.push_back({d, p});
    }
    return rows;
}

/// Default grid of experiment 1, 2 or 3.
inline std::vector<GridRow> default_grid(int which, Eigen::Index n) {
    const MarketParams base = default_market(n);
    switch (which) {
        case 1: return share_grid(default_share_rows(), base);
        case 2: return noise_grid(default_noise_variances(), base);
        case 3: return risk_aversion_grid(default_risk_aversions(), base);
        default: throw std::invalid_argument("experiment must be 1, 2 or 3");
    }
}

struct GridResult {
    double value = 0.0;
    std::array<double, 3> eta_turning{};  ///< backward, combined, forward
    std::array<double, 3> eta_full{};
    std::array<double, 3> se_turning{};
    std::array<double, 3> se_full{};
    int failures = 0;
    int not_converged = 0;
};

struct ExperimentTable {
    int which = 1;
    std::vector<GridResult> rows;
    /// replication x grid row reports, kept for trajectory dumps
    std::vector<std::vector<ExperimentReport>> reports;
};

/**
 * @brief Averages eta over replications for each grid row.
 *
 * Replication r draws components, returns and noise from separate streams
 * of the root seed, shared by all grid rows.
 */
inline ExperimentTable run_experiment_grid(const ExperimentSetup& setup, bool keep_reports = false) {
    require(setup.which >= 1 && setup.which <= 3, "experiment must be 1, 2 or 3");
    require(!setup.rows.empty(), "experiment grid is empty");
    require(setup.replications >= 1, "need at least one replication");
    setup.scenario.validate(setup.factors.size());
    const auto rows = setup.rows.size();
    const auto reps = static_cast<std::size_t>(setup.replications);

    std::vector<std::array<Eigen::ArrayXd, 6>> samples(rows);
    for (auto& s : samples)
        for (auto& a : s) a = Eigen::ArrayXd(static_cast<Eigen::Index>(reps));

    ExperimentTable table;
    table.which = setup.which;
    table.rows.resize(rows);
    if (keep_reports) table.reports.resize(reps);

    for (std::size_t r = 0; r < reps; ++r) {
        const int rep = static_cast<int>(r);
        const auto built =
            build_components(setup.factors, setup.scenario.n_assets, replication_seed(setup.seed, rep, Stream::components));
        const auto returns_seed = replication_seed(setup.seed, rep, Stream::returns);
        const Matrix path = simulate_path_returns(built.model, setup.scenario, returns_seed);
        for (std::size_t g = 0; g < rows; ++g) {
            auto report = run_scenario(built.model, path, setup.scenario, setup.rows[g].params,
                                       replication_seed(setup.seed, rep, Stream::noise), setup.options);
            report.returns_seed = returns_seed;
            for (std::size_t e = 0; e < 3; ++e) {
                samples[g][e][static_cast<Eigen::Index>(r)] = report.eta_turning[e];
                samples[g][3 + e][static_cast<Eigen::Index>(r)] = report.eta_full[e];
                table.rows[g].failures += report.failures[e];
                table.rows[g].not_converged += report.not_converged[e];
            }
            if (keep_reports) table.reports[r].push_back(std::move(report));
        }
    }

    const double count = static_cast<double>(reps);
    const auto mean_se = [&](const Eigen::ArrayXd& a) -> std::pair<double, double> {
        const double mean = a.mean();
        if (reps < 2) return {mean, 0.0};
        const double var = (a - mean).square().sum() / (count - 1.0);
        return {mean, std::sqrt(var / count)};
    };
    for (std::size_t g = 0; g < rows; ++g) {
        auto& out = table.rows[g];
        out.value = setup.rows[g].value;
        for (std::size_t e = 0; e < 3; ++e) {
            std::tie(out.eta_turning[e], out.se_turning[e]) = mean_se(samples[g][e]);
            std::tie(out.eta_full[e], out.se_full[e]) = mean_se(samples[g][3 + e]);
        }
    }
    return table;
}

}  // namespace mixest
