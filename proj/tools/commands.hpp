// simulate / estimate / backtest commands behind the mixest executable.
#pragma once

#include "manifest.hpp"

#include <iostream>
#include <optional>
#include <set>

namespace mixest::cli {

using io::InputError;
using io::json;
namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kRuntime = 1, kUsage = 2 };

struct RunOptions {
    fs::path config;
    fs::path out = "out";
    std::optional<std::uint64_t> seed;
    std::optional<int> replications;
    std::optional<std::string> mode;
    bool strict = false;
};

// ---------------------------------------------------------------------------
// Config helpers
// ---------------------------------------------------------------------------

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw InputError(where + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!allowed.count(key)) throw InputError(where + ": unknown key '" + key + "'");
    }
}

template <class T>
T get_or(const json& j, const std::string& key, T fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw InputError(where + "." + key + ": wrong type");
    }
}

struct LoadedConfig {
    json doc;
    std::string bytes;
    fs::path dir;
};

inline LoadedConfig load_config(const fs::path& path) {
    if (path.empty()) throw InputError("--config is required");
    if (!fs::exists(path)) throw InputError("config file not found: " + path.string());
    LoadedConfig c;
    c.bytes = io::read_file(path);
    try {
        c.doc = json::parse(c.bytes);
    } catch (const json::parse_error& e) {
        throw InputError(path.string() + ": invalid JSON: " + e.what());
    }
    if (!c.doc.is_object()) throw InputError(path.string() + ": top level must be an object");
    c.dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
    return c;
}

inline fs::path resolve(const LoadedConfig& c, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : c.dir / path;
}

/// Noise sigma from "noise_sigma", "noise_variance" or "noise_ci_half_width" (95%), in that order.
inline double noise_sigma_from(const json& m, double fallback_half_width, const std::string& where) {
    if (m.contains("noise_sigma")) return get_or<double>(m, "noise_sigma", 0.0, where);
    if (m.contains("noise_variance")) {
        const double v = get_or<double>(m, "noise_variance", 0.0, where);
        if (!(v > 0.0)) throw InputError(where + ".noise_variance must be positive");
        return std::sqrt(v);
    }
    return noise_sigma_from_ci(get_or<double>(m, "noise_ci_half_width", fallback_half_width, where), 0.95);
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

inline ExperimentSetup parse_simulate(const LoadedConfig& c, const RunOptions& opt) {
    const json& d = c.doc;
    check_keys(d, {"experiment", "grid", "replications", "seed", "market", "scenario", "factors", "share_dynamics",
                   "trajectories"},
               "simulate");
    ExperimentSetup s;
    s.which = get_or<int>(d, "experiment", 0, "simulate");
    if (s.which < 1 || s.which > 3) throw InputError("simulate.experiment must be 1, 2 or 3");
    s.replications = opt.replications.value_or(get_or<int>(d, "replications", 20, "simulate"));
    if (s.replications < 1) throw InputError("replications must be >= 1");
    s.seed = opt.seed.value_or(get_or<std::uint64_t>(d, "seed", 1, "simulate"));

    if (d.contains("scenario")) {
        const json& sc = d["scenario"];
        check_keys(sc, {"n_assets", "start_day", "rebalance_every_days", "em_window_days", "r_f_annual",
                        "turning_dates_per_boundary", "segments"},
                   "simulate.scenario");
        s.scenario.n_assets = get_or<int>(sc, "n_assets", 10, "scenario");
        s.scenario.start_day = get_or<int>(sc, "start_day", s.scenario.start_day, "scenario");
        s.scenario.rebalance_every_days = get_or<int>(sc, "rebalance_every_days", s.scenario.rebalance_every_days, "scenario");
        s.scenario.em_window_days = get_or<int>(sc, "em_window_days", s.scenario.em_window_days, "scenario");
        s.scenario.r_f_annual = get_or<double>(sc, "r_f_annual", s.scenario.r_f_annual, "scenario");
        s.scenario.turning_dates_per_boundary =
            get_or<int>(sc, "turning_dates_per_boundary", s.scenario.turning_dates_per_boundary, "scenario");
        if (sc.contains("segments")) {
            s.scenario.segments.clear();
            for (const auto& seg : sc["segments"]) {
                check_keys(seg, {"days", "weights"}, "scenario.segments[]");
                s.scenario.segments.push_back(
                    {get_or<int>(seg, "days", 0, "segment"), io::vector_from_json(io::at(seg, "weights", "segment"), "segment.weights")});
            }
        }
    }
    if (d.contains("factors")) {
        s.factors.clear();
        for (const auto& f : d["factors"]) {
            check_keys(f, {"market_mean", "market_var", "alpha_scale", "beta_base", "beta_scale", "idio_scale"}, "factors[]");
            FactorSpec fs_;
            fs_.market_mean = get_or<double>(f, "market_mean", fs_.market_mean, "factors");
            fs_.market_var = get_or<double>(f, "market_var", fs_.market_var, "factors");
            fs_.alpha_scale = get_or<double>(f, "alpha_scale", fs_.alpha_scale, "factors");
            fs_.beta_base = get_or<double>(f, "beta_base", fs_.beta_base, "factors");
            fs_.beta_scale = get_or<double>(f, "beta_scale", fs_.beta_scale, "factors");
            fs_.idio_scale = get_or<double>(f, "idio_scale", fs_.idio_scale, "factors");
            fs_.validate();
            s.factors.push_back(fs_);
        }
    }
    const std::string dyn = get_or<std::string>(d, "share_dynamics", "fixed", "simulate");
    if (dyn == "fixed") s.options.shares = ShareDynamics::fixed;
    else if (dyn == "wealth") s.options.shares = ShareDynamics::wealth;
    else throw InputError("simulate.share_dynamics must be 'fixed' or 'wealth'");

    MarketParams base = default_market(s.scenario.n_assets);
    if (d.contains("market")) {
        const json& m = d["market"];
        check_keys(m, {"alpha_I", "alpha_N", "delta_I", "delta_U", "noise_ci_half_width", "noise_variance", "noise_sigma"},
                   "simulate.market");
        const double a_I = get_or<double>(m, "alpha_I", base.alpha_I, "market");
        const double a_N = get_or<double>(m, "alpha_N", base.alpha_N, "market");
        base = base.with_shares(a_I, 1.0 - a_I - a_N, a_N);
        base.delta_I = get_or<double>(m, "delta_I", base.delta_I, "market");
        base.delta_U = get_or<double>(m, "delta_U", base.delta_U, "market");
        base.sigma_noise = Vector::Constant(s.scenario.n_assets, noise_sigma_from(m, 1.0, "market"));
    }

    if (!d.contains("grid")) {
        s.rows = default_grid(s.which, s.scenario.n_assets);
        if (s.which != 1)
            for (auto& r : s.rows) {
                MarketParams p = base;
                if (s.which == 2) p.sigma_noise = r.params.sigma_noise;
                else p.delta_I = r.params.delta_I;
                r.params = p;
            }
        else
            for (auto& r : s.rows) {
                const auto sh = r.params;
                r.params = base.with_shares(sh.alpha_I, sh.alpha_U, sh.alpha_N);
            }
    } else {
        const json& g = d["grid"];
        if (!g.is_array()) throw InputError("simulate.grid must be an array");
        if (g.empty()) throw InputError("simulate.grid is empty");
        if (s.which == 1) {
            std::vector<std::array<double, 3>> shares;
            for (const auto& e : g) {
                if (e.is_number()) {
                    const double a = e.get<double>();
                    shares.push_back({a, 1.0 - a - base.alpha_N, base.alpha_N});
                } else {
                    const Vector v = io::vector_from_json(e, "simulate.grid[]");
                    if (v.size() != 3) throw InputError("simulate.grid rows must be alpha_I or [alpha_I, alpha_U, alpha_N]");
                    shares.push_back({v[0], v[1], v[2]});
                }
            }
            s.rows = share_grid(shares, base);
        } else {
            const Vector v = io::vector_from_json(g, "simulate.grid");
            std::vector<double> vals(v.begin(), v.end());
            s.rows = s.which == 2 ? noise_grid(vals, base) : risk_aversion_grid(vals, base);
        }
    }
    for (const auto& r : s.rows) r.params.validate();
    s.scenario.validate(s.factors.size());
    return s;
}

inline int run_simulate(const RunOptions& opt, std::ostream& log) {
    const auto cfg = load_config(opt.config);
    const ExperimentSetup setup = parse_simulate(cfg, opt);
    const bool dump_traj = get_or<bool>(cfg.doc, "trajectories", true, "simulate");
    Manifest manifest("simulate", opt.config, cfg.bytes, setup.seed);

    log << "experiment " << setup.which << ": " << setup.rows.size() << " grid rows x " << setup.replications
        << " replications\n";
    const ExperimentTable table = run_experiment_grid(setup, dump_traj);

    manifest.write(opt.out, "experiment.csv", io::experiment_csv(table));
    if (dump_traj) {
        json traj = json::array();
        for (std::size_t g = 0; g < setup.rows.size(); ++g)
            traj.push_back(io::trajectory_json(table.reports[0][g], setup.rows[g].value));
        manifest.write(opt.out, "trajectories.json", io::dump(json{{"replication", 0}, {"rows", traj}}));
    }
    int failures = 0;
    for (const auto& r : table.rows) failures += r.failures;
    manifest.set("replications", setup.replications);
    manifest.set("solver_failures", failures);
    manifest.finish(opt.out);
    log << "wrote " << (opt.out / "experiment.csv").string() << "\n";
    if (opt.strict && failures > 0) {
        log << "strict: " << failures << " estimator failures\n";
        return kRuntime;
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

inline MarketParams parse_market(const json& m, Eigen::Index n, const std::string& where) {
    check_keys(m, {"alpha_I", "alpha_U", "alpha_N", "delta_I", "delta_U", "sigma", "noise_ci_half_width",
                   "noise_variance", "noise_sigma"},
               where);
    MarketParams p;
    p.alpha_I = get_or<double>(m, "alpha_I", p.alpha_I, where);
    p.alpha_N = get_or<double>(m, "alpha_N", p.alpha_N, where);
    p.alpha_U = get_or<double>(m, "alpha_U", 1.0 - p.alpha_I - p.alpha_N, where);
    p.delta_I = get_or<double>(m, "delta_I", p.delta_I, where);
    p.delta_U = get_or<double>(m, "delta_U", p.delta_U, where);
    if (m.contains("sigma")) p.sigma_noise = io::vector_from_json(m["sigma"], where + ".sigma");
    else p.sigma_noise = Vector::Constant(n, noise_sigma_from(m, 1.0, where));
    p.validate();
    return p;
}

inline std::vector<EstimationMode> modes_from(const std::string& s) {
    if (s == "all") return {kAllModes.begin(), kAllModes.end()};
    return {parse_mode(s)};
}

inline int run_estimate(const RunOptions& opt, std::ostream& log) {
    const auto cfg = load_config(opt.config);
    const json& d = cfg.doc;
    check_keys(d, {"model", "prior", "market", "observation", "mode", "known_covariance", "seed"}, "estimate");
    const MixtureModel model = io::model_from_json(io::at(d, "model", "estimate"));
    const auto n = model.n_assets();
    const auto m = static_cast<Eigen::Index>(model.size());

    const json& pj = io::at(d, "prior", "estimate");
    check_keys(pj, {"mean", "cov", "returns_file"}, "estimate.prior");
    std::optional<PriorSpec> prior;
    MixtureWeights prior_weights = MixtureWeights::uniform(model.size());
    if (pj.contains("returns_file")) {
        const fs::path file = resolve(cfg, pj["returns_file"].get<std::string>());
        if (!fs::exists(file)) throw InputError("missing input file: " + file.string());
        const EmFit fit = em_fit_weights(model, io::read_matrix_csv(file));
        prior = fit.prior;
        prior_weights = fit.weights;
    } else {
        prior.emplace(io::vector_from_json(io::at(pj, "mean", "estimate.prior"), "prior.mean"),
                      io::matrix_from_json(io::at(pj, "cov", "estimate.prior"), "prior.cov"));
        if (prior->lambda_hat_minus.size() != m - 1) throw InputError("prior.mean must have m-1 entries");
        prior_weights = MixtureWeights::from_reduced(prior->lambda_hat_minus);
    }

    const MarketParams params = parse_market(io::at(d, "market", "estimate"), n, "estimate.market");
    std::optional<Matrix> known_cov;
    if (d.contains("known_covariance")) known_cov = io::matrix_from_json(d["known_covariance"], "known_covariance");

    const json& oj = io::at(d, "observation", "estimate");
    check_keys(oj, {"x_M", "x_U"}, "estimate.observation");
    const Vector x_M = io::vector_from_json(io::at(oj, "x_M", "observation"), "observation.x_M");
    Vector x_U;
    if (oj.contains("x_U")) {
        x_U = io::vector_from_json(oj["x_U"], "observation.x_U");
    } else {
        const Moments mom = mixture_moments(model, prior_weights);
        x_U = mv_unconstrained(mom.mean, known_cov ? *known_cov : mom.cov, params.delta_U).weights;
    }
    EstimationProblem problem{model, *prior, EquilibriumObservation{x_M, x_U, params}, EstimationMode::combined, known_cov};
    problem.validate();
    const auto modes = modes_from(opt.mode.value_or(get_or<std::string>(d, "mode", "all", "estimate")));

    Manifest manifest("estimate", opt.config, cfg.bytes, get_or<std::uint64_t>(d, "seed", 0, "estimate"));
    json results = json::array();
    for (auto mode : modes) {
        const auto r = solve(problem, mode);
        json jr = io::to_json(r);
        const Moments mom = estimate_moments(model, r);
        jr["mean"] = io::to_json(mom.mean);
        results.push_back(std::move(jr));
        log << to_string(mode) << ": objective " << r.objective << (r.converged ? "" : " (not converged)") << "\n";
    }
    json out{{"results", results}};
    if (known_cov) {
        const LinearCase lc = make_linear_case(model, *known_cov, x_U, params);
        const auto closed = solve_combined_linear(lc, problem.prior, x_M, params.omega());
        const auto numeric = solve_combined(problem);
        const auto post = posterior_linear(lc, problem.prior, x_M, params.omega());
        out["special_case"] = {{"closed_form", io::to_json(closed)},
                               {"numeric", io::to_json(numeric)},
                               {"posterior_mean", io::to_json(post.mean)},
                               {"posterior_cov", io::to_json(post.cov)},
                               {"max_difference", (closed.lambda - numeric.lambda).cwiseAbs().maxCoeff()}};
    }
    manifest.write(opt.out, "estimate.json", io::dump(out));
    manifest.finish(opt.out);
    return kOk;
}

// ---------------------------------------------------------------------------
// backtest
// ---------------------------------------------------------------------------

struct BacktestPlan {
    io::DatasetFiles files;
    BacktestConfig base;
    std::vector<int> rebalance_weeks{4, 13, 26};
    std::vector<double> risk_multipliers{1.0};
};

inline BacktestPlan parse_backtest(const LoadedConfig& c) {
    const json& d = c.doc;
    check_keys(d, {"data", "market", "window_weeks", "rebalance_weeks", "risk_multipliers", "delta0", "delta_U",
                   "cost_ratio", "calibration_weeks", "regimes", "seed"},
               "backtest");
    BacktestPlan plan;
    const json& data = io::at(d, "data", "backtest");
    check_keys(data, {"returns", "market_caps", "vol_index", "risk_free"}, "backtest.data");
    plan.files = {resolve(c, io::at(data, "returns", "backtest.data").get<std::string>()),
                  resolve(c, io::at(data, "market_caps", "backtest.data").get<std::string>()),
                  resolve(c, io::at(data, "vol_index", "backtest.data").get<std::string>()),
                  resolve(c, io::at(data, "risk_free", "backtest.data").get<std::string>())};
    for (const auto& p : {plan.files.returns, plan.files.market_caps, plan.files.vol_index, plan.files.risk_free})
        if (!fs::exists(p)) throw InputError("missing input file: " + p.string());

    auto& b = plan.base;
    if (d.contains("market")) {
        const json& m = d["market"];
        check_keys(m, {"alpha_I", "alpha_N", "noise_ci_half_width"}, "backtest.market");
        b.alpha_I = get_or<double>(m, "alpha_I", b.alpha_I, "market");
        b.alpha_N = get_or<double>(m, "alpha_N", b.alpha_N, "market");
        b.noise_ci_half_width = get_or<double>(m, "noise_ci_half_width", b.noise_ci_half_width, "market");
    }
    b.window_weeks = get_or<int>(d, "window_weeks", b.window_weeks, "backtest");
    b.delta0 = get_or<double>(d, "delta0", b.delta0, "backtest");
    b.delta_U = get_or<double>(d, "delta_U", b.delta_U, "backtest");
    b.cost_ratio = get_or<double>(d, "cost_ratio", b.cost_ratio, "backtest");
    b.calibration_weeks = get_or<int>(d, "calibration_weeks", b.calibration_weeks, "backtest");
    if (d.contains("regimes")) {
        const json& r = d["regimes"];
        check_keys(r, {"bull_rise", "bear_fall", "swing_reversal"}, "backtest.regimes");
        b.regimes.bull_rise = get_or<double>(r, "bull_rise", b.regimes.bull_rise, "regimes");
        b.regimes.bear_fall = get_or<double>(r, "bear_fall", b.regimes.bear_fall, "regimes");
        b.regimes.swing_reversal = get_or<double>(r, "swing_reversal", b.regimes.swing_reversal, "regimes");
    }
    if (d.contains("rebalance_weeks")) plan.rebalance_weeks = get_or<std::vector<int>>(d, "rebalance_weeks", {}, "backtest");
    if (d.contains("risk_multipliers"))
        plan.risk_multipliers = get_or<std::vector<double>>(d, "risk_multipliers", {}, "backtest");
    if (plan.rebalance_weeks.empty()) throw InputError("backtest.rebalance_weeks is empty");
    if (plan.risk_multipliers.empty()) throw InputError("backtest.risk_multipliers is empty");
    return plan;
}

/// Rows: one per (multiplier, rebalance window, strategy), then per-strategy averages across windows.
inline std::string performance_csv(const std::vector<std::tuple<double, int, BacktestReport>>& runs,
                                   const std::vector<double>& multipliers) {
    std::vector<std::vector<std::string>> rows;
    const auto sr_text = [](const std::optional<double>& sr) { return sr ? io::format_double(*sr) : std::string("nan"); };
    for (const auto& [mult, weeks, rep] : runs)
        for (const auto& s : rep.strategies)
            rows.push_back({io::format_double(mult), std::to_string(weeks), std::string(to_string(s.mode)),
                            sr_text(s.metrics.sr), io::format_double(s.metrics.trn), io::format_double(s.metrics.mdd),
                            std::to_string(s.failures)});
    for (double mult : multipliers) {
        for (std::size_t e = 0; e < 3; ++e) {
            double sr = 0.0, trn = 0.0, mdd = 0.0;
            int count = 0, failures = 0;
            bool sr_defined = true;
            for (const auto& [m, weeks, rep] : runs) {
                (void)weeks;
                if (m != mult) continue;
                const auto& s = rep.strategies[e];
                if (s.metrics.sr) sr += *s.metrics.sr;
                else sr_defined = false;
                trn += s.metrics.trn;
                mdd += s.metrics.mdd;
                failures += s.failures;
                ++count;
            }
            rows.push_back({io::format_double(mult), "average", std::string(to_string(kAllModes[e])),
                            sr_defined ? io::format_double(sr / count) : std::string("nan"),
                            io::format_double(trn / count), io::format_double(mdd / count), std::to_string(failures)});
        }
    }
    return io::to_csv({"risk_multiplier", "rebalance_weeks", "strategy", "SR", "TRN", "MDD", "failures"}, rows);
}

inline int run_backtest_cmd(const RunOptions& opt, std::ostream& log) {
    const auto cfg = load_config(opt.config);
    const BacktestPlan plan = parse_backtest(cfg);
    const auto loaded = io::load_dataset(plan.files);
    if (loaded.dropped_rows > 0) log << "dropped " << loaded.dropped_rows << " dates with missing values\n";
    for (int w : plan.rebalance_weeks) {
        BacktestConfig c = plan.base;
        c.rebalance_weeks = w;
        c.validate(loaded.data.periods());
    }

    Manifest manifest("backtest", opt.config, cfg.bytes, get_or<std::uint64_t>(cfg.doc, "seed", 0, "backtest"));
    std::vector<std::tuple<double, int, BacktestReport>> runs;
    json wealth = json::array();
    int failures = 0;
    for (double mult : plan.risk_multipliers) {
        for (int w : plan.rebalance_weeks) {
            BacktestConfig c = plan.base;
            c.rebalance_weeks = w;
            c.days_per_period = BacktestConfig::default_days_per_period(w);
            c.risk_multiplier = mult;
            BacktestReport rep = run_backtest(loaded.data, c);
            json entry{{"risk_multiplier", mult}, {"rebalance_weeks", w}, {"dates", rep.rebalance_dates}};
            for (const auto& s : rep.strategies) {
                entry[std::string(to_string(s.mode))] = {{"wealth", io::to_json(s.wealth)},
                                                         {"weights", io::to_json(s.weights)}};
                failures += s.failures;
            }
            wealth.push_back(std::move(entry));
            log << "multiplier " << mult << ", rebalance every " << w << " weeks: " << rep.rebalance_rows.size()
                << " periods\n";
            runs.emplace_back(mult, w, std::move(rep));
        }
    }
    manifest.write(opt.out, "performance.csv", performance_csv(runs, plan.risk_multipliers));
    manifest.write(opt.out, "wealth.json", io::dump(wealth));
    manifest.set("dropped_rows", loaded.dropped_rows);
    manifest.set("estimator_failures", failures);
    manifest.finish(opt.out);
    if (opt.strict && failures > 0) {
        log << "strict: " << failures << " periods carried previous weights\n";
        return kRuntime;
    }
    return kOk;
}

/// Maps exceptions to exit codes around a command.
template <class Fn>
int guarded(Fn&& fn, std::ostream& err) {
    try {
        return fn();
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kRuntime;
    }
}

}  // namespace mixest::cli
