/**
 * @file estimator.hpp
 * @brief Backward-looking, forward-looking and combined (MAP) estimation of
 *        the mixture weights.
 *
 * With d = lambda_minus - lambda_hat_minus and the market residual
 * e(lambda) = (x_M - alpha_U x_U - alpha_I g(lambda)) / alpha_N,
 *
 *   F1 = d' Phi^{-1} d
 *   F2 = e' diag(sigma)^{-2} e
 *
 * backward minimizes F1, forward minimizes F2 and combined minimizes F1 + F2,
 * all over Gamma = {lambda_minus >= 0, 1'lambda_minus <= 1}.
 */

#pragma once

#include "mixest/core.hpp"
#include "mixest/equilibrium.hpp"
#include "mixest/gmm.hpp"
#include "mixest/qp.hpp"
#include "mixest/simplex.hpp"

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

namespace mixest {

enum class EstimationMode { backward, forward, combined };

inline std::string_view to_string(EstimationMode mode) {
    switch (mode) {
        case EstimationMode::backward: return "backward";
        case EstimationMode::forward: return "forward";
        case EstimationMode::combined: return "combined";
    }
    return "unknown";
}

/// Reporting order used by the simulation and backtest drivers.
inline constexpr std::array<EstimationMode, 3> kAllModes{EstimationMode::backward, EstimationMode::combined,
                                                         EstimationMode::forward};

inline EstimationMode parse_mode(std::string_view s) {
    if (s == "backward") return EstimationMode::backward;
    if (s == "forward") return EstimationMode::forward;
    if (s == "combined") return EstimationMode::combined;
    throw std::invalid_argument("unknown estimation mode '" + std::string(s) + "'");
}

struct EstimationProblem {
    MixtureModel model;
    PriorSpec prior;
    EquilibriumObservation observation;
    EstimationMode mode = EstimationMode::combined;
    /// Known-covariance special case: g uses this matrix instead of Sigma(lambda).
    std::optional<Matrix> fixed_covariance;

    void validate() const {
        observation.validate();
        const auto m = static_cast<Eigen::Index>(model.size());
        require_dims(prior.lambda_hat_minus.size() == m - 1, "prior dimension must be m-1");
        require_dims(observation.x_M.size() == model.n_assets(), "observation dimension must equal asset count");
    }
};

struct EstimationResult {
    EstimationMode mode = EstimationMode::combined;
    Vector lambda_minus;
    Vector lambda;             ///< full weights, lambda_m = 1 - 1'lambda_minus
    double objective = 0.0;
    bool converged = false;
    std::vector<int> active_set;  ///< rows of G lambda <= h that hold with equality
    Vector multipliers;           ///< nu*, filled by the QP paths
    int iterations = 0;
    bool ridge_applied = false;

    MixtureWeights weights() const { return MixtureWeights::from_reduced(lambda_minus); }
};

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

inline double eval_F1(const PriorSpec& prior, const Vector& lambda_minus) {
    require_dims(lambda_minus.size() == prior.lambda_hat_minus.size(), "lambda_minus has wrong length");
    if (lambda_minus.size() == 0) return 0.0;
    const Vector d = lambda_minus - prior.lambda_hat_minus;
    return d.dot(spd_solve(prior.phi, d));
}

namespace detail {

struct Evaluation {
    double value = 0.0;
    Vector gradient;
    Matrix gauss_newton;  ///< 2 J'J of the stacked residual
    bool ridge_applied = false;
    bool finite = true;
};

/// F = use_prior * F1 + use_market * F2 with gradient and Gauss-Newton matrix.
class Objective {
public:
    Objective(const EstimationProblem& problem, bool use_prior, bool use_market)
        : problem_(problem), use_prior_(use_prior), use_market_(use_market) {
        const auto& obs = problem.observation;
        const auto& p = obs.params;
        target_ = (obs.x_M - p.alpha_U * obs.x_U_star) / p.alpha_N;
        scale_ = p.alpha_I / p.alpha_N;
        inv_var_ = p.sigma_noise.array().square().inverse().matrix();
        const auto dim = problem.prior.lambda_hat_minus.size();
        phi_inv_ = dim > 0 ? spd_inverse(problem.prior.phi) : Matrix(0, 0);
    }

    Evaluation evaluate(const Vector& lambda_minus, bool derivatives) const {
        const auto dim = lambda_minus.size();
        Evaluation ev;
        ev.gradient = Vector::Zero(dim);
        ev.gauss_newton = Matrix::Zero(dim, dim);
        if (use_prior_ && dim > 0) {
            const Vector d = lambda_minus - problem_.prior.lambda_hat_minus;
            const Vector pd = phi_inv_ * d;
            ev.value += d.dot(pd);
            if (derivatives) {
                ev.gradient += 2.0 * pd;
                ev.gauss_newton += 2.0 * phi_inv_;
            }
        }
        if (use_market_) {
            ForwardMap g;
            try {
                g = g_forward_full(problem_.model, lambda_minus, problem_.observation.params.delta_I,
                                   derivatives && dim > 0,
                                   problem_.fixed_covariance ? &*problem_.fixed_covariance : nullptr);
            } catch (const NumericalError&) {
                ev.value = std::numeric_limits<double>::infinity();
                ev.finite = false;
                return ev;
            }
            ev.ridge_applied = g.ridge_applied;
            const Vector e = target_ - scale_ * g.value;
            const Vector we = inv_var_.cwiseProduct(e);
            ev.value += e.dot(we);
            if (derivatives && dim > 0) {
                const Matrix wj = inv_var_.asDiagonal() * g.jacobian;
                ev.gradient += -2.0 * scale_ * g.jacobian.transpose() * we;
                ev.gauss_newton += 2.0 * scale_ * scale_ * g.jacobian.transpose() * wj;
            }
        }
        ev.finite = std::isfinite(ev.value);
        return ev;
    }

    double value(const Vector& lambda_minus) const { return evaluate(lambda_minus, false).value; }

private:
    const EstimationProblem& problem_;
    bool use_prior_;
    bool use_market_;
    Vector target_;
    double scale_ = 0.0;
    Vector inv_var_;
    Matrix phi_inv_;
};

inline std::pair<bool, bool> mode_terms(EstimationMode mode) {
    switch (mode) {
        case EstimationMode::backward: return {true, false};
        case EstimationMode::forward: return {false, true};
        case EstimationMode::combined: return {true, true};
    }
    return {true, true};
}

inline std::vector<int> active_rows(const Vector& lambda_minus, double tol = 1e-10) {
    std::vector<int> rows;
    if (lambda_minus.sum() >= 1.0 - tol) rows.push_back(0);
    for (Eigen::Index k = 0; k < lambda_minus.size(); ++k)
        if (lambda_minus[k] <= tol) rows.push_back(static_cast<int>(k + 1));
    return rows;
}

inline EstimationResult make_result(EstimationMode mode, Vector lambda_minus, double objective) {
    EstimationResult r;
    r.mode = mode;
    r.lambda = MixtureWeights::from_reduced(lambda_minus).full();
    r.active_set = active_rows(lambda_minus);
    r.lambda_minus = std::move(lambda_minus);
    r.objective = objective;
    return r;
}

}  // namespace detail

/// F2 at lambda_minus; +infinity when the mixture covariance is singular there.
inline double eval_F2(const EstimationProblem& problem, const Vector& lambda_minus) {
    return detail::Objective(problem, false, true).value(lambda_minus);
}

struct ObjectiveValueAndGradient {
    double value;
    Vector gradient;
};

/// Objective of the given mode with its analytic gradient.
inline ObjectiveValueAndGradient objective_with_gradient(const EstimationProblem& problem, EstimationMode mode,
                                                         const Vector& lambda_minus) {
    const auto [prior, market] = detail::mode_terms(mode);
    auto ev = detail::Objective(problem, prior, market).evaluate(lambda_minus, true);
    return {ev.value, std::move(ev.gradient)};
}

inline double objective_value(const EstimationProblem& problem, EstimationMode mode, const Vector& lambda_minus) {
    const auto [prior, market] = detail::mode_terms(mode);
    return detail::Objective(problem, prior, market).value(lambda_minus);
}

// ---------------------------------------------------------------------------
// Solvers
// ---------------------------------------------------------------------------

struct SolverOptions {
    int max_iter = 2000;
    double pg_tol = 1e-8;      ///< ||lambda - P(lambda - grad)||_inf
    double armijo = 1e-4;
    double tie_tol = 1e-12;
};

namespace detail {

struct LocalRun {
    Vector lambda_minus;
    double value = 0.0;
    int iterations = 0;
    bool converged = false;
    bool ridge_applied = false;
};

inline double projected_gradient_norm(const Vector& x, const Vector& grad) {
    return (x - project_onto_gamma(x - grad)).cwiseAbs().maxCoeff();
}

/// Central differences of the analytic gradient; empty if any probe is non-finite.
inline Matrix gradient_difference_hessian(const Objective& obj, const Vector& x) {
    const auto dim = x.size();
    Matrix h(dim, dim);
    for (Eigen::Index j = 0; j < dim; ++j) {
        const double step = 1e-6 * std::max(1.0, std::abs(x[j]));
        Vector up = x, dn = x;
        up[j] += step;
        dn[j] -= step;
        const Evaluation a = obj.evaluate(up, true);
        const Evaluation b = obj.evaluate(dn, true);
        if (!a.finite || !b.finite || a.ridge_applied != b.ridge_applied) return Matrix();
        h.col(j) = (a.gradient - b.gradient) / (2.0 * step);
    }
    return symmetrize(h);
}

/// Second-order metric: the differenced Hessian when it is safely positive definite, else Gauss-Newton.
inline Matrix step_metric(const Objective& obj, const Vector& x, const Evaluation& ev) {
    const Matrix fd = gradient_difference_hessian(obj, x);
    const double scale = std::max(ev.gauss_newton.cwiseAbs().maxCoeff(), 1e-300);
    if (fd.size() > 0 && fd.allFinite() && smallest_eigenvalue(fd) > 1e-6 * scale) return fd;
    return ev.gauss_newton;
}

/**
 * Projected descent on Gamma. Each step minimizes a quadratic model over
 * Gamma (Newton where the Hessian is positive definite, Gauss-Newton
 * otherwise) and backtracks with Armijo; if that fails a Euclidean
 * projected-gradient step is tried.
 */
inline LocalRun descend(const Objective& obj, Vector x, const SolverOptions& opt) {
    const auto dim = x.size();
    const auto [g_mat, h_vec] = gamma_constraints(dim);
    LocalRun run;
    x = project_onto_gamma(x);
    Evaluation ev = obj.evaluate(x, true);
    run.ridge_applied = ev.ridge_applied;
    if (!ev.finite) {
        run.lambda_minus = x;
        run.value = ev.value;
        return run;
    }
    for (int it = 0; it < opt.max_iter; ++it) {
        run.iterations = it + 1;
        if (projected_gradient_norm(x, ev.gradient) < opt.pg_tol) {
            run.converged = true;
            break;
        }
        // Scaled step: min 1/2 d'Hd + grad'd s.t. G(x + d) <= h.
        Matrix hess = step_metric(obj, x, ev);
        const double damping = 1e-12 * std::max(1.0, hess.trace() / static_cast<double>(dim));
        hess += damping * Matrix::Identity(dim, dim);
        QuadraticProgram qp{hess, ev.gradient, Matrix(0, dim), Vector(0), g_mat, h_vec - g_mat * x};
        const QpSolution sub = solve_qp(qp, Vector::Zero(dim));
        Vector d = sub.x;
        double slope = ev.gradient.dot(d);

        bool accepted = false;
        Vector x_new;
        Evaluation ev_new;
        if (slope < 0.0) {
            double t = 1.0;
            for (int k = 0; k < 60; ++k, t *= 0.5) {
                x_new = project_onto_gamma(x + t * d);
                ev_new = obj.evaluate(x_new, true);
                if (ev_new.finite && ev_new.value <= ev.value + opt.armijo * t * slope) {
                    accepted = true;
                    break;
                }
            }
        }
        if (!accepted) {
            // Euclidean projected-gradient fallback along the projection arc.
            const double hnorm = std::max(ev.gauss_newton.cwiseAbs().maxCoeff(), 1e-300);
            double s = 1.0 / hnorm;
            for (int k = 0; k < 80; ++k, s *= 0.5) {
                x_new = project_onto_gamma(x - s * ev.gradient);
                const Vector step = x_new - x;
                if (step.cwiseAbs().maxCoeff() == 0.0) break;
                ev_new = obj.evaluate(x_new, true);
                if (ev_new.finite && ev_new.value <= ev.value + opt.armijo * ev.gradient.dot(step)) {
                    accepted = true;
                    break;
                }
            }
        }
        if (!accepted) {
            // No descent available at working precision: x is stationary.
            run.converged = d.cwiseAbs().maxCoeff() <= 1e-10;
            break;
        }
        const double moved = (x_new - x).cwiseAbs().maxCoeff();
        x = std::move(x_new);
        ev = std::move(ev_new);
        run.ridge_applied = run.ridge_applied || ev.ridge_applied;
        if (moved <= 1e-15 * std::max(1.0, x.cwiseAbs().maxCoeff())) {
            run.converged = true;
            break;
        }
    }
    run.lambda_minus = std::move(x);
    run.value = ev.value;
    return run;
}

inline std::vector<Vector> start_points(const PriorSpec& prior, Eigen::Index dim) {
    std::vector<Vector> starts;
    starts.push_back(project_onto_gamma(prior.lambda_hat_minus));
    starts.push_back(Vector::Constant(dim, 1.0 / static_cast<double>(dim + 1)));
    for (auto& v : gamma_vertices(dim)) starts.push_back(std::move(v));
    return starts;
}

inline EstimationResult solve_multistart(const EstimationProblem& problem, EstimationMode mode,
                                         const SolverOptions& opt) {
    problem.validate();
    const auto dim = problem.prior.lambda_hat_minus.size();
    const auto [use_prior, use_market] = mode_terms(mode);
    const Objective obj(problem, use_prior, use_market);
    if (dim == 0) {
        auto r = make_result(mode, Vector(0), obj.value(Vector(0)));
        r.converged = true;
        return r;
    }

    std::optional<LocalRun> best;
    bool ridge = false;
    int total_iter = 0;
    for (const auto& start : start_points(problem.prior, dim)) {
        LocalRun run = descend(obj, start, opt);
        ridge = ridge || run.ridge_applied;
        total_iter += run.iterations;
        if (!std::isfinite(run.value)) continue;
        if (!best || run.value < best->value - opt.tie_tol) {
            best = std::move(run);
        } else if (std::abs(run.value - best->value) <= opt.tie_tol) {
            const double a = (run.lambda_minus - problem.prior.lambda_hat_minus).norm();
            const double b = (best->lambda_minus - problem.prior.lambda_hat_minus).norm();
            if (a < b) best = std::move(run);
        }
    }
    if (!best) {
        auto fallback = project_onto_gamma(problem.prior.lambda_hat_minus);
        auto r = make_result(mode, fallback, obj.value(fallback));
        r.ridge_applied = ridge;
        return r;
    }
    auto r = make_result(mode, best->lambda_minus, obj.value(best->lambda_minus));
    r.converged = best->converged;
    r.iterations = total_iter;
    r.ridge_applied = ridge;
    return r;
}

}  // namespace detail

/**
 * @brief Minimizes F1 over Gamma: the Phi^{-1}-metric projection of the
 *        prior mean, solved as a convex QP.
 */
inline EstimationResult solve_backward(const EstimationProblem& problem) {
    const auto dim = problem.prior.lambda_hat_minus.size();
    require_dims(static_cast<Eigen::Index>(problem.model.size()) == dim + 1, "prior dimension must be m-1");
    if (dim == 0) {
        auto r = detail::make_result(EstimationMode::backward, Vector(0), 0.0);
        r.converged = true;
        return r;
    }
    const Matrix phi_inv = spd_inverse(problem.prior.phi);
    const auto [g_mat, h_vec] = gamma_constraints(dim);
    QuadraticProgram qp{2.0 * phi_inv, -2.0 * phi_inv * problem.prior.lambda_hat_minus,
                        Matrix(0, dim), Vector(0), g_mat, h_vec};
    const QpSolution sol = solve_qp(qp, project_onto_gamma(problem.prior.lambda_hat_minus));
    Vector lam = sol.x;
    auto r = detail::make_result(EstimationMode::backward, lam, eval_F1(problem.prior, lam));
    r.converged = sol.converged;
    r.iterations = sol.iterations;
    r.multipliers = sol.nu_in;
    return r;
}

inline EstimationResult solve_forward(const EstimationProblem& problem, const SolverOptions& opt = {}) {
    return detail::solve_multistart(problem, EstimationMode::forward, opt);
}

inline EstimationResult solve_combined(const EstimationProblem& problem, const SolverOptions& opt = {}) {
    return detail::solve_multistart(problem, EstimationMode::combined, opt);
}

inline EstimationResult solve(const EstimationProblem& problem, EstimationMode mode, const SolverOptions& opt = {}) {
    switch (mode) {
        case EstimationMode::backward: return solve_backward(problem);
        case EstimationMode::forward: return solve_forward(problem, opt);
        case EstimationMode::combined: return solve_combined(problem, opt);
    }
    throw std::invalid_argument("unknown mode");
}

inline EstimationResult solve(const EstimationProblem& problem, const SolverOptions& opt = {}) {
    return solve(problem, problem.mode, opt);
}

// ---------------------------------------------------------------------------
// Known-covariance special case: x_M = q0 + P lambda_minus + eps
// ---------------------------------------------------------------------------

struct LinearCase {
    Vector q0;
    Matrix P;
    Matrix G;
    Vector h;
};

/// Builds (q0, P, G, h) assuming Sigma_U = Sigma_I = sigma and delta_U = delta_I.
inline LinearCase make_linear_case(const MixtureModel& model, const Matrix& sigma, const Vector& x_U,
                                   const MarketParams& params) {
    const auto m = static_cast<Eigen::Index>(model.size());
    const auto n = model.n_assets();
    require(m >= 2, "linear case needs at least two components");
    require_dims(sigma.rows() == n && sigma.cols() == n && x_U.size() == n, "linear case dimension mismatch");
    Eigen::LLT<Matrix> llt(params.delta_I * sigma);
    if (llt.info() != Eigen::Success) throw NumericalError("covariance is not positive definite");
    const auto& last = model[static_cast<std::size_t>(m - 1)].mu();
    LinearCase lc;
    lc.q0 = params.alpha_U * x_U + params.alpha_I * llt.solve(last);
    Matrix diffs(n, m - 1);
    for (Eigen::Index k = 0; k + 1 < m; ++k) diffs.col(k) = model[static_cast<std::size_t>(k)].mu() - last;
    lc.P = params.alpha_I * llt.solve(diffs);
    std::tie(lc.G, lc.h) = gamma_constraints(m - 1);
    return lc;
}

struct PosteriorNormal {
    Vector mean;
    Matrix cov;
};

namespace detail {

struct LinearSystem {
    Matrix precision;  ///< Lambda = Phi^{-1} + P' Omega^{-1} P
    Vector kappa;      ///< Phi^{-1} lambda_hat + P' Omega^{-1} (x_M - q0)
};

inline LinearSystem linear_system(const LinearCase& lc, const PriorSpec& prior, const Vector& x_M,
                                  const Matrix& omega) {
    require_dims(lc.P.cols() == prior.lambda_hat_minus.size(), "P must have m-1 columns");
    require_dims(lc.P.rows() == x_M.size() && omega.rows() == x_M.size(), "linear case dimension mismatch");
    const Matrix phi_inv = spd_inverse(prior.phi);
    const Matrix omega_inv = spd_inverse(omega);
    return {symmetrize(phi_inv + lc.P.transpose() * omega_inv * lc.P),
            phi_inv * prior.lambda_hat_minus + lc.P.transpose() * omega_inv * (x_M - lc.q0)};
}

}  // namespace detail

/// Gaussian posterior of lambda_minus given x_M (constraints ignored).
inline PosteriorNormal posterior_linear(const LinearCase& lc, const PriorSpec& prior, const Vector& x_M,
                                        const Matrix& omega) {
    const auto sys = detail::linear_system(lc, prior, x_M, omega);
    const Matrix cov = spd_inverse(sys.precision);
    return {cov * sys.kappa, cov};
}

/**
 * @brief Combined estimate in the known-covariance case.
 *
 * Returns Lambda^{-1} kappa with nu* = 0 when it lies in Gamma; otherwise
 * solves min ||lambda - Lambda^{-1} kappa||^2_Lambda s.t. G lambda <= h and
 * reports nu* from 2 Lambda (lambda - Lambda^{-1} kappa) + G' nu* = 0.
 */
inline EstimationResult solve_combined_linear(const LinearCase& lc, const PriorSpec& prior, const Vector& x_M,
                                              const Matrix& omega) {
    const auto sys = detail::linear_system(lc, prior, x_M, omega);
    Eigen::LLT<Matrix> llt(sys.precision);
    if (llt.info() != Eigen::Success) throw NumericalError("posterior precision is not positive definite");
    const Vector unconstrained = llt.solve(sys.kappa);

    const auto objective = [&](const Vector& lam) {
        const Vector r = x_M - lc.q0 - lc.P * lam;
        return eval_F1(prior, lam) + r.dot(spd_solve(omega, r));
    };

    EstimationResult r;
    if (in_gamma(unconstrained, 0.0)) {
        r = detail::make_result(EstimationMode::combined, unconstrained, objective(unconstrained));
        r.multipliers = Vector::Zero(lc.G.rows());
        r.converged = true;
        return r;
    }
    QuadraticProgram qp{2.0 * sys.precision, -2.0 * sys.kappa, Matrix(0, unconstrained.size()), Vector(0),
                        lc.G, lc.h};
    const QpSolution sol = solve_qp(qp, project_onto_gamma(unconstrained));
    r = detail::make_result(EstimationMode::combined, sol.x, objective(sol.x));
    r.multipliers = sol.nu_in;
    r.converged = sol.converged;
    r.iterations = sol.iterations;
    return r;
}

/// Moments of the mixture at the estimated weights.
inline Moments estimate_moments(const MixtureModel& model, const EstimationResult& result) {
    return mixture_moments(model, result.weights());
}

}  // namespace mixest
