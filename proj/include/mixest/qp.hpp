/**
 * @file qp.hpp
 * @brief Small dense strictly convex QP solver (primal active-set).
 *
 *   minimize    1/2 x'Hx + f'x
 *   subject to  A_eq x  = b_eq
 *               A_in x <= b_in
 *
 * H must be symmetric positive definite and the starting point feasible.
 * Multipliers follow the Lagrangian 1/2 x'Hx + f'x + nu'(A_in x - b_in), so
 * at the optimum nu >= 0 and Hx + f + A_in' nu + A_eq' mu = 0.
 */

#pragma once

#include "mixest/core.hpp"

#include <algorithm>
#include <utility>
#include <vector>

namespace mixest {

struct QuadraticProgram {
    Matrix H;
    Vector f;
    Matrix A_eq;
    Vector b_eq;
    Matrix A_in;
    Vector b_in;
};

struct QpSolution {
    Vector x;
    Vector nu_in;  ///< inequality multipliers (zero for inactive rows)
    Vector mu_eq;
    std::vector<int> active;
    int iterations = 0;
    bool converged = false;
};

namespace detail {

inline Matrix stack_rows(const Matrix& a_eq, const Matrix& a_in, const std::vector<int>& working) {
    Matrix a(a_eq.rows() + static_cast<Eigen::Index>(working.size()), std::max(a_eq.cols(), a_in.cols()));
    if (a_eq.rows() > 0) a.topRows(a_eq.rows()) = a_eq;
    for (std::size_t i = 0; i < working.size(); ++i)
        a.row(a_eq.rows() + static_cast<Eigen::Index>(i)) = a_in.row(working[i]);
    return a;
}

}  // namespace detail

inline QpSolution solve_qp(const QuadraticProgram& qp, Vector x0, int max_iter = 0) {
    const Eigen::Index n = qp.H.rows();
    require_dims(qp.H.cols() == n && qp.f.size() == n, "QP Hessian/gradient size mismatch");
    require_dims(qp.A_eq.rows() == qp.b_eq.size() && qp.A_in.rows() == qp.b_in.size(),
                 "QP constraint size mismatch");
    require_dims(qp.A_eq.rows() == 0 || qp.A_eq.cols() == n, "A_eq column mismatch");
    require_dims(qp.A_in.rows() == 0 || qp.A_in.cols() == n, "A_in column mismatch");
    require_dims(x0.size() == n, "QP start dimension mismatch");

    const Eigen::Index n_eq = qp.A_eq.rows();
    const Eigen::Index n_in = qp.A_in.rows();
    if (max_iter <= 0) max_iter = static_cast<int>(50 * (n + n_in + 1));

    QpSolution sol;
    sol.x = std::move(x0);
    sol.nu_in = Vector::Zero(n_in);
    sol.mu_eq = Vector::Zero(n_eq);

    std::vector<int> working;
    std::vector<char> in_working(static_cast<std::size_t>(n_in), 0);

    for (int iter = 0; iter < max_iter; ++iter) {
        sol.iterations = iter + 1;
        const Matrix a = detail::stack_rows(qp.A_eq, qp.A_in, working);
        const Eigen::Index k = a.rows();
        Matrix kkt = Matrix::Zero(n + k, n + k);
        kkt.topLeftCorner(n, n) = qp.H;
        if (k > 0) {
            kkt.topRightCorner(n, k) = a.transpose();
            kkt.bottomLeftCorner(k, n) = a;
        }
        Vector rhs = Vector::Zero(n + k);
        rhs.head(n) = -(qp.H * sol.x + qp.f);
        const Vector step = kkt.fullPivLu().solve(rhs);
        const Vector p = step.head(n);
        const Vector mult = step.tail(k);

        const double p_tol = 1e-13 * std::max(1.0, sol.x.cwiseAbs().maxCoeff());
        if (p.cwiseAbs().maxCoeff() <= p_tol) {
            // Stationary on the working set: check inequality multiplier signs.
            const double scale = std::max(1.0, qp.H.cwiseAbs().maxCoeff() * sol.x.cwiseAbs().maxCoeff() +
                                                   qp.f.cwiseAbs().maxCoeff());
            Eigen::Index worst = -1;
            double most_negative = -1e-12 * scale;
            for (std::size_t i = 0; i < working.size(); ++i) {
                const double v = mult[n_eq + static_cast<Eigen::Index>(i)];
                if (v < most_negative) {
                    most_negative = v;
                    worst = static_cast<Eigen::Index>(i);
                }
            }
            if (worst < 0) {
                sol.nu_in.setZero();
                for (std::size_t i = 0; i < working.size(); ++i)
                    sol.nu_in[working[i]] = std::max(0.0, mult[n_eq + static_cast<Eigen::Index>(i)]);
                sol.mu_eq = mult.head(n_eq);
                sol.active = working;
                std::sort(sol.active.begin(), sol.active.end());
                sol.converged = true;
                return sol;
            }
            in_working[static_cast<std::size_t>(working[static_cast<std::size_t>(worst)])] = 0;
            working.erase(working.begin() + worst);
            continue;
        }

        double alpha = 1.0;
        int blocking = -1;
        for (Eigen::Index i = 0; i < n_in; ++i) {
            if (in_working[static_cast<std::size_t>(i)]) continue;
            const double ap = qp.A_in.row(i).dot(p);
            if (ap <= 1e-15) continue;
            const double slack = std::max(0.0, qp.b_in[i] - qp.A_in.row(i).dot(sol.x));
            const double ratio = slack / ap;
            if (ratio < alpha) {
                alpha = ratio;
                blocking = static_cast<int>(i);
            }
        }
        sol.x += alpha * p;
        if (blocking >= 0) {
            working.push_back(blocking);
            in_working[static_cast<std::size_t>(blocking)] = 1;
        }
    }
    sol.active = working;
    std::sort(sol.active.begin(), sol.active.end());
    return sol;
}

/// KKT stationarity residual ||Hx + f + A_in'nu + A_eq'mu||_inf.
inline double qp_stationarity_residual(const QuadraticProgram& qp, const QpSolution& s) {
    Vector r = qp.H * s.x + qp.f;
    if (qp.A_in.rows() > 0) r += qp.A_in.transpose() * s.nu_in;
    if (qp.A_eq.rows() > 0) r += qp.A_eq.transpose() * s.mu_eq;
    return r.cwiseAbs().maxCoeff();
}

/// Gamma written as G x <= h with G = [1'; -I], h = (1, 0, ..., 0)'.
inline std::pair<Matrix, Vector> gamma_constraints(Eigen::Index dim) {
    Matrix g(dim + 1, dim);
    g.row(0).setOnes();
    g.bottomRows(dim) = -Matrix::Identity(dim, dim);
    Vector h = Vector::Zero(dim + 1);
    h[0] = 1.0;
    return {g, h};
}

}  // namespace mixest
