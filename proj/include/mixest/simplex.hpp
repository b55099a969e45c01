/**
 * @file simplex.hpp
 * @brief Euclidean projections onto the probability simplex and onto the
 *        reduced-weight polytope {x >= 0, 1'x <= 1}.
 */

#pragma once

#include "mixest/core.hpp"

#include <algorithm>
#include <functional>
#include <vector>

namespace mixest {

/// Projection onto {x >= 0, 1'x = radius} by the sort-and-threshold rule.
inline Vector project_onto_simplex(const Vector& y, double radius = 1.0) {
    const auto n = y.size();
    if (n == 0) return y;
    std::vector<double> u(y.data(), y.data() + n);
    std::sort(u.begin(), u.end(), std::greater<>());
    double cumsum = 0.0;
    double theta = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
        cumsum += u[j];
        const double t = (cumsum - radius) / static_cast<double>(j + 1);
        if (u[j] - t > 0.0) theta = t;
    }
    return (y.array() - theta).max(0.0).matrix();
}

/// Projection onto Gamma = {x >= 0, 1'x <= 1}, the feasible set of the
/// reduced mixture weights.
inline Vector project_onto_gamma(const Vector& y) {
    Vector clipped = y.cwiseMax(0.0);
    if (clipped.sum() <= 1.0) return clipped;
    return project_onto_simplex(y, 1.0);
}

inline bool in_gamma(const Vector& x, double tol = 1e-12) {
    return (x.array() >= -tol).all() && x.sum() <= 1.0 + tol;
}

/// Vertices of Gamma: the origin and the unit vectors.
inline std::vector<Vector> gamma_vertices(Eigen::Index dim) {
    std::vector<Vector> out;
    out.push_back(Vector::Zero(dim));
    for (Eigen::Index k = 0; k < dim; ++k) out.push_back(Vector::Unit(dim, k));
    return out;
}

/// Visits every point of Gamma on the lattice {i * step} (brute-force helper).
template <class Fn>
void for_each_gamma_grid_point(Eigen::Index dim, double step, Fn&& fn) {
    const int ticks = static_cast<int>(std::lround(1.0 / step));
    std::vector<int> idx(static_cast<std::size_t>(dim), 0);
    Vector point(dim);
    auto recurse = [&](auto&& self, Eigen::Index k, int remaining) -> void {
        if (k == dim) {
            for (Eigen::Index j = 0; j < dim; ++j) point[j] = idx[j] * step;
            fn(static_cast<const Vector&>(point));
            return;
        }
        for (int i = 0; i <= remaining; ++i) {
            idx[k] = i;
            self(self, k + 1, remaining - i);
        }
    };
    recurse(recurse, 0, ticks);
}

}  // namespace mixest
