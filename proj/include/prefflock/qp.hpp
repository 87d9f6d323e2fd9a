#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <limits>
#include <vector>

namespace prefflock::qp {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct QpResult {
    VectorXd x;
    VectorXd lambda;  // one multiplier per constraint row, zero when inactive
    double value = 0.0;
    bool feasible = false;
    int iterations = 0;
};

/// min 1/2 x'Gx + g'x  s.t.  N x <= e, G symmetric positive definite.
/// Dual active-set method in the style of Goldfarb and Idnani: start from the
/// unconstrained minimizer and repeatedly add the most violated constraint,
/// dropping active constraints whose multipliers would turn negative. The
/// small problems here are re-solved from scratch at every step instead of
/// updating factorizations.
inline QpResult solve_qp(const MatrixXd &G, const VectorXd &g, const MatrixXd &N, const VectorXd &e,
                         double tol = 1e-9, int max_iter = 1000) {
    const Eigen::Index n = G.rows(), m = N.rows();
    const MatrixXd Ginv = G.llt().solve(MatrixXd::Identity(n, n));
    QpResult r;
    r.x = -Ginv * g;
    r.lambda = VectorXd::Zero(m);
    std::vector<int> active;
    auto eps = std::numeric_limits<double>::epsilon();

    auto finish = [&](bool ok) {
        r.feasible = ok;
        r.value = 0.5 * r.x.dot(G * r.x) + g.dot(r.x);
        return r;
    };

    while (r.iterations < max_iter) {
        int p = -1;
        double worst = tol;
        for (int k = 0; k < m; ++k) {
            if (std::find(active.begin(), active.end(), k) != active.end()) continue;
            const double v = N.row(k).dot(r.x) - e[k];
            if (v > worst) {
                worst = v;
                p = k;
            }
        }
        if (p < 0) return finish(true);

        const VectorXd np = N.row(p).transpose();
        const double scale = np.dot(Ginv * np);
        for (;;) {
            if (++r.iterations > max_iter) return finish(false);
            const auto na = static_cast<Eigen::Index>(active.size());
            VectorXd rr(na);
            VectorXd dz;
            if (na > 0) {
                MatrixXd Na(na, n);
                for (Eigen::Index i = 0; i < na; ++i) Na.row(i) = N.row(active[i]);
                const MatrixXd S = Na * Ginv * Na.transpose();
                rr = S.ldlt().solve(Na * Ginv * np);
                dz = -Ginv * (np - Na.transpose() * rr);
            } else {
                dz = -Ginv * np;
            }
            const double viol = np.dot(r.x) - e[p];
            const double curv = -np.dot(dz);
            const double inf = std::numeric_limits<double>::infinity();
            const double t2 = curv > 1e3 * eps * scale ? viol / curv : inf;
            double t1 = inf;
            int block = -1;
            for (Eigen::Index i = 0; i < na; ++i) {
                if (rr[i] > 1e3 * eps) {
                    const double ratio = r.lambda[active[i]] / rr[i];
                    if (ratio < t1) {
                        t1 = ratio;
                        block = static_cast<int>(i);
                    }
                }
            }
            if (t1 == inf && t2 == inf) return finish(false);
            const double t = std::min(t1, t2);
            if (t2 != inf) r.x += t * dz;
            for (Eigen::Index i = 0; i < na; ++i) r.lambda[active[i]] -= t * rr[i];
            r.lambda[p] += t;
            if (t2 <= t1) {
                active.push_back(p);
                break;
            }
            r.lambda[active[block]] = 0.0;
            active.erase(active.begin() + block);
        }
    }
    return finish(false);
}

}  // namespace prefflock::qp
