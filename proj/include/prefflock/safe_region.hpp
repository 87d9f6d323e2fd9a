#pragma once

#include "prefflock/geometry.hpp"
#include "prefflock/world.hpp"

#include <nlohmann/json.hpp>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace prefflock::region {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct RegionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// {x : A x <= b}, one unit normal per row.
struct Polytope {
    Eigen::Matrix<double, Eigen::Dynamic, 3> A;
    VectorXd b;

    [[nodiscard]] int rows() const { return static_cast<int>(A.rows()); }
    [[nodiscard]] bool contains(const Vec3 &x, double tol = 0.0) const {
        return ((A * x - b).array() <= tol).all();
    }
    [[nodiscard]] bool contains_strict(const Vec3 &x) const { return ((A * x - b).array() < 0.0).all(); }
    void add(const Vec3 &a, double off) {
        A.conservativeResize(A.rows() + 1, Eigen::NoChange);
        b.conservativeResize(b.size() + 1);
        A.row(A.rows() - 1) = a.transpose();
        b[b.size() - 1] = off;
    }
};

/// Image of the unit ball: {C u + d : |u| <= 1}.
struct Ellipsoid {
    Mat3 C = Mat3::Identity();
    Vec3 d = Vec3::Zero();

    [[nodiscard]] double logdet() const { return std::log(C.determinant()); }
    /// max_j (|C a_j| + a_j.d - b_j); <= 0 means inscribed.
    [[nodiscard]] double containment_gap(const Polytope &P) const {
        double worst = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < P.rows(); ++j) {
            const Vec3 a = P.A.row(j).transpose();
            worst = std::max(worst, (C * a).norm() + a.dot(d) - P.b[j]);
        }
        return worst;
    }
};

struct DilatedPolytope {
    Polytope poly;  // same rows, offsets B
    bool empty = false;
};

inline Polytope bounds_polytope(const Box &bounds) {
    Polytope P;
    for (int a = 0; a < 3; ++a) {
        P.add(Vec3::Unit(a), bounds.max_corner[a]);
        P.add(-Vec3::Unit(a), -bounds.min_corner[a]);
    }
    return P;
}

// ---------------------------------------------------------------------------
// Hyperplane step

/// argmin over the box of (x - d)^T Q (x - d). Every coordinate is either at
/// a face or free; the best feasible stationary point over all 27 patterns is
/// the global minimum.
inline Vec3 closest_point_in_metric(const Box &box, const Mat3 &Q, const Vec3 &d) {
    Vec3 best = box.closest_point(d);
    double best_val = (best - d).dot(Q * (best - d));
    for (int code = 0; code < 27; ++code) {
        int pattern[3] = {code % 3, (code / 3) % 3, code / 9};  // 0 free, 1 lo, 2 hi
        Vec3 x = d;
        std::vector<int> free;
        for (int a = 0; a < 3; ++a) {
            if (pattern[a] == 0) free.push_back(a);
            else x[a] = pattern[a] == 1 ? box.min_corner[a] : box.max_corner[a];
        }
        if (!free.empty()) {
            const int nf = static_cast<int>(free.size());
            MatrixXd Qff(nf, nf);
            VectorXd rhs(nf);
            for (int i = 0; i < nf; ++i) {
                rhs[i] = 0.0;
                for (int a = 0; a < 3; ++a)
                    if (pattern[a] != 0) rhs[i] -= Q(free[i], a) * (x[a] - d[a]);
                for (int k = 0; k < nf; ++k) Qff(i, k) = Q(free[i], free[k]);
            }
            const VectorXd y = Qff.ldlt().solve(rhs);
            bool inside = true;
            for (int i = 0; i < nf; ++i) {
                x[free[i]] = d[free[i]] + y[i];
                if (x[free[i]] < box.min_corner[free[i]] || x[free[i]] > box.max_corner[free[i]]) inside = false;
            }
            if (!inside) continue;
        }
        const double val = (x - d).dot(Q * (x - d));
        if (val < best_val) {
            best_val = val;
            best = x;
        }
    }
    return best;
}

/// Planes tangent to the inflated ellipsoid at each obstacle's closest point,
/// nearest obstacles first, skipping obstacles already cut off; workspace
/// faces appended last.
inline Polytope separating_hyperplanes(const std::vector<Box> &obstacles, const Ellipsoid &E, const Box &bounds) {
    const Mat3 Cinv = E.C.inverse();
    const Mat3 Q = Cinv.transpose() * Cinv;
    struct Candidate {
        double dist;
        Vec3 point;
        const Box *box;
    };
    std::vector<Candidate> cands;
    for (const auto &o : obstacles) {
        if (o.contains(E.d)) throw RegionError("ellipsoid center lies inside an obstacle");
        const Vec3 x = closest_point_in_metric(o, Q, E.d);
        cands.push_back({(x - E.d).dot(Q * (x - E.d)), x, &o});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate &a, const Candidate &b) { return a.dist < b.dist; });

    Polytope P;
    for (const auto &c : cands) {
        bool excluded = false;
        const auto verts = c.box->vertices();
        for (int j = 0; j < P.rows() && !excluded; ++j) {
            excluded = std::all_of(verts.begin(), verts.end(),
                                   [&](const Vec3 &v) { return P.A.row(j).dot(v) >= P.b[j]; });
        }
        if (excluded) continue;
        Vec3 a = Q * (c.point - E.d);
        a.normalize();
        P.add(a, a.dot(c.point));
    }
    const Polytope W = bounds_polytope(bounds);
    for (int j = 0; j < W.rows(); ++j) P.add(W.A.row(j).transpose(), W.b[j]);
    return P;
}

// ---------------------------------------------------------------------------
// Interior-point helpers

namespace detail {

/// Symmetric basis E_k for C = sum c_k E_k.
inline const std::array<Mat3, 6> &sym_basis() {
    static const std::array<Mat3, 6> basis = [] {
        std::array<Mat3, 6> e;
        int k = 0;
        for (int i = 0; i < 3; ++i)
            for (int j = i; j < 3; ++j) {
                e[k].setZero();
                e[k](i, j) = 1.0;
                e[k](j, i) = 1.0;
                ++k;
            }
        return e;
    }();
    return basis;
}

inline Mat3 sym_from(const Eigen::Matrix<double, 6, 1> &c) {
    Mat3 C = Mat3::Zero();
    for (int k = 0; k < 6; ++k) C += c[k] * sym_basis()[k];
    return C;
}

inline Eigen::Matrix<double, 6, 1> sym_to(const Mat3 &C) {
    Eigen::Matrix<double, 6, 1> c;
    int k = 0;
    for (int i = 0; i < 3; ++i)
        for (int j = i; j < 3; ++j) c[k++] = C(i, j);
    return c;
}

}  // namespace detail

/// Point maximizing the inscribed-ball radius, with that radius. The radius is
/// negative when the polytope is empty. Requires a bounded polytope.
struct ChebyshevResult {
    Vec3 center = Vec3::Zero();
    double radius = 0.0;
};

inline ChebyshevResult chebyshev_center(const Polytope &P, double radius_cap = 1e6) {
    const int m = P.rows();
    if (m == 0) throw RegionError("chebyshev_center: polytope has no rows");
    VectorXd norms(m);
    for (int j = 0; j < m; ++j) norms[j] = P.A.row(j).norm();
    Eigen::Vector4d z = Eigen::Vector4d::Zero();  // (x, r)
    z[3] = ((P.b - P.A * z.head<3>()).array() / norms.array()).minCoeff() - 1.0;

    auto slacks = [&](const Eigen::Vector4d &v, VectorXd &s) {
        s.resize(m + 1);
        for (int j = 0; j < m; ++j) s[j] = P.b[j] - P.A.row(j).dot(v.head<3>()) - norms[j] * v[3];
        s[m] = radius_cap - v[3];
        return (s.array() > 0.0).all();
    };
    auto row = [&](int j) {
        Eigen::Vector4d g;
        if (j < m) g << P.A.row(j).transpose(), norms[j];
        else g << 0, 0, 0, 1;
        return g;
    };
    auto value = [&](const Eigen::Vector4d &v, double t, bool &ok) {
        VectorXd s;
        ok = slacks(v, s);
        return ok ? -t * v[3] - s.array().log().sum() : 0.0;
    };

    for (double t = 1.0; (m + 1) / t > 1e-9; t *= 10.0) {
        for (int it = 0; it < 100; ++it) {
            VectorXd s;
            slacks(z, s);
            Eigen::Vector4d g = Eigen::Vector4d::Zero();
            g[3] = -t;
            Eigen::Matrix4d H = Eigen::Matrix4d::Zero();
            for (int j = 0; j <= m; ++j) {
                const Eigen::Vector4d r = row(j);
                g += r / s[j];
                H += r * r.transpose() / (s[j] * s[j]);
            }
            const Eigen::Vector4d dz = -H.ldlt().solve(g);
            const double dec = -g.dot(dz);
            if (dec < 1e-14) break;
            bool ok = false;
            const double f0 = value(z, t, ok);
            double step = 1.0;
            for (int ls = 0; ls < 60; ++ls, step *= 0.5) {
                const double f1 = value(z + step * dz, t, ok);
                if (ok && f1 <= f0 - 0.25 * step * dec) break;
            }
            z += step * dz;
        }
    }
    return {z.head<3>(), z[3]};
}

struct EllipsoidFit {
    Ellipsoid ellipsoid;
    bool converged = true;
};

/// Maximizes log det C subject to |C a_j| + a_j.d <= b_j with a log-barrier
/// path-following Newton method.
inline EllipsoidFit max_volume_ellipsoid(const Polytope &P, double tol = 1e-8, int max_newton = 100) {
    const ChebyshevResult cheb = chebyshev_center(P);
    if (!(cheb.radius > 1e-9)) throw RegionError("polytope has empty interior");
    const int m = P.rows();
    using Vec9 = Eigen::Matrix<double, 9, 1>;
    using Mat9 = Eigen::Matrix<double, 9, 9>;
    const auto &E = detail::sym_basis();
    std::vector<Eigen::Matrix<double, 3, 6>> M(m);
    for (int j = 0; j < m; ++j)
        for (int k = 0; k < 6; ++k) M[j].col(k) = E[k] * P.A.row(j).transpose();

    Vec9 z;
    z << detail::sym_to(0.5 * cheb.radius * Mat3::Identity()), cheb.center;

    auto value = [&](const Vec9 &v, double t, bool &ok) -> double {
        const Mat3 C = detail::sym_from(v.head<6>());
        Eigen::LLT<Mat3> llt(C);
        ok = llt.info() == Eigen::Success;
        if (!ok) return 0.0;
        double logdet = 0.0;
        for (int i = 0; i < 3; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
        double f = -t * logdet;
        for (int j = 0; j < m; ++j) {
            const Vec3 a = P.A.row(j).transpose();
            const double s = P.b[j] - a.dot(v.tail<3>()) - (C * a).norm();
            if (!(s > 0.0)) {
                ok = false;
                return 0.0;
            }
            f -= std::log(s);
        }
        return f;
    };

    EllipsoidFit out;
    for (double t = 1.0;; t *= 10.0) {
        bool centered = false;
        for (int it = 0; it < max_newton; ++it) {
            const Mat3 C = detail::sym_from(z.head<6>());
            const Mat3 Ci = C.inverse();
            Vec9 g = Vec9::Zero();
            Mat9 H = Mat9::Zero();
            for (int k = 0; k < 6; ++k) {
                g[k] = -t * (Ci * E[k]).trace();
                for (int l = 0; l < 6; ++l) H(k, l) = t * (Ci * E[k] * Ci * E[l]).trace();
            }
            for (int j = 0; j < m; ++j) {
                const Vec3 a = P.A.row(j).transpose();
                const Vec3 u = C * a;
                const double nu = std::max(u.norm(), 1e-300);
                const double s = P.b[j] - a.dot(z.tail<3>()) - nu;
                Vec9 gs;
                gs << -M[j].transpose() * u / nu, -a;
                g -= gs / s;
                H += gs * gs.transpose() / (s * s);
                const Mat3 Hn = (Mat3::Identity() - u * u.transpose() / (nu * nu)) / nu;
                H.topLeftCorner<6, 6>() += M[j].transpose() * Hn * M[j] / s;
            }
            const Vec9 dz = -H.ldlt().solve(g);
            const double dec = -g.dot(dz);
            if (!(dec > 1e-12)) {
                centered = true;
                break;
            }
            bool ok = false;
            const double f0 = value(z, t, ok);
            double step = 1.0;
            bool accepted = false;
            for (int ls = 0; ls < 60; ++ls, step *= 0.5) {
                const double f1 = value(z + step * dz, t, ok);
                if (ok && f1 <= f0 - 0.25 * step * dec) {
                    accepted = true;
                    break;
                }
            }
            if (!accepted) {
                centered = true;  // no further progress at this precision
                break;
            }
            z += step * dz;
        }
        if (!centered) out.converged = false;
        if (m / t <= tol * 1e-2) break;
    }
    out.ellipsoid.C = detail::sym_from(z.head<6>());
    out.ellipsoid.d = z.tail<3>();
    return out;
}

// ---------------------------------------------------------------------------
// Alternation and dilation

struct InflateConfig {
    double initial_radius = 0.1;
    double logdet_tol = 1e-3;
    int max_iters = 10;
};

struct InflateResult {
    Polytope polytope;
    Ellipsoid ellipsoid;
    std::vector<double> logdet_history;  // one entry per accepted iteration
    int iterations = 0;
    bool solver_warning = false;
};

inline InflateResult inflate_region(const std::vector<Box> &obstacles, const Box &bounds, const Vec3 &seed,
                                    const InflateConfig &cfg = {}) {
    if (!bounds.contains_strict(seed)) throw RegionError("seed lies outside the workspace");
    for (const auto &o : obstacles)
        if (o.contains(seed)) throw RegionError("seed lies inside an obstacle");
    InflateResult r;
    r.ellipsoid.C = cfg.initial_radius * Mat3::Identity();
    r.ellipsoid.d = seed;
    r.logdet_history.push_back(r.ellipsoid.logdet());
    r.polytope = separating_hyperplanes(obstacles, r.ellipsoid, bounds);
    for (int it = 0; it < cfg.max_iters; ++it) {
        const Polytope P = separating_hyperplanes(obstacles, r.ellipsoid, bounds);
        if (!P.contains(seed)) break;
        const EllipsoidFit fit = max_volume_ellipsoid(P);
        r.solver_warning = r.solver_warning || !fit.converged;
        ++r.iterations;
        const double prev = r.logdet_history.back();
        const double now = fit.ellipsoid.logdet();
        if (now < prev) break;
        r.polytope = P;
        r.ellipsoid = fit.ellipsoid;
        r.logdet_history.push_back(now);
        if (now - prev < cfg.logdet_tol) break;
    }
    return r;
}

inline InflateResult inflate_region(const Scenario &s, const Vec3 &seed, const InflateConfig &cfg = {}) {
    std::vector<Box> obs;
    for (const auto &o : s.obstacles)
        if (o.overlaps(s.bounds)) obs.push_back(o);
    return inflate_region(obs, s.bounds, seed, cfg);
}

/// Shrinks every face by the robot cube's support along its normal plus
/// h_safety.
inline DilatedPolytope dilate(const Polytope &P, double robot_edge, double h_safety) {
    DilatedPolytope out;
    out.poly = P;
    for (int j = 0; j < P.rows(); ++j)
        out.poly.b[j] = P.b[j] - 0.5 * robot_edge * P.A.row(j).lpNorm<1>() - h_safety;
    out.empty = chebyshev_center(out.poly).radius < -1e-9;
    return out;
}

inline nlohmann::json to_json(const Polytope &P) {
    nlohmann::json rows = nlohmann::json::array();
    for (int j = 0; j < P.rows(); ++j) rows.push_back({{"a", {P.A(j, 0), P.A(j, 1), P.A(j, 2)}}, {"b", P.b[j]}});
    return rows;
}

inline nlohmann::json to_json(const Ellipsoid &E) {
    nlohmann::json C = nlohmann::json::array();
    for (int i = 0; i < 3; ++i) C.push_back({E.C(i, 0), E.C(i, 1), E.C(i, 2)});
    return {{"C", C}, {"d", {E.d.x(), E.d.y(), E.d.z()}}};
}

}  // namespace prefflock::region
