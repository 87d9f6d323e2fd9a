#pragma once

#include "prefflock/geometry.hpp"
#include "prefflock/preference.hpp"
#include "prefflock/qp.hpp"
#include "prefflock/safe_region.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace prefflock::formation {

struct FormationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FormationPrototype {
    std::string name;
    std::vector<Vec3> local;  // min pairwise distance 1 when size >= 2

    [[nodiscard]] std::size_t size() const { return local.size(); }
    [[nodiscard]] Vec3 center() const {
        Vec3 c = Vec3::Zero();
        for (const auto &p : local) c += p;
        return c / static_cast<double>(local.size());
    }
    [[nodiscard]] double min_spacing() const {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < local.size(); ++i)
            for (std::size_t j = i + 1; j < local.size(); ++j) best = std::min(best, (local[i] - local[j]).norm());
        return local.size() < 2 ? 1.0 : best;
    }
};

/// Rescales to unit minimum spacing.
inline FormationPrototype make_prototype(std::string name, std::vector<Vec3> pts) {
    if (pts.empty()) throw FormationError("prototype '" + name + "' has no positions");
    FormationPrototype p{std::move(name), std::move(pts)};
    if (p.size() >= 2) {
        const double s = p.min_spacing();
        if (!(s > 0.0)) throw FormationError("prototype '" + p.name + "' has coincident positions");
        for (auto &x : p.local) x /= s;
    }
    return p;
}

/// line, column, wedge, grid, circle for n robots.
inline std::vector<FormationPrototype> default_prototypes(int n) {
    if (n < 1) throw FormationError("need at least one robot");
    const double mid = 0.5 * (n - 1);
    std::vector<Vec3> line, column, wedge, grid, circle;
    const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    const double r = n > 1 ? 0.5 / std::sin(std::numbers::pi / n) : 0.0;
    for (int i = 0; i < n; ++i) {
        line.emplace_back(0.0, i - mid, 0.0);
        column.emplace_back(0.0, 0.0, i - mid);
        const int k = (i + 1) / 2;
        wedge.emplace_back(-k, (i % 2 ? 1.0 : -1.0) * k, 0.0);
        grid.emplace_back(i % cols, i / cols, 0.0);
        const double th = 2 * std::numbers::pi * i / n;
        circle.emplace_back(r * std::cos(th), r * std::sin(th), 0.0);
    }
    return {make_prototype("line", line), make_prototype("column", column), make_prototype("wedge", wedge),
            make_prototype("grid", grid), make_prototype("circle", circle)};
}

inline nlohmann::json prototypes_to_json(const std::vector<FormationPrototype> &lib) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto &p : lib) {
        nlohmann::json pos = nlohmann::json::array();
        for (const auto &x : p.local) pos.push_back({x.x(), x.y(), x.z()});
        arr.push_back({{"name", p.name}, {"positions", pos}});
    }
    return {{"prototypes", arr}};
}

inline std::vector<FormationPrototype> prototypes_from_json(const nlohmann::json &j) {
    std::vector<FormationPrototype> lib;
    try {
        for (const auto &p : j.at("prototypes")) {
            std::vector<Vec3> pts;
            for (const auto &x : p.at("positions")) {
                if (!x.is_array() || x.size() != 3) throw FormationError("position must be [x, y, z]");
                pts.emplace_back(x[0].get<double>(), x[1].get<double>(), x[2].get<double>());
            }
            lib.push_back(make_prototype(p.at("name").get<std::string>(), std::move(pts)));
        }
    } catch (const nlohmann::json::exception &e) {
        throw FormationError(std::string("prototype library: ") + e.what());
    }
    if (lib.empty()) throw FormationError("prototype library is empty");
    for (const auto &p : lib)
        if (p.size() != lib.front().size()) throw FormationError("prototypes differ in robot count");
    return lib;
}

inline std::vector<FormationPrototype> load_prototypes(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw FormationError("cannot open prototype library '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception &e) {
        throw FormationError("prototype library '" + path + "': " + e.what());
    }
    return prototypes_from_json(j);
}

// ---------------------------------------------------------------------------
// Fitting

struct FormationConfig {
    double w1 = 1.0;
    double w2 = 0.5;
    double s_min = 0.2;
    double s_max = 20.0;
    int yaw_samples = 36;
};

struct TransformParams {
    Vec3 t = Vec3::Zero();
    double s = 1.0;
    double yaw = 0.0;
    Mat3 R = Mat3::Identity();
};

struct FitResult {
    TransformParams params;
    double loss = std::numeric_limits<double>::infinity();
    std::vector<Vec3> slots;
    bool feasible = false;
    std::string prototype_used;
    int prototype_index = -1;
    bool fallback = false;  // a prototype other than the predicted one was chosen
};

/// |r_goal - (t + sR x_c)|^2 + w1 (s - h_inner)^2 + w2 ((t + sR x_c)_z - h_height)^2
inline double formation_loss(const Vec3 &center, double s, const Vec3 &r_goal, const PreferenceVector &h,
                             const FormationConfig &cfg) {
    return (r_goal - center).squaredNorm() + cfg.w1 * (s - h.h_inner) * (s - h.h_inner) +
           cfg.w2 * (center.z() - h.h_height) * (center.z() - h.h_height);
}

inline bool slots_inside(const std::vector<Vec3> &slots, const region::Polytope &P, double tol = 1e-7) {
    for (const auto &x : slots)
        if (!P.contains(x, tol)) return false;
    return true;
}

/// Best fit at one fixed yaw. Variables z = (c, s) with c = t + sR x_c make the
/// objective separable and the slot constraints linear.
inline FitResult fit_at_yaw(const FormationPrototype &proto, const region::Polytope &P, const Vec3 &r_goal,
                            const PreferenceVector &h, const FormationConfig &cfg, double yaw) {
    const Mat3 R = yaw_rotation(yaw);
    const Vec3 xc = proto.center();
    Eigen::Matrix4d G = Eigen::Vector4d(2.0, 2.0, 2.0 * (1.0 + cfg.w2), 2.0 * cfg.w1).asDiagonal();
    Eigen::Vector4d g(-2.0 * r_goal.x(), -2.0 * r_goal.y(), -2.0 * r_goal.z() - 2.0 * cfg.w2 * h.h_height,
                      -2.0 * cfg.w1 * h.h_inner);
    const auto rows = static_cast<Eigen::Index>(P.rows() * proto.size() + 2);
    Eigen::MatrixXd N(rows, 4);
    Eigen::VectorXd e(rows);
    Eigen::Index k = 0;
    for (std::size_t i = 0; i < proto.size(); ++i) {
        const Vec3 q = R * (proto.local[i] - xc);
        for (int j = 0; j < P.rows(); ++j, ++k) {
            N.row(k) << P.A.row(j), P.A.row(j).dot(q);
            e[k] = P.b[j];
        }
    }
    N.row(k) << 0, 0, 0, -1;
    e[k++] = -cfg.s_min;
    N.row(k) << 0, 0, 0, 1;
    e[k++] = cfg.s_max;

    FitResult out;
    out.prototype_used = proto.name;
    const auto sol = qp::solve_qp(G, g, N, e);
    if (!sol.feasible) return out;
    const Vec3 c = sol.x.head<3>();
    const double s = sol.x[3];
    out.params = {c - s * R * xc, s, yaw, R};
    for (const auto &x : proto.local) out.slots.push_back(out.params.t + s * R * x);
    out.feasible = s >= cfg.s_min - 1e-9 && s <= cfg.s_max + 1e-9 && slots_inside(out.slots, P);
    if (out.feasible) out.loss = formation_loss(c, s, r_goal, h, cfg);
    return out;
}

/// Yaw sweep over k * 2 pi / K; ties keep the earlier yaw.
inline FitResult fit_formation(const FormationPrototype &proto, const region::DilatedPolytope &P, const Vec3 &r_goal,
                               const PreferenceVector &h, const FormationConfig &cfg = {}) {
    FitResult best;
    best.prototype_used = proto.name;
    if (P.empty || cfg.yaw_samples < 1) return best;
    for (int k = 0; k < cfg.yaw_samples; ++k) {
        FitResult r = fit_at_yaw(proto, P.poly, r_goal, h, cfg, 2 * std::numbers::pi * k / cfg.yaw_samples);
        if (r.feasible && r.loss < best.loss) best = std::move(r);
    }
    return best;
}

/// Predicted prototype first; the whole library is scanned only when it is
/// infeasible. An infeasible result here means no prototype fits.
inline FitResult fit_with_fallback(const std::vector<FormationPrototype> &library, const region::DilatedPolytope &P,
                                   const Vec3 &r_goal, const PreferenceVector &h, const FormationConfig &cfg = {}) {
    if (library.empty()) throw FormationError("empty prototype library");
    const int predicted = h.formation_index(static_cast<int>(library.size()));
    FitResult first = fit_formation(library[predicted], P, r_goal, h, cfg);
    first.prototype_index = predicted;
    if (first.feasible) return first;
    FitResult best;
    for (int i = 0; i < static_cast<int>(library.size()); ++i) {
        if (i == predicted) continue;
        FitResult r = fit_formation(library[i], P, r_goal, h, cfg);
        r.prototype_index = i;
        if (r.feasible && r.loss < best.loss) best = std::move(r);
    }
    best.fallback = best.feasible;
    return best;
}

inline PreferenceVector realize_preferences(const FitResult &fit, const FormationPrototype &proto,
                                            const PreferenceVector &h) {
    if (!fit.feasible) throw FormationError("realize_preferences: fit is infeasible");
    PreferenceVector out = h;
    out.h_inner = fit.params.s * proto.min_spacing();
    out.h_height = (fit.params.t + fit.params.s * fit.params.R * proto.center()).z();
    out.h_formation = fit.prototype_index;
    return out;
}

}  // namespace prefflock::formation
