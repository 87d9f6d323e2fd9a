#pragma once

#include "prefflock/geometry.hpp"

#include <nlohmann/json.hpp>

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace prefflock {

struct ScenarioError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr std::array<std::string_view, 8> kEnvironmentTypes = {
    "open_field", "river", "park", "county", "forest", "city", "narrow_street", "bridge"};

inline bool is_environment_type(std::string_view label) {
    return std::find(kEnvironmentTypes.begin(), kEnvironmentTypes.end(), label) != kEnvironmentTypes.end();
}

struct Region {
    std::string label;
    Box box;
};

struct Scenario {
    Box bounds;
    std::vector<Box> obstacles;
    std::vector<Region> regions;
    Vec3 goal = Vec3::Zero();
    Vec3 start = Vec3::Zero();
    double grid_resolution = 1.0;
    double robot_edge = 0.0;

    [[nodiscard]] double half_edge() const { return 0.5 * robot_edge; }

    /// Distance from p to the nearest obstacle dilated by the robot volume.
    /// Zero when p is inside a dilated obstacle.
    [[nodiscard]] double obstacle_clearance(const Vec3 &p) const {
        double best = std::numeric_limits<double>::infinity();
        for (const auto &o : obstacles) best = std::min(best, o.dilated(half_edge()).distance(p));
        return best;
    }

    [[nodiscard]] bool in_dilated_obstacle(const Vec3 &p) const {
        for (const auto &o : obstacles)
            if (o.dilated(half_edge()).contains_strict(p)) return true;
        return false;
    }

    /// Label of the first region containing p, or empty.
    [[nodiscard]] std::string region_label(const Vec3 &p) const {
        for (const auto &r : regions)
            if (r.box.contains(p)) return r.label;
        return {};
    }

    /// Same scenario with obstacles restricted to those overlapping `window`.
    [[nodiscard]] Scenario cropped(const Box &window) const {
        Scenario out = *this;
        out.obstacles.clear();
        for (const auto &o : obstacles)
            if (o.overlaps(window)) out.obstacles.push_back(o);
        return out;
    }
};

namespace detail {

inline Vec3 vec_from_json(const nlohmann::json &j, std::string_view what) {
    if (!j.is_array() || j.size() != 3) throw ScenarioError(std::string(what) + ": expected [x, y, z]");
    Vec3 v(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
    if (!is_finite(v)) throw ScenarioError(std::string(what) + ": non-finite coordinate");
    return v;
}

inline nlohmann::json vec_to_json(const Vec3 &v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

inline Box box_from_json(const nlohmann::json &j, std::string_view what) {
    if (!j.is_object() || !j.contains("min") || !j.contains("max"))
        throw ScenarioError(std::string(what) + ": expected {min, max}");
    Box b(vec_from_json(j.at("min"), what), vec_from_json(j.at("max"), what));
    if (!b.valid()) throw ScenarioError(std::string(what) + ": min must be < max componentwise");
    return b;
}

inline nlohmann::json box_to_json(const Box &b) {
    return {{"min", vec_to_json(b.min_corner)}, {"max", vec_to_json(b.max_corner)}};
}

}  // namespace detail

inline void validate(const Scenario &s) {
    if (!s.bounds.valid()) throw ScenarioError("bounds must have nonzero volume");
    if (!(s.grid_resolution > 0.0) || !std::isfinite(s.grid_resolution))
        throw ScenarioError("grid_resolution must be > 0");
    if (!(s.robot_edge >= 0.0) || !std::isfinite(s.robot_edge)) throw ScenarioError("robot_edge must be >= 0");
    for (std::size_t i = 0; i < s.obstacles.size(); ++i) {
        if (!s.obstacles[i].valid()) throw ScenarioError("obstacle " + std::to_string(i) + " has no volume");
        if (!s.bounds.contains(s.obstacles[i]))
            throw ScenarioError("obstacle " + std::to_string(i) + " lies outside bounds");
    }
    for (const auto &r : s.regions) {
        if (!is_environment_type(r.label)) throw ScenarioError("unknown environment type '" + r.label + "'");
        if (!r.box.valid()) throw ScenarioError("region '" + r.label + "' has no volume");
    }
    if (!s.bounds.contains(s.goal)) throw ScenarioError("goal lies outside bounds");
    if (s.in_dilated_obstacle(s.goal)) throw ScenarioError("goal lies inside an obstacle");
    if (!s.bounds.contains(s.start)) throw ScenarioError("start lies outside bounds");
    if (s.in_dilated_obstacle(s.start)) throw ScenarioError("start lies inside an obstacle");
}

inline Scenario scenario_from_json(const nlohmann::json &j) {
    using namespace detail;
    for (const char *key : {"bounds", "obstacles", "goal", "grid_resolution", "robot_edge"})
        if (!j.contains(key)) throw ScenarioError(std::string("missing key '") + key + "'");
    Scenario s;
    s.bounds = box_from_json(j.at("bounds"), "bounds");
    for (const auto &o : j.at("obstacles")) s.obstacles.push_back(box_from_json(o, "obstacle"));
    if (j.contains("regions")) {
        for (const auto &r : j.at("regions")) {
            if (!r.contains("label")) throw ScenarioError("region without label");
            s.regions.push_back({r.at("label").get<std::string>(), box_from_json(r, "region")});
        }
    }
    s.goal = vec_from_json(j.at("goal"), "goal");
    s.grid_resolution = j.at("grid_resolution").get<double>();
    s.robot_edge = j.at("robot_edge").get<double>();
    if (j.contains("start")) s.start = vec_from_json(j.at("start"), "start");
    else s.start = s.bounds.min_corner + Vec3::Constant(std::max(2.0, s.robot_edge));
    validate(s);
    return s;
}

inline nlohmann::json scenario_to_json(const Scenario &s) {
    using namespace detail;
    nlohmann::json j;
    j["bounds"] = box_to_json(s.bounds);
    j["obstacles"] = nlohmann::json::array();
    for (const auto &o : s.obstacles) j["obstacles"].push_back(box_to_json(o));
    j["regions"] = nlohmann::json::array();
    for (const auto &r : s.regions) {
        auto rj = box_to_json(r.box);
        rj["label"] = r.label;
        j["regions"].push_back(rj);
    }
    j["goal"] = vec_to_json(s.goal);
    j["start"] = vec_to_json(s.start);
    j["grid_resolution"] = s.grid_resolution;
    j["robot_edge"] = s.robot_edge;
    return j;
}

inline Scenario load_scenario(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw ScenarioError("cannot open scenario file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception &e) {
        throw ScenarioError("scenario '" + path + "': " + e.what());
    }
    try {
        return scenario_from_json(j);
    } catch (const nlohmann::json::exception &e) {
        throw ScenarioError("scenario '" + path + "': " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Occupancy grid

struct Cell {
    int x = 0, y = 0, z = 0;
    bool operator==(const Cell &) const = default;
};

struct OccupancyGrid {
    std::array<int, 3> dims{0, 0, 0};
    double resolution = 1.0;
    Vec3 origin = Vec3::Zero();
    std::vector<std::uint8_t> occupied;

    [[nodiscard]] std::size_t size() const { return occupied.size(); }
    [[nodiscard]] bool in_range(const Cell &c) const {
        return c.x >= 0 && c.y >= 0 && c.z >= 0 && c.x < dims[0] && c.y < dims[1] && c.z < dims[2];
    }
    [[nodiscard]] std::size_t index(const Cell &c) const {
        return (static_cast<std::size_t>(c.z) * dims[1] + c.y) * dims[0] + c.x;
    }
    [[nodiscard]] Cell cell_of_index(std::size_t i) const {
        const int x = static_cast<int>(i % dims[0]);
        const int y = static_cast<int>((i / dims[0]) % dims[1]);
        const int z = static_cast<int>(i / (static_cast<std::size_t>(dims[0]) * dims[1]));
        return {x, y, z};
    }
    [[nodiscard]] bool is_occupied(const Cell &c) const { return occupied[index(c)] != 0; }
    [[nodiscard]] bool is_free(const Cell &c) const { return in_range(c) && !is_occupied(c); }

    [[nodiscard]] Box cell_box(const Cell &c) const {
        const Vec3 lo = origin + resolution * Vec3(c.x, c.y, c.z);
        return {lo, lo + Vec3::Constant(resolution)};
    }
    [[nodiscard]] Vec3 cell_center(const Cell &c) const {
        return origin + resolution * (Vec3(c.x, c.y, c.z) + Vec3::Constant(0.5));
    }
    [[nodiscard]] Cell cell_at(const Vec3 &p) const {
        Cell c;
        int *out[3] = {&c.x, &c.y, &c.z};
        for (int a = 0; a < 3; ++a) {
            const int i = static_cast<int>(std::floor((p[a] - origin[a]) / resolution));
            *out[a] = std::clamp(i, 0, dims[a] - 1);
        }
        return c;
    }
    [[nodiscard]] std::size_t free_count() const {
        return static_cast<std::size_t>(std::count(occupied.begin(), occupied.end(), std::uint8_t{0}));
    }
};

/// Discretizes `window` (defaults to the scenario bounds). A cell is occupied
/// iff it overlaps some obstacle dilated by half the robot edge.
inline OccupancyGrid rasterize(const Scenario &s, const std::optional<Box> &window = std::nullopt) {
    const Box area = window.value_or(s.bounds);
    OccupancyGrid g;
    g.resolution = s.grid_resolution;
    g.origin = area.min_corner;
    for (int a = 0; a < 3; ++a) {
        g.dims[a] = static_cast<int>(std::floor(area.extent()[a] / s.grid_resolution + 1e-9));
        if (g.dims[a] < 2) throw ScenarioError("grid resolution too coarse: fewer than 2 cells on an axis");
    }
    g.occupied.assign(static_cast<std::size_t>(g.dims[0]) * g.dims[1] * g.dims[2], 0);
    for (const auto &raw : s.obstacles) {
        const Box o = raw.dilated(s.half_edge());
        std::array<int, 3> lo{}, hi{};
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::max(0, static_cast<int>(std::floor((o.min_corner[a] - g.origin[a]) / g.resolution)) - 1);
            hi[a] = std::min(g.dims[a] - 1, static_cast<int>(std::floor((o.max_corner[a] - g.origin[a]) / g.resolution)) + 1);
        }
        for (int z = lo[2]; z <= hi[2]; ++z)
            for (int y = lo[1]; y <= hi[1]; ++y)
                for (int x = lo[0]; x <= hi[0]; ++x) {
                    const Cell c{x, y, z};
                    if (g.cell_box(c).overlaps(o)) g.occupied[g.index(c)] = 1;
                }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Ray casting and features

/// Distance to the first dilated obstacle or workspace wall along direction,
/// clamped to max_range.
inline double ray_clearance(const Scenario &s, const Vec3 &origin, const Vec3 &direction, double max_range) {
    double best = std::min(max_range, s.bounds.contains(origin) ? ray_box_exit(s.bounds, origin, direction) : 0.0);
    for (const auto &o : s.obstacles) {
        if (auto t = ray_box_entry(o.dilated(s.half_edge()), origin, direction)) best = std::min(best, *t);
    }
    return std::max(0.0, best);
}

inline constexpr int kFeatureDim = 16;
inline constexpr double kRayRange = 30.0;
inline constexpr double kDensityRadius = 10.0;

using EnvFeatures = Eigen::Matrix<double, kFeatureDim, 1>;

enum FeatureIndex : int {
    kDensity = 0,
    kMinClearance,
    kMeanClearance,
    kCorridorHeight,
    kCorridorWidth,
    kCorridorLength,
    kMeanSpeed,
    kMeanHeight,
};

struct SwarmSummary {
    double mean_speed = 0.0;
    double mean_height = 0.0;
};

/// The 26 axis, edge and corner directions of the unit cube, unnormalized.
inline const std::array<Vec3, 26> &ray_fan() {
    static const std::array<Vec3, 26> fan = [] {
        std::array<Vec3, 26> out;
        int n = 0;
        for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    if (dx || dy || dz) out[n++] = Vec3(dx, dy, dz);
        return out;
    }();
    return fan;
}

/// Fraction of a fixed lattice inside the sphere of radius `radius` around
/// p that falls inside any (undilated) obstacle.
inline double obstacle_density(const Scenario &s, const Vec3 &p, double radius = kDensityRadius) {
    constexpr int kSteps = 10;
    int inside = 0, total = 0;
    for (int i = 0; i <= kSteps; ++i)
        for (int j = 0; j <= kSteps; ++j)
            for (int k = 0; k <= kSteps; ++k) {
                const Vec3 off = radius * (Vec3(i, j, k) * (2.0 / kSteps) - Vec3::Ones());
                if (off.squaredNorm() > radius * radius) continue;
                ++total;
                const Vec3 q = p + off;
                for (const auto &o : s.obstacles)
                    if (o.contains(q)) {
                        ++inside;
                        break;
                    }
            }
    return static_cast<double>(inside) / total;
}

inline EnvFeatures extract_features(const Scenario &s, const Vec3 &centroid, const SwarmSummary &summary) {
    EnvFeatures f = EnvFeatures::Zero();
    const auto &fan = ray_fan();
    std::array<double, 26> clear{};
    double min_c = kRayRange, sum_c = 0.0;
    for (std::size_t r = 0; r < fan.size(); ++r) {
        clear[r] = ray_clearance(s, centroid, fan[r], kRayRange);
        min_c = std::min(min_c, clear[r]);
        sum_c += clear[r];
    }
    auto along = [&](int dx, int dy, int dz) {
        const Vec3 d(dx, dy, dz);
        for (std::size_t r = 0; r < fan.size(); ++r)
            if (fan[r] == d) return clear[r];
        return 0.0;
    };
    f[kDensity] = obstacle_density(s, centroid);
    f[kMinClearance] = min_c;
    f[kMeanClearance] = sum_c / static_cast<double>(fan.size());
    // horizontal free lines through the centroid: x, y and both diagonals
    double narrow = 2 * kRayRange, wide = 0.0;
    for (const auto &[dx, dy] : {std::pair{1, 0}, std::pair{0, 1}, std::pair{1, 1}, std::pair{1, -1}}) {
        const double span = along(dx, dy, 0) + along(-dx, -dy, 0);
        narrow = std::min(narrow, span);
        wide = std::max(wide, span);
    }
    f[kCorridorHeight] = along(0, 0, 1) + along(0, 0, -1);
    f[kCorridorWidth] = narrow;
    f[kCorridorLength] = wide;
    f[kMeanSpeed] = summary.mean_speed;
    f[kMeanHeight] = summary.mean_height;
    return f;
}

/// Fixed per-dimension scaling; one unit is roughly the spread between
/// environment types.
inline EnvFeatures feature_scale() {
    EnvFeatures sc = EnvFeatures::Ones();
    sc[kDensity] = 0.1;
    sc[kMinClearance] = 2.0;
    sc[kMeanClearance] = 4.0;
    sc[kCorridorHeight] = 10.0;
    sc[kCorridorWidth] = 20.0;
    sc[kCorridorLength] = 20.0;
    sc[kMeanSpeed] = 2.0;
    sc[kMeanHeight] = 10.0;
    return sc;
}

inline Eigen::VectorXd normalize_features(const EnvFeatures &f) {
    return f.cwiseQuotient(feature_scale());
}

/// RBF similarity exp(-|a-b|^2 / sigma^2).
inline double env_similarity(const Eigen::VectorXd &a, const Eigen::VectorXd &b, double sigma = 1.0) {
    if (a.size() != b.size()) throw std::invalid_argument("env_similarity: dimension mismatch");
    if (!(sigma > 0.0)) throw std::invalid_argument("env_similarity: sigma must be > 0");
    return std::exp(-(a - b).squaredNorm() / (sigma * sigma));
}

}  // namespace prefflock
