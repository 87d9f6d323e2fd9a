#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>

namespace prefflock {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline bool is_finite(const Vec3 &v) { return v.allFinite(); }

/// Axis-aligned box. Used for obstacles, workspace bounds and region labels.
struct Box {
    Vec3 min_corner = Vec3::Zero();
    Vec3 max_corner = Vec3::Zero();

    Box() = default;
    Box(const Vec3 &lo, const Vec3 &hi) : min_corner(lo), max_corner(hi) {}

    [[nodiscard]] bool valid() const {
        return is_finite(min_corner) && is_finite(max_corner) &&
               (min_corner.array() < max_corner.array()).all();
    }
    [[nodiscard]] Vec3 center() const { return 0.5 * (min_corner + max_corner); }
    [[nodiscard]] Vec3 extent() const { return max_corner - min_corner; }
    [[nodiscard]] double volume() const { return extent().prod(); }

    [[nodiscard]] bool contains(const Vec3 &p) const {
        return (p.array() >= min_corner.array()).all() && (p.array() <= max_corner.array()).all();
    }
    [[nodiscard]] bool contains_strict(const Vec3 &p) const {
        return (p.array() > min_corner.array()).all() && (p.array() < max_corner.array()).all();
    }
    [[nodiscard]] bool contains(const Box &o) const {
        return (o.min_corner.array() >= min_corner.array()).all() &&
               (o.max_corner.array() <= max_corner.array()).all();
    }

    /// Minkowski sum with a cube of half-edge r (r may be negative to shrink).
    [[nodiscard]] Box dilated(double r) const {
        return {min_corner.array() - r, max_corner.array() + r};
    }

    /// Positive-volume overlap test.
    [[nodiscard]] bool overlaps(const Box &o) const {
        return (min_corner.array() < o.max_corner.array()).all() &&
               (o.min_corner.array() < max_corner.array()).all();
    }

    [[nodiscard]] Vec3 closest_point(const Vec3 &p) const {
        return p.cwiseMax(min_corner).cwiseMin(max_corner);
    }

    /// Euclidean distance from p to the box; 0 inside.
    [[nodiscard]] double distance(const Vec3 &p) const { return (p - closest_point(p)).norm(); }

    [[nodiscard]] std::array<Vec3, 8> vertices() const {
        std::array<Vec3, 8> v;
        for (int k = 0; k < 8; ++k) {
            v[k] = Vec3((k & 1) ? max_corner.x() : min_corner.x(),
                        (k & 2) ? max_corner.y() : min_corner.y(),
                        (k & 4) ? max_corner.z() : min_corner.z());
        }
        return v;
    }
};

/// Slab-method ray/box intersection. Returns the entry distance along the
/// (not necessarily unit) direction scaled to unit length, or nullopt.
/// A ray starting inside the box hits at distance 0.
inline std::optional<double> ray_box_entry(const Box &box, const Vec3 &origin, const Vec3 &direction) {
    const double len = direction.norm();
    if (!(len > 0.0)) throw std::invalid_argument("ray direction must be nonzero");
    const Vec3 dir = direction / len;
    double t_near = 0.0;
    double t_far = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        if (dir[a] == 0.0) {
            if (origin[a] < box.min_corner[a] || origin[a] > box.max_corner[a]) return std::nullopt;
            continue;
        }
        double t0 = (box.min_corner[a] - origin[a]) / dir[a];
        double t1 = (box.max_corner[a] - origin[a]) / dir[a];
        if (t0 > t1) std::swap(t0, t1);
        t_near = std::max(t_near, t0);
        t_far = std::min(t_far, t1);
        if (t_near > t_far) return std::nullopt;
    }
    return t_near;
}

/// Distance along a unit ray from an interior origin to the box boundary.
inline double ray_box_exit(const Box &box, const Vec3 &origin, const Vec3 &direction) {
    const Vec3 dir = direction.normalized();
    double t_exit = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        if (dir[a] > 0.0) t_exit = std::min(t_exit, (box.max_corner[a] - origin[a]) / dir[a]);
        else if (dir[a] < 0.0) t_exit = std::min(t_exit, (box.min_corner[a] - origin[a]) / dir[a]);
    }
    return std::max(0.0, t_exit);
}

inline Mat3 yaw_rotation(double yaw) {
    return Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
}

}  // namespace prefflock
