#pragma once

#include "prefflock/geometry.hpp"
#include "prefflock/preference.hpp"
#include "prefflock/world.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace prefflock::flocking {

struct RobotState {
    int id = 0;
    Vec3 position = Vec3::Zero();
    Vec3 velocity = Vec3::Zero();
};

struct FlockingWeights {
    double flock = 0.3;
    double fmt = 0.35;
    double rep = 0.35;
    double att = 0.35;
    double saf = 0.4;
    double hei = 0.2;
    double ali = 0.1;
    Vec3 alignment_gain = Vec3(2.0, 2.0, 1.0);
};

struct CoincidentRobots : std::runtime_error {
    CoincidentRobots() : std::runtime_error("coincident robot positions") {}
};

// ---------------------------------------------------------------------------
// Interaction terms

inline Vec3 v_flock(const Vec3 &r_goal, const Vec3 &r_i, double h_speed) {
    const Vec3 diff = r_goal - r_i;
    const double dis = diff.norm();
    if (dis > 0.2) return diff / dis * h_speed;
    return diff / (dis + 0.4) * h_speed;
}

/// Half-spring repulsion for a single pair.
inline Vec3 v_rep(const Vec3 &r_i, const Vec3 &r_j, double h_inner) {
    const Vec3 diff = r_i - r_j;
    const double r_ij = diff.norm();
    if (r_ij == 0.0) throw CoincidentRobots();
    if (r_ij <= h_inner) return (h_inner - r_ij) * diff / r_ij;
    return Vec3::Zero();
}

/// Attraction for a single pair; zero in the dead zone [h_inner, h_inner + 0.1).
inline Vec3 v_att(const Vec3 &r_i, const Vec3 &r_j, double h_inner) {
    const Vec3 diff = r_j - r_i;
    const double r_ij = diff.norm();
    if (r_ij == 0.0) throw CoincidentRobots();
    if (r_ij >= h_inner + 0.1) return (r_ij - h_inner) * diff / r_ij;
    return Vec3::Zero();
}

/// Constant-speed obstacle avoidance along away_dir, active when d <= h_safety.
inline Vec3 v_saf(double d_ij, const Vec3 &away_dir, double h_safety, double h_speed) {
    if (d_ij <= h_safety) return h_speed * away_dir;
    return Vec3::Zero();
}

/// Height keeping. The near branch moves toward h_height.
inline Vec3 v_hei(double height, double h_height, double h_speed) {
    const double dis = std::abs(height - h_height);
    if (dis >= 0.2) return Vec3(0.0, 0.0, (h_height > height ? 1.0 : -1.0) * h_speed);
    return Vec3(0.0, 0.0, (h_height - height) / (dis + 0.4) * h_speed);
}

inline Vec3 v_fmt(const Vec3 &target, const Vec3 &r_i, double h_speed) {
    const Vec3 diff = target - r_i;
    const double dis = diff.norm();
    if (dis > 0.1) return diff / dis * h_speed;
    return diff / (dis + 0.2) * h_speed;
}

inline Vec3 v_ali(const Vec3 &v_i, const Vec3 &v_j, double r_ij, const Vec3 &gain = Vec3(2.0, 2.0, 1.0)) {
    if (!(r_ij > 0.0)) throw std::invalid_argument("v_ali: r_ij must be > 0");
    const double denom = (r_ij + 1.0) * (r_ij + 1.0);
    return gain.cwiseProduct(v_i - v_j) / denom;
}

struct FlockingTerms {
    Vec3 flock = Vec3::Zero();
    Vec3 fmt = Vec3::Zero();
    Vec3 rep = Vec3::Zero();
    Vec3 att = Vec3::Zero();
    Vec3 saf = Vec3::Zero();
    Vec3 hei = Vec3::Zero();
    Vec3 ali = Vec3::Zero();
};

/// Weighted superposition followed by the speed cap (applied only when the
/// sum exceeds h_speed).
inline Vec3 compose_velocity(const FlockingTerms &t, const FlockingWeights &w, double h_speed) {
    Vec3 v = w.flock * t.flock + w.fmt * t.fmt + w.rep * t.rep + w.att * t.att + w.saf * t.saf +
             w.hei * t.hei + w.ali * t.ali;
    const double n = v.norm();
    if (n > h_speed) v = v / n * h_speed;
    return v;
}

// ---------------------------------------------------------------------------
// Simulation step

enum class EventType { SafetyClamp, DegeneratePair, InsideObstacle };

inline const char *to_string(EventType t) {
    switch (t) {
        case EventType::SafetyClamp: return "safety_clamp";
        case EventType::DegeneratePair: return "degenerate_pair";
        case EventType::InsideObstacle: return "inside_obstacle";
    }
    return "unknown";
}

struct TickEvent {
    EventType type;
    int robot = -1;
    int other = -1;
};

struct TickResult {
    std::vector<RobotState> states;
    std::vector<FlockingTerms> terms;
    std::vector<TickEvent> events;
};

struct TickInput {
    std::span<const RobotState> states;
    const Scenario *scenario = nullptr;
    PreferenceVector preference;
    std::span<const Vec3> targets;  // formation slot per robot, may be empty
    Vec3 goal = Vec3::Zero();
    double dt = 0.05;
    FlockingWeights weights;
};

/// Sum of obstacle terms for a robot; flags robots inside a dilated obstacle.
inline Vec3 obstacle_term(const Scenario &s, const Vec3 &p, const PreferenceVector &h, bool &inside) {
    Vec3 total = Vec3::Zero();
    inside = false;
    for (const auto &raw : s.obstacles) {
        const Box o = raw.dilated(s.half_edge());
        const Vec3 closest = o.closest_point(p);
        const double d = (p - closest).norm();
        if (d > h.h_safety) continue;
        Vec3 away;
        if (d > 0.0) {
            away = (p - closest) / d;
        } else {
            inside = true;
            away = p - o.center();
            away = away.norm() > 0.0 ? Vec3(away.normalized()) : Vec3(Vec3::UnitZ());
        }
        total += v_saf(d, away, h.h_safety, h.h_speed);
    }
    return total;
}

inline FlockingTerms robot_terms(const TickInput &in, std::size_t i, std::vector<TickEvent> &events) {
    const auto &h = in.preference;
    const RobotState &me = in.states[i];
    FlockingTerms t;
    t.flock = v_flock(in.goal, me.position, h.h_speed);
    if (i < in.targets.size()) t.fmt = v_fmt(in.targets[i], me.position, h.h_speed);
    for (std::size_t j = 0; j < in.states.size(); ++j) {
        if (j == i) continue;
        const RobotState &other = in.states[j];
        const double r_ij = (me.position - other.position).norm();
        if (r_ij == 0.0) {
            // push the lower id toward -x, the higher toward +x
            const double sign = me.id < other.id ? -1.0 : 1.0;
            t.rep += Vec3(sign * h.h_inner, 0.0, 0.0);
            events.push_back({EventType::DegeneratePair, me.id, other.id});
            continue;
        }
        t.rep += v_rep(me.position, other.position, h.h_inner);
        t.att += v_att(me.position, other.position, h.h_inner);
        t.ali += v_ali(me.velocity, other.velocity, r_ij, in.weights.alignment_gain);
    }
    if (in.scenario) {
        bool inside = false;
        t.saf = obstacle_term(*in.scenario, me.position, h, inside);
        if (inside) events.push_back({EventType::InsideObstacle, me.id, -1});
    }
    t.hei = v_hei(me.position.z(), h.h_height, h.h_speed);
    return t;
}

/// A move is admissible if it stays in the shrunk workspace and the straight
/// segment from `from` to `to` touches no dilated obstacle. A robot already
/// inside an obstacle may only move to strictly larger clearance.
inline bool admissible_move(const Scenario &s, const Vec3 &from, const Vec3 &to) {
    const Box inner = s.bounds.dilated(-s.half_edge());
    if (!inner.contains(to)) return false;
    const Vec3 step = to - from;
    const double len = step.norm();
    const double c_from = s.obstacle_clearance(from);
    if (!(c_from > 0.0)) return s.obstacle_clearance(to) > c_from;
    for (const auto &raw : s.obstacles) {
        const Box o = raw.dilated(s.half_edge());
        if (len == 0.0) {
            if (o.contains(to)) return false;
            continue;
        }
        if (const auto t = ray_box_entry(o, from, step); t && *t <= len) return false;
    }
    return true;
}

/// Advances all robots by one explicit Euler step. Terms are computed from the
/// input snapshot only; the new snapshot is returned whole.
inline TickResult tick(const TickInput &in) {
    if (!(in.dt > 0.0)) throw std::invalid_argument("tick: dt must be > 0");
    TickResult out;
    out.states.assign(in.states.begin(), in.states.end());
    out.terms.resize(in.states.size());
    for (std::size_t i = 0; i < in.states.size(); ++i) {
        out.terms[i] = robot_terms(in, i, out.events);
        const Vec3 v = compose_velocity(out.terms[i], in.weights, in.preference.h_speed);
        const Vec3 &from = in.states[i].position;
        if (!in.scenario || admissible_move(*in.scenario, from, from + in.dt * v)) {
            out.states[i].position = from + in.dt * v;
            out.states[i].velocity = v;
            continue;
        }
        out.events.push_back({EventType::SafetyClamp, in.states[i].id, -1});
        out.states[i].velocity = Vec3::Zero();
        // slide: drop the blocked axes, longest remaining step first
        std::array<Vec3, 6> masked;
        for (int m = 1; m < 7; ++m)
            masked[m - 1] = Vec3(m & 1 ? 0.0 : v.x(), m & 2 ? 0.0 : v.y(), m & 4 ? 0.0 : v.z());
        std::stable_sort(masked.begin(), masked.end(), [](const Vec3 &a, const Vec3 &b) { return a.norm() > b.norm(); });
        for (const Vec3 &w : masked)
            if (admissible_move(*in.scenario, from, from + in.dt * w)) {
                out.states[i].position = from + in.dt * w;
                out.states[i].velocity = w;
                break;
            }
    }
    return out;
}

}  // namespace prefflock::flocking
