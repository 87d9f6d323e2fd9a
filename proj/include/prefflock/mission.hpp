#pragma once

#include "prefflock/astar.hpp"
#include "prefflock/dataset.hpp"
#include "prefflock/flocking.hpp"
#include "prefflock/formation.hpp"
#include "prefflock/oracle.hpp"
#include "prefflock/preference_gp.hpp"
#include "prefflock/safe_region.hpp"
#include "prefflock/world.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace prefflock::mission {

using nlohmann::json;

struct MissionConfig {
    double covariance_threshold = 0.05;  // on trace(cov) / d, normalized units
    double dt = 0.05;
    double waypoint_reach_radius = 1.5;
    long max_ticks = 40000;
    int ticks_per_waypoint = 1500;
    int query_budget = 20;
    std::uint64_t seed = 1;
    int robots = 5;
    int waypoint_spacing = 5;      // path cells between waypoints
    double planning_margin = 2.0;  // extra obstacle inflation for A*
    double local_map_size = 40.0;
    double spawn_spacing = 1.5;
    int update_steps = 200;
    gp::GpConfig gp;
    formation::FormationConfig formation;
    region::InflateConfig inflate;
    flocking::FlockingWeights weights;
    PreferenceRanges ranges;
    std::string dataset_path;  // append feedback here when set
    bool log_ticks = true;
};

// ---------------------------------------------------------------------------
// Query gate and feedback sources

struct GateDecision {
    bool ask = false;
    bool budget_exhausted = false;
};

inline GateDecision query_gate(const gp::Prediction &pred, double threshold, int budget_left) {
    const bool uncertain = pred.mean_variance() > threshold;
    return {uncertain && budget_left > 0, uncertain && budget_left <= 0};
}

struct QueryContext {
    long seq = 0;
    int waypoint = 0;
    std::string env_label;
    PreferenceVector predicted;
    double mean_variance = 0.0;
};

class FeedbackSource {
public:
    virtual ~FeedbackSource() = default;
    /// nullopt means no answer in time; the mission then keeps its prediction.
    virtual std::optional<PreferenceVector> request(const QueryContext &q) = 0;
};

/// Stream seed used for synthetic feedback so that an external replayer can
/// draw the same values.
inline std::uint64_t feedback_seed(std::uint64_t seed) { return seed * 0x9E3779B97F4A7C15ULL + 0x5851F42D4C957F2DULL; }

class SyntheticFeedback : public FeedbackSource {
public:
    SyntheticFeedback(OracleSpec oracle, std::uint64_t mission_seed)
        : oracle_(std::move(oracle)), rng_(feedback_seed(mission_seed)) {}
    std::optional<PreferenceVector> request(const QueryContext &q) override {
        return synthetic_feedback(oracle_, q.env_label, rng_);
    }

private:
    OracleSpec oracle_;
    std::mt19937_64 rng_;
};

// ---------------------------------------------------------------------------
// Observation and control

struct ControlCommand {
    enum class Kind { Pause, Resume, Abort, SetThreshold } kind;
    double value = 0.0;
};

class MissionObserver {
public:
    virtual ~MissionObserver() = default;
    virtual void on_record(const json &) {}
    virtual void on_state(long, const std::vector<flocking::RobotState> &, const PreferenceVector &) {}
    virtual std::vector<ControlCommand> poll_control() { return {}; }
};

// ---------------------------------------------------------------------------
// Log

inline std::string sha256_hex(const std::string &data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr);
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", md[i]);
        hex += buf;
    }
    return hex;
}

/// Append-only list of records. Fields named "wall" hold wall-clock data and
/// are left out of the digest.
class MissionLog {
public:
    void append(json rec) { records_.push_back(std::move(rec)); }
    [[nodiscard]] const std::vector<json> &records() const { return records_; }

    [[nodiscard]] std::string digest() const {
        std::string all;
        for (const auto &r : records_) {
            json c = r;
            c.erase("wall");
            all += c.dump();
            all += '\n';
        }
        return sha256_hex(all);
    }

    void write(const std::string &path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write mission log '" + path + "'");
        for (const auto &r : records_) out << r.dump() << '\n';
    }

private:
    std::vector<json> records_;
};

inline json vec_json(const Vec3 &v) { return json::array({v.x(), v.y(), v.z()}); }

struct MissionResult {
    MissionLog log;
    gp::TrainState model;
    std::vector<FeedbackSample> samples;
    std::string end_reason;
    long ticks = 0;
    int queries = 0;
    int timeouts = 0;
    int fallbacks = 0;
    int clamp_events = 0;
    int safety_violations = 0;  // clearance pushed below h_safety by a move
    int hard_violations = 0;    // robot volume overlapping an obstacle
    double final_goal_distance = 0.0;
};

// ---------------------------------------------------------------------------
// Planning helpers

/// Waypoints every `spacing` cells along the path, always ending at the goal
/// cell; the start cell is dropped.
inline std::vector<Vec3> subsample_path(const OccupancyGrid &g, const std::vector<Cell> &path, int spacing) {
    std::vector<Vec3> w;
    for (std::size_t i = static_cast<std::size_t>(spacing); i < path.size(); i += static_cast<std::size_t>(spacing))
        w.push_back(g.cell_center(path[i]));
    if (path.size() > 1 && (w.empty() || (path.size() - 1) % static_cast<std::size_t>(spacing) != 0))
        w.push_back(g.cell_center(path.back()));
    return w;
}

struct PlannedRoute {
    std::vector<Vec3> waypoints;
    std::size_t path_cells = 0;
    bool used_margin = true;
};

inline PlannedRoute plan_route(const Scenario &s, const MissionConfig &cfg) {
    auto attempt = [&](double margin) -> std::optional<PlannedRoute> {
        Scenario inflated = s;
        inflated.robot_edge = s.robot_edge + 2.0 * margin;
        const OccupancyGrid g = rasterize(inflated);
        const auto a = nearest_free(g, g.cell_at(s.start));
        const auto b = nearest_free(g, g.cell_at(s.goal));
        if (!a || !b) return std::nullopt;
        try {
            const auto path = plan_path(g, *a, *b);
            return PlannedRoute{subsample_path(g, path, cfg.waypoint_spacing), path.size(), margin > 0.0};
        } catch (const PlanError &) {
            return std::nullopt;
        }
    };
    if (auto r = attempt(cfg.planning_margin)) return *r;
    if (auto r = attempt(0.0)) return *r;
    throw PlanError("no path from start to goal");
}

inline Vec3 centroid(const std::vector<flocking::RobotState> &st) {
    Vec3 c = Vec3::Zero();
    for (const auto &r : st) c += r.position;
    return c / static_cast<double>(st.size());
}

inline SwarmSummary summarize(const std::vector<flocking::RobotState> &st) {
    SwarmSummary s;
    for (const auto &r : st) {
        s.mean_speed += r.velocity.norm();
        s.mean_height += r.position.z();
    }
    s.mean_speed /= static_cast<double>(st.size());
    s.mean_height /= static_cast<double>(st.size());
    return s;
}

inline std::vector<flocking::RobotState> spawn_robots(const Scenario &s, int n, double spacing) {
    std::vector<flocking::RobotState> st;
    for (int i = 0; i < n; ++i) {
        const Vec3 p = s.start + Vec3(0.0, (i - 0.5 * (n - 1)) * spacing, 0.0);
        st.push_back({i, s.bounds.dilated(-s.half_edge() - 1e-9).closest_point(p), Vec3::Zero()});
    }
    return st;
}

inline gp::TrainState initial_model(int input_dim = kFeatureDim, const gp::GpConfig &cfg = {}) {
    return gp::make_train_state(gp::make_state(input_dim, kPreferenceDim, Eigen::MatrixXd::Zero(1, input_dim), cfg));
}

// ---------------------------------------------------------------------------
// Main loop

class MissionRunner {
public:
    MissionRunner(const Scenario &s, gp::TrainState model, FeedbackSource &source, MissionConfig cfg,
                  std::vector<formation::FormationPrototype> library, MissionObserver *observer = nullptr)
        : s_(s), source_(source), cfg_(std::move(cfg)), library_(std::move(library)), observer_(observer),
          rng_(cfg_.seed) {
        r_.model = std::move(model);
        threshold_ = cfg_.covariance_threshold;
    }

    MissionResult run() {
        const auto wall0 = std::chrono::steady_clock::now();
        robots_ = spawn_robots(s_, cfg_.robots, cfg_.spawn_spacing);
        if (library_.empty() || library_.front().size() != robots_.size())
            throw formation::FormationError("prototype size does not match robot count");
        PlannedRoute route;
        try {
            route = plan_route(s_, cfg_);
        } catch (const PlanError &e) {
            emit({{"type", "event"}, {"kind", "plan_failed"}, {"detail", e.what()}});
            return finish("plan_failed", wall0);
        }
        emit({{"type", "start"},
              {"seed", cfg_.seed},
              {"robots", cfg_.robots},
              {"waypoints", route.waypoints.size()},
              {"path_cells", route.path_cells},
              {"planning_margin_used", route.used_margin}});
        for (const auto &r : robots_)
            if (s_.obstacle_clearance(r.position) < current_.h_safety)
                emit({{"type", "event"}, {"kind", "degenerate_start"}, {"robot", r.id}});

        for (std::size_t w = 0; w < route.waypoints.size(); ++w) {
            const Vec3 wp = route.waypoints[w];
            const auto reason = visit_waypoint(static_cast<int>(w), wp);
            if (reason) return finish(*reason, wall0);
        }
        return finish("goal_reached", wall0);
    }

private:
    void emit(json rec) {
        if (observer_) observer_->on_record(rec);
        r_.log.append(std::move(rec));
    }

    MissionResult finish(const std::string &reason, std::chrono::steady_clock::time_point wall0) {
        r_.end_reason = reason;
        r_.final_goal_distance = robots_.empty() ? 0.0 : (centroid(robots_) - s_.goal).norm();
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
        emit({{"type", "end"},
              {"reason", reason},
              {"ticks", r_.ticks},
              {"queries", r_.queries},
              {"fallbacks", r_.fallbacks},
              {"clamp_events", r_.clamp_events},
              {"safety_violations", r_.safety_violations},
              {"hard_violations", r_.hard_violations},
              {"goal_distance", r_.final_goal_distance},
              {"wall", secs}});
        return std::move(r_);
    }

    /// Handles control commands; returns true when the mission must abort.
    bool service_control() {
        if (!observer_) return false;
        for (;;) {
            for (const auto &c : observer_->poll_control()) {
                switch (c.kind) {
                    case ControlCommand::Kind::Pause: paused_ = true; break;
                    case ControlCommand::Kind::Resume: paused_ = false; break;
                    case ControlCommand::Kind::Abort: return true;
                    case ControlCommand::Kind::SetThreshold:
                        threshold_ = c.value;
                        emit({{"type", "event"}, {"kind", "threshold_override"}, {"value", c.value}});
                        break;
                }
            }
            if (!paused_) return false;
            std::this_thread::sleep_for(std::chrono::milliseconds(10));
        }
    }

    std::optional<std::string> visit_waypoint(int w, const Vec3 &wp) {
        if (service_control()) {
            emit({{"type", "event"}, {"kind", "abort"}, {"waypoint", w}});
            return "aborted";
        }
        // predict, maybe ask, maybe update
        const Vec3 c = centroid(robots_);
        const Eigen::VectorXd x = normalize_features(extract_features(s_, c, summarize(robots_)));
        gp::Prediction pred = gp::predict(r_.model.model, x);
        PreferenceVector h = cfg_.ranges.clamp(cfg_.ranges.denormalize(pred.mean));
        const std::string label = s_.region_label(c);
        const GateDecision gate = query_gate(pred, threshold_, cfg_.query_budget - r_.queries);
        json upd{{"type", "update"},      {"waypoint", w},     {"env", label},
                 {"prediction", to_json(h)}, {"mean_variance", pred.mean_variance()}, {"query", gate.ask}};
        if (gate.budget_exhausted) emit({{"type", "event"}, {"kind", "budget_exhausted"}, {"waypoint", w}});
        if (gate.ask) {
            ++r_.queries;
            QueryContext q{r_.queries, w, label, h, pred.mean_variance()};
            std::optional<PreferenceVector> fb;
            try {
                fb = source_.request(q);
            } catch (const OracleError &e) {
                emit({{"type", "event"}, {"kind", "oracle_error"}, {"detail", e.what()}});
            }
            if (fb) {
                h = cfg_.ranges.clamp(*fb);
                FeedbackSample sample{x, h, label, static_cast<double>(r_.queries)};
                r_.samples.push_back(sample);
                if (!cfg_.dataset_path.empty()) append_sample(cfg_.dataset_path, sample);
                r_.model = gp::update_model(std::move(r_.model), to_gp_dataset(r_.samples, cfg_.ranges),
                                            cfg_.update_steps, cfg_.gp, rng_);
                upd["feedback"] = to_json(h);
                upd["elbo"] = r_.model.last_elbo;
            } else {
                ++r_.timeouts;
                emit({{"type", "event"}, {"kind", "query_timeout"}, {"waypoint", w}});
            }
        }
        emit(upd);

        // safe region around the waypoint in the local map
        const Vec3 half = Vec3::Constant(0.5 * cfg_.local_map_size);
        const Box window((wp - half).cwiseMax(s_.bounds.min_corner), (wp + half).cwiseMin(s_.bounds.max_corner));
        std::vector<Box> local;
        for (const auto &o : s_.obstacles)
            if (o.overlaps(window)) local.push_back(o);
        region::InflateResult reg;
        try {
            reg = region::inflate_region(local, window, wp, cfg_.inflate);
        } catch (const region::RegionError &e) {
            emit({{"type", "event"}, {"kind", "region_error"}, {"waypoint", w}, {"detail", e.what()}});
            return "safety_halt";
        }
        const auto dil = region::dilate(reg.polytope, s_.robot_edge, h.h_safety);
        emit({{"type", "region"},
              {"waypoint", w},
              {"seed", vec_json(wp)},
              {"polytope", region::to_json(reg.polytope)},
              {"ellipsoid", region::to_json(reg.ellipsoid)},
              {"iterations", reg.iterations},
              {"logdet", reg.logdet_history.back()},
              {"dilated_empty", dil.empty}});

        const auto fit = formation::fit_with_fallback(library_, dil, wp, h, cfg_.formation);
        if (!fit.feasible) {
            emit({{"type", "event"}, {"kind", "all_infeasible"}, {"waypoint", w}});
            return "safety_halt";
        }
        if (fit.fallback) {
            ++r_.fallbacks;
            emit({{"type", "event"}, {"kind", "formation_fallback"}, {"waypoint", w}, {"prototype", fit.prototype_used}});
        }
        current_ = formation::realize_preferences(fit, library_[fit.prototype_index], h);
        const Vec3 center = fit.params.t + fit.params.s * fit.params.R * library_[fit.prototype_index].center();
        json slots = json::array();
        for (const auto &p : fit.slots) slots.push_back(vec_json(p));
        emit({{"type", "formation"},
              {"waypoint", w},
              {"prototype", fit.prototype_used},
              {"index", fit.prototype_index},
              {"fallback", fit.fallback},
              {"loss", fit.loss},
              {"scale", fit.params.s},
              {"yaw", fit.params.yaw},
              {"center", vec_json(center)},
              {"slots", slots},
              {"realized", to_json(current_)}});

        // flock toward the formation
        for (int k = 0; k < cfg_.ticks_per_waypoint; ++k) {
            if ((centroid(robots_) - center).norm() <= cfg_.waypoint_reach_radius) return std::nullopt;
            if (r_.ticks >= cfg_.max_ticks) return "tick_budget";
            if (service_control()) {
                emit({{"type", "event"}, {"kind", "abort"}, {"waypoint", w}});
                return "aborted";
            }
            step(center, fit.slots);
        }
        emit({{"type", "event"}, {"kind", "waypoint_timeout"}, {"waypoint", w}});
        return std::nullopt;
    }

    void step(const Vec3 &goal, const std::vector<Vec3> &slots) {
        flocking::TickInput in;
        in.states = robots_;
        in.scenario = &s_;
        in.preference = current_;
        in.targets = slots;
        in.goal = goal;
        in.dt = cfg_.dt;
        in.weights = cfg_.weights;
        auto res = flocking::tick(in);
        json events = json::array();
        for (const auto &e : res.events) {
            events.push_back({{"kind", flocking::to_string(e.type)}, {"robot", e.robot}, {"other", e.other}});
            if (e.type == flocking::EventType::SafetyClamp) ++r_.clamp_events;
        }
        for (std::size_t i = 0; i < robots_.size(); ++i) {
            const double before = s_.obstacle_clearance(robots_[i].position);
            const double after = s_.obstacle_clearance(res.states[i].position);
            if (!(after > 0.0)) ++r_.hard_violations;
            if (after < current_.h_safety - 1e-6 && after < before - 1e-12) ++r_.safety_violations;
        }
        robots_ = std::move(res.states);
        ++r_.ticks;
        if (cfg_.log_ticks) {
            json pos = json::array(), vel = json::array();
            for (const auto &r : robots_) {
                pos.push_back(vec_json(r.position));
                vel.push_back(vec_json(r.velocity));
            }
            emit({{"type", "tick"},
                  {"tick", r_.ticks},
                  {"positions", pos},
                  {"velocities", vel},
                  {"h_safety", current_.h_safety},
                  {"events", events}});
        }
        if (observer_) observer_->on_state(r_.ticks, robots_, current_);
    }

    const Scenario &s_;
    FeedbackSource &source_;
    MissionConfig cfg_;
    std::vector<formation::FormationPrototype> library_;
    MissionObserver *observer_;
    std::mt19937_64 rng_;
    MissionResult r_;
    std::vector<flocking::RobotState> robots_;
    PreferenceVector current_;
    double threshold_ = 0.05;
    bool paused_ = false;
};

inline MissionResult run_mission(const Scenario &s, gp::TrainState model, FeedbackSource &source,
                                 const MissionConfig &cfg, std::vector<formation::FormationPrototype> library = {},
                                 MissionObserver *observer = nullptr) {
    if (library.empty()) library = formation::default_prototypes(cfg.robots);
    MissionRunner runner(s, std::move(model), source, cfg, std::move(library), observer);
    return runner.run();
}

}  // namespace prefflock::mission
