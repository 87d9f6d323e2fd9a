#include "prefflock/mission.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace prefflock;
using namespace prefflock::mission;

namespace {

OracleSpec flat_oracle(const std::string &label, const PreferenceVector &h) {
    OracleSpec o;
    o.entries[label] = {h, {}};
    return o;
}

PreferenceVector calm() {
    PreferenceVector h;
    h.h_inner = 2.0;
    h.h_height = 5.0;
    h.h_speed = 2.0;
    h.h_safety = 1.0;
    h.h_formation = 0.0;
    return h;
}

Scenario open_scene() {
    Scenario s;
    s.bounds = Box(Vec3::Zero(), Vec3(40, 20, 12));
    s.regions.push_back({"open_field", s.bounds});
    s.start = Vec3(3, 10, 5);
    s.goal = Vec3(35, 10, 5);
    s.robot_edge = 0.3;
    return s;
}

// walls leave a 2.5 m slot between x 16 and 28; wedge cannot fit once dilated
Scenario corridor_scene() {
    Scenario s = open_scene();
    s.obstacles.push_back(Box(Vec3(16, 0, 0), Vec3(28, 8.75, 12)));
    s.obstacles.push_back(Box(Vec3(16, 11.25, 0), Vec3(28, 20, 12)));
    return s;
}

class FixedFeedback : public FeedbackSource {
public:
    explicit FixedFeedback(PreferenceVector h) : h_(h) {}
    std::optional<PreferenceVector> request(const QueryContext &) override {
        ++asked;
        return h_;
    }
    int asked = 0;

private:
    PreferenceVector h_;
};

class SilentFeedback : public FeedbackSource {
public:
    std::optional<PreferenceVector> request(const QueryContext &) override { return std::nullopt; }
};

MissionConfig quick() {
    MissionConfig cfg;
    cfg.update_steps = 50;
    cfg.log_ticks = false;
    return cfg;
}

int count_events(const MissionResult &r, const std::string &kind) {
    int n = 0;
    for (const auto &rec : r.log.records())
        if (rec["type"] == "event" && rec["kind"] == kind) ++n;
    return n;
}

}  // namespace

TEST(QueryGate, AsksOnlyAboveThresholdWithBudget) {
    gp::Prediction p{Eigen::VectorXd::Zero(5), Eigen::MatrixXd::Identity(5, 5) * 0.1};
    EXPECT_TRUE(query_gate(p, 0.05, 3).ask);
    EXPECT_FALSE(query_gate(p, 0.2, 3).ask);
    const auto g = query_gate(p, 0.05, 0);
    EXPECT_FALSE(g.ask);
    EXPECT_TRUE(g.budget_exhausted);
    EXPECT_FALSE(query_gate(p, 0.2, 0).budget_exhausted);
}

TEST(QueryGate, RaisingThresholdNeverAddsQueries) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 0.3);
    std::vector<gp::Prediction> stream;
    for (int i = 0; i < 300; ++i) {
        Eigen::VectorXd v(5);
        for (int p = 0; p < 5; ++p) v[p] = u(rng);
        stream.push_back({Eigen::VectorXd::Zero(5), v.asDiagonal()});
    }
    int prev = 1 << 30;
    for (double t = 0.0; t <= 0.32; t += 0.01) {
        int budget = 40, asked = 0;
        for (const auto &p : stream)
            if (query_gate(p, t, budget - asked).ask) ++asked;
        EXPECT_LE(asked, prev) << t;
        prev = asked;
    }
}

TEST(MissionLog, DigestIgnoresWallClock) {
    MissionLog a, b;
    a.append({{"type", "end"}, {"ticks", 4}, {"wall", 0.1}});
    b.append({{"type", "end"}, {"ticks", 4}, {"wall", 9.5}});
    EXPECT_EQ(a.digest(), b.digest());
    b.append({{"type", "tick"}});
    EXPECT_NE(a.digest(), b.digest());
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Mission, EmptySceneSingleRobotReachesGoal) {
    const Scenario s = open_scene();
    MissionConfig cfg = quick();
    cfg.robots = 1;
    FixedFeedback fb(calm());
    const auto r = run_mission(s, initial_model(), fb, cfg, {formation::FormationPrototype{"solo", {Vec3::Zero()}}});
    EXPECT_EQ(r.end_reason, "goal_reached");
    EXPECT_EQ(r.hard_violations, 0);
    EXPECT_EQ(r.safety_violations, 0);
    EXPECT_LT(r.final_goal_distance, 2.0);
    EXPECT_GT(r.queries, 0);
}

TEST(Mission, CorridorForcesFormationFallback) {
    const Scenario s = corridor_scene();
    PreferenceVector wedge = calm();
    wedge.h_formation = 2.0;
    FixedFeedback fb(wedge);
    MissionConfig cfg = quick();
    cfg.covariance_threshold = 0.0;
    const auto r = run_mission(s, initial_model(), fb, cfg);
    EXPECT_GT(r.fallbacks, 0);
    EXPECT_GT(count_events(r, "formation_fallback"), 0);
    EXPECT_EQ(r.hard_violations, 0);
}

TEST(Mission, BudgetCapsQueries) {
    MissionConfig cfg = quick();
    cfg.covariance_threshold = 0.0;
    cfg.query_budget = 2;
    FixedFeedback fb(calm());
    const auto r = run_mission(open_scene(), initial_model(), fb, cfg);
    EXPECT_EQ(r.queries, 2);
    EXPECT_EQ(fb.asked, 2);
    EXPECT_GT(count_events(r, "budget_exhausted"), 0);
}

TEST(Mission, UnansweredQueryKeepsPrediction) {
    MissionConfig cfg = quick();
    cfg.query_budget = 3;
    SilentFeedback fb;
    const auto r = run_mission(open_scene(), initial_model(), fb, cfg);
    EXPECT_EQ(r.timeouts, 3);
    EXPECT_EQ(count_events(r, "query_timeout"), 3);
    EXPECT_TRUE(r.samples.empty());
    EXPECT_EQ(r.end_reason, "goal_reached");
}

TEST(Mission, SameSeedSameDigest) {
    const Scenario s = open_scene();
    const OracleSpec o = flat_oracle("open_field", calm());
    MissionConfig cfg = quick();
    cfg.log_ticks = true;
    SyntheticFeedback a(o, cfg.seed), b(o, cfg.seed);
    const auto r1 = run_mission(s, initial_model(), a, cfg);
    const auto r2 = run_mission(s, initial_model(), b, cfg);
    EXPECT_EQ(r1.log.digest(), r2.log.digest());
    EXPECT_EQ(r1.ticks, r2.ticks);
}

TEST(Mission, EnclosedGoalEndsWithPlanFailure) {
    Scenario s = open_scene();
    s.obstacles.push_back(Box(Vec3(30, 0, 0), Vec3(31, 20, 12)));
    FixedFeedback fb(calm());
    const auto r = run_mission(s, initial_model(), fb, quick());
    EXPECT_EQ(r.end_reason, "plan_failed");
    EXPECT_EQ(r.ticks, 0);
}

TEST(Mission, ObserverCanAbortAndOverrideThreshold) {
    struct Ctl : MissionObserver {
        int polls = 0;
        std::vector<ControlCommand> poll_control() override {
            ++polls;
            if (polls == 1) return {{ControlCommand::Kind::SetThreshold, 10.0}};
            if (polls == 50) return {{ControlCommand::Kind::Abort}};
            return {};
        }
    } ctl;
    FixedFeedback fb(calm());
    const auto r = run_mission(open_scene(), initial_model(), fb, quick(), {}, &ctl);
    EXPECT_EQ(r.end_reason, "aborted");
    EXPECT_EQ(r.queries, 0);
    EXPECT_EQ(count_events(r, "threshold_override"), 1);
}

TEST(Mission, QueriesFallAcrossRepeatedMissions) {
    const Scenario s = load_scenario(std::string(PREFFLOCK_DATA_DIR) + "/eight_env_scenario.json");
    const OracleSpec o = load_oracle(std::string(PREFFLOCK_DATA_DIR) + "/oracle.json");
    MissionConfig cfg;
    cfg.log_ticks = false;
    auto model = initial_model();
    std::vector<int> q;
    for (int rep = 0; rep < 3; ++rep) {
        SyntheticFeedback fb(o, cfg.seed);
        auto r = run_mission(s, model, fb, cfg);
        EXPECT_EQ(r.hard_violations, 0);
        q.push_back(r.queries);
        model = std::move(r.model);
    }
    EXPECT_GT(q[0], 0);
    EXPECT_LE(q[1], q[0]);
    EXPECT_LE(q[2], q[1]);
    EXPECT_LT(q[2], q[0]);
}

TEST(Mission, FeedbackAppendsToDataset) {
    const auto path = std::filesystem::temp_directory_path() / "prefflock_mission_ds.jsonl";
    std::filesystem::remove(path);
    MissionConfig cfg = quick();
    cfg.query_budget = 2;
    cfg.covariance_threshold = 0.0;
    cfg.dataset_path = path.string();
    FixedFeedback fb(calm());
    run_mission(open_scene(), initial_model(), fb, cfg);
    EXPECT_EQ(load_dataset(path.string()).samples.size(), 2u);
    std::filesystem::remove(path);
}
