// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include "formation_fixtures.hpp"
#include "gp_fixtures.hpp"
#include "region_fixtures.hpp"

#include "prefflock/eval.hpp"
#include "prefflock/flocking.hpp"
#include "prefflock/mission.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>

using namespace prefflock;
using namespace prefflock::testing;

namespace {

struct Verdict {
    bool pass = true;
    std::ostringstream detail;
    std::string failed;
    void require(bool ok, const std::string &what) {
        if (!ok) {
            pass = false;
            failed += " [fail: " + what + "]";
        }
    }
};

std::string data(const char *name) { return std::string(PREFFLOCK_DATA_DIR) + "/" + name; }

// ---------------------------------------------------------------------------

void flocking_formulas(Verdict &v) {
    using namespace flocking;
    struct Case {
        const char *name;
        Vec3 got, want;
    };
    const Vec3 O = Vec3::Zero();
    FlockingTerms all{Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1), Vec3(1, 1, 0),
                      Vec3(0, 0, -1), Vec3(0, 0, 1), Vec3(1, 0, 0)};
    FlockingTerms fast;
    fast.flock = Vec3(10, 0, 0);
    const std::vector<Case> cases{
        {"flock far", v_flock(Vec3(3, 4, 0), O, 2.0), Vec3(1.2, 1.6, 0)},
        {"flock near", v_flock(Vec3(0.1, 0, 0), O, 1.0), Vec3(0.2, 0, 0)},
        {"flock edge", v_flock(Vec3(0, 0.2, 0), O, 1.0), Vec3(0, 1.0 / 3.0, 0)},
        {"rep spring", v_rep(O, Vec3(0.6, 0.8, 0), 2.0), Vec3(-0.6, -0.8, 0)},
        {"rep axis", v_rep(O, Vec3(1, 0, 0), 2.0), Vec3(-1, 0, 0)},
        {"rep off", v_rep(O, Vec3(3, 0, 0), 2.0), O},
        {"att on", v_att(O, Vec3(0, 3, 4), 2.0), Vec3(0, 1.8, 2.4)},
        {"att dead", v_att(O, Vec3(2.05, 0, 0), 2.0), O},
        {"saf on", v_saf(0.5, Vec3(0, 1, 0), 1.0, 2.0), Vec3(0, 2, 0)},
        {"saf edge", v_saf(1.0, Vec3(0, 1, 0), 1.0, 2.0), Vec3(0, 2, 0)},
        {"saf off", v_saf(1.5, Vec3(0, 1, 0), 1.0, 2.0), O},
        {"hei up", v_hei(0.0, 1.0, 2.0), Vec3(0, 0, 2)},
        {"hei down", v_hei(3.0, 1.0, 2.0), Vec3(0, 0, -2)},
        {"hei near", v_hei(1.1, 1.0, 1.0), Vec3(0, 0, -0.2)},
        {"fmt far", v_fmt(Vec3(0, 1, 0), O, 3.0), Vec3(0, 3, 0)},
        {"fmt near", v_fmt(Vec3(0.05, 0, 0), O, 1.0), Vec3(0.2, 0, 0)},
        {"ali 1", v_ali(Vec3(1, 0, 1), O, 1.0), Vec3(0.5, 0, 0.25)},
        {"ali 3", v_ali(Vec3(1, 2, 3), O, 3.0), Vec3(0.125, 0.25, 0.1875)},
        {"compose sum", compose_velocity(all, {}, 10.0), Vec3(0.75, 0.7, 0.15)},
        {"compose cap", compose_velocity(fast, {}, 1.0), Vec3(1, 0, 0)},
    };
    double worst = 0.0;
    for (const auto &c : cases) {
        const double err = (c.got - c.want).cwiseAbs().maxCoeff();
        worst = std::max(worst, err);
        v.require(err <= 1e-9, c.name);
    }

    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 5.0);
    std::uniform_real_distribution<double> sp(0.05, 8.0);
    auto rv = [&] { return Vec3(n(rng), n(rng), n(rng)); };
    double excess = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < 100000; ++k) {
        FlockingTerms t{rv(), rv(), rv(), rv(), rv(), rv(), rv()};
        const double h = sp(rng);
        excess = std::max(excess, compose_velocity(t, {}, h).norm() - h);
    }
    v.require(excess <= 1e-9, "speed cap");
    v.detail << "formula max err " << worst << " over " << cases.size() << " cases, max |v|-h_speed " << excess
             << " over 1e5 states";
}

void gp_checks(Verdict &v) {
    std::mt19937_64 rng(6);
    double grad = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        auto d = random_dataset(3 + trial, 2, 2, rng);
        auto s = random_state(2, 2, 2, 3, rng);
        grad = std::max(grad, check_gradient(s, d).vector_rel);
    }
    v.require(grad < 1e-4, "gradient");

    std::mt19937_64 rng2(12);
    double sparse = 0.0;
    for (const int N : {5, 10, 15, 20}) {
        auto d = random_dataset(N, 2, 2, rng2);
        auto s = random_state(2, 2, 2, N, rng2);
        s.Z = d.X;
        s = gp::optimize_variational(s, d, 50);
        std::normal_distribution<double> nd;
        double mad = 0.0;
        for (int k = 0; k < 20; ++k) {
            VectorXd x(2);
            x << nd(rng2), nd(rng2);
            mad += (gp::predict(s, x).mean - gp::exact_gp_predict(d, s, x).mean).cwiseAbs().mean();
        }
        sparse = std::max(sparse, mad / 20);
    }
    v.require(sparse < 1e-2, "sparse vs exact");

    const auto h = run_heteroscedastic_recovery();
    v.require(h.spearman > 0.6, "heteroscedastic");
    v.detail << "grad rel " << grad << ", sparse-exact mean abs " << sparse << " (N<=20), noise spearman "
             << h.spearman;
}

void region_checks(Verdict &v) {
    using namespace region;
    const auto cube = max_volume_ellipsoid(bounds_polytope(Box(Vec3::Constant(-1), Vec3::Constant(1))));
    const double ball = (cube.ellipsoid.C - Mat3::Identity()).cwiseAbs().maxCoeff();
    v.require(ball <= 1e-4, "cube");

    std::mt19937_64 rng(6);
    double gap = -1.0, drop = 0.0;
    int hits = 0, obstacles = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const auto scene = random_scene(rng, 8);
        const auto r = inflate_region(scene.obstacles, scene.bounds, scene.seed);
        gap = std::max(gap, r.ellipsoid.containment_gap(r.polytope));
        hits += count_points_inside(r.polytope, scene.obstacles, 10000, static_cast<std::uint64_t>(trial));
        obstacles += static_cast<int>(scene.obstacles.size());
        for (std::size_t k = 1; k < r.logdet_history.size(); ++k)
            drop = std::max(drop, r.logdet_history[k - 1] - r.logdet_history[k]);
    }
    const Polytope tet = regular_tetrahedron(3.0);
    gap = std::max(gap, max_volume_ellipsoid(tet).ellipsoid.containment_gap(tet));
    v.require(gap <= 1e-7, "containment");
    v.require(hits == 0, "obstacle points");
    v.require(drop <= 1e-9, "logdet");
    v.detail << "cube |C-I| " << ball << ", containment gap " << gap << ", " << hits << " hits in "
             << obstacles << "x1e4 samples, worst logdet drop " << drop;
}

void formation_checks(Verdict &v) {
    using namespace formation;
    const FormationConfig cfg;
    const auto lib = default_prototypes(5);
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    double unc = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const Vec3 goal(u(rng), u(rng), 10 + u(rng));
        PreferenceVector h;
        h.h_inner = 1.0 + std::abs(u(rng));
        h.h_height = 10 + u(rng);
        const auto fit = fit_formation(lib[trial % 5], box_region(Box(Vec3::Constant(-200), Vec3::Constant(200))), goal, h);
        const double dz = goal.z() - h.h_height;
        unc = std::max(unc, fit.feasible ? std::abs(fit.loss - cfg.w2 / (1 + cfg.w2) * dz * dz) : 1e9);
    }
    v.require(unc <= 1e-6, "unconstrained");

    const auto pair = make_prototype("pair", {Vec3(0, -0.5, 0), Vec3(0, 0.5, 0)});
    struct Case {
        Box box;
        Vec3 goal;
        double inner, height;
        bool oblique;
    };
    const std::vector<Case> cases{
        {Box(Vec3(0, 0, 0), Vec3(4, 1.5, 3)), Vec3(5, 3, 1), 3.0, 2.5, false},
        {Box(Vec3(0, 0, 0), Vec3(2, 2, 2)), Vec3(1, 1, 6), 4.0, 5.0, true},
        {Box(Vec3(-1, -1, 0), Vec3(1, 1, 1)), Vec3(0, 0, 0.5), 2.5, 0.5, true},
    };
    FormationConfig fine;
    fine.yaw_samples = 360;
    double brute = 0.0;
    for (const auto &c : cases) {
        auto P = box_region(c.box);
        if (c.oblique) P.poly.add(Vec3(1, 1, 0).normalized(), Vec3(1, 1, 0).normalized().dot(c.box.center()) + 0.3);
        PreferenceVector h;
        h.h_inner = c.inner;
        h.h_height = c.height;
        const auto fit = fit_formation(pair, P, c.goal, h, fine);
        const double grid = brute_force_fit_loss(pair, P.poly, c.goal, h, fine, c.box, 720);
        brute = std::max(brute, fit.feasible ? std::abs(fit.loss - grid) / std::max(grid, 1e-6) : 1e9);
    }
    v.require(brute <= 0.01, "brute force");

    std::mt19937_64 rng3(13);
    std::uniform_real_distribution<double> w(0.0, 1.0);
    double slot_gap = -1.0;
    int feasible = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const Vec3 lo(10 * w(rng3), 10 * w(rng3), 10 * w(rng3));
        const Box b(lo, lo + Vec3(0.5 + 5 * w(rng3), 0.5 + 5 * w(rng3), 0.5 + 5 * w(rng3)));
        auto P = box_region(b);
        const Vec3 n = Vec3(w(rng3) - 0.5, w(rng3) - 0.5, 0.1).normalized();
        P.poly.add(n, n.dot(b.center()) + 0.5);
        PreferenceVector h;
        h.h_inner = 0.5 + 3 * w(rng3);
        h.h_height = 20 * w(rng3);
        const auto fit = fit_with_fallback(lib, P, Vec3(20 * w(rng3), 20 * w(rng3), 20 * w(rng3)), h);
        if (!fit.feasible) continue;
        ++feasible;
        for (const auto &p : fit.slots) slot_gap = std::max(slot_gap, (P.poly.A * p - P.poly.b).maxCoeff());
    }
    v.require(feasible > 0 && slot_gap <= 1e-7, "re-verification");

    PreferenceVector h;
    h.h_formation = 2.0;
    h.h_inner = 2.0;
    h.h_height = 5.0;
    const auto corridor = fit_with_fallback(lib, corridor_region(), Vec3(10, 0, 5), h);
    v.require(corridor.feasible && corridor.fallback, "corridor fallback");
    v.detail << "unconstrained loss err " << unc << ", 2-robot rel gap " << brute << ", worst slot violation "
             << slot_gap << " over " << feasible << " feasible fits, corridor fell back to "
             << (corridor.feasible ? corridor.prototype_used : "nothing");
}

void adaptation(Verdict &v) {
    const auto fx = eval::load_eval_fixture(data("eight.json"));
    const eval::EvalConfig cfg;
    const auto rep = eval::eval_adaptation(fx, cfg);
    const double g = rep.learners[0].mean_at(cfg.updates);
    const double r = rep.learners[1].mean_at(cfg.updates);
    const double m = rep.learners[2].mean_at(cfg.updates);
    v.require(static_cast<int>(fx.envs.size()) == 8, "8 environments");
    v.require(g < 0.05, "gp error");
    v.require(r > g && m > g, "baselines");
    v.detail << "mean error after " << cfg.updates << " updates: gp " << g << ", ridge " << r << ", mlp " << m;
}

void similarity(Verdict &v) {
    const auto fx = eval::load_eval_fixture(data("eight.json"));
    const auto pairs = eval::eval_pairs(fx, eval::EvalConfig{});
    const double rho = eval::similarity_error_spearman(pairs);
    v.require(rho < -0.3, "spearman");
    v.detail << "spearman(similarity, 1-update error) " << rho << " over " << pairs.size() << " pairs";
}

void missions(Verdict &v) {
    const Scenario s = load_scenario(data("eight_env_scenario.json"));
    const OracleSpec o = load_oracle(data("oracle.json"));
    int violations = 0, mismatched = 0, reached = 0;
    std::set<std::string> digests;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        mission::MissionConfig cfg;
        cfg.seed = seed;
        std::string first;
        for (int rep = 0; rep < 2; ++rep) {
            mission::SyntheticFeedback fb(o, seed);
            const auto r = mission::run_mission(s, mission::initial_model(), fb, cfg);
            const std::string d = r.log.digest();
            if (rep == 0) {
                first = d;
                violations += r.hard_violations;
                reached += r.end_reason == "goal_reached";
                digests.insert(d);
            } else if (d != first) {
                ++mismatched;
            }
        }
    }
    v.require(violations == 0, "violations");
    v.require(mismatched == 0, "digests");
    v.detail << "20 seeds: " << violations << " dilated-obstacle violations, " << mismatched
             << " digest mismatches on rerun, " << digests.size() << " distinct digests, " << reached
             << " reached the goal";
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        double budget_s;
        std::function<void(Verdict &)> run;
    };
    const std::vector<Criterion> all{
        {1, 10, flocking_formulas}, {2, 300, gp_checks}, {3, 60, region_checks}, {4, 60, formation_checks},
        {5, 900, adaptation},       {6, 900, similarity}, {7, 600, missions},
    };
    bool ok = true;
    for (const auto &c : all) {
        Verdict v;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            c.run(v);
        } catch (const std::exception &e) {
            v.require(false, std::string("exception: ") + e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        v.require(secs < c.budget_s, "time budget");
        std::printf("criterion %d: %s  %s (%.1f s of %.0f s)%s\n", c.id, v.pass ? "PASS" : "FAIL",
                    v.detail.str().c_str(), secs, c.budget_s, v.failed.c_str());
        std::fflush(stdout);
        ok = ok && v.pass;
    }
    return ok ? 0 : 1;
}
