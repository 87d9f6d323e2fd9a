#include "prefflock/eval.hpp"
#include "prefflock/mission.hpp"
#include "prefflock/serve.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <iostream>

using namespace prefflock;
namespace fs = std::filesystem;

namespace {

std::string default_out() {
    const char *env = std::getenv("PREFFLOCK_OUT");
    return env && *env ? env : "out";
}

std::string default_data(const char *name) { return std::string(PREFFLOCK_DATA_DIR) + "/" + name; }

fs::path out_dir(const std::string &dir) {
    fs::create_directories(dir);
    return fs::path(dir);
}

struct Common {
    std::uint64_t seed = 1;
    std::string out = default_out();
    std::string model;
    std::string prototypes;
    double threshold = 0.05;
    int budget = 20;
    int robots = 5;
    int update_steps = 200;
};

void add_mission_flags(CLI::App *c, Common &o) {
    c->add_option("--seed", o.seed, "random seed");
    c->add_option("--out", o.out, "output directory (default $PREFFLOCK_OUT or ./out)");
    c->add_option("--model", o.model, "GP checkpoint to start from");
    c->add_option("--prototypes", o.prototypes, "formation prototype library");
    c->add_option("--threshold", o.threshold, "query threshold on mean predictive variance");
    c->add_option("--budget", o.budget, "queries per mission");
    c->add_option("--robots", o.robots, "team size");
    c->add_option("--update-steps", o.update_steps, "Adam steps per model update");
}

mission::MissionConfig mission_config(const Common &o) {
    mission::MissionConfig cfg;
    cfg.seed = o.seed;
    cfg.covariance_threshold = o.threshold;
    cfg.query_budget = o.budget;
    cfg.robots = o.robots;
    cfg.update_steps = o.update_steps;
    return cfg;
}

gp::TrainState start_model(const Common &o) {
    if (o.model.empty()) return mission::initial_model();
    return gp::make_train_state(gp::load_model(o.model, kFeatureDim, kPreferenceDim));
}

std::vector<formation::FormationPrototype> library(const Common &o) {
    return o.prototypes.empty() ? formation::default_prototypes(o.robots) : formation::load_prototypes(o.prototypes);
}

nlohmann::json summary(const mission::MissionResult &r) {
    return {{"end_reason", r.end_reason}, {"ticks", r.ticks},
            {"queries", r.queries},       {"timeouts", r.timeouts},
            {"fallbacks", r.fallbacks},   {"hard_violations", r.hard_violations},
            {"safety_violations", r.safety_violations}, {"goal_distance", r.final_goal_distance},
            {"digest", r.log.digest()}};
}

template <class F>
double seconds(F &&f, int reps = 1) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) f();
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / reps;
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{"prefflock: preference-learning flocking missions"};
    app.require_subcommand(1);

    Common sim;
    std::string sim_scenario, sim_oracle = default_data("oracle.json"), sim_dataset;
    int sim_missions = 1;
    bool headless = true, no_ticks = false;
    auto *simulate = app.add_subcommand("simulate", "run missions with the synthetic operator");
    simulate->add_option("--scenario", sim_scenario, "scenario file")->required();
    simulate->add_option("--oracle", sim_oracle, "synthetic operator spec");
    simulate->add_option("--dataset", sim_dataset, "append feedback samples here");
    simulate->add_option("--missions", sim_missions, "repeat, carrying the model forward");
    simulate->add_flag("--headless", headless, "no live session (always true for simulate)");
    simulate->add_flag("--no-ticks", no_ticks, "leave per-tick records out of the log");
    add_mission_flags(simulate, sim);

    std::string tr_dataset, tr_out;
    int tr_steps = 2000;
    std::uint64_t tr_seed = 1;
    Common tr_common;
    auto *train = app.add_subcommand("train", "fit the preference model to a feedback dataset");
    train->add_option("--dataset", tr_dataset, "line-delimited feedback samples")->required();
    train->add_option("--steps", tr_steps, "Adam steps");
    train->add_option("--seed", tr_seed, "random seed");
    train->add_option("--model", tr_common.model, "checkpoint to start from");
    train->add_option("--model-out", tr_out, "checkpoint to write (default <out>/model.json)");
    train->add_option("--out", tr_common.out, "output directory");

    std::string ev_envs = default_data("eight.json"), ev_out = default_out();
    eval::EvalConfig ev_cfg;
    bool ev_pairs = false;
    auto *evalc = app.add_subcommand("eval", "adaptation curves over an environment sequence");
    evalc->add_option("--envs", ev_envs, "environment fixture");
    evalc->add_option("--updates", ev_cfg.updates, "model updates per environment");
    evalc->add_option("--samples", ev_cfg.samples_per_update, "oracle samples per update");
    evalc->add_option("--steps", ev_cfg.update_steps, "Adam steps per update");
    evalc->add_option("--seed", ev_cfg.seed, "random seed");
    evalc->add_flag("--pairs", ev_pairs, "also run the similarity-vs-error pair study");
    evalc->add_option("--out", ev_out, "output directory");

    Common sv;
    std::string sv_scenario;
    serve::ServeConfig scfg;
    auto *servec = app.add_subcommand("serve", "run a mission with a live operator over websocket");
    servec->add_option("--scenario", sv_scenario, "scenario file")->required();
    servec->add_option("--host", scfg.host, "bind address");
    servec->add_option("--port", scfg.port, "listen port (0 picks one)");
    servec->add_option("--query-timeout", scfg.query_timeout_s, "seconds to wait for an answer");
    servec->add_option("--pace", scfg.pace, "wall seconds per simulated second (0 = as fast as possible)");
    servec->add_option("--wait-operator", scfg.operator_wait_s, "seconds to wait for an operator before starting");
    add_mission_flags(servec, sv);

    std::string rg_scenario;
    std::vector<double> rg_seed;
    double rg_safety = 0.0;
    auto *regionc = app.add_subcommand("region", "inflate one safe region and print it");
    regionc->add_option("--scenario", rg_scenario, "scenario file")->required();
    regionc->add_option("--at", rg_seed, "seed point x y z")->expected(3)->required();
    regionc->add_option("--h-safety", rg_safety, "extra margin for the dilated region");

    std::string bn_scenario = default_data("eight_env_scenario.json");
    int bn_reps = 20;
    auto *bench = app.add_subcommand("bench", "time the hot paths");
    bench->add_option("--scenario", bn_scenario, "scenario file");
    bench->add_option("--reps", bn_reps, "repetitions");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*simulate) {
            const Scenario s = load_scenario(sim_scenario);
            const OracleSpec o = load_oracle(sim_oracle);
            auto cfg = mission_config(sim);
            cfg.dataset_path = sim_dataset;
            cfg.log_ticks = !no_ticks;
            const auto dir = out_dir(sim.out);
            auto model = start_model(sim);
            const auto lib = library(sim);
            for (int k = 0; k < sim_missions; ++k) {
                mission::SyntheticFeedback fb(o, cfg.seed);
                auto r = mission::run_mission(s, model, fb, cfg, lib);
                const auto log = dir / ("mission_" + std::to_string(cfg.seed) + "_" + std::to_string(k) + ".jsonl");
                r.log.write(log.string());
                auto j = summary(r);
                j["log"] = log.string();
                std::cout << j.dump() << std::endl;
                model = std::move(r.model);
            }
            gp::save_model(model.model, (dir / "model.json").string());
            return 0;
        }
        if (*train) {
            const auto data = load_dataset(tr_dataset);
            if (data.samples.empty()) throw std::runtime_error("dataset '" + tr_dataset + "' has no valid samples");
            if (data.skipped) std::cerr << "warning: skipped " << data.skipped << " malformed lines\n";
            const PreferenceRanges ranges;
            std::mt19937_64 rng(tr_seed);
            auto t = start_model(tr_common);
            t = gp::update_model(std::move(t), to_gp_dataset(data.samples, ranges), tr_steps, gp::GpConfig{}, rng);
            const std::string path = tr_out.empty() ? (out_dir(tr_common.out) / "model.json").string() : tr_out;
            gp::save_model(t.model, path);
            std::cout << nlohmann::json{{"samples", data.samples.size()}, {"elbo", t.last_elbo}, {"model", path}}.dump()
                      << std::endl;
            return 0;
        }
        if (*evalc) {
            const auto fx = eval::load_eval_fixture(ev_envs);
            if (fx.envs.size() < 2) throw std::runtime_error("eval needs at least two environments");
            const auto rep = eval::eval_adaptation(fx, ev_cfg);
            nlohmann::json report{{"adaptation", eval::to_json(rep)}};
            if (ev_pairs) {
                const auto pairs = eval::eval_pairs(fx, ev_cfg);
                report["pairs"] = eval::to_json(pairs);
                report["spearman_similarity_error"] = eval::similarity_error_spearman(pairs);
            }
            const auto path = out_dir(ev_out) / "eval_report.json";
            std::ofstream(path) << report.dump(1) << '\n';
            nlohmann::json brief;
            for (const auto &l : rep.learners) brief[l.name] = l.mean_at(ev_cfg.updates);
            if (ev_pairs) brief["spearman"] = report["spearman_similarity_error"];
            brief["report"] = path.string();
            std::cout << brief.dump() << std::endl;
            return 0;
        }
        if (*servec) {
            const Scenario s = load_scenario(sv_scenario);
            const auto cfg = mission_config(sv);
            const auto lib = library(sv);
            serve::Server srv(scfg, serve::hello_payload(s, lib, cfg));
            srv.start();
            std::cerr << "listening on ws://" << scfg.host << ":" << srv.port() << "/\n";
            auto r = serve::run_served(s, start_model(sv), cfg, scfg, srv, lib);
            srv.stop();
            const auto dir = out_dir(sv.out);
            r.log.write((dir / ("served_" + std::to_string(cfg.seed) + ".jsonl")).string());
            gp::save_model(r.model.model, (dir / "model.json").string());
            std::cout << summary(r).dump() << std::endl;
            return 0;
        }
        if (*regionc) {
            const Scenario s = load_scenario(rg_scenario);
            const Vec3 seed(rg_seed[0], rg_seed[1], rg_seed[2]);
            const auto r = region::inflate_region(s, seed);
            const auto dil = region::dilate(r.polytope, s.robot_edge, rg_safety);
            std::cout << nlohmann::json{{"polytope", region::to_json(r.polytope)},
                                        {"ellipsoid", region::to_json(r.ellipsoid)},
                                        {"iterations", r.iterations},
                                        {"logdet", r.logdet_history},
                                        {"dilated", region::to_json(dil.poly)},
                                        {"dilated_empty", dil.empty}}
                             .dump()
                      << std::endl;
            return 0;
        }
        if (*bench) {
            const Scenario s = load_scenario(bn_scenario);
            const Vec3 p = s.start + Vec3(2, 0, 0);
            auto robots = mission::spawn_robots(s, 5, 1.5);
            flocking::TickInput in;
            in.states = robots;
            in.scenario = &s;
            in.goal = s.goal;
            in.dt = 0.05;
            std::mt19937_64 rng(1);
            gp::Dataset d;
            d.X = Eigen::MatrixXd::Random(60, kFeatureDim);
            d.Y = Eigen::MatrixXd::Random(60, kPreferenceDim) * 0.5;
            d.Y.array() += 0.5;
            auto t = mission::initial_model();
            nlohmann::json out;
            out["tick_s"] = seconds([&] { in.states = flocking::tick(in).states; }, bn_reps * 50);
            out["features_s"] = seconds([&] { (void)extract_features(s, p, {}); }, bn_reps);
            out["update_200_s"] = seconds([&] { t = gp::update_model(std::move(t), d, 200, {}, rng); }, 1);
            const Eigen::VectorXd x = d.X.row(0).transpose();
            out["predict_s"] = seconds([&] { (void)gp::predict(t.model, x); }, bn_reps * 50);
            region::InflateResult reg;
            out["inflate_s"] = seconds([&] { reg = region::inflate_region(s, p); }, bn_reps);
            const auto dil = region::dilate(reg.polytope, s.robot_edge, 1.0);
            const auto lib = formation::default_prototypes(5);
            out["fit_s"] = seconds([&] { (void)formation::fit_with_fallback(lib, dil, s.goal, {}); }, bn_reps);
            std::cout << out.dump() << std::endl;
            return 0;
        }
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
