#pragma once

#include "prefflock/dataset.hpp"
#include "prefflock/oracle.hpp"
#include "prefflock/preference_gp.hpp"
#include "prefflock/stats.hpp"
#include "prefflock/world.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace prefflock::eval {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct EvalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EnvSet {
    std::string label;
    std::vector<VectorXd> train;  // positions the oracle is asked at
    std::vector<VectorXd> test;   // held-out positions for scoring
    VectorXd mean_feature;
};

struct EvalFixture {
    Scenario scenario;
    OracleSpec oracle;
    std::vector<EnvSet> envs;
};

/// Features at a sample position, with the swarm hovering (zero speed).
inline VectorXd position_features(const Scenario &s, const Vec3 &p) {
    return normalize_features(extract_features(s, p, SwarmSummary{0.0, p.z()}));
}

/// Loads the environment list; paths inside are relative to the fixture file.
/// Each environment's positions are split in half by a fixed shuffle into
/// training and held-out sets.
inline EvalFixture load_eval_fixture(const std::string &path, std::uint64_t split_seed = 11) {
    std::ifstream in(path);
    if (!in) throw EvalError("cannot open eval fixture '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception &e) {
        throw EvalError("eval fixture '" + path + "': " + e.what());
    }
    const auto dir = std::filesystem::path(path).parent_path();
    EvalFixture fx;
    fx.scenario = load_scenario((dir / j.at("scenario").get<std::string>()).string());
    fx.oracle = load_oracle((dir / j.at("oracle").get<std::string>()).string());
    for (const auto &e : j.at("environments")) {
        EnvSet env;
        env.label = e.at("label").get<std::string>();
        (void)fx.oracle.at(env.label);
        const auto &pos = e.at("positions");
        std::vector<std::size_t> order(pos.size());
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 split_rng(split_seed + fx.envs.size());
        std::shuffle(order.begin(), order.end(), split_rng);
        for (std::size_t k = 0; k < order.size(); ++k) {
            const auto &q = pos[order[k]];
            const Vec3 p(q[0].get<double>(), q[1].get<double>(), q[2].get<double>());
            (k % 2 == 0 ? env.train : env.test).push_back(position_features(fx.scenario, p));
        }
        if (env.train.empty() || env.test.empty())
            throw EvalError("environment '" + env.label + "' needs at least two positions");
        env.mean_feature = VectorXd::Zero(env.train.front().size());
        for (const auto &x : env.train) env.mean_feature += x;
        for (const auto &x : env.test) env.mean_feature += x;
        env.mean_feature /= static_cast<double>(env.train.size() + env.test.size());
        fx.envs.push_back(std::move(env));
    }
    return fx;
}

// ---------------------------------------------------------------------------
// Learners. All map normalized features to normalized preferences.

class Learner {
public:
    virtual ~Learner() = default;
    [[nodiscard]] virtual std::string name() const = 0;
    virtual void fit(const gp::Dataset &data, std::mt19937_64 &rng) = 0;
    [[nodiscard]] virtual VectorXd predict(const VectorXd &x) const = 0;
};

class GpLearner : public Learner {
public:
    explicit GpLearner(int input_dim, gp::GpConfig cfg = {}, int steps = 200) : cfg_(cfg), steps_(steps) {
        t_ = gp::make_train_state(
            gp::make_state(input_dim, kPreferenceDim, MatrixXd::Zero(1, input_dim), cfg_));
    }
    [[nodiscard]] std::string name() const override { return "gp"; }
    void fit(const gp::Dataset &data, std::mt19937_64 &rng) override {
        t_ = gp::update_model(std::move(t_), data, steps_, cfg_, rng);
    }
    [[nodiscard]] VectorXd predict(const VectorXd &x) const override { return gp::predict(t_.model, x).mean; }
    [[nodiscard]] const gp::TrainState &state() const { return t_; }

private:
    gp::GpConfig cfg_;
    int steps_;
    gp::TrainState t_;
};

/// Linear least squares with an unpenalized bias and L2 weight penalty.
class RidgeLearner : public Learner {
public:
    explicit RidgeLearner(double lambda = 1e-2) : lambda_(lambda) {}
    [[nodiscard]] std::string name() const override { return "ridge"; }
    void fit(const gp::Dataset &data, std::mt19937_64 &) override {
        const auto N = data.X.rows(), D = data.X.cols();
        MatrixXd A(N, D + 1);
        A << data.X, VectorXd::Ones(N);
        MatrixXd reg = lambda_ * MatrixXd::Identity(D + 1, D + 1);
        reg(D, D) = 0.0;
        W_ = (A.transpose() * A + reg).ldlt().solve(A.transpose() * data.Y);
    }
    [[nodiscard]] VectorXd predict(const VectorXd &x) const override {
        if (W_.size() == 0) return VectorXd::Zero(kPreferenceDim);
        VectorXd a(x.size() + 1);
        a << x, 1.0;
        return W_.transpose() * a;
    }

private:
    double lambda_;
    MatrixXd W_;
};

/// One tanh hidden layer trained full-batch with Adam on squared error.
class MlpLearner : public Learner {
public:
    explicit MlpLearner(int hidden = 16, int epochs = 500, double lr = 1e-2)
        : hidden_(hidden), epochs_(epochs), lr_(lr) {}
    [[nodiscard]] std::string name() const override { return "mlp"; }

    void fit(const gp::Dataset &data, std::mt19937_64 &rng) override {
        const auto N = data.X.rows(), D = data.X.cols(), d = data.Y.cols();
        std::normal_distribution<double> g(0.0, 1.0);
        auto init = [&](Eigen::Index r, Eigen::Index c, double sc) {
            MatrixXd m(r, c);
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sc * g(rng);
            return m;
        };
        W1_ = init(hidden_, D, 1.0 / std::sqrt(static_cast<double>(D)));
        b1_ = VectorXd::Zero(hidden_);
        W2_ = init(d, hidden_, 1.0 / std::sqrt(static_cast<double>(hidden_)));
        b2_ = VectorXd::Zero(d);
        MatrixXd mW1 = MatrixXd::Zero(W1_.rows(), W1_.cols()), vW1 = mW1, mW2 = MatrixXd::Zero(W2_.rows(), W2_.cols()),
                 vW2 = mW2;
        VectorXd mb1 = VectorXd::Zero(hidden_), vb1 = mb1, mb2 = VectorXd::Zero(d), vb2 = mb2;
        const double b1c = 0.9, b2c = 0.999, eps = 1e-8;
        auto adam = [&](auto &p, auto &m, auto &v, const auto &grad, int t) {
            m = b1c * m + (1 - b1c) * grad;
            v = b2c * v + (1 - b2c) * grad.cwiseProduct(grad);
            const double c1 = 1 - std::pow(b1c, t), c2 = 1 - std::pow(b2c, t);
            p.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
        };
        const MatrixXd Xt = data.X.transpose();
        const MatrixXd Yt = data.Y.transpose();
        for (int t = 1; t <= epochs_; ++t) {
            const MatrixXd H = ((W1_ * Xt).colwise() + b1_).array().tanh().matrix();
            const MatrixXd out = (W2_ * H).colwise() + b2_;
            const MatrixXd dOut = 2.0 * (out - Yt) / static_cast<double>(N);
            const MatrixXd gW2 = dOut * H.transpose();
            const VectorXd gb2 = dOut.rowwise().sum();
            const MatrixXd dH = (W2_.transpose() * dOut).cwiseProduct((1.0 - H.array().square()).matrix());
            const MatrixXd gW1 = dH * data.X;
            const VectorXd gb1 = dH.rowwise().sum();
            adam(W1_, mW1, vW1, gW1, t);
            adam(b1_, mb1, vb1, gb1, t);
            adam(W2_, mW2, vW2, gW2, t);
            adam(b2_, mb2, vb2, gb2, t);
        }
    }

    [[nodiscard]] VectorXd predict(const VectorXd &x) const override {
        if (W1_.size() == 0) return VectorXd::Zero(kPreferenceDim);
        return W2_ * (W1_ * x + b1_).array().tanh().matrix() + b2_;
    }

private:
    int hidden_, epochs_;
    double lr_;
    MatrixXd W1_, W2_;
    VectorXd b1_, b2_;
};

// ---------------------------------------------------------------------------
// Protocols

struct EvalConfig {
    int updates = 5;
    int samples_per_update = 4;
    int update_steps = 200;
    std::uint64_t seed = 7;
    double similarity_sigma = 1.0;
    gp::GpConfig gp;
};

/// Root-mean-square error over the d preference dimensions in normalized
/// units, averaged over the held-out positions of an environment.
inline double env_error(const Learner &m, const EnvSet &env, const OracleSpec &oracle) {
    const VectorXd target = oracle.normalized_mean(env.label);
    double total = 0.0;
    for (const auto &x : env.test)
        total += (m.predict(x) - target).norm() / std::sqrt(static_cast<double>(target.size()));
    return total / static_cast<double>(env.test.size());
}

/// Asks the synthetic oracle at `count` training positions of env (drawn
/// without replacement, cycling when exhausted) and appends to data.
inline void collect(const EnvSet &env, const OracleSpec &oracle, int count, std::mt19937_64 &rng,
                    std::vector<VectorXd> &xs, std::vector<VectorXd> &ys) {
    std::vector<std::size_t> idx(env.train.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (int i = 0; i < count; ++i) {
        const auto &x = env.train[idx[static_cast<std::size_t>(i) % idx.size()]];
        xs.push_back(x);
        ys.push_back(oracle.ranges.normalize(synthetic_feedback(oracle, env.label, rng)));
    }
}

inline gp::Dataset stack(const std::vector<VectorXd> &xs, const std::vector<VectorXd> &ys) {
    gp::Dataset d;
    d.X.resize(static_cast<Eigen::Index>(xs.size()), xs.front().size());
    d.Y.resize(static_cast<Eigen::Index>(ys.size()), ys.front().size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        d.X.row(static_cast<Eigen::Index>(i)) = xs[i].transpose();
        d.Y.row(static_cast<Eigen::Index>(i)) = ys[i].transpose();
    }
    return d;
}

struct Curve {
    std::string env;
    std::vector<double> error;  // after k = 0..updates model updates in env
};

struct LearnerReport {
    std::string name;
    std::vector<Curve> curves;
    [[nodiscard]] double mean_at(int k) const {
        double s = 0.0;
        for (const auto &c : curves) s += c.error.at(static_cast<std::size_t>(k));
        return s / static_cast<double>(curves.size());
    }
};

/// Visits the environments in fixture order with one learner carried across
/// them. Every learner sees the same feedback stream.
inline LearnerReport run_sequence(Learner &m, const EvalFixture &fx, const EvalConfig &cfg) {
    std::mt19937_64 data_rng(cfg.seed), fit_rng(cfg.seed ^ 0xA5A5A5A5ULL);
    std::vector<VectorXd> xs, ys;
    LearnerReport rep{m.name(), {}};
    for (const auto &env : fx.envs) {
        Curve c{env.label, {env_error(m, env, fx.oracle)}};
        for (int k = 0; k < cfg.updates; ++k) {
            collect(env, fx.oracle, cfg.samples_per_update, data_rng, xs, ys);
            m.fit(stack(xs, ys), fit_rng);
            c.error.push_back(env_error(m, env, fx.oracle));
        }
        rep.curves.push_back(std::move(c));
    }
    return rep;
}

struct AdaptationReport {
    std::vector<LearnerReport> learners;  // gp first, then baselines
};

inline AdaptationReport eval_adaptation(const EvalFixture &fx, const EvalConfig &cfg) {
    const int D = static_cast<int>(fx.envs.front().train.front().size());
    AdaptationReport out;
    GpLearner g(D, cfg.gp, cfg.update_steps);
    RidgeLearner r;
    MlpLearner m;
    out.learners.push_back(run_sequence(g, fx, cfg));
    out.learners.push_back(run_sequence(r, fx, cfg));
    out.learners.push_back(run_sequence(m, fx, cfg));
    return out;
}

struct PairRecord {
    std::string from, to;
    double similarity = 0.0;
    double error = 0.0;  // on `to` after one update there
};

/// For every ordered pair (A, B): fresh GP, `updates` updates in A, one in B.
inline std::vector<PairRecord> eval_pairs(const EvalFixture &fx, const EvalConfig &cfg) {
    const int D = static_cast<int>(fx.envs.front().train.front().size());
    std::vector<PairRecord> out;
    for (std::size_t a = 0; a < fx.envs.size(); ++a)
        for (std::size_t b = 0; b < fx.envs.size(); ++b) {
            if (a == b) continue;
            std::mt19937_64 data_rng(cfg.seed + 1000 * a + b), fit_rng(cfg.seed + 7919 * (a + 1) + b);
            GpLearner g(D, cfg.gp, cfg.update_steps);
            std::vector<VectorXd> xs, ys;
            for (int k = 0; k < cfg.updates; ++k) {
                collect(fx.envs[a], fx.oracle, cfg.samples_per_update, data_rng, xs, ys);
                g.fit(stack(xs, ys), fit_rng);
            }
            collect(fx.envs[b], fx.oracle, cfg.samples_per_update, data_rng, xs, ys);
            g.fit(stack(xs, ys), fit_rng);
            out.push_back({fx.envs[a].label, fx.envs[b].label,
                           env_similarity(fx.envs[a].mean_feature, fx.envs[b].mean_feature, cfg.similarity_sigma),
                           env_error(g, fx.envs[b], fx.oracle)});
        }
    return out;
}

inline double similarity_error_spearman(const std::vector<PairRecord> &pairs) {
    std::vector<double> s, e;
    for (const auto &p : pairs) {
        s.push_back(p.similarity);
        e.push_back(p.error);
    }
    return stats::spearman(s, e);
}

inline nlohmann::json to_json(const AdaptationReport &r) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto &l : r.learners) {
        nlohmann::json curves = nlohmann::json::object();
        for (const auto &c : l.curves) curves[c.env] = c.error;
        j.push_back({{"learner", l.name}, {"curves", curves}, {"mean_final", l.mean_at(static_cast<int>(l.curves.front().error.size()) - 1)}});
    }
    return j;
}

inline nlohmann::json to_json(const std::vector<PairRecord> &pairs) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto &p : pairs) j.push_back({{"from", p.from}, {"to", p.to}, {"similarity", p.similarity}, {"error", p.error}});
    return j;
}

}  // namespace prefflock::eval
