#include "gp_fixtures.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace prefflock;
using namespace prefflock::gp;
using namespace prefflock::testing;

namespace {

GpModelState unit_state(int D, int d, const MatrixXd &Z) {
    GpConfig cfg;
    cfg.num_latent = d;
    cfg.init_log_noise = 0.0;
    return make_state(D, d, Z, cfg);
}

double min_eigenvalue(const MatrixXd &m) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(m);
    return es.eigenvalues().minCoeff();
}

}  // namespace

TEST(Kernel, SquaredExponential) {
    Latent lat{VectorXd::Zero(3), 0.0, VectorXd(), MatrixXd()};
    VectorXd x(3), y(3);
    x << 0.3, -1.0, 2.0;
    y << 1.3, 0.0, 2.0;  // |x - y|^2 = 2
    EXPECT_DOUBLE_EQ(kernel_eval(x, x, lat), 1.0);
    EXPECT_NEAR(kernel_eval(x, y, lat), std::exp(-1.0), 1e-15);
    EXPECT_LT(kernel_eval(x, VectorXd::Constant(3, 1e3), lat), 1e-300);
    lat.log_variance = std::log(2.5);
    EXPECT_DOUBLE_EQ(kernel_eval(y, y, lat), 2.5);
}

TEST(Kernel, KernelMatrixMatchesPointwise) {
    std::mt19937_64 rng(1);
    const auto s = random_state(3, 2, 2, 4, rng);
    const auto data = random_dataset(5, 3, 2, rng);
    const MatrixXd K = kernel_matrix(s.Z, data.X, s.latents[1]);
    for (int i = 0; i < 4; ++i)
        for (int n = 0; n < 5; ++n)
            EXPECT_NEAR(K(i, n), kernel_eval(s.Z.row(i).transpose(), data.X.row(n).transpose(), s.latents[1]), 1e-14);
}

TEST(MultiOutputKernel, RankOneAndIdentityAndSum) {
    std::mt19937_64 rng(2);
    auto s = random_state(2, 3, 1, 2, rng);
    s.W = MatrixXd::Ones(3, 1);
    VectorXd a(2), b(2);
    a << 0.1, 0.2;
    b << -0.4, 0.9;
    for (int p = 0; p < 3; ++p)
        for (int q = 0; q < 3; ++q) EXPECT_NEAR(multi_output_kernel(a, p, b, q, s), kernel_eval(a, b, 0, s), 1e-15);

    auto t = random_state(2, 3, 3, 2, rng);
    t.W = MatrixXd::Identity(3, 3);
    EXPECT_EQ(multi_output_kernel(a, 0, b, 1, t), 0.0);
    EXPECT_NEAR(multi_output_kernel(a, 2, b, 2, t), kernel_eval(a, b, 2, t), 1e-15);

    auto r = random_state(2, 3, 4, 2, rng);
    for (int p = 0; p < 3; ++p)
        for (int q = 0; q < 3; ++q) {
            double brute = 0.0;
            for (int l = 0; l < 4; ++l) {
                const auto &lat = r.latents[l];
                double r2 = 0.0;
                for (int j = 0; j < 2; ++j) r2 += std::pow((a[j] - b[j]) / std::exp(lat.log_lengthscale[j]), 2);
                brute += r.W(p, l) * std::exp(lat.log_variance) * std::exp(-0.5 * r2) * r.W(q, l);
            }
            EXPECT_NEAR(multi_output_kernel(a, p, b, q, r), brute, 1e-14);
        }
    EXPECT_THROW(multi_output_kernel(a, 3, b, 0, r), std::out_of_range);
}

TEST(NoiseVariance, ExponentialForm) {
    auto s = unit_state(3, 2, MatrixXd::Zero(1, 3));
    VectorXd x = VectorXd::Zero(3);
    EXPECT_DOUBLE_EQ(noise_variance(x, 0, s), 1.0);
    s.alpha[1] = std::log(4.0);
    EXPECT_NEAR(noise_variance(x, 1, s), 4.0, 1e-14);
    s.alpha[0] = 0.0;
    s.beta(0, 0) = 1.0;
    x[0] = 2.0;
    EXPECT_NEAR(noise_variance(x, 0, s), std::exp(2.0), 1e-12);
    x[0] = 1e4;
    bool clamped = false;
    EXPECT_TRUE(std::isfinite(noise_variance(x, 0, s, &clamped)));
    EXPECT_TRUE(clamped);
}

TEST(Elbo, PriorWithVanishingSignalMatchesNoiseLikelihood) {
    std::mt19937_64 rng(3);
    auto data = random_dataset(6, 2, 2, rng);
    auto s = unit_state(2, 2, data.X.topRows(3));
    for (auto &lat : s.latents) lat.log_variance = std::log(1e-12);
    s.alpha << std::log(0.3), std::log(0.7);
    double oracle = 0.0;
    for (int n = 0; n < 6; ++n)
        for (int p = 0; p < 2; ++p) {
            const double v = noise_variance(data.X.row(n).transpose(), p, s);
            oracle += -0.5 * std::log(2 * std::numbers::pi * v) - 0.5 * data.Y(n, p) * data.Y(n, p) / v;
        }
    EXPECT_NEAR(elbo_full(s, data).value, oracle, 1e-6);
}

TEST(Elbo, NeverExceedsExactMarginal) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const int N = 3 + trial;
        auto data = random_dataset(N, 2, 2, rng);
        auto s = random_state(2, 2, 2, std::min(N, 5), rng);
        const double exact = exact_log_marginal(data, s);
        EXPECT_LE(elbo_full(s, data).value, exact + 1e-9);
        const auto best = optimize_variational(s, data, 20);
        EXPECT_LE(elbo_full(best, data).value, exact + 1e-6);
        EXPECT_GE(elbo_full(best, data).value, elbo_full(s, data).value - 1e-9);
    }
}

TEST(Elbo, DuplicatedDataWithHalfScale) {
    std::mt19937_64 rng(5);
    auto data = random_dataset(7, 2, 2, rng);
    auto s = random_state(2, 2, 2, 4, rng);
    Dataset dup{MatrixXd(14, 2), MatrixXd(14, 2)};
    dup.X << data.X, data.X;
    dup.Y << data.Y, data.Y;
    std::vector<int> all(14);
    std::iota(all.begin(), all.end(), 0);
    EXPECT_NEAR(elbo(s, dup, all, 0.5).value, elbo_full(s, data).value, 1e-10);
    EXPECT_THROW(elbo(s, dup, std::span<const int>(), 1.0), GpError);
}

TEST(Elbo, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 3; ++trial) {
        auto data = random_dataset(3, 2, 2, rng);
        auto s = random_state(2, 2, 2, 3, rng);
        const auto r = check_gradient(s, data);
        EXPECT_LT(r.worst_component, 1e-4) << "trial " << trial;
        EXPECT_LT(r.vector_rel, 1e-4);
    }
}

TEST(TrainStep, ZeroGradientLeavesStateUnchanged) {
    std::mt19937_64 rng(7);
    auto t = make_train_state(random_state(2, 2, 2, 3, rng));
    const auto before = flatten(t.model);
    const auto after = apply_gradient(t, VectorXd::Zero(before.size()), {});
    EXPECT_LE((flatten(after.model) - before).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(TrainStep, NonFiniteGradientSkipped) {
    std::mt19937_64 rng(8);
    auto t = make_train_state(random_state(2, 2, 2, 3, rng));
    VectorXd g = VectorXd::Ones(parameter_count(t.model));
    g[3] = std::numeric_limits<double>::quiet_NaN();
    const auto after = apply_gradient(t, g, {});
    EXPECT_EQ(after.skipped, 1);
    EXPECT_EQ(flatten(after.model), flatten(t.model));
}

TEST(TrainStep, SinglePointElboMostlyNonDecreasing) {
    Dataset data{MatrixXd::Constant(1, 1, 0.3), MatrixXd::Constant(1, 1, 0.8)};
    GpConfig cfg;
    cfg.num_latent = 1;
    auto t = make_train_state(make_state(1, 1, data.X, cfg));
    std::vector<int> all{0};
    double prev = elbo_full(t.model, data).value;
    int non_decreasing = 0;
    for (int i = 0; i < 100; ++i) {
        t = train_step(t, data, all, 1.0, {cfg.lr_main, cfg.lr_noise}, cfg);
        const double now = elbo_full(t.model, data).value;
        non_decreasing += now >= prev;
        prev = now;
    }
    EXPECT_GE(non_decreasing, 95);
}

TEST(Predict, PriorHasUnitSignalPlusUnitNoise) {
    auto s = unit_state(3, 5, MatrixXd::Random(4, 3));
    const auto p = predict(s, VectorXd::Constant(3, 0.2));
    EXPECT_NEAR(p.mean.norm(), 0.0, 1e-12);
    for (int q = 0; q < 5; ++q) EXPECT_NEAR(p.variance(q), 2.0, 1e-9);
}

TEST(Predict, FitsNearNoiselessPoint) {
    Dataset data{MatrixXd::Constant(1, 2, 0.4), MatrixXd::Constant(1, 1, 0.7)};
    GpConfig cfg;
    cfg.num_latent = 1;
    cfg.init_log_noise = std::log(1e-4);
    std::mt19937_64 rng(9);
    auto t = make_train_state(make_state(2, 1, data.X, cfg));
    t = update_model(std::move(t), data, 200, cfg, rng);
    EXPECT_NEAR(predict(t.model, data.X.row(0).transpose()).mean[0], 0.7, 0.05);
}

TEST(Predict, CovarianceSymmetricPsd) {
    std::mt19937_64 rng(10);
    std::normal_distribution<double> n;
    for (int trial = 0; trial < 50; ++trial) {
        const auto s = random_state(3, 4, 3, 5, rng);
        VectorXd x(3);
        for (int j = 0; j < 3; ++j) x[j] = 2.0 * n(rng);
        const auto p = predict(s, x);
        EXPECT_LE((p.cov - p.cov.transpose()).cwiseAbs().maxCoeff(), 1e-14);
        EXPECT_GT(min_eigenvalue(p.cov), -1e-8);
        const auto cached = SparsePredictor(s).predict(x);
        EXPECT_LE((cached.mean - p.mean).cwiseAbs().maxCoeff(), 1e-9);
        EXPECT_LE((cached.cov - p.cov).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(Predict, QueryCostQuadraticInInducing) {
    std::mt19937_64 rng(11);
    std::vector<double> counts;
    for (int M : {16, 32, 64}) {
        const auto s = random_state(4, 3, 3, M, rng);
        SparsePredictor sp(s);
        (void)sp.predict(VectorXd::Zero(4));
        counts.push_back(static_cast<double>(sp.op_count()));
    }
    // doubling M roughly quadruples the work; cubic would be 8x
    EXPECT_LT(counts[1] / counts[0], 5.0);
    EXPECT_LT(counts[2] / counts[1], 5.0);
    EXPECT_GT(counts[2] / counts[1], 3.0);
}

TEST(ExactGp, InterpolatesAndDecays) {
    auto s = unit_state(2, 1, MatrixXd::Zero(1, 2));
    s.alpha[0] = std::log(1e-10);
    Dataset data{MatrixXd::Constant(1, 2, 0.5), MatrixXd::Constant(1, 1, 1.3)};
    EXPECT_NEAR(exact_gp_predict(data, s, data.X.row(0).transpose()).mean[0], 1.3, 1e-6);
    EXPECT_NEAR(exact_gp_predict(data, s, VectorXd::Constant(2, 50.0)).mean[0], 0.0, 1e-12);
}

TEST(ExactGp, SparseWithInducingAtDataMatchesExact) {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 5; ++trial) {
        const int N = 5 + 3 * trial;
        auto data = random_dataset(N, 2, 2, rng);
        auto s = random_state(2, 2, 2, N, rng);
        s.Z = data.X;
        s = optimize_variational(s, data, 50);
        std::normal_distribution<double> n;
        double mad = 0.0;
        for (int k = 0; k < 20; ++k) {
            VectorXd x(2);
            x << n(rng), n(rng);
            mad += (predict(s, x).mean - exact_gp_predict(data, s, x).mean).cwiseAbs().mean();
        }
        EXPECT_LT(mad / 20, 1e-2) << "N=" << N;
    }
}

TEST(Checkpoint, RoundTripAndRejections) {
    std::mt19937_64 rng(13);
    const auto s = random_state(3, 2, 2, 4, rng);
    const auto dir = std::filesystem::temp_directory_path();
    const std::string path = (dir / "prefflock_model.json").string();
    save_model(s, path);
    const auto back = load_model(path, 3, 2);
    std::normal_distribution<double> n;
    for (int k = 0; k < 10; ++k) {
        VectorXd x(3);
        x << n(rng), n(rng), n(rng);
        const auto a = predict(s, x), b = predict(back, x);
        EXPECT_EQ(a.mean, b.mean);
        EXPECT_EQ(a.cov, b.cov);
    }
    EXPECT_THROW(load_model(path, 4, 2), GpError);

    std::ifstream in(path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string cut = (dir / "prefflock_model_cut.json").string();
    std::ofstream(cut) << text.substr(0, text.size() / 2);
    EXPECT_THROW(load_model(cut), GpError);
}

TEST(UpdateModel, ReinducePreservesPosteriorAtOldPoints) {
    std::mt19937_64 rng(14);
    auto data = random_dataset(6, 2, 2, rng);
    auto s = random_state(2, 2, 2, 6, rng);
    s.Z = data.X;
    s = optimize_variational(s, data);
    MatrixXd Z2(8, 2);
    Z2 << data.X, MatrixXd::Random(2, 2);
    const auto moved = reinduce(s, Z2);
    for (int n = 0; n < 6; ++n) {
        const auto a = predict(s, data.X.row(n).transpose());
        const auto b = predict(moved, data.X.row(n).transpose());
        EXPECT_LE((a.mean - b.mean).cwiseAbs().maxCoeff(), 1e-4);
    }
}
