#pragma once

// Multi-output sparse variational GP (linear model of coregionalization) with
// input-dependent diagonal observation noise.
//
//   g_l ~ GP(0, k_l),  f(x) = W g(x),  y = f(x) + eps,
//   eps_p ~ N(0, exp(alpha_p + beta_p . x))
//
// Each latent has M shared inducing inputs Z and a whitened variational
// posterior q(v_l) = N(m_l, R_l R_l^T) with u_l = chol(K_zz) v_l.

#include <nlohmann/json.hpp>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace prefflock::gp {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct GpError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GpConfig {
    int num_latent = 5;
    int max_inducing = 32;
    double jitter = 1e-6;
    double max_jitter = 1e-2;
    double lr_main = 1e-2;
    double lr_noise = 1e-3;
    int steps = 2000;
    int batch = 64;
    double init_lengthscale = 1.0;
    double init_variance = 1.0;
    double init_log_noise = std::log(1e-2);
    double log_noise_min = -20.0;
    double log_noise_max = 20.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
};

struct Latent {
    VectorXd log_lengthscale;
    double log_variance = 0.0;
    VectorXd q_mean;
    MatrixXd q_sqrt;  // lower triangular
};

struct GpModelState {
    int input_dim = 0;
    int output_dim = 0;
    MatrixXd Z;  // M x D
    std::vector<Latent> latents;
    MatrixXd W;      // d x L
    VectorXd alpha;  // d
    MatrixXd beta;   // d x D
    double jitter = 1e-6;
    double max_jitter = 1e-2;
    double log_noise_min = -20.0;
    double log_noise_max = 20.0;

    [[nodiscard]] int num_inducing() const { return static_cast<int>(Z.rows()); }
    [[nodiscard]] int num_latent() const { return static_cast<int>(latents.size()); }
};

/// Training data in model units: X is N x D, Y is N x d.
struct Dataset {
    MatrixXd X;
    MatrixXd Y;
    [[nodiscard]] int size() const { return static_cast<int>(X.rows()); }
};

struct Prediction {
    VectorXd mean;
    MatrixXd cov;
    [[nodiscard]] double variance(int p) const { return cov(p, p); }
    [[nodiscard]] double mean_variance() const { return cov.trace() / static_cast<double>(cov.rows()); }
};

// ---------------------------------------------------------------------------
// Kernels and noise

inline double kernel_eval(const Eigen::Ref<const VectorXd> &a, const Eigen::Ref<const VectorXd> &b,
                          const Latent &lat) {
    const VectorXd ls = lat.log_lengthscale.array().exp();
    const double r2 = ((a - b).array() / ls.array()).square().sum();
    return std::exp(lat.log_variance) * std::exp(-0.5 * r2);
}

inline double kernel_eval(const Eigen::Ref<const VectorXd> &a, const Eigen::Ref<const VectorXd> &b, int l,
                          const GpModelState &s) {
    return kernel_eval(a, b, s.latents.at(l));
}

/// Cross-covariance k_l(A_i, B_j); rows of A and B are inputs.
inline MatrixXd kernel_matrix(const MatrixXd &A, const MatrixXd &B, const Latent &lat) {
    const VectorXd inv_ls = (-lat.log_lengthscale.array()).exp();
    const MatrixXd As = A * inv_ls.asDiagonal();
    const MatrixXd Bs = B * inv_ls.asDiagonal();
    MatrixXd sq = (-2.0 * As * Bs.transpose()).colwise() + As.rowwise().squaredNorm();
    sq.rowwise() += Bs.rowwise().squaredNorm().transpose();
    return std::exp(lat.log_variance) * (-0.5 * sq.array().max(0.0)).exp().matrix();
}

/// Sum over latents of W_pl k_l(x, x') W_p'l.
inline double multi_output_kernel(const Eigen::Ref<const VectorXd> &x, int p, const Eigen::Ref<const VectorXd> &xp,
                                  int pp, const GpModelState &s) {
    if (p < 0 || pp < 0 || p >= s.output_dim || pp >= s.output_dim)
        throw std::out_of_range("multi_output_kernel: output index");
    double acc = 0.0;
    for (int l = 0; l < s.num_latent(); ++l) acc += s.W(p, l) * kernel_eval(x, xp, s.latents[l]) * s.W(pp, l);
    return acc;
}

/// Log noise variance with the exponent clamped to the configured range.
inline double log_noise(const Eigen::Ref<const VectorXd> &x, int p, const GpModelState &s, bool *clamped = nullptr) {
    const double e = s.alpha[p] + s.beta.row(p).dot(x);
    const double c = std::clamp(e, s.log_noise_min, s.log_noise_max);
    if (clamped) *clamped = (c != e);
    return c;
}

inline double noise_variance(const Eigen::Ref<const VectorXd> &x, int p, const GpModelState &s,
                             bool *clamped = nullptr) {
    if (p < 0 || p >= s.output_dim) throw std::out_of_range("noise_variance: output index");
    return std::exp(log_noise(x, p, s, clamped));
}

// ---------------------------------------------------------------------------
// Construction

inline GpModelState make_state(int input_dim, int output_dim, const MatrixXd &Z, const GpConfig &cfg = {}) {
    if (Z.rows() < 1 || Z.cols() != input_dim) throw GpError("make_state: Z must be M x D with M >= 1");
    GpModelState s;
    s.input_dim = input_dim;
    s.output_dim = output_dim;
    s.Z = Z;
    const int L = cfg.num_latent;
    const int M = static_cast<int>(Z.rows());
    s.latents.resize(L);
    for (auto &lat : s.latents) {
        lat.log_lengthscale = VectorXd::Constant(input_dim, std::log(cfg.init_lengthscale));
        lat.log_variance = std::log(cfg.init_variance);
        lat.q_mean = VectorXd::Zero(M);
        lat.q_sqrt = MatrixXd::Identity(M, M);
    }
    s.W = MatrixXd::Identity(output_dim, L);
    s.alpha = VectorXd::Constant(output_dim, cfg.init_log_noise);
    s.beta = MatrixXd::Zero(output_dim, input_dim);
    s.jitter = cfg.jitter;
    s.max_jitter = cfg.max_jitter;
    s.log_noise_min = cfg.log_noise_min;
    s.log_noise_max = cfg.log_noise_max;
    return s;
}

/// Cholesky factor of K + jitter I, escalating jitter x10 up to max_jitter.
inline MatrixXd robust_cholesky(const MatrixXd &K, double jitter, double max_jitter, double *used = nullptr) {
    const auto n = K.rows();
    for (double j = jitter; j <= max_jitter * (1 + 1e-12); j *= 10.0) {
        Eigen::LLT<MatrixXd> llt(K + j * MatrixXd::Identity(n, n));
        if (llt.info() == Eigen::Success) {
            if (used) *used = j;
            return llt.matrixL();
        }
    }
    throw GpError("cholesky failed after jitter escalation");
}

// ---------------------------------------------------------------------------
// Parameter packing. Order: Z, per latent [log_ls, log_var, q_mean, tril(q_sqrt)],
// W, then the noise group [alpha, beta].

inline Eigen::Index parameter_count(const GpModelState &s) {
    const Eigen::Index M = s.num_inducing(), D = s.input_dim, d = s.output_dim, L = s.num_latent();
    return M * D + L * (D + 1 + M + M * (M + 1) / 2) + d * L + d + d * D;
}

inline Eigen::Index noise_group_offset(const GpModelState &s) {
    return parameter_count(s) - s.output_dim * (1 + s.input_dim);
}

inline VectorXd flatten(const GpModelState &s) {
    VectorXd v(parameter_count(s));
    Eigen::Index k = 0;
    auto put = [&](double x) { v[k++] = x; };
    for (int i = 0; i < s.Z.rows(); ++i)
        for (int j = 0; j < s.Z.cols(); ++j) put(s.Z(i, j));
    for (const auto &lat : s.latents) {
        for (int j = 0; j < lat.log_lengthscale.size(); ++j) put(lat.log_lengthscale[j]);
        put(lat.log_variance);
        for (int j = 0; j < lat.q_mean.size(); ++j) put(lat.q_mean[j]);
        for (int c = 0; c < lat.q_sqrt.cols(); ++c)
            for (int r = c; r < lat.q_sqrt.rows(); ++r) put(lat.q_sqrt(r, c));
    }
    for (int i = 0; i < s.W.rows(); ++i)
        for (int j = 0; j < s.W.cols(); ++j) put(s.W(i, j));
    for (int i = 0; i < s.alpha.size(); ++i) put(s.alpha[i]);
    for (int i = 0; i < s.beta.rows(); ++i)
        for (int j = 0; j < s.beta.cols(); ++j) put(s.beta(i, j));
    return v;
}

inline GpModelState unflatten(const GpModelState &shape, const VectorXd &v) {
    if (v.size() != parameter_count(shape)) throw GpError("unflatten: size mismatch");
    GpModelState s = shape;
    Eigen::Index k = 0;
    auto get = [&]() { return v[k++]; };
    for (int i = 0; i < s.Z.rows(); ++i)
        for (int j = 0; j < s.Z.cols(); ++j) s.Z(i, j) = get();
    for (auto &lat : s.latents) {
        for (int j = 0; j < lat.log_lengthscale.size(); ++j) lat.log_lengthscale[j] = get();
        lat.log_variance = get();
        for (int j = 0; j < lat.q_mean.size(); ++j) lat.q_mean[j] = get();
        for (int c = 0; c < lat.q_sqrt.cols(); ++c)
            for (int r = c; r < lat.q_sqrt.rows(); ++r) lat.q_sqrt(r, c) = get();
    }
    for (int i = 0; i < s.W.rows(); ++i)
        for (int j = 0; j < s.W.cols(); ++j) s.W(i, j) = get();
    for (int i = 0; i < s.alpha.size(); ++i) s.alpha[i] = get();
    for (int i = 0; i < s.beta.rows(); ++i)
        for (int j = 0; j < s.beta.cols(); ++j) s.beta(i, j) = get();
    return s;
}

// ---------------------------------------------------------------------------
// Evidence lower bound

struct ElboResult {
    double value = 0.0;
    double expected_log_lik = 0.0;  // unscaled, batch only
    double kl = 0.0;
    int noise_clamps = 0;
};

namespace detail {

/// Accumulates gradients of sum_ij G_ij k(A_i, B_j) into latent params and the
/// rows of Z. `a_is_z` / `b_is_z` say which side(s) are inducing inputs.
inline void kernel_backprop(const MatrixXd &A, const MatrixXd &B, const MatrixXd &Kab, const MatrixXd &G,
                            const Latent &lat, double &d_log_var, Eigen::Ref<VectorXd> d_log_ls,
                            Eigen::Ref<MatrixXd> dZ, bool b_is_z) {
    const MatrixXd Gk = G.cwiseProduct(Kab);
    d_log_var += Gk.sum();
    for (int j = 0; j < A.cols(); ++j) {
        const double inv_l2 = std::exp(-2.0 * lat.log_lengthscale[j]);
        // diff(i, n) = A(i, j) - B(n, j)
        const MatrixXd diff = A.col(j).replicate(1, B.rows()) - B.col(j).transpose().replicate(A.rows(), 1);
        d_log_ls[j] += Gk.cwiseProduct(diff.cwiseAbs2()).sum() * inv_l2;
        const MatrixXd gd = Gk.cwiseProduct(diff) * inv_l2;
        dZ.col(j) -= gd.rowwise().sum();
        if (b_is_z) dZ.col(j) += gd.colwise().sum().transpose();
    }
}

}  // namespace detail

/// ELBO on the rows `batch` of `data`, with the expected log-likelihood
/// multiplied by `scale` (N / |batch| for unbiased minibatching). When `grad`
/// is non-null it receives d ELBO / d flatten(state).
inline ElboResult elbo(const GpModelState &s, const Dataset &data, std::span<const int> batch, double scale,
                       VectorXd *grad = nullptr) {
    if (batch.empty()) throw GpError("elbo: empty minibatch");
    const int M = s.num_inducing(), D = s.input_dim, d = s.output_dim, L = s.num_latent();
    const int B = static_cast<int>(batch.size());
    MatrixXd Xb(B, D), Yb(B, d);
    for (int n = 0; n < B; ++n) {
        Xb.row(n) = data.X.row(batch[n]);
        Yb.row(n) = data.Y.row(batch[n]);
    }

    std::vector<MatrixXd> chol(L), A(L), RA(L), Kzx(L), Kzz(L);
    MatrixXd mu(B, L), var(B, L);
    ElboResult res;
    for (int l = 0; l < L; ++l) {
        const Latent &lat = s.latents[l];
        Kzz[l] = kernel_matrix(s.Z, s.Z, lat);
        chol[l] = robust_cholesky(Kzz[l], s.jitter, s.max_jitter);
        Kzx[l] = kernel_matrix(s.Z, Xb, lat);
        A[l] = chol[l].triangularView<Eigen::Lower>().solve(Kzx[l]);
        RA[l] = lat.q_sqrt.triangularView<Eigen::Lower>().transpose() * A[l];
        mu.col(l) = A[l].transpose() * lat.q_mean;
        var.col(l) = (VectorXd::Constant(B, std::exp(lat.log_variance)) - A[l].colwise().squaredNorm().transpose() +
                      RA[l].colwise().squaredNorm().transpose());
        const auto &R = lat.q_sqrt;
        res.kl += 0.5 * (R.triangularView<Eigen::Lower>().toDenseMatrix().squaredNorm() + lat.q_mean.squaredNorm() -
                         M - 2.0 * R.diagonal().cwiseAbs().array().log().sum());
    }

    MatrixXd g_mu = MatrixXd::Zero(B, L), g_var = MatrixXd::Zero(B, L);
    MatrixXd dW = MatrixXd::Zero(d, L), dBeta = MatrixXd::Zero(d, D);
    VectorXd dAlpha = VectorXd::Zero(d);
    constexpr double kLog2Pi = 1.8378770664093453;
    for (int n = 0; n < B; ++n) {
        for (int p = 0; p < d; ++p) {
            double mean = 0.0, vv = 0.0;
            for (int l = 0; l < L; ++l) {
                mean += s.W(p, l) * mu(n, l);
                vv += s.W(p, l) * s.W(p, l) * var(n, l);
            }
            bool clamped = false;
            const double ln = log_noise(Xb.row(n).transpose(), p, s, &clamped);
            if (clamped) ++res.noise_clamps;
            const double inv_s = std::exp(-ln);
            const double r = Yb(n, p) - mean;
            res.expected_log_lik += -0.5 * kLog2Pi - 0.5 * ln - 0.5 * (r * r + vv) * inv_s;
            if (!grad) continue;
            const double g_mean = scale * r * inv_s;
            const double g_vv = -0.5 * scale * inv_s;
            if (!clamped) {
                const double g_ln = scale * (-0.5 + 0.5 * (r * r + vv) * inv_s);
                dAlpha[p] += g_ln;
                dBeta.row(p) += g_ln * Xb.row(n);
            }
            for (int l = 0; l < L; ++l) {
                dW(p, l) += g_mean * mu(n, l) + g_vv * 2.0 * s.W(p, l) * var(n, l);
                g_mu(n, l) += g_mean * s.W(p, l);
                g_var(n, l) += g_vv * s.W(p, l) * s.W(p, l);
            }
        }
    }
    res.value = scale * res.expected_log_lik - res.kl;
    if (!grad) return res;

    // Backprop through each latent.
    MatrixXd dZ = MatrixXd::Zero(M, D);
    std::vector<VectorXd> d_ls(L, VectorXd::Zero(D)), d_m(L);
    std::vector<double> d_lv(L, 0.0);
    std::vector<MatrixXd> d_R(L);
    for (int l = 0; l < L; ++l) {
        const Latent &lat = s.latents[l];
        const MatrixXd &Lc = chol[l];
        const MatrixXd R = lat.q_sqrt.triangularView<Eigen::Lower>();
        d_m[l] = A[l] * g_mu.col(l) - lat.q_mean;
        const MatrixXd AG = A[l] * g_var.col(l).asDiagonal();
        MatrixXd dA = lat.q_mean * g_mu.col(l).transpose() - 2.0 * AG + 2.0 * R * RA[l] * g_var.col(l).asDiagonal();
        MatrixXd dR = 2.0 * AG * RA[l].transpose() - R;
        dR.diagonal() += R.diagonal().cwiseInverse();
        d_R[l] = dR.triangularView<Eigen::Lower>();
        d_lv[l] += std::exp(lat.log_variance) * g_var.col(l).sum();  // k(x, x) term

        // A = L^{-1} Kzx
        const MatrixXd LtInvDA = Lc.triangularView<Eigen::Lower>().transpose().solve(dA);
        const MatrixXd dKzx = LtInvDA;
        MatrixXd dL = -(LtInvDA * A[l].transpose());
        dL = dL.triangularView<Eigen::Lower>();
        // Cholesky backprop: G = L^{-T} Phi(L^T dL) L^{-1}
        MatrixXd P = (Lc.transpose() * dL).triangularView<Eigen::Lower>();
        P.diagonal() *= 0.5;
        MatrixXd G = Lc.triangularView<Eigen::Lower>().transpose().solve(P);
        G = Lc.triangularView<Eigen::Lower>().transpose().solve(G.transpose()).transpose();

        detail::kernel_backprop(s.Z, s.Z, Kzz[l], G, lat, d_lv[l], d_ls[l], dZ, true);
        detail::kernel_backprop(s.Z, Xb, Kzx[l], dKzx, lat, d_lv[l], d_ls[l], dZ, false);
    }

    grad->resize(parameter_count(s));
    Eigen::Index k = 0;
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < D; ++j) (*grad)[k++] = dZ(i, j);
    for (int l = 0; l < L; ++l) {
        for (int j = 0; j < D; ++j) (*grad)[k++] = d_ls[l][j];
        (*grad)[k++] = d_lv[l];
        for (int j = 0; j < M; ++j) (*grad)[k++] = d_m[l][j];
        for (int c = 0; c < M; ++c)
            for (int r = c; r < M; ++r) (*grad)[k++] = d_R[l](r, c);
    }
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < L; ++j) (*grad)[k++] = dW(i, j);
    for (int i = 0; i < d; ++i) (*grad)[k++] = dAlpha[i];
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < D; ++j) (*grad)[k++] = dBeta(i, j);
    return res;
}

inline ElboResult elbo_full(const GpModelState &s, const Dataset &data, VectorXd *grad = nullptr) {
    std::vector<int> all(data.size());
    std::iota(all.begin(), all.end(), 0);
    return elbo(s, data, all, 1.0, grad);
}

// ---------------------------------------------------------------------------
// Optimization

struct LearnRates {
    double main = 1e-2;
    double noise = 1e-3;
};

/// Model plus Adam moments. Values only; train_step returns a new one.
struct TrainState {
    GpModelState model;
    VectorXd m1;
    VectorXd m2;
    long step = 0;
    long skipped = 0;
    double last_elbo = 0.0;
};

inline TrainState make_train_state(GpModelState model) {
    TrainState t;
    const auto n = parameter_count(model);
    t.model = std::move(model);
    t.m1 = VectorXd::Zero(n);
    t.m2 = VectorXd::Zero(n);
    return t;
}

/// One Adam ascent step on the ELBO using `grad`; the noise group (alpha,
/// beta) uses its own learning rate.
inline TrainState apply_gradient(const TrainState &in, const VectorXd &grad, const LearnRates &lr,
                                 const GpConfig &cfg = {}) {
    TrainState out = in;
    if (!grad.allFinite()) {
        ++out.skipped;
        return out;
    }
    if (out.m1.size() != grad.size()) {
        out.m1 = VectorXd::Zero(grad.size());
        out.m2 = VectorXd::Zero(grad.size());
    }
    ++out.step;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    out.m1 = b1 * out.m1 + (1 - b1) * grad;
    out.m2 = b2 * out.m2 + (1 - b2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(out.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(out.step));
    VectorXd theta = flatten(in.model);
    const Eigen::Index noise_at = noise_group_offset(in.model);
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
        const double rate = i >= noise_at ? lr.noise : lr.main;
        theta[i] += rate * (out.m1[i] / c1) / (std::sqrt(out.m2[i] / c2) + cfg.adam_eps);
    }
    out.model = unflatten(in.model, theta);
    return out;
}

inline TrainState train_step(const TrainState &in, const Dataset &data, std::span<const int> batch, double scale,
                             const LearnRates &lr, const GpConfig &cfg = {}) {
    VectorXd grad;
    ElboResult r;
    try {
        r = elbo(in.model, data, batch, scale, &grad);
    } catch (const GpError &) {
        TrainState out = in;
        ++out.skipped;
        return out;
    }
    TrainState out = apply_gradient(in, grad, lr, cfg);
    out.last_elbo = r.value;
    return out;
}

/// Runs `steps` minibatch steps with batches drawn from `rng`.
inline TrainState train(TrainState t, const Dataset &data, int steps, const GpConfig &cfg, std::mt19937_64 &rng) {
    const int N = data.size();
    if (N == 0) return t;
    std::vector<int> idx(N);
    std::iota(idx.begin(), idx.end(), 0);
    const int B = std::min(N, cfg.batch);
    const double scale = static_cast<double>(N) / B;
    const LearnRates lr{cfg.lr_main, cfg.lr_noise};
    for (int i = 0; i < steps; ++i) {
        if (B < N) {
            for (int k = 0; k < B; ++k) {
                std::uniform_int_distribution<int> pick(k, N - 1);
                std::swap(idx[k], idx[pick(rng)]);
            }
        }
        t = train_step(t, data, std::span<const int>(idx.data(), B), scale, lr, cfg);
    }
    return t;
}

/// Sets every q(v_l) to its optimum given the other latents, hyperparameters
/// and noise (coordinate ascent; exact in one sweep when W is diagonal).
inline GpModelState optimize_variational(GpModelState s, const Dataset &data, int sweeps = 3) {
    const int N = data.size(), M = s.num_inducing(), d = s.output_dim, L = s.num_latent();
    if (N == 0) return s;
    MatrixXd inv_noise(N, d);
    for (int n = 0; n < N; ++n)
        for (int p = 0; p < d; ++p) inv_noise(n, p) = 1.0 / noise_variance(data.X.row(n).transpose(), p, s);
    std::vector<MatrixXd> A(L);
    MatrixXd mu(N, L);
    for (int l = 0; l < L; ++l) {
        const MatrixXd Lc = robust_cholesky(kernel_matrix(s.Z, s.Z, s.latents[l]), s.jitter, s.max_jitter);
        A[l] = Lc.triangularView<Eigen::Lower>().solve(kernel_matrix(s.Z, data.X, s.latents[l]));
        mu.col(l) = A[l].transpose() * s.latents[l].q_mean;
    }
    for (int sweep = 0; sweep < sweeps; ++sweep) {
        for (int l = 0; l < L; ++l) {
            VectorXd lambda = VectorXd::Zero(N), b = VectorXd::Zero(N);
            for (int n = 0; n < N; ++n) {
                for (int p = 0; p < d; ++p) {
                    double others = 0.0;
                    for (int k = 0; k < L; ++k)
                        if (k != l) others += s.W(p, k) * mu(n, k);
                    const double w = s.W(p, l);
                    lambda[n] += w * w * inv_noise(n, p);
                    b[n] += w * (data.Y(n, p) - others) * inv_noise(n, p);
                }
            }
            MatrixXd P = A[l] * lambda.asDiagonal() * A[l].transpose();
            P.diagonal().array() += 1.0;
            Eigen::LLT<MatrixXd> llt(P);
            if (llt.info() != Eigen::Success) throw GpError("optimize_variational: precision not PD");
            Latent &lat = s.latents[l];
            lat.q_mean = llt.solve(A[l] * b);
            const MatrixXd S = llt.solve(MatrixXd::Identity(M, M));
            lat.q_sqrt = robust_cholesky(0.5 * (S + S.transpose()), 1e-12, 1e-6);
            mu.col(l) = A[l].transpose() * lat.q_mean;
        }
        if (L == 1) break;
    }
    return s;
}

/// Moves the inducing inputs to Z_new, moment-matching each q(u_l) to the
/// current posterior marginal at Z_new.
inline GpModelState reinduce(const GpModelState &s, const MatrixXd &Z_new) {
    GpModelState out = s;
    out.Z = Z_new;
    const int M2 = static_cast<int>(Z_new.rows());
    for (int l = 0; l < s.num_latent(); ++l) {
        const Latent &lat = s.latents[l];
        const MatrixXd Lc = robust_cholesky(kernel_matrix(s.Z, s.Z, lat), s.jitter, s.max_jitter);
        const MatrixXd A = Lc.triangularView<Eigen::Lower>().solve(kernel_matrix(s.Z, Z_new, lat));
        const MatrixXd RA = lat.q_sqrt.triangularView<Eigen::Lower>().transpose() * A;
        const MatrixXd Knn = kernel_matrix(Z_new, Z_new, lat);
        const VectorXd mean = A.transpose() * lat.q_mean;
        MatrixXd cov = Knn - A.transpose() * A + RA.transpose() * RA;
        const MatrixXd L2 = robust_cholesky(Knn, s.jitter, s.max_jitter);
        const auto tri = L2.triangularView<Eigen::Lower>();
        Latent &o = out.latents[l];
        o.q_mean = tri.solve(mean);
        MatrixXd S = tri.solve(cov);
        S = tri.solve(S.transpose()).transpose();
        S = 0.5 * (S + S.transpose());
        // project to the PSD cone before factoring
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(S);
        const VectorXd ev = es.eigenvalues().cwiseMax(1e-10);
        S = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
        o.q_sqrt = robust_cholesky(0.5 * (S + S.transpose()), 1e-12, 1e-6);
        (void)M2;
    }
    return out;
}

/// k-means++ seeding followed by Lloyd refinement; returns k centers.
inline MatrixXd kmeans_pp(const MatrixXd &X, int k, std::mt19937_64 &rng, int lloyd_iters = 10) {
    const int N = static_cast<int>(X.rows());
    if (k >= N) return X;
    MatrixXd C(k, X.cols());
    std::uniform_int_distribution<int> first(0, N - 1);
    C.row(0) = X.row(first(rng));
    VectorXd d2 = (X.rowwise() - C.row(0)).rowwise().squaredNorm();
    for (int c = 1; c < k; ++c) {
        const double total = d2.sum();
        int pick = 0;
        if (total > 0.0) {
            std::uniform_real_distribution<double> u(0.0, total);
            double r = u(rng);
            for (pick = 0; pick < N - 1; ++pick) {
                r -= d2[pick];
                if (r <= 0.0) break;
            }
        }
        C.row(c) = X.row(pick);
        d2 = d2.cwiseMin((X.rowwise() - C.row(c)).rowwise().squaredNorm());
    }
    for (int it = 0; it < lloyd_iters; ++it) {
        MatrixXd sum = MatrixXd::Zero(k, X.cols());
        VectorXd cnt = VectorXd::Zero(k);
        for (int n = 0; n < N; ++n) {
            Eigen::Index best;
            (C.rowwise() - X.row(n)).rowwise().squaredNorm().minCoeff(&best);
            sum.row(best) += X.row(n);
            cnt[best] += 1.0;
        }
        for (int c = 0; c < k; ++c)
            if (cnt[c] > 0) C.row(c) = sum.row(c) / cnt[c];
    }
    return C;
}

/// Rows of X with near-duplicates removed (first occurrence kept).
inline MatrixXd unique_rows(const MatrixXd &X, double tol = 1e-9) {
    std::vector<int> keep;
    for (int n = 0; n < X.rows(); ++n) {
        bool dup = false;
        for (int k : keep)
            if ((X.row(n) - X.row(k)).squaredNorm() <= tol * tol) {
                dup = true;
                break;
            }
        if (!dup) keep.push_back(n);
    }
    MatrixXd out(keep.size(), X.cols());
    for (std::size_t i = 0; i < keep.size(); ++i) out.row(i) = X.row(keep[i]);
    return out;
}

/// Choose inducing inputs for the dataset: all distinct inputs when they fit
/// under the cap, k-means++ centers otherwise.
inline MatrixXd choose_inducing(const MatrixXd &X, int max_inducing, std::mt19937_64 &rng) {
    MatrixXd U = unique_rows(X);
    if (U.rows() <= max_inducing) return U;
    return kmeans_pp(U, max_inducing, rng);
}

/// Full refit used after new feedback arrives: re-place Z, reset q to its
/// optimum, run `steps` Adam steps, then refresh q once more.
inline TrainState update_model(TrainState t, const Dataset &data, int steps, const GpConfig &cfg,
                               std::mt19937_64 &rng) {
    if (data.size() == 0) return t;
    const MatrixXd Z = choose_inducing(data.X, cfg.max_inducing, rng);
    GpModelState m = reinduce(t.model, Z);
    m = optimize_variational(std::move(m), data);
    TrainState fresh = make_train_state(std::move(m));
    fresh.step = 0;
    fresh.skipped = t.skipped;
    fresh = train(std::move(fresh), data, steps, cfg, rng);
    fresh.model = optimize_variational(std::move(fresh.model), data);
    return fresh;
}

// ---------------------------------------------------------------------------
// Prediction

/// Per-latent factors that do not depend on the query point. Building is
/// O(L M^3); each query is O(d L M^2 + L M D).
class SparsePredictor {
public:
    explicit SparsePredictor(GpModelState s) : s_(std::move(s)) {
        for (const auto &lat : s_.latents) {
            MatrixXd Lc = robust_cholesky(kernel_matrix(s_.Z, s_.Z, lat), s_.jitter, s_.max_jitter);
            const MatrixXd R = lat.q_sqrt.triangularView<Eigen::Lower>();
            // var = kxx - a^T a + a^T R R^T a with a = L^{-1} k = k^T (L^{-T} (R R^T - I) L^{-1}) k
            MatrixXd inner = R * R.transpose() - MatrixXd::Identity(R.rows(), R.cols());
            MatrixXd T = Lc.triangularView<Eigen::Lower>().transpose().solve(inner);
            T = Lc.triangularView<Eigen::Lower>().transpose().solve(T.transpose()).transpose();
            const VectorXd w = Lc.triangularView<Eigen::Lower>().transpose().solve(lat.q_mean);
            mean_weights_.push_back(w);
            var_forms_.push_back(0.5 * (T + T.transpose()));
        }
    }

    [[nodiscard]] const GpModelState &state() const { return s_; }

    [[nodiscard]] Prediction predict(const Eigen::Ref<const VectorXd> &x) const {
        if (x.size() != s_.input_dim) throw GpError("predict: input dimension mismatch");
        const int L = s_.num_latent(), M = s_.num_inducing(), d = s_.output_dim;
        VectorXd mu(L), var(L);
        for (int l = 0; l < L; ++l) {
            VectorXd k(M);
            for (int m = 0; m < M; ++m) k[m] = kernel_eval(s_.Z.row(m).transpose(), x, s_.latents[l]);
            mu[l] = mean_weights_[l].dot(k);
            var[l] = std::max(0.0, std::exp(s_.latents[l].log_variance) + k.dot(var_forms_[l] * k));
            op_count_ += static_cast<std::uint64_t>(M) * M + 2ull * M + static_cast<std::uint64_t>(M) * s_.input_dim;
        }
        Prediction p;
        p.mean = s_.W * mu;
        p.cov = s_.W * var.asDiagonal() * s_.W.transpose();
        op_count_ += static_cast<std::uint64_t>(d) * d * L;
        for (int q = 0; q < d; ++q) p.cov(q, q) += noise_variance(x, q, s_);
        p.cov = 0.5 * (p.cov + p.cov.transpose());
        return p;
    }

    [[nodiscard]] std::uint64_t op_count() const { return op_count_; }
    void reset_op_count() const { op_count_ = 0; }

private:
    GpModelState s_;
    std::vector<VectorXd> mean_weights_;
    std::vector<MatrixXd> var_forms_;
    mutable std::uint64_t op_count_ = 0;
};

/// Posterior of f(x) under q plus the observation noise at x.
inline Prediction predict(const GpModelState &s, const Eigen::Ref<const VectorXd> &x) {
    if (x.size() != s.input_dim) throw GpError("predict: input dimension mismatch");
    const int L = s.num_latent(), d = s.output_dim;
    VectorXd mu(L), var(L);
    const MatrixXd xrow = x.transpose();
    for (int l = 0; l < L; ++l) {
        const Latent &lat = s.latents[l];
        const MatrixXd Lc = robust_cholesky(kernel_matrix(s.Z, s.Z, lat), s.jitter, s.max_jitter);
        const VectorXd a = Lc.triangularView<Eigen::Lower>().solve(kernel_matrix(s.Z, xrow, lat)).col(0);
        const VectorXd ra = lat.q_sqrt.triangularView<Eigen::Lower>().transpose() * a;
        mu[l] = a.dot(lat.q_mean);
        var[l] = std::max(0.0, std::exp(lat.log_variance) - a.squaredNorm() + ra.squaredNorm());
    }
    Prediction p;
    p.mean = s.W * mu;
    p.cov = s.W * var.asDiagonal() * s.W.transpose();
    for (int q = 0; q < d; ++q) p.cov(q, q) += noise_variance(x, q, s);
    p.cov = 0.5 * (p.cov + p.cov.transpose());
    return p;
}

// ---------------------------------------------------------------------------
// Dense reference GP (test oracle; N*d small)

namespace detail {

inline MatrixXd dense_covariance(const GpModelState &s, const MatrixXd &X1, const MatrixXd &X2) {
    const int d = s.output_dim;
    MatrixXd K = MatrixXd::Zero(X1.rows() * d, X2.rows() * d);
    for (int n = 0; n < X1.rows(); ++n)
        for (int m = 0; m < X2.rows(); ++m)
            for (int p = 0; p < d; ++p)
                for (int q = 0; q < d; ++q)
                    K(n * d + p, m * d + q) =
                        multi_output_kernel(X1.row(n).transpose(), p, X2.row(m).transpose(), q, s);
    return K;
}

inline MatrixXd dense_noisy_train_cov(const GpModelState &s, const Dataset &data) {
    MatrixXd K = dense_covariance(s, data.X, data.X);
    for (int n = 0; n < data.size(); ++n)
        for (int p = 0; p < s.output_dim; ++p)
            K(n * s.output_dim + p, n * s.output_dim + p) += noise_variance(data.X.row(n).transpose(), p, s);
    return K;
}

inline VectorXd stacked_targets(const Dataset &data) {
    VectorXd y(data.Y.size());
    for (int n = 0; n < data.Y.rows(); ++n)
        for (int p = 0; p < data.Y.cols(); ++p) y[n * data.Y.cols() + p] = data.Y(n, p);
    return y;
}

}  // namespace detail

/// Exact Gaussian conditional with the full (N d x N d) covariance.
inline Prediction exact_gp_predict(const Dataset &data, const GpModelState &hyper, const Eigen::Ref<const VectorXd> &x) {
    const int d = hyper.output_dim;
    if (data.size() * d > 200) throw GpError("exact_gp_predict: N*d above desk-scale limit");
    const MatrixXd xr = x.transpose();
    Prediction p;
    const MatrixXd Kxx = detail::dense_covariance(hyper, xr, xr);
    if (data.size() == 0) {
        p.mean = VectorXd::Zero(d);
        p.cov = Kxx;
    } else {
        const MatrixXd K = detail::dense_noisy_train_cov(hyper, data);
        const MatrixXd Lc = robust_cholesky(K, 0.0 + 1e-12, hyper.max_jitter);
        const MatrixXd Ks = detail::dense_covariance(hyper, data.X, xr);  // Nd x d
        const MatrixXd V = Lc.triangularView<Eigen::Lower>().solve(Ks);
        const VectorXd z = Lc.triangularView<Eigen::Lower>().solve(detail::stacked_targets(data));
        p.mean = V.transpose() * z;
        p.cov = Kxx - V.transpose() * V;
    }
    for (int q = 0; q < d; ++q) p.cov(q, q) += noise_variance(x, q, hyper);
    p.cov = 0.5 * (p.cov + p.cov.transpose());
    return p;
}

/// log N(y; 0, K + K_noise) with the dense covariance.
inline double exact_log_marginal(const Dataset &data, const GpModelState &hyper) {
    const MatrixXd K = detail::dense_noisy_train_cov(hyper, data);
    const MatrixXd Lc = robust_cholesky(K, 1e-12, hyper.max_jitter);
    const VectorXd z = Lc.triangularView<Eigen::Lower>().solve(detail::stacked_targets(data));
    constexpr double kLog2Pi = 1.8378770664093453;
    return -0.5 * z.squaredNorm() - Lc.diagonal().array().log().sum() - 0.5 * K.rows() * kLog2Pi;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char *kCheckpointFormat = "prefflock-gp";

namespace detail {

inline nlohmann::json matrix_to_json(const MatrixXd &m) {
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < m.rows(); ++i) {
        nlohmann::json r = nlohmann::json::array();
        for (int j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
        rows.push_back(std::move(r));
    }
    return rows;
}

inline MatrixXd matrix_from_json(const nlohmann::json &j, Eigen::Index rows, Eigen::Index cols, const char *what) {
    if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows)
        throw GpError(std::string("checkpoint: bad shape for ") + what);
    MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        if (!j[i].is_array() || static_cast<Eigen::Index>(j[i].size()) != cols)
            throw GpError(std::string("checkpoint: bad shape for ") + what);
        for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = j[i][k].get<double>();
    }
    return m;
}

inline VectorXd vector_from_json(const nlohmann::json &j, Eigen::Index n, const char *what) {
    if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != n)
        throw GpError(std::string("checkpoint: bad shape for ") + what);
    VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = j[i].get<double>();
    return v;
}

}  // namespace detail

inline nlohmann::json model_to_json(const GpModelState &s) {
    using detail::matrix_to_json;
    nlohmann::json j;
    j["format"] = kCheckpointFormat;
    j["version"] = kCheckpointVersion;
    j["input_dim"] = s.input_dim;
    j["output_dim"] = s.output_dim;
    j["num_inducing"] = s.num_inducing();
    j["num_latent"] = s.num_latent();
    j["jitter"] = s.jitter;
    j["max_jitter"] = s.max_jitter;
    j["log_noise_range"] = {s.log_noise_min, s.log_noise_max};
    j["Z"] = matrix_to_json(s.Z);
    j["W"] = matrix_to_json(s.W);
    j["alpha"] = std::vector<double>(s.alpha.data(), s.alpha.data() + s.alpha.size());
    j["beta"] = matrix_to_json(s.beta);
    j["latents"] = nlohmann::json::array();
    for (const auto &lat : s.latents) {
        nlohmann::json lj;
        lj["log_lengthscale"] =
            std::vector<double>(lat.log_lengthscale.data(), lat.log_lengthscale.data() + lat.log_lengthscale.size());
        lj["log_variance"] = lat.log_variance;
        lj["q_mean"] = std::vector<double>(lat.q_mean.data(), lat.q_mean.data() + lat.q_mean.size());
        lj["q_sqrt"] = matrix_to_json(lat.q_sqrt);
        j["latents"].push_back(std::move(lj));
    }
    return j;
}

/// Parses a checkpoint; when expected dims are >= 0 they must match.
inline GpModelState model_from_json(const nlohmann::json &j, int expect_input_dim = -1, int expect_output_dim = -1) {
    using detail::matrix_from_json;
    using detail::vector_from_json;
    try {
        if (j.value("format", "") != kCheckpointFormat) throw GpError("checkpoint: unknown format");
        if (j.at("version").get<int>() != kCheckpointVersion) throw GpError("checkpoint: version mismatch");
        GpModelState s;
        s.input_dim = j.at("input_dim").get<int>();
        s.output_dim = j.at("output_dim").get<int>();
        if (expect_input_dim >= 0 && s.input_dim != expect_input_dim)
            throw GpError("checkpoint: input dimension mismatch");
        if (expect_output_dim >= 0 && s.output_dim != expect_output_dim)
            throw GpError("checkpoint: output dimension mismatch");
        const int M = j.at("num_inducing").get<int>(), L = j.at("num_latent").get<int>();
        const int D = s.input_dim, d = s.output_dim;
        s.jitter = j.at("jitter").get<double>();
        s.max_jitter = j.at("max_jitter").get<double>();
        s.log_noise_min = j.at("log_noise_range")[0].get<double>();
        s.log_noise_max = j.at("log_noise_range")[1].get<double>();
        s.Z = matrix_from_json(j.at("Z"), M, D, "Z");
        s.W = matrix_from_json(j.at("W"), d, L, "W");
        s.alpha = vector_from_json(j.at("alpha"), d, "alpha");
        s.beta = matrix_from_json(j.at("beta"), d, D, "beta");
        const auto &lats = j.at("latents");
        if (!lats.is_array() || static_cast<int>(lats.size()) != L) throw GpError("checkpoint: latent count");
        for (const auto &lj : lats) {
            Latent lat;
            lat.log_lengthscale = vector_from_json(lj.at("log_lengthscale"), D, "log_lengthscale");
            lat.log_variance = lj.at("log_variance").get<double>();
            lat.q_mean = vector_from_json(lj.at("q_mean"), M, "q_mean");
            lat.q_sqrt = matrix_from_json(lj.at("q_sqrt"), M, M, "q_sqrt");
            s.latents.push_back(std::move(lat));
        }
        return s;
    } catch (const nlohmann::json::exception &e) {
        throw GpError(std::string("checkpoint: ") + e.what());
    }
}

inline void save_model(const GpModelState &s, const std::string &path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw GpError("cannot write checkpoint '" + path + "'");
    out << model_to_json(s).dump() << '\n';
    if (!out) throw GpError("write failed for checkpoint '" + path + "'");
}

inline GpModelState load_model(const std::string &path, int expect_input_dim = -1, int expect_output_dim = -1) {
    std::ifstream in(path);
    if (!in) throw GpError("cannot open checkpoint '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception &e) {
        throw GpError(std::string("checkpoint parse error: ") + e.what());
    }
    return model_from_json(j, expect_input_dim, expect_output_dim);
}

}  // namespace prefflock::gp
