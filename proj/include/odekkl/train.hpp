// Dataset generation, observer losses, gradients and the optimization loop.
//
// Two gradient routes are provided for the KKL observer:
//   * grad_backprop: exact gradient of the discretized loss, obtained by a
//     reverse sweep through every RK4 stage of the latent rollout;
//   * grad_adjoint: backward RK4 integration of the costate p and the
//     parameter accumulator mu from tf to t0, returning mu(t0).
// Both share the running-cost evaluator below, which works on time-major
// column blocks (column k * B + b holds time k of trajectory b).
#pragma once

#include <odekkl/core.hpp>
#include <odekkl/integrate.hpp>
#include <odekkl/net.hpp>
#include <odekkl/observer.hpp>
#include <odekkl/systems.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace odekkl {

// -----------------------------------------------------------------------------
// Dataset
// -----------------------------------------------------------------------------

/// Simulated trajectories on a shared grid. `states` hold noiseless x and
/// `outputs` hold the stored (possibly noisy) measurements.
struct Dataset {
    TimeGrid grid;
    std::vector<Trajectory> trajectories;
    NoiseSpec noise_applied;

    std::size_t size() const { return trajectories.size(); }
};

inline Dataset generate_dataset(const SystemSpec &sys, int n_traj, const TimeGrid &grid,
                                Rng &rng, const NoiseSpec &train_noise,
                                InitialDistribution dist = InitialDistribution::uniform) {
    if (n_traj < 1) {
        throw ConfigError("n_traj", "must be >= 1");
    }
    Dataset ds{grid, {}, train_noise};
    ds.trajectories.reserve(n_traj);
    auto f = [&](double t, const Vector &x) { return sys.drift(t, x, Vector{}); };
    for (int i = 0; i < n_traj; ++i) {
        const Vector x0 = sample_initial_condition(sys.domain, rng, dist);
        Trajectory traj = solve_ivp(f, x0, grid);
        Matrix y(grid.n_points(), sys.n_y);
        for (long k = 0; k < grid.n_points(); ++k) {
            Vector yk = sys.h(traj.state(k));
            if (train_noise.kind != NoiseKind::none) {
                yk += sample_noise(train_noise, sys.n_y, rng);
            }
            y.row(k) = yk.transpose();
        }
        traj.outputs = std::move(y);
        ds.trajectories.push_back(std::move(traj));
    }
    return ds;
}

// -----------------------------------------------------------------------------
// Configuration and loss records
// -----------------------------------------------------------------------------

enum class OptimizerKind { gd, adam };
enum class GradientMode { backprop, adjoint };
/// lagrange: integral of |x - T*(z)|^2. nonauto: integral of
/// |z - T(x)|^2 + |x - T*(T(x))|^2, which also trains the forward map.
enum class LossMode { lagrange, nonauto };

struct TrainConfig {
    int epochs = 1000;
    int batch_size = 50;
    double learning_rate = 1e-3;
    double lr_decay = 1.0 - 1e-4; ///< multiplicative, per epoch
    OptimizerKind optimizer = OptimizerKind::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double gamma = 0.0; ///< eigenvalue regularization weight
    NoiseSpec train_noise;
    std::optional<double> pde_weight;
    GradientMode gradient_mode = GradientMode::backprop;
    LossMode loss_mode = LossMode::lagrange;
    bool learn_eigenvalues = true; ///< false reproduces fixed-D training
    double weight_decay = 0.0;     ///< L2 on network weights, off by default
    /// Loss quadrature uses every loss_stride-th grid point (trapezoid on the
    /// coarse grid); the latent rollout always runs at the full step.
    int loss_stride = 1;
    /// Loss integrals start at t0 + loss_warmup; the rollout still starts at t0.
    double loss_warmup = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 0) {
            throw ConfigError("epochs", "must be >= 0");
        }
        if (batch_size < 1) {
            throw ConfigError("batch_size", "must be >= 1");
        }
        if (!(learning_rate > 0.0)) {
            throw ConfigError("learning_rate", "must be > 0");
        }
        if (!(lr_decay > 0.0 && lr_decay <= 1.0)) {
            throw ConfigError("lr_decay", "must lie in (0, 1]");
        }
        if (!(gamma >= 0.0)) {
            throw ConfigError("gamma", "must be >= 0");
        }
        if (pde_weight && !(*pde_weight >= 0.0)) {
            throw ConfigError("pde_weight", "must be >= 0");
        }
        if (!(weight_decay >= 0.0)) {
            throw ConfigError("weight_decay", "must be >= 0");
        }
        if (loss_stride < 1) {
            throw ConfigError("loss_stride", "must be >= 1");
        }
        if (loss_stride > 1 && gradient_mode == GradientMode::adjoint) {
            throw ConfigError("loss_stride", "the adjoint gradient integrates on the full grid");
        }
        if (!(loss_warmup >= 0.0)) {
            throw ConfigError("loss_warmup", "must be >= 0");
        }
        if (loss_warmup > 0.0 && gradient_mode == GradientMode::adjoint) {
            throw ConfigError("loss_warmup", "not supported with the adjoint gradient");
        }
    }

    double pde() const { return pde_weight.value_or(0.0); }
};

struct LossBreakdown {
    double data = 0.0;
    double reg = 0.0;
    double pde = 0.0;
    double fwd = 0.0;
    double total = 0.0;

    LossBreakdown &operator+=(const LossBreakdown &o) {
        data += o.data;
        reg += o.reg;
        pde += o.pde;
        fwd += o.fwd;
        total += o.total;
        return *this;
    }
    LossBreakdown &operator*=(double s) {
        data *= s;
        reg *= s;
        pde *= s;
        fwd *= s;
        total *= s;
        return *this;
    }
};

// -----------------------------------------------------------------------------
// Losses on single trajectories
// -----------------------------------------------------------------------------

/// Trapezoid weights h/2, h, ..., h, h/2.
inline Vector trapezoid_weights(const TimeGrid &grid) {
    Vector w = Vector::Constant(grid.n_points(), grid.h());
    w(0) = w(grid.n_steps()) = 0.5 * grid.h();
    return w;
}

/// Trapezoid weights on every `stride`-th grid point, restricted to
/// t >= t0 + warmup (the first retained point gets the half weight).
inline Vector loss_weights(const TimeGrid &grid, long stride, double warmup) {
    if (stride < 1 || grid.n_steps() % stride != 0) {
        throw ConfigError("loss_stride", "must divide the number of grid steps");
    }
    const long n = grid.n_steps() / stride + 1;
    const double hq = grid.h() * static_cast<double>(stride);
    const double tol = 1e-9 * grid.h();
    Vector w = Vector::Zero(n);
    long first = n;
    for (long q = 0; q < n; ++q) {
        if (grid.time(q * stride) >= grid.t0() + warmup - tol) {
            first = std::min(first, q);
            w(q) = hq;
        }
    }
    if (first >= n - 1) {
        throw ConfigError("loss_warmup", "leaves fewer than two quadrature points");
    }
    w(first) = w(n - 1) = 0.5 * hq;
    return w;
}

/// Trapezoidal integral of |x - xhat|^2.
inline double loss_lagrange(const Trajectory &x_traj, const Trajectory &xhat_traj) {
    if (!(x_traj.grid == xhat_traj.grid) || x_traj.states.rows() != xhat_traj.states.rows()) {
        throw DimensionError("loss_lagrange: trajectories are on different grids");
    }
    require_dim(xhat_traj.states.cols(), x_traj.states.cols(), "loss_lagrange state");
    const Vector sq = (x_traj.states - xhat_traj.states).rowwise().squaredNorm();
    return trapezoid_weights(x_traj.grid).dot(sq);
}

/// Adds gamma times the integral of |lambda|^2 over the horizon.
inline LossBreakdown loss_regularized(double base, const KklObserver &obs, double gamma,
                                      const TimeGrid &grid) {
    if (!(gamma >= 0.0)) {
        throw ConfigError("gamma", "must be >= 0");
    }
    LossBreakdown lb;
    lb.data = base;
    lb.reg = grid.horizon() * obs.eigenvalues().squaredNorm();
    lb.total = base + gamma * lb.reg;
    return lb;
}

/// Integral of |z - T(x)|^2 (fwd) and |x - T*(T(x))|^2 (data).
inline LossBreakdown loss_nonauto(const KklObserver &obs, const Trajectory &x_traj,
                                  const Trajectory &z_traj) {
    if (!obs.t_fwd) {
        throw ConfigError("observer.t_fwd", "the modified loss needs the forward map T");
    }
    if (!(x_traj.grid == z_traj.grid)) {
        throw DimensionError("loss_nonauto: trajectories are on different grids");
    }
    const Matrix X = x_traj.states.transpose();
    const Matrix Tx = obs.t_fwd->batch(X);
    const Matrix back = obs.tstar.batch(Tx);
    const Vector w = trapezoid_weights(x_traj.grid);
    LossBreakdown lb;
    lb.fwd = w.dot((z_traj.states.transpose() - Tx).colwise().squaredNorm().transpose());
    lb.data = w.dot((X - back).colwise().squaredNorm().transpose());
    lb.total = lb.data + lb.fwd;
    return lb;
}

/// |dT/dx(x) f(x) - (D T(x) + F y)|.
inline double pde_penalty(const KklObserver &obs, const SystemSpec &sys, const Vector &x,
                          const Vector &y) {
    if (!obs.t_fwd) {
        throw ConfigError("observer.t_fwd", "the PDE penalty needs the forward map T");
    }
    const Matrix J = jacobian_input(obs.t_fwd->spec, obs.t_fwd->params, x);
    const Vector Tx = (*obs.t_fwd)(x);
    return (J * sys.f(x) - latent_drift(obs, Tx, y)).norm();
}

// -----------------------------------------------------------------------------
// Batched running cost
// -----------------------------------------------------------------------------

namespace detail {

/// Weighted running cost over a block of columns and its gradients.
struct RunningCost {
    double data = 0.0;
    double fwd = 0.0;
    double pde = 0.0;
    Matrix dz;      ///< d_z x cols, d(weighted cost)/dz
    Vector dparams; ///< observer flat layout, accumulated
};

constexpr Eigen::Index running_cost_chunk = 8192;

/// Cost sum_j w_j [L_data + L_fwd + pde_weight * L_pde](z_j, x_j, y_j).
inline void running_cost(const KklObserver &obs, const Eigen::Ref<const Matrix> &Z,
                         const Eigen::Ref<const Matrix> &X,
                         const Eigen::Ref<const Matrix> &Y,
                         const Eigen::Ref<const Eigen::RowVectorXd> &w,
                         const TrainConfig &cfg, const SystemSpec *sys, bool want_grad,
                         RunningCost &out) {
    const Eigen::Index cols = Z.cols();
    const Eigen::Index n_rho = obs.d_z();
    const Eigen::Index off_s = n_rho;
    const Eigen::Index off_t = off_s + obs.tstar.param_count();
    const double pde_w = cfg.pde();
    const bool use_pde = pde_w > 0.0;
    if ((cfg.loss_mode == LossMode::nonauto || use_pde) && !obs.t_fwd) {
        throw ConfigError("observer.t_fwd", "loss needs the forward map T");
    }
    if (use_pde && sys == nullptr) {
        throw ConfigError("pde_weight", "PDE penalty needs the system dynamics");
    }
    if (want_grad) {
        if (out.dparams.size() != obs.param_count()) {
            out.dparams = Vector::Zero(obs.param_count());
        }
        out.dz.setZero(obs.d_z(), cols);
    }
    const Vector lambda = obs.eigenvalues();

    Vector g_s = Vector::Zero(want_grad ? obs.tstar.param_count() : 0);
    Vector g_t = Vector::Zero(want_grad && obs.t_fwd ? obs.t_fwd->param_count() : 0);
    Vector g_lambda = Vector::Zero(n_rho);

    for (Eigen::Index c0 = 0; c0 < cols; c0 += running_cost_chunk) {
        const Eigen::Index nc = std::min(running_cost_chunk, cols - c0);
        const auto Zc = Z.middleCols(c0, nc);
        const auto Xc = X.middleCols(c0, nc);
        const auto wc = w.segment(c0, nc);

        if (cfg.loss_mode == LossMode::lagrange) {
            const ForwardCache cs = forward_batch(obs.tstar.spec, obs.tstar.params, Zc);
            const Matrix E = cs.output() - Xc;
            out.data += E.colwise().squaredNorm().dot(wc);
            if (want_grad) {
                const Matrix G = 2.0 * E * wc.asDiagonal();
                out.dz.middleCols(c0, nc) +=
                    backward_batch(obs.tstar.spec, obs.tstar.params, cs, G, &g_s);
            }
        } else {
            const ForwardCache ct = forward_batch(obs.t_fwd->spec, obs.t_fwd->params, Xc);
            const Matrix R = Zc - ct.output();
            out.fwd += R.colwise().squaredNorm().dot(wc);
            const ForwardCache cs =
                forward_batch(obs.tstar.spec, obs.tstar.params, ct.output());
            const Matrix E = cs.output() - Xc;
            out.data += E.colwise().squaredNorm().dot(wc);
            if (want_grad) {
                const Matrix GR = 2.0 * R * wc.asDiagonal();
                out.dz.middleCols(c0, nc) += GR;
                Matrix cot_t = -GR;
                cot_t += backward_batch(obs.tstar.spec, obs.tstar.params, cs,
                                        Matrix(2.0 * E * wc.asDiagonal()), &g_s);
                backward_batch(obs.t_fwd->spec, obs.t_fwd->params, ct, cot_t, &g_t);
            }
        }

        if (use_pde) {
            const auto Yc = Y.middleCols(c0, nc);
            Matrix Fx(Xc.rows(), nc);
            for (Eigen::Index j = 0; j < nc; ++j) {
                Fx.col(j) = sys->f(Xc.col(j));
            }
            const TangentCache tc =
                forward_tangent(obs.t_fwd->spec, obs.t_fwd->params, Xc, Fx);
            const Matrix &Tx = tc.output();
            Matrix R = tc.output_tangent() - lambda.asDiagonal() * Tx;
            R.rowwise() -= Yc.colwise().sum();
            const Eigen::RowVectorXd norms = R.colwise().norm();
            out.pde += norms.dot(wc);
            if (want_grad) {
                Matrix Rhat = R;
                for (Eigen::Index j = 0; j < nc; ++j) {
                    Rhat.col(j) *= norms(j) > 0.0 ? pde_w * wc(j) / norms(j) : 0.0;
                }
                backward_tangent(obs.t_fwd->spec, obs.t_fwd->params, tc,
                                 Matrix(-(lambda.asDiagonal() * Rhat)), Rhat, g_t);
                g_lambda -= Rhat.cwiseProduct(Tx).rowwise().sum();
            }
        }
    }
    if (want_grad) {
        out.dparams.head(n_rho) += g_lambda.cwiseProduct(lambda); // dlambda/drho = lambda
        out.dparams.segment(off_s, g_s.size()) += g_s;
        if (g_t.size() > 0) {
            out.dparams.segment(off_t, g_t.size()) += g_t;
        }
    }
}

/// Time-major stacking of a per-trajectory quantity (rows = time).
template <typename Get>
Matrix stack_time_major(std::span<const Trajectory *const> batch, long n_points, int dim,
                        Get &&get) {
    const Eigen::Index B = static_cast<Eigen::Index>(batch.size());
    Matrix out(dim, n_points * B);
    for (Eigen::Index b = 0; b < B; ++b) {
        const Matrix &m = get(*batch[b]);
        for (long k = 0; k < n_points; ++k) {
            out.col(k * B + b) = m.row(k).transpose();
        }
    }
    return out;
}

/// Batched diagonal latent dynamics for one RK4 step; y enters through the
/// per-trajectory sums of the outputs (F is all ones).
struct LatentModel {
    const Vector &lambda;
    const Matrix &ysum; ///< n_points x B
    long k = 0;
    Vector grad_lambda;

    Eigen::RowVectorXd stage_input(int stage) const {
        const double c = rk4_stage_fraction[stage];
        if (c == 0.0) {
            return ysum.row(k);
        }
        if (c == 1.0) {
            return ysum.row(k + 1);
        }
        return 0.5 * (ysum.row(k) + ysum.row(k + 1));
    }

    Matrix eval(int stage, const Matrix &Z) const {
        Matrix out = lambda.asDiagonal() * Z;
        out.rowwise() += stage_input(stage);
        return out;
    }

    Matrix vjp(int, const Matrix &Z, const Matrix &cot) {
        grad_lambda += cot.cwiseProduct(Z).rowwise().sum();
        return lambda.asDiagonal() * cot;
    }
};

template <typename Model>
Matrix rk4_step_batch(const Model &m, const Matrix &Z, double h) {
    const Matrix k1 = m.eval(0, Z);
    const Matrix k2 = m.eval(1, Z + 0.5 * h * k1);
    const Matrix k3 = m.eval(2, Z + 0.5 * h * k2);
    const Matrix k4 = m.eval(3, Z + h * k3);
    return Z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// Per-trajectory output sums, n_points x B.
inline Matrix output_sums(std::span<const Trajectory *const> batch, long n_points) {
    Matrix ysum(n_points, static_cast<Eigen::Index>(batch.size()));
    for (std::size_t b = 0; b < batch.size(); ++b) {
        if (!batch[b]->outputs) {
            throw DimensionError("dataset trajectory without outputs");
        }
        ysum.col(static_cast<Eigen::Index>(b)) = batch[b]->outputs->rowwise().sum();
    }
    return ysum;
}

/// Latent rollout from z0 = 0 for every trajectory; time-major d_z x (N+1) B.
inline Matrix latent_rollout(const Vector &lambda, const Matrix &ysum, const TimeGrid &grid) {
    const Eigen::Index B = ysum.cols();
    const long n = grid.n_points();
    Matrix Zall(lambda.size(), n * B);
    LatentModel model{lambda, ysum, 0, {}};
    Matrix Z = Matrix::Zero(lambda.size(), B);
    Zall.leftCols(B) = Z;
    for (long k = 0; k < grid.n_steps(); ++k) {
        model.k = k;
        Z = rk4_step_batch(model, Z, grid.h());
        if (!Z.allFinite()) {
            throw DivergenceError("latent rollout: non-finite state", k + 1);
        }
        Zall.middleCols((k + 1) * B, B) = Z;
    }
    return Zall;
}

inline void check_batch(std::span<const Trajectory *const> batch) {
    if (batch.empty()) {
        throw ConfigError("batch", "batch must be non-empty");
    }
    const TimeGrid &g = batch.front()->grid;
    for (const Trajectory *t : batch) {
        if (!(t->grid == g)) {
            throw DimensionError("batch trajectories do not share one grid");
        }
    }
}

} // namespace detail

struct GradientResult {
    Vector gradient;
    LossBreakdown loss;
};

/// Exact gradient of the discretized, batch-averaged loss with respect to
/// (rho, T*, T), by reverse sweep through every RK4 stage of the latent
/// rollout (z0 = 0).
inline GradientResult grad_backprop(const KklObserver &obs,
                                    std::span<const Trajectory *const> batch,
                                    const TrainConfig &cfg,
                                    const SystemSpec *sys = nullptr) {
    detail::check_batch(batch);
    obs.validate();
    const TimeGrid &grid = batch.front()->grid;
    const Eigen::Index B = static_cast<Eigen::Index>(batch.size());
    const long n = grid.n_points();
    const Vector lambda = obs.eigenvalues();

    const Matrix ysum = detail::output_sums(batch, n);
    const Matrix Zall = detail::latent_rollout(lambda, ysum, grid);
    const Matrix Xall = detail::stack_time_major(
        batch, n, obs.n_x, [](const Trajectory &t) -> const Matrix & { return t.states; });
    const Matrix Yall = detail::stack_time_major(
        batch, n, obs.n_y, [](const Trajectory &t) -> const Matrix & { return *t.outputs; });

    const long stride = cfg.loss_stride;
    const Vector lw = loss_weights(grid, stride, cfg.loss_warmup);
    const long n_loss = lw.size();
    Eigen::RowVectorXd w(n_loss * B);
    Matrix Zs(Zall.rows(), n_loss * B);
    Matrix Xs(Xall.rows(), n_loss * B);
    Matrix Ys(Yall.rows(), n_loss * B);
    for (long q = 0; q < n_loss; ++q) {
        w.segment(q * B, B).setConstant(lw(q) / static_cast<double>(B));
        Zs.middleCols(q * B, B) = Zall.middleCols(q * stride * B, B);
        Xs.middleCols(q * B, B) = Xall.middleCols(q * stride * B, B);
        Ys.middleCols(q * B, B) = Yall.middleCols(q * stride * B, B);
    }

    detail::RunningCost rc;
    detail::running_cost(obs, Zs, Xs, Ys, w, cfg, sys, true, rc);
    Matrix dz_full = Matrix::Zero(Zall.rows(), n * B);
    for (long q = 0; q < n_loss; ++q) {
        dz_full.middleCols(q * stride * B, B) = rc.dz.middleCols(q * B, B);
    }

    GradientResult res;
    res.gradient = rc.dparams;
    const bool latent_matters = cfg.loss_mode == LossMode::nonauto || cfg.learn_eigenvalues;
    if (latent_matters) {
        detail::LatentModel model{lambda, ysum, 0, Vector::Zero(lambda.size())};
        Matrix cot = dz_full.middleCols((n - 1) * B, B);
        for (long k = grid.n_steps() - 1; k >= 0; --k) {
            model.k = k;
            cot = rk4_step_reverse(model, Matrix(Zall.middleCols(k * B, B)), grid.h(), cot);
            cot += dz_full.middleCols(k * B, B);
        }
        res.gradient.head(lambda.size()) += model.grad_lambda.cwiseProduct(lambda);
    }

    const double horizon = grid.horizon();
    res.loss.data = rc.data;
    res.loss.fwd = rc.fwd;
    res.loss.pde = rc.pde;
    res.loss.reg = horizon * lambda.squaredNorm();
    res.loss.total = rc.data + rc.fwd + cfg.pde() * rc.pde + cfg.gamma * res.loss.reg;
    // d(lambda^2)/drho = 2 lambda * lambda
    res.gradient.head(lambda.size()) +=
        cfg.gamma * horizon * 2.0 * lambda.cwiseProduct(lambda);
    if (!cfg.learn_eigenvalues) {
        res.gradient.head(lambda.size()).setZero();
    }
    return res;
}

/// Costate history recorded by grad_adjoint (batch-averaged quantities).
struct AdjointTrace {
    Matrix p;        ///< n_points x d_z, p(t_k) summed over the batch
    Vector mu_final; ///< mu(tf)
    Vector mu_start; ///< mu(t0)
};

/// Gradient from the continuous adjoint: integrates
///   pdot  = -p dF/dz - dL/dz,      p(tf)  = 0,
///   mudot = -p dF/dtheta - dL/dtheta, mu(tf) = 0,
/// backwards with RK4 along the stored latent trajectory (cubic Hermite
/// between grid points; x and y linearly interpolated) and returns mu(t0).
inline GradientResult grad_adjoint(const KklObserver &obs,
                                   std::span<const Trajectory *const> batch,
                                   const TrainConfig &cfg, const SystemSpec *sys = nullptr,
                                   AdjointTrace *trace = nullptr) {
    detail::check_batch(batch);
    obs.validate();
    const TimeGrid &grid = batch.front()->grid;
    const Eigen::Index B = static_cast<Eigen::Index>(batch.size());
    const long n = grid.n_points();
    const double h = grid.h();
    const Vector lambda = obs.eigenvalues();
    const Eigen::Index dz = lambda.size();

    const Matrix ysum = detail::output_sums(batch, n);
    const Matrix Zall = detail::latent_rollout(lambda, ysum, grid);
    const Matrix Xall = detail::stack_time_major(
        batch, n, obs.n_x, [](const Trajectory &t) -> const Matrix & { return t.states; });
    const Matrix Yall = detail::stack_time_major(
        batch, n, obs.n_y, [](const Trajectory &t) -> const Matrix & { return *t.outputs; });

    auto zdot = [&](long k) {
        Matrix d = lambda.asDiagonal() * Zall.middleCols(k * B, B);
        d.rowwise() += ysum.row(k);
        return d;
    };

    const Eigen::RowVectorXd wB = Eigen::RowVectorXd::Constant(B, 1.0 / static_cast<double>(B));
    struct Sample {
        Matrix z;
        Matrix Lz;
        Vector Ltheta;
    };
    auto sample_at = [&](const Matrix &Z, const Matrix &X, const Matrix &Y) {
        detail::RunningCost rc;
        detail::running_cost(obs, Z, X, Y, wB, cfg, sys, true, rc);
        Vector lt = rc.dparams;
        lt.head(dz) += cfg.gamma * 2.0 * lambda.cwiseProduct(lambda);
        return Sample{Z, rc.dz, lt};
    };
    auto grid_sample = [&](long k) {
        return sample_at(Zall.middleCols(k * B, B), Xall.middleCols(k * B, B),
                         Yall.middleCols(k * B, B));
    };
    auto mid_sample = [&](long k) {
        const Matrix Zm = 0.5 * (Zall.middleCols(k * B, B) + Zall.middleCols((k + 1) * B, B)) +
                          (h / 8.0) * (zdot(k) - zdot(k + 1));
        const Matrix Xm = 0.5 * (Xall.middleCols(k * B, B) + Xall.middleCols((k + 1) * B, B));
        const Matrix Ym = 0.5 * (Yall.middleCols(k * B, B) + Yall.middleCols((k + 1) * B, B));
        return sample_at(Zm, Xm, Ym);
    };

    // Right-hand side of the backward system at sample s for costate p.
    auto p_rate = [&](const Sample &s, const Matrix &p) -> Matrix {
        return -(lambda.asDiagonal() * p) - s.Lz;
    };
    auto mu_rate = [&](const Sample &s, const Matrix &p) -> Vector {
        Vector r = -s.Ltheta;
        r.head(dz) -= p.cwiseProduct(s.z).rowwise().sum().cwiseProduct(lambda);
        return r;
    };

    Matrix p = Matrix::Zero(dz, B);
    Vector mu = Vector::Zero(obs.param_count());
    if (trace != nullptr) {
        trace->p.resize(n, dz);
        trace->p.row(n - 1) = p.rowwise().sum().transpose();
        trace->mu_final = mu;
    }
    Sample upper = grid_sample(n - 1);
    const double hb = -h;
    for (long k = grid.n_steps() - 1; k >= 0; --k) {
        const Sample mid = mid_sample(k);
        const Sample lower = grid_sample(k);
        const Matrix P1 = p_rate(upper, p);
        const Vector M1 = mu_rate(upper, p);
        const Matrix p2 = p + 0.5 * hb * P1;
        const Matrix P2 = p_rate(mid, p2);
        const Vector M2 = mu_rate(mid, p2);
        const Matrix p3 = p + 0.5 * hb * P2;
        const Matrix P3 = p_rate(mid, p3);
        const Vector M3 = mu_rate(mid, p3);
        const Matrix p4 = p + hb * P3;
        const Matrix P4 = p_rate(lower, p4);
        const Vector M4 = mu_rate(lower, p4);
        p += (hb / 6.0) * (P1 + 2.0 * P2 + 2.0 * P3 + P4);
        mu += (hb / 6.0) * (M1 + 2.0 * M2 + 2.0 * M3 + M4);
        if (!p.allFinite() || !mu.allFinite()) {
            throw DivergenceError("grad_adjoint: non-finite costate", k);
        }
        if (trace != nullptr) {
            trace->p.row(k) = p.rowwise().sum().transpose();
        }
        upper = lower;
    }

    GradientResult res;
    res.gradient = mu;
    if (trace != nullptr) {
        trace->mu_start = mu;
    }
    Eigen::RowVectorXd w(n * B);
    const Vector tw = trapezoid_weights(grid);
    for (long k = 0; k < n; ++k) {
        w.segment(k * B, B).setConstant(tw(k) / static_cast<double>(B));
    }
    detail::RunningCost rc;
    detail::running_cost(obs, Zall, Xall, Yall, w, cfg, sys, false, rc);
    res.loss.data = rc.data;
    res.loss.fwd = rc.fwd;
    res.loss.pde = rc.pde;
    res.loss.reg = grid.horizon() * lambda.squaredNorm();
    res.loss.total = rc.data + rc.fwd + cfg.pde() * rc.pde + cfg.gamma * res.loss.reg;
    if (!cfg.learn_eigenvalues) {
        res.gradient.head(dz).setZero();
    }
    return res;
}

// -----------------------------------------------------------------------------
// Luenberger-like observer gradient
// -----------------------------------------------------------------------------

namespace detail {

/// Batched Luenberger dynamics A X + ghat(X) + G (Y - C X) over one step.
struct LuenbergerModel {
    const LuenbergerObserver &obs;
    const Matrix &Yall; ///< n_y x (N+1) B, time-major
    Eigen::Index B;
    long k = 0;
    Vector grad_ghat;

    Matrix stage_y(int stage) const {
        const double c = rk4_stage_fraction[stage];
        if (c == 0.0) {
            return Yall.middleCols(k * B, B);
        }
        if (c == 1.0) {
            return Yall.middleCols((k + 1) * B, B);
        }
        return 0.5 * (Yall.middleCols(k * B, B) + Yall.middleCols((k + 1) * B, B));
    }

    Matrix eval(int stage, const Matrix &X) const {
        Matrix out = (obs.A - obs.G * obs.C) * X + obs.G * stage_y(stage);
        out += obs.ghat.batch(X);
        return out;
    }

    Matrix vjp(int, const Matrix &X, const Matrix &cot) {
        const ForwardCache cache = forward_batch(obs.ghat.spec, obs.ghat.params, X);
        Matrix g = (obs.A - obs.G * obs.C).transpose() * cot;
        g += backward_batch(obs.ghat.spec, obs.ghat.params, cache, cot, &grad_ghat);
        return g;
    }
};

} // namespace detail

/// Gradient of the batch-averaged integral of |x - xhat|^2 with respect to
/// the ghat parameters, xhat(t0) = 0. Only loss_warmup is read from `cfg`.
inline GradientResult grad_backprop(const LuenbergerObserver &obs,
                                    std::span<const Trajectory *const> batch,
                                    const TrainConfig &cfg = {}) {
    detail::check_batch(batch);
    obs.validate();
    const TimeGrid &grid = batch.front()->grid;
    const Eigen::Index B = static_cast<Eigen::Index>(batch.size());
    const long n = grid.n_points();
    const int nx = obs.n_x();
    const Matrix Xall = detail::stack_time_major(
        batch, n, nx, [](const Trajectory &t) -> const Matrix & { return t.states; });
    const Matrix Yall = detail::stack_time_major(
        batch, n, obs.n_y(), [](const Trajectory &t) -> const Matrix & { return *t.outputs; });

    detail::LuenbergerModel model{obs, Yall, B, 0, Vector::Zero(obs.ghat.param_count())};
    Matrix Xhat(nx, n * B);
    Matrix X = Matrix::Zero(nx, B);
    Xhat.leftCols(B) = X;
    for (long k = 0; k < grid.n_steps(); ++k) {
        model.k = k;
        X = detail::rk4_step_batch(model, X, grid.h());
        if (!X.allFinite()) {
            throw DivergenceError("luenberger rollout: non-finite estimate", k + 1);
        }
        Xhat.middleCols((k + 1) * B, B) = X;
    }

    const Vector tw = loss_weights(grid, 1, cfg.loss_warmup);
    const Matrix E = Xhat - Xall;
    GradientResult res;
    Matrix dx(nx, n * B);
    for (long k = 0; k < n; ++k) {
        const double wk = tw(k) / static_cast<double>(B);
        res.loss.data += wk * E.middleCols(k * B, B).squaredNorm();
        dx.middleCols(k * B, B) = 2.0 * wk * E.middleCols(k * B, B);
    }
    Matrix cot = dx.middleCols((n - 1) * B, B);
    for (long k = grid.n_steps() - 1; k >= 0; --k) {
        model.k = k;
        cot = rk4_step_reverse(model, Matrix(Xhat.middleCols(k * B, B)), grid.h(), cot);
        cot += dx.middleCols(k * B, B);
    }
    res.gradient = model.grad_ghat;
    res.loss.total = res.loss.data;
    return res;
}

// -----------------------------------------------------------------------------
// Optimization loop
// -----------------------------------------------------------------------------

/// Optimizer state; stored in checkpoints so training can be resumed.
struct TrainState {
    int epoch = 0;  ///< epochs completed
    long step = 0;  ///< optimizer steps taken
    Vector m;       ///< Adam first moment
    Vector v;       ///< Adam second moment
};

struct TrainResult {
    std::vector<LossBreakdown> history; ///< per-epoch mean over minibatches
    TrainState state;
};

/// Called after every epoch with (epoch index, epoch loss, parameters, state).
using EpochCallback =
    std::function<void(int, const LossBreakdown &, const Vector &, const TrainState &)>;

namespace detail {

inline void optimizer_step(const TrainConfig &cfg, double lr, Vector &params,
                           const Vector &grad, TrainState &st) {
    ++st.step;
    if (cfg.optimizer == OptimizerKind::gd) {
        params -= lr * grad;
        return;
    }
    if (st.m.size() != params.size()) {
        st.m = Vector::Zero(params.size());
        st.v = Vector::Zero(params.size());
    }
    st.m = cfg.beta1 * st.m + (1.0 - cfg.beta1) * grad;
    st.v = cfg.beta2 * st.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    params.array() -= lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + cfg.epsilon);
}

/// Generic minibatch loop. `grad(params, batch)` returns the batch gradient;
/// `decay_mask` selects the entries subject to weight decay.
template <typename GradFn>
TrainResult run_training(Vector &params, const Dataset &data, const TrainConfig &cfg,
                         GradFn &&grad, const Vector &decay_mask, TrainState state,
                         const EpochCallback &callback) {
    cfg.validate();
    if (data.size() == 0) {
        throw ConfigError("dataset", "dataset is empty");
    }
    TrainResult result;
    std::vector<std::size_t> order(data.size());
    for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng = make_rng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), rng);
        const double lr = cfg.learning_rate * std::pow(cfg.lr_decay, epoch);

        LossBreakdown epoch_loss;
        int n_batches = 0;
        std::vector<const Trajectory *> batch;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            batch.clear();
            for (std::size_t i = start; i < stop; ++i) {
                batch.push_back(&data.trajectories[order[i]]);
            }
            GradientResult g;
            try {
                g = grad(params, std::span<const Trajectory *const>(batch));
            } catch (const DivergenceError &e) {
                throw DivergenceError(std::string("train: ") + e.what(), epoch);
            }
            if (!std::isfinite(g.loss.total) || !g.gradient.allFinite()) {
                throw DivergenceError("train: non-finite loss or gradient", epoch);
            }
            if (cfg.weight_decay > 0.0) {
                g.gradient += cfg.weight_decay * decay_mask.cwiseProduct(params);
            }
            optimizer_step(cfg, lr, params, g.gradient, state);
            epoch_loss += g.loss;
            ++n_batches;
        }
        epoch_loss *= 1.0 / n_batches;
        state.epoch = epoch + 1;
        result.history.push_back(epoch_loss);
        if (callback) {
            callback(epoch, epoch_loss, params, state);
        }
    }
    result.state = std::move(state);
    return result;
}

} // namespace detail

/// Trains rho, T* and (when present) T. The observer is updated in place.
inline TrainResult train(KklObserver &obs, const Dataset &data, const TrainConfig &cfg,
                         const SystemSpec *sys = nullptr, TrainState state = {},
                         const EpochCallback &callback = {}) {
    obs.validate();
    Vector params = obs.flat_params();
    Vector mask = Vector::Ones(params.size());
    mask.head(obs.d_z()).setZero();
    KklObserver work = obs;
    auto grad = [&](const Vector &p, std::span<const Trajectory *const> batch) {
        work.set_flat_params(p);
        return cfg.gradient_mode == GradientMode::adjoint
                   ? grad_adjoint(work, batch, cfg, sys)
                   : grad_backprop(work, batch, cfg, sys);
    };
    TrainResult res = detail::run_training(params, data, cfg, grad, mask, std::move(state),
                                           callback);
    obs.set_flat_params(params);
    return res;
}

/// Trains the ghat network of a Luenberger-like observer.
inline TrainResult train(LuenbergerObserver &obs, const Dataset &data,
                         const TrainConfig &cfg, TrainState state = {},
                         const EpochCallback &callback = {}) {
    obs.validate();
    Vector params = obs.ghat.params.values;
    LuenbergerObserver work = obs;
    auto grad = [&](const Vector &p, std::span<const Trajectory *const> batch) {
        work.ghat.params.values = p;
        return grad_backprop(work, batch, cfg);
    };
    TrainResult res = detail::run_training(params, data, cfg, grad,
                                           Vector::Ones(params.size()), std::move(state),
                                           callback);
    obs.ghat.params.values = params;
    return res;
}

/// Dataset trajectories as a batch span source.
inline std::vector<const Trajectory *> all_trajectories(const Dataset &data) {
    std::vector<const Trajectory *> out;
    for (const auto &t : data.trajectories) {
        out.push_back(&t);
    }
    return out;
}

} // namespace odekkl
