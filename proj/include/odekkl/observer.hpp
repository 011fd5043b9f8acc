// KKL and Luenberger-like observers.
//
// KKL: zdot = D z + F y (+ phi(z) u for driven systems), xhat = T*(z), with
// D = diag(lambda), lambda_i = -exp(rho_i), and F the all-ones matrix.
// Luenberger-like: xhatdot = A xhat + ghat(xhat) + G (y - C xhat).
#pragma once

#include <odekkl/core.hpp>
#include <odekkl/integrate.hpp>
#include <odekkl/net.hpp>
#include <odekkl/systems.hpp>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <optional>
#include <utility>

namespace odekkl {

/// Latent dimension n_y (n_x + 1) that guarantees an injective immersion.
constexpr int kkl_dim(int n_x, int n_y) { return n_y * (n_x + 1); }

/// Default eigenvalue spread -1, -1.1, ..., -(0.9 + 0.1 d_z).
inline Vector default_eigenvalues(int d_z) {
    Vector lambda(d_z);
    for (int i = 0; i < d_z; ++i) {
        lambda(i) = -(1.0 + 0.1 * i);
    }
    return lambda;
}

struct KklObserver {
    int n_x = 0;
    int n_y = 0;
    Vector rho;               ///< lambda_i = -exp(rho_i)
    Mlp tstar;                ///< R^{d_z} -> R^{n_x}
    std::optional<Mlp> t_fwd; ///< R^{n_x} -> R^{d_z}

    int d_z() const { return static_cast<int>(rho.size()); }

    Vector eigenvalues() const { return -rho.array().exp().matrix(); }

    void set_eigenvalues(const Vector &lambda) {
        if (!(lambda.array() < 0.0).all()) {
            throw ConfigError("eigenvalues", "all eigenvalues must be negative");
        }
        rho = (-lambda.array()).log().matrix();
    }

    Matrix F() const { return Matrix::Ones(d_z(), n_y); }

    /// Total learnable parameters: rho, then T*, then T when present.
    Eigen::Index param_count() const {
        return rho.size() + tstar.param_count() + (t_fwd ? t_fwd->param_count() : 0);
    }

    Vector flat_params() const {
        Vector p(param_count());
        p << rho, tstar.params.values,
            (t_fwd ? t_fwd->params.values : Vector(0));
        return p;
    }

    void set_flat_params(const Vector &p) {
        require_dim(p.size(), param_count(), "KklObserver::set_flat_params");
        Eigen::Index off = 0;
        rho = p.segment(off, rho.size());
        off += rho.size();
        tstar.params.values = p.segment(off, tstar.param_count());
        off += tstar.param_count();
        if (t_fwd) {
            t_fwd->params.values = p.segment(off, t_fwd->param_count());
        }
    }

    void validate() const {
        if (n_x < 1 || n_y < 1 || d_z() < 1) {
            throw DimensionError("KklObserver: dimensions must be positive");
        }
        require_dim(tstar.spec.input_dim(), d_z(), "KklObserver T* input");
        require_dim(tstar.spec.output_dim(), n_x, "KklObserver T* output");
        if (t_fwd) {
            require_dim(t_fwd->spec.input_dim(), n_x, "KklObserver T input");
            require_dim(t_fwd->spec.output_dim(), d_z(), "KklObserver T output");
        }
    }

    /// Observer with MLP maps of the given hidden widths.
    static KklObserver create(int n_x, int n_y, const std::vector<int> &hidden,
                              bool with_forward, Activation act, Rng &rng,
                              std::optional<Vector> lambda = std::nullopt) {
        KklObserver obs;
        obs.n_x = n_x;
        obs.n_y = n_y;
        const int dz = kkl_dim(n_x, n_y);
        obs.set_eigenvalues(lambda.value_or(default_eigenvalues(dz)));
        std::vector<int> sizes{obs.d_z()};
        sizes.insert(sizes.end(), hidden.begin(), hidden.end());
        sizes.push_back(n_x);
        obs.tstar = Mlp::random(MlpSpec(sizes, act), rng);
        if (with_forward) {
            std::vector<int> fsizes{n_x};
            fsizes.insert(fsizes.end(), hidden.begin(), hidden.end());
            fsizes.push_back(obs.d_z());
            obs.t_fwd = Mlp::random(MlpSpec(fsizes, act), rng);
        }
        obs.validate();
        return obs;
    }
};

/// Eigenvalues of D; strictly negative for every finite rho.
inline Vector d_eigenvalues(const KklObserver &obs) { return obs.eigenvalues(); }

/// D z + F y.
inline Vector latent_drift(const KklObserver &obs, const Vector &z, const Vector &y) {
    require_dim(z.size(), obs.d_z(), "latent_drift z");
    require_dim(y.size(), obs.n_y, "latent_drift y");
    return obs.eigenvalues().cwiseProduct(z) + Vector::Constant(obs.d_z(), y.sum());
}

/// phi(z) = dT/dx(T*(z)) g(T*(z)), a d_z x n_u matrix.
inline Matrix latent_input_gain(const KklObserver &obs, const SystemSpec &sys,
                                const Vector &z) {
    if (!obs.t_fwd) {
        throw ConfigError("observer.t_fwd", "driven latent dynamics need the forward map T");
    }
    if (!sys.input_map) {
        throw ConfigError("system.input_map", "system '" + sys.name + "' has no input map");
    }
    const Vector x = obs.tstar(z);
    return jacobian_input(obs.t_fwd->spec, obs.t_fwd->params, x) * sys.input_map(x);
}

/// D z + F y + phi(z) u.
inline Vector latent_drift_nonauto(const KklObserver &obs, const SystemSpec &sys,
                                   const Vector &z, const Vector &y, const Vector &u) {
    Vector dz = latent_drift(obs, z, y);
    const Matrix phi = latent_input_gain(obs, sys, z);
    if (u.size() > 0) {
        require_dim(u.size(), phi.cols(), "latent_drift_nonauto u");
        dz += phi * u;
    }
    return dz;
}

/// xhat = T*(z).
inline Vector estimate(const KklObserver &obs, const Vector &z) {
    require_dim(z.size(), obs.d_z(), "estimate z");
    return obs.tstar(z);
}

// -----------------------------------------------------------------------------
// Luenberger-like observer
// -----------------------------------------------------------------------------

struct LuenbergerObserver {
    Matrix A; ///< n_x x n_x
    Matrix C; ///< n_y x n_x
    Matrix G; ///< n_x x n_y
    Mlp ghat; ///< R^{n_x} -> R^{n_x}

    int n_x() const { return static_cast<int>(A.rows()); }
    int n_y() const { return static_cast<int>(C.rows()); }

    /// Checks dimensions and that A - G C is Hurwitz.
    void validate() const {
        if (A.rows() != A.cols()) {
            throw DimensionError("LuenbergerObserver: A must be square");
        }
        require_dim(C.cols(), n_x(), "LuenbergerObserver C cols");
        require_dim(G.rows(), n_x(), "LuenbergerObserver G rows");
        require_dim(G.cols(), n_y(), "LuenbergerObserver G cols");
        require_dim(ghat.spec.input_dim(), n_x(), "LuenbergerObserver ghat input");
        require_dim(ghat.spec.output_dim(), n_x(), "LuenbergerObserver ghat output");
        Eigen::EigenSolver<Matrix> es(A - G * C, false);
        if (!(es.eigenvalues().real().array() < 0.0).all()) {
            throw ConfigError("observer.G", "A - G C is not Hurwitz");
        }
    }

    static LuenbergerObserver create(Matrix A, Matrix C, Matrix G,
                                     const std::vector<int> &hidden, Activation act,
                                     Rng &rng) {
        LuenbergerObserver obs{std::move(A), std::move(C), std::move(G), {}};
        std::vector<int> sizes{obs.n_x()};
        sizes.insert(sizes.end(), hidden.begin(), hidden.end());
        sizes.push_back(obs.n_x());
        obs.ghat = Mlp::random(MlpSpec(sizes, act), rng);
        obs.validate();
        return obs;
    }
};

/// A xhat + ghat(xhat) + G (y - C xhat).
inline Vector luenberger_drift(const LuenbergerObserver &obs, const Vector &xhat,
                               const Vector &y) {
    require_dim(xhat.size(), obs.n_x(), "luenberger_drift xhat");
    require_dim(y.size(), obs.n_y(), "luenberger_drift y");
    return obs.A * xhat + obs.ghat(xhat) + obs.G * (y - obs.C * xhat);
}

// -----------------------------------------------------------------------------
// Observer rollout on recorded measurements
// -----------------------------------------------------------------------------

struct ObserverRun {
    Trajectory latent;   ///< z (for Luenberger, identical to the estimate)
    Trajectory estimate; ///< xhat
};

/// Integrates the KKL observer on grid-sampled measurements (rows = time).
/// Stage values of y and u are linearly interpolated. When `u_series` and
/// `sys` are given the driven latent dynamics are used.
inline ObserverRun run_observer(const KklObserver &obs, const Matrix &y_series,
                                const Vector &z0, const TimeGrid &grid,
                                const Matrix *u_series = nullptr,
                                const SystemSpec *sys = nullptr) {
    obs.validate();
    require_dim(y_series.rows(), grid.n_points(), "run_observer y rows");
    require_dim(y_series.cols(), obs.n_y, "run_observer y cols");
    require_dim(z0.size(), obs.d_z(), "run_observer z0");
    const bool driven = u_series != nullptr && sys != nullptr;
    if (driven) {
        require_dim(u_series->rows(), grid.n_points(), "run_observer u rows");
    }

    Trajectory zs{grid, Matrix(grid.n_points(), obs.d_z()), std::nullopt, std::nullopt};
    Vector z = z0;
    zs.states.row(0) = z.transpose();
    const double h = grid.h();
    for (long k = 0; k < grid.n_steps(); ++k) {
        auto f = [&](double c, const Vector &zz) -> Vector {
            const Vector y = interpolate_row(y_series, k, c);
            if (driven) {
                return latent_drift_nonauto(obs, *sys, zz, y,
                                            interpolate_row(*u_series, k, c));
            }
            return latent_drift(obs, zz, y);
        };
        z = rk4_step_staged(f, z, h);
        if (!z.allFinite()) {
            throw DivergenceError("run_observer: non-finite latent state", k + 1);
        }
        zs.states.row(k + 1) = z.transpose();
    }
    Trajectory xhat{grid, obs.tstar.batch(zs.states.transpose()).transpose(),
                    std::nullopt, std::nullopt};
    return {std::move(zs), std::move(xhat)};
}

/// Integrates the Luenberger-like observer on grid-sampled measurements.
inline ObserverRun run_observer(const LuenbergerObserver &obs, const Matrix &y_series,
                                const Vector &xhat0, const TimeGrid &grid) {
    obs.validate();
    require_dim(y_series.rows(), grid.n_points(), "run_observer y rows");
    require_dim(y_series.cols(), obs.n_y(), "run_observer y cols");
    require_dim(xhat0.size(), obs.n_x(), "run_observer xhat0");
    Trajectory xs{grid, Matrix(grid.n_points(), obs.n_x()), std::nullopt, std::nullopt};
    Vector x = xhat0;
    xs.states.row(0) = x.transpose();
    const double h = grid.h();
    for (long k = 0; k < grid.n_steps(); ++k) {
        auto f = [&](double c, const Vector &xx) -> Vector {
            return luenberger_drift(obs, xx, interpolate_row(y_series, k, c));
        };
        x = rk4_step_staged(f, x, h);
        if (!x.allFinite()) {
            throw DivergenceError("run_observer: non-finite estimate", k + 1);
        }
        xs.states.row(k + 1) = x.transpose();
    }
    return {xs, xs};
}

} // namespace odekkl
