// Fixed-step RK4 integration: plain IVPs, coupled system/observer runs, and
// the reverse sweep used for discretize-then-optimize gradients.
#pragma once

#include <odekkl/core.hpp>
#include <odekkl/systems.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <utility>

namespace odekkl {

/// Uniform time grid t0, t0 + h, ..., tf.
class TimeGrid {
public:
    TimeGrid() = default;

    TimeGrid(double t0, double tf, double h) : t0_(t0), tf_(tf), h_(h) {
        if (!(tf > t0)) {
            throw ConfigError("grid.tf", "horizon must satisfy tf > t0");
        }
        if (!(h > 0.0)) {
            throw ConfigError("grid.h", "step size must be positive");
        }
        const double ratio = (tf - t0) / h;
        const double rounded = std::round(ratio);
        if (std::abs(ratio - rounded) > 1e-9 * std::max(1.0, ratio)) {
            throw ConfigError("grid.h", "(tf - t0) / h must be an integer");
        }
        n_steps_ = static_cast<long>(rounded);
    }

    double t0() const { return t0_; }
    double tf() const { return tf_; }
    double h() const { return h_; }
    long n_steps() const { return n_steps_; }
    long n_points() const { return n_steps_ + 1; }
    double horizon() const { return tf_ - t0_; }
    double time(long k) const { return t0_ + static_cast<double>(k) * h_; }

    bool operator==(const TimeGrid &o) const {
        return t0_ == o.t0_ && h_ == o.h_ && n_steps_ == o.n_steps_;
    }

private:
    double t0_ = 0.0;
    double tf_ = 1.0;
    double h_ = 1.0;
    long n_steps_ = 1;
};

/// Sample path on a TimeGrid; row k holds the value at grid.time(k).
struct Trajectory {
    TimeGrid grid;
    Matrix states;
    std::optional<Matrix> outputs;
    std::optional<Matrix> inputs;

    long rows() const { return states.rows(); }
    Vector state(long k) const { return states.row(k).transpose(); }
};

/// Value of a grid-sampled signal (rows = time) at step k, stage fraction c in
/// [0, 1], by linear interpolation between rows k and k + 1.
inline Vector interpolate_row(const Matrix &samples, long k, double c) {
    if (c == 0.0) {
        return samples.row(k).transpose();
    }
    if (c == 1.0) {
        return samples.row(k + 1).transpose();
    }
    return ((1.0 - c) * samples.row(k) + c * samples.row(k + 1)).transpose();
}

/// Classical four-stage Runge-Kutta step for xdot = f(t, x).
template <typename Drift>
Vector rk4_step(Drift &&f, double t, const Vector &x, double h) {
    const Vector k1 = f(t, x);
    const Vector k2 = f(t + 0.5 * h, Vector(x + 0.5 * h * k1));
    const Vector k3 = f(t + 0.5 * h, Vector(x + 0.5 * h * k2));
    const Vector k4 = f(t + h, Vector(x + h * k3));
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// RK4 step where the drift receives the stage fraction c in {0, 1/2, 1}
/// instead of absolute time; used with grid-sampled inputs.
template <typename StageDrift>
Vector rk4_step_staged(StageDrift &&f, const Vector &x, double h) {
    const Vector k1 = f(0.0, x);
    const Vector k2 = f(0.5, Vector(x + 0.5 * h * k1));
    const Vector k3 = f(0.5, Vector(x + 0.5 * h * k2));
    const Vector k4 = f(1.0, Vector(x + h * k3));
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// Integrates xdot = f(t, x) from x0 over `grid`.
template <typename Drift>
Trajectory solve_ivp(Drift &&f, const Vector &x0, const TimeGrid &grid) {
    Trajectory traj{grid, Matrix(grid.n_points(), x0.size()), std::nullopt,
                    std::nullopt};
    Vector x = x0;
    traj.states.row(0) = x.transpose();
    for (long k = 0; k < grid.n_steps(); ++k) {
        x = rk4_step(f, grid.time(k), x, grid.h());
        if (!x.allFinite()) {
            throw DivergenceError("solve_ivp: non-finite state", k + 1);
        }
        traj.states.row(k + 1) = x.transpose();
    }
    return traj;
}

/// Simulates `sys` from x0, recording outputs (plus measurement noise) and the
/// excitation. Noise is sampled once per grid point and held over the step.
inline Trajectory simulate_system(const SystemSpec &sys, const Vector &x0,
                                  const TimeGrid &grid, const NoiseSpec &noise,
                                  const ExcitationSpec &excitation, Rng &rng);

/// Stacked simulation of the system and an observer driven by its measured
/// output. `obs_drift(t, z, y, u)` returns dz/dt. Returns (x/y/u, z).
template <typename ObsDrift>
std::pair<Trajectory, Trajectory>
solve_coupled(const SystemSpec &sys, ObsDrift &&obs_drift, const Vector &x0,
              const Vector &z0, const TimeGrid &grid, const NoiseSpec &noise,
              const ExcitationSpec &excitation, Rng &rng) {
    require_dim(x0.size(), sys.n_x, "solve_coupled: x0");
    const long n = grid.n_points();
    const int n_u = excitation.active ? std::max(sys.n_u, 1) : 0;
    Trajectory xs{grid, Matrix(n, sys.n_x), Matrix(n, sys.n_y), std::nullopt};
    Trajectory zs{grid, Matrix(n, z0.size()), std::nullopt, std::nullopt};
    if (n_u > 0) {
        xs.inputs = Matrix(n, n_u);
    }

    const bool measurement = noise.target == NoiseTarget::measurement;
    auto draw = [&](int dim) {
        return noise.kind == NoiseKind::none ? Vector(Vector::Zero(dim))
                                             : sample_noise(noise, dim, rng);
    };

    Vector x = x0;
    Vector z = z0;
    for (long k = 0;; ++k) {
        const double t = grid.time(k);
        const Vector v = measurement ? draw(sys.n_y) : Vector(Vector::Zero(sys.n_y));
        xs.states.row(k) = x.transpose();
        zs.states.row(k) = z.transpose();
        xs.outputs->row(k) = (sys.h(x) + v).transpose();
        if (n_u > 0) {
            xs.inputs->row(k) = excitation.value(t, n_u).transpose();
        }
        if (k == grid.n_steps()) {
            break;
        }
        const Vector w = measurement ? Vector(Vector::Zero(sys.n_x)) : draw(sys.n_x);

        const double h = grid.h();
        auto stage = [&](double ts, const Vector &xs_, const Vector &zs_,
                         Vector &dx, Vector &dz) {
            const Vector u = excitation.value(ts, n_u);
            dx = sys.drift(ts, xs_, u) + w;
            dz = obs_drift(ts, zs_, Vector(sys.h(xs_) + v), u);
        };
        Vector kx1, kx2, kx3, kx4, kz1, kz2, kz3, kz4;
        stage(t, x, z, kx1, kz1);
        stage(t + 0.5 * h, x + 0.5 * h * kx1, z + 0.5 * h * kz1, kx2, kz2);
        stage(t + 0.5 * h, x + 0.5 * h * kx2, z + 0.5 * h * kz2, kx3, kz3);
        stage(t + h, x + h * kx3, z + h * kz3, kx4, kz4);
        x += (h / 6.0) * (kx1 + 2.0 * kx2 + 2.0 * kx3 + kx4);
        z += (h / 6.0) * (kz1 + 2.0 * kz2 + 2.0 * kz3 + kz4);
        if (!x.allFinite() || !z.allFinite()) {
            throw DivergenceError("solve_coupled: non-finite state", k + 1);
        }
    }
    return {std::move(xs), std::move(zs)};
}

inline Trajectory simulate_system(const SystemSpec &sys, const Vector &x0,
                                  const TimeGrid &grid, const NoiseSpec &noise,
                                  const ExcitationSpec &excitation, Rng &rng) {
    auto none = [](double, const Vector &, const Vector &, const Vector &) {
        return Vector(0);
    };
    return solve_coupled(sys, none, x0, Vector(0), grid, noise, excitation, rng)
        .first;
}

// -----------------------------------------------------------------------------
// Reverse-mode sweep through one RK4 step
// -----------------------------------------------------------------------------

/// Pulls the cotangent of z_{k+1} = RK4(z_k) back to z_k. The model supplies
/// `eval(stage, z)` (the drift at stage 0..3 of the current step) and
/// `vjp(stage, z, cotangent)` returning the z-cotangent while accumulating its
/// own parameter cotangent internally. Works on batched column matrices.
template <typename Model>
Matrix rk4_step_reverse(Model &model, const Matrix &z, double h,
                        const Matrix &cot_next) {
    // Recompute stage states.
    const Matrix k1 = model.eval(0, z);
    const Matrix s2 = z + 0.5 * h * k1;
    const Matrix k2 = model.eval(1, s2);
    const Matrix s3 = z + 0.5 * h * k2;
    const Matrix k3 = model.eval(2, s3);
    const Matrix s4 = z + h * k3;

    Matrix cot_z = cot_next;
    Matrix cot_k3 = (h / 3.0) * cot_next;
    Matrix cot_k2 = (h / 3.0) * cot_next;
    Matrix cot_k1 = (h / 6.0) * cot_next;

    const Matrix cot_s4 = model.vjp(3, s4, Matrix((h / 6.0) * cot_next));
    cot_z += cot_s4;
    cot_k3 += h * cot_s4;

    const Matrix cot_s3 = model.vjp(2, s3, cot_k3);
    cot_z += cot_s3;
    cot_k2 += 0.5 * h * cot_s3;

    const Matrix cot_s2 = model.vjp(1, s2, cot_k2);
    cot_z += cot_s2;
    cot_k1 += 0.5 * h * cot_s2;

    cot_z += model.vjp(0, z, cot_k1);
    return cot_z;
}

/// Stage time fractions of the classical RK4 tableau.
inline constexpr double rk4_stage_fraction[4] = {0.0, 0.5, 0.5, 1.0};

// -----------------------------------------------------------------------------
// CSV
// -----------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Header `t,x1..xn[,y1..ym][,u1..uk]`, one row per grid point.
inline void write_csv(std::ostream &os, const Trajectory &traj,
                      const std::string &state_prefix = "x") {
    os << "t";
    for (long i = 0; i < traj.states.cols(); ++i) {
        os << ',' << state_prefix << i + 1;
    }
    if (traj.outputs) {
        for (long i = 0; i < traj.outputs->cols(); ++i) {
            os << ",y" << i + 1;
        }
    }
    if (traj.inputs) {
        for (long i = 0; i < traj.inputs->cols(); ++i) {
            os << ",u" << i + 1;
        }
    }
    os << '\n';
    for (long k = 0; k < traj.rows(); ++k) {
        os << format_double(traj.grid.time(k));
        for (long i = 0; i < traj.states.cols(); ++i) {
            os << ',' << format_double(traj.states(k, i));
        }
        if (traj.outputs) {
            for (long i = 0; i < traj.outputs->cols(); ++i) {
                os << ',' << format_double((*traj.outputs)(k, i));
            }
        }
        if (traj.inputs) {
            for (long i = 0; i < traj.inputs->cols(); ++i) {
                os << ',' << format_double((*traj.inputs)(k, i));
            }
        }
        os << '\n';
    }
}

inline void write_csv(const std::string &path, const Trajectory &traj,
                      const std::string &state_prefix = "x") {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw std::runtime_error("cannot open " + path + " for writing");
    }
    write_csv(os, traj, state_prefix);
}

} // namespace odekkl
