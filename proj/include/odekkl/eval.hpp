// Metrics and evaluation protocols: RMSE and convergence time, the observer x
// noise-scenario matrix, the analytic linear oracle (Sylvester equation), the
// eigenvalue-scaling robustness sweep, generalization maps and the Lipschitz
// error-bound report.
#pragma once

#include <odekkl/core.hpp>
#include <odekkl/integrate.hpp>
#include <odekkl/net.hpp>
#include <odekkl/observer.hpp>
#include <odekkl/systems.hpp>
#include <odekkl/train.hpp>

#include <Eigen/LU>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace odekkl {

// -----------------------------------------------------------------------------
// Metrics
// -----------------------------------------------------------------------------

inline void require_same_grid(const Trajectory &a, const Trajectory &b, const char *what) {
    if (!(a.grid == b.grid) || a.states.rows() != b.states.rows() ||
        a.states.cols() != b.states.cols()) {
        throw DimensionError(std::string(what) + ": trajectories do not match");
    }
}

/// Root mean squared per-component error over grid points with t >= t0 + warmup.
inline double rmse(const Trajectory &x_traj, const Trajectory &xhat_traj, double warmup = 0.0) {
    require_same_grid(x_traj, xhat_traj, "rmse");
    const TimeGrid &g = x_traj.grid;
    if (!(warmup >= 0.0 && warmup < g.horizon())) {
        throw ConfigError("warmup", "must satisfy 0 <= warmup < tf - t0");
    }
    const long first = static_cast<long>(std::ceil(warmup / g.h() - 1e-9));
    const long rows = g.n_points() - first;
    const double sq = (x_traj.states.bottomRows(rows) - xhat_traj.states.bottomRows(rows))
                          .squaredNorm();
    return std::sqrt(sq / static_cast<double>(rows * x_traj.states.cols()));
}

/// Per-grid-point Euclidean error norm.
inline Vector error_norms(const Trajectory &x_traj, const Trajectory &xhat_traj) {
    require_same_grid(x_traj, xhat_traj, "error_norms");
    return (x_traj.states - xhat_traj.states).rowwise().norm();
}

/// First grid time after which the error norm stays below `fraction` of its
/// initial value. nullopt when the final sample is still above the threshold.
inline std::optional<double> convergence_time(const Vector &err, const TimeGrid &grid,
                                              double fraction = 0.05) {
    require_dim(err.size(), grid.n_points(), "convergence_time");
    const double thr = fraction * err(0);
    long last_above = -1;
    for (long k = err.size() - 1; k >= 0; --k) {
        if (!(err(k) < thr)) {
            last_above = k;
            break;
        }
    }
    if (err(0) == 0.0) {
        last_above = -1;
    }
    if (last_above == grid.n_steps()) {
        return std::nullopt;
    }
    return grid.time(last_above + 1);
}

inline std::optional<double> convergence_time(const Trajectory &x_traj,
                                              const Trajectory &xhat_traj,
                                              double fraction = 0.05) {
    return convergence_time(error_norms(x_traj, xhat_traj), x_traj.grid, fraction);
}

// -----------------------------------------------------------------------------
// Observers behind one interface
// -----------------------------------------------------------------------------

using AnyObserver = std::variant<KklObserver, LuenbergerObserver>;

struct NamedObserver {
    std::string id;
    AnyObserver observer;
};

/// Runs an observer on a measured trajectory (outputs, optionally inputs)
/// from the zero initial estimate and returns the state estimate.
inline Trajectory estimate_states(const AnyObserver &observer, const Trajectory &measured,
                                  const SystemSpec *sys = nullptr) {
    if (!measured.outputs) {
        throw DimensionError("estimate_states: trajectory has no outputs");
    }
    if (const auto *kkl = std::get_if<KklObserver>(&observer)) {
        const bool driven = measured.inputs && sys != nullptr && kkl->t_fwd && sys->input_map;
        return run_observer(*kkl, *measured.outputs, Vector::Zero(kkl->d_z()), measured.grid,
                            driven ? &*measured.inputs : nullptr, driven ? sys : nullptr)
            .estimate;
    }
    const auto &lu = std::get<LuenbergerObserver>(observer);
    return run_observer(lu, *measured.outputs, Vector::Zero(lu.n_x()), measured.grid)
        .estimate;
}

// -----------------------------------------------------------------------------
// Scenario matrix
// -----------------------------------------------------------------------------

struct ScenarioResult {
    std::string observer_id;
    std::string scenario;
    double rmse = 0.0;                      ///< over every test initial condition
    double rmse_reference = 0.0;            ///< first test initial condition only
    std::optional<double> convergence_time; ///< first test initial condition
    bool diverged = false;
    std::vector<std::string> trajectory_refs;
};

struct ScenarioOptions {
    double warmup = 0.0;
    ExcitationSpec excitation;
    /// When set, one CSV per (observer, scenario) for the reference condition.
    std::optional<std::filesystem::path> trajectory_dir;
};

/// Evaluates every observer under every scenario. Within a scenario all
/// observers see the same measurement realizations (paired comparison).
/// Rows are ordered observer-major.
inline std::vector<ScenarioResult>
scenario_matrix(const std::vector<NamedObserver> &observers, const SystemSpec &sys,
                const std::vector<Vector> &test_initial_conditions,
                const std::vector<NoiseSpec> &scenarios, const TimeGrid &grid, Rng &rng,
                const ScenarioOptions &opts = {}) {
    if (observers.empty() || scenarios.empty() || test_initial_conditions.empty()) {
        throw ConfigError("scenario_matrix", "observers, scenarios and initial conditions must be non-empty");
    }
    // Measurements per scenario, generated once and shared.
    std::vector<std::vector<Trajectory>> measured(scenarios.size());
    for (std::size_t s = 0; s < scenarios.size(); ++s) {
        for (const Vector &x0 : test_initial_conditions) {
            measured[s].push_back(
                simulate_system(sys, x0, grid, scenarios[s], opts.excitation, rng));
        }
    }
    std::vector<ScenarioResult> out;
    for (const NamedObserver &ob : observers) {
        for (std::size_t s = 0; s < scenarios.size(); ++s) {
            ScenarioResult r;
            r.observer_id = ob.id;
            r.scenario = scenarios[s].label();
            double sq = 0.0;
            long count = 0;
            try {
                for (std::size_t i = 0; i < measured[s].size(); ++i) {
                    const Trajectory &truth = measured[s][i];
                    const Trajectory est = estimate_states(ob.observer, truth, &sys);
                    const double e = rmse(truth, est, opts.warmup);
                    const long rows = truth.states.size();
                    sq += e * e * static_cast<double>(rows);
                    count += rows;
                    if (i == 0) {
                        r.rmse_reference = e;
                        r.convergence_time = convergence_time(truth, est);
                        if (opts.trajectory_dir) {
                            std::filesystem::create_directories(*opts.trajectory_dir);
                            const auto path = *opts.trajectory_dir /
                                              (ob.id + "_scenario" + std::to_string(s) + ".csv");
                            Trajectory both = truth;
                            Matrix stacked(truth.rows(), truth.states.cols() * 2);
                            stacked << truth.states, est.states;
                            both.states = stacked;
                            write_csv(path.string(), both);
                            r.trajectory_refs.push_back(path.string());
                        }
                    }
                }
                if (!std::isfinite(sq)) {
                    throw DivergenceError("scenario_matrix: non-finite error", 0);
                }
                r.rmse = std::sqrt(sq / static_cast<double>(count));
            } catch (const DivergenceError &) {
                r.diverged = true;
                r.rmse = std::numeric_limits<double>::quiet_NaN();
                r.rmse_reference = r.rmse;
                r.convergence_time.reset();
            }
            out.push_back(std::move(r));
        }
    }
    return out;
}

inline std::string format_optional_time(const std::optional<double> &t) {
    return t ? format_double(*t) : std::string("nan");
}

inline void write_scenario_csv(std::ostream &os, const std::vector<ScenarioResult> &rows,
                               bool reference = false) {
    os << "observer,scenario,rmse,convergence_time\n";
    for (const ScenarioResult &r : rows) {
        os << r.observer_id << ',' << r.scenario << ','
           << format_double(reference ? r.rmse_reference : r.rmse) << ','
           << format_optional_time(r.convergence_time) << '\n';
    }
}

// -----------------------------------------------------------------------------
// Linear oracle
// -----------------------------------------------------------------------------

class SingularSystemError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Solves T A - D T = F C through (A^T kron I - I kron D) vec(T) = vec(F C).
inline Matrix sylvester_oracle(const Matrix &A, const Matrix &C, const Matrix &D,
                               const Matrix &F) {
    if (A.rows() != A.cols() || D.rows() != D.cols()) {
        throw DimensionError("sylvester_oracle: A and D must be square");
    }
    require_dim(C.cols(), A.rows(), "sylvester_oracle C cols");
    require_dim(F.rows(), D.rows(), "sylvester_oracle F rows");
    require_dim(F.cols(), C.rows(), "sylvester_oracle F cols");
    const Eigen::Index n = A.rows();
    const Eigen::Index m = D.rows();
    Matrix K = Matrix::Zero(n * m, n * m);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            K.block(i * m, j * m, m, m) += A(j, i) * Matrix::Identity(m, m);
        }
        K.block(i * m, i * m, m, m) -= D;
    }
    const Matrix FC = F * C;
    const Vector rhs = Eigen::Map<const Vector>(FC.data(), FC.size());
    Eigen::FullPivLU<Matrix> lu(K);
    if (!lu.isInvertible()) {
        throw SingularSystemError("sylvester_oracle: spectra of A and D overlap");
    }
    const Vector vecT = lu.solve(rhs);
    Matrix T = Eigen::Map<const Matrix>(vecT.data(), m, n);
    const double scale = std::max(1.0, FC.norm());
    if ((T * A - D * T - FC).norm() > 1e-10 * scale * std::max(1.0, T.norm())) {
        throw SingularSystemError("sylvester_oracle: ill-conditioned system");
    }
    return T;
}

inline Matrix pseudo_inverse(const Matrix &M) {
    return M.completeOrthogonalDecomposition().pseudoInverse();
}

// -----------------------------------------------------------------------------
// Robustness sweep over eigenvalue scaling
// -----------------------------------------------------------------------------

struct SweepPoint {
    double k = 1.0;
    std::optional<double> convergence_time; ///< noiseless transient, 5% rule
    double steady_state_error = 0.0;        ///< mean |x - xtilde| over last 20%
    double bound_ratio = 0.0;               ///< max_t error / bound, literal constants
    double bound_ratio_sharp = 0.0;         ///< same with L_T from T_k itself
    bool bound_holds() const { return bound_ratio <= 1.0; }
};

struct SweepOptions {
    std::optional<Vector> x0; ///< drawn from the system domain when absent
    /// Fraction of the horizon averaged for the steady-state error.
    double steady_fraction = 0.2;
};

/// Scales the eigenvalues of diag(d_base) by each k, builds the analytic
/// immersion T_k and estimate xtilde = pinv(T_k) z, and records the transient
/// (noiseless run) and steady-state error (noisy run) from a shared x0. Also
/// evaluates the trade-off bound pointwise on the noisy run.
inline std::vector<SweepPoint> robustness_sweep(const SystemSpec &sys_linear,
                                                const Vector &d_base, const Matrix &F,
                                                const std::vector<double> &k_values,
                                                const NoiseSpec &noise, const TimeGrid &grid,
                                                Rng &rng, const SweepOptions &opts = {}) {
    if (!sys_linear.linear || !sys_linear.linear_is_exact) {
        throw ConfigError("system", "robustness_sweep needs the linear oracle system");
    }
    if (!(d_base.array() < 0.0).all()) {
        throw ConfigError("eigenvalues", "all eigenvalues must be negative");
    }
    const Matrix &A = sys_linear.linear->A;
    const Matrix &C = sys_linear.linear->C;
    const int nx = sys_linear.n_x;
    const Eigen::Index dz = d_base.size();
    const Vector x0 = opts.x0.value_or(sample_initial_condition(sys_linear.domain, rng));
    const Matrix D1 = d_base.asDiagonal();
    const Matrix T1 = sylvester_oracle(A, C, D1, F);
    const Eigen::JacobiSVD<Matrix> svd1(T1);
    const double L_T = 1.0 / svd1.singularValues().tail(1)(0);
    const double L_Tx = svd1.singularValues()(0);
    const double lambda_max = d_base.maxCoeff();
    // Bounds of w and F v. Unbounded noise makes the bound vacuous.
    const double vbar = noise.target == NoiseTarget::measurement
                            ? noise.bound() * F.rowwise().sum().cwiseAbs().norm()
                            : 0.0;
    const double wbar = noise.target == NoiseTarget::process
                            ? noise.bound() * std::sqrt(static_cast<double>(nx))
                            : 0.0;
    const long n_tail = std::max<long>(
        1, static_cast<long>(std::floor(opts.steady_fraction * grid.n_points())));

    std::vector<SweepPoint> out;
    for (double k : k_values) {
        if (!(k >= 1.0)) {
            throw ConfigError("k_values", "scaling factors must be >= 1");
        }
        const Matrix Dk = k * D1;
        const Matrix Tk = sylvester_oracle(A, C, Dk, F);
        const Matrix Tk_pinv = pseudo_inverse(Tk);
        auto obs_drift = [&](double, const Vector &z, const Vector &y, const Vector &) {
            return Vector(Dk * z + F * y);
        };
        auto run = [&](const NoiseSpec &ns, Rng &r) {
            auto [xs, zs] = solve_coupled(sys_linear, obs_drift, x0, Vector::Zero(dz), grid,
                                          ns, ExcitationSpec::none(), r);
            Trajectory est{grid, (Tk_pinv * zs.states.transpose()).transpose(), std::nullopt,
                           std::nullopt};
            return std::make_tuple(std::move(xs), std::move(zs), std::move(est));
        };
        SweepPoint p;
        p.k = k;
        {
            Rng unused = make_rng(0);
            auto [xs, zs, est] = run(NoiseSpec::none(), unused);
            p.convergence_time = convergence_time(xs, est);
        }
        auto [xs, zs, est] = run(noise, rng);
        const Vector err = error_norms(xs, est);
        p.steady_state_error = err.tail(n_tail).mean();

        const double nz = static_cast<double>(dz);
        const double kfac = std::pow(k, nz) * std::sqrt(static_cast<double>(nx));
        const double e0 = (Vector::Zero(dz) - Tk * x0).norm();
        const Eigen::JacobiSVD<Matrix> svdk(Tk);
        const double L_Tk = 1.0 / svdk.singularValues().tail(1)(0);
        // Absolute floor for integration error once the bound decays below it.
        constexpr double integration_floor = 1e-8;
        double worst = 0.0;
        double worst_sharp = 0.0;
        for (long i = 0; i < grid.n_points(); ++i) {
            const double decay = std::exp(k * lambda_max * (grid.time(i) - grid.t0()));
            const double tail = (L_Tx / k * wbar + vbar) / std::abs(k * lambda_max);
            const double bound = kfac * L_T * (decay * e0 + tail);
            const double sharp = L_Tk * (decay * e0 + tail);
            worst = std::max(worst, err(i) / (bound + integration_floor));
            worst_sharp = std::max(worst_sharp, err(i) / (sharp + integration_floor));
        }
        p.bound_ratio = worst;
        p.bound_ratio_sharp = worst_sharp;
        out.push_back(p);
    }
    return out;
}

inline void write_sweep_csv(std::ostream &os, const std::vector<SweepPoint> &pts) {
    os << "k,convergence_time,steady_state_error\n";
    for (const SweepPoint &p : pts) {
        os << format_double(p.k) << ',' << format_optional_time(p.convergence_time) << ','
           << format_double(p.steady_state_error) << '\n';
    }
}

// -----------------------------------------------------------------------------
// Generalization map
// -----------------------------------------------------------------------------

struct GenMapCell {
    Vector x0;
    double rmse = 0.0;
    bool diverged = false;
};

/// Regular `n1 x n2` grid of initial conditions over a two-dimensional box,
/// endpoints included; a resolution of 1 uses the box centre on that axis.
inline std::vector<Vector> initial_condition_grid(const Box &box, int n1, int n2) {
    if (box.lo.size() != 2 || n1 < 1 || n2 < 1) {
        throw ConfigError("genmap.resolution", "needs a 2-D box and positive resolution");
    }
    auto axis = [&](int i, int n, int j) {
        if (n == 1) {
            return 0.5 * (box.lo(i) + box.hi(i));
        }
        return box.lo(i) + (box.hi(i) - box.lo(i)) * j / (n - 1);
    };
    std::vector<Vector> out;
    for (int a = 0; a < n1; ++a) {
        for (int b = 0; b < n2; ++b) {
            Vector x(2);
            x << axis(0, n1, a), axis(1, n2, b);
            out.push_back(x);
        }
    }
    return out;
}

/// Noiseless RMSE of the observer from each initial condition.
inline std::vector<GenMapCell> generalization_map(const AnyObserver &obs, const SystemSpec &sys,
                                                  const std::vector<Vector> &initial_conditions,
                                                  const TimeGrid &grid, double warmup = 0.0) {
    std::vector<GenMapCell> out;
    Rng unused = make_rng(0);
    for (const Vector &x0 : initial_conditions) {
        GenMapCell cell{x0, 0.0, false};
        try {
            const Trajectory truth =
                simulate_system(sys, x0, grid, NoiseSpec::none(), ExcitationSpec::none(), unused);
            cell.rmse = rmse(truth, estimate_states(obs, truth, &sys), warmup);
            cell.diverged = !std::isfinite(cell.rmse);
        } catch (const DivergenceError &) {
            cell.diverged = true;
        }
        if (cell.diverged) {
            cell.rmse = std::numeric_limits<double>::quiet_NaN();
        }
        out.push_back(std::move(cell));
    }
    return out;
}

inline void write_genmap_csv(std::ostream &os, const std::vector<GenMapCell> &cells) {
    os << "x1_0,x2_0,rmse\n";
    for (const GenMapCell &c : cells) {
        os << format_double(c.x0(0)) << ',' << format_double(c.x0(1)) << ','
           << format_double(c.rmse) << '\n';
    }
}

// -----------------------------------------------------------------------------
// Lipschitz error-bound report
// -----------------------------------------------------------------------------

struct ErrorBoundReport {
    double lipschitz_l = 0.0;
    double empirical_eps_bar = 0.0;
    TimeGrid grid;
    Vector observed_error; ///< |xhat - x| on the first dataset trajectory
    Vector bound_curve;    ///< l |z - T(x)| + eps_bar; empty without a forward map
};

/// l bounds the Lipschitz constant of T*; eps_bar is max |T*(T(x)) - x| over
/// the dataset states when T is available, otherwise the largest error over
/// the final 20% of each trajectory. `forward_map` overrides T.
inline ErrorBoundReport
error_bound_report(const KklObserver &obs, const Dataset &data,
                   const std::function<Vector(const Vector &)> &forward_map = {}) {
    if (data.size() == 0) {
        throw ConfigError("dataset", "dataset is empty");
    }
    ErrorBoundReport rep;
    rep.grid = data.grid;
    rep.lipschitz_l = lipschitz_upper_bound(obs.tstar.spec, obs.tstar.params);
    std::function<Vector(const Vector &)> T = forward_map;
    if (!T && obs.t_fwd) {
        T = [&](const Vector &x) { return (*obs.t_fwd)(x); };
    }

    double eps = 0.0;
    for (const Trajectory &traj : data.trajectories) {
        if (T) {
            for (long k = 0; k < traj.rows(); ++k) {
                const Vector x = traj.state(k);
                eps = std::max(eps, (obs.tstar(T(x)) - x).norm());
            }
        } else {
            const ObserverRun run =
                run_observer(obs, *traj.outputs, Vector::Zero(obs.d_z()), traj.grid);
            const Vector err = error_norms(traj, run.estimate);
            const long tail = std::max<long>(1, err.size() / 5);
            eps = std::max(eps, err.tail(tail).maxCoeff());
        }
    }
    rep.empirical_eps_bar = eps;

    const Trajectory &first = data.trajectories.front();
    const ObserverRun run = run_observer(obs, *first.outputs, Vector::Zero(obs.d_z()), first.grid);
    rep.observed_error = error_norms(first, run.estimate);
    if (T) {
        rep.bound_curve.resize(first.rows());
        for (long k = 0; k < first.rows(); ++k) {
            rep.bound_curve(k) =
                rep.lipschitz_l * (run.latent.state(k) - T(first.state(k))).norm() + eps;
        }
    }
    return rep;
}

inline void write_bound_csv(std::ostream &os, const ErrorBoundReport &rep) {
    os << "t,observed_error,bound\n";
    for (long k = 0; k < rep.observed_error.size(); ++k) {
        os << format_double(rep.grid.time(k)) << ',' << format_double(rep.observed_error(k))
           << ','
           << (rep.bound_curve.size() > 0 ? format_double(rep.bound_curve(k))
                                          : std::string("nan"))
           << '\n';
    }
}

} // namespace odekkl
