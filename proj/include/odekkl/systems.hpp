// Benchmark dynamical systems, noise models and excitation signals.
#pragma once

#include <odekkl/core.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>

namespace odekkl {

/// Axis-aligned box in state space.
struct Box {
    Vector lo;
    Vector hi;

    static Box symmetric(int dim, double half_width) {
        return {Vector::Constant(dim, -half_width),
                Vector::Constant(dim, half_width)};
    }

    bool contains(const Vector &x) const {
        return (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all();
    }
};

/// Known linear structure: exact dynamics for linear systems, or the known
/// linear part (A, C) of a partially known system.
struct LinearPart {
    Matrix A;
    Matrix C;
};

/// A dynamical system xdot = f(x) + g(x) u, y = h(x).
struct SystemSpec {
    std::string name;
    int n_x = 0;
    int n_y = 0;
    int n_u = 0;
    /// (t, x, u) -> dx/dt. u may be empty for autonomous evaluation.
    std::function<Vector(double, const Vector &, const Vector &)> drift;
    std::function<Vector(const Vector &)> output;
    /// x -> g(x), an n_x by n_u gain. Empty when the system takes no input.
    std::function<Matrix(const Vector &)> input_map;
    Box domain;
    std::optional<LinearPart> linear;
    /// True when `linear` describes the complete dynamics.
    bool linear_is_exact = false;

    Vector f(const Vector &x) const { return drift(0.0, x, Vector{}); }
    Vector h(const Vector &x) const { return output(x); }
};

// -----------------------------------------------------------------------------
// Catalog
// -----------------------------------------------------------------------------

/// xdot1 = x2 + sin x1, xdot2 = -x1 + cos x2, y = x1.
inline SystemSpec make_example1() {
    SystemSpec s;
    s.name = "example1";
    s.n_x = 2;
    s.n_y = 1;
    s.drift = [](double, const Vector &x, const Vector &) {
        Vector dx(2);
        dx << x(1) + std::sin(x(0)), -x(0) + std::cos(x(1));
        return dx;
    };
    s.output = [](const Vector &x) { return Vector::Constant(1, x(0)); };
    s.domain = Box::symmetric(2, 5.0);
    LinearPart lin;
    lin.A.resize(2, 2);
    lin.A << 0, 1, -1, 0;
    lin.C.resize(1, 2);
    lin.C << 1, 0;
    s.linear = lin;
    return s;
}

/// Van der Pol oscillator with mu = 1, y = x1.
inline SystemSpec make_vanderpol() {
    SystemSpec s;
    s.name = "vanderpol";
    s.n_x = 2;
    s.n_y = 1;
    s.drift = [](double, const Vector &x, const Vector &) {
        Vector dx(2);
        dx << x(1), (1.0 - x(0) * x(0)) * x(1) - x(0);
        return dx;
    };
    s.output = [](const Vector &x) { return Vector::Constant(1, x(0)); };
    s.domain = Box::symmetric(2, 1.0);
    return s;
}

/// Reverse Duffing oscillator xdot1 = x2^3, xdot2 = -x1 + u, y = x1.
/// x1^2 + x2^4 is conserved when u = 0.
inline SystemSpec make_duffing(Box domain = Box::symmetric(2, 1.0)) {
    SystemSpec s;
    s.name = "duffing";
    s.n_x = 2;
    s.n_y = 1;
    s.n_u = 1;
    s.drift = [](double, const Vector &x, const Vector &u) {
        Vector dx(2);
        dx << x(1) * x(1) * x(1), -x(0) + (u.size() > 0 ? u(0) : 0.0);
        return dx;
    };
    s.output = [](const Vector &x) { return Vector::Constant(1, x(0)); };
    s.input_map = [](const Vector &) {
        Matrix g(2, 1);
        g << 0, 1;
        return g;
    };
    s.domain = std::move(domain);
    return s;
}

/// xdot = A x, y = C x. Oracle system for the Sylvester-equation checks.
inline SystemSpec make_linear(const Matrix &A, const Matrix &C,
                              std::optional<Box> domain = std::nullopt) {
    if (A.rows() != A.cols()) {
        throw DimensionError("make_linear: A must be square");
    }
    if (C.cols() != A.rows() || C.rows() < 1) {
        throw DimensionError("make_linear: C must have as many columns as A");
    }
    SystemSpec s;
    s.name = "linear";
    s.n_x = static_cast<int>(A.rows());
    s.n_y = static_cast<int>(C.rows());
    s.drift = [A](double, const Vector &x, const Vector &) -> Vector {
        return A * x;
    };
    s.output = [C](const Vector &x) -> Vector { return C * x; };
    s.domain = domain.value_or(Box::symmetric(s.n_x, 1.0));
    s.linear = LinearPart{A, C};
    s.linear_is_exact = true;
    return s;
}

/// Dynamics including the input channel: f(x) + g(x) u.
inline Vector system_rhs(const SystemSpec &sys, double t, const Vector &x,
                         const Vector &u) {
    return sys.drift(t, x, u);
}

// -----------------------------------------------------------------------------
// Noise
// -----------------------------------------------------------------------------

enum class NoiseKind { none, gaussian, truncated_gaussian, uniform };
enum class NoiseTarget { measurement, process };

/// Measurement or process noise. For truncated_gaussian, samples are
/// restricted to mean +/- 4 std.
struct NoiseSpec {
    NoiseKind kind = NoiseKind::none;
    double a = 0.0; ///< mean (gaussian) or lower bound (uniform)
    double b = 0.0; ///< std (gaussian) or upper bound (uniform)
    NoiseTarget target = NoiseTarget::measurement;

    static constexpr double truncation_sigmas = 4.0;

    static NoiseSpec none() { return {}; }
    static NoiseSpec gaussian(double mean, double std_dev,
                              NoiseTarget target = NoiseTarget::measurement) {
        if (!(std_dev >= 0.0)) {
            throw ConfigError("noise.std", "must be >= 0");
        }
        return {NoiseKind::gaussian, mean, std_dev, target};
    }
    static NoiseSpec truncated_gaussian(double mean, double std_dev,
                                        NoiseTarget target = NoiseTarget::measurement) {
        auto n = gaussian(mean, std_dev, target);
        n.kind = NoiseKind::truncated_gaussian;
        return n;
    }
    static NoiseSpec uniform(double lo, double hi,
                             NoiseTarget target = NoiseTarget::measurement) {
        if (!(lo <= hi)) {
            throw ConfigError("noise.lo", "uniform noise requires lo <= hi");
        }
        return {NoiseKind::uniform, lo, hi, target};
    }

    bool is_none() const {
        return kind == NoiseKind::none ||
               (kind != NoiseKind::uniform && a == 0.0 && b == 0.0) ||
               (kind == NoiseKind::uniform && a == 0.0 && b == 0.0);
    }

    /// Per-component sup bound of a sample; infinite for untruncated gaussians.
    double bound() const {
        switch (kind) {
        case NoiseKind::none:
            return 0.0;
        case NoiseKind::gaussian:
            return b == 0.0 ? std::abs(a) : std::numeric_limits<double>::infinity();
        case NoiseKind::truncated_gaussian:
            return std::abs(a) + truncation_sigmas * b;
        case NoiseKind::uniform:
            return std::max(std::abs(a), std::abs(b));
        }
        return 0.0;
    }

    std::string label() const {
        auto num = [](double v) {
            std::string s = std::to_string(v);
            s.erase(s.find_last_not_of('0') + 1);
            if (!s.empty() && s.back() == '.') {
                s.pop_back();
            }
            return s;
        };
        switch (kind) {
        case NoiseKind::none:
            return "none";
        case NoiseKind::gaussian:
            return "gaussian(" + num(a) + ";" + num(b) + ")";
        case NoiseKind::truncated_gaussian:
            return "truncated_gaussian(" + num(a) + ";" + num(b) + ")";
        case NoiseKind::uniform:
            return "uniform(" + num(a) + ";" + num(b) + ")";
        }
        return "none";
    }
};

/// i.i.d. vector of `dim` samples from `spec`; zeros for `none`.
inline Vector sample_noise(const NoiseSpec &spec, int dim, Rng &rng) {
    if (dim < 1) {
        throw DimensionError("sample_noise: dim must be >= 1");
    }
    Vector v = Vector::Zero(dim);
    switch (spec.kind) {
    case NoiseKind::none:
        break;
    case NoiseKind::gaussian: {
        std::normal_distribution<double> dist(spec.a, spec.b);
        for (int i = 0; i < dim; ++i) {
            v(i) = spec.b == 0.0 ? spec.a : dist(rng);
        }
        break;
    }
    case NoiseKind::truncated_gaussian: {
        if (spec.b == 0.0) {
            v.setConstant(spec.a);
            break;
        }
        std::normal_distribution<double> dist(0.0, 1.0);
        for (int i = 0; i < dim; ++i) {
            double s;
            do {
                s = dist(rng);
            } while (std::abs(s) > NoiseSpec::truncation_sigmas);
            v(i) = spec.a + spec.b * s;
        }
        break;
    }
    case NoiseKind::uniform: {
        std::uniform_real_distribution<double> dist(spec.a, spec.b);
        for (int i = 0; i < dim; ++i) {
            v(i) = spec.a == spec.b ? spec.a : dist(rng);
        }
        break;
    }
    }
    return v;
}

// -----------------------------------------------------------------------------
// Excitation and initial conditions
// -----------------------------------------------------------------------------

/// u(t) = amplitude * cos(frequency * t), or nothing.
struct ExcitationSpec {
    bool active = false;
    double amplitude = 0.0;
    double frequency = 0.0;

    static ExcitationSpec none() { return {}; }
    static ExcitationSpec cosine(double amplitude, double frequency) {
        if (!(frequency >= 0.0)) {
            throw ConfigError("excitation.frequency", "must be >= 0");
        }
        return {true, amplitude, frequency};
    }

    Vector value(double t, int n_u) const {
        if (!active || n_u == 0) {
            return Vector{};
        }
        return Vector::Constant(n_u, amplitude * std::cos(frequency * t));
    }
};

enum class InitialDistribution { uniform, gaussian };

/// Draws an initial condition from `box`. The gaussian option is centred on the
/// box with a standard deviation of half the half-width per axis.
inline Vector sample_initial_condition(const Box &box, Rng &rng,
                                       InitialDistribution dist = InitialDistribution::uniform) {
    Vector x(box.lo.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        if (dist == InitialDistribution::uniform) {
            std::uniform_real_distribution<double> u(box.lo(i), box.hi(i));
            x(i) = box.lo(i) == box.hi(i) ? box.lo(i) : u(rng);
        } else {
            const double centre = 0.5 * (box.lo(i) + box.hi(i));
            const double sd = 0.25 * (box.hi(i) - box.lo(i));
            std::normal_distribution<double> g(centre, sd);
            x(i) = sd == 0.0 ? centre : g(rng);
        }
    }
    return x;
}

/// Catalog lookup by config name. `linear` needs make_linear directly.
inline SystemSpec make_system(const std::string &name) {
    if (name == "example1") {
        return make_example1();
    }
    if (name == "vanderpol") {
        return make_vanderpol();
    }
    if (name == "duffing") {
        return make_duffing();
    }
    throw ConfigError("system", "unknown system '" + name + "'");
}

} // namespace odekkl
