#include <odekkl/integrate.hpp>
#include <odekkl/systems.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace odekkl;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) {
        out(i++) = x;
    }
    return out;
}

const Vector no_input{};

} // namespace

TEST(Example1, DriftAtOrigin) {
    const SystemSpec s = make_example1();
    EXPECT_TRUE(s.drift(0.0, vec({0, 0}), no_input).isApprox(vec({0, 1})));
}

TEST(Example1, OutputIsFirstState) {
    EXPECT_DOUBLE_EQ(make_example1().h(vec({3, -1}))(0), 3.0);
}

TEST(Example1, DriftByHand) {
    const double half_pi = std::numbers::pi / 2;
    const Vector d = make_example1().f(vec({half_pi, 0}));
    EXPECT_NEAR(d(0), 1.0, 1e-15);
    EXPECT_NEAR(d(1), 1.0 - half_pi, 1e-15);
}

TEST(Example1, DimensionsAndDomain) {
    const SystemSpec s = make_example1();
    EXPECT_EQ(s.n_x, 2);
    EXPECT_EQ(s.n_y, 1);
    EXPECT_TRUE(s.domain.lo.isApprox(vec({-5, -5})));
    EXPECT_TRUE(s.domain.hi.isApprox(vec({5, 5})));
    ASSERT_TRUE(s.linear.has_value());
    EXPECT_FALSE(s.linear_is_exact);
}

TEST(VanDerPol, OriginIsEquilibrium) {
    EXPECT_TRUE(make_vanderpol().f(vec({0, 0})).isZero());
}

TEST(VanDerPol, DriftByHand) {
    EXPECT_TRUE(make_vanderpol().f(vec({1, 1})).isApprox(vec({1, -1})));
}

TEST(VanDerPol, OutputAndDomain) {
    const SystemSpec s = make_vanderpol();
    EXPECT_DOUBLE_EQ(s.h(vec({0.5, -0.5}))(0), 0.5);
    EXPECT_TRUE(s.domain.hi.isApprox(vec({1, 1})));
}

TEST(Duffing, DriftCases) {
    const SystemSpec s = make_duffing();
    EXPECT_TRUE(s.f(vec({1, 0})).isApprox(vec({0, -1})));
    EXPECT_TRUE(s.f(vec({0, 2})).isApprox(vec({8, 0})));
}

TEST(Duffing, InputEntersSecondState) {
    const SystemSpec s = make_duffing();
    EXPECT_TRUE(s.input_map(vec({0.3, 0.2})).isApprox(vec({0, 1})));
    EXPECT_TRUE(s.drift(0.0, vec({0, 0}), vec({2})).isApprox(vec({0, 2})));
}

TEST(Duffing, ConfigurableDomain) {
    const SystemSpec s = make_duffing(Box::symmetric(2, 3.0));
    EXPECT_TRUE(s.domain.hi.isApprox(vec({3, 3})));
}

TEST(Duffing, QuantityConservedAlongTrajectory) {
    const SystemSpec s = make_duffing();
    const Trajectory tr =
        solve_ivp([&](double t, const Vector &x) { return s.drift(t, x, no_input); },
                  vec({-0.5, 0.5}), TimeGrid(0, 50, 0.02));
    const Vector x1 = tr.states.col(0);
    const Vector x2 = tr.states.col(1);
    const Eigen::ArrayXd e = x1.array().square() + 0.5 * x2.array().pow(4);
    EXPECT_LT((e - e(0)).abs().maxCoeff(), 1e-6);
}

TEST(Linear, ScalarDriftAndOutput) {
    const SystemSpec s = make_linear(Matrix::Constant(1, 1, -1.0), Matrix::Ones(1, 1));
    EXPECT_DOUBLE_EQ(s.f(vec({2}))(0), -2.0);
    EXPECT_DOUBLE_EQ(s.h(vec({2}))(0), 2.0);
    EXPECT_TRUE(s.linear_is_exact);
}

TEST(Linear, Rotation) {
    Matrix A(2, 2);
    A << 0, 1, -1, 0;
    const SystemSpec s = make_linear(A, Matrix::Identity(2, 2));
    EXPECT_TRUE(s.f(vec({1, 0})).isApprox(vec({0, -1})));
}

TEST(Linear, ScalarDecayMatchesExponential) {
    const SystemSpec s = make_linear(Matrix::Constant(1, 1, -1.0), Matrix::Ones(1, 1));
    const TimeGrid g(0, 5, 0.02);
    const Trajectory tr =
        solve_ivp([&](double t, const Vector &x) { return s.drift(t, x, no_input); }, vec({1}), g);
    for (long k = 0; k < g.n_points(); ++k) {
        EXPECT_NEAR(tr.states(k, 0), std::exp(-g.time(k)), 1e-9);
    }
}

TEST(Linear, MatchesClosedFormMatrixExponential) {
    // A = -I + 2 J, so exp(A t) = e^{-t} [[cos 2t, sin 2t], [-sin 2t, cos 2t]].
    Matrix A(2, 2);
    A << -1, 2, -2, -1;
    const SystemSpec s = make_linear(A, Matrix::Identity(2, 2));
    const TimeGrid g(0, 10, 0.02);
    const Vector x0 = vec({0.7, -0.4});
    const Trajectory tr =
        solve_ivp([&](double t, const Vector &x) { return s.drift(t, x, no_input); }, x0, g);
    for (long k = 0; k < g.n_points(); ++k) {
        const double t = g.time(k);
        Matrix E(2, 2);
        E << std::cos(2 * t), std::sin(2 * t), -std::sin(2 * t), std::cos(2 * t);
        const Vector exact = std::exp(-t) * E * x0;
        EXPECT_LE((tr.state(k) - exact).norm(), 1e-6 * x0.norm()) << "t=" << t;
    }
}

TEST(Linear, DimensionMismatchRejected) {
    EXPECT_THROW(make_linear(Matrix::Zero(2, 3), Matrix::Zero(1, 2)), DimensionError);
    EXPECT_THROW(make_linear(Matrix::Zero(2, 2), Matrix::Zero(1, 3)), DimensionError);
}

TEST(Catalog, LookupByName) {
    EXPECT_EQ(make_system("vanderpol").name, "vanderpol");
    EXPECT_EQ(make_system("duffing").n_u, 1);
    EXPECT_EQ(make_system("example1").name, "example1");
    EXPECT_THROW(make_system("lorenz"), ConfigError);
}

TEST(Noise, NoneGivesZeros) {
    Rng rng = make_rng(1);
    EXPECT_TRUE(sample_noise(NoiseSpec::none(), 3, rng).isZero());
}

TEST(Noise, GaussianStandardDeviation) {
    Rng rng = make_rng(2);
    const Vector v = sample_noise(NoiseSpec::gaussian(0.0, 0.5), 100000, rng);
    const double mean = v.mean();
    const double sd = std::sqrt((v.array() - mean).square().sum() / (v.size() - 1));
    EXPECT_NEAR(sd, 0.5, 0.01);
}

TEST(Noise, UniformSupportAndMean) {
    Rng rng = make_rng(3);
    const Vector v = sample_noise(NoiseSpec::uniform(-3.0, 3.0), 100000, rng);
    EXPECT_GE(v.minCoeff(), -3.0);
    EXPECT_LE(v.maxCoeff(), 3.0);
    EXPECT_NEAR(v.mean(), 0.0, 0.05);
}

TEST(Noise, TruncatedGaussianStaysWithinFourSigma) {
    Rng rng = make_rng(4);
    const NoiseSpec n = NoiseSpec::truncated_gaussian(0.1, 0.2);
    const Vector v = sample_noise(n, 50000, rng);
    EXPECT_LE((v.array() - 0.1).abs().maxCoeff(), 0.8 + 1e-15);
    EXPECT_DOUBLE_EQ(n.bound(), 0.1 + 0.8);
}

TEST(Noise, SameSeedSameSequence) {
    Rng a = make_rng(11);
    Rng b = make_rng(11);
    const NoiseSpec n = NoiseSpec::gaussian(0.0, 1.0);
    EXPECT_EQ(sample_noise(n, 64, a), sample_noise(n, 64, b));
}

TEST(Noise, InvalidParametersRejected) {
    EXPECT_THROW(NoiseSpec::gaussian(0.0, -0.1), ConfigError);
    EXPECT_THROW(NoiseSpec::uniform(1.0, -1.0), ConfigError);
    Rng rng = make_rng(0);
    EXPECT_THROW(sample_noise(NoiseSpec::gaussian(0, 1), 0, rng), DimensionError);
}

TEST(Noise, LabelsAreCsvSafe) {
    EXPECT_EQ(NoiseSpec::gaussian(0.0, 0.5).label(), "gaussian(0;0.5)");
    EXPECT_EQ(NoiseSpec::uniform(-3.0, 3.0).label(), "uniform(-3;3)");
    EXPECT_EQ(NoiseSpec::none().label(), "none");
}

TEST(Excitation, CosineValue) {
    const ExcitationSpec e = ExcitationSpec::cosine(2.0, 12.0);
    EXPECT_NEAR(e.value(0.1, 1)(0), 2.0 * std::cos(1.2), 1e-15);
    EXPECT_EQ(ExcitationSpec::none().value(1.0, 1).size(), 0);
    EXPECT_THROW(ExcitationSpec::cosine(1.0, -1.0), ConfigError);
}

TEST(InitialConditions, UniformInsideBox) {
    Rng rng = make_rng(5);
    const Box box = Box::symmetric(2, 1.0);
    for (int i = 0; i < 1000; ++i) {
        EXPECT_TRUE(box.contains(sample_initial_condition(box, rng)));
    }
}

TEST(InitialConditions, GaussianCentredOnBox) {
    Rng rng = make_rng(6);
    const Box box{vec({1, -2}), vec({3, 2})};
    Vector mean = Vector::Zero(2);
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        mean += sample_initial_condition(box, rng, InitialDistribution::gaussian);
    }
    mean /= n;
    EXPECT_NEAR(mean(0), 2.0, 0.02);
    EXPECT_NEAR(mean(1), 0.0, 0.03);
}
