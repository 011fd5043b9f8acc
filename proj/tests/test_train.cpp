#include <odekkl/eval.hpp>
#include <odekkl/train.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

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

Matrix rotation() {
    Matrix A(2, 2);
    A << 0, 1, -1, 0;
    return A;
}

Matrix first_state() {
    Matrix C(1, 2);
    C << 1, 0;
    return C;
}

KklObserver tiny_kkl(std::uint64_t seed, bool with_forward) {
    Rng rng = make_rng(seed);
    return KklObserver::create(2, 1, {5}, with_forward, Activation::tanh, rng,
                               vec({-0.8, -1.3, -2.1}));
}

/// Short Van der Pol dataset with noisy outputs so every loss term is active.
Dataset tiny_dataset(int n, double tf, double h, std::uint64_t seed = 3) {
    Rng rng = make_rng(seed);
    return generate_dataset(make_vanderpol(), n, TimeGrid(0, tf, h), rng,
                            NoiseSpec::gaussian(0, 0.1));
}

/// Central finite-difference gradient of `f` at `p`.
template <typename Fn>
Vector fd_gradient(Fn &&f, const Vector &p, double eps = 1e-6) {
    Vector g(p.size());
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        Vector q = p;
        q(i) += eps;
        const double up = f(q);
        q(i) -= 2 * eps;
        g(i) = (up - f(q)) / (2 * eps);
    }
    return g;
}

double max_rel_error(const Vector &a, const Vector &b) {
    return (a - b).cwiseAbs().maxCoeff() / std::max(1e-3, b.cwiseAbs().maxCoeff());
}

/// Dataset whose states and outputs are identically zero.
Dataset zero_dataset(int n, const TimeGrid &g) {
    Dataset ds{g, {}, NoiseSpec::none()};
    for (int i = 0; i < n; ++i) {
        ds.trajectories.push_back(Trajectory{g, Matrix::Zero(g.n_points(), 2),
                                             Matrix::Zero(g.n_points(), 1), std::nullopt});
    }
    return ds;
}

void check_gradient(const KklObserver &base, const Dataset &ds, const TrainConfig &cfg,
                    const SystemSpec *sys, double tol) {
    const auto batch = all_trajectories(ds);
    const GradientResult g = grad_backprop(base, batch, cfg, sys);
    KklObserver work = base;
    auto loss = [&](const Vector &p) {
        work.set_flat_params(p);
        return grad_backprop(work, batch, cfg, sys).loss.total;
    };
    const Vector fd = fd_gradient(loss, base.flat_params());
    EXPECT_LT(max_rel_error(g.gradient, fd), tol);
}

} // namespace

TEST(DatasetTest, NoiselessOutputsEqualMeasurement) {
    Rng rng = make_rng(1);
    const SystemSpec sys = make_vanderpol();
    const Dataset ds = generate_dataset(sys, 4, TimeGrid(0, 50, 0.02), rng, NoiseSpec::none());
    ASSERT_EQ(ds.size(), 4u);
    for (const Trajectory &t : ds.trajectories) {
        EXPECT_EQ(t.rows(), 2501);
        EXPECT_EQ(*t.outputs, t.states.col(0));
        EXPECT_TRUE(sys.domain.contains(t.state(0)));
    }
}

TEST(DatasetTest, NoiseOnlyOnOutputs) {
    Rng rng = make_rng(2);
    Rng clean_rng = make_rng(2);
    const SystemSpec sys = make_vanderpol();
    const TimeGrid g(0, 2, 0.02);
    const Dataset noisy = generate_dataset(sys, 1, g, rng, NoiseSpec::gaussian(0, 0.5));
    const Trajectory &t = noisy.trajectories[0];
    EXPECT_GT((*t.outputs - t.states.col(0)).norm(), 0.1);
    const Vector x0 = sample_initial_condition(sys.domain, clean_rng);
    EXPECT_EQ(t.state(0), x0);
}

TEST(DatasetTest, DeterministicAndValidated) {
    Rng a = make_rng(5);
    Rng b = make_rng(5);
    const TimeGrid g(0, 1, 0.1);
    const Dataset da = generate_dataset(make_vanderpol(), 3, g, a, NoiseSpec::uniform(-1, 1));
    const Dataset db = generate_dataset(make_vanderpol(), 3, g, b, NoiseSpec::uniform(-1, 1));
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(*da.trajectories[i].outputs, *db.trajectories[i].outputs);
    }
    EXPECT_THROW(generate_dataset(make_vanderpol(), 0, g, a, NoiseSpec::none()), ConfigError);
}

TEST(Losses, TrapezoidWeights) {
    const Vector w = trapezoid_weights(TimeGrid(0, 1, 0.25));
    EXPECT_TRUE(w.isApprox(vec({0.125, 0.25, 0.25, 0.25, 0.125})));
}

TEST(Losses, WarmupWeightsCoverTheTail) {
    const TimeGrid g(0, 1, 0.1);
    EXPECT_TRUE(loss_weights(g, 1, 0.0).isApprox(trapezoid_weights(g)));
    const Vector w = loss_weights(g, 2, 0.4);
    ASSERT_EQ(w.size(), 6);
    EXPECT_TRUE(w.isApprox(vec({0, 0, 0.1, 0.2, 0.2, 0.1})));
    EXPECT_NEAR(w.sum(), 0.6, 1e-14);
    EXPECT_THROW(loss_weights(g, 1, 1.0), ConfigError);
    EXPECT_THROW(loss_weights(g, 3, 0.0), ConfigError);
}

TEST(Losses, LagrangeZeroForIdenticalTrajectories) {
    const TimeGrid g(0, 1, 0.1);
    const Trajectory x{g, Matrix::Random(g.n_points(), 2), std::nullopt, std::nullopt};
    EXPECT_EQ(loss_lagrange(x, x), 0.0);
}

TEST(Losses, LagrangeIntegratesSquaredError) {
    // Error e(t) = (t, 2) on [0, 1]: integral of t^2 + 4 is 13/3.
    const TimeGrid g(0, 1, 0.001);
    Trajectory x{g, Matrix::Zero(g.n_points(), 2), std::nullopt, std::nullopt};
    Trajectory xh = x;
    for (long k = 0; k < g.n_points(); ++k) {
        xh.states(k, 0) = g.time(k);
        xh.states(k, 1) = 2.0;
    }
    EXPECT_NEAR(loss_lagrange(x, xh), 13.0 / 3.0, 1e-6);
}

TEST(Losses, LagrangeRejectsMismatchedGrids) {
    const Trajectory a{TimeGrid(0, 1, 0.1), Matrix::Zero(11, 2), std::nullopt, std::nullopt};
    const Trajectory b{TimeGrid(0, 1, 0.05), Matrix::Zero(21, 2), std::nullopt, std::nullopt};
    EXPECT_THROW(loss_lagrange(a, b), DimensionError);
}

TEST(Losses, RegularizedAddsEigenvalueEnergy) {
    KklObserver obs = tiny_kkl(1, false);
    obs.set_eigenvalues(vec({-1, -2, -3}));
    const TimeGrid g(0, 2, 0.1);
    const LossBreakdown lb = loss_regularized(0.5, obs, 0.1, g);
    EXPECT_DOUBLE_EQ(lb.reg, 28.0);
    EXPECT_NEAR(lb.total, 3.3, 1e-12);
    EXPECT_DOUBLE_EQ(loss_regularized(0.5, obs, 0.0, g).total, 0.5);
    EXPECT_THROW(loss_regularized(0.5, obs, -1e-3, g), ConfigError);
}

TEST(Losses, NonautoZeroForExactInversePair) {
    KklObserver obs = tiny_kkl(2, true);
    Matrix M(3, 2);
    M << 1, 0.5, -0.3, 2, 0.7, 0.1;
    obs.t_fwd = Mlp::zeros(MlpSpec({2, 3}));
    layer_weights(obs.t_fwd->spec, obs.t_fwd->params.values, 0) = M;
    obs.tstar = Mlp::zeros(MlpSpec({3, 2}));
    layer_weights(obs.tstar.spec, obs.tstar.params.values, 0) = pseudo_inverse(M);
    const TimeGrid g(0, 1, 0.1);
    const Trajectory x{g, Matrix::Random(g.n_points(), 2), std::nullopt, std::nullopt};
    const Trajectory z{g, (M * x.states.transpose()).transpose(), std::nullopt, std::nullopt};
    const LossBreakdown lb = loss_nonauto(obs, x, z);
    EXPECT_LT(lb.data, 1e-12);
    EXPECT_LT(lb.fwd, 1e-12);
}

TEST(Losses, NonautoZeroNetsGiveSignalEnergy) {
    KklObserver obs = tiny_kkl(3, true);
    obs.t_fwd = Mlp::zeros(obs.t_fwd->spec);
    obs.tstar = Mlp::zeros(obs.tstar.spec);
    const TimeGrid g(0, 1, 0.5);
    Trajectory x{g, Matrix::Ones(3, 2), std::nullopt, std::nullopt};
    Trajectory z{g, Matrix::Constant(3, 3, 2.0), std::nullopt, std::nullopt};
    const LossBreakdown lb = loss_nonauto(obs, x, z);
    EXPECT_NEAR(lb.data, 2.0, 1e-12);  // |x|^2 = 2 over one time unit
    EXPECT_NEAR(lb.fwd, 12.0, 1e-12);  // |z|^2 = 12
    EXPECT_THROW(loss_nonauto(tiny_kkl(3, false), x, z), ConfigError);
}

TEST(Losses, PdePenaltyVanishesForSylvesterImmersion) {
    const Matrix A = rotation();
    const Matrix C = first_state();
    const SystemSpec sys = make_linear(A, C);
    KklObserver obs = tiny_kkl(4, true);
    const Matrix D = obs.eigenvalues().asDiagonal();
    const Matrix T = sylvester_oracle(A, C, D, obs.F());
    obs.t_fwd = Mlp::zeros(MlpSpec({2, 3}));
    layer_weights(obs.t_fwd->spec, obs.t_fwd->params.values, 0) = T;
    const Vector x = vec({0.4, -1.1});
    EXPECT_LT(pde_penalty(obs, sys, x, C * x), 1e-12);
}

TEST(Losses, PdePenaltyByHand) {
    const SystemSpec sys = make_linear(rotation(), first_state());
    KklObserver obs = tiny_kkl(5, true);
    obs.set_eigenvalues(vec({-1, -2, -3}));
    obs.t_fwd = Mlp::zeros(obs.t_fwd->spec);
    // T = 0: residual is -F y, norm sqrt(3) |y|.
    EXPECT_NEAR(pde_penalty(obs, sys, vec({2, 0}), vec({2})), 2 * std::sqrt(3.0), 1e-12);
    // T x = (x1, x2, 0): J f = (x2, -x1, 0), D T x = (-x1, -2 x2, 0), F y = y 1.
    obs.t_fwd = Mlp::zeros(MlpSpec({2, 3}));
    Matrix M = Matrix::Zero(3, 2);
    M(0, 0) = M(1, 1) = 1;
    layer_weights(obs.t_fwd->spec, obs.t_fwd->params.values, 0) = M;
    const Vector x = vec({1, 2});
    const Vector r = vec({2 + 1 - 1, -1 + 4 - 1, -1});
    EXPECT_NEAR(pde_penalty(obs, sys, x, vec({1})), r.norm(), 1e-12);
}

TEST(Losses, PdePenaltyNeedsForwardMap) {
    EXPECT_THROW(pde_penalty(tiny_kkl(6, false), make_vanderpol(), vec({0, 0}), vec({0})),
                 ConfigError);
}

TEST(BackpropGradient, LossMatchesDirectEvaluation) {
    const KklObserver obs = tiny_kkl(7, false);
    const Dataset ds = tiny_dataset(3, 1.0, 0.05);
    TrainConfig cfg;
    cfg.gamma = 0.01;
    const GradientResult g = grad_backprop(obs, all_trajectories(ds), cfg);
    double data = 0.0;
    for (const Trajectory &t : ds.trajectories) {
        const ObserverRun run = run_observer(obs, *t.outputs, Vector::Zero(3), t.grid);
        data += loss_lagrange(t, run.estimate);
    }
    data /= 3.0;
    EXPECT_NEAR(g.loss.data, data, 1e-10);
    EXPECT_NEAR(g.loss.total, loss_regularized(data, obs, 0.01, ds.grid).total, 1e-10);
}

TEST(BackpropGradient, MatchesFiniteDifferencesLagrange) {
    TrainConfig cfg;
    cfg.gamma = 0.003;
    check_gradient(tiny_kkl(8, false), tiny_dataset(3, 0.4, 0.05), cfg, nullptr, 1e-5);
}

TEST(BackpropGradient, MatchesFiniteDifferencesWithStride) {
    TrainConfig cfg;
    cfg.loss_stride = 2;
    check_gradient(tiny_kkl(9, false), tiny_dataset(2, 0.4, 0.05), cfg, nullptr, 1e-5);
}

TEST(BackpropGradient, MatchesFiniteDifferencesNonauto) {
    TrainConfig cfg;
    cfg.loss_mode = LossMode::nonauto;
    check_gradient(tiny_kkl(10, true), tiny_dataset(2, 0.4, 0.05), cfg, nullptr, 1e-5);
}

TEST(BackpropGradient, MatchesFiniteDifferencesWithPde) {
    TrainConfig cfg;
    cfg.pde_weight = 0.5;
    const SystemSpec sys = make_vanderpol();
    check_gradient(tiny_kkl(11, true), tiny_dataset(2, 0.4, 0.05), cfg, &sys, 1e-5);
}

TEST(BackpropGradient, RegularizationOnlyPushesTowardsSlowerEigenvalues) {
    const TimeGrid g(0, 1, 0.1);
    const Dataset ds = zero_dataset(2, g);
    KklObserver obs = tiny_kkl(12, false);
    obs.tstar = Mlp::zeros(obs.tstar.spec);
    TrainConfig cfg;
    cfg.gamma = 0.2;
    const GradientResult r = grad_backprop(obs, all_trajectories(ds), cfg);
    const Vector lambda = obs.eigenvalues();
    const Vector expected = (cfg.gamma * g.horizon() * 2.0 * lambda.array().square()).matrix();
    EXPECT_TRUE(r.gradient.head(3).isApprox(expected, 1e-12));
    EXPECT_TRUE((r.gradient.head(3).array() > 0).all());
    EXPECT_TRUE(r.gradient.tail(r.gradient.size() - 3).isZero());
}

TEST(BackpropGradient, ZeroSignalGivesZeroGradient) {
    const Dataset ds = zero_dataset(2, TimeGrid(0, 1, 0.1));
    KklObserver obs = tiny_kkl(13, false);
    obs.tstar = Mlp::zeros(obs.tstar.spec);
    const GradientResult r = grad_backprop(obs, all_trajectories(ds), TrainConfig{});
    EXPECT_TRUE(r.gradient.isZero());
    EXPECT_EQ(r.loss.total, 0.0);
}

TEST(BackpropGradient, FrozenEigenvalues) {
    TrainConfig cfg;
    cfg.learn_eigenvalues = false;
    cfg.gamma = 1.0;
    const GradientResult r =
        grad_backprop(tiny_kkl(14, false), all_trajectories(tiny_dataset(2, 0.4, 0.05)), cfg);
    EXPECT_TRUE(r.gradient.head(3).isZero());
    EXPECT_FALSE(r.gradient.tail(r.gradient.size() - 3).isZero());
}

TEST(BackpropGradient, MatchesFiniteDifferencesWithWarmup) {
    TrainConfig cfg;
    cfg.loss_warmup = 0.2;
    cfg.gamma = 0.002;
    check_gradient(tiny_kkl(27, false), tiny_dataset(2, 0.4, 0.05), cfg, nullptr, 1e-5);
}

TEST(BackpropGradient, WarmupDropsEarlyError) {
    // Outputs start at zero and the loss ignores t < 0.5: a decoder error that
    // is confined to t < 0.5 leaves the loss at zero.
    const TimeGrid g(0, 1, 0.05);
    Dataset ds{g, {}, NoiseSpec::none()};
    Trajectory t{g, Matrix::Zero(g.n_points(), 2), Matrix::Zero(g.n_points(), 1), std::nullopt};
    for (long k = 0; k < 10; ++k) {
        t.states(k, 0) = 1.0;
    }
    ds.trajectories.push_back(t);
    KklObserver obs = tiny_kkl(28, false);
    obs.tstar = Mlp::zeros(obs.tstar.spec);
    TrainConfig cfg;
    EXPECT_GT(grad_backprop(obs, all_trajectories(ds), cfg).loss.data, 0.4);
    cfg.loss_warmup = 0.5;
    EXPECT_EQ(grad_backprop(obs, all_trajectories(ds), cfg).loss.data, 0.0);
}

TEST(BackpropGradient, StrideMustDivideSteps) {
    TrainConfig cfg;
    cfg.loss_stride = 3;
    EXPECT_THROW(grad_backprop(tiny_kkl(15, false), all_trajectories(tiny_dataset(1, 0.4, 0.05)),
                               cfg),
                 ConfigError);
}

TEST(BackpropGradient, CoarseQuadratureCloseToFull) {
    const KklObserver obs = tiny_kkl(16, false);
    const Dataset ds = tiny_dataset(3, 10.0, 0.02);
    TrainConfig full;
    TrainConfig coarse;
    coarse.loss_stride = 5;
    const double a = grad_backprop(obs, all_trajectories(ds), full).loss.data;
    const double b = grad_backprop(obs, all_trajectories(ds), coarse).loss.data;
    EXPECT_NEAR(b / a, 1.0, 0.02);
}

TEST(AdjointGradient, TerminalConditions) {
    const KklObserver obs = tiny_kkl(17, false);
    const Dataset ds = tiny_dataset(2, 1.0, 0.02);
    AdjointTrace trace;
    grad_adjoint(obs, all_trajectories(ds), TrainConfig{}, nullptr, &trace);
    EXPECT_TRUE(trace.mu_final.isZero());
    EXPECT_TRUE(trace.p.bottomRows(1).isZero());
    EXPECT_FALSE(trace.p.topRows(1).isZero());
}

TEST(AdjointGradient, AgreesWithBackprop) {
    const KklObserver obs = tiny_kkl(18, false);
    const Dataset ds = tiny_dataset(3, 2.0, 0.01);
    TrainConfig cfg;
    cfg.gamma = 0.01;
    const auto batch = all_trajectories(ds);
    const Vector a = grad_adjoint(obs, batch, cfg).gradient;
    const Vector b = grad_backprop(obs, batch, cfg).gradient;
    EXPECT_GT(a.dot(b) / (a.norm() * b.norm()), 0.9999);
    EXPECT_LT((a - b).norm() / b.norm(), 1e-2);
}

TEST(AdjointGradient, ZeroSignalGivesZeroGradient) {
    const Dataset ds = zero_dataset(2, TimeGrid(0, 1, 0.1));
    KklObserver obs = tiny_kkl(19, false);
    obs.tstar = Mlp::zeros(obs.tstar.spec);
    EXPECT_TRUE(grad_adjoint(obs, all_trajectories(ds), TrainConfig{}).gradient.isZero());
}

TEST(AdjointGradient, RejectsStride) {
    TrainConfig cfg;
    cfg.gradient_mode = GradientMode::adjoint;
    cfg.loss_stride = 5;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(LuenbergerGradient, MatchesFiniteDifferences) {
    Rng rng = make_rng(20);
    LuenbergerObserver obs = LuenbergerObserver::create(rotation(), first_state(), vec({2, 1}),
                                                        {5}, Activation::tanh, rng);
    Rng drng = make_rng(21);
    const Dataset ds = generate_dataset(make_example1(), 2, TimeGrid(0, 0.4, 0.05), drng,
                                        NoiseSpec::none());
    const auto batch = all_trajectories(ds);
    const GradientResult g = grad_backprop(obs, batch);
    LuenbergerObserver work = obs;
    auto loss = [&](const Vector &p) {
        work.ghat.params.values = p;
        return grad_backprop(work, batch).loss.total;
    };
    EXPECT_LT(max_rel_error(g.gradient, fd_gradient(loss, obs.ghat.params.values)), 1e-5);
}

TEST(LuenbergerGradient, MatchesFiniteDifferencesWithWarmup) {
    Rng rng = make_rng(29);
    LuenbergerObserver obs = LuenbergerObserver::create(rotation(), first_state(), vec({2, 1}),
                                                        {5}, Activation::tanh, rng);
    Rng drng = make_rng(30);
    const Dataset ds = generate_dataset(make_example1(), 2, TimeGrid(0, 0.4, 0.05), drng,
                                        NoiseSpec::none());
    const auto batch = all_trajectories(ds);
    TrainConfig cfg;
    cfg.loss_warmup = 0.15;
    const GradientResult g = grad_backprop(obs, batch, cfg);
    EXPECT_LT(g.loss.total, grad_backprop(obs, batch).loss.total);
    LuenbergerObserver work = obs;
    auto loss = [&](const Vector &p) {
        work.ghat.params.values = p;
        return grad_backprop(work, batch, cfg).loss.total;
    };
    EXPECT_LT(max_rel_error(g.gradient, fd_gradient(loss, obs.ghat.params.values)), 1e-5);
}

TEST(ConfigValidation, RejectsBadValues) {
    auto bad = [](auto mutate) {
        TrainConfig c;
        mutate(c);
        return c;
    };
    EXPECT_THROW(bad([](TrainConfig &c) { c.gamma = -0.1; }).validate(), ConfigError);
    EXPECT_THROW(bad([](TrainConfig &c) { c.loss_warmup = -1; }).validate(), ConfigError);
    EXPECT_THROW(bad([](TrainConfig &c) {
                     c.loss_warmup = 1;
                     c.gradient_mode = GradientMode::adjoint;
                 }).validate(),
                 ConfigError);
    EXPECT_THROW(bad([](TrainConfig &c) { c.batch_size = 0; }).validate(), ConfigError);
    EXPECT_THROW(bad([](TrainConfig &c) { c.learning_rate = 0; }).validate(), ConfigError);
    EXPECT_THROW(bad([](TrainConfig &c) { c.lr_decay = 1.5; }).validate(), ConfigError);
    EXPECT_THROW(bad([](TrainConfig &c) { c.pde_weight = -1; }).validate(), ConfigError);
    EXPECT_NO_THROW(TrainConfig{}.validate());
}

TEST(Training, ZeroEpochsLeavesObserverUnchanged) {
    KklObserver obs = tiny_kkl(22, false);
    const Vector before = obs.flat_params();
    TrainConfig cfg;
    cfg.epochs = 0;
    const TrainResult r = train(obs, tiny_dataset(2, 0.4, 0.05), cfg);
    EXPECT_TRUE(r.history.empty());
    EXPECT_EQ(obs.flat_params(), before);
}

TEST(Training, DeterministicForFixedSeed) {
    const Dataset ds = tiny_dataset(6, 2.0, 0.05);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 2;
    cfg.seed = 42;
    KklObserver a = tiny_kkl(23, false);
    KklObserver b = tiny_kkl(23, false);
    train(a, ds, cfg);
    train(b, ds, cfg);
    EXPECT_EQ(a.flat_params(), b.flat_params());
}

TEST(Training, ResumeMatchesUninterruptedRun) {
    const Dataset ds = tiny_dataset(6, 2.0, 0.05);
    TrainConfig cfg;
    cfg.epochs = 6;
    cfg.batch_size = 4;
    cfg.seed = 9;
    KklObserver full = tiny_kkl(24, false);
    train(full, ds, cfg);

    KklObserver part = tiny_kkl(24, false);
    TrainConfig first = cfg;
    first.epochs = 3;
    const TrainResult r1 = train(part, ds, first);
    EXPECT_EQ(r1.state.epoch, 3);
    const TrainResult r2 = train(part, ds, cfg, nullptr, r1.state);
    EXPECT_EQ(r2.history.size(), 3u);
    EXPECT_EQ(r2.state.epoch, 6);
    EXPECT_EQ(part.flat_params(), full.flat_params());
}

TEST(Training, LossDecreases) {
    const Dataset ds = tiny_dataset(8, 5.0, 0.05);
    KklObserver obs = tiny_kkl(25, false);
    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-2;
    const TrainResult r = train(obs, ds, cfg);
    EXPECT_LT(r.history.back().total, 0.5 * r.history.front().total);
}

TEST(Training, NonFiniteDataRaisesDivergence) {
    Dataset ds = tiny_dataset(2, 0.4, 0.05);
    (*ds.trajectories[1].outputs)(3, 0) = std::numeric_limits<double>::quiet_NaN();
    KklObserver obs = tiny_kkl(26, false);
    TrainConfig cfg;
    cfg.epochs = 3;
    try {
        train(obs, ds, cfg);
        FAIL() << "expected divergence";
    } catch (const DivergenceError &e) {
        EXPECT_EQ(e.index(), 0);
    }
}

TEST(Training, WeightDecaySparesEigenvalues) {
    const Dataset ds = zero_dataset(2, TimeGrid(0, 1, 0.1));
    KklObserver obs = tiny_kkl(27, false);
    const Vector rho = obs.rho;
    const double w_before = obs.tstar.params.values.norm();
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.optimizer = OptimizerKind::gd;
    cfg.learning_rate = 0.1;
    cfg.weight_decay = 0.5;
    train(obs, ds, cfg);
    EXPECT_EQ(obs.rho, rho);
    EXPECT_LT(obs.tstar.params.values.norm(), w_before);
}

TEST(Training, LinearOracleIsLearned) {
    // Static scalar state seen through y = 20 x. With fast fixed eigenvalues
    // the immersion is z = 20 x (1/20, 1/25) and a linear decoder inverts it
    // after a short transient, so the mean-square error can get small.
    const SystemSpec sys = make_linear(Matrix::Zero(1, 1), Matrix::Constant(1, 1, 20.0),
                                       Box::symmetric(1, 1.0));
    Rng rng = make_rng(28);
    const Dataset ds = generate_dataset(sys, 20, TimeGrid(0, 20, 0.02), rng, NoiseSpec::none());
    Rng irng = make_rng(29);
    KklObserver obs = KklObserver::create(1, 1, {16}, false, Activation::tanh, irng,
                                          vec({-20, -25}));
    TrainConfig cfg;
    cfg.epochs = 500;
    cfg.batch_size = 20;
    cfg.learning_rate = 1e-2;
    cfg.learn_eigenvalues = false;
    const TrainResult r = train(obs, ds, cfg);
    const double mean_square = r.history.back().data / ds.grid.horizon();
    EXPECT_LT(mean_square, 1e-3);
}
