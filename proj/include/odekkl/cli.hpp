// Experiment configs and the simulate / train / eval / sweep / genmap commands.
//
// Configs are JSON objects with "schema_version": 1. Unknown keys are
// rejected. Relative paths inside a config resolve against the config file's
// directory; the output directory resolves against the working directory.
#pragma once

#include <odekkl/checkpoint.hpp>
#include <odekkl/core.hpp>
#include <odekkl/eval.hpp>
#include <odekkl/integrate.hpp>
#include <odekkl/observer.hpp>
#include <odekkl/systems.hpp>
#include <odekkl/train.hpp>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace odekkl {

namespace fs = std::filesystem;

inline constexpr int config_schema_version = 1;

/// Exit codes of the command-line tool.
enum ExitCode : int { exit_ok = 0, exit_failure = 1, exit_config = 2, exit_divergence = 3 };

// -----------------------------------------------------------------------------
// Strict JSON object reader
// -----------------------------------------------------------------------------

/// Reads fields of one JSON object, remembering which keys were consumed so
/// that `finish` can reject the rest.
class ConfigObject {
public:
    ConfigObject(const Json &j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
        }
    }

    std::string key_path(const std::string &key) const {
        return path_.empty() ? key : path_ + "." + key;
    }

    bool has(const std::string &key) const { return j_.contains(key) && !j_.at(key).is_null(); }

    /// Accepts `key` (typically an explicit null) without reading it.
    void mark(const std::string &key) { seen_.insert(key); }

    const Json &raw(const std::string &key) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            throw ConfigError(key_path(key), "missing");
        }
        return j_.at(key);
    }

    double number(const std::string &key) {
        const Json &v = raw(key);
        if (!v.is_number()) {
            throw ConfigError(key_path(key), "expected a number");
        }
        return v.get<double>();
    }
    double number(const std::string &key, double fallback) {
        seen_.insert(key);
        return has(key) ? number(key) : fallback;
    }

    long long integer(const std::string &key) {
        const Json &v = raw(key);
        if (!v.is_number_integer()) {
            throw ConfigError(key_path(key), "expected an integer");
        }
        return v.get<long long>();
    }
    long long integer(const std::string &key, long long fallback) {
        seen_.insert(key);
        return has(key) ? integer(key) : fallback;
    }

    bool boolean(const std::string &key, bool fallback) {
        seen_.insert(key);
        if (!has(key)) {
            return fallback;
        }
        const Json &v = j_.at(key);
        if (!v.is_boolean()) {
            throw ConfigError(key_path(key), "expected true or false");
        }
        return v.get<bool>();
    }

    std::string string(const std::string &key) {
        const Json &v = raw(key);
        if (!v.is_string()) {
            throw ConfigError(key_path(key), "expected a string");
        }
        return v.get<std::string>();
    }
    std::string string(const std::string &key, const std::string &fallback) {
        seen_.insert(key);
        return has(key) ? string(key) : fallback;
    }

    Vector vector(const std::string &key) {
        return detail::vector_from_json(raw(key), key_path(key));
    }
    Matrix matrix(const std::string &key) {
        return detail::matrix_from_json(raw(key), key_path(key));
    }
    std::vector<int> int_list(const std::string &key) {
        const Json &v = raw(key);
        if (!v.is_array()) {
            throw ConfigError(key_path(key), "expected an array of integers");
        }
        std::vector<int> out;
        for (const Json &e : v) {
            if (!e.is_number_integer()) {
                throw ConfigError(key_path(key), "expected an array of integers");
            }
            out.push_back(e.get<int>());
        }
        return out;
    }

    ConfigObject child(const std::string &key) { return ConfigObject(raw(key), key_path(key)); }

    /// Throws on the first key that was never read.
    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) {
                throw ConfigError(key_path(it.key()), "unknown key");
            }
        }
    }

private:
    const Json &j_;
    std::string path_;
    std::set<std::string> seen_;
};

// -----------------------------------------------------------------------------
// Config records
// -----------------------------------------------------------------------------

inline NoiseSpec parse_noise(ConfigObject o) {
    const std::string kind = o.string("kind", "none");
    const std::string target_s = o.string("target", "measurement");
    NoiseTarget target;
    if (target_s == "measurement") {
        target = NoiseTarget::measurement;
    } else if (target_s == "process") {
        target = NoiseTarget::process;
    } else {
        throw ConfigError(o.key_path("target"), "expected 'measurement' or 'process'");
    }
    NoiseSpec n;
    try {
        if (kind == "none") {
            n = NoiseSpec::none();
            n.target = target;
        } else if (kind == "gaussian") {
            n = NoiseSpec::gaussian(o.number("mean", 0.0), o.number("std"), target);
        } else if (kind == "truncated_gaussian") {
            n = NoiseSpec::truncated_gaussian(o.number("mean", 0.0), o.number("std"), target);
        } else if (kind == "uniform") {
            n = NoiseSpec::uniform(o.number("lo"), o.number("hi"), target);
        } else {
            throw ConfigError(o.key_path("kind"),
                              "expected none, gaussian, truncated_gaussian or uniform");
        }
    } catch (const ConfigError &e) {
        // Factory errors carry bare keys; report them under this object.
        if (e.key().rfind("noise.", 0) == 0) {
            throw ConfigError(o.key_path(e.key().substr(6)), e.message());
        }
        throw;
    }
    o.finish();
    return n;
}

inline ExcitationSpec parse_excitation(ConfigObject o) {
    const double amplitude = o.number("amplitude", 1.0);
    const double frequency = o.number("frequency");
    if (!(frequency >= 0.0)) {
        throw ConfigError(o.key_path("frequency"), "must be >= 0");
    }
    o.finish();
    return ExcitationSpec::cosine(amplitude, frequency);
}

inline Box parse_box(ConfigObject o) {
    Box b{o.vector("lo"), o.vector("hi")};
    if (b.lo.size() != b.hi.size() || b.lo.size() == 0 || !(b.lo.array() <= b.hi.array()).all()) {
        throw ConfigError(o.key_path("lo"), "box needs lo <= hi of equal, positive length");
    }
    o.finish();
    return b;
}

struct SystemConfig {
    std::string name;
    std::optional<Box> domain;
    std::optional<Matrix> A;
    std::optional<Matrix> C;

    SystemSpec build() const {
        SystemSpec s;
        if (name == "linear") {
            if (!A || !C) {
                throw ConfigError("system.A", "the linear system needs A and C");
            }
            try {
                s = make_linear(*A, *C, domain);
            } catch (const DimensionError &e) {
                throw ConfigError("system.A", e.what());
            }
        } else {
            s = make_system(name);
            if (domain) {
                if (domain->lo.size() != s.n_x) {
                    throw ConfigError("system.domain", "dimension does not match the system");
                }
                s.domain = *domain;
            }
        }
        return s;
    }
};

inline SystemConfig parse_system(ConfigObject o) {
    SystemConfig c;
    c.name = o.string("name");
    if (o.has("domain")) {
        c.domain = parse_box(o.child("domain"));
    }
    if (o.has("A")) {
        c.A = o.matrix("A");
    }
    if (o.has("C")) {
        c.C = o.matrix("C");
    }
    o.finish();
    return c;
}

inline TimeGrid parse_grid(ConfigObject o) {
    const double t0 = o.number("t0", 0.0);
    const double tf = o.number("tf");
    const double h = o.number("h", 0.02);
    o.finish();
    return TimeGrid(t0, tf, h);
}

struct ObserverConfig {
    std::string type = "kkl";
    std::vector<int> hidden{50, 50, 50, 50};
    Activation activation = Activation::tanh;
    std::optional<Vector> eigenvalues;
    bool forward_map = false;
    std::optional<Matrix> G;
};

inline ObserverConfig parse_observer(ConfigObject o) {
    ObserverConfig c;
    c.type = o.string("type", "kkl");
    if (c.type != "kkl" && c.type != "luenberger") {
        throw ConfigError(o.key_path("type"), "expected 'kkl' or 'luenberger'");
    }
    if (o.has("hidden")) {
        c.hidden = o.int_list("hidden");
    }
    c.activation = activation_from_string(o.string("activation", "tanh"));
    if (o.has("eigenvalues")) {
        c.eigenvalues = o.vector("eigenvalues");
        if (!(c.eigenvalues->array() < 0.0).all()) {
            throw ConfigError(o.key_path("eigenvalues"), "all eigenvalues must be negative");
        }
    }
    c.forward_map = o.boolean("forward_map", false);
    if (o.has("G")) {
        c.G = o.matrix("G");
    }
    o.finish();
    return c;
}

struct TrainSection {
    TrainConfig train;
    int n_traj = 50;
    InitialDistribution initial_distribution = InitialDistribution::uniform;
    int checkpoint_every = 0; ///< 0 writes only the final checkpoint
    std::optional<fs::path> resume;
};

inline TrainSection parse_training(ConfigObject o, const fs::path &base) {
    TrainSection s;
    TrainConfig &t = s.train;
    t.epochs = static_cast<int>(o.integer("epochs", t.epochs));
    t.batch_size = static_cast<int>(o.integer("batch_size", t.batch_size));
    t.learning_rate = o.number("learning_rate", t.learning_rate);
    t.lr_decay = o.number("lr_decay", t.lr_decay);
    const std::string opt = o.string("optimizer", "adam");
    if (opt == "adam") {
        t.optimizer = OptimizerKind::adam;
    } else if (opt == "gd") {
        t.optimizer = OptimizerKind::gd;
    } else {
        throw ConfigError(o.key_path("optimizer"), "expected 'adam' or 'gd'");
    }
    t.beta1 = o.number("beta1", t.beta1);
    t.beta2 = o.number("beta2", t.beta2);
    t.epsilon = o.number("epsilon", t.epsilon);
    t.gamma = o.number("gamma", t.gamma);
    if (o.has("train_noise")) {
        t.train_noise = parse_noise(o.child("train_noise"));
    } else {
        o.mark("train_noise");
    }
    if (o.has("pde_weight")) {
        t.pde_weight = o.number("pde_weight");
    } else {
        o.mark("pde_weight");
    }
    const std::string gm = o.string("gradient_mode", "backprop");
    if (gm == "backprop") {
        t.gradient_mode = GradientMode::backprop;
    } else if (gm == "adjoint") {
        t.gradient_mode = GradientMode::adjoint;
    } else {
        throw ConfigError(o.key_path("gradient_mode"), "expected 'backprop' or 'adjoint'");
    }
    const std::string lm = o.string("loss_mode", "lagrange");
    if (lm == "lagrange") {
        t.loss_mode = LossMode::lagrange;
    } else if (lm == "nonauto") {
        t.loss_mode = LossMode::nonauto;
    } else {
        throw ConfigError(o.key_path("loss_mode"), "expected 'lagrange' or 'nonauto'");
    }
    t.learn_eigenvalues = o.boolean("learn_eigenvalues", true);
    t.weight_decay = o.number("weight_decay", t.weight_decay);
    t.loss_stride = static_cast<int>(o.integer("loss_stride", 1));
    t.loss_warmup = o.number("loss_warmup", 0.0);
    s.n_traj = static_cast<int>(o.integer("n_traj", 50));
    const std::string dist = o.string("initial_distribution", "uniform");
    if (dist == "uniform") {
        s.initial_distribution = InitialDistribution::uniform;
    } else if (dist == "gaussian") {
        s.initial_distribution = InitialDistribution::gaussian;
    } else {
        throw ConfigError(o.key_path("initial_distribution"), "expected 'uniform' or 'gaussian'");
    }
    s.checkpoint_every = static_cast<int>(o.integer("checkpoint_every", 0));
    if (s.checkpoint_every < 0) {
        throw ConfigError(o.key_path("checkpoint_every"), "must be >= 0");
    }
    if (o.has("resume")) {
        s.resume = base / o.string("resume");
        if (!fs::exists(*s.resume)) {
            throw ConfigError(o.key_path("resume"), "file not found: " + s.resume->string());
        }
    }
    o.finish();
    try {
        t.validate();
    } catch (const ConfigError &e) {
        throw ConfigError(o.key_path(e.key()), e.message());
    }
    if (s.n_traj < 1) {
        throw ConfigError(o.key_path("n_traj"), "must be >= 1");
    }
    return s;
}

/// A reference to an observer: a checkpoint file or a training config that
/// is run in-process.
struct ObserverSource {
    std::string id;
    std::optional<fs::path> checkpoint;
    std::optional<fs::path> train_config;
};

inline ObserverSource parse_observer_source(ConfigObject o, const fs::path &base,
                                            bool need_id) {
    ObserverSource s;
    s.id = need_id ? o.string("id") : o.string("id", "observer");
    if (s.id.empty() || s.id.find_first_of(",\n\"/\\") != std::string::npos) {
        throw ConfigError(o.key_path("id"), "must be non-empty without , / \\ \" or newlines");
    }
    if (o.has("checkpoint")) {
        s.checkpoint = base / o.string("checkpoint");
        if (!fs::exists(*s.checkpoint)) {
            throw ConfigError(o.key_path("checkpoint"), "file not found: " + s.checkpoint->string());
        }
    }
    if (o.has("train_config")) {
        s.train_config = base / o.string("train_config");
        if (!fs::exists(*s.train_config)) {
            throw ConfigError(o.key_path("train_config"),
                              "file not found: " + s.train_config->string());
        }
    }
    if (s.checkpoint.has_value() == s.train_config.has_value()) {
        throw ConfigError(o.key_path("checkpoint"), "give exactly one of checkpoint or train_config");
    }
    o.finish();
    return s;
}

struct SimulateSection {
    std::vector<Vector> initial_conditions;
    NoiseSpec noise;
    ExcitationSpec excitation;
    std::optional<ObserverSource> observer;
};

struct EvalSection {
    std::vector<ObserverSource> observers;
    std::vector<NoiseSpec> scenarios;
    std::vector<Vector> points;
    int n_random = 20;
    double warmup = 0.0;
    ExcitationSpec excitation;
    bool write_trajectories = false;
};

struct SweepSection {
    Vector eigenvalues;
    std::vector<double> k_values;
    NoiseSpec noise;
    std::optional<Vector> x0;
};

struct GenmapSection {
    ObserverSource observer;
    Box box;
    int n1 = 11;
    int n2 = 11;
    double warmup = 0.0;
};

struct ExperimentConfig {
    int schema_version = config_schema_version;
    std::optional<std::string> command;
    std::uint64_t seed = 0;
    fs::path base_dir;
    SystemConfig system;
    TimeGrid grid;
    std::optional<ObserverConfig> observer;
    std::optional<TrainSection> training;
    std::optional<SimulateSection> simulate;
    std::optional<EvalSection> eval;
    std::optional<SweepSection> sweep;
    std::optional<GenmapSection> genmap;
};

namespace detail {

inline std::vector<Vector> parse_points(const Json &j, const std::string &key) {
    if (!j.is_array()) {
        throw ConfigError(key, "expected an array of points");
    }
    std::vector<Vector> out;
    for (const Json &p : j) {
        out.push_back(vector_from_json(p, key));
    }
    return out;
}

} // namespace detail

inline ExperimentConfig parse_config(const Json &j, const fs::path &base_dir) {
    ConfigObject o(j, "");
    ExperimentConfig c;
    c.base_dir = base_dir;
    c.schema_version = static_cast<int>(o.integer("schema_version"));
    if (c.schema_version != config_schema_version) {
        throw ConfigError("schema_version", "unsupported schema version");
    }
    if (o.has("command")) {
        c.command = o.string("command");
    }
    const long long seed = o.integer("seed", 0);
    if (seed < 0) {
        throw ConfigError("seed", "must be >= 0");
    }
    c.seed = static_cast<std::uint64_t>(seed);
    c.system = parse_system(o.child("system"));
    c.grid = parse_grid(o.child("grid"));
    if (o.has("observer")) {
        c.observer = parse_observer(o.child("observer"));
    }
    if (o.has("training")) {
        c.training = parse_training(o.child("training"), base_dir);
    }
    if (o.has("simulate")) {
        ConfigObject s = o.child("simulate");
        SimulateSection sim;
        sim.initial_conditions = detail::parse_points(s.raw("initial_conditions"),
                                                      s.key_path("initial_conditions"));
        if (sim.initial_conditions.empty()) {
            throw ConfigError(s.key_path("initial_conditions"), "must be non-empty");
        }
        if (s.has("noise")) {
            sim.noise = parse_noise(s.child("noise"));
        }
        if (s.has("excitation")) {
            sim.excitation = parse_excitation(s.child("excitation"));
        }
        if (s.has("observer")) {
            sim.observer = parse_observer_source(s.child("observer"), base_dir, false);
        }
        s.finish();
        c.simulate = std::move(sim);
    }
    if (o.has("eval")) {
        ConfigObject e = o.child("eval");
        EvalSection ev;
        const Json &obs = e.raw("observers");
        if (!obs.is_array() || obs.empty()) {
            throw ConfigError(e.key_path("observers"), "expected a non-empty array");
        }
        std::set<std::string> ids;
        for (std::size_t i = 0; i < obs.size(); ++i) {
            ev.observers.push_back(parse_observer_source(
                ConfigObject(obs[i], e.key_path("observers") + "[" + std::to_string(i) + "]"),
                base_dir, true));
            if (!ids.insert(ev.observers.back().id).second) {
                throw ConfigError(e.key_path("observers"), "duplicate id '" + ev.observers.back().id + "'");
            }
        }
        const Json &sc = e.raw("scenarios");
        if (!sc.is_array() || sc.empty()) {
            throw ConfigError(e.key_path("scenarios"), "expected a non-empty array");
        }
        for (std::size_t i = 0; i < sc.size(); ++i) {
            ev.scenarios.push_back(parse_noise(
                ConfigObject(sc[i], e.key_path("scenarios") + "[" + std::to_string(i) + "]")));
        }
        if (e.has("test_points")) {
            ev.points = detail::parse_points(e.raw("test_points"), e.key_path("test_points"));
        }
        ev.n_random = static_cast<int>(e.integer("n_random", 20));
        if (ev.n_random < 0 || (ev.n_random == 0 && ev.points.empty())) {
            throw ConfigError(e.key_path("n_random"), "need at least one test initial condition");
        }
        ev.warmup = e.number("warmup", 0.0);
        if (e.has("excitation")) {
            ev.excitation = parse_excitation(e.child("excitation"));
        }
        ev.write_trajectories = e.boolean("write_trajectories", false);
        e.finish();
        c.eval = std::move(ev);
    }
    if (o.has("sweep")) {
        ConfigObject s = o.child("sweep");
        SweepSection sw;
        sw.eigenvalues = s.vector("eigenvalues");
        const Vector ks = s.vector("k_values");
        if (ks.size() == 0) {
            throw ConfigError(s.key_path("k_values"), "must be non-empty");
        }
        for (Eigen::Index i = 0; i < ks.size(); ++i) {
            if (!(ks(i) >= 1.0)) {
                throw ConfigError(s.key_path("k_values"), "scaling factors must be >= 1");
            }
            sw.k_values.push_back(ks(i));
        }
        if (s.has("noise")) {
            sw.noise = parse_noise(s.child("noise"));
        }
        if (s.has("x0")) {
            sw.x0 = s.vector("x0");
        }
        s.finish();
        c.sweep = std::move(sw);
    }
    if (o.has("genmap")) {
        ConfigObject g = o.child("genmap");
        GenmapSection gm;
        gm.observer = parse_observer_source(g.child("observer"), base_dir, false);
        gm.box = parse_box(g.child("box"));
        const std::vector<int> res = g.int_list("resolution");
        if (res.size() != 2 || res[0] < 1 || res[1] < 1) {
            throw ConfigError(g.key_path("resolution"), "expected two positive integers");
        }
        gm.n1 = res[0];
        gm.n2 = res[1];
        gm.warmup = g.number("warmup", 0.0);
        g.finish();
        c.genmap = std::move(gm);
    }
    o.finish();
    return c;
}

inline ExperimentConfig load_config(const fs::path &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw ConfigError("config", "cannot open '" + path.string() + "'");
    }
    Json j;
    try {
        j = Json::parse(is);
    } catch (const Json::parse_error &e) {
        throw ConfigError("config", std::string("invalid JSON: ") + e.what());
    }
    return parse_config(j, path.parent_path());
}

// -----------------------------------------------------------------------------
// Commands
// -----------------------------------------------------------------------------

/// Independent random streams derived from the experiment seed.
enum class SeedStream : std::uint64_t { data = 1, init = 2, eval = 3, simulate = 4, sweep = 5 };

inline Rng stream_rng(std::uint64_t seed, SeedStream s) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(s)};
    return Rng(seq);
}

struct CommandContext {
    fs::path out_dir = "out";
    std::optional<std::uint64_t> seed_override;
    std::ostream *log = &std::cout;
};

inline std::uint64_t effective_seed(const ExperimentConfig &c, const CommandContext &ctx) {
    return ctx.seed_override.value_or(c.seed);
}

inline void write_text(const fs::path &path, const std::string &text) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    }
    os << text;
}

struct TrainOutcome {
    AnyObserver observer;
    TrainResult result;
};

/// Builds the dataset and observer of a training config and runs training.
/// Writes checkpoint.json and loss_history.csv under `out_dir`.
inline TrainOutcome run_training_config(const ExperimentConfig &c, const CommandContext &ctx) {
    if (!c.training) {
        throw ConfigError("training", "missing");
    }
    if (!c.observer) {
        throw ConfigError("observer", "missing");
    }
    const TrainSection &ts = *c.training;
    const ObserverConfig &oc = *c.observer;
    const std::uint64_t seed = effective_seed(c, ctx);
    TrainConfig cfg = ts.train;
    cfg.seed = seed;
    const SystemSpec sys = c.system.build();

    Rng data_rng = stream_rng(seed, SeedStream::data);
    Rng init_rng = stream_rng(seed, SeedStream::init);
    const Dataset data =
        generate_dataset(sys, ts.n_traj, c.grid, data_rng, cfg.train_noise, ts.initial_distribution);

    AnyObserver observer;
    TrainState state;
    if (oc.type == "kkl") {
        observer = KklObserver::create(sys.n_x, sys.n_y, oc.hidden,
                                       oc.forward_map || cfg.loss_mode == LossMode::nonauto ||
                                           cfg.pde() > 0.0,
                                       oc.activation, init_rng, oc.eigenvalues);
        if (oc.eigenvalues && std::get<KklObserver>(observer).d_z() != kkl_dim(sys.n_x, sys.n_y)) {
            throw ConfigError("observer.eigenvalues", "length must equal n_y (n_x + 1)");
        }
    } else {
        if (!sys.linear) {
            throw ConfigError("observer.type", "luenberger needs a system with a known linear part");
        }
        Matrix G(sys.n_x, sys.n_y);
        if (oc.G) {
            G = *oc.G;
        } else if (sys.name == "example1") {
            G << 2.0, 1.0;
        } else {
            throw ConfigError("observer.G", "missing");
        }
        if (G.rows() != sys.n_x || G.cols() != sys.n_y) {
            throw ConfigError("observer.G", "must be n_x by n_y");
        }
        observer = LuenbergerObserver::create(sys.linear->A, sys.linear->C, G, oc.hidden,
                                              oc.activation, init_rng);
    }
    if (ts.resume) {
        Checkpoint cp = load_checkpoint(ts.resume->string());
        if (cp.observer.index() != observer.index()) {
            throw ConfigError("training.resume", "checkpoint observer type differs from config");
        }
        observer = std::move(cp.observer);
        if (cp.state) {
            state = *cp.state;
        }
    }

    fs::create_directories(ctx.out_dir);
    const fs::path ckpt = ctx.out_dir / "checkpoint.json";
    std::ostringstream history;
    history << "epoch,data,reg,pde,fwd,total\n";
    auto record = [&](int epoch, const LossBreakdown &l) {
        history << epoch << ',' << format_double(l.data) << ',' << format_double(l.reg) << ','
                << format_double(l.pde) << ',' << format_double(l.fwd) << ','
                << format_double(l.total) << '\n';
    };

    TrainOutcome out;
    if (auto *kkl = std::get_if<KklObserver>(&observer)) {
        KklObserver snapshot = *kkl;
        auto cb = [&](int epoch, const LossBreakdown &l, const Vector &p, const TrainState &st) {
            record(epoch, l);
            if (ts.checkpoint_every > 0 && (epoch + 1) % ts.checkpoint_every == 0) {
                snapshot.set_flat_params(p);
                save_checkpoint(ckpt.string(), snapshot, st);
            }
        };
        out.result = train(*kkl, data, cfg, &sys, state, cb);
    } else {
        auto &lu = std::get<LuenbergerObserver>(observer);
        LuenbergerObserver snapshot = lu;
        auto cb = [&](int epoch, const LossBreakdown &l, const Vector &p, const TrainState &st) {
            record(epoch, l);
            if (ts.checkpoint_every > 0 && (epoch + 1) % ts.checkpoint_every == 0) {
                snapshot.ghat.params.values = p;
                save_checkpoint(ckpt.string(), snapshot, st);
            }
        };
        out.result = train(lu, data, cfg, state, cb);
    }
    save_checkpoint(ckpt.string(), observer, out.result.state);
    write_text(ctx.out_dir / "loss_history.csv", history.str());
    out.observer = std::move(observer);
    return out;
}

inline Json observer_summary(const AnyObserver &obs) {
    Json j;
    if (const auto *kkl = std::get_if<KklObserver>(&obs)) {
        j["type"] = "kkl";
        j["eigenvalues"] = detail::vector_to_json(kkl->eigenvalues());
    } else {
        j["type"] = "luenberger";
    }
    return j;
}

inline int cmd_train(const ExperimentConfig &c, const CommandContext &ctx) {
    const TrainOutcome out = run_training_config(c, ctx);
    Json summary{{"command", "train"},
                 {"seed", effective_seed(c, ctx)},
                 {"epochs", out.result.state.epoch},
                 {"observer", observer_summary(out.observer)},
                 {"checkpoint", (ctx.out_dir / "checkpoint.json").string()}};
    if (!out.result.history.empty()) {
        summary["final_loss"] = out.result.history.back().total;
    }
    *ctx.log << summary.dump() << '\n';
    return exit_ok;
}

/// Loads or trains the referenced observer. Nested trainings write under
/// out_dir / id.
inline AnyObserver resolve_observer(const ObserverSource &src, const CommandContext &ctx) {
    if (src.checkpoint) {
        return load_checkpoint(src.checkpoint->string()).observer;
    }
    const ExperimentConfig nested = load_config(*src.train_config);
    CommandContext sub = ctx;
    sub.out_dir = ctx.out_dir / src.id;
    std::ostringstream quiet;
    sub.log = &quiet;
    return run_training_config(nested, sub).observer;
}

inline int cmd_simulate(const ExperimentConfig &c, const CommandContext &ctx) {
    if (!c.simulate) {
        throw ConfigError("simulate", "missing");
    }
    const SimulateSection &s = *c.simulate;
    const SystemSpec sys = c.system.build();
    Rng rng = stream_rng(effective_seed(c, ctx), SeedStream::simulate);
    std::optional<AnyObserver> observer;
    if (s.observer) {
        observer = resolve_observer(*s.observer, ctx);
    }
    fs::create_directories(ctx.out_dir);
    Json files = Json::array();
    for (std::size_t i = 0; i < s.initial_conditions.size(); ++i) {
        const Vector &x0 = s.initial_conditions[i];
        if (x0.size() != sys.n_x) {
            throw ConfigError("simulate.initial_conditions", "dimension does not match the system");
        }
        const std::string suffix = s.initial_conditions.size() > 1 ? "_" + std::to_string(i) : "";
        Trajectory xs;
        if (!observer) {
            xs = simulate_system(sys, x0, c.grid, s.noise, s.excitation, rng);
        } else if (const auto *kkl = std::get_if<KklObserver>(&*observer)) {
            const bool driven = kkl->t_fwd && sys.input_map && s.excitation.active;
            auto drift = [&](double, const Vector &z, const Vector &y, const Vector &u) {
                return driven && u.size() > 0 ? latent_drift_nonauto(*kkl, sys, z, y, u)
                                              : latent_drift(*kkl, z, y);
            };
            auto [xt, zt] = solve_coupled(sys, drift, x0, Vector::Zero(kkl->d_z()), c.grid,
                                          s.noise, s.excitation, rng);
            xs = std::move(xt);
            Trajectory est{c.grid, kkl->tstar.batch(zt.states.transpose()).transpose(),
                           std::nullopt, std::nullopt};
            write_csv((ctx.out_dir / ("latent" + suffix + ".csv")).string(), zt, "z");
            write_csv((ctx.out_dir / ("estimate" + suffix + ".csv")).string(), est, "xhat");
        } else {
            const auto &lu = std::get<LuenbergerObserver>(*observer);
            auto drift = [&](double, const Vector &xh, const Vector &y, const Vector &) {
                return luenberger_drift(lu, xh, y);
            };
            auto [xt, zt] = solve_coupled(sys, drift, x0, Vector::Zero(lu.n_x()), c.grid,
                                          s.noise, s.excitation, rng);
            xs = std::move(xt);
            write_csv((ctx.out_dir / ("estimate" + suffix + ".csv")).string(), zt, "xhat");
        }
        const fs::path path = ctx.out_dir / ("trajectory" + suffix + ".csv");
        write_csv(path.string(), xs);
        files.push_back(path.string());
    }
    *ctx.log << Json{{"command", "simulate"}, {"files", files}}.dump() << '\n';
    return exit_ok;
}

inline int cmd_eval(const ExperimentConfig &c, const CommandContext &ctx) {
    if (!c.eval) {
        throw ConfigError("eval", "missing");
    }
    const EvalSection &e = *c.eval;
    const SystemSpec sys = c.system.build();
    std::vector<NamedObserver> observers;
    for (const ObserverSource &src : e.observers) {
        observers.push_back({src.id, resolve_observer(src, ctx)});
    }
    Rng rng = stream_rng(effective_seed(c, ctx), SeedStream::eval);
    std::vector<Vector> ics = e.points;
    for (const Vector &p : ics) {
        if (p.size() != sys.n_x) {
            throw ConfigError("eval.test_points", "dimension does not match the system");
        }
    }
    for (int i = 0; i < e.n_random; ++i) {
        ics.push_back(sample_initial_condition(sys.domain, rng));
    }
    ScenarioOptions opts;
    opts.warmup = e.warmup;
    opts.excitation = e.excitation;
    if (e.write_trajectories) {
        opts.trajectory_dir = ctx.out_dir / "trajectories";
    }
    const std::vector<ScenarioResult> rows =
        scenario_matrix(observers, sys, ics, e.scenarios, c.grid, rng, opts);
    std::ostringstream all, ref;
    write_scenario_csv(all, rows);
    write_scenario_csv(ref, rows, true);
    write_text(ctx.out_dir / "scenario_matrix.csv", all.str());
    write_text(ctx.out_dir / "scenario_reference.csv", ref.str());
    Json summary{{"command", "eval"}, {"rows", rows.size()}, {"observers", Json::object()}};
    for (const NamedObserver &o : observers) {
        summary["observers"][o.id] = observer_summary(o.observer);
    }
    *ctx.log << summary.dump() << '\n';
    return exit_ok;
}

inline int cmd_sweep(const ExperimentConfig &c, const CommandContext &ctx) {
    if (!c.sweep) {
        throw ConfigError("sweep", "missing");
    }
    const SweepSection &s = *c.sweep;
    const SystemSpec sys = c.system.build();
    if (!sys.linear_is_exact) {
        throw ConfigError("system.name", "sweep needs the linear oracle system");
    }
    if (s.eigenvalues.size() < 1 || !(s.eigenvalues.array() < 0.0).all()) {
        throw ConfigError("sweep.eigenvalues", "all eigenvalues must be negative");
    }
    const Matrix F = Matrix::Ones(s.eigenvalues.size(), sys.n_y);
    Rng rng = stream_rng(effective_seed(c, ctx), SeedStream::sweep);
    SweepOptions opts;
    opts.x0 = s.x0;
    std::vector<SweepPoint> pts;
    try {
        pts = robustness_sweep(sys, s.eigenvalues, F, s.k_values, s.noise, c.grid, rng, opts);
    } catch (const SingularSystemError &e) {
        throw ConfigError("sweep.eigenvalues", e.what());
    }
    std::ostringstream os;
    write_sweep_csv(os, pts);
    write_text(ctx.out_dir / "sweep.csv", os.str());
    Json ratios = Json::array();
    for (const SweepPoint &p : pts) {
        ratios.push_back(p.bound_ratio);
    }
    *ctx.log << Json{{"command", "sweep"}, {"points", pts.size()}, {"bound_ratio", ratios}}.dump()
             << '\n';
    return exit_ok;
}

inline int cmd_genmap(const ExperimentConfig &c, const CommandContext &ctx) {
    if (!c.genmap) {
        throw ConfigError("genmap", "missing");
    }
    const GenmapSection &g = *c.genmap;
    const SystemSpec sys = c.system.build();
    if (sys.n_x != 2) {
        throw ConfigError("system.name", "genmap needs a two-dimensional state");
    }
    const AnyObserver obs = resolve_observer(g.observer, ctx);
    const std::vector<GenMapCell> cells = generalization_map(
        obs, sys, initial_condition_grid(g.box, g.n1, g.n2), c.grid, g.warmup);
    std::ostringstream os;
    write_genmap_csv(os, cells);
    write_text(ctx.out_dir / "genmap.csv", os.str());
    *ctx.log << Json{{"command", "genmap"}, {"cells", cells.size()}}.dump() << '\n';
    return exit_ok;
}

inline const std::vector<std::string> &command_names() {
    static const std::vector<std::string> names{"simulate", "train", "eval", "sweep", "genmap"};
    return names;
}

/// Single-line machine-readable error record.
inline std::string error_line(const std::string &kind, const std::string &key,
                              const std::string &message) {
    Json j{{"error", kind}, {"message", message}};
    if (!key.empty()) {
        j["key"] = key;
    }
    return j.dump();
}

/// Loads the config, dispatches the command and maps failures to exit codes.
inline int run_command(const std::string &command, const fs::path &config_path,
                       const CommandContext &ctx, std::ostream &err = std::cerr) {
    try {
        const ExperimentConfig c = load_config(config_path);
        if (c.command && *c.command != command) {
            throw ConfigError("command", "config is for '" + *c.command + "', not '" + command + "'");
        }
        if (command == "simulate") {
            return cmd_simulate(c, ctx);
        }
        if (command == "train") {
            return cmd_train(c, ctx);
        }
        if (command == "eval") {
            return cmd_eval(c, ctx);
        }
        if (command == "sweep") {
            return cmd_sweep(c, ctx);
        }
        if (command == "genmap") {
            return cmd_genmap(c, ctx);
        }
        throw ConfigError("command", "unknown command '" + command + "'");
    } catch (const ConfigError &e) {
        err << error_line("config", e.key(), e.message()) << '\n';
        return exit_config;
    } catch (const DimensionError &e) {
        err << error_line("config", "", e.what()) << '\n';
        return exit_config;
    } catch (const DivergenceError &e) {
        err << error_line("divergence", "", e.what()) << '\n';
        return exit_divergence;
    } catch (const Json::exception &e) {
        err << error_line("config", "", e.what()) << '\n';
        return exit_config;
    } catch (const std::exception &e) {
        err << error_line("runtime", "", e.what()) << '\n';
        return exit_failure;
    }
}

} // namespace odekkl
