// JSON checkpoints for networks, observers and optimizer state.
//
// {
//   "format_version": 1,
//   "type": "kkl" | "luenberger",
//   kkl:        "n_x", "n_y", "rho", "tstar", "t_fwd" (net or null)
//   luenberger: "A", "C", "G" (row-major nested arrays), "ghat"
//   "training": {"epoch", "step", "adam_m", "adam_v"}   (optional)
// }
// A net is {"layer_sizes", "activation", "params"}; params use the flat
// layer order documented in net.hpp.
#pragma once

#include <odekkl/core.hpp>
#include <odekkl/eval.hpp>
#include <odekkl/net.hpp>
#include <odekkl/observer.hpp>
#include <odekkl/train.hpp>

#include <json.hpp>

#include <fstream>
#include <optional>
#include <string>

namespace odekkl {

using Json = nlohmann::json;

inline constexpr int checkpoint_format_version = 1;

namespace detail {

inline Json vector_to_json(const Vector &v) {
    return Json(std::vector<double>(v.data(), v.data() + v.size()));
}

inline Vector vector_from_json(const Json &j, const std::string &key) {
    if (!j.is_array()) {
        throw ConfigError(key, "expected an array of numbers");
    }
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) {
            throw ConfigError(key, "expected an array of numbers");
        }
        v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    }
    return v;
}

inline Json matrix_to_json(const Matrix &m) {
    Json rows = Json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        rows.push_back(vector_to_json(m.row(r).transpose()));
    }
    return rows;
}

inline Matrix matrix_from_json(const Json &j, const std::string &key) {
    if (!j.is_array() || j.empty()) {
        throw ConfigError(key, "expected a non-empty array of rows");
    }
    const Eigen::Index cols = j[0].is_array() ? static_cast<Eigen::Index>(j[0].size()) : 0;
    Matrix m(static_cast<Eigen::Index>(j.size()), cols);
    for (std::size_t r = 0; r < j.size(); ++r) {
        const Vector row = vector_from_json(j[r], key);
        if (row.size() != cols || cols == 0) {
            throw ConfigError(key, "rows must be non-empty and of equal length");
        }
        m.row(static_cast<Eigen::Index>(r)) = row.transpose();
    }
    return m;
}

inline const Json &require_key(const Json &j, const std::string &key,
                               const std::string &prefix) {
    if (!j.is_object() || !j.contains(key)) {
        throw ConfigError(prefix + key, "missing");
    }
    return j.at(key);
}

} // namespace detail

inline Json mlp_to_json(const Mlp &net) {
    return Json{{"layer_sizes", net.spec.layer_sizes},
                {"activation", to_string(net.spec.activation)},
                {"params", detail::vector_to_json(net.params.values)}};
}

inline Mlp mlp_from_json(const Json &j, const std::string &prefix = "") {
    using detail::require_key;
    const Json &sizes = require_key(j, "layer_sizes", prefix);
    if (!sizes.is_array()) {
        throw ConfigError(prefix + "layer_sizes", "expected an array");
    }
    std::vector<int> ls;
    for (const Json &s : sizes) {
        if (!s.is_number_integer()) {
            throw ConfigError(prefix + "layer_sizes", "expected integers");
        }
        ls.push_back(s.get<int>());
    }
    const Json &act = require_key(j, "activation", prefix);
    if (!act.is_string()) {
        throw ConfigError(prefix + "activation", "expected a string");
    }
    MlpSpec spec(ls, activation_from_string(act.get<std::string>()));
    Vector p = detail::vector_from_json(require_key(j, "params", prefix), prefix + "params");
    if (p.size() != spec.param_count()) {
        throw ConfigError(prefix + "params", "length does not match layer_sizes");
    }
    return Mlp{spec, ParamVec{std::move(p)}};
}

struct Checkpoint {
    AnyObserver observer;
    std::optional<TrainState> state;
};

inline Json checkpoint_to_json(const AnyObserver &observer,
                               const std::optional<TrainState> &state = std::nullopt) {
    Json j;
    j["format_version"] = checkpoint_format_version;
    if (const auto *kkl = std::get_if<KklObserver>(&observer)) {
        j["type"] = "kkl";
        j["n_x"] = kkl->n_x;
        j["n_y"] = kkl->n_y;
        j["rho"] = detail::vector_to_json(kkl->rho);
        j["tstar"] = mlp_to_json(kkl->tstar);
        j["t_fwd"] = kkl->t_fwd ? mlp_to_json(*kkl->t_fwd) : Json(nullptr);
    } else {
        const auto &lu = std::get<LuenbergerObserver>(observer);
        j["type"] = "luenberger";
        j["A"] = detail::matrix_to_json(lu.A);
        j["C"] = detail::matrix_to_json(lu.C);
        j["G"] = detail::matrix_to_json(lu.G);
        j["ghat"] = mlp_to_json(lu.ghat);
    }
    if (state) {
        j["training"] = Json{{"epoch", state->epoch},
                             {"step", state->step},
                             {"adam_m", detail::vector_to_json(state->m)},
                             {"adam_v", detail::vector_to_json(state->v)}};
    }
    return j;
}

inline Checkpoint checkpoint_from_json(const Json &j) {
    using detail::require_key;
    const Json &ver = require_key(j, "format_version", "checkpoint.");
    if (!ver.is_number_integer() || ver.get<int>() != checkpoint_format_version) {
        throw ConfigError("checkpoint.format_version", "unsupported version");
    }
    const Json &type = require_key(j, "type", "checkpoint.");
    Checkpoint cp;
    if (type == "kkl") {
        KklObserver obs;
        obs.n_x = require_key(j, "n_x", "checkpoint.").get<int>();
        obs.n_y = require_key(j, "n_y", "checkpoint.").get<int>();
        obs.rho = detail::vector_from_json(require_key(j, "rho", "checkpoint."), "checkpoint.rho");
        obs.tstar = mlp_from_json(require_key(j, "tstar", "checkpoint."), "checkpoint.tstar.");
        if (j.contains("t_fwd") && !j.at("t_fwd").is_null()) {
            obs.t_fwd = mlp_from_json(j.at("t_fwd"), "checkpoint.t_fwd.");
        }
        try {
            obs.validate();
        } catch (const DimensionError &e) {
            throw ConfigError("checkpoint", e.what());
        }
        cp.observer = std::move(obs);
    } else if (type == "luenberger") {
        LuenbergerObserver obs{
            detail::matrix_from_json(require_key(j, "A", "checkpoint."), "checkpoint.A"),
            detail::matrix_from_json(require_key(j, "C", "checkpoint."), "checkpoint.C"),
            detail::matrix_from_json(require_key(j, "G", "checkpoint."), "checkpoint.G"),
            mlp_from_json(require_key(j, "ghat", "checkpoint."), "checkpoint.ghat.")};
        try {
            obs.validate();
        } catch (const DimensionError &e) {
            throw ConfigError("checkpoint", e.what());
        }
        cp.observer = std::move(obs);
    } else {
        throw ConfigError("checkpoint.type", "expected 'kkl' or 'luenberger'");
    }
    if (j.contains("training")) {
        const Json &t = j.at("training");
        TrainState st;
        st.epoch = require_key(t, "epoch", "checkpoint.training.").get<int>();
        st.step = require_key(t, "step", "checkpoint.training.").get<long>();
        st.m = detail::vector_from_json(require_key(t, "adam_m", "checkpoint.training."),
                                        "checkpoint.training.adam_m");
        st.v = detail::vector_from_json(require_key(t, "adam_v", "checkpoint.training."),
                                        "checkpoint.training.adam_v");
        cp.state = std::move(st);
    }
    return cp;
}

inline void save_checkpoint(const std::string &path, const AnyObserver &observer,
                            const std::optional<TrainState> &state = std::nullopt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw std::runtime_error("cannot open " + path + " for writing");
    }
    os << checkpoint_to_json(observer, state).dump(1) << '\n';
}

inline Checkpoint load_checkpoint(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw ConfigError("checkpoint", "cannot open '" + path + "'");
    }
    Json j;
    try {
        j = Json::parse(is);
    } catch (const Json::parse_error &e) {
        throw ConfigError("checkpoint", std::string("invalid JSON: ") + e.what());
    } catch (const Json::type_error &e) {
        throw ConfigError("checkpoint", e.what());
    }
    try {
        return checkpoint_from_json(j);
    } catch (const Json::type_error &e) {
        throw ConfigError("checkpoint", e.what());
    }
}

} // namespace odekkl
