// Feedforward network with hand-written reverse-mode differentiation.
//
// Parameters live in one flat vector, layer-major. For layer l with fan_in
// inputs and fan_out outputs the block is the fan_out x fan_in weight matrix
// in row-major order followed by the fan_out biases. This layout is part of
// the checkpoint format and must not change.
//
// All batched routines take samples as columns.
#pragma once

#include <odekkl/core.hpp>

#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace odekkl {

enum class Activation { relu, tanh };

inline std::string to_string(Activation a) {
    return a == Activation::relu ? "relu" : "tanh";
}

inline Activation activation_from_string(const std::string &s) {
    if (s == "relu") {
        return Activation::relu;
    }
    if (s == "tanh") {
        return Activation::tanh;
    }
    throw ConfigError("activation", "expected 'relu' or 'tanh', got '" + s + "'");
}

struct MlpSpec {
    std::vector<int> layer_sizes;
    Activation activation = Activation::tanh;

    MlpSpec() = default;
    MlpSpec(std::vector<int> sizes, Activation act = Activation::tanh)
        : layer_sizes(std::move(sizes)), activation(act) {
        validate();
    }

    void validate() const {
        if (layer_sizes.size() < 2) {
            throw ConfigError("layer_sizes", "need at least input and output sizes");
        }
        for (int s : layer_sizes) {
            if (s < 1) {
                throw ConfigError("layer_sizes", "all sizes must be positive");
            }
        }
    }

    int input_dim() const { return layer_sizes.front(); }
    int output_dim() const { return layer_sizes.back(); }
    int n_layers() const { return static_cast<int>(layer_sizes.size()) - 1; }
    int fan_in(int l) const { return layer_sizes[l]; }
    int fan_out(int l) const { return layer_sizes[l + 1]; }

    Eigen::Index weight_offset(int l) const {
        Eigen::Index off = 0;
        for (int i = 0; i < l; ++i) {
            off += static_cast<Eigen::Index>(fan_in(i) + 1) * fan_out(i);
        }
        return off;
    }
    Eigen::Index bias_offset(int l) const {
        return weight_offset(l) + static_cast<Eigen::Index>(fan_in(l)) * fan_out(l);
    }
    Eigen::Index param_count() const { return weight_offset(n_layers()); }

    bool operator==(const MlpSpec &o) const {
        return layer_sizes == o.layer_sizes && activation == o.activation;
    }
};

/// Flat parameter vector for an MlpSpec.
struct ParamVec {
    Vector values;

    Eigen::Index size() const { return values.size(); }
};

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstWeights = Eigen::Map<const RowMajorMatrix>;
using Weights = Eigen::Map<RowMajorMatrix>;

inline ConstWeights layer_weights(const MlpSpec &spec, const Vector &p, int l) {
    return ConstWeights(p.data() + spec.weight_offset(l), spec.fan_out(l),
                        spec.fan_in(l));
}
inline Weights layer_weights(const MlpSpec &spec, Vector &p, int l) {
    return Weights(p.data() + spec.weight_offset(l), spec.fan_out(l), spec.fan_in(l));
}
inline auto layer_bias(const MlpSpec &spec, const Vector &p, int l) {
    return p.segment(spec.bias_offset(l), spec.fan_out(l));
}
inline auto layer_bias(const MlpSpec &spec, Vector &p, int l) {
    return p.segment(spec.bias_offset(l), spec.fan_out(l));
}

/// Weights uniform in +/- 1/sqrt(fan_in); biases zero.
inline ParamVec init_params(const MlpSpec &spec, Rng &rng) {
    spec.validate();
    ParamVec p{Vector::Zero(spec.param_count())};
    for (int l = 0; l < spec.n_layers(); ++l) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in(l)));
        std::uniform_real_distribution<double> dist(-bound, bound);
        auto W = layer_weights(spec, p.values, l);
        for (Eigen::Index r = 0; r < W.rows(); ++r) {
            for (Eigen::Index c = 0; c < W.cols(); ++c) {
                W(r, c) = dist(rng);
            }
        }
    }
    return p;
}

namespace detail {

inline void activate(Activation act, const Matrix &pre, Matrix &post) {
    if (act == Activation::relu) {
        post = pre.cwiseMax(0.0);
    } else {
        // 1 - 2 / (exp(2a) + 1) vectorizes; saturates correctly at +/- inf.
        post = (1.0 - 2.0 / ((2.0 * pre.array()).exp() + 1.0)).matrix();
    }
}

/// sigma'(a), from the cached pre- and post-activation.
inline Matrix activation_slope(Activation act, const Matrix &pre, const Matrix &post) {
    if (act == Activation::relu) {
        return (pre.array() > 0.0).cast<double>().matrix();
    }
    return (1.0 - post.array().square()).matrix();
}

/// sigma''(a).
inline Matrix activation_curvature(Activation act, const Matrix &pre,
                                   const Matrix &post) {
    if (act == Activation::relu) {
        return Matrix::Zero(pre.rows(), pre.cols());
    }
    return (-2.0 * post.array() * (1.0 - post.array().square())).matrix();
}

} // namespace detail

/// Intermediate values retained by forward for backward.
struct ForwardCache {
    /// post[0] is the input; post[l + 1] is the output of layer l (after the
    /// activation for hidden layers, the affine value for the last layer).
    std::vector<Matrix> post;
    /// pre[l] is the affine value of layer l.
    std::vector<Matrix> pre;

    const Matrix &output() const { return post.back(); }
    Eigen::Index batch() const { return post.front().cols(); }
};

inline void check_params(const MlpSpec &spec, const ParamVec &params) {
    require_dim(params.size(), spec.param_count(), "mlp parameter count");
}

/// Batched forward pass; X is input_dim x N.
inline ForwardCache forward_batch(const MlpSpec &spec, const ParamVec &params,
                                  const Matrix &X) {
    check_params(spec, params);
    require_dim(X.rows(), spec.input_dim(), "mlp forward input");
    const int L = spec.n_layers();
    ForwardCache cache;
    cache.post.resize(L + 1);
    cache.pre.resize(L);
    cache.post[0] = X;
    for (int l = 0; l < L; ++l) {
        Matrix &a = cache.pre[l];
        a.noalias() = layer_weights(spec, params.values, l) * cache.post[l];
        a.colwise() += layer_bias(spec, params.values, l);
        if (l + 1 < L) {
            detail::activate(spec.activation, a, cache.post[l + 1]);
        } else {
            cache.post[l + 1] = a;
        }
    }
    return cache;
}

inline std::pair<Vector, ForwardCache> forward(const MlpSpec &spec,
                                               const ParamVec &params,
                                               const Vector &x) {
    ForwardCache cache = forward_batch(spec, params, Matrix(x));
    Vector y = cache.output().col(0);
    return {std::move(y), std::move(cache)};
}

/// Output only, for evaluation-time use.
inline Matrix evaluate_batch(const MlpSpec &spec, const ParamVec &params,
                             const Matrix &X) {
    check_params(spec, params);
    require_dim(X.rows(), spec.input_dim(), "mlp forward input");
    Matrix h = X;
    const int L = spec.n_layers();
    for (int l = 0; l < L; ++l) {
        Matrix a = layer_weights(spec, params.values, l) * h;
        a.colwise() += layer_bias(spec, params.values, l);
        if (l + 1 < L) {
            detail::activate(spec.activation, a, h);
        } else {
            h = std::move(a);
        }
    }
    return h;
}

inline Vector evaluate(const MlpSpec &spec, const ParamVec &params, const Vector &x) {
    return evaluate_batch(spec, params, Matrix(x)).col(0);
}

struct BackwardResult {
    ParamVec grad_params;
    Matrix grad_input;
};

/// Reverse sweep for the scalar sum over columns of <grad_output, output>.
/// Parameter gradients are summed over the batch; `grad_params` is
/// accumulated into when provided.
inline Matrix backward_batch(const MlpSpec &spec, const ParamVec &params,
                             const ForwardCache &cache, const Matrix &grad_output,
                             Vector *grad_params) {
    require_dim(grad_output.rows(), spec.output_dim(), "mlp backward grad_output");
    require_dim(grad_output.cols(), cache.batch(), "mlp backward batch");
    const int L = spec.n_layers();
    Matrix g = grad_output;
    for (int l = L - 1; l >= 0; --l) {
        if (l + 1 < L) {
            g.array() *= detail::activation_slope(spec.activation, cache.pre[l],
                                                  cache.post[l + 1])
                             .array();
        }
        if (grad_params != nullptr) {
            layer_weights(spec, *grad_params, l).noalias() += g * cache.post[l].transpose();
            layer_bias(spec, *grad_params, l) += g.rowwise().sum();
        }
        g = layer_weights(spec, params.values, l).transpose() * g;
    }
    return g;
}

inline std::pair<ParamVec, Vector> backward(const MlpSpec &spec, const ParamVec &params,
                                            const ForwardCache &cache,
                                            const Vector &grad_output) {
    ParamVec gp{Vector::Zero(spec.param_count())};
    Matrix gi = backward_batch(spec, params, cache, Matrix(grad_output), &gp.values);
    return {std::move(gp), gi.col(0)};
}

/// d output / d input at x; row i is the input gradient of output i.
inline Matrix jacobian_input(const MlpSpec &spec, const ParamVec &params,
                             const Vector &x) {
    auto [y, cache] = forward(spec, params, x);
    Matrix J(spec.output_dim(), spec.input_dim());
    for (int i = 0; i < spec.output_dim(); ++i) {
        const Vector e = Vector::Unit(spec.output_dim(), i);
        J.row(i) = backward_batch(spec, params, cache, Matrix(e), nullptr)
                       .col(0)
                       .transpose();
    }
    return J;
}

// -----------------------------------------------------------------------------
// Tangent propagation: outputs and directional derivatives J(x) v, with a
// reverse sweep through both for losses that involve the input Jacobian.
// -----------------------------------------------------------------------------

struct TangentCache {
    ForwardCache primal;
    std::vector<Matrix> dpre;  ///< tangent of pre[l]
    std::vector<Matrix> dpost; ///< tangent of post[l]

    const Matrix &output() const { return primal.output(); }
    const Matrix &output_tangent() const { return dpost.back(); }
};

/// Forward pass carrying tangents V (input_dim x N): returns f(X) and J(X) V.
inline TangentCache forward_tangent(const MlpSpec &spec, const ParamVec &params,
                                    const Matrix &X, const Matrix &V) {
    require_dim(V.rows(), X.rows(), "mlp tangent rows");
    require_dim(V.cols(), X.cols(), "mlp tangent cols");
    TangentCache tc;
    tc.primal = forward_batch(spec, params, X);
    const int L = spec.n_layers();
    tc.dpre.resize(L);
    tc.dpost.resize(L + 1);
    tc.dpost[0] = V;
    for (int l = 0; l < L; ++l) {
        tc.dpre[l].noalias() = layer_weights(spec, params.values, l) * tc.dpost[l];
        if (l + 1 < L) {
            tc.dpost[l + 1] = detail::activation_slope(spec.activation, tc.primal.pre[l],
                                                       tc.primal.post[l + 1])
                                  .cwiseProduct(tc.dpre[l]);
        } else {
            tc.dpost[l + 1] = tc.dpre[l];
        }
    }
    return tc;
}

/// Reverse sweep through forward_tangent: accumulates the parameter gradient
/// of sum <g_out, f(X)> + <g_tangent, J(X) V> into grad_params.
inline void backward_tangent(const MlpSpec &spec, const ParamVec &params,
                             const TangentCache &tc, const Matrix &g_out,
                             const Matrix &g_tangent, Vector &grad_params) {
    const int L = spec.n_layers();
    Matrix ga = g_out;      // cotangent of pre[l] (or post for hidden, see below)
    Matrix gda = g_tangent; // cotangent of dpre[l]
    for (int l = L - 1; l >= 0; --l) {
        if (l + 1 < L) {
            // ga, gda currently hold cotangents of post[l+1], dpost[l+1].
            const Matrix &pre = tc.primal.pre[l];
            const Matrix &post = tc.primal.post[l + 1];
            const Matrix slope = detail::activation_slope(spec.activation, pre, post);
            const Matrix curv = detail::activation_curvature(spec.activation, pre, post);
            Matrix g_pre = ga.cwiseProduct(slope) +
                           gda.cwiseProduct(curv).cwiseProduct(tc.dpre[l]);
            gda = gda.cwiseProduct(slope);
            ga = std::move(g_pre);
        }
        auto W = layer_weights(spec, params.values, l);
        layer_weights(spec, grad_params, l).noalias() +=
            ga * tc.primal.post[l].transpose() + gda * tc.dpost[l].transpose();
        layer_bias(spec, grad_params, l) += ga.rowwise().sum();
        if (l > 0) {
            Matrix next_ga = W.transpose() * ga;
            Matrix next_gda = W.transpose() * gda;
            ga = std::move(next_ga);
            gda = std::move(next_gda);
        }
    }
}

// -----------------------------------------------------------------------------
// Lipschitz bound
// -----------------------------------------------------------------------------

/// Largest singular value by power iteration on W^T W.
inline double spectral_norm(const Eigen::Ref<const Matrix> &W, int max_iter = 100,
                            double tol = 1e-8) {
    if (W.size() == 0 || W.cwiseAbs().maxCoeff() == 0.0) {
        return 0.0;
    }
    Vector v = Vector::Ones(W.cols()).normalized();
    double sigma = 0.0;
    for (int it = 0; it < max_iter; ++it) {
        Vector w = W.transpose() * (W * v);
        const double n = w.norm();
        if (n == 0.0) {
            // Start vector in the null space; fall back to the exact value.
            return Eigen::JacobiSVD<Matrix>(W).singularValues()(0);
        }
        v = w / n;
        const double next = std::sqrt(n);
        if (std::abs(next - sigma) <= tol * std::max(1.0, next)) {
            sigma = next;
            break;
        }
        sigma = next;
    }
    return (W * v).norm();
}

/// Product of layer spectral norms; relu and tanh are 1-Lipschitz.
inline double lipschitz_upper_bound(const MlpSpec &spec, const ParamVec &params) {
    check_params(spec, params);
    double bound = 1.0;
    for (int l = 0; l < spec.n_layers(); ++l) {
        bound *= spectral_norm(Matrix(layer_weights(spec, params.values, l)));
    }
    return bound;
}

/// A network specification together with its parameters.
struct Mlp {
    MlpSpec spec;
    ParamVec params;

    static Mlp random(const MlpSpec &spec, Rng &rng) { return {spec, init_params(spec, rng)}; }
    static Mlp zeros(const MlpSpec &spec) {
        return {spec, ParamVec{Vector::Zero(spec.param_count())}};
    }

    Vector operator()(const Vector &x) const { return evaluate(spec, params, x); }
    Matrix batch(const Matrix &X) const { return evaluate_batch(spec, params, X); }
    Eigen::Index param_count() const { return spec.param_count(); }
};

} // namespace odekkl
