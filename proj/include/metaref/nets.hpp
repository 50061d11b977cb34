// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied. See the License for the specific language governing
// permissions and limitations under the License.

#pragma once

#include <string>
#include <vector>

#include "metaref/autodiff.hpp"
#include "metaref/errors.hpp"
#include "metaref/rng.hpp"
#include "metaref/tensor.hpp"

namespace metaref {

// The predictor F = decode(encode(x)) and the referee network that maps
// (pooled embedding, relative performance) to a fairness factor. Forward
// passes are templated over the value type so the same code runs on
// plain tensors for evaluation and on tape values for training.

enum class ProblemKind { Regression, Classification };

inline std::string problem_name(ProblemKind p) {
    return p == ProblemKind::Regression ? "regression" : "classification";
}

inline ProblemKind parse_problem(const std::string& s) {
    if (s == "regression") return ProblemKind::Regression;
    if (s == "classification") return ProblemKind::Classification;
    throw ValidationError("unknown problem kind '" + s +
                          "' (expected regression or classification)");
}

struct NetSpec {
    int feature_dim = 8;
    int width = 32;      // hidden width, equal to the embedding size
    int embed_dim = 32;  // encoder output size
    int enc_layers = 2;  // >= 1; first layer maps features -> width
    int dec_layers = 2;  // >= 1; last layer is the output head
    int n_classes = 2;   // classification only
    ProblemKind problem = ProblemKind::Classification;

    int out_dim() const { return problem == ProblemKind::Classification ? n_classes : 1; }

    void validate() const {
        if (feature_dim < 1 || width < 1 || enc_layers < 1 || dec_layers < 1)
            throw ValidationError("NetSpec: dimensions and layer counts must be positive");
        if (embed_dim != width)
            throw ValidationError("NetSpec: embed_dim must equal width (residual layers)");
        if (problem == ProblemKind::Classification && n_classes < 2)
            throw ValidationError("NetSpec: classification needs at least 2 classes");
    }
};

struct RefereeSpec {
    int embed_dim = 32;
    int hidden = 16;
    int hidden_layers = 1;

    // The referee consumes the pooled embedding plus one relative
    // performance scalar.
    int input_dim() const { return embed_dim + 1; }

    void validate() const {
        if (embed_dim < 1 || hidden < 1 || hidden_layers < 1)
            throw ValidationError("RefereeSpec: dimensions must be positive");
    }
};

// Parameter tensors in a fixed order shared by the forward passes, the
// initializer and the checkpoint format.
struct ModelParams {
    NetSpec spec;
    std::vector<Tensor> tensors;
};

struct RefereeParams {
    RefereeSpec spec;
    // Layout: w_embed (e x h), w_rel (1 x h), b0, then per extra hidden
    // layer w/b, then w_out (h x 1), b_out. w_embed and w_rel are the
    // two row blocks of one (e+1) x h input matrix.
    std::vector<Tensor> tensors;
};

inline std::vector<std::string> model_param_names(const NetSpec& spec) {
    std::vector<std::string> names;
    for (int i = 0; i < spec.enc_layers; ++i) {
        names.push_back("enc.w" + std::to_string(i));
        names.push_back("enc.b" + std::to_string(i));
    }
    for (int i = 0; i + 1 < spec.dec_layers; ++i) {
        names.push_back("dec.w" + std::to_string(i));
        names.push_back("dec.b" + std::to_string(i));
    }
    names.push_back("head.w");
    names.push_back("head.b");
    return names;
}

inline std::vector<std::string> referee_param_names(const RefereeSpec& spec) {
    std::vector<std::string> names = {"ref.w_embed", "ref.w_rel", "ref.b0"};
    for (int i = 1; i < spec.hidden_layers; ++i) {
        names.push_back("ref.w" + std::to_string(i));
        names.push_back("ref.b" + std::to_string(i));
    }
    names.push_back("ref.w_out");
    names.push_back("ref.b_out");
    return names;
}

namespace detail {

// Uniform fan-in init: U(-sqrt(1/fan_in), sqrt(1/fan_in)), row-major
// fill order so parameter draws are reproducible from the seed.
inline Tensor init_weight(Rng& rng, int rows, int cols, int fan_in) {
    const double bound = std::sqrt(1.0 / fan_in);
    Tensor w(rows, cols);
    for (size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
    return w;
}

} // namespace detail

inline ModelParams init_model(const NetSpec& spec, Rng& rng) {
    spec.validate();
    ModelParams p;
    p.spec = spec;
    int in = spec.feature_dim;
    for (int i = 0; i < spec.enc_layers; ++i) {
        p.tensors.push_back(detail::init_weight(rng, in, spec.width, in));
        p.tensors.push_back(Tensor(1, spec.width));
        in = spec.width;
    }
    for (int i = 0; i + 1 < spec.dec_layers; ++i) {
        p.tensors.push_back(detail::init_weight(rng, spec.width, spec.width, spec.width));
        p.tensors.push_back(Tensor(1, spec.width));
    }
    p.tensors.push_back(detail::init_weight(rng, spec.width, spec.out_dim(), spec.width));
    p.tensors.push_back(Tensor(1, spec.out_dim()));
    return p;
}

inline RefereeParams init_referee(const RefereeSpec& spec, Rng& rng) {
    spec.validate();
    RefereeParams p;
    p.spec = spec;
    // w_embed and w_rel share the fan-in of the concatenated input.
    p.tensors.push_back(detail::init_weight(rng, spec.embed_dim, spec.hidden, spec.input_dim()));
    p.tensors.push_back(detail::init_weight(rng, 1, spec.hidden, spec.input_dim()));
    p.tensors.push_back(Tensor(1, spec.hidden));
    for (int i = 1; i < spec.hidden_layers; ++i) {
        p.tensors.push_back(detail::init_weight(rng, spec.hidden, spec.hidden, spec.hidden));
        p.tensors.push_back(Tensor(1, spec.hidden));
    }
    p.tensors.push_back(detail::init_weight(rng, spec.hidden, 1, spec.hidden));
    p.tensors.push_back(Tensor(1, 1));
    return p;
}

// Numerically stable row softmax built from primitive ops.
template <class V>
V softmax_rows(const V& z) {
    V shifted = sub(z, rowwise_max(z));
    V e = exp(shifted);
    return divide(e, rowwise_sum(e));
}

// Encoder: first layer maps features to the hidden width, later layers
// are residual.
template <class V>
V encode_t(const NetSpec& spec, const std::vector<V>& params, const V& X) {
    V h = relu(add(matmul(X, params[0]), params[1]));
    for (int i = 1; i < spec.enc_layers; ++i)
        h = add(relu(add(matmul(h, params[2 * i]), params[2 * i + 1])), h);
    return h;
}

template <class V>
V decode_t(const NetSpec& spec, const std::vector<V>& params, const V& embedding) {
    size_t k = static_cast<size_t>(2 * spec.enc_layers);
    V h = embedding;
    for (int i = 0; i + 1 < spec.dec_layers; ++i, k += 2)
        h = add(relu(add(matmul(h, params[k]), params[k + 1])), h);
    V out = add(matmul(h, params[k]), params[k + 1]);
    if (spec.problem == ProblemKind::Classification) return softmax_rows(out);
    return out;
}

template <class V>
V predict_t(const NetSpec& spec, const std::vector<V>& params, const V& X) {
    return decode_t(spec, params, encode_t(spec, params, X));
}

// Referee forward. embedding is the mean-pooled encoder output of one
// location's minibatch (1 x e); rel is m_i - M_hat (1 x 1).
template <class V>
V referee_t(const RefereeSpec& spec, const std::vector<V>& params, const V& embedding,
            const V& rel) {
    V h = relu(add(add(matmul(embedding, params[0]), mul(rel, params[1])), params[2]));
    size_t k = 3;
    for (int i = 1; i < spec.hidden_layers; ++i, k += 2)
        h = relu(add(matmul(h, params[k]), params[k + 1]));
    return add(matmul(h, params[k]), params[k + 1]);
}

namespace detail {

inline void check_features(const NetSpec& spec, const Tensor& X) {
    if (X.cols() != spec.feature_dim)
        throw ContractError("predict: expected " + std::to_string(spec.feature_dim) +
                            " feature columns, got " + std::to_string(X.cols()));
}

} // namespace detail

inline Tensor encode(const ModelParams& p, const Tensor& X) {
    detail::check_features(p.spec, X);
    return encode_t(p.spec, p.tensors, X);
}

inline Tensor predict(const ModelParams& p, const Tensor& X) {
    detail::check_features(p.spec, X);
    return predict_t(p.spec, p.tensors, X);
}

inline double meta_ref_factor(const RefereeParams& p, const Tensor& embedding, double rel) {
    if (embedding.rows() != 1 || embedding.cols() != p.spec.embed_dim)
        throw ContractError("meta_ref_factor: embedding must be 1x" +
                            std::to_string(p.spec.embed_dim));
    if (!std::isfinite(rel)) throw NumericError("meta_ref_factor: non-finite relative performance");
    return referee_t(p.spec, p.tensors, embedding, Tensor::scalar(rel)).item();
}

// Mean embedding over a minibatch: (n x e) -> (1 x e).
template <class V>
V mean_rows(const V& m, int n_rows) {
    V s = colwise_sum(m);
    return mul(s, scalar_const(s, 1.0 / n_rows));
}

inline std::vector<Var> lift_leaves(Record& rec, const std::vector<Tensor>& ts) {
    std::vector<Var> out;
    out.reserve(ts.size());
    for (const Tensor& t : ts) out.push_back(rec.leaf(t));
    return out;
}

inline std::vector<Var> lift_consts(Record& rec, const std::vector<Tensor>& ts) {
    std::vector<Var> out;
    out.reserve(ts.size());
    for (const Tensor& t : ts) out.push_back(rec.constant(t));
    return out;
}

inline std::vector<Tensor> values_of(const std::vector<Var>& vs) {
    std::vector<Tensor> out;
    out.reserve(vs.size());
    for (const Var& v : vs) out.push_back(v.value());
    return out;
}

} // namespace metaref
