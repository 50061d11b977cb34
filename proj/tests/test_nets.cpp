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

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "metaref/nets.hpp"
#include "testutil.hpp"

using namespace metaref;

namespace {

// Independent dense-layer evaluation with a different loop nest than the
// library's matmul.
std::vector<std::vector<double>> naive_linear(const std::vector<std::vector<double>>& x,
                                              const Tensor& w, const Tensor& b) {
    std::vector<std::vector<double>> out(x.size(), std::vector<double>(w.cols(), 0.0));
    for (size_t i = 0; i < x.size(); ++i)
        for (int j = 0; j < w.cols(); ++j) {
            double s = b.at(0, j);
            for (int k = 0; k < w.rows(); ++k) s += x[i][k] * w.at(k, j);
            out[i][j] = s;
        }
    return out;
}

void naive_relu(std::vector<std::vector<double>>& x) {
    for (auto& row : x)
        for (double& v : row) v = v > 0.0 ? v : 0.0;
}

std::vector<std::vector<double>> to_rows(const Tensor& t) {
    std::vector<std::vector<double>> out(t.rows(), std::vector<double>(t.cols()));
    for (int i = 0; i < t.rows(); ++i)
        for (int j = 0; j < t.cols(); ++j) out[i][j] = t.at(i, j);
    return out;
}

NetSpec small_spec(ProblemKind kind) {
    NetSpec s;
    s.feature_dim = 5;
    s.width = 8;
    s.embed_dim = 8;
    s.enc_layers = 2;
    s.dec_layers = 2;
    s.n_classes = 3;
    s.problem = kind;
    return s;
}

} // namespace

TEST_CASE("encoder basics") {
    NetSpec spec = small_spec(ProblemKind::Regression);

    SECTION("zero parameters give zero embeddings") {
        ModelParams p;
        p.spec = spec;
        Rng rng(1);
        p = init_model(spec, rng);
        for (Tensor& t : p.tensors)
            for (size_t i = 0; i < t.size(); ++i) t[i] = 0.0;
        Rng data_rng(2);
        Tensor X = testutil::random_tensor(data_rng, 6, spec.feature_dim);
        Tensor E = encode(p, X);
        REQUIRE(E.rows() == 6);
        REQUIRE(E.cols() == spec.embed_dim);
        for (size_t i = 0; i < E.size(); ++i) CHECK(E[i] == 0.0);
    }

    SECTION("rows are encoded independently of the batch around them") {
        Rng rng(3);
        ModelParams p = init_model(spec, rng);
        Tensor batch = testutil::random_tensor(rng, 8, spec.feature_dim);
        Tensor single(1, spec.feature_dim);
        for (int j = 0; j < spec.feature_dim; ++j) single.at(0, j) = batch.at(5, j);
        Tensor eb = encode(p, batch);
        Tensor es = encode(p, single);
        for (int j = 0; j < spec.embed_dim; ++j) CHECK(es.at(0, j) == eb.at(5, j));
    }

    SECTION("matches an independent layer-by-layer evaluation") {
        Rng rng(4);
        ModelParams p = init_model(spec, rng);
        Tensor X = testutil::random_tensor(rng, 4, spec.feature_dim);

        auto h = to_rows(X);
        auto h1 = naive_linear(h, p.tensors[0], p.tensors[1]);
        naive_relu(h1);
        auto h2 = naive_linear(h1, p.tensors[2], p.tensors[3]);
        naive_relu(h2);
        for (size_t i = 0; i < h2.size(); ++i)
            for (size_t j = 0; j < h2[i].size(); ++j) h2[i][j] += h1[i][j];

        Tensor E = encode(p, X);
        for (int i = 0; i < E.rows(); ++i)
            for (int j = 0; j < E.cols(); ++j)
                CHECK(std::fabs(E.at(i, j) - h2[i][j]) <= 1e-12);
    }
}

TEST_CASE("predictor outputs") {
    SECTION("classification rows sum to one") {
        NetSpec spec = small_spec(ProblemKind::Classification);
        Rng rng(5);
        ModelParams p = init_model(spec, rng);
        Tensor X = testutil::random_tensor(rng, 7, spec.feature_dim);
        Tensor P = predict(p, X);
        REQUIRE(P.cols() == spec.n_classes);
        for (int i = 0; i < P.rows(); ++i) {
            double s = 0.0;
            for (int j = 0; j < P.cols(); ++j) {
                s += P.at(i, j);
                CHECK(P.at(i, j) >= 0.0);
            }
            CHECK(std::fabs(s - 1.0) <= 1e-9);
        }
    }

    SECTION("zero-weight regression decoder emits the head bias") {
        NetSpec spec = small_spec(ProblemKind::Regression);
        Rng rng(6);
        ModelParams p = init_model(spec, rng);
        // Zero every decoder weight, set the head bias.
        for (size_t k = static_cast<size_t>(2 * spec.enc_layers); k < p.tensors.size(); ++k)
            for (size_t i = 0; i < p.tensors[k].size(); ++i) p.tensors[k][i] = 0.0;
        p.tensors.back()[0] = 0.37;
        Tensor X = testutil::random_tensor(rng, 5, spec.feature_dim);
        Tensor Y = predict(p, X);
        REQUIRE(Y.cols() == 1);
        for (int i = 0; i < Y.rows(); ++i) CHECK(Y.at(i, 0) == 0.37);
    }

    SECTION("matches an independent full-network evaluation") {
        NetSpec spec = small_spec(ProblemKind::Classification);
        Rng rng(7);
        ModelParams p = init_model(spec, rng);
        Tensor X = testutil::random_tensor(rng, 3, spec.feature_dim);

        auto h1 = naive_linear(to_rows(X), p.tensors[0], p.tensors[1]);
        naive_relu(h1);
        auto h2 = naive_linear(h1, p.tensors[2], p.tensors[3]);
        naive_relu(h2);
        for (size_t i = 0; i < h2.size(); ++i)
            for (size_t j = 0; j < h2[i].size(); ++j) h2[i][j] += h1[i][j];
        auto h3 = naive_linear(h2, p.tensors[4], p.tensors[5]);
        naive_relu(h3);
        for (size_t i = 0; i < h3.size(); ++i)
            for (size_t j = 0; j < h3[i].size(); ++j) h3[i][j] += h2[i][j];
        auto z = naive_linear(h3, p.tensors[6], p.tensors[7]);
        for (auto& row : z) {
            double m = row[0];
            for (double v : row) m = std::max(m, v);
            double s = 0.0;
            for (double& v : row) {
                v = std::exp(v - m);
                s += v;
            }
            for (double& v : row) v /= s;
        }

        Tensor P = predict(p, X);
        for (int i = 0; i < P.rows(); ++i)
            for (int j = 0; j < P.cols(); ++j)
                CHECK(std::fabs(P.at(i, j) - z[i][j]) <= 1e-12);
    }

    SECTION("permutation equivariance over batch rows") {
        NetSpec spec = small_spec(ProblemKind::Classification);
        Rng rng(8);
        ModelParams p = init_model(spec, rng);
        Tensor X = testutil::random_tensor(rng, 6, spec.feature_dim);
        std::vector<int> perm = {4, 2, 0, 5, 1, 3};
        Tensor Xp(6, spec.feature_dim);
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < spec.feature_dim; ++j) Xp.at(i, j) = X.at(perm[i], j);
        Tensor P = predict(p, X);
        Tensor Pp = predict(p, Xp);
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < P.cols(); ++j) CHECK(Pp.at(i, j) == P.at(perm[i], j));
    }

    SECTION("feature column mismatch is a contract violation") {
        NetSpec spec = small_spec(ProblemKind::Regression);
        Rng rng(9);
        ModelParams p = init_model(spec, rng);
        CHECK_THROWS_AS(predict(p, Tensor(3, spec.feature_dim + 1, 0.1)), ContractError);
    }
}

TEST_CASE("predictor gradients match finite differences") {
    for (ProblemKind kind : {ProblemKind::Regression, ProblemKind::Classification}) {
        NetSpec spec = small_spec(kind);
        Rng rng(10);
        ModelParams p = init_model(spec, rng);
        Tensor X = testutil::random_tensor(rng, 6, spec.feature_dim);
        Tensor Wt = testutil::random_tensor(rng, 6, spec.out_dim());

        testutil::ScalarBuilder build = [spec, X, Wt](Record& rec, const std::vector<Var>& v) {
            Var pred = predict_t(spec, v, rec.constant(X));
            return mean_all(mul(pred, rec.constant(Wt)));
        };
        const double err = testutil::gradcheck_error(build, p.tensors, 1e-5);
        INFO((kind == ProblemKind::Regression ? "regression" : "classification"));
        CHECK(err <= 1e-4);
    }
}

TEST_CASE("referee network") {
    RefereeSpec spec;
    spec.embed_dim = 8;
    spec.hidden = 6;
    spec.hidden_layers = 2;
    REQUIRE(spec.input_dim() == 9);

    SECTION("zero weights give a zero factor") {
        Rng rng(11);
        RefereeParams w = init_referee(spec, rng);
        for (Tensor& t : w.tensors)
            for (size_t i = 0; i < t.size(); ++i) t[i] = 0.0;
        Rng erng(12);
        Tensor emb = testutil::random_tensor(erng, 1, spec.embed_dim);
        CHECK(meta_ref_factor(w, emb, 0.42) == 0.0);
    }

    SECTION("purely functional: identical inputs give identical outputs") {
        Rng rng(13);
        RefereeParams w = init_referee(spec, rng);
        Tensor emb = testutil::random_tensor(rng, 1, spec.embed_dim);
        CHECK(meta_ref_factor(w, emb, -0.2) == meta_ref_factor(w, emb, -0.2));
    }

    SECTION("matches a standalone forward over the concatenated input") {
        Rng rng(14);
        RefereeParams w = init_referee(spec, rng);
        Tensor emb = testutil::random_tensor(rng, 1, spec.embed_dim);
        const double rel = 0.31;

        // Stack w_embed and w_rel into the full (e+1) x h input matrix
        // and run the network on [embedding, rel].
        std::vector<double> in(static_cast<size_t>(spec.input_dim()));
        for (int j = 0; j < spec.embed_dim; ++j) in[j] = emb.at(0, j);
        in[spec.embed_dim] = rel;
        Tensor stacked(spec.input_dim(), spec.hidden);
        for (int i = 0; i < spec.embed_dim; ++i)
            for (int j = 0; j < spec.hidden; ++j) stacked.at(i, j) = w.tensors[0].at(i, j);
        for (int j = 0; j < spec.hidden; ++j) stacked.at(spec.embed_dim, j) = w.tensors[1].at(0, j);

        auto h = naive_linear({in}, stacked, w.tensors[2]);
        naive_relu(h);
        auto h2 = naive_linear(h, w.tensors[3], w.tensors[4]);
        naive_relu(h2);
        auto out = naive_linear(h2, w.tensors[5], w.tensors[6]);

        CHECK(std::fabs(meta_ref_factor(w, emb, rel) - out[0][0]) <= 1e-12);
    }

    SECTION("consumes only the performance difference") {
        Rng rng(15);
        RefereeParams w = init_referee(spec, rng);
        Tensor emb = testutil::random_tensor(rng, 1, spec.embed_dim);
        const double m = 0.63, mhat = 0.55, c = 17.25;
        const double f1 = meta_ref_factor(w, emb, m - mhat);
        const double f2 = meta_ref_factor(w, emb, (m + c) - (mhat + c));
        CHECK(std::fabs(f1 - f2) <= 1e-12);
    }

    SECTION("non-finite relative performance is rejected") {
        Rng rng(16);
        RefereeParams w = init_referee(spec, rng);
        Tensor emb(1, spec.embed_dim, 0.1);
        CHECK_THROWS_AS(meta_ref_factor(w, emb, std::nan("")), NumericError);
    }

    SECTION("gradients w.r.t. referee weights match finite differences") {
        Rng rng(17);
        RefereeParams w = init_referee(spec, rng);
        Tensor emb = testutil::random_tensor(rng, 1, spec.embed_dim);
        testutil::ScalarBuilder build = [spec, emb](Record& rec, const std::vector<Var>& v) {
            return referee_t(spec, v, rec.constant(emb), rec.constant(Tensor::scalar(0.2)));
        };
        CHECK(testutil::gradcheck_error(build, w.tensors, 1e-5) <= 1e-4);
    }
}

TEST_CASE("initialization is reproducible and seed-dependent") {
    NetSpec spec = small_spec(ProblemKind::Classification);
    Rng a(1234), b(1234), c(4321);
    ModelParams pa = init_model(spec, a);
    ModelParams pb = init_model(spec, b);
    ModelParams pc = init_model(spec, c);
    REQUIRE(pa.tensors.size() == pb.tensors.size());
    bool all_equal_ab = true, all_equal_ac = true;
    for (size_t i = 0; i < pa.tensors.size(); ++i) {
        all_equal_ab = all_equal_ab && bitwise_equal(pa.tensors[i], pb.tensors[i]);
        all_equal_ac = all_equal_ac && bitwise_equal(pa.tensors[i], pc.tensors[i]);
    }
    CHECK(all_equal_ab);
    CHECK_FALSE(all_equal_ac);

    CHECK(pa.tensors.size() == model_param_names(spec).size());
    RefereeSpec rs;
    Rng r(5);
    CHECK(init_referee(rs, r).tensors.size() == referee_param_names(rs).size());
}
