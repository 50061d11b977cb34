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

#include "metaref/autodiff.hpp"
#include "metaref/rng.hpp"
#include "testutil.hpp"

using namespace metaref;
using testutil::ScalarBuilder;

TEST_CASE("forward evaluation matches direct arithmetic") {
    Record rec;

    Var x = rec.leaf(Tensor::scalar(3.0));
    CHECK(mul(x, x).item() == 9.0);

    Var zero = rec.constant(Tensor::scalar(0.0));
    CHECK(mul(zero, x).item() == 0.0);

    Var x1 = rec.leaf(Tensor::scalar(1.0));
    Var y2 = rec.leaf(Tensor::scalar(2.0));
    Var expr = add(mul(x1, y2), sin(x1));
    CHECK(expr.item() == Catch::Approx(2.8414709848078965).epsilon(1e-15));
}

TEST_CASE("backward on simple expressions") {
    SECTION("square") {
        Record rec;
        Var x = rec.leaf(Tensor::scalar(3.0));
        Gradients g = rec.backward_raw(mul(x, x));
        CHECK(g.grad(x).item() == 6.0);
    }
    SECTION("constant root has zero gradient everywhere") {
        Record rec;
        Var x = rec.leaf(Tensor::scalar(4.0));
        Var c = rec.constant(Tensor::scalar(5.0));
        Gradients g = rec.backward_raw(c);
        CHECK_FALSE(g.has(x));
        CHECK(g.grad(x).item() == 0.0);
    }
    SECTION("exp(x)*x at x=1") {
        Record rec;
        Var x = rec.leaf(Tensor::scalar(1.0));
        Gradients g = rec.backward_raw(mul(exp(x), x));
        CHECK(g.grad(x).item() == Catch::Approx(5.43656365691809047).margin(1e-12));

        ScalarBuilder build = [](Record& r, const std::vector<Var>& v) {
            return mul(exp(v[0]), v[0]);
        };
        CHECK(testutil::gradcheck_error(build, {Tensor::scalar(1.0)}) <= 1e-5);
    }
}

namespace {

// Scalarize a tensor expression with fixed random weights so every
// element contributes a distinct term to the root.
ScalarBuilder weighted(std::function<Var(Record&, const std::vector<Var>&)> f, Tensor w) {
    return [f, w](Record& rec, const std::vector<Var>& v) {
        return sum_all(mul(f(rec, v), rec.constant(w)));
    };
}

} // namespace

TEST_CASE("gradients match finite differences for every primitive") {
    Rng rng(20260814);
    const int r = 3, c = 4;
    const Tensor w = testutil::random_tensor(rng, r, c);
    const Tensor wcol = testutil::random_tensor(rng, r, 1);
    const Tensor wrow = testutil::random_tensor(rng, 1, c);

    const Tensor a = testutil::random_tensor(rng, r, c);
    const Tensor b_away0 = testutil::random_tensor_avoiding(rng, r, c, {0.0}, 0.25);
    const Tensor pos = testutil::random_tensor(rng, r, c, 0.25, 2.0);
    const Tensor away0 = testutil::random_tensor_avoiding(rng, r, c, {0.0}, 1e-3);

    Tensor b_gap = testutil::random_tensor(rng, r, c);
    for (size_t i = 0; i < b_gap.size(); ++i)
        if (std::fabs(b_gap[i] - a[i]) < 1e-3) b_gap[i] += 0.05;

    auto check2 = [&](const char* name, Op op, const Tensor& x, const Tensor& y) {
        INFO(name);
        ScalarBuilder build = weighted(
            [op](Record& rec, const std::vector<Var>& v) { return rec.emit(op, v[0], v[1]); }, w);
        CHECK(testutil::gradcheck_error(build, {x, y}) <= 1e-5);
    };
    auto check1 = [&](const char* name, Op op, const Tensor& x, const Tensor& wt) {
        INFO(name);
        ScalarBuilder build = weighted(
            [op](Record& rec, const std::vector<Var>& v) { return rec.emit(op, v[0]); }, wt);
        CHECK(testutil::gradcheck_error(build, {x}) <= 1e-5);
    };

    check2("add", Op::Add, a, b_gap);
    check2("sub", Op::Sub, a, b_gap);
    check2("mul", Op::Mul, a, b_gap);
    check2("div", Op::Div, a, b_away0);
    check2("safe_div0", Op::SafeDiv0, a, b_away0);
    check2("minimum", Op::Minimum, a, b_gap);
    check2("maximum", Op::Maximum, a, b_gap);

    check1("neg", Op::Neg, a, w);
    check1("relu", Op::Relu, away0, w);
    check1("exp", Op::Exp, a, w);
    check1("log", Op::Log, pos, w);
    check1("sqrt", Op::Sqrt, pos, w);
    check1("sin", Op::Sin, a, w);
    check1("cos", Op::Cos, a, w);
    check1("abs", Op::Abs, away0, w);
    check1("transpose", Op::Transpose, a, transpose(w));
    check1("sum_all", Op::SumAll, a, Tensor::scalar(1.3));
    check1("mean_all", Op::MeanAll, a, Tensor::scalar(-0.7));
    check1("colwise_sum", Op::ColwiseSum, a, wrow);
    check1("rowwise_sum", Op::RowwiseSum, a, wcol);

    // rowwise_max needs a clear winner per row so the finite difference
    // does not cross an argmax change.
    Tensor gap = a;
    for (int i = 0; i < r; ++i) {
        int best = 0;
        for (int j = 1; j < c; ++j)
            if (gap.at(i, j) > gap.at(i, best)) best = j;
        gap.at(i, best) += 0.5;
    }
    check1("rowwise_max", Op::RowwiseMax, gap, wcol);

    SECTION("matmul") {
        const Tensor m1 = testutil::random_tensor(rng, 3, 4);
        const Tensor m2 = testutil::random_tensor(rng, 4, 2);
        const Tensor wm = testutil::random_tensor(rng, 3, 2);
        ScalarBuilder build = weighted(
            [](Record& rec, const std::vector<Var>& v) { return matmul(v[0], v[1]); }, wm);
        CHECK(testutil::gradcheck_error(build, {m1, m2}) <= 1e-5);
    }

    SECTION("small network composite") {
        const Tensor X = testutil::random_tensor(rng, 5, 3);
        const Tensor W1 = testutil::random_tensor_avoiding(rng, 3, 4, {0.0}, 1e-2, -1.0, 1.0);
        const Tensor b1 = testutil::random_tensor(rng, 1, 4, -0.5, 0.5);
        const Tensor W2 = testutil::random_tensor(rng, 4, 1, -1.0, 1.0);
        ScalarBuilder build = [X](Record& rec, const std::vector<Var>& v) {
            Var h = relu(add(matmul(rec.constant(X), v[0]), v[1]));
            return mean_all(matmul(h, v[2]));
        };
        CHECK(testutil::gradcheck_error(build, {W1, b1, W2}) <= 1e-5);
    }
}

TEST_CASE("gradients flow through broadcast shapes") {
    Rng rng(7);
    const Tensor a = testutil::random_tensor(rng, 3, 4);
    const Tensor s = Tensor::scalar(1.7);
    const Tensor row = testutil::random_tensor(rng, 1, 4);
    const Tensor col = testutil::random_tensor_avoiding(rng, 3, 1, {0.0}, 0.25);
    const Tensor w = testutil::random_tensor(rng, 3, 4);

    for (Op op : {Op::Add, Op::Sub, Op::Mul}) {
        for (const Tensor* small : {&s, &row, &col}) {
            ScalarBuilder build = weighted(
                [op](Record& rec, const std::vector<Var>& v) { return rec.emit(op, v[0], v[1]); },
                w);
            INFO(op_name(op) << " with " << small->shape_str());
            CHECK(testutil::gradcheck_error(build, {a, *small}) <= 1e-5);
        }
    }

    ScalarBuilder div_col = weighted(
        [](Record& rec, const std::vector<Var>& v) { return divide(v[0], v[1]); }, w);
    CHECK(testutil::gradcheck_error(div_col, {a, col}) <= 1e-5);
}

TEST_CASE("second derivative via nested records") {
    for (double xv : {-1.0, 0.5, 2.0}) {
        Record outer;
        Var x = outer.leaf(Tensor::scalar(xv));

        Record inner(outer);
        REQUIRE(inner.level() == 1);
        Var u = inner.use(x);
        Var u2 = mul(u, u);
        Var y = mul(u2, u2);

        VarGrads first = inner.backward_graph(y);
        Var dy = first.grad(u);
        CHECK(dy.item() == Catch::Approx(4.0 * xv * xv * xv).margin(1e-10));

        Gradients second = inner.backward_raw(dy);
        CHECK(second.grad(u).item() == Catch::Approx(12.0 * xv * xv).margin(1e-8));
    }
}

TEST_CASE("grad_of_grad matches the hand-derived chain rule") {
    // inner L(t) = (t-1)^2, update t' = t - 0.1 * 2(t-1)
    // outer L~(t') = (t'-1)^2, all at t = 0.
    auto inner = [](Record& rec, const std::vector<Var>& p) {
        Var d = sub(p[0], scalar_const(p[0], 1.0));
        return mul(d, d);
    };
    auto outer = [](Record& rec, const std::vector<Var>& p) {
        Var d = sub(p[0], scalar_const(p[0], 1.0));
        return mul(d, d);
    };
    const std::vector<Tensor> params = {Tensor::scalar(0.0)};

    SECTION("exact second-order gradient") {
        SecondOrderOptions opt;
        opt.inner_rate = 0.1;
        SecondOrderResult res = grad_of_grad(params, inner, outer, opt);
        CHECK(res.updated[0].item() == Catch::Approx(0.2).margin(1e-15));
        CHECK(res.grads[0].item() == Catch::Approx(-1.28).margin(1e-12));

        // Finite differences through the whole episode agree.
        auto outer_at = [&](double t) {
            SecondOrderOptions o;
            o.inner_rate = 0.1;
            return grad_of_grad({Tensor::scalar(t)}, inner, outer, o).outer_loss;
        };
        const double h = 1e-6;
        const double fd = (outer_at(0.0 + h) - outer_at(0.0 - h)) / (2 * h);
        CHECK(res.grads[0].item() == Catch::Approx(fd).epsilon(1e-5));
    }

    SECTION("zero inner rate degenerates to the outer gradient") {
        SecondOrderOptions opt;
        opt.inner_rate = 0.0;
        SecondOrderResult res = grad_of_grad(params, inner, outer, opt);
        CHECK(res.grads[0].item() == -2.0);
    }

    SECTION("first-order mode drops the gradient-through-gradient term") {
        SecondOrderOptions opt;
        opt.inner_rate = 0.1;
        opt.first_order = true;
        SecondOrderResult res = grad_of_grad(params, inner, outer, opt);
        CHECK(res.grads[0].item() == Catch::Approx(-1.6).margin(1e-12));
    }
}

TEST_CASE("backward is linear in the root") {
    Rng rng(99);
    const Tensor xv = testutil::random_tensor(rng, 2, 3);
    const double ca = 1.7, cb = -0.3;

    auto f_of = [](Record& rec, Var x) { return sum_all(mul(x, x)); };
    auto g_of = [](Record& rec, Var x) { return sum_all(sin(x)); };

    Record rec;
    Var x = rec.leaf(xv);
    Var combined = add(mul(rec.constant(Tensor::scalar(ca)), f_of(rec, x)),
                       mul(rec.constant(Tensor::scalar(cb)), g_of(rec, x)));
    Tensor gc = rec.backward_raw(combined).grad(x);

    Record rf;
    Var xf = rf.leaf(xv);
    Tensor gf = rf.backward_raw(f_of(rf, xf)).grad(xf);
    Record rg;
    Var xg = rg.leaf(xv);
    Tensor gg = rg.backward_raw(g_of(rg, xg)).grad(xg);

    for (size_t i = 0; i < gc.size(); ++i) {
        const double want = ca * gf[i] + cb * gg[i];
        const double scale = std::max({1.0, std::fabs(want), std::fabs(gc[i])});
        CHECK(std::fabs(gc[i] - want) <= 1e-12 * scale);
    }
}

TEST_CASE("replaying a record yields bitwise-identical gradients") {
    Rng rng(5);
    const Tensor X = testutil::random_tensor(rng, 4, 3);
    const Tensor W = testutil::random_tensor(rng, 3, 2);

    auto build = [&](Record& rec, Var& wvar) {
        wvar = rec.leaf(W);
        Var h = relu(matmul(rec.constant(X), wvar));
        return mean_all(mul(h, h));
    };

    Record r1;
    Var w1;
    Var root1 = build(r1, w1);
    Tensor g_first = r1.backward_raw(root1).grad(w1);
    Tensor g_again = r1.backward_raw(root1).grad(w1);
    CHECK(bitwise_equal(g_first, g_again));

    Record r2;
    Var w2;
    Var root2 = build(r2, w2);
    Tensor g_rebuilt = r2.backward_raw(root2).grad(w2);
    CHECK(bitwise_equal(g_first, g_rebuilt));

    // Graph-mode gradients evaluate to the same numbers as raw mode.
    VarGrads vg = r2.backward_graph(root2);
    CHECK(bitwise_equal(vg.grad(w2).value(), g_first));
}

TEST_CASE("subgradient conventions at kinks") {
    SECTION("relu at zero routes nothing") {
        Record rec;
        Var x = rec.leaf(Tensor::scalar(0.0));
        CHECK(rec.backward_raw(relu(x)).grad(x).item() == 0.0);
    }
    SECTION("abs at zero picks +1") {
        Record rec;
        Var x = rec.leaf(Tensor::scalar(0.0));
        CHECK(rec.backward_raw(abs(x)).grad(x).item() == 1.0);
    }
    SECTION("min and max ties route to the first argument") {
        Record rec;
        Var a = rec.leaf(Tensor::scalar(1.0));
        Var b = rec.leaf(Tensor::scalar(1.0));
        Gradients gmin = rec.backward_raw(minimum(a, b));
        CHECK(gmin.grad(a).item() == 1.0);
        CHECK(gmin.grad(b).item() == 0.0);
        Gradients gmax = rec.backward_raw(maximum(a, b));
        CHECK(gmax.grad(a).item() == 1.0);
        CHECK(gmax.grad(b).item() == 0.0);
    }
    SECTION("rowwise max tie routes to the first argmax") {
        Record rec;
        Var x = rec.leaf(Tensor::row({1.0, 3.0, 3.0}));
        Tensor g = rec.backward_raw(sum_all(rowwise_max(x))).grad(x);
        CHECK(g.at(0, 0) == 0.0);
        CHECK(g.at(0, 1) == 1.0);
        CHECK(g.at(0, 2) == 0.0);
    }
    SECTION("sqrt of an exact zero contributes no gradient") {
        Record rec;
        Var x = rec.leaf(Tensor::row({0.3, 0.7}));
        Var target = rec.constant(Tensor::row({0.3, 0.7}));
        Var d = sub(x, target);
        Var root = sqrt(mean_all(mul(d, d)));
        Tensor g = rec.backward_raw(root).grad(x);
        CHECK(g.at(0, 0) == 0.0);
        CHECK(g.at(0, 1) == 0.0);
    }
    SECTION("safe division by zero yields zero value and gradients") {
        Record rec;
        Var a = rec.leaf(Tensor::scalar(2.0));
        Var b = rec.leaf(Tensor::scalar(0.0));
        Var q = safe_div0(a, b);
        CHECK(q.item() == 0.0);
        Gradients g = rec.backward_raw(q);
        CHECK(g.grad(a).item() == 0.0);
        CHECK(g.grad(b).item() == 0.0);
    }
}

TEST_CASE("contract violations are reported") {
    SECTION("mixing records") {
        Record r1, r2;
        Var a = r1.leaf(Tensor::scalar(1.0));
        Var b = r2.leaf(Tensor::scalar(2.0));
        CHECK_THROWS_AS(add(a, b), ContractError);
    }
    SECTION("backward root from another record") {
        Record r1, r2;
        Var a = r1.leaf(Tensor::scalar(1.0));
        CHECK_THROWS_AS(r2.backward_raw(a), ContractError);
    }
    SECTION("backward root must be scalar") {
        Record rec;
        Var a = rec.leaf(Tensor(2, 2, 1.0));
        CHECK_THROWS_AS(rec.backward_raw(a), ContractError);
    }
    SECTION("non-finite results are flagged with the op") {
        Record rec;
        Var a = rec.leaf(Tensor::scalar(-1.0));
        CHECK_THROWS_AS(log(a), NumericError);
        Var z = rec.constant(Tensor::scalar(0.0));
        Var one = rec.constant(Tensor::scalar(1.0));
        CHECK_THROWS_AS(divide(one, z), NumericError);
        try {
            log(a);
            FAIL("expected NumericError");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("log") != std::string::npos);
        }
    }
    SECTION("derivative order beyond the configured max") {
        Record rec; // max_grad_depth = 2
        Var x = rec.leaf(Tensor::scalar(1.5));
        Var x2 = mul(x, x);
        Var y = mul(mul(x2, x2), x2); // x^6
        VarGrads g1 = rec.backward_graph(y);
        VarGrads g2 = rec.backward_graph(g1.grad(x));
        CHECK_THROWS_AS(rec.backward_raw(g2.grad(x)), ContractError);

        // With a deeper budget the same third derivative works: 120 x^3.
        Record deep(3);
        Var xd = deep.leaf(Tensor::scalar(1.5));
        Var xd2 = mul(xd, xd);
        Var yd = mul(mul(xd2, xd2), xd2);
        VarGrads d1 = deep.backward_graph(yd);
        VarGrads d2 = deep.backward_graph(d1.grad(xd));
        Gradients d3 = deep.backward_raw(d2.grad(xd));
        CHECK(d3.grad(xd).item() == Catch::Approx(120.0 * 1.5 * 1.5 * 1.5).margin(1e-8));
    }
    SECTION("use requires an ancestor record") {
        Record r1, r2;
        Var a = r1.leaf(Tensor::scalar(1.0));
        CHECK_THROWS_AS(r2.use(a), ContractError);
    }
}

TEST_CASE("use imports values across nested records") {
    Record parent;
    Var x = parent.leaf(Tensor::scalar(2.0));

    Record child(parent);
    Var u = child.use(x);
    CHECK(u.rec == &child);
    CHECK(u.item() == 2.0);

    Gradients g = child.backward_raw(mul(u, u));
    CHECK(g.grad(u).item() == 4.0);

    // use within the same record is the identity.
    Var same = parent.use(x);
    CHECK(same.id == x.id);
}

TEST_CASE("nodes off the root's path have zero gradient") {
    Record rec;
    Var x = rec.leaf(Tensor::scalar(1.0));
    Var y = rec.leaf(Tensor::scalar(2.0));
    Var root = mul(x, x);
    Gradients g = rec.backward_raw(root);
    CHECK(g.has(x));
    CHECK_FALSE(g.has(y));
    CHECK(g.grad(y).item() == 0.0);
}
