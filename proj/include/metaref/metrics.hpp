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

#include <cmath>
#include <string>
#include <vector>

#include "metaref/autodiff.hpp"
#include "metaref/nets.hpp"
#include "metaref/tensor.hpp"

namespace metaref {

// Losses, per-location metrics, locational fairness and the pairwise
// method comparison used in reports. Training needs differentiable
// (surrogate) versions; evaluation always uses the hard ones.

constexpr double kProbClamp = 1e-12;  // cross-entropy probability floor
constexpr double kSoftF1Eps = 1e-12;  // soft-F1 smoothing

struct LocalEval {
    int location_id = 0;
    double loss = 0.0;
    double metric = 0.0;
    std::vector<Tensor> gradient;  // d loss / d model params
};

struct GlobalMetric {
    double m_hat = 0.0;
    int sample_count = 0;
};

struct TaskReport {
    int task_id = 0;
    std::string method;
    std::vector<double> per_location_quality;
    double quality = 0.0;  // pooled hard metric over the task
    double lf = 0.0;
    double alf = 0.0;
    double p_star = 0.0;
    bool degenerate_f1 = false;  // some location had no positives at all
};

namespace detail {

inline Var constant_like(const Var& like, Tensor t) { return like.rec->constant(std::move(t)); }
inline Tensor constant_like(const Tensor&, Tensor t) { return t; }

inline void check_pred_labels(int pred_rows, const Tensor& labels, const char* who) {
    if (labels.cols() != 1)
        throw ContractError(std::string(who) + ": labels must be a column vector");
    if (labels.rows() != pred_rows)
        throw ContractError(std::string(who) + ": " + std::to_string(pred_rows) +
                            " predictions vs " + std::to_string(labels.rows()) + " labels");
}

inline Tensor one_hot(const Tensor& labels, int n_classes) {
    Tensor oh(labels.rows(), n_classes);
    for (int i = 0; i < labels.rows(); ++i) {
        const double l = labels.at(i, 0);
        const long long c = std::llround(l);
        if (std::fabs(l - double(c)) > 1e-9 || c < 0 || c >= n_classes)
            throw ContractError("label '" + std::to_string(l) + "' is not a class id below " +
                                std::to_string(n_classes));
        oh.at(i, static_cast<int>(c)) = 1.0;
    }
    return oh;
}

template <class V>
int rows_of(const V& v) {
    return v.rows();
}

} // namespace detail

// Mean cross-entropy (classification, probabilities clamped at 1e-12)
// or mean squared error (regression). Differentiable w.r.t. pred.
template <class V>
V loss_t(ProblemKind problem, const V& pred, const Tensor& labels) {
    detail::check_pred_labels(detail::rows_of(pred), labels, "loss");
    if (problem == ProblemKind::Classification) {
        V oh = detail::constant_like(pred, detail::one_hot(labels, pred.cols()));
        V p_true = rowwise_sum(mul(pred, oh));
        V clamped = maximum(p_true, detail::constant_like(pred, Tensor::scalar(kProbClamp)));
        return mean_all(neg(log(clamped)));
    }
    V d = sub(pred, detail::constant_like(pred, labels));
    return mean_all(mul(d, d));
}

inline double loss(ProblemKind problem, const Tensor& pred, const Tensor& labels) {
    return loss_t(problem, pred, labels).item();
}

// Hard per-row class decision: first argmax.
inline std::vector<int> hard_classes(const Tensor& pred) {
    std::vector<int> out(static_cast<size_t>(pred.rows()));
    for (int i = 0; i < pred.rows(); ++i) {
        int best = 0;
        for (int j = 1; j < pred.cols(); ++j)
            if (pred.at(i, j) > pred.at(i, best)) best = j;
        out[static_cast<size_t>(i)] = best;
    }
    return out;
}

// Evaluation metric: hard F1 of class 1 for classification, RMSE for
// regression. The degenerate F1 case (no positives anywhere) scores 1
// when predictions are also all-negative, else 0; *degenerate reports
// that the rule fired.
inline double metric_eval(ProblemKind problem, const Tensor& pred, const Tensor& labels,
                          bool* degenerate = nullptr) {
    detail::check_pred_labels(pred.rows(), labels, "metric");
    if (degenerate) *degenerate = false;
    if (problem == ProblemKind::Regression) {
        double ss = 0.0;
        for (int i = 0; i < pred.rows(); ++i) {
            const double d = pred.at(i, 0) - labels.at(i, 0);
            ss += d * d;
        }
        return std::sqrt(ss / pred.rows());
    }
    if (pred.cols() != 2) throw ContractError("metric: F1 requires binary classification");
    const std::vector<int> cls = hard_classes(pred);
    int tp = 0, fp = 0, fn = 0;
    for (int i = 0; i < pred.rows(); ++i) {
        const bool truth = labels.at(i, 0) == 1.0;
        const bool guess = cls[static_cast<size_t>(i)] == 1;
        tp += truth && guess;
        fp += !truth && guess;
        fn += truth && !guess;
    }
    const int denom = 2 * tp + fp + fn;
    if (denom == 0) {
        if (degenerate) *degenerate = true;
        return 1.0;  // no positives existed and none were predicted
    }
    return 2.0 * tp / denom;
}

// Differentiable training surrogate: soft-F1 from class-1 probability
// mass for classification, RMSE for regression. Agrees with metric_eval
// on crisp classification outputs.
template <class V>
V metric_surrogate_t(ProblemKind problem, const V& pred, const Tensor& labels) {
    detail::check_pred_labels(detail::rows_of(pred), labels, "metric");
    if (problem == ProblemKind::Regression) {
        V d = sub(pred, detail::constant_like(pred, labels));
        return sqrt(mean_all(mul(d, d)));
    }
    if (pred.cols() != 2) throw ContractError("metric: F1 requires binary classification");
    Tensor pick_pos(1, 2);
    pick_pos.at(0, 1) = 1.0;
    V p1 = rowwise_sum(mul(pred, detail::constant_like(pred, pick_pos)));  // n x 1
    Tensor y = labels;
    Tensor not_y(labels.rows(), 1);
    for (int i = 0; i < labels.rows(); ++i) not_y.at(i, 0) = 1.0 - labels.at(i, 0);
    V tp = sum_all(mul(p1, detail::constant_like(pred, y)));
    V fp = sum_all(mul(p1, detail::constant_like(pred, not_y)));
    V fn = sum_all(mul(sub(detail::constant_like(pred, Tensor::scalar(1.0)), p1),
                       detail::constant_like(pred, y)));
    V eps = detail::constant_like(pred, Tensor::scalar(kSoftF1Eps));
    V two = detail::constant_like(pred, Tensor::scalar(2.0));
    V num = add(mul(two, tp), eps);
    V den = add(add(mul(two, tp), add(fp, fn)), eps);
    return divide(num, den);
}

inline double metric_surrogate(ProblemKind problem, const Tensor& pred, const Tensor& labels) {
    return metric_surrogate_t(problem, pred, labels).item();
}

// LF = sqrt( (1/n) * sum (m_i - m_hat)^2 ).
inline double locational_fairness(const std::vector<double>& metrics, double m_hat) {
    if (metrics.empty()) throw ContractError("locational_fairness: empty metric set");
    double ss = 0.0;
    for (double m : metrics) ss += (m - m_hat) * (m - m_hat);
    return std::sqrt(ss / double(metrics.size()));
}

// Same form with an externally supplied reference quality.
inline double adjusted_fairness(const std::vector<double>& qualities, double p_star) {
    if (qualities.empty()) throw ContractError("adjusted_fairness: empty quality set");
    return locational_fairness(qualities, p_star);
}

// Differentiable fairness loss over per-location surrogate metrics.
template <class V>
V fairness_loss_t(const std::vector<V>& metrics, const V& m_hat) {
    if (metrics.empty()) throw ContractError("fairness_loss: empty metric set");
    V acc = mul(sub(metrics[0], m_hat), sub(metrics[0], m_hat));
    for (size_t i = 1; i < metrics.size(); ++i) {
        V d = sub(metrics[i], m_hat);
        acc = add(acc, mul(d, d));
    }
    V inv_n = detail::constant_like(m_hat, Tensor::scalar(1.0 / double(metrics.size())));
    return sqrt(mul(acc, inv_n));
}

// counts[r][c] = #tasks where method r scored strictly lower than c;
// ties count for neither side.
inline std::vector<std::vector<int>> comparison_matrix(
    const std::vector<std::vector<double>>& scores) {
    const size_t k = scores.size();
    if (k == 0) throw ContractError("comparison_matrix: no methods");
    const size_t n = scores[0].size();
    for (const auto& s : scores)
        if (s.size() != n)
            throw ContractError("comparison_matrix: methods scored on different task sets");
    std::vector<std::vector<int>> counts(k, std::vector<int>(k, 0));
    for (size_t r = 0; r < k; ++r)
        for (size_t c = 0; c < k; ++c)
            for (size_t t = 0; t < n; ++t)
                if (scores[r][t] < scores[c][t]) ++counts[r][c];
    return counts;
}

} // namespace metaref
