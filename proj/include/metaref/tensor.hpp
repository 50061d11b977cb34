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
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "metaref/errors.hpp"

namespace metaref {

// Dense row-major matrix of doubles. Scalars are 1x1, row vectors 1xc,
// column vectors rx1. All numeric code in the library runs on this type,
// either directly or through the autodiff wrapper that shares the same
// operation vocabulary.
class Tensor {
public:
    Tensor() = default;

    Tensor(int rows, int cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, fill) {
        if (rows <= 0 || cols <= 0) {
            throw ContractError("Tensor: dimensions must be positive, got " +
                                std::to_string(rows) + "x" + std::to_string(cols));
        }
    }

    Tensor(int rows, int cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (rows <= 0 || cols <= 0 ||
            data_.size() != static_cast<size_t>(rows) * cols) {
            throw ContractError("Tensor: data size does not match shape");
        }
    }

    static Tensor scalar(double v) {
        Tensor t(1, 1);
        t.data_[0] = v;
        return t;
    }

    static Tensor row(std::initializer_list<double> vs) {
        Tensor t(1, static_cast<int>(vs.size()), std::vector<double>(vs));
        return t;
    }

    static Tensor column(std::initializer_list<double> vs) {
        Tensor t(static_cast<int>(vs.size()), 1, std::vector<double>(vs));
        return t;
    }

    bool defined() const { return rows_ > 0; }
    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return data_.size(); }

    double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
    double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols_ + c]; }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    bool is_scalar() const { return rows_ == 1 && cols_ == 1; }

    double item() const {
        if (!is_scalar()) throw ContractError("Tensor::item: not a 1x1 tensor");
        return data_[0];
    }

    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

namespace detail {

// Broadcast support: shapes must be identical, or the smaller side must
// be 1x1, a 1xc row (against rxc), or an rx1 column (against rxc).
inline bool broadcast_ok(const Tensor& a, const Tensor& b) {
    if (a.same_shape(b)) return true;
    if (a.is_scalar() || b.is_scalar()) return true;
    if (b.rows() == 1 && b.cols() == a.cols()) return true;
    if (a.rows() == 1 && a.cols() == b.cols()) return true;
    if (b.cols() == 1 && b.rows() == a.rows()) return true;
    if (a.cols() == 1 && a.rows() == b.rows()) return true;
    return false;
}

inline void require_broadcast(const Tensor& a, const Tensor& b, const char* op) {
    if (!broadcast_ok(a, b)) {
        throw ContractError(std::string(op) + ": incompatible shapes " +
                            a.shape_str() + " vs " + b.shape_str());
    }
}

// Index into a possibly-broadcast operand of an (r, c) result.
inline double bval(const Tensor& t, int r, int c) {
    const int rr = t.rows() == 1 ? 0 : r;
    const int cc = t.cols() == 1 ? 0 : c;
    return t.at(rr, cc);
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, const char* name, F f) {
    require_broadcast(a, b, name);
    const int r = std::max(a.rows(), b.rows());
    const int c = std::max(a.cols(), b.cols());
    Tensor out(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out.at(i, j) = f(bval(a, i, j), bval(b, i, j));
    return out;
}

template <class F>
Tensor map(const Tensor& a, F f) {
    Tensor out(a.rows(), a.cols());
    for (size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return out;
}

} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::zip(a, b, "add", [](double x, double y) { return x + y; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::zip(a, b, "sub", [](double x, double y) { return x - y; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::zip(a, b, "mul", [](double x, double y) { return x * y; });
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
    return detail::zip(a, b, "divide", [](double x, double y) { return x / y; });
}

// Division with the convention 0/anything-zero := 0. Used by gradient
// rules whose exact subderivative at a singular point is defined as zero
// (e.g. sqrt at 0), so that "perfect fit implies zero gradient" holds.
inline Tensor safe_div0(const Tensor& a, const Tensor& b) {
    return detail::zip(a, b, "safe_div0",
                       [](double x, double y) { return y == 0.0 ? 0.0 : x / y; });
}

inline Tensor minimum(const Tensor& a, const Tensor& b) {
    return detail::zip(a, b, "minimum", [](double x, double y) { return x <= y ? x : y; });
}

inline Tensor maximum(const Tensor& a, const Tensor& b) {
    return detail::zip(a, b, "maximum", [](double x, double y) { return x >= y ? x : y; });
}

inline Tensor neg(const Tensor& a) {
    return detail::map(a, [](double x) { return -x; });
}

inline Tensor relu(const Tensor& a) {
    return detail::map(a, [](double x) { return x > 0.0 ? x : 0.0; });
}

inline Tensor exp(const Tensor& a) {
    return detail::map(a, [](double x) { return std::exp(x); });
}

inline Tensor log(const Tensor& a) {
    return detail::map(a, [](double x) { return std::log(x); });
}

inline Tensor sqrt(const Tensor& a) {
    return detail::map(a, [](double x) { return std::sqrt(x); });
}

inline Tensor sin(const Tensor& a) {
    return detail::map(a, [](double x) { return std::sin(x); });
}

inline Tensor cos(const Tensor& a) {
    return detail::map(a, [](double x) { return std::cos(x); });
}

inline Tensor abs(const Tensor& a) {
    return detail::map(a, [](double x) { return std::fabs(x); });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) {
        throw ContractError("matmul: inner dimensions disagree, " + a.shape_str() +
                            " @ " + b.shape_str());
    }
    Tensor out(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i) {
        for (int k = 0; k < a.cols(); ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) continue;
            for (int j = 0; j < b.cols(); ++j) out.at(i, j) += aik * b.at(k, j);
        }
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    Tensor out(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
    return out;
}

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i];
    return Tensor::scalar(s);
}

inline Tensor mean_all(const Tensor& a) {
    return Tensor::scalar(sum_all(a).item() / static_cast<double>(a.size()));
}

// Sum down each column: rxc -> 1xc.
inline Tensor colwise_sum(const Tensor& a) {
    Tensor out(1, a.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) out.at(0, j) += a.at(i, j);
    return out;
}

// Sum across each row: rxc -> rx1.
inline Tensor rowwise_sum(const Tensor& a) {
    Tensor out(a.rows(), 1);
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) out.at(i, 0) += a.at(i, j);
    return out;
}

// Max across each row: rxc -> rx1. Ties resolve to the lowest column
// index, matching the subgradient convention used by the autodiff rules.
inline Tensor rowwise_max(const Tensor& a) {
    Tensor out(a.rows(), 1);
    for (int i = 0; i < a.rows(); ++i) {
        double best = a.at(i, 0);
        for (int j = 1; j < a.cols(); ++j)
            if (a.at(i, j) > best) best = a.at(i, j);
        out.at(i, 0) = best;
    }
    return out;
}

// Sum a broadcast result back down to the shape of the operand it was
// broadcast from (the adjoint of broadcasting).
inline Tensor reduce_to(const Tensor& t, int rows, int cols) {
    if (t.rows() == rows && t.cols() == cols) return t;
    if (rows == 1 && cols == 1) return sum_all(t);
    if (rows == 1 && cols == t.cols()) return colwise_sum(t);
    if (cols == 1 && rows == t.rows()) return rowwise_sum(t);
    throw ContractError("reduce_to: cannot reduce " + t.shape_str() + " to " +
                        std::to_string(rows) + "x" + std::to_string(cols));
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        // Compare representations so that 0.0 == -0.0 counts as different
        // only when the bits differ.
        if (a[i] != b[i]) return false;
        if (std::signbit(a[i]) != std::signbit(b[i])) return false;
    }
    return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ContractError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

} // namespace metaref
