#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "xmatch/errors.hpp"

namespace xmatch {

// Dense row-major array of float or double scalars. Values are plain data;
// gradient bookkeeping lives on the tape, not here.
template <typename T>
struct Array {
    std::vector<std::size_t> shape;
    std::vector<T> v;

    Array() = default;

    explicit Array(std::vector<std::size_t> s) : shape(std::move(s)) {
        v.assign(numel_of(shape), T(0));
    }

    Array(std::vector<std::size_t> s, std::vector<T> values) : shape(std::move(s)), v(std::move(values)) {
        if (v.size() != numel_of(shape)) {
            throw ShapeError("value count " + std::to_string(v.size()) + " does not match shape " +
                             shape_string(shape));
        }
    }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t e : s) n *= e;
        return n;
    }

    std::size_t numel() const { return v.size(); }
    std::size_t rank() const { return shape.size(); }

    T& at(std::size_t i) { return v[i]; }
    T at(std::size_t i) const { return v[i]; }

    // 2-d access, row-major.
    T& at(std::size_t r, std::size_t c) { return v[r * shape[1] + c]; }
    T at(std::size_t r, std::size_t c) const { return v[r * shape[1] + c]; }

    static std::string shape_string(const std::vector<std::size_t>& s) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) os << "x";
            os << s[i];
        }
        os << "]";
        return os.str();
    }

    std::string shape_string() const { return shape_string(shape); }
};

template <typename T>
Array<T> vec(std::vector<T> values) {
    std::size_t n = values.size();
    return Array<T>({n}, std::move(values));
}

template <typename T>
bool all_finite(const Array<T>& a) {
    for (T x : a.v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

template <typename T>
void require_finite(const Array<T>& a, const char* where) {
    if (!all_finite(a)) {
        throw NumericError(std::string("non-finite value in ") + where);
    }
}

template <typename T>
void require_same_shape(const Array<T>& a, const Array<T>& b, const char* where) {
    if (a.shape != b.shape) {
        throw ShapeError(std::string(where) + ": shapes " + a.shape_string() + " vs " + b.shape_string());
    }
}

template <typename T>
T l2_norm(const Array<T>& a) {
    T s = 0;
    for (T x : a.v) s += x * x;
    return std::sqrt(s);
}

template <typename T>
T dot(const Array<T>& a, const Array<T>& b) {
    T s = 0;
    for (std::size_t i = 0; i < a.v.size(); ++i) s += a.v[i] * b.v[i];
    return s;
}

}  // namespace xmatch
