#pragma once

#include <cmath>
#include <functional>

#include "xmatch/array.hpp"
#include "xmatch/tape.hpp"

namespace xmatch {

// Central-difference step per coordinate: eps scaled by the coordinate size.
template <typename T>
T fd_step(T eps, T xi) {
    return eps * std::max(T(1), std::abs(xi));
}

template <typename T>
constexpr T default_fd_eps() {
    return sizeof(T) == 4 ? T(5e-3) : T(1e-5);
}

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|, |numeric|).
/// `f` only ever supplies values, so the numeric side stays independent of any
/// backward-pass implementation.
template <typename T>
T gradient_check(const std::function<T(const Array<T>&)>& f, const Array<T>& x0, T eps,
                 const Array<T>& analytic) {
    require_same_shape(x0, analytic, "gradient_check");
    if (!(eps > T(0))) throw ConfigError("gradient_check: eps must be positive");
    Array<T> x = x0;
    T worst = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        T h = fd_step(eps, x0.v[i]);
        x.v[i] = x0.v[i] + h;
        double fp = static_cast<double>(f(x));
        x.v[i] = x0.v[i] - h;
        double fm = static_cast<double>(f(x));
        x.v[i] = x0.v[i];
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("gradient_check: non-finite function evaluation");
        }
        double numeric = (fp - fm) / (2.0 * static_cast<double>(h));
        double a = static_cast<double>(analytic.v[i]);
        double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
        worst = std::max(worst, static_cast<T>(err));
    }
    return worst;
}

/// Convenience form: `build` wires a scalar function of x onto a fresh tape.
/// The analytic gradient comes from the tape, the numeric one from central
/// differences of the same forward computation.
template <typename T>
T gradient_check_tape(const std::function<Var<T>(Tape<T>&, Var<T>)>& build, const Array<T>& x0, T eps) {
    Tape<T> tape;
    Var<T> x = tape.leaf(x0, true);
    Var<T> y = build(tape, x);
    if (tape.value(y).numel() != 1) throw ShapeError("gradient_check_tape: function must be scalar-valued");
    tape.backward_scalar(y);
    Array<T> analytic = tape.grad(x);

    std::function<T(const Array<T>&)> f = [&build](const Array<T>& xv) {
        Tape<T> t;
        Var<T> xx = t.leaf(xv, false);
        return t.value(build(t, xx)).v[0];
    };
    return gradient_check<T>(f, x0, eps, analytic);
}

}  // namespace xmatch
