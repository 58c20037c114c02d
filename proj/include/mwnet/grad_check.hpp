// Central finite-difference checking of tape gradients.
#pragma once

#include <cmath>

#include "mwnet/tensor.hpp"

namespace mwnet {

// f: (Tape<T>&, const Tensor<T>& x) -> scalar Tensor. x arrives watched; f may
// watch further tensors of its own. Returns the worst relative error between
// the tape gradient of x and central differences, with denominator
// max(|analytic|, |numeric|, 1e-8).
template <typename T, typename F>
T grad_check(F&& f, const Tensor<T>& x0, T eps) {
    require(eps > T(0), "grad_check: eps must be positive");
    std::vector<T> analytic;
    {
        Tape<T> tape;
        Tensor<T> x = x0;
        tape.watch(x);
        Tensor<T> loss = f(tape, x);
        require(loss.numel() == 1, "grad_check: f must be scalar-valued");
        require(std::isfinite(static_cast<double>(loss.data()[0])),
                "grad_check: non-finite function value");
        tape.backward(loss);
        analytic = tape.grad(x);
    }
    auto eval_at = [&](std::int64_t i, T delta) {
        Tensor<T> xp = x0;
        xp.mut()[static_cast<std::size_t>(i)] += delta;
        Tape<T> tape;
        tape.watch(xp);
        Tensor<T> loss = f(tape, xp);
        const T v = loss.data()[0];
        require(std::isfinite(static_cast<double>(v)), "grad_check: non-finite function value");
        return v;
    };
    T worst = T(0);
    for (std::int64_t i = 0; i < x0.numel(); ++i) {
        const T fd = (eval_at(i, eps) - eval_at(i, -eps)) / (T(2) * eps);
        const T a = analytic[static_cast<std::size_t>(i)];
        const T denom = std::max({std::abs(fd), std::abs(a), static_cast<T>(1e-8)});
        worst = std::max(worst, std::abs(fd - a) / denom);
    }
    return worst;
}

} // namespace mwnet
