// Seeded parameter initialization.
#pragma once

#include <random>

#include "mwnet/tensor.hpp"

namespace mwnet {

using Rng = std::mt19937;

template <typename T>
Tensor<T> uniform_tensor(const Shape& s, T bound, Rng& rng) {
    std::uniform_real_distribution<double> dist(-static_cast<double>(bound),
                                                static_cast<double>(bound));
    std::vector<T> v(static_cast<std::size_t>(s.numel()));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(s, std::move(v));
}

// Convolution weight, uniform in +-1/sqrt(fan_in).
template <typename T>
Tensor<T> conv_weight(int cout, int cin_per_group, int kh, int kw, Rng& rng) {
    const T bound = T(1) / std::sqrt(static_cast<T>(cin_per_group) * kh * kw);
    return uniform_tensor<T>({cout, cin_per_group, kh, kw}, bound, rng);
}

template <typename T>
Tensor<T> zero_bias(int c) {
    return Tensor<T>::zeros({1, c, 1, 1});
}

} // namespace mwnet
