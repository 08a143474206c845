#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "lvfsr/ops.hpp"
#include "lvfsr/rng.hpp"
#include "lvfsr/tensor.hpp"

namespace lvfsr {

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) drawn from the parameter's own named stream.
template <typename T>
Tensor<T> fan_in_uniform(std::string name, Shape shape, std::size_t fan_in, std::uint64_t seed) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Rng rng = Rng::stream(seed, name);
  std::vector<T> values(numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::parameter(std::move(name), std::move(shape), std::move(values));
}

template <typename T>
Tensor<T> constant_param(std::string name, Shape shape, T value) {
  const std::size_t n = numel(shape);
  return Tensor<T>::parameter(std::move(name), std::move(shape), std::vector<T>(n, value));
}

/// Convolution weights [out,in,k,k] and bias [out].
template <typename T>
struct ConvParams {
  Tensor<T> weight;
  Tensor<T> bias;

  Tensor<T> operator()(const Tensor<T>& x, std::size_t pad) const { return conv2d(x, weight, bias, 1, pad); }
};

template <typename T>
struct LinearParams {
  Tensor<T> weight;
  Tensor<T> bias;

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

struct InitOptions {
  std::uint64_t seed = 0;
  bool zero = false;
};

template <typename T>
ConvParams<T> make_conv(ParameterSet<T>& params, const std::string& prefix, std::size_t in,
                        std::size_t out, std::size_t k, const InitOptions& init) {
  Shape shape{out, in, k, k};
  Tensor<T> w = init.zero ? constant_param<T>(prefix + ".w", shape, T(0))
                          : fan_in_uniform<T>(prefix + ".w", shape, in * k * k, init.seed);
  ConvParams<T> conv{params.add(std::move(w)), params.add(constant_param<T>(prefix + ".b", {out}, T(0)))};
  return conv;
}

template <typename T>
LinearParams<T> make_linear(ParameterSet<T>& params, const std::string& prefix, std::size_t in,
                            std::size_t out, const InitOptions& init) {
  Shape shape{out, in};
  Tensor<T> w = init.zero ? constant_param<T>(prefix + ".w", shape, T(0))
                          : fan_in_uniform<T>(prefix + ".w", shape, in, init.seed);
  LinearParams<T> lin{params.add(std::move(w)), params.add(constant_param<T>(prefix + ".b", {out}, T(0)))};
  return lin;
}

}  // namespace lvfsr
