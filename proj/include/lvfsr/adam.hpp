#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lvfsr/tensor.hpp"

namespace lvfsr {

/// Defaults: lr 2e-4, betas (0.9, 0.99), eps 1e-8.
struct AdamHyper {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

/// First/second moments aligned with a ParameterSet's order.
template <typename T>
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;

  static AdamState zeros_like(const ParameterSet<T>& params) {
    AdamState state;
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), T(0));
      state.second_moment.emplace_back(p.size(), T(0));
    }
    return state;
  }
};

/// One bias-corrected Adam update using the gradients accumulated on `params`.
/// A parameter backward never reached is treated as having zero gradient.
template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, const AdamHyper& hyper) {
  require(state.first_moment.size() == params.size() && state.second_moment.size() == params.size(),
          ErrorKind::state, "adam_step: optimizer state does not match parameter set");
  for (const auto& p : params)
    for (T g : p.grad())
      if (!std::isfinite(g)) fail(ErrorKind::numeric, "adam_step: non-finite gradient for " + p.name());

  const std::uint64_t t = ++state.step;
  const double bias1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
  const double bias2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
  const T b1 = static_cast<T>(hyper.beta1), b2 = static_cast<T>(hyper.beta2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& param = params[k];
    auto values = param.mutable_data();
    auto grad = param.grad();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    require(m.size() == values.size(), ErrorKind::state, "adam_step: moment size mismatch for " + param.name());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T g = grad.empty() ? T(0) : grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      const double m_hat = static_cast<double>(m[i]) / bias1;
      const double v_hat = static_cast<double>(v[i]) / bias2;
      values[i] = static_cast<T>(static_cast<double>(values[i]) -
                                 hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps));
    }
  }
}

}  // namespace lvfsr
