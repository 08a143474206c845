#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "lvfsr/rng.hpp"

#include "lvfsr/tensor.hpp"

namespace lvfsr {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries = 0;
};

struct GradCheckSampling {
  /// When nonzero, tensors larger than this are checked on a seeded random
  /// subset of this many entries instead of exhaustively.
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
};

namespace detail {
inline std::vector<std::size_t> checked_entries(const std::string& name, std::size_t size, const GradCheckSampling& s) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (s.max_entries == 0 || size <= s.max_entries) return idx;
  Rng rng = Rng::stream(s.seed, "gradcheck-entries:" + name);
  for (std::size_t i = 0; i < s.max_entries; ++i) std::swap(idx[i], idx[i + rng.below(size - i)]);
  idx.resize(s.max_entries);
  std::sort(idx.begin(), idx.end());
  return idx;
}
}  // namespace detail

/// Compares reverse-mode gradients of `loss_fn(params)` with central
/// differences (f(x+eps) − f(x−eps)) / 2eps, entry by entry. The relative
/// error is |a − n| / max(1e-8, |a| + |n|). Parameter values are restored.
template <typename LossFn>
GradCheckResult grad_check_detailed(ParameterSet<double>& params, LossFn&& loss_fn, double eps = 1e-4,
                                    const GradCheckSampling& sampling = {}) {
  params.zero_grad();
  Tensor<double> loss = loss_fn(params);
  require(std::isfinite(loss.item()), ErrorKind::numeric, "grad_check: non-finite loss");
  if (loss.requires_grad()) backward(loss);

  GradCheckResult result;
  for (auto& param : params) {
    std::vector<double> analytic(param.grad().begin(), param.grad().end());
    if (analytic.empty()) analytic.assign(param.size(), 0.0);
    auto values = param.mutable_data();
    for (const std::size_t i : detail::checked_entries(param.name(), values.size(), sampling)) {
      const double saved = values[i];
      double plus, minus;
      {
        NoGradGuard guard;
        values[i] = saved + eps;
        plus = loss_fn(params).item();
        values[i] = saved - eps;
        minus = loss_fn(params).item();
      }
      values[i] = saved;
      require(std::isfinite(plus) && std::isfinite(minus), ErrorKind::numeric,
              "grad_check: non-finite loss while perturbing " + param.name());
      const double numeric = (plus - minus) / (2.0 * eps);
      const double err =
          std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
      ++result.entries;
      if (result.worst_parameter.empty() || err > result.max_rel_err) {
        result.max_rel_err = err;
        result.worst_parameter = param.name();
        result.worst_index = i;
        result.worst_analytic = analytic[i];
        result.worst_numeric = numeric;
      }
    }
  }
  params.zero_grad();
  return result;
}

template <typename LossFn>
double grad_check(ParameterSet<double>& params, LossFn&& loss_fn, double eps = 1e-4) {
  return grad_check_detailed(params, std::forward<LossFn>(loss_fn), eps).max_rel_err;
}

}  // namespace lvfsr
