#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "unidiff/params.hpp"

namespace unidiff {

enum class OptimKind { adam, sgd };

struct OptimConfig {
  OptimKind kind = OptimKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam moments plus the step counter used for bias correction.
template <class T>
struct OptimState {
  ParamSet<T> m;
  ParamSet<T> v;
  std::int64_t step = 0;

  static OptimState for_params(const ParamSet<T>& p) { return {p.zeros_like(), p.zeros_like(), 0}; }
  bool operator==(const OptimState& o) const { return m == o.m && v == o.v && step == o.step; }
};

/// Throws NumericalError naming the first parameter with a non-finite gradient.
template <class T>
void require_finite_gradients(const ParamSet<T>& grads) {
  for (const auto& [name, g] : grads.entries())
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(static_cast<double>(g[i])))
        throw NumericalError("non-finite gradient in parameter '" + name + "' at index " + std::to_string(i));
}

/// In-place first-order update of theta.
template <class T>
void optimize_step(ParamSet<T>& theta, const ParamSet<T>& grads, OptimState<T>& st, const OptimConfig& cfg) {
  require_same_structure(theta, grads);
  require_finite_gradients(grads);
  if (cfg.kind == OptimKind::sgd) {
    for (auto& [name, p] : theta.entries()) {
      const Tensor<T>& g = grads.at(name);
      for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<T>(p[i] - cfg.lr * g[i]);
    }
    ++st.step;
    return;
  }
  if (st.m.size() == 0) st = OptimState<T>::for_params(theta);
  require_same_structure(theta, st.m);
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (auto& [name, p] : theta.entries()) {
    const Tensor<T>& g = grads.at(name);
    Tensor<T>& m = st.m.at(name);
    Tensor<T>& v = st.v.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      p[i] = static_cast<T>(p[i] - cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps));
    }
  }
}

}  // namespace unidiff
