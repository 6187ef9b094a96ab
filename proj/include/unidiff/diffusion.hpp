#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "unidiff/errors.hpp"
#include "unidiff/tensor.hpp"

namespace unidiff {

/// Variance schedule of the noising chain. Index 0 is the clean state:
/// beta(0) = 0 and alpha_bar(0) = 1. Reverse-step variance is fixed to beta_t,
/// except sigma_sq(1) = 0 so the last denoising step is deterministic.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  int t_max() const { return t_max_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  double beta(int t) const { return betas_.at(check(t)); }
  double alpha(int t) const { return alphas_.at(check(t)); }
  double alpha_bar(int t) const { return alpha_bars_.at(check(t)); }
  double sigma_sq(int t) const { return sigma_sq_.at(check(t)); }

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

  friend NoiseSchedule build_schedule(int t_max, double beta_start, double beta_end);

 private:
  int check(int t) const {
    if (t < 0 || t > t_max_)
      throw ParameterError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(t_max_) + "]");
    return t;
  }

  int t_max_ = 0;
  double beta_start_ = 0, beta_end_ = 0;
  std::vector<double> betas_, alphas_, alpha_bars_, sigma_sq_;
};

/// Linear beta schedule from beta_start to beta_end over t_max steps.
inline NoiseSchedule build_schedule(int t_max, double beta_start, double beta_end) {
  if (t_max < 1) throw ParameterError("t_max must be >= 1, got " + std::to_string(t_max));
  if (!(beta_start > 0.0)) throw ParameterError("beta_start must be > 0");
  if (!(beta_end >= beta_start)) throw ParameterError("beta_end must be >= beta_start");
  if (!(beta_end < 1.0)) throw ParameterError("beta_end must be < 1");

  NoiseSchedule s;
  s.t_max_ = t_max;
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  const auto n = static_cast<std::size_t>(t_max) + 1;
  s.betas_.assign(n, 0.0);
  s.alphas_.assign(n, 1.0);
  s.alpha_bars_.assign(n, 1.0);
  s.sigma_sq_.assign(n, 0.0);
  for (int t = 1; t <= t_max; ++t) {
    const double frac = t_max == 1 ? 0.0 : static_cast<double>(t - 1) / (t_max - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    s.betas_[t] = b;
    s.alphas_[t] = 1.0 - b;
    s.alpha_bars_[t] = s.alpha_bars_[t - 1] * s.alphas_[t];
    s.sigma_sq_[t] = t == 1 ? 0.0 : b;
  }
  return s;
}

inline NoiseSchedule default_schedule() { return build_schedule(1000, 1e-4, 0.02); }

template <class T>
struct LatentState {
  Tensor<T> values;
  int t = 0;
};

namespace detail {
inline void require_step(int t, const NoiseSchedule& s, const char* op) {
  if (t < 1 || t > s.t_max())
    throw ParameterError(std::string(op) + ": timestep " + std::to_string(t) + " outside [1, " +
                         std::to_string(s.t_max()) + "]");
}
}  // namespace detail

/// One noising step: sqrt(1 - beta_t) * z_prev + sqrt(beta_t) * noise.
template <class T>
LatentState<T> forward_step(const LatentState<T>& z_prev, int t, const Tensor<T>& noise, const NoiseSchedule& s) {
  detail::require_step(t, s, "forward_step");
  require_same_shape(z_prev.values.shape(), noise.shape(), "forward_step noise");
  const T a = static_cast<T>(std::sqrt(1.0 - s.beta(t)));
  const T b = static_cast<T>(std::sqrt(s.beta(t)));
  Tensor<T> out(z_prev.values.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z_prev.values[i] + b * noise[i];
  return {std::move(out), t};
}

/// Closed-form jump from the clean latent: sqrt(abar_t) z0 + sqrt(1 - abar_t) noise.
template <class T>
LatentState<T> forward_to(const LatentState<T>& z0, int t, const Tensor<T>& noise, const NoiseSchedule& s) {
  if (t < 0 || t > s.t_max()) throw ParameterError("forward_to: timestep " + std::to_string(t) + " out of range");
  require_same_shape(z0.values.shape(), noise.shape(), "forward_to noise");
  const T a = static_cast<T>(std::sqrt(s.alpha_bar(t)));
  const T b = static_cast<T>(std::sqrt(1.0 - s.alpha_bar(t)));
  Tensor<T> out(z0.values.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0.values[i] + b * noise[i];
  return {std::move(out), t};
}

/// Ancestral denoising step using the epsilon parameterisation of the mean.
template <class T>
LatentState<T> reverse_step(const LatentState<T>& z_t, int t, const Tensor<T>& eps_hat, const Tensor<T>& noise,
                            const NoiseSchedule& s) {
  if (t == 0) throw ParameterError("reverse_step: nothing to reverse at t = 0");
  detail::require_step(t, s, "reverse_step");
  require_same_shape(z_t.values.shape(), eps_hat.shape(), "reverse_step eps_hat");
  require_same_shape(z_t.values.shape(), noise.shape(), "reverse_step noise");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(t));
  const double eps_coef = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
  const T sigma = static_cast<T>(std::sqrt(s.sigma_sq(t)));
  Tensor<T> out(z_t.values.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T mu = static_cast<T>(inv_sqrt_alpha * (z_t.values[i] - eps_coef * eps_hat[i]));
    out[i] = mu + sigma * noise[i];
  }
  return {std::move(out), t - 1};
}

/// Algebraic inversion of forward_to given a noise estimate.
template <class T>
LatentState<T> predict_z0(const LatentState<T>& z_t, int t, const Tensor<T>& eps_hat, const NoiseSchedule& s) {
  detail::require_step(t, s, "predict_z0");
  require_same_shape(z_t.values.shape(), eps_hat.shape(), "predict_z0 eps_hat");
  const double ab = s.alpha_bar(t);
  if (ab < 1e-12) throw NumericalError("predict_z0: alpha_bar(" + std::to_string(t) + ") below 1e-12");
  const double inv = 1.0 / std::sqrt(ab);
  const double c = std::sqrt(1.0 - ab);
  Tensor<T> out(z_t.values.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>((z_t.values[i] - c * eps_hat[i]) * inv);
  return {std::move(out), 0};
}

}  // namespace unidiff
