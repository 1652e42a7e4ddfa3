#include "tiledit/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace tiledit {

DiffusionSchedule DiffusionSchedule::linear(int train_steps, double beta_start, double beta_end) {
  if (train_steps < 1) throw std::invalid_argument("schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0)) {
    throw std::invalid_argument("schedule: betas must lie in (0, 1)");
  }
  DiffusionSchedule s;
  s.train_steps_ = train_steps;
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  s.alpha_bar_.resize(static_cast<std::size_t>(train_steps) + 1);
  s.alpha_bar_[0] = 1.0;
  for (int t = 1; t <= train_steps; ++t) {
    s.alpha_bar_[static_cast<std::size_t>(t)] = s.alpha_bar_[static_cast<std::size_t>(t) - 1] *
                                                (1.0 - s.beta(t));
  }
  return s;
}

DiffusionSchedule DiffusionSchedule::scaled_linear(int train_steps) {
  const double factor = 1000.0 / static_cast<double>(train_steps);
  // Very short schedules would push beta past 1; cap it.
  return linear(train_steps, std::min(1e-4 * factor, 0.999), std::min(0.02 * factor, 0.999));
}

double DiffusionSchedule::beta(int t) const {
  if (t < 1 || t > train_steps_) throw std::out_of_range("schedule: beta index out of range");
  if (train_steps_ == 1) return beta_start_;
  const double frac = static_cast<double>(t - 1) / static_cast<double>(train_steps_ - 1);
  return beta_start_ + frac * (beta_end_ - beta_start_);
}

double DiffusionSchedule::alpha_bar(int t) const {
  if (t < 0 || t > train_steps_) {
    throw std::out_of_range("schedule: timestep " + std::to_string(t) + " outside [0, " +
                            std::to_string(train_steps_) + "]");
  }
  return alpha_bar_[static_cast<std::size_t>(t)];
}

Tensor forward_diffuse(const Tensor& z0, const Tensor& eps, int t, const DiffusionSchedule& s) {
  const double ab = s.alpha_bar(t);
  Tensor z = scale(z0, std::sqrt(ab));
  axpy_inplace(z, std::sqrt(1.0 - ab), eps);
  return z;
}

Tensor x_hat_from_eps(const Tensor& z_t, const Tensor& eps_hat, int t,
                      const DiffusionSchedule& s) {
  const double ab = s.alpha_bar(t);
  Tensor x = z_t;
  axpy_inplace(x, -std::sqrt(1.0 - ab), eps_hat);
  for (auto& v : x.values()) v /= std::sqrt(ab);
  return x;
}

Tensor ddim_step(const Tensor& z_t, const Tensor& x_hat, int t, int t_prime,
                 const DiffusionSchedule& s) {
  const double ab = s.alpha_bar(t);
  const double ab_prime = s.alpha_bar(t_prime);
  if (t == t_prime) return z_t;
  if (t == 0 || ab >= 1.0) {
    throw std::domain_error("ddim_step: source timestep 0 has no noise to remove");
  }
  // ε̂ = (z_t - sqrt(ab) x̂) / sqrt(1 - ab)
  Tensor eps = z_t;
  axpy_inplace(eps, -std::sqrt(ab), x_hat);
  for (auto& v : eps.values()) v /= std::sqrt(1.0 - ab);
  Tensor out = scale(x_hat, std::sqrt(ab_prime));
  axpy_inplace(out, std::sqrt(1.0 - ab_prime), eps);
  return out;
}

DdimCoefficients ddim_eps_coefficients(int t, int t_prime, const DiffusionSchedule& s) {
  const double ab = s.alpha_bar(t);
  const double ab_prime = s.alpha_bar(t_prime);
  if (t == t_prime) return {1.0, 0.0};
  // x̂ = (z - sqrt(1-ab) ε̂)/sqrt(ab); the DDIM noise estimate equals ε̂.
  const double x_z = 1.0 / std::sqrt(ab);
  const double x_eps = -std::sqrt(1.0 - ab) / std::sqrt(ab);
  return {std::sqrt(ab_prime) * x_z, std::sqrt(ab_prime) * x_eps + std::sqrt(1.0 - ab_prime)};
}

std::vector<int> ddim_timesteps(int train_steps, int num_steps) {
  if (num_steps < 1 || num_steps > train_steps) {
    throw std::invalid_argument("ddim: num_steps must lie in [1, T]");
  }
  std::vector<int> ts;
  for (int i = num_steps; i >= 0; --i) {
    ts.push_back(static_cast<int>(std::lround(static_cast<double>(i) * train_steps / num_steps)));
  }
  return ts;
}

Tensor ddim_sample_from(const EpsPredictor& model, const DiffusionSchedule& s, Tensor z,
                        int num_steps) {
  const auto ts = ddim_timesteps(s.train_steps(), num_steps);
  for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
    const int t = ts[i];
    const Tensor eps = model(z, t);
    const Tensor x_hat = x_hat_from_eps(z, eps, t, s);
    z = ddim_step(z, x_hat, t, ts[i + 1], s);
  }
  return z;
}

Tensor ddim_sample_tokens(const EpsPredictor& model, const DiffusionSchedule& s,
                          std::size_t tokens, std::size_t channels, int num_steps, Rng& rng) {
  return ddim_sample_from(model, s, rng.normal_tensor({tokens, channels}), num_steps);
}

double diffusion_loss(const EpsPredictor& model, const DiffusionSchedule& s,
                      const std::vector<Tensor>& batch, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("diffusion_loss: empty batch");
  double total = 0.0;
  for (const auto& z0 : batch) {
    const int t = static_cast<int>(rng.uniform_int(1, s.train_steps()));
    const Tensor eps = rng.normal_tensor(z0.shape());
    const Tensor z = forward_diffuse(z0, eps, t, s);
    total += mean_squared_error(model(z, t), eps);
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace tiledit
