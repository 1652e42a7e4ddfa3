#pragma once

#include <functional>
#include <vector>

#include "tiledit/rng.hpp"
#include "tiledit/tensor.hpp"

namespace tiledit {

/// Discrete DDPM noise schedule with linear betas over t = 1..T.
/// alpha_bar(0) = 1 by convention.
class DiffusionSchedule {
public:
  static DiffusionSchedule linear(int train_steps, double beta_start, double beta_end);
  /// Linear betas rescaled by 1000/T so short schedules still end near pure noise.
  static DiffusionSchedule scaled_linear(int train_steps);

  int train_steps() const { return train_steps_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }
  double beta(int t) const;
  double alpha_bar(int t) const;

private:
  int train_steps_ = 0;
  double beta_start_ = 0.0, beta_end_ = 0.0;
  std::vector<double> alpha_bar_;  // index 0..T
};

/// Predicts the injected noise for a noisy state at timestep t.
using EpsPredictor = std::function<Tensor(const Tensor& z, int t)>;

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
Tensor forward_diffuse(const Tensor& z0, const Tensor& eps, int t, const DiffusionSchedule& s);

/// x̂ = (z_t - sqrt(1 - abar_t) ε̂) / sqrt(abar_t)
Tensor x_hat_from_eps(const Tensor& z_t, const Tensor& eps_hat, int t,
                      const DiffusionSchedule& s);

/// Deterministic (eta = 0) DDIM update from t to t_prime given a clean estimate.
Tensor ddim_step(const Tensor& z_t, const Tensor& x_hat, int t, int t_prime,
                 const DiffusionSchedule& s);

/// Coefficients of ddim_step(z, x̂(z, ε̂), t, t') = a·z + b·ε̂, used by
/// the distillation losses for their chain rule.
struct DdimCoefficients {
  double z_coef;
  double eps_coef;
};
DdimCoefficients ddim_eps_coefficients(int t, int t_prime, const DiffusionSchedule& s);

/// Decreasing timesteps T = t_0 > ... > t_steps = 0, t_i = round((steps-i)·T/steps).
std::vector<int> ddim_timesteps(int train_steps, int num_steps);

/// DDIM sampling in token space starting from z_T ~ N(0, I).
Tensor ddim_sample_tokens(const EpsPredictor& model, const DiffusionSchedule& s,
                          std::size_t tokens, std::size_t channels, int num_steps, Rng& rng);
/// Same, starting from a given z_T.
Tensor ddim_sample_from(const EpsPredictor& model, const DiffusionSchedule& s, Tensor z_T,
                        int num_steps);

/// Mean over the batch of per-sample MSE(ε̂, ε), with t ~ U{1..T} and ε ~ N(0, I)
/// drawn per sample in that order.
double diffusion_loss(const EpsPredictor& model, const DiffusionSchedule& s,
                      const std::vector<Tensor>& batch, Rng& rng);

}  // namespace tiledit
