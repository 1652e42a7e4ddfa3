#pragma once

#include <cstdint>
#include <vector>

#include "tiledit/dit.hpp"
#include "tiledit/training.hpp"

namespace tiledit {

struct KdLossParts {
  std::vector<double> attention;  // per layer
  std::vector<double> mlp;        // per layer
  double diffusion = 0.0;
  double lambda = 0.0;
  double total = 0.0;
};

/// total = (1/L)·Σ_i (attention[i] + mlp[i]) + λ·diffusion, summed in layer order.
double kd_total(const std::vector<double>& attention, const std::vector<double>& mlp,
                double diffusion, double lambda);

/// Layer-matching loss from precomputed taps. All MSEs are element means.
KdLossParts kd_parts(const LayerTaps& student, const LayerTaps& teacher, const Tensor& eps_hat,
                     const Tensor& eps, double lambda);

/// Per sample: t ~ U{1..T}, then ε. Both models see the same z_t and t; the
/// parts are means over the batch. Gradient w.r.t. the student is accumulated
/// into grads when given.
KdLossParts kd_objective(const ToyDiT& student, const ToyDiT& teacher, const DiffusionSchedule& s,
                         const std::vector<Tensor>& batch, double lambda, Rng& rng,
                         DitParams* grads);
KdLossParts kd_loss(const ToyDiT& student, const ToyDiT& teacher, const DiffusionSchedule& s,
                    const std::vector<Tensor>& batch, double lambda, Rng& rng);

struct KdOptions {
  double lambda = 100.0;
  std::size_t steps = 400;
  std::size_t batch_size = 4;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

/// Student starts as a copy of the teacher with the assignment's masks.
ToyDiT kd_train(const ToyDiT& teacher, const std::vector<TileMask>& assignment,
                const DiffusionSchedule& s, const SyntheticDataset& data, const KdOptions& opt,
                TrainingLog* log = nullptr);

/// Mean final-hidden-state MSE between two models over fixed noised inputs
/// (one draw of t and ε per sample).
double final_hidden_mse(const ToyDiT& a, const ToyDiT& b, const DiffusionSchedule& s,
                        const std::vector<Tensor>& batch, Rng& rng);

}  // namespace tiledit
