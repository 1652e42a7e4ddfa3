#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tiledit/dit.hpp"

namespace tiledit {

class TrainingDiverged : public std::runtime_error {
public:
  TrainingDiverged(const std::string& what, std::size_t step)
      : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
  std::size_t step() const { return step_; }

private:
  std::size_t step_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
public:
  explicit Adam(const DitParams& like, AdamConfig cfg = {});
  void step(DitParams& params, const DitParams& grads, double learning_rate);
  std::size_t steps() const { return t_; }

private:
  AdamConfig cfg_;
  DitParams m_, v_;
  std::size_t t_ = 0;
};

/// Diffusion (ε-prediction MSE) loss of the model; when grads is given the
/// gradient is accumulated into it. Draw order matches diffusion_loss().
double diffusion_objective(const ToyDiT& m, const DiffusionSchedule& s,
                           const std::vector<Tensor>& batch, Rng& rng, DitParams* grads);
double diffusion_loss(const ToyDiT& m, const DiffusionSchedule& s,
                      const std::vector<Tensor>& batch, Rng& rng);

/// One Adam step on the diffusion loss. Returns the pre-update loss.
double train_step(ToyDiT& m, const DiffusionSchedule& s, const std::vector<Tensor>& batch,
                  double learning_rate, Rng& rng, Adam& opt, std::size_t step_index = 0);

struct LogRow {
  std::size_t step;
  std::size_t segments;  // 0 when not applicable
  double loss;
  double wall_ms;
};

struct TrainingLog {
  std::vector<LogRow> rows;
  /// CSV "step,S,loss,wall_ms"; wall_ms omitted when include_timing is false.
  std::string to_csv(bool include_timing = true) const;
  void save(const std::string& path, bool include_timing = true) const;
};

struct TrainOptions {
  std::size_t steps = 1000;
  std::size_t batch_size = 4;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

/// Plain diffusion training on a dataset; sample indices advance by batch_size each step.
void train_toy(ToyDiT& m, const DiffusionSchedule& s, const SyntheticDataset& data,
               const TrainOptions& opt, TrainingLog* log = nullptr);

/// Element-count-normalized MSE gradient: 2(a - b)/count·weight.
Tensor mse_grad(const Tensor& a, const Tensor& b, double weight = 1.0);

}  // namespace tiledit
