#pragma once

#include <cstdint>
#include <vector>

#include "tiledit/dit.hpp"
#include "tiledit/training.hpp"

namespace tiledit {

/// Segment boundaries t^0 = 0 < t^1 < ... < t^S = T, t^s = round(s·T/S).
struct Milestones {
  std::vector<int> boundaries;
  std::size_t segments() const { return boundaries.size() - 1; }
  int train_steps() const { return boundaries.back(); }
};

Milestones milestones(int train_steps, int segments);

struct McdSample {
  std::size_t s = 0;
  int t_m = 0;
  int t_n = 0;
};

/// s ~ U{0..S-1}, t_m ~ U{t^s+1..t^{s+1}}, t_n ~ U{t^s..t_m}, drawn in that order.
McdSample sample_segment(const Milestones& ms, Rng& rng);

/// Both branches of the consistency objective for one sample.
struct McdBranches {
  Tensor a;  // student jump from z_{t_m} to t^s
  Tensor b;  // student jump from z_{t_n} to t^s, no gradient
};

/// Branch values for a given sample; z_{t_n} comes from one teacher DDIM step.
/// When t_n == t^s the target is z_{t_n} itself.
McdBranches mlcd_branches(const EpsPredictor& student, const EpsPredictor& teacher,
                          const DiffusionSchedule& s, const Tensor& z_tm, const McdSample& d,
                          int t_s);

/// Mean over the batch of ||A - B||^2. Per sample: McdSample, then ε.
double mlcd_loss(const ToyDiT& student, const ToyDiT& teacher, const DiffusionSchedule& s,
                 const std::vector<Tensor>& batch, const Milestones& ms, Rng& rng);

/// Same draws as mlcd_loss; accumulates d/d(student params) into grads when
/// given. The target branch is evaluated with `target` (normally the student
/// itself) and never contributes gradient.
double mlcd_objective(const ToyDiT& student, const ToyDiT& target, const ToyDiT& teacher,
                      const DiffusionSchedule& s, const std::vector<Tensor>& batch,
                      const Milestones& ms, Rng& rng, DitParams* grads);

struct MlcdOptions {
  std::vector<int> segment_schedule = {4};
  std::size_t steps = 400;
  std::size_t batch_size = 4;
  double learning_rate = 3e-4;
  std::uint64_t seed = 0;
};

/// Steps are split evenly across the schedule entries, in order.
ToyDiT mlcd_train(const ToyDiT& teacher, const DiffusionSchedule& s, const SyntheticDataset& data,
                  const MlcdOptions& opt, TrainingLog* log = nullptr);

}  // namespace tiledit
