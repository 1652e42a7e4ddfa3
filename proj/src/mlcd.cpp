#include "tiledit/mlcd.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>
#include <string>

namespace tiledit {

Milestones milestones(int T, int S) {
  if (S < 1 || T < 1) throw std::invalid_argument("milestones: need T >= 1 and S >= 1");
  if (S > T) {
    throw std::invalid_argument("milestones: " + std::to_string(S) + " segments exceed " +
                                std::to_string(T) + " timesteps");
  }
  Milestones ms;
  for (int s = 0; s <= S; ++s) {
    ms.boundaries.push_back(static_cast<int>(std::lround(static_cast<double>(s) * T / S)));
  }
  return ms;
}

McdSample sample_segment(const Milestones& ms, Rng& rng) {
  McdSample d;
  d.s = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(ms.segments()) - 1));
  const int lo = ms.boundaries[d.s], hi = ms.boundaries[d.s + 1];
  d.t_m = static_cast<int>(rng.uniform_int(lo + 1, hi));
  d.t_n = static_cast<int>(rng.uniform_int(lo, d.t_m));
  return d;
}

namespace {

// Stop-gradient target: student jump from the teacher-advanced z_{t_n}.
Tensor target_branch(const EpsPredictor& student, const EpsPredictor& teacher,
                     const DiffusionSchedule& s, const Tensor& z_tm, const McdSample& d, int t_s) {
  Tensor z_tn = z_tm;
  if (d.t_n != d.t_m)
    z_tn = ddim_step(z_tm, x_hat_from_eps(z_tm, teacher(z_tm, d.t_m), d.t_m, s), d.t_m, d.t_n, s);
  if (d.t_n == t_s) return z_tn;
  return ddim_step(z_tn, x_hat_from_eps(z_tn, student(z_tn, d.t_n), d.t_n, s), d.t_n, t_s, s);
}

}  // namespace

McdBranches mlcd_branches(const EpsPredictor& student, const EpsPredictor& teacher,
                          const DiffusionSchedule& s, const Tensor& z_tm, const McdSample& d,
                          int t_s) {
  if (d.t_m == 0) throw std::domain_error("mlcd: t_m must be positive");
  McdBranches br;
  br.a = ddim_step(z_tm, x_hat_from_eps(z_tm, student(z_tm, d.t_m), d.t_m, s), d.t_m, t_s, s);
  br.b = target_branch(student, teacher, s, z_tm, d, t_s);
  return br;
}

double mlcd_objective(const ToyDiT& student, const ToyDiT& target, const ToyDiT& teacher,
                      const DiffusionSchedule& s, const std::vector<Tensor>& batch,
                      const Milestones& ms, Rng& rng, DitParams* grads) {
  if (batch.empty()) throw std::invalid_argument("mlcd_loss: empty batch");
  if (!(student.config == teacher.config) || !(student.config == target.config))
    throw GeometryError("mlcd_loss: student and teacher geometry differ");
  if (ms.train_steps() != s.train_steps())
    throw std::invalid_argument("mlcd_loss: milestones do not span the schedule");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const EpsPredictor target_eps = predictor(target);
  const EpsPredictor teacher_eps = predictor(teacher);
  double total = 0.0;
  for (const auto& z0 : batch) {
    const McdSample d = sample_segment(ms, rng);
    const Tensor eps = rng.normal_tensor(z0.shape());
    const int t_s = ms.boundaries[d.s];
    const Tensor z_tm = forward_diffuse(z0, eps, d.t_m, s);

    DitCache cache;
    const Tensor eps_a = dit_forward(student, z_tm, d.t_m, grads ? &cache : nullptr).eps;
    const Tensor a = ddim_step(z_tm, x_hat_from_eps(z_tm, eps_a, d.t_m, s), d.t_m, t_s, s);
    const Tensor b = target_branch(target_eps, teacher_eps, s, z_tm, d, t_s);
    const Tensor diff = sub(a, b);
    total += sum_squares(diff);
    if (grads) {
      const double coef = ddim_eps_coefficients(d.t_m, t_s, s).eps_coef;
      dit_backward(student, cache, scale(diff, 2.0 * coef * inv_b), nullptr, *grads);
    }
  }
  return total / static_cast<double>(batch.size());
}

double mlcd_loss(const ToyDiT& student, const ToyDiT& teacher, const DiffusionSchedule& s,
                 const std::vector<Tensor>& batch, const Milestones& ms, Rng& rng) {
  return mlcd_objective(student, student, teacher, s, batch, ms, rng, nullptr);
}

ToyDiT mlcd_train(const ToyDiT& teacher, const DiffusionSchedule& s, const SyntheticDataset& data,
                  const MlcdOptions& opt, TrainingLog* log) {
  if (opt.segment_schedule.empty()) throw std::invalid_argument("mlcd: empty segment schedule");
  for (std::size_t i = 1; i < opt.segment_schedule.size(); ++i) {
    if (opt.segment_schedule[i] > opt.segment_schedule[i - 1])
      throw std::invalid_argument("mlcd: segment schedule must be nonincreasing");
  }
  ToyDiT student = teacher;
  Adam adam(student.params);
  Rng rng(opt.seed);
  const std::size_t phases = opt.segment_schedule.size();
  const auto start = std::chrono::steady_clock::now();
  std::size_t step = 0;
  for (std::size_t ph = 0; ph < phases; ++ph) {
    const Milestones ms = milestones(s.train_steps(), opt.segment_schedule[ph]);
    const std::size_t end = opt.steps * (ph + 1) / phases;
    for (; step < end; ++step) {
      const auto batch = data.batch(step * opt.batch_size, opt.batch_size);
      DitParams grads = zeros_like(student.params);
      const double loss = mlcd_objective(student, student, teacher, s, batch, ms, rng, &grads);
      if (!std::isfinite(loss)) throw TrainingDiverged("mlcd loss is not finite", step);
      adam.step(student.params, grads, opt.learning_rate);
      if (log) {
        const std::chrono::duration<double, std::milli> el = std::chrono::steady_clock::now() - start;
        log->rows.push_back({step, ms.segments(), loss, el.count()});
      }
    }
  }
  return student;
}

}  // namespace tiledit
