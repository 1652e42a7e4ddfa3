#include "tiledit/kd.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

namespace tiledit {

double kd_total(const std::vector<double>& attention, const std::vector<double>& mlp,
                double diffusion, double lambda) {
  if (attention.size() != mlp.size() || attention.empty())
    throw std::invalid_argument("kd: per-layer loss lists differ in length");
  double layer_sum = 0.0;
  for (std::size_t i = 0; i < attention.size(); ++i) layer_sum += attention[i] + mlp[i];
  return layer_sum / static_cast<double>(attention.size()) + lambda * diffusion;
}

KdLossParts kd_parts(const LayerTaps& student, const LayerTaps& teacher, const Tensor& eps_hat,
                     const Tensor& eps, double lambda) {
  if (student.attention.size() != teacher.attention.size())
    throw GeometryError("kd: student and teacher layer counts differ");
  KdLossParts p;
  for (std::size_t i = 0; i < student.attention.size(); ++i) {
    p.attention.push_back(mean_squared_error(student.attention[i], teacher.attention[i]));
    p.mlp.push_back(mean_squared_error(student.mlp[i], teacher.mlp[i]));
  }
  p.diffusion = mean_squared_error(eps_hat, eps);
  p.lambda = lambda;
  p.total = kd_total(p.attention, p.mlp, p.diffusion, lambda);
  return p;
}

KdLossParts kd_objective(const ToyDiT& student, const ToyDiT& teacher, const DiffusionSchedule& s,
                         const std::vector<Tensor>& batch, double lambda, Rng& rng,
                         DitParams* grads) {
  if (batch.empty()) throw std::invalid_argument("kd_loss: empty batch");
  if (!(student.config == teacher.config))
    throw GeometryError("kd_loss: student and teacher architectures differ");
  if (lambda < 0.0) throw std::invalid_argument("kd_loss: lambda must be nonnegative");
  const std::size_t L = student.config.layers;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const double inv_l = 1.0 / static_cast<double>(L);

  KdLossParts sum;
  sum.attention.assign(L, 0.0);
  sum.mlp.assign(L, 0.0);
  for (const auto& z0 : batch) {
    const int t = static_cast<int>(rng.uniform_int(1, s.train_steps()));
    const Tensor eps = rng.normal_tensor(z0.shape());
    const Tensor z = forward_diffuse(z0, eps, t, s);
    const DitOutput ref = dit_forward(teacher, z, t);
    DitCache cache;
    const DitOutput out = dit_forward(student, z, t, grads ? &cache : nullptr);
    const KdLossParts p = kd_parts(out.taps, ref.taps, out.eps, eps, lambda);
    for (std::size_t i = 0; i < L; ++i) {
      sum.attention[i] += p.attention[i];
      sum.mlp[i] += p.mlp[i];
    }
    sum.diffusion += p.diffusion;
    if (grads) {
      TapGrads tg;
      for (std::size_t i = 0; i < L; ++i) {
        tg.attention.push_back(mse_grad(out.taps.attention[i], ref.taps.attention[i], inv_l * inv_b));
        tg.mlp.push_back(mse_grad(out.taps.mlp[i], ref.taps.mlp[i], inv_l * inv_b));
      }
      dit_backward(student, cache, mse_grad(out.eps, eps, lambda * inv_b), &tg, *grads);
    }
  }
  const double nb = static_cast<double>(batch.size());
  for (std::size_t i = 0; i < L; ++i) {
    sum.attention[i] /= nb;
    sum.mlp[i] /= nb;
  }
  sum.diffusion /= nb;
  sum.lambda = lambda;
  sum.total = kd_total(sum.attention, sum.mlp, sum.diffusion, lambda);
  return sum;
}

KdLossParts kd_loss(const ToyDiT& student, const ToyDiT& teacher, const DiffusionSchedule& s,
                    const std::vector<Tensor>& batch, double lambda, Rng& rng) {
  return kd_objective(student, teacher, s, batch, lambda, rng, nullptr);
}

ToyDiT kd_train(const ToyDiT& teacher, const std::vector<TileMask>& assignment,
                const DiffusionSchedule& s, const SyntheticDataset& data, const KdOptions& opt,
                TrainingLog* log) {
  ToyDiT student = teacher;
  student.set_masks(assignment);
  Adam adam(student.params);
  Rng rng(opt.seed);
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t step = 0; step < opt.steps; ++step) {
    const auto batch = data.batch(step * opt.batch_size, opt.batch_size);
    DitParams grads = zeros_like(student.params);
    const KdLossParts p = kd_objective(student, teacher, s, batch, opt.lambda, rng, &grads);
    if (!std::isfinite(p.total)) throw TrainingDiverged("kd loss is not finite", step);
    adam.step(student.params, grads, opt.learning_rate);
    if (log) {
      const std::chrono::duration<double, std::milli> el = std::chrono::steady_clock::now() - start;
      log->rows.push_back({step, 0, p.total, el.count()});
    }
  }
  return student;
}

double final_hidden_mse(const ToyDiT& a, const ToyDiT& b, const DiffusionSchedule& s,
                        const std::vector<Tensor>& batch, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("final_hidden_mse: empty batch");
  double total = 0.0;
  for (const auto& z0 : batch) {
    const int t = static_cast<int>(rng.uniform_int(1, s.train_steps()));
    const Tensor eps = rng.normal_tensor(z0.shape());
    const Tensor z = forward_diffuse(z0, eps, t, s);
    total += mean_squared_error(dit_forward(a, z, t).taps.final_hidden,
                                dit_forward(b, z, t).taps.final_hidden);
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace tiledit
