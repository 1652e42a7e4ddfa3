#include "tiledit/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace tiledit {

Adam::Adam(const DitParams& like, AdamConfig cfg)
    : cfg_(cfg), m_(zeros_like(like)), v_(zeros_like(like)) {}

void Adam::step(DitParams& params, const DitParams& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  auto ps = named_tensors(params);
  auto gs = named_tensors(grads);
  auto ms = named_tensors(m_);
  auto vs = named_tensors(v_);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Tensor& p = *ps[i].second;
    const Tensor& g = *gs[i].second;
    Tensor& m = *ms[i].second;
    Tensor& v = *vs[i].second;
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

Tensor mse_grad(const Tensor& a, const Tensor& b, double weight) {
  Tensor g = sub(a, b);
  const double k = 2.0 * weight / static_cast<double>(a.size());
  for (auto& v : g.values()) v *= k;
  return g;
}

double diffusion_objective(const ToyDiT& m, const DiffusionSchedule& s,
                           const std::vector<Tensor>& batch, Rng& rng, DitParams* grads) {
  if (batch.empty()) throw std::invalid_argument("diffusion_loss: empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& z0 : batch) {
    const int t = static_cast<int>(rng.uniform_int(1, s.train_steps()));
    const Tensor eps = rng.normal_tensor(z0.shape());
    const Tensor z = forward_diffuse(z0, eps, t, s);
    DitCache cache;
    const DitOutput out = dit_forward(m, z, t, grads ? &cache : nullptr);
    total += mean_squared_error(out.eps, eps);
    if (grads) dit_backward(m, cache, mse_grad(out.eps, eps, inv_b), nullptr, *grads);
  }
  return total / static_cast<double>(batch.size());
}

double diffusion_loss(const ToyDiT& m, const DiffusionSchedule& s,
                      const std::vector<Tensor>& batch, Rng& rng) {
  return diffusion_objective(m, s, batch, rng, nullptr);
}

double train_step(ToyDiT& m, const DiffusionSchedule& s, const std::vector<Tensor>& batch,
                  double learning_rate, Rng& rng, Adam& opt, std::size_t step_index) {
  DitParams grads = zeros_like(m.params);
  const double loss = diffusion_objective(m, s, batch, rng, &grads);
  if (!std::isfinite(loss)) throw TrainingDiverged("diffusion loss is not finite", step_index);
  opt.step(m.params, grads, learning_rate);
  return loss;
}

std::string TrainingLog::to_csv(bool include_timing) const {
  std::ostringstream os;
  os << (include_timing ? "step,S,loss,wall_ms\n" : "step,S,loss\n");
  os << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.step << ',' << r.segments << ',' << r.loss;
    if (include_timing) os << ',' << std::fixed << std::setprecision(3) << r.wall_ms
                           << std::defaultfloat << std::setprecision(17);
    os << '\n';
  }
  return os.str();
}

void TrainingLog::save(const std::string& path, bool include_timing) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write log " + path);
  out << to_csv(include_timing);
}

void train_toy(ToyDiT& m, const DiffusionSchedule& s, const SyntheticDataset& data,
               const TrainOptions& opt, TrainingLog* log) {
  Adam adam(m.params);
  Rng rng(opt.seed);
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t step = 0; step < opt.steps; ++step) {
    const auto batch = data.batch(step * opt.batch_size, opt.batch_size);
    const double loss = train_step(m, s, batch, opt.learning_rate, rng, adam, step);
    if (log) {
      const std::chrono::duration<double, std::milli> el = std::chrono::steady_clock::now() - start;
      log->rows.push_back({step, 0, loss, el.count()});
    }
  }
}

}  // namespace tiledit
