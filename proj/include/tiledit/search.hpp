#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tiledit/dit.hpp"

namespace tiledit {

/// Masks ordered dense to sparse; the first entry is full.
class MaskMenu {
public:
  explicit MaskMenu(std::vector<TileMask> masks);
  /// full, then k = F-1 ... down to the given smallest k, skipping duplicates.
  static MaskMenu global(std::size_t frames, std::size_t tokens_per_frame,
                         const std::vector<std::size_t>& ks);

  std::size_t size() const { return masks_.size(); }
  const TileMask& operator[](std::size_t i) const { return masks_[i]; }
  const std::vector<TileMask>& masks() const { return masks_; }

private:
  std::vector<TileMask> masks_;
};

using LossTable = std::vector<std::vector<double>>;  // [layer][mask]

struct LossTimeTables {
  LossTable loss;
  std::vector<double> time;  // per mask
  double target = 0.0;

  std::size_t layers() const { return loss.size(); }
  std::size_t menu_size() const { return time.size(); }
  void validate() const;
};

using Assignment = std::vector<std::size_t>;

enum class Objective { additive, minimax };
std::string to_string(Objective o);
Objective objective_from_string(const std::string& s);

class InfeasibleBudget : public std::runtime_error {
public:
  InfeasibleBudget(double min_time, double target);
  double min_time() const { return min_time_; }

private:
  double min_time_;
};

/// Sum (right to left) or max of the per-layer losses.
double objective_value(const LossTable& loss, const Assignment& a, Objective o);
double assignment_time(const std::vector<double>& time, const Assignment& a);

struct ProfileOptions {
  std::size_t samples = 4;  // m
  std::uint64_t seed = 0;
};

/// Max over m shared noised inputs of the final-hidden MSE between the model
/// with mask i on layer j (full elsewhere) and the all-full model.
LossTable profile_layer_losses(const ToyDiT& m, const DiffusionSchedule& s, const MaskMenu& menu,
                               const std::vector<Tensor>& clean, const ProfileOptions& opt);

using LossProvider = std::function<double(std::size_t layer, std::size_t mask)>;

/// Per layer keep the last mask whose loss stays below r, stopping at the
/// first violation.
Assignment greedy_search(const LossProvider& loss, std::size_t layers, std::size_t menu_size, double r);
Assignment greedy_search(const LossTable& loss, double r);

/// Greedy over a live model. With cumulative set, layer j is profiled with the
/// masks already chosen for layers < j instead of full attention.
Assignment greedy_search_model(const ToyDiT& m, const DiffusionSchedule& s, const MaskMenu& menu,
                               const std::vector<Tensor>& clean, const ProfileOptions& opt,
                               double r, bool cumulative);

/// Exact budgeted solvers. Times are discretized to a quantum: their gcd when
/// all are integers, otherwise 1e-3 with item times rounded up. Ties resolve
/// to the lexicographically smallest (densest-first) assignment.
Assignment dp_search(const LossTimeTables& t, Objective o);
Assignment brute_force_search(const LossTimeTables& t, Objective o);

struct LagrangianConfig {
  double lambda0 = 0.0;
  double alpha0 = 1.0;  // α_t = α0 / sqrt(t + 1)
  std::size_t iterations = 200;
  void validate() const;
};

struct LagrangianStep {
  double lambda;
  double subgradient;
  double loss;
  double time;
};

struct LagrangianResult {
  Assignment assignment;
  double lambda_final = 0.0;
  std::vector<LagrangianStep> history;
  bool fallback = false;  // no feasible iterate; all-sparsest returned
};

/// Step size scaled to the table's loss and time ranges.
LagrangianConfig default_lagrangian_config(const LossTimeTables& t);

/// Per-layer argmin of loss + λ·time, subgradient updates on λ, best feasible
/// iterate by additive loss.
Assignment lagrangian_argmin(const LossTimeTables& t, double lambda);
LagrangianResult lagrangian_search(const LossTimeTables& t, const LagrangianConfig& cfg);

/// Time per mask proportional to its kept-block fraction (full = 1).
std::vector<double> analytic_times(const MaskMenu& menu);

std::string loss_table_csv(const LossTable& loss);
LossTable parse_loss_table_csv(const std::string& text);
std::string time_table_csv(const std::vector<double>& time, const std::string& provenance);
std::vector<double> parse_time_table_csv(const std::string& text, std::string* provenance = nullptr);
std::string assignment_json(const Assignment& a, const std::string& objective, double target);
Assignment parse_assignment_json(const std::string& text);

}  // namespace tiledit
