#include "tiledit/search.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace tiledit {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

// Noised inputs shared by every (layer, mask) evaluation.
struct ProbeSet {
  std::vector<Tensor> z;
  std::vector<int> t;
  std::vector<Tensor> reference;  // all-full final hidden states
};

ProbeSet make_probes(const ToyDiT& m, const DiffusionSchedule& s, const std::vector<Tensor>& clean,
                     const ProfileOptions& opt) {
  if (opt.samples == 0) throw std::invalid_argument("profile: need at least one sample");
  if (clean.empty()) throw std::invalid_argument("profile: no clean inputs");
  ToyDiT full = m;
  full.set_masks(std::vector<TileMask>(m.config.layers,
                                       make_full_mask(m.config.frames, m.config.tokens_per_frame())));
  Rng rng(opt.seed);
  ProbeSet p;
  for (std::size_t k = 0; k < opt.samples; ++k) {
    const Tensor& z0 = clean[k % clean.size()];
    const int t = static_cast<int>(rng.uniform_int(1, s.train_steps()));
    const Tensor eps = rng.normal_tensor(z0.shape());
    p.z.push_back(forward_diffuse(z0, eps, t, s));
    p.t.push_back(t);
    p.reference.push_back(dit_forward(full, p.z.back(), t).taps.final_hidden);
  }
  return p;
}

double probe_loss(const ToyDiT& m, const std::vector<TileMask>& masks, const ProbeSet& p) {
  ToyDiT probe;
  probe.config = m.config;
  probe.params = m.params;
  probe.set_masks(masks);
  double worst = 0.0;
  for (std::size_t k = 0; k < p.z.size(); ++k) {
    const Tensor h = dit_forward(probe, p.z[k], p.t[k]).taps.final_hidden;
    worst = std::max(worst, mean_squared_error(h, p.reference[k]));
  }
  return worst;
}

// Integer time units and capacity for the DP.
struct Quantized {
  std::vector<std::int64_t> units;
  std::int64_t capacity;
};

Quantized quantize(const std::vector<double>& time, double target, std::size_t layers) {
  Quantized q;
  const bool integral = std::all_of(time.begin(), time.end(), [](double v) {
    return v == std::floor(v) && v < 1e12;
  });
  double quantum = 1e-3;
  if (integral) {
    std::int64_t g = 0;
    for (double v : time) g = std::gcd(g, static_cast<std::int64_t>(v));
    quantum = static_cast<double>(g);
    for (double v : time) q.units.push_back(static_cast<std::int64_t>(v) / g);
  } else {
    for (double v : time) q.units.push_back(static_cast<std::int64_t>(std::ceil(v / quantum - 1e-9)));
  }
  const std::int64_t most = *std::max_element(q.units.begin(), q.units.end()) *
                            static_cast<std::int64_t>(layers);
  const double cap = std::floor(target / quantum + 1e-9);
  q.capacity = cap >= static_cast<double>(most) ? most : static_cast<std::int64_t>(cap);
  return q;
}

void check_budget(const LossTimeTables& t) {
  const double min_time =
      static_cast<double>(t.layers()) * *std::min_element(t.time.begin(), t.time.end());
  if (min_time > t.target) throw InfeasibleBudget(min_time, t.target);
}

Assignment dp_additive(const LossTimeTables& t) {
  const std::size_t L = t.layers(), n = t.menu_size();
  const Quantized q = quantize(t.time, t.target, L);
  if (static_cast<std::int64_t>(L) * *std::min_element(q.units.begin(), q.units.end()) > q.capacity)
    throw InfeasibleBudget(static_cast<double>(L) * *std::min_element(t.time.begin(), t.time.end()),
                           t.target);
  const std::size_t C = static_cast<std::size_t>(q.capacity);
  // best[j][c]: minimal loss of layers j..L-1 within c units.
  std::vector<std::vector<double>> best(L + 1, std::vector<double>(C + 1, kInf));
  std::fill(best[L].begin(), best[L].end(), 0.0);
  for (std::size_t j = L; j-- > 0;) {
    for (std::size_t c = 0; c <= C; ++c) {
      double b = kInf;
      for (std::size_t i = 0; i < n; ++i) {
        const auto u = static_cast<std::size_t>(q.units[i]);
        if (u > c || best[j + 1][c - u] == kInf) continue;
        b = std::min(b, t.loss[j][i] + best[j + 1][c - u]);
      }
      best[j][c] = b;
    }
  }
  Assignment a(L);
  std::size_t c = C;
  for (std::size_t j = 0; j < L; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto u = static_cast<std::size_t>(q.units[i]);
      if (u > c || best[j + 1][c - u] == kInf) continue;
      if (t.loss[j][i] + best[j + 1][c - u] == best[j][c]) {
        a[j] = i;
        c -= u;
        break;
      }
    }
  }
  return a;
}

Assignment dp_minimax(const LossTimeTables& t) {
  const std::size_t L = t.layers(), n = t.menu_size();
  const Quantized q = quantize(t.time, t.target, L);
  std::vector<double> values;
  for (const auto& row : t.loss) values.insert(values.end(), row.begin(), row.end());
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());

  // Cheapest units per layer among masks whose loss is at most v.
  auto min_units = [&](std::size_t j, double v) {
    std::int64_t m = std::numeric_limits<std::int64_t>::max();
    for (std::size_t i = 0; i < n; ++i)
      if (t.loss[j][i] <= v) m = std::min(m, q.units[i]);
    return m;
  };
  auto feasible = [&](double v) {
    std::int64_t sum = 0;
    for (std::size_t j = 0; j < L; ++j) {
      const std::int64_t m = min_units(j, v);
      if (m == std::numeric_limits<std::int64_t>::max()) return false;
      sum += m;
    }
    return sum <= q.capacity;
  };
  if (!feasible(values.back()))
    throw InfeasibleBudget(static_cast<double>(L) * *std::min_element(t.time.begin(), t.time.end()),
                           t.target);
  std::size_t lo = 0, hi = values.size() - 1;
  while (lo < hi) {
    const std::size_t mid = (lo + hi) / 2;
    if (feasible(values[mid])) hi = mid;
    else lo = mid + 1;
  }
  const double v = values[lo];
  std::vector<std::int64_t> rest(L + 1, 0);
  for (std::size_t j = L; j-- > 0;) rest[j] = rest[j + 1] + min_units(j, v);
  Assignment a(L);
  std::int64_t left = q.capacity;
  for (std::size_t j = 0; j < L; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      if (t.loss[j][i] <= v && q.units[i] + rest[j + 1] <= left) {
        a[j] = i;
        left -= q.units[i];
        break;
      }
    }
  }
  return a;
}

}  // namespace

MaskMenu::MaskMenu(std::vector<TileMask> masks) : masks_(std::move(masks)) {
  if (masks_.empty()) throw std::invalid_argument("mask menu is empty");
  if (masks_[0].kept_count() != masks_[0].frames() * masks_[0].frames())
    throw std::invalid_argument("mask menu must start with the full mask");
  for (std::size_t i = 1; i < masks_.size(); ++i) {
    if (masks_[i].frames() != masks_[0].frames() ||
        masks_[i].tokens_per_frame() != masks_[0].tokens_per_frame())
      throw GeometryError("mask menu entries differ in geometry");
    if (masks_[i].sparsity() < masks_[i - 1].sparsity())
      throw std::invalid_argument("mask menu must be ordered dense to sparse");
  }
}

MaskMenu MaskMenu::global(std::size_t frames, std::size_t tpf, const std::vector<std::size_t>& ks) {
  std::vector<std::size_t> sorted = ks;
  std::sort(sorted.rbegin(), sorted.rend());
  std::vector<TileMask> masks = {make_full_mask(frames, tpf)};
  for (std::size_t k : sorted) {
    TileMask m = make_global_mask(frames, k, tpf);
    if (m.kept_count() == masks.back().kept_count()) continue;
    masks.push_back(std::move(m));
  }
  return MaskMenu(std::move(masks));
}

void LossTimeTables::validate() const {
  if (loss.empty() || time.empty()) throw std::invalid_argument("search tables are empty");
  for (const auto& row : loss) {
    if (row.size() != time.size()) throw std::invalid_argument("loss table width differs from menu size");
    for (double v : row)
      if (!(v >= 0.0)) throw std::invalid_argument("losses must be nonnegative");
  }
  for (double v : time)
    if (!(v > 0.0)) throw std::invalid_argument("times must be positive");
}

std::string to_string(Objective o) { return o == Objective::additive ? "additive" : "minimax"; }

Objective objective_from_string(const std::string& s) {
  if (s == "additive") return Objective::additive;
  if (s == "minimax") return Objective::minimax;
  throw std::invalid_argument("unknown objective '" + s + "'");
}

InfeasibleBudget::InfeasibleBudget(double min_time, double target)
    : std::runtime_error([&] {
        std::ostringstream os;
        os << "latency budget " << target << " is infeasible; minimum achievable time is " << min_time;
        return os.str();
      }()),
      min_time_(min_time) {}

double objective_value(const LossTable& loss, const Assignment& a, Objective o) {
  double v = 0.0;
  for (std::size_t j = a.size(); j-- > 0;) {
    if (o == Objective::additive) v = loss[j][a[j]] + v;
    else v = std::max(v, loss[j][a[j]]);
  }
  return v;
}

double assignment_time(const std::vector<double>& time, const Assignment& a) {
  double s = 0.0;
  for (std::size_t i : a) s += time[i];
  return s;
}

LossTable profile_layer_losses(const ToyDiT& m, const DiffusionSchedule& s, const MaskMenu& menu,
                               const std::vector<Tensor>& clean, const ProfileOptions& opt) {
  const ProbeSet probes = make_probes(m, s, clean, opt);
  const std::size_t L = m.config.layers, n = menu.size();
  const TileMask full = make_full_mask(m.config.frames, m.config.tokens_per_frame());
  LossTable loss(L, std::vector<double>(n, 0.0));
  const auto pairs = static_cast<std::int64_t>(L * n);
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t idx = 0; idx < pairs; ++idx) {
    const auto j = static_cast<std::size_t>(idx) / n, i = static_cast<std::size_t>(idx) % n;
    std::vector<TileMask> masks(L, full);
    masks[j] = menu[i];
    loss[j][i] = probe_loss(m, masks, probes);
  }
  return loss;
}

Assignment greedy_search(const LossProvider& loss, std::size_t layers, std::size_t menu_size, double r) {
  if (!(r > 0.0)) throw std::invalid_argument("greedy threshold must be positive");
  Assignment a(layers, 0);
  for (std::size_t j = 0; j < layers; ++j) {
    for (std::size_t i = 1; i < menu_size; ++i) {
      if (loss(j, i) < r) a[j] = i;
      else break;
    }
  }
  return a;
}

Assignment greedy_search(const LossTable& loss, double r) {
  if (loss.empty()) return {};
  return greedy_search([&](std::size_t j, std::size_t i) { return loss[j][i]; }, loss.size(),
                       loss[0].size(), r);
}

Assignment greedy_search_model(const ToyDiT& m, const DiffusionSchedule& s, const MaskMenu& menu,
                               const std::vector<Tensor>& clean, const ProfileOptions& opt,
                               double r, bool cumulative) {
  const ProbeSet probes = make_probes(m, s, clean, opt);
  const std::size_t L = m.config.layers;
  const TileMask full = make_full_mask(m.config.frames, m.config.tokens_per_frame());
  Assignment a(L, 0);
  for (std::size_t j = 0; j < L; ++j) {
    // Layers are scanned in order, so earlier choices are final here.
    auto provider = [&](std::size_t, std::size_t i) {
      std::vector<TileMask> masks(L, full);
      if (cumulative)
        for (std::size_t l = 0; l < j; ++l) masks[l] = menu[a[l]];
      masks[j] = menu[i];
      return probe_loss(m, masks, probes);
    };
    a[j] = greedy_search(provider, 1, menu.size(), r)[0];
  }
  return a;
}

Assignment dp_search(const LossTimeTables& t, Objective o) {
  t.validate();
  check_budget(t);
  return o == Objective::additive ? dp_additive(t) : dp_minimax(t);
}

Assignment brute_force_search(const LossTimeTables& t, Objective o) {
  t.validate();
  const std::size_t L = t.layers(), n = t.menu_size();
  double combos = 1.0;
  for (std::size_t j = 0; j < L; ++j) combos *= static_cast<double>(n);
  if (combos > 1e6) throw std::invalid_argument("brute force: more than 1e6 assignments");
  check_budget(t);
  Assignment a(L, 0), best;
  double best_value = kInf;
  while (true) {
    if (assignment_time(t.time, a) <= t.target) {
      const double v = objective_value(t.loss, a, o);
      if (v < best_value) {
        best_value = v;
        best = a;
      }
    }
    std::size_t j = L;
    while (j > 0 && a[j - 1] + 1 == n) a[--j] = 0;
    if (j == 0) break;
    ++a[j - 1];
  }
  if (best.empty()) {
    throw InfeasibleBudget(static_cast<double>(L) * *std::min_element(t.time.begin(), t.time.end()),
                           t.target);
  }
  return best;
}

void LagrangianConfig::validate() const {
  if (!(alpha0 > 0.0)) throw std::invalid_argument("lagrangian: step size must be positive");
  if (iterations < 1) throw std::invalid_argument("lagrangian: need at least one iteration");
  if (!(lambda0 >= 0.0)) throw std::invalid_argument("lagrangian: initial multiplier must be nonnegative");
}

LagrangianConfig default_lagrangian_config(const LossTimeTables& t) {
  t.validate();
  double lo = kInf, hi = 0.0;
  for (const auto& row : t.loss)
    for (double v : row) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  const auto [tmin, tmax] = std::minmax_element(t.time.begin(), t.time.end());
  const double span = *tmax - *tmin;
  LagrangianConfig cfg;
  // λ of order loss-range / time-range is reached after a few steps of size
  // |g| ~ L·time-range.
  if (hi > lo && span > 0.0)
    cfg.alpha0 = (hi - lo) / (static_cast<double>(t.layers()) * span * span);
  return cfg;
}

Assignment lagrangian_argmin(const LossTimeTables& t, double lambda) {
  Assignment a(t.layers(), 0);
  for (std::size_t j = 0; j < t.layers(); ++j) {
    double best = kInf;
    for (std::size_t i = 0; i < t.menu_size(); ++i) {
      const double v = t.loss[j][i] + lambda * t.time[i];
      if (v < best) {  // strict: ties keep the denser mask
        best = v;
        a[j] = i;
      }
    }
  }
  return a;
}

LagrangianResult lagrangian_search(const LossTimeTables& t, const LagrangianConfig& cfg) {
  t.validate();
  cfg.validate();
  LagrangianResult res;
  double lambda = cfg.lambda0;
  double best = kInf;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const Assignment a = lagrangian_argmin(t, lambda);
    const double time = assignment_time(t.time, a);
    const double loss = objective_value(t.loss, a, Objective::additive);
    const double g = time - t.target;
    res.history.push_back({lambda, g, loss, time});
    if (g <= 0.0 && loss < best) {
      best = loss;
      res.assignment = a;
    }
    const double alpha = cfg.alpha0 / std::sqrt(static_cast<double>(it) + 1.0);
    lambda = std::max(0.0, lambda + alpha * g);
  }
  res.lambda_final = lambda;
  if (res.assignment.empty()) {
    const Assignment sparsest(t.layers(), t.menu_size() - 1);
    if (assignment_time(t.time, sparsest) > t.target) {
      throw InfeasibleBudget(static_cast<double>(t.layers()) *
                                 *std::min_element(t.time.begin(), t.time.end()),
                             t.target);
    }
    res.assignment = sparsest;
    res.fallback = true;
  }
  return res;
}

std::vector<double> analytic_times(const MaskMenu& menu) {
  std::vector<double> out;
  for (const auto& m : menu.masks())
    out.push_back(static_cast<double>(m.kept_count()) / static_cast<double>(m.frames() * m.frames()));
  return out;
}

std::string loss_table_csv(const LossTable& loss) {
  std::ostringstream os;
  os << "layer,mask_id,loss_max\n" << std::setprecision(17);
  for (std::size_t j = 0; j < loss.size(); ++j)
    for (std::size_t i = 0; i < loss[j].size(); ++i) os << j << ',' << i << ',' << loss[j][i] << '\n';
  return os.str();
}

LossTable parse_loss_table_csv(const std::string& text) {
  const auto lines = lines_of(text);
  if (lines.empty() || lines[0] != "layer,mask_id,loss_max")
    throw std::invalid_argument("loss table: expected header layer,mask_id,loss_max");
  LossTable loss;
  std::vector<std::vector<bool>> seen;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto f = split(lines[r], ',');
    if (f.size() != 3) throw std::invalid_argument("loss table: bad row " + std::to_string(r + 1));
    const auto j = static_cast<std::size_t>(std::stoull(f[0]));
    const auto i = static_cast<std::size_t>(std::stoull(f[1]));
    if (loss.size() <= j) {
      loss.resize(j + 1);
      seen.resize(j + 1);
    }
    if (loss[j].size() <= i) {
      loss[j].resize(i + 1, 0.0);
      seen[j].resize(i + 1, false);
    }
    loss[j][i] = std::stod(f[2]);
    seen[j][i] = true;
  }
  for (const auto& row : seen)
    for (bool b : row)
      if (!b) throw std::invalid_argument("loss table: missing (layer, mask) entries");
  for (const auto& row : loss)
    if (row.size() != loss[0].size()) throw std::invalid_argument("loss table: ragged rows");
  return loss;
}

std::string time_table_csv(const std::vector<double>& time, const std::string& provenance) {
  std::ostringstream os;
  os << "mask_id,time_ms,provenance\n" << std::setprecision(17);
  for (std::size_t i = 0; i < time.size(); ++i) os << i << ',' << time[i] << ',' << provenance << '\n';
  return os.str();
}

std::vector<double> parse_time_table_csv(const std::string& text, std::string* provenance) {
  const auto lines = lines_of(text);
  if (lines.empty() || lines[0] != "mask_id,time_ms,provenance")
    throw std::invalid_argument("time table: expected header mask_id,time_ms,provenance");
  std::vector<double> time;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto f = split(lines[r], ',');
    if (f.size() != 3 || std::stoull(f[0]) != r - 1)
      throw std::invalid_argument("time table: bad row " + std::to_string(r + 1));
    time.push_back(std::stod(f[1]));
    if (provenance) *provenance = f[2];
  }
  return time;
}

std::string assignment_json(const Assignment& a, const std::string& objective, double target) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["assignment"] = a;
  j["objective"] = objective;
  if (std::isfinite(target)) j["T_target"] = target;
  else j["T_target"] = nullptr;
  return j.dump(2) + "\n";
}

Assignment parse_assignment_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("version").get<int>() != 1) throw std::invalid_argument("assignment: unsupported version");
    return j.at("assignment").get<Assignment>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("assignment: ") + e.what());
  }
}

}  // namespace tiledit
