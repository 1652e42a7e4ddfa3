#include <algorithm>

#include "doctest.h"
#include "test_support.hpp"
#include "tiledit/search.hpp"

using namespace tiledit;

namespace {

LossTimeTables fixture() {
  LossTimeTables t;
  t.loss = {{0, 1, 4}, {0, 2, 8}};
  t.time = {10, 6, 4};
  t.target = 14;
  return t;
}

// Random instance with monotone rows; losses on a 1/64 grid so sums are exact.
LossTimeTables random_instance(Rng& rng, bool grid) {
  LossTimeTables t;
  const auto L = static_cast<std::size_t>(rng.uniform_int(1, 6));
  const auto n = static_cast<std::size_t>(rng.uniform_int(1, 5));
  double tm = static_cast<double>(rng.uniform_int(10, 20));
  for (std::size_t i = 0; i < n; ++i) {
    t.time.push_back(tm);
    tm = std::max(1.0, tm - static_cast<double>(rng.uniform_int(1, 5)));
  }
  for (std::size_t j = 0; j < L; ++j) {
    std::vector<double> row = {0.0};
    for (std::size_t i = 1; i < n; ++i) {
      const double step = grid ? static_cast<double>(rng.uniform_int(0, 64)) / 64.0 : rng.uniform();
      row.push_back(row.back() + step);
    }
    t.loss.push_back(row);
  }
  const double lo = static_cast<double>(L) * t.time.back();
  const double hi = static_cast<double>(L) * t.time.front();
  t.target = std::floor(lo + rng.uniform() * (hi - lo));
  if (t.target < lo) t.target = lo;
  return t;
}

}  // namespace

TEST_CASE("menu ordering") {
  const MaskMenu menu = MaskMenu::global(8, 4, {4, 3, 2, 1});
  CHECK(menu.size() == 5);
  CHECK(menu[0].label() == "full");
  CHECK(menu[4].label() == "1:7");
  for (std::size_t i = 1; i < menu.size(); ++i) CHECK(menu[i].sparsity() >= menu[i - 1].sparsity());
  CHECK_THROWS_AS(MaskMenu({make_global_mask(8, 2, 4), make_full_mask(8, 4)}), std::invalid_argument);
  // k = F-1 duplicates the full mask and is dropped.
  CHECK(MaskMenu::global(4, 1, {3, 1}).size() == 2);
}

TEST_CASE("greedy hand trace") {
  const LossTable loss = {{0, 0.05, 0.2}, {0, 0.3, 0.5}};
  CHECK(greedy_search(loss, 0.1) == Assignment{1, 0});
  CHECK(greedy_search(loss, 1e9) == Assignment{2, 2});
  CHECK(greedy_search(loss, 0.01) == Assignment{0, 0});
  // A violation stops the scan even if later masks pass.
  CHECK(greedy_search(LossTable{{0, 0.5, 0.05}}, 0.1) == Assignment{0});
  CHECK_THROWS_AS(greedy_search(loss, 0.0), std::invalid_argument);
}

TEST_CASE("greedy is monotone in the threshold") {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto t = random_instance(rng, false);
    Assignment prev = greedy_search(t.loss, 1e-6);
    for (double r : {0.01, 0.1, 0.3, 0.7, 1.5, 4.0}) {
      const Assignment a = greedy_search(t.loss, r);
      for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j] >= prev[j]);
      prev = a;
    }
  }
}

TEST_CASE("dp fixture and limits") {
  const auto t = fixture();
  CHECK(dp_search(t, Objective::additive) == Assignment{1, 1});
  CHECK(dp_search(t, Objective::minimax) == Assignment{1, 1});
  CHECK(brute_force_search(t, Objective::additive) == Assignment{1, 1});
  CHECK(brute_force_search(t, Objective::minimax) == Assignment{1, 1});
  CHECK(objective_value(t.loss, {1, 1}, Objective::additive) == 3.0);
  CHECK(assignment_time(t.time, {1, 1}) == 12.0);

  auto loose = t;
  loose.target = 20;
  CHECK(dp_search(loose, Objective::additive) == Assignment{0, 0});
  CHECK(dp_search(loose, Objective::minimax) == Assignment{0, 0});

  auto tight = t;
  tight.target = 7;
  try {
    dp_search(tight, Objective::additive);
    FAIL("expected infeasible budget");
  } catch (const InfeasibleBudget& e) {
    CHECK(e.min_time() == 8.0);
  }
  CHECK_THROWS_AS(brute_force_search(tight, Objective::minimax), InfeasibleBudget);

  LossTimeTables one;
  one.loss = {{0, 0.5, 2.0}};
  one.time = {5, 3, 1};
  one.target = 3;
  CHECK(dp_search(one, Objective::additive) == Assignment{1});
  CHECK(brute_force_search(one, Objective::additive) == Assignment{1});
}

TEST_CASE("dp equals brute force on random instances") {
  Rng rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    const auto t = random_instance(rng, trial % 2 == 0);
    for (Objective o : {Objective::additive, Objective::minimax}) {
      const Assignment a = dp_search(t, o);
      const Assignment b = brute_force_search(t, o);
      REQUIRE(assignment_time(t.time, a) <= t.target);
      CHECK(objective_value(t.loss, a, o) == objective_value(t.loss, b, o));
      CHECK(a == b);
    }
  }
}

TEST_CASE("lagrangian fixture trace") {
  const auto t = fixture();
  LagrangianConfig cfg;
  cfg.lambda0 = 0.0;
  cfg.alpha0 = 0.1;
  cfg.iterations = 50;
  const auto res = lagrangian_search(t, cfg);
  REQUIRE(!res.history.empty());
  CHECK(res.history[0].lambda == 0.0);
  CHECK(res.history[0].time == 20.0);
  CHECK(res.history[0].subgradient == 6.0);
  CHECK(res.history[1].lambda > 0.0);
  CHECK(assignment_time(t.time, res.assignment) <= t.target);

  auto loose = t;
  loose.target = 20;
  const auto r2 = lagrangian_search(loose, cfg);
  CHECK(r2.assignment == Assignment{0, 0});
  CHECK(r2.history[0].subgradient <= 0.0);

  // Separability: the joint argmin equals per-layer argmins.
  for (double lambda : {0.0, 0.1, 0.25, 0.5, 1.0, 3.0}) {
    const Assignment joint = lagrangian_argmin(t, lambda);
    for (std::size_t j = 0; j < t.layers(); ++j) {
      LossTimeTables single = t;
      single.loss = {t.loss[j]};
      CHECK(lagrangian_argmin(single, lambda)[0] == joint[j]);
    }
  }
}

TEST_CASE("lagrangian quality on random instances") {
  Rng rng(3);
  int within = 0;
  const int total = 200;
  double worst = 0.0;
  for (int trial = 0; trial < total; ++trial) {
    const auto t = random_instance(rng, false);
    const auto res = lagrangian_search(t, default_lagrangian_config(t));
    REQUIRE(assignment_time(t.time, res.assignment) <= t.target);
    const double opt = objective_value(t.loss, dp_search(t, Objective::additive), Objective::additive);
    const double got = objective_value(t.loss, res.assignment, Objective::additive);
    const double gap = opt > 0 ? (got - opt) / opt : (got > 0 ? 1.0 : 0.0);
    worst = std::max(worst, gap);
    if (got <= opt * 1.1 + 1e-12) ++within;
  }
  MESSAGE("within 10%: " << within << "/" << total << ", worst gap " << worst);
  CHECK(within >= 190);
}

TEST_CASE("table file formats round trip") {
  const LossTable loss = {{0, 0.125, 1.0 / 3.0}, {0, 2.5, 7}};
  CHECK(parse_loss_table_csv(loss_table_csv(loss)) == loss);
  CHECK(loss_table_csv({{0, 1}}) == "layer,mask_id,loss_max\n0,0,0\n0,1,1\n");
  std::string prov;
  const std::vector<double> time = {1.0, 0.8125, 1.0 / 7.0};
  CHECK(parse_time_table_csv(time_table_csv(time, "analytic"), &prov) == time);
  CHECK(prov == "analytic");
  const std::string js = assignment_json({1, 0, 2}, "additive", 14);
  CHECK(parse_assignment_json(js) == Assignment{1, 0, 2});
  CHECK(js.find("\"T_target\": 14") != std::string::npos);
  CHECK_THROWS_AS(parse_loss_table_csv("a,b\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_loss_table_csv("layer,mask_id,loss_max\n0,1,0.5\n"), std::invalid_argument);
}

TEST_CASE("profiling on a model") {
  DitConfig c;
  c.layers = 2;
  c.heads = 2;
  c.dim = 8;
  c.frames = 4;
  c.height = 2;
  c.width = 2;
  c.channels = 2;
  c.train_steps = 50;
  Rng rng(4);
  ToyDiT m = make_toy_dit(c, rng);
  const auto s = DiffusionSchedule::scaled_linear(50);
  SyntheticDataset data(4, 2, 2, 2, 1, 5);
  const MaskMenu menu = MaskMenu::global(4, 4, {2, 1});
  ProfileOptions opt;
  opt.samples = 3;
  const LossTable loss = profile_layer_losses(m, s, menu, data.batch(0, 3), opt);
  REQUIRE(loss.size() == 2);
  for (const auto& row : loss) {
    CHECK(row[0] == 0.0);
    for (double v : row) CHECK(v >= 0.0);
  }
  CHECK(loss[0][2] > 0.0);
  // Repeated profiling with the same seed is identical.
  CHECK(profile_layer_losses(m, s, menu, data.batch(0, 3), opt) == loss);

  // Zero value projection makes layer 0 blind to its mask.
  ToyDiT blind = m;
  blind.params.layers[0].attn.wv.fill(0.0);
  const LossTable lb = profile_layer_losses(blind, s, menu, data.batch(0, 3), opt);
  for (double v : lb[0]) CHECK(v == 0.0);

  // Greedy over the live model matches greedy over the table it profiles.
  const double r = 0.5 * (loss[0][1] + loss[0][2]);
  CHECK(greedy_search_model(m, s, menu, data.batch(0, 3), opt, r, false) == greedy_search(loss, r));
  const Assignment cum = greedy_search_model(m, s, menu, data.batch(0, 3), opt, r, true);
  CHECK(cum[0] == greedy_search(loss, r)[0]);
}

TEST_CASE("analytic times follow kept blocks") {
  const MaskMenu menu = MaskMenu::global(8, 4, {2});
  const auto t = analytic_times(menu);
  CHECK(t[0] == 1.0);
  CHECK(t[1] == doctest::Approx(34.0 / 64.0));
}
