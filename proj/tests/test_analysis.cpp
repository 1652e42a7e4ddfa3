#include <cmath>
#include <functional>
#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "test_support.hpp"
#include "tiledit/analysis.hpp"
#include "tiledit/training.hpp"

using namespace tiledit;

namespace {

// Row-stochastic map whose tile (fq, fk) holds a constant weight.
AttnMap block_constant(std::size_t F, std::size_t S, const std::function<double(std::size_t, std::size_t)>& w) {
  const std::size_t n = F * S;
  Tensor m({n, n});
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t k = 0; k < n; ++k) m(q, k) = w(q / S, k / S);
  return {m, F, S};
}

AttnMap uniform_map(std::size_t F, std::size_t S) {
  const double v = 1.0 / static_cast<double>(F * S);
  return block_constant(F, S, [v](std::size_t, std::size_t) { return v; });
}

}  // namespace

TEST_CASE("diagonal ratio of constant tiles") {
  // F = 4, S = 2: a·2 + b·6 = 1 with a = 0.2, b = 0.1; ratio is scale-free.
  const AttnMap m = block_constant(4, 2, [](std::size_t i, std::size_t j) { return i == j ? 0.2 : 0.05; });
  const DiagonalStats d = diagonal_ratio(m);
  CHECK(d.diag_mean == doctest::Approx(0.2));
  CHECK(d.offdiag_mean == doctest::Approx(0.05));
  CHECK(d.ratio == doctest::Approx(4.0));
  CHECK(diagonal_ratio(uniform_map(5, 3)).ratio == doctest::Approx(1.0).epsilon(1e-14));
  CHECK_THROWS_AS(diagonal_ratio(uniform_map(1, 4)), std::domain_error);
}

TEST_CASE("diagonal ratio is invariant to permuting whole frames") {
  Rng rng(1);
  const std::size_t F = 4, S = 3, n = F * S;
  Tensor w = softmax_rows(rng.normal_tensor({n, n}, 2.0));
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  Tensor p({n, n});
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t k = 0; k < n; ++k)
      p(perm[q / S] * S + q % S, perm[k / S] * S + k % S) = w(q, k);
  CHECK(diagonal_ratio({w, F, S}).ratio == doctest::Approx(diagonal_ratio({p, F, S}).ratio).epsilon(1e-12));
}

TEST_CASE("locality curve") {
  // Tile (0, j) constant 1/(1+j): differences to tile (0,0) grow with j.
  const AttnMap m = block_constant(5, 2, [](std::size_t, std::size_t j) { return 1.0 / (1.0 + j); });
  const auto c = locality_curve(m);
  REQUIRE(c.size() == 4);
  for (std::size_t j = 1; j < c.size(); ++j) CHECK(c[j] > c[j - 1]);
  CHECK(c[0] == doctest::Approx(0.5));

  const auto flat = locality_curve(uniform_map(6, 2));
  CHECK(flat.size() == 5);
  for (double v : flat) CHECK(v == 0.0);

  // Monotone decaying off-diagonal tiles give a nondecreasing curve.
  const AttnMap decay =
      block_constant(6, 3, [](std::size_t i, std::size_t j) { return std::pow(0.6, std::abs(double(i) - double(j))); });
  const auto dc = locality_curve(decay);
  for (std::size_t j = 1; j < dc.size(); ++j) CHECK(dc[j] >= dc[j - 1]);
}

TEST_CASE("top mass overlap") {
  Rng rng(2);
  const std::size_t n = 8;
  const AttnMap a{softmax_rows(rng.normal_tensor({n, n})), 4, 2};
  for (double p : {0.1, 0.5, 0.9, 0.99, 1.0}) CHECK(top_mass_overlap(a, a, p) == 1.0);

  // Concentrated diagonal against concentrated anti-diagonal.
  Tensor diag({n, n}, 0.05 / (n - 1)), anti({n, n}, 0.05 / (n - 1));
  for (std::size_t i = 0; i < n; ++i) {
    diag(i, i) = 0.95;
    anti(i, n - 1 - i) = 0.95;
  }
  CHECK(top_mass_overlap({diag, 4, 2}, {anti, 4, 2}, 0.9) == 0.0);

  // Nested selections.
  const auto s90 = top_mass_positions(a.weights, 0.9);
  const auto s99 = top_mass_positions(a.weights, 0.99);
  CHECK(std::includes(s99.begin(), s99.end(), s90.begin(), s90.end()));

  // Ties at the cutoff resolve in (row, col) order.
  const Tensor flat({2, 2}, 0.25);
  CHECK(top_mass_positions(flat, 0.5) == std::vector<std::size_t>{0, 1});
  CHECK(top_mass_positions(flat, 0.6) == std::vector<std::size_t>{0, 1, 2});
  CHECK_THROWS_AS(top_mass_positions(flat, 0.0), std::invalid_argument);
}

TEST_CASE("statistics of a trained toy model") {
  DitConfig c;
  c.layers = 2;
  c.heads = 2;
  c.dim = 16;
  c.frames = 4;
  c.height = 2;
  c.width = 2;
  c.channels = 2;
  c.train_steps = 50;
  Rng rng(3);
  ToyDiT m = make_toy_dit(c, rng);
  const auto s = DiffusionSchedule::scaled_linear(50);
  SyntheticDataset data(4, 2, 2, 2, 1, 4);
  TrainOptions opt;
  opt.steps = 60;
  opt.learning_rate = 3e-3;
  train_toy(m, s, data, opt);

  const auto maps = model_attention_maps(m, data.tokens(0), 10);
  REQUIRE(maps.size() == 4);
  for (const auto& mp : maps) {
    for (std::size_t q = 0; q < mp.weights.rows(); ++q) {
      double sum = 0.0;
      for (double v : mp.weights.row(q)) {
        CHECK(v >= 0.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
  const auto rows = tile_statistics(m, data.tokens(0), data.tokens(1), 10, {0.9});
  // Per (layer, head): 3 diagonal stats, F-1 locality points, one overlap.
  CHECK(rows.size() == 4 * (3 + 3 + 1));
  const std::string csv = stats_csv(rows);
  CHECK(csv.rfind("layer,head,statistic,value\n", 0) == 0);
  double ratio_sum = 0.0;
  for (const auto& r : rows)
    if (r.statistic == "diag_ratio") ratio_sum += r.value;
  MESSAGE("mean diagonal ratio " << ratio_sum / 4.0);
}
