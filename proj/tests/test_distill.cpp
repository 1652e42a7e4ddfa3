#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "test_support.hpp"
#include "tiledit/checkpoint.hpp"
#include "tiledit/kd.hpp"
#include "tiledit/mlcd.hpp"

using namespace tiledit;

namespace {

DitConfig tiny_config() {
  DitConfig c;
  c.layers = 2;
  c.heads = 2;
  c.dim = 8;
  c.frames = 4;
  c.height = 2;
  c.width = 2;
  c.channels = 2;
  c.patch = 1;
  c.train_steps = 50;
  return c;
}

bool same_params(const DitParams& a, const DitParams& b) {
  const auto x = named_tensors(a);
  const auto y = named_tensors(b);
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i].first != y[i].first || !(*x[i].second == *y[i].second)) return false;
  return true;
}

void perturb(DitParams& p, Rng& rng, double sd) {
  for (auto& [name, t] : named_tensors(p))
    for (auto& v : t->values()) v += sd * rng.normal();
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("tiledit_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Exact ε-predictor for a dataset consisting of the single point x0.
EpsPredictor exact_for_point(const Tensor& x0, const DiffusionSchedule& s) {
  return [x0, &s](const Tensor& z, int t) {
    Tensor e = z;
    axpy_inplace(e, -std::sqrt(s.alpha_bar(t)), x0);
    for (auto& v : e.values()) v /= std::sqrt(1.0 - s.alpha_bar(t));
    return e;
  };
}

}  // namespace

TEST_CASE("checkpoint round trip is bitwise exact") {
  Rng rng(1);
  ToyDiT m = make_toy_dit(tiny_config(), rng);
  m.set_masks({make_global_mask(4, 1, 4), make_custom_mask(4, 4, {{0, 3}, {2, 1}})});
  const auto s = DiffusionSchedule::scaled_linear(50);
  const auto dir = scratch_dir("ckpt");
  const std::string path = (dir / "model.evdt").string();
  save_checkpoint(path, m, s);

  const Checkpoint back = load_checkpoint(path);
  CHECK(back.model.config == m.config);
  CHECK(same_params(back.model.params, m.params));
  REQUIRE(back.model.masks.size() == 2);
  CHECK(back.model.masks[0] == m.masks[0]);
  CHECK(back.model.masks[1] == m.masks[1]);
  for (int t = 0; t <= 50; ++t) CHECK(back.schedule.alpha_bar(t) == s.alpha_bar(t));

  // Header bytes.
  std::ifstream f(path, std::ios::binary);
  char head[8];
  f.read(head, 8);
  CHECK(std::string(head, 4) == "EVDT");
  CHECK(head[4] == 1);
  CHECK(head[5] == 0);

  // Saving the loaded model again reproduces the file byte for byte.
  const std::string again = (dir / "again.evdt").string();
  save_checkpoint(again, back.model, back.schedule);
  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  const std::string a = slurp(path), b = slurp(again);
  // Mask file names differ, so compare only the payload tail.
  const std::size_t payload = parameter_count(m.params) * 8;
  CHECK(a.substr(a.size() - payload) == b.substr(b.size() - payload));
}

TEST_CASE("checkpoint rejects damaged files") {
  const auto dir = scratch_dir("ckpt_bad");
  const std::string bad = (dir / "bad.evdt").string();
  {
    std::ofstream f(bad, std::ios::binary);
    f << "NOPE0000000000000000";
  }
  CHECK_THROWS_AS(load_checkpoint(bad), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.evdt").string()), CheckpointError);

  Rng rng(2);
  const ToyDiT m = make_toy_dit(tiny_config(), rng);
  const std::string good = (dir / "good.evdt").string();
  save_checkpoint(good, m, DiffusionSchedule::scaled_linear(50));
  std::ifstream in(good, std::ios::binary);
  std::string bytes(std::istreambuf_iterator<char>(in), {});
  bytes.resize(bytes.size() - 3);
  const std::string cut = (dir / "good_cut.evdt").string();
  std::filesystem::copy_file(good + ".mask0.json", cut + ".mask0.json");
  std::filesystem::copy_file(good + ".mask1.json", cut + ".mask1.json");
  std::ofstream(cut, std::ios::binary) << bytes;
  CHECK_THROWS_AS(load_checkpoint(cut), CheckpointError);
}

TEST_CASE("milestones") {
  CHECK(milestones(20, 4).boundaries == std::vector<int>{0, 5, 10, 15, 20});
  CHECK(milestones(37, 1).boundaries == std::vector<int>{0, 37});
  CHECK(milestones(50, 3).boundaries == std::vector<int>{0, 17, 33, 50});
  CHECK_THROWS_AS(milestones(3, 4), std::invalid_argument);
  for (int T = 1; T <= 60; ++T)
    for (int S = 1; S <= T; ++S) {
      const auto b = milestones(T, S).boundaries;
      REQUIRE(b.front() == 0);
      REQUIRE(b.back() == T);
      for (std::size_t i = 1; i < b.size(); ++i) REQUIRE(b[i] > b[i - 1]);
    }
}

TEST_CASE("sample_segment ranges, determinism and uniformity") {
  const Milestones one = milestones(10, 1);
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    const McdSample d = sample_segment(one, rng);
    CHECK(d.s == 0);
    CHECK(d.t_m >= 1);
    CHECK(d.t_m <= 10);
    CHECK(d.t_n >= 0);
    CHECK(d.t_n <= d.t_m);
  }

  const Milestones ms = milestones(50, 4);
  std::vector<double> counts(4, 0.0);
  const int draws = 10000;
  Rng r(4);
  for (int i = 0; i < draws; ++i) {
    const McdSample d = sample_segment(ms, r);
    counts[d.s] += 1.0;
    REQUIRE(d.t_m > ms.boundaries[d.s]);
    REQUIRE(d.t_m <= ms.boundaries[d.s + 1]);
    REQUIRE(d.t_n >= ms.boundaries[d.s]);
    REQUIRE(d.t_n <= d.t_m);
  }
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - draws / 4.0) * (c - draws / 4.0) / (draws / 4.0);
  // 99th percentile of chi-square with 3 degrees of freedom.
  CHECK(chi2 < 11.345);

  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) {
    const McdSample x = sample_segment(ms, a), y = sample_segment(ms, b);
    CHECK(x.s == y.s);
    CHECK(x.t_m == y.t_m);
    CHECK(x.t_n == y.t_n);
  }
}

TEST_CASE("mlcd branches vanish for an exact solver") {
  const auto s = DiffusionSchedule::scaled_linear(50);
  Rng rng(5);
  const Tensor x0 = rng.normal_tensor({6, 3});
  const EpsPredictor exact = exact_for_point(x0, s);
  const Milestones ms = milestones(50, 4);
  for (int i = 0; i < 50; ++i) {
    const McdSample d = sample_segment(ms, rng);
    const Tensor z = forward_diffuse(x0, rng.normal_tensor({6, 3}), d.t_m, s);
    const McdBranches br = mlcd_branches(exact, exact, s, z, d, ms.boundaries[d.s]);
    CHECK(max_abs_diff(br.a, br.b) < 1e-9);
  }

  // Degenerate teacher step with identical branches.
  const EpsPredictor any = [](const Tensor& z, int) { return scale(z, 0.3); };
  const Tensor z = rng.normal_tensor({4, 2});
  const McdBranches br = mlcd_branches(any, any, s, z, McdSample{1, 20, 20}, 13);
  CHECK(br.a == br.b);
  CHECK_THROWS_AS(mlcd_branches(any, any, s, z, McdSample{0, 0, 0}, 0), std::domain_error);
}

TEST_CASE("mlcd scalar hand trace") {
  // Two-step schedule with alpha_bar = 0.64 at t=1 and 0.25 at t=2.
  const auto s = DiffusionSchedule::linear(2, 0.36, 0.609375);
  const EpsPredictor student = [](const Tensor&, int) { return Tensor({1, 1}, 0.5); };
  const EpsPredictor teacher = [](const Tensor&, int) { return Tensor({1, 1}, 0.2); };
  const McdBranches br = mlcd_branches(student, teacher, s, Tensor({1, 1}, 1.0), McdSample{0, 2, 1}, 0);
  // A: x̂ = (1 - sqrt(.75)·.5)/.5 = 1.1339746; jumping to t=0 returns x̂.
  CHECK(br.a[0] == doctest::Approx(1.1339746).epsilon(1e-7));
  // Teacher: x̂ = 1.6535898, z_1 = .8·1.6535898 + .6·.2 = 1.4428719.
  // B: x̂ = (1.4428719 - .6·.5)/.8 = 1.4285898.
  CHECK(br.b[0] == doctest::Approx(1.4285898).epsilon(1e-7));
  const double loss = (br.a[0] - br.b[0]) * (br.a[0] - br.b[0]);
  CHECK(loss == doctest::Approx(0.0867981).epsilon(1e-5));
}

TEST_CASE("mlcd gradient matches finite differences and ignores the target branch") {
  Rng rng(6);
  const ToyDiT teacher = make_toy_dit(tiny_config(), rng);
  ToyDiT student = teacher;
  perturb(student.params, rng, 0.05);
  auto masks = student.masks;
  masks[0] = make_global_mask(4, 1, 4);
  student.set_masks(masks);
  const ToyDiT frozen = student;

  const auto s = DiffusionSchedule::scaled_linear(50);
  const Milestones ms = milestones(50, 4);
  SyntheticDataset data(4, 2, 2, 2, 1, 8);
  const auto batch = data.batch(0, 2);

  DitParams g_self = zeros_like(student.params), g_frozen = zeros_like(student.params);
  Rng r1(42), r2(42);
  const double l1 = mlcd_objective(student, student, teacher, s, batch, ms, r1, &g_self);
  const double l2 = mlcd_objective(student, frozen, teacher, s, batch, ms, r2, &g_frozen);
  CHECK(l1 == l2);
  // Contribution of branch B to the gradient is exactly zero.
  CHECK(same_params(g_self, g_frozen));

  auto f = [&] {
    Rng r(42);
    return mlcd_objective(student, frozen, teacher, s, batch, ms, r, nullptr);
  };
  auto ps = named_tensors(student.params);
  auto gs = named_tensors(g_self);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Tensor num = testing::numeric_gradient(*ps[i].second, f);
    INFO(ps[i].first);
    CHECK(testing::relative_error(*gs[i].second, num) <= 1e-4);
  }
}

TEST_CASE("mlcd_train with zero steps returns the teacher") {
  Rng rng(7);
  const ToyDiT teacher = make_toy_dit(tiny_config(), rng);
  SyntheticDataset data(4, 2, 2, 2, 1, 9);
  MlcdOptions opt;
  opt.steps = 0;
  const ToyDiT st = mlcd_train(teacher, DiffusionSchedule::scaled_linear(50), data, opt);
  CHECK(same_params(st.params, teacher.params));
  opt.segment_schedule = {2, 4};
  CHECK_THROWS_AS(mlcd_train(teacher, DiffusionSchedule::scaled_linear(50), data, opt),
                  std::invalid_argument);
}

TEST_CASE("mlcd_train logs segments per phase") {
  Rng rng(8);
  const ToyDiT teacher = make_toy_dit(tiny_config(), rng);
  SyntheticDataset data(4, 2, 2, 2, 1, 9);
  MlcdOptions opt;
  opt.steps = 5;
  opt.batch_size = 1;
  opt.segment_schedule = {4, 2};
  TrainingLog log;
  mlcd_train(teacher, DiffusionSchedule::scaled_linear(50), data, opt, &log);
  REQUIRE(log.rows.size() == 5);
  CHECK(log.rows[0].segments == 4);
  CHECK(log.rows[1].segments == 4);
  CHECK(log.rows[2].segments == 2);
  CHECK(log.rows[4].segments == 2);
}

TEST_CASE("smoke: mlcd loss halves within the budget") {
  Rng rng(9);
  DitConfig c = tiny_config();
  c.dim = 16;
  ToyDiT teacher = make_toy_dit(c, rng);
  const auto s = DiffusionSchedule::scaled_linear(50);
  SyntheticDataset data(4, 2, 2, 2, 1, 10);
  TrainOptions topt;
  topt.steps = 150;
  topt.learning_rate = 3e-3;
  train_toy(teacher, s, data, topt);

  const Milestones ms = milestones(50, 4);
  const auto eval = data.batch(100000, 32);
  auto eval_loss = [&](const ToyDiT& st) {
    Rng r(11);
    return mlcd_loss(st, teacher, s, eval, ms, r);
  };
  const double before = eval_loss(teacher);
  MlcdOptions opt;
  opt.steps = 200;
  opt.learning_rate = 3e-4;
  const ToyDiT student = mlcd_train(teacher, s, data, opt);
  const double after = eval_loss(student);
  MESSAGE("mlcd loss before " << before << " after " << after);
  CHECK(after <= 0.5 * before);
}

TEST_CASE("kd parts: hand computation and aggregation") {
  LayerTaps st, te;
  st.attention = {Tensor({1, 1}, 2.0)};
  te.attention = {Tensor({1, 1}, 1.0)};
  st.mlp = {Tensor({1, 1}, 3.0)};
  te.mlp = {Tensor({1, 1}, 1.0)};
  const KdLossParts p = kd_parts(st, te, Tensor({1, 1}, 0.5), Tensor({1, 1}, 0.0), 0.0);
  CHECK(p.attention[0] == 1.0);
  CHECK(p.mlp[0] == 4.0);
  CHECK(p.diffusion == 0.25);
  CHECK(p.total == 5.0);
  const KdLossParts q = kd_parts(st, te, Tensor({1, 1}, 0.5), Tensor({1, 1}, 0.0), 100.0);
  CHECK(q.total == 30.0);

  // Equal taps and exact ε: zero loss for any λ.
  const KdLossParts z = kd_parts(te, te, Tensor({1, 1}, 0.5), Tensor({1, 1}, 0.5), 7.0);
  CHECK(z.total == 0.0);
}

TEST_CASE("kd loss contracts on the model") {
  Rng rng(12);
  const ToyDiT teacher = make_toy_dit(tiny_config(), rng);
  const auto s = DiffusionSchedule::scaled_linear(50);
  SyntheticDataset data(4, 2, 2, 2, 1, 13);
  const auto batch = data.batch(0, 3);

  Rng a(1), b(1);
  const KdLossParts same = kd_loss(teacher, teacher, s, batch, 100.0, a);
  for (double v : same.attention) CHECK(v == 0.0);
  for (double v : same.mlp) CHECK(v == 0.0);
  CHECK(same.total == 100.0 * same.diffusion);
  CHECK(same.diffusion == diffusion_loss(teacher, s, batch, b));

  ToyDiT sparse = teacher;
  sparse.set_masks({make_global_mask(4, 1, 4), make_global_mask(4, 2, 4)});
  for (double lambda : {0.0, 1.0, 100.0}) {
    Rng r(2);
    const KdLossParts p = kd_loss(sparse, teacher, s, batch, lambda, r);
    // Independent recomputation of the aggregation identity.
    double layers = 0.0;
    for (std::size_t i = 0; i < p.attention.size(); ++i) {
      CHECK(p.attention[i] >= 0.0);
      CHECK(p.mlp[i] >= 0.0);
      layers += p.attention[i] + p.mlp[i];
    }
    CHECK(p.total == layers / 2.0 + lambda * p.diffusion);
    if (lambda == 0.0) CHECK(p.total == layers / 2.0);
    CHECK(p.total > 0.0);
  }
  ToyDiT other = teacher;
  other.config.dim = 16;
  Rng r(3);
  CHECK_THROWS_AS(kd_loss(other, teacher, s, batch, 1.0, r), GeometryError);
}

TEST_CASE("kd gradient matches finite differences") {
  Rng rng(14);
  const ToyDiT teacher = make_toy_dit(tiny_config(), rng);
  ToyDiT student = teacher;
  student.set_masks({make_global_mask(4, 1, 4), make_global_mask(4, 1, 4)});
  perturb(student.params, rng, 0.02);
  const auto s = DiffusionSchedule::scaled_linear(50);
  SyntheticDataset data(4, 2, 2, 2, 1, 15);
  const auto batch = data.batch(0, 2);
  // λ = 1 keeps the layer terms visible next to the diffusion term.
  DitParams g = zeros_like(student.params);
  Rng r0(5);
  kd_objective(student, teacher, s, batch, 1.0, r0, &g);
  auto f = [&] {
    Rng r(5);
    return kd_loss(student, teacher, s, batch, 1.0, r).total;
  };
  auto ps = named_tensors(student.params);
  auto gs = named_tensors(g);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Tensor num = testing::numeric_gradient(*ps[i].second, f);
    INFO(ps[i].first);
    CHECK(testing::relative_error(*gs[i].second, num) <= 1e-4);
  }
}

TEST_CASE("kd_train: full assignment reduces to the diffusion term; sparse student approaches the teacher") {
  Rng rng(16);
  DitConfig c = tiny_config();
  c.dim = 16;
  ToyDiT teacher = make_toy_dit(c, rng);
  const auto s = DiffusionSchedule::scaled_linear(50);
  SyntheticDataset data(4, 2, 2, 2, 1, 17);
  TrainOptions topt;
  topt.steps = 100;
  topt.learning_rate = 3e-3;
  train_toy(teacher, s, data, topt);

  const std::vector<TileMask> full(2, make_full_mask(4, 4));
  Rng a(1), b(1);
  ToyDiT full_copy = teacher;
  full_copy.set_masks(full);
  const KdLossParts p0 = kd_loss(full_copy, teacher, s, data.batch(0, 4), 100.0, a);
  CHECK(p0.total == 100.0 * diffusion_loss(teacher, s, data.batch(0, 4), b));

  const std::vector<TileMask> sparse(2, make_global_mask(4, 1, 4));
  ToyDiT untrained = teacher;
  untrained.set_masks(sparse);
  KdOptions opt;
  opt.steps = 100;
  // At this scale λ = 100 lets the ε-loss swamp the layer terms.
  opt.lambda = 0.1;
  const ToyDiT student = kd_train(teacher, sparse, s, data, opt);
  const auto held_out = data.batch(50000, 16);
  Rng e1(3), e2(3);
  const double before = final_hidden_mse(untrained, teacher, s, held_out, e1);
  const double after = final_hidden_mse(student, teacher, s, held_out, e2);
  MESSAGE("final hidden mse before " << before << " after " << after);
  CHECK(after < before);
}
