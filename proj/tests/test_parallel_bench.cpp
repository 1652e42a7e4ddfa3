#include <thread>

#include "doctest.h"
#include "test_support.hpp"
#include "tiledit/bench.hpp"
#include "tiledit/parallel.hpp"

using namespace tiledit;

TEST_CASE("plan_layout") {
  const auto a = plan_layout(4, 2);
  CHECK(a.ranges == std::vector<TokenRange>{{0, 2}, {2, 4}});
  const auto b = plan_layout(3, 2);
  CHECK(b.ranges == std::vector<TokenRange>{{0, 2}, {2, 3}});
  CHECK(plan_layout(7, 1).ranges == std::vector<TokenRange>{{0, 7}});
  CHECK_THROWS_AS(plan_layout(2, 3), std::invalid_argument);
  CHECK_THROWS_AS(plan_layout(2, 0), std::invalid_argument);
  for (std::size_t H = 1; H <= 12; ++H)
    for (std::size_t W = 1; W <= H; ++W) {
      const auto l = plan_layout(H, W);
      REQUIRE(l.ranges.front().begin == 0);
      REQUIRE(l.ranges.back().end == H);
      std::size_t lo = H, hi = 0;
      for (std::size_t w = 0; w < W; ++w) {
        if (w > 0) REQUIRE(l.ranges[w].begin == l.ranges[w - 1].end);
        lo = std::min(lo, l.ranges[w].size());
        hi = std::max(hi, l.ranges[w].size());
      }
      REQUIRE(lo >= 1);
      REQUIRE(hi - lo <= 1);
    }
}

TEST_CASE("parallel_mha is bitwise equal to the serial path") {
  Rng rng(1);
  const std::size_t F = 8, S = 3, n = F * S;
  for (std::size_t H : {4u, 8u}) {
    const MhaParams p = make_mha_params(H * 2, H, rng, 0.4);
    for (const TileMask& mask : {make_full_mask(F, S), make_global_mask(F, 2, S), make_global_mask(F, 1, S)}) {
      const Tensor x = rng.normal_tensor({n, p.dim()});
      const Tensor serial = sparse_mha(x, p, mask);
      for (std::size_t W : {1u, 2u, 4u}) {
        ParallelStats st;
        const Tensor par = parallel_mha(x, p, mask.layout(), plan_layout(H, W), &st);
        CHECK(par == serial);
        REQUIRE(st.per_worker.size() == W);
        for (const auto& ws : st.per_worker) CHECK(ws.visited_blocks == mask.kept_count());
        const std::size_t per_tensor = n * p.dim() * sizeof(double);
        CHECK(st.scatter_bytes == 3 * per_tensor);
        CHECK(st.gather_bytes == per_tensor);
        CHECK(st.scatter_bytes / 3 + st.gather_bytes == 2 * n * p.dim() * sizeof(double));
      }
    }
  }
  CHECK(active_worker_pools() == 0);
}

TEST_CASE("parallel_mha rejects mismatched layouts") {
  Rng rng(2);
  const MhaParams p = make_mha_params(8, 4, rng, 0.3);
  const Tensor x = rng.normal_tensor({8, 8});
  const auto mask = make_full_mask(4, 2).layout();
  CHECK_THROWS_AS(parallel_mha(x, p, mask, plan_layout(8, 2)), std::invalid_argument);
  CHECK_THROWS_AS(parallel_mha(rng.normal_tensor({6, 8}), p, mask, plan_layout(4, 2)), GeometryError);
}

TEST_CASE("trimmed median rank rule") {
  std::vector<double> ten(10);
  for (int i = 0; i < 10; ++i) ten[static_cast<std::size_t>(i)] = 10 - i;  // unsorted input
  CHECK(trimmed_median(ten) == 5.0);
  std::vector<double> hundred(100);
  for (int i = 0; i < 100; ++i) hundred[static_cast<std::size_t>(i)] = i + 1;
  CHECK(trimmed_median(hundred) == 50.0);
  CHECK(trimmed_median(std::vector<double>(7, 3.25)) == 3.25);
  // n = 5 keeps ranks 1..4: median of {1,2,3,4} is 2.5.
  CHECK(trimmed_median({5, 4, 3, 2, 1}) == 2.5);
  CHECK_THROWS_AS(trimmed_median({1, 2, 3}), std::invalid_argument);
}

TEST_CASE("time_op protocol") {
  int calls = 0;
  const TimingStat st = time_op([&] { ++calls; }, 3, 10);
  CHECK(calls == 13);
  CHECK(st.samples_ns.size() == 10);
  CHECK(st.reported_ns == trimmed_median(st.samples_ns));
  CHECK_THROWS_AS(time_op([] {}, 0, 4), std::invalid_argument);
}

TEST_CASE("time_op refuses to run next to a worker pool") {
  // A long parallel_mha run keeps a pool alive while the bench is attempted.
  Rng rng(3);
  const MhaParams p = make_mha_params(16, 4, rng, 0.3);
  const TileMask mask = make_full_mask(8, 64);
  const Tensor x = rng.normal_tensor({mask.tokens(), 16});
  std::thread worker([&] {
    for (int i = 0; i < 3; ++i) parallel_mha(x, p, mask.layout(), plan_layout(4, 2));
  });
  bool refused = false;
  for (int i = 0; i < 2000 && !refused; ++i) {
    if (active_worker_pools() > 0) {
      try {
        time_op([] {}, 0, 5);
      } catch (const BenchUnavailable&) {
        refused = true;
      }
    }
    std::this_thread::yield();
  }
  worker.join();
  CHECK(refused);
}

TEST_CASE("speedup report shape") {
  KernelBenchConfig cfg;
  cfg.warmup = 1;
  cfg.runs = 5;
  cfg.head_dim = 4;
  const MaskMenu menu = MaskMenu::global(4, 8, {2, 1});
  const auto rows = speedup_report(menu, cfg);
  REQUIRE(rows.size() == menu.size());
  CHECK(rows[0].speedup == 1.0);
  CHECK(rows[0].mask_id == "full");
  const std::string csv = speedup_csv(rows);
  CHECK(csv.rfind("mask_id,frames,tokens_per_frame,sparsity,time_ms,speedup\n", 0) == 0);
  CHECK(csv.find("\nfull,4,8,0.0000,") != std::string::npos);
  CHECK(csv.find(",1.00\n") != std::string::npos);
}
