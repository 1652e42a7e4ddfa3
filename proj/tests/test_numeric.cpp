#include <cmath>
#include <cstring>

#include "doctest.h"
#include "test_support.hpp"
#include "tiledit/rng.hpp"
#include "tiledit/tensor.hpp"

using namespace tiledit;

namespace {

// Scalar triple-loop oracle, j-innermost order independent of the library.
Tensor triple_loop(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  return c;
}

}  // namespace

TEST_CASE("matmul identity and hand example") {
  Rng rng(1);
  const Tensor x = rng.normal_tensor({2, 3});
  const Tensor eye = Tensor::from_rows({{1, 0}, {0, 1}});
  CHECK(matmul(eye, x) == x);
  const Tensor c = matmul(Tensor::from_rows({{1, 2}}), Tensor::from_rows({{3}, {4}}));
  CHECK(c.shape() == std::vector<std::size_t>{1, 1});
  CHECK(c[0] == 11.0);
}

TEST_CASE("matmul matches triple loop") {
  Rng rng(7);
  const Tensor a = rng.normal_tensor({5, 7});
  const Tensor b = rng.normal_tensor({7, 3});
  CHECK(max_abs_diff(matmul(a, b), triple_loop(a, b)) < 1e-12);

  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = static_cast<std::size_t>(rng.uniform_int(1, 9));
    const auto k = static_cast<std::size_t>(rng.uniform_int(1, 9));
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 9));
    const Tensor x = rng.normal_tensor({m, k});
    const Tensor y = rng.normal_tensor({k, n});
    worst = std::max(worst, max_abs_diff(matmul(x, y), triple_loop(x, y)));
    CHECK(max_abs_diff(matmul_tn(transpose(x), y), triple_loop(x, y)) < 1e-10);
    CHECK(max_abs_diff(matmul_nt(x, transpose(y)), triple_loop(x, y)) < 1e-10);
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("matmul rejects mismatched shapes with both shapes in the message") {
  const Tensor a({2, 3}), b({2, 3});
  try {
    (void)matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax rows") {
  const Tensor u = softmax_rows(Tensor::from_rows({{0, 0, 0}}));
  for (int j = 0; j < 3; ++j) CHECK(u[j] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Tensor one = softmax_rows(Tensor::from_rows({{1, 1}}), std::vector<bool>{true, false});
  CHECK(one[0] == 1.0);
  CHECK(one[1] == 0.0);

  // Extended-precision oracle for [1, 2, 3].
  const Tensor s = softmax_rows(Tensor::from_rows({{1, 2, 3}}));
  long double denom = 0.0L;
  for (int j = 1; j <= 3; ++j) denom += std::exp(static_cast<long double>(j));
  for (int j = 0; j < 3; ++j) {
    const long double ref = std::exp(static_cast<long double>(j + 1)) / denom;
    CHECK(std::abs(static_cast<long double>(s[j]) - ref) < 1e-15L);
  }

  CHECK_THROWS_AS(softmax_rows(Tensor::from_rows({{1, 2}}), std::vector<bool>{false, false}),
                  std::domain_error);
}

TEST_CASE("softmax invariants: row sums and shift invariance") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = rng.normal_tensor({4, 9}, 3.0);
    std::vector<bool> allowed(36);
    for (std::size_t i = 0; i < 36; ++i) allowed[i] = (i % 9 == i / 9) || rng.uniform() < 0.5;
    const Tensor y = softmax_rows(x, allowed);
    Tensor shifted = x;
    for (std::size_t i = 0; i < 4; ++i) {
      const double c = rng.normal() * 10.0;
      for (auto& v : shifted.row(i)) v += c;
    }
    CHECK(max_abs_diff(y, softmax_rows(shifted, allowed)) < 1e-12);
    for (std::size_t i = 0; i < 4; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 9; ++j) {
        if (!allowed[i * 9 + j]) CHECK(y(i, j) == 0.0);
        sum += y(i, j);
      }
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("layer norm") {
  const Tensor ones({3}, 1.0), zeros({3});
  const Tensor c = layer_norm(Tensor::from_rows({{2, 2, 2}}), ones, zeros);
  for (double v : c.values()) CHECK(v == 0.0);

  const Tensor g2({2}, 1.0), b2({2});
  const Tensor n = layer_norm(Tensor::from_rows({{1, -1}}), g2, b2, 0.0);
  CHECK(n[0] == 1.0);
  CHECK(n[1] == -1.0);

  // Two-pass scalar oracle.
  Rng rng(11);
  const Tensor x = rng.normal_tensor({1, 13});
  const Tensor gain = rng.normal_tensor({13}), bias = rng.normal_tensor({13});
  const Tensor y = layer_norm(x, gain, bias, 1e-5);
  long double mean = 0.0L;
  for (double v : x.values()) mean += v;
  mean /= 13.0L;
  long double var = 0.0L;
  for (double v : x.values()) var += (v - mean) * (v - mean);
  var /= 13.0L;
  for (std::size_t j = 0; j < 13; ++j) {
    const long double ref = gain[j] * ((x[j] - mean) / std::sqrt(var + 1e-5L)) + bias[j];
    CHECK(std::abs(static_cast<long double>(y[j]) - ref) < 1e-12L);
  }
}

TEST_CASE("layer norm backward matches finite differences") {
  Rng rng(5);
  Tensor x = rng.normal_tensor({3, 6});
  Tensor gain = rng.normal_tensor({6});
  const Tensor bias = rng.normal_tensor({6});
  const Tensor up = rng.normal_tensor({3, 6});
  const auto g = layer_norm_backward(x, gain, up);
  auto f = [&] { return testing::dot(layer_norm(x, gain, bias), up); };
  CHECK(testing::relative_error(g.dx, testing::numeric_gradient(x, f)) < 1e-7);
  CHECK(testing::relative_error(g.dgain, testing::numeric_gradient(gain, f)) < 1e-7);
}

TEST_CASE("gelu derivative") {
  for (double u : {-3.0, -0.5, 0.0, 0.7, 2.5}) {
    const double h = 1e-6;
    CHECK(gelu_grad(u) == doctest::Approx((gelu(u + h) - gelu(u - h)) / (2 * h)).epsilon(1e-8));
  }
}

TEST_CASE("operations are pure: repeated calls are byte-identical") {
  Rng rng(9);
  const Tensor a = rng.normal_tensor({6, 5}), b = rng.normal_tensor({5, 4});
  const Tensor c1 = matmul(a, b), c2 = matmul(a, b);
  CHECK(std::memcmp(c1.storage().data(), c2.storage().data(), c1.size() * sizeof(double)) == 0);
  const Tensor s1 = softmax_rows(a), s2 = softmax_rows(a);
  CHECK(s1 == s2);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor({0, 2}), DimensionError);
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.all_finite());
}

TEST_CASE("pcg32 reproduces the reference stream") {
  // Published pcg32 demo output for pcg32_srandom(42, 54).
  Rng rng(42, 54);
  const std::uint32_t expected[] = {0xa15c02b7, 0x7b47f409, 0xba1d3330,
                                    0x83d2f293, 0xbfa4784b, 0xcbed606e};
  for (auto e : expected) CHECK(rng.next_u32() == e);
}

TEST_CASE("rng determinism and ranges") {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng r(5);
  for (int i = 0; i < 1000; ++i) {
    const auto v = r.uniform_int(3, 7);
    CHECK(v >= 3);
    CHECK(v <= 7);
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  // Rough normal moments.
  double s = 0.0, s2 = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s += z;
    s2 += z * z;
  }
  CHECK(std::abs(s / n) < 0.05);
  CHECK(std::abs(s2 / n - 1.0) < 0.05);
  CHECK(Rng(1).fork(3).next_u64() == Rng(1).fork(3).next_u64());
  CHECK(Rng(1).fork(3).next_u64() != Rng(1).fork(4).next_u64());
}
