#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "splitnn/rng.hpp"
#include "splitnn/tensor.hpp"

using namespace splitnn;

TEST_CASE("elementwise forward") {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = Tensor::from({2}, {3, 4});
  Tensor c = add(a, b);
  CHECK(c.values() == std::vector<double>{4, 6});

  Tensor d = mul(a, 1.0);
  CHECK(d.values() == a.values());

  Tensor e = divt(b, a);
  CHECK(e.values() == std::vector<double>{3, 2});

  Tensor f = sub(b, a);
  CHECK(f.values() == std::vector<double>{2, 2});
}

TEST_CASE("shape mismatch raises with both shapes in the message") {
  Tensor a = Tensor::zeros({2});
  Tensor b = Tensor::zeros({3});
  try {
    add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& err) {
    std::string msg = err.what();
    CHECK(msg.find("(2)") != std::string::npos);
    CHECK(msg.find("(3)") != std::string::npos);
  }
}

TEST_CASE("item() requires a scalar") {
  CHECK_THROWS_AS(Tensor::zeros({2}).item(), ShapeError);
  CHECK(Tensor::scalar(7.0).item() == 7.0);
}

TEST_CASE("d/dx sum(x*x) = 2x") {
  Tensor x = Tensor::from({1}, {3}, true);
  Tensor y = sum(mul(x, x));
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("reductions") {
  Tensor a = Tensor::from({4}, {1, 2, 3, 4});
  CHECK(mean(a).item() == doctest::Approx(2.5));
  CHECK(sum(a).item() == doctest::Approx(10.0));

  Tensor ones23 = Tensor::ones({2, 3});
  Tensor rows = sum(ones23, {1});
  CHECK(rows.shape() == Shape{2});
  CHECK(rows.values() == std::vector<double>{3, 3});

  Tensor cols = sum(ones23, {0});
  CHECK(cols.shape() == Shape{3});
  CHECK(cols.values() == std::vector<double>{2, 2, 2});

  Tensor b = Tensor::from({2}, {3, 4});
  CHECK(mean(square(b)).item() == doctest::Approx(12.5));

  CHECK_THROWS_AS(sum(a, {1}), ShapeError);
}

TEST_CASE("max reduction is forward-only") {
  Tensor a = Tensor::from({3}, {1, 5, 3}, true);
  Tensor m = reduce(RedOp::Max, a, {0});
  CHECK(m.item() == 5.0);
  CHECK_FALSE(m.requires_grad());
}

TEST_CASE("mean over one axis of a 3-d tensor") {
  // (2,2,2): mean over axis 1 averages pairs two strides apart.
  Tensor a = Tensor::from({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
  Tensor m = mean(a, {1});
  CHECK(m.shape() == Shape{2, 2});
  CHECK(m.values() == std::vector<double>{2, 3, 6, 7});
  sum(m).backward();
  for (double g : a.grad()) CHECK(g == doctest::Approx(0.5));
}

TEST_CASE("gradients accumulate across shared uses") {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  Tensor y = add(sum(x), sum(x));
  y.backward();
  for (double g : x.grad()) CHECK(g == doctest::Approx(2.0));
}

TEST_CASE("a shared subexpression is backpropagated exactly once") {
  // z = sum(y + y) with y = x^2: dz/dx = 4x. A tape that re-runs the
  // shared node would produce 8x.
  Tensor x = Tensor::from({2}, {1.5, -2.0}, true);
  Tensor y = square(x);
  Tensor z = sum(add(y, y));
  z.backward();
  CHECK(x.grad()[0] == doctest::Approx(6.0));
  CHECK(x.grad()[1] == doctest::Approx(-8.0));
}

TEST_CASE("backward calls accumulate until zero_grad") {
  Tensor x = Tensor::from({1}, {2}, true);
  sum(mul(x, x)).backward();
  CHECK(x.grad()[0] == doctest::Approx(4.0));
  sum(mul(x, x)).backward();
  CHECK(x.grad()[0] == doctest::Approx(8.0));
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("NoGradGuard suppresses tape construction") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  NoGradGuard ng;
  Tensor y = sum(mul(x, x));
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("detach stops gradient flow") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor d = x.detach();
  CHECK_FALSE(d.requires_grad());
  Tensor y = sum(mul(d, d));
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("abs subgradient at zero is zero") {
  Tensor x = Tensor::from({3}, {-2, 0, 3}, true);
  sum(abs_t(x)).backward();
  CHECK(x.grad() == std::vector<double>{-1, 0, 1});
}

TEST_CASE("clamp_min passes gradient only above the floor") {
  Tensor x = Tensor::from({3}, {-1, 0.5, 2}, true);
  Tensor y = clamp_min(x, 0.0);
  CHECK(y.values() == std::vector<double>{0, 0.5, 2});
  sum(y).backward();
  CHECK(x.grad() == std::vector<double>{0, 1, 1});
}

TEST_CASE("reshape keeps values and routes gradient back") {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor y = reshape(x, {3, 2});
  CHECK(y.shape() == Shape{3, 2});
  CHECK(y.values() == x.values());
  sum(mul(y, y)).backward();
  CHECK(x.grad()[4] == doctest::Approx(10.0));
  CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeError);

  Tensor f = flatten2(Tensor::ones({2, 3, 4}));
  CHECK(f.shape() == Shape{2, 12});
}

TEST_CASE("grad_check on a linear function is exact to rounding") {
  auto f = [](Tensor& x) { return sum(mul(x, 3.0)); };
  Tensor x = Tensor::from({4}, {0.1, -0.7, 2.0, 1.3});
  CHECK(grad_check(f, x, 1e-5) < 1e-10);
}

TEST_CASE("grad_check on sum of squares") {
  auto f = [](Tensor& x) { return sum(square(x)); };
  Tensor x = Tensor::from({5}, {0.5, -1.2, 2.0, 0.01, -3.0});
  CHECK(grad_check(f, x, 1e-5) < 1e-6);
}

TEST_CASE("grad_check covers div and sqrt") {
  auto f = [](Tensor& x) {
    Tensor num = add(square(x), 1.0);
    Tensor den = add(abs_t(x), 2.0);
    return sum(add(divt(num, den), sqrt_t(add(square(x), 0.5))));
  };
  Tensor x = Tensor::from({4}, {0.8, -1.5, 2.2, 0.3});
  CHECK(grad_check(f, x, 1e-5) < 1e-6);
}

TEST_CASE("grad_check rejects non-finite function values") {
  auto f = [](Tensor& x) { return sum(sqrt_t(x)); };
  Tensor x = Tensor::from({1}, {-1.0});
  CHECK_THROWS_AS(grad_check(f, x, 1e-5), NumericError);
}

TEST_CASE("grad_check_sampled agrees with the full sweep") {
  auto f = [](Tensor& x) { return sum(square(x)); };
  Tensor x = Tensor::from({50}, std::vector<double>(50, 0.25));
  Rng rng(7);
  CHECK(grad_check_sampled(f, x, 1e-5, 10, rng) < 1e-6);
}

TEST_CASE("init is deterministic for a fixed seed") {
  Rng r1(42), r2(42);
  Tensor a = init({3, 16}, InitScheme::kaiming(), r1);
  Tensor b = init({3, 16}, InitScheme::kaiming(), r2);
  CHECK(a.values() == b.values());

  Rng r3(43);
  Tensor c = init({3, 16}, InitScheme::kaiming(), r3);
  CHECK(a.values() != c.values());
}

TEST_CASE("kaiming stddev matches sqrt(2/fan_in)") {
  // fan_in 200 -> stddev 0.1; 1e5 draws keep the sample estimate within 2%.
  Rng rng(1);
  Tensor w = init({500, 200}, InitScheme::kaiming(), rng);
  const auto& v = w.values();
  double m = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  double var = 0;
  for (double x : v) var += (x - m) * (x - m);
  var /= double(v.size());
  CHECK(std::sqrt(var) == doctest::Approx(0.1).epsilon(0.02));
}

TEST_CASE("kaiming fan_in for conv shapes uses in_ch*kh*kw") {
  Rng rng(5);
  Tensor w = init({64, 32, 3, 3}, InitScheme::kaiming(), rng);
  const auto& v = w.values();
  double var = 0;
  for (double x : v) var += x * x;
  var /= double(v.size());
  CHECK(std::sqrt(var) == doctest::Approx(std::sqrt(2.0 / 288.0)).epsilon(0.05));
}

TEST_CASE("constant and normal init") {
  Rng rng(9);
  Tensor c = init({4}, InitScheme::constant(0.25), rng);
  CHECK(c.values() == std::vector<double>(4, 0.25));
  Tensor n = init({10000}, InitScheme::normal(1.0, 0.5), rng);
  double m = std::accumulate(n.values().begin(), n.values().end(), 0.0) / 1e4;
  CHECK(m == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("rng uniform stays in [0,1) and permutation is a bijection") {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  auto p = rng.permutation(100);
  std::vector<bool> seen(100, false);
  for (int v : p) {
    REQUIRE(v >= 0);
    REQUIRE(v < 100);
    CHECK_FALSE(seen[size_t(v)]);
    seen[size_t(v)] = true;
  }
}

TEST_CASE("rng serialize/restore resumes the exact stream") {
  Rng rng(11);
  rng.normal();  // leave a cached spare in flight
  std::string state = rng.serialize();
  std::vector<double> ahead;
  for (int i = 0; i < 8; ++i) ahead.push_back(rng.normal());
  Rng other(999);
  other.restore(state);
  for (int i = 0; i < 8; ++i) CHECK(other.normal() == ahead[size_t(i)]);
  CHECK_THROWS_AS(other.restore("not a state"), StateError);
}

TEST_CASE("rng derive yields decorrelated named streams") {
  Rng a = Rng::derive(100, 0);
  Rng b = Rng::derive(100, 1);
  CHECK(a.next_u64() != b.next_u64());
  Rng a2 = Rng::derive(100, 0);
  Rng a3 = Rng::derive(100, 0);
  CHECK(a2.next_u64() == a3.next_u64());
}

TEST_CASE("uniform_int covers the range without bias artifacts") {
  Rng rng(21);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 7000; ++i) ++counts[size_t(rng.uniform_int(7))];
  for (int c : counts) CHECK(c > 800);
}
