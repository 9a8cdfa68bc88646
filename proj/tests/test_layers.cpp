#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "splitnn/layers.hpp"
#include "splitnn/rng.hpp"
#include "splitnn/tensor.hpp"

using namespace splitnn;

namespace {

Tensor rand_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(s);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("conv2d 1x1 identity kernel") {
  Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor w = Tensor::from({1, 1, 1, 1}, {1});
  Tensor b = Tensor::zeros({1});
  Tensor y = conv2d(x, w, b, 1, 0);
  CHECK(y.values() == x.values());
}

TEST_CASE("conv2d 3x3 ones kernel on 3x3 ones input") {
  Tensor x = Tensor::ones({1, 1, 3, 3});
  Tensor w = Tensor::ones({1, 1, 3, 3});
  Tensor b = Tensor::zeros({1});
  Tensor y = conv2d(x, w, b, 1, 1);
  // Valid taps: corners see 4 cells, edges 6, center all 9.
  CHECK(y.values() == std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4});
}

TEST_CASE("conv2d stride 2 halves even spatial dims") {
  Rng rng(1);
  Tensor w = init({4, 3, 3, 3}, InitScheme::kaiming(), rng);
  Tensor b = Tensor::zeros({4});
  for (int hw : {4, 8, 16}) {
    Tensor x = rand_tensor({2, 3, hw, hw}, rng);
    Tensor y = conv2d(x, w, b, 2, 1);
    CHECK(y.shape() == Shape{2, 4, hw / 2, hw / 2});
  }
}

TEST_CASE("conv2d rejects channel mismatch") {
  Tensor x = Tensor::zeros({1, 3, 4, 4});
  Tensor w = Tensor::zeros({2, 4, 3, 3});
  Tensor b = Tensor::zeros({2});
  CHECK_THROWS_AS(conv2d(x, w, b, 1, 1), ShapeError);
}

TEST_CASE("conv2d gradients (input, weight, bias; stride 1 and 2)") {
  Rng rng(7);
  for (int stride : {1, 2}) {
    Tensor x = rand_tensor({2, 2, 4, 4}, rng);
    Tensor w = rand_tensor({3, 2, 3, 3}, rng);
    Tensor b = rand_tensor({3}, rng);
    auto fx = [&](Tensor& t) { return sum(square(conv2d(t, w, b, stride, 1))); };
    auto fw = [&](Tensor& t) { return sum(square(conv2d(x, t, b, stride, 1))); };
    auto fb = [&](Tensor& t) { return sum(square(conv2d(x, w, t, stride, 1))); };
    CHECK(grad_check(fx, x, 1e-5) < 1e-6);
    CHECK(grad_check(fw, w, 1e-5) < 1e-6);
    CHECK(grad_check(fb, b, 1e-5) < 1e-6);
  }
}

TEST_CASE("maxpool2x2 basics") {
  Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y = maxpool2x2(x);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 4.0);

  CHECK_THROWS_AS(maxpool2x2(Tensor::zeros({1, 1, 3, 4})), ShapeError);
}

TEST_CASE("maxpool tie-break routes gradient to the first element") {
  Tensor x = Tensor::full({1, 1, 2, 2}, 5.0, true);
  Tensor y = maxpool2x2(x);
  sum(y).backward();
  CHECK(x.grad() == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("five pools take 32x32 to 1x1") {
  Shape s{1, 4, 32, 32};
  MaxPoolLayer pool("p");
  for (int i = 0; i < 5; ++i) s = pool.out_shape(s);
  CHECK(s == Shape{1, 4, 1, 1});
}

TEST_CASE("maxpool gradient on distinct values") {
  Rng rng(3);
  Tensor x = Tensor::zeros({1, 2, 4, 4});
  // Widely separated values keep finite differences away from the argmax flip.
  for (size_t i = 0; i < x.values().size(); ++i) {
    x.values()[i] = double(int(rng.uniform_int(1000))) / 10.0 + double(i) * 0.01;
  }
  auto f = [](Tensor& t) { return sum(square(maxpool2x2(t))); };
  CHECK(grad_check(f, x, 1e-5) < 1e-6);
}

TEST_CASE("batch_norm eval identity with unit running stats") {
  Tensor x = Tensor::from({1, 1, 2, 2}, {0.5, -1, 2, 3});
  Tensor g = Tensor::ones({1});
  Tensor b = Tensor::zeros({1});
  BnRunningStats st;
  st.mean = {0};
  st.var = {1};
  st.initialized = true;
  Tensor y = batch_norm(x, g, b, st, Mode::Eval, false, 0.1, 0.0);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-12));
  }
}

TEST_CASE("batch_norm train normalizes {1,3} to {-1,1}") {
  Tensor x = Tensor::from({2, 1, 1, 1}, {1, 3});
  Tensor g = Tensor::ones({1});
  Tensor b = Tensor::zeros({1});
  BnRunningStats st;
  Tensor y = batch_norm(x, g, b, st, Mode::Train, true, 0.1, 0.0);
  CHECK(y.values()[0] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(y.values()[1] == doctest::Approx(1.0).epsilon(1e-9));
  // First update copies the batch statistics (population variance).
  CHECK(st.mean[0] == doctest::Approx(2.0));
  CHECK(st.var[0] == doctest::Approx(1.0));
}

TEST_CASE("batch_norm gamma=0 collapses to beta") {
  Tensor x = Tensor::from({2, 1, 1, 1}, {5, -7});
  Tensor g = Tensor::zeros({1});
  Tensor b = Tensor::full({1}, 0.25);
  BnRunningStats st;
  Tensor y = batch_norm(x, g, b, st, Mode::Train, false);
  CHECK(y.values() == std::vector<double>{0.25, 0.25});
}

TEST_CASE("batch_norm eval without stats is a state error") {
  Tensor x = Tensor::zeros({1, 1, 2, 2});
  Tensor g = Tensor::ones({1});
  Tensor b = Tensor::zeros({1});
  BnRunningStats st;
  CHECK_THROWS_AS(batch_norm(x, g, b, st, Mode::Eval, false), StateError);
}

TEST_CASE("batch_norm running stats blend with momentum 0.1") {
  Tensor g = Tensor::ones({1});
  Tensor b = Tensor::zeros({1});
  BnRunningStats st;
  Tensor x1 = Tensor::from({2, 1, 1, 1}, {1, 3});
  batch_norm(x1, g, b, st, Mode::Train, true);
  Tensor x2 = Tensor::from({2, 1, 1, 1}, {10, 14});
  batch_norm(x2, g, b, st, Mode::Train, true);
  CHECK(st.mean[0] == doctest::Approx(0.9 * 2.0 + 0.1 * 12.0));
  CHECK(st.var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 4.0));

  // update_stats=false leaves them untouched.
  Tensor x3 = Tensor::from({2, 1, 1, 1}, {100, 200});
  batch_norm(x3, g, b, st, Mode::Train, false);
  CHECK(st.mean[0] == doctest::Approx(0.9 * 2.0 + 0.1 * 12.0));
}

TEST_CASE("batch_norm gradients in train and eval mode") {
  Rng rng(11);
  Tensor x = rand_tensor({3, 2, 2, 2}, rng);
  Tensor g = rand_tensor({2}, rng, 0.5, 1.5);
  Tensor b = rand_tensor({2}, rng);
  BnRunningStats st;
  st.mean = {0.1, -0.2};
  st.var = {0.8, 1.3};
  st.initialized = true;

  auto mk = [&](Mode m) {
    return [&, m](Tensor& t) {
      return sum(square(batch_norm(t, g, b, st, m, false)));
    };
  };
  CHECK(grad_check(mk(Mode::Train), x, 1e-5) < 1e-6);
  CHECK(grad_check(mk(Mode::Eval), x, 1e-5) < 1e-6);

  auto fg = [&](Tensor& t) {
    return sum(square(batch_norm(x, t, b, st, Mode::Train, false)));
  };
  auto fb = [&](Tensor& t) {
    return sum(square(batch_norm(x, g, t, st, Mode::Train, false)));
  };
  CHECK(grad_check(fg, g, 1e-5) < 1e-6);
  CHECK(grad_check(fb, b, 1e-5) < 1e-6);
}

TEST_CASE("gdn hand values") {
  // Effective parameters are beta_raw clamped-squared and gamma_raw squared.
  Tensor x = Tensor::ones({1, 1, 1, 1});
  Tensor beta = Tensor::ones({1});
  Tensor gamma = Tensor::full({1, 1}, std::sqrt(3.0));
  Tensor y = gdn(x, beta, gamma);
  CHECK(std::fabs(y.item() - 0.5) < 1e-12);

  // gamma = 0, effective beta = 1 -> identity.
  Tensor x2 = Tensor::from({1, 2, 1, 2}, {0.3, -1.2, 2.0, 0.7});
  Tensor y2 = gdn(x2, Tensor::ones({2}), Tensor::zeros({2, 2}));
  for (size_t i = 0; i < 4; ++i) {
    CHECK(y2.values()[i] == doctest::Approx(x2.values()[i]).epsilon(1e-12));
  }

  // effective beta = 4 -> x/2.
  Tensor y3 = gdn(x2, Tensor::full({2}, 2.0), Tensor::zeros({2, 2}));
  for (size_t i = 0; i < 4; ++i) {
    CHECK(y3.values()[i] == doctest::Approx(x2.values()[i] / 2).epsilon(1e-12));
  }
}

TEST_CASE("igdn hand values and inverse property") {
  Tensor u = Tensor::full({1, 1, 1, 1}, 0.5);
  Tensor beta = Tensor::ones({1});
  Tensor gamma = Tensor::full({1, 1}, std::sqrt(3.0));
  Tensor w = igdn(u, beta, gamma);
  CHECK(std::fabs(w.item() - 0.5 * std::sqrt(1.75)) < 1e-12);

  // Shared params, gamma = 0: igdn(gdn(x)) == x exactly.
  Tensor x = Tensor::from({1, 2, 1, 2}, {0.4, -2.0, 1.5, 0.1});
  Tensor b2 = Tensor::full({2}, 1.3);
  Tensor g2 = Tensor::zeros({2, 2});
  Tensor rt = igdn(gdn(x, b2, g2), b2, g2);
  for (size_t i = 0; i < 4; ++i) CHECK(rt.values()[i] == x.values()[i]);
}

TEST_CASE("gdn/igdn gradients (input, beta, gamma)") {
  Rng rng(13);
  Tensor x = rand_tensor({2, 3, 2, 2}, rng, 0.2, 1.5);
  Tensor beta = rand_tensor({3}, rng, 0.5, 1.5);
  Tensor gamma = rand_tensor({3, 3}, rng, 0.1, 0.6);
  for (bool inverse : {false, true}) {
    auto apply = [&](const Tensor& a, const Tensor& bb, const Tensor& gg) {
      return inverse ? igdn(a, bb, gg) : gdn(a, bb, gg);
    };
    auto fx = [&](Tensor& t) { return sum(square(apply(t, beta, gamma))); };
    auto fb = [&](Tensor& t) { return sum(square(apply(x, t, gamma))); };
    auto fg = [&](Tensor& t) { return sum(square(apply(x, beta, t))); };
    CHECK(grad_check(fx, x, 1e-5) < 1e-6);
    CHECK(grad_check(fb, beta, 1e-5) < 1e-6);
    CHECK(grad_check(fg, gamma, 1e-5) < 1e-6);
  }
}

TEST_CASE("prelu values and slope gradient") {
  Tensor x = Tensor::from({1, 2, 1, 2}, {5, -4, -2, 3});
  Tensor slope = Tensor::from({2}, {0.25, 1.0}, true);
  Tensor y = prelu(x, slope);
  CHECK(y.values() == std::vector<double>{5, -1, -2, 3});

  sum(y).backward();
  // Channel 0 negative input -4 contributes -4; channel 1's -2 contributes -2.
  CHECK(slope.grad()[0] == doctest::Approx(-4.0));
  CHECK(slope.grad()[1] == doctest::Approx(-2.0));
}

TEST_CASE("prelu gradients away from zero") {
  Rng rng(17);
  Tensor x = Tensor::zeros({2, 3, 2, 2});
  for (auto& v : x.values()) {
    v = rng.uniform(0.1, 1.0) * (rng.bernoulli(0.5) ? 1 : -1);
  }
  Tensor slope = rand_tensor({3}, rng, 0.1, 0.5);
  auto fx = [&](Tensor& t) { return sum(square(prelu(t, slope))); };
  auto fs = [&](Tensor& t) { return sum(square(prelu(x, t))); };
  CHECK(grad_check(fx, x, 1e-5) < 1e-6);
  CHECK(grad_check(fs, slope, 1e-5) < 1e-6);
}

TEST_CASE("linear values") {
  Tensor x = Tensor::from({1, 2}, {1, 1});
  Tensor w = Tensor::from({1, 2}, {1, 2});
  Tensor b = Tensor::from({1}, {3});
  CHECK(linear(x, w, b).item() == 6.0);

  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor x2 = Tensor::from({2, 2}, {3, -1, 0.5, 2});
  Tensor y2 = linear(x2, eye, Tensor::zeros({2}));
  CHECK(y2.values() == x2.values());

  Rng rng(2);
  Tensor w3 = init({100, 512}, InitScheme::kaiming(), rng);
  Tensor y3 = linear(Tensor::zeros({3, 512}), w3, Tensor::zeros({100}));
  CHECK(y3.shape() == Shape{3, 100});

  CHECK_THROWS_AS(linear(Tensor::zeros({1, 3}), w, b), ShapeError);
}

TEST_CASE("linear gradients") {
  Rng rng(19);
  Tensor x = rand_tensor({3, 4}, rng);
  Tensor w = rand_tensor({2, 4}, rng);
  Tensor b = rand_tensor({2}, rng);
  auto fx = [&](Tensor& t) { return sum(square(linear(t, w, b))); };
  auto fw = [&](Tensor& t) { return sum(square(linear(x, t, b))); };
  auto fb = [&](Tensor& t) { return sum(square(linear(x, w, t))); };
  CHECK(grad_check(fx, x, 1e-5) < 1e-6);
  CHECK(grad_check(fw, w, 1e-5) < 1e-6);
  CHECK(grad_check(fb, b, 1e-5) < 1e-6);
}

TEST_CASE("upsample_nearest2x replicates blocks and sums gradients") {
  Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}, true);
  Tensor y = upsample_nearest2x(x);
  CHECK(y.shape() == Shape{1, 1, 4, 4});
  CHECK(y.values() == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2,
                                          3, 3, 4, 4, 3, 3, 4, 4});
  sum(y).backward();
  CHECK(x.grad() == std::vector<double>(4, 4.0));
}

TEST_CASE("cross_entropy values") {
  Tensor u100 = Tensor::zeros({1, 100});
  CHECK(cross_entropy(u100, {7}).item() == doctest::Approx(std::log(100.0)).epsilon(1e-12));

  Tensor u2 = Tensor::zeros({3, 2});
  CHECK(cross_entropy(u2, {0, 1, 0}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Tensor sat = Tensor::zeros({1, 5});
  sat.values()[2] = 1000.0;
  CHECK(cross_entropy(sat, {2}).item() < 1e-6);

  CHECK_THROWS_AS(cross_entropy(u2, {0, 2, 0}), ConfigError);
  CHECK_THROWS_AS(cross_entropy(u2, {0, -1, 0}), ConfigError);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(23);
  Tensor logits = rand_tensor({8, 10}, rng, -5, 5);
  Tensor p = softmax(logits);
  for (int n = 0; n < 8; ++n) {
    double s = 0;
    for (int k = 0; k < 10; ++k) s += p.values()[size_t(n * 10 + k)];
    CHECK(std::fabs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("cross_entropy gradient") {
  Rng rng(29);
  Tensor logits = rand_tensor({4, 6}, rng, -2, 2);
  std::vector<int> labels{0, 3, 5, 2};
  auto f = [&](Tensor& t) { return cross_entropy(t, labels); };
  CHECK(grad_check(f, logits, 1e-5) < 1e-6);
}

TEST_CASE("l1_loss values and subgradient") {
  Tensor a = Tensor::from({2}, {0, 0}, true);
  Tensor b = Tensor::from({2}, {1, -3});
  CHECK(l1_loss(a, b).item() == doctest::Approx(2.0));

  Tensor c = Tensor::from({3}, {1, 2, 3}, true);
  Tensor d = Tensor::from({3}, {1, 2, 3});
  Tensor z = l1_loss(c, d);
  CHECK(z.item() == 0.0);
  z.backward();
  CHECK(c.grad() == std::vector<double>(3, 0.0));

  Rng rng(31);
  Tensor p = rand_tensor({6}, rng);
  Tensor q = rand_tensor({6}, rng, 2.0, 3.0);  // no ties with p
  auto f = [&](Tensor& t) { return l1_loss(t, q); };
  CHECK(grad_check(f, p, 1e-5) < 1e-6);
}

TEST_CASE("layer objects carry named params and MAC counts") {
  Rng rng(5);
  Sequential seq;
  seq.add(std::make_shared<ConvLayer>("b1c1", 3, 64, 1, 1, rng));
  seq.add(std::make_shared<BatchNormLayer>("b1n1", 64));
  seq.add(std::make_shared<ReluLayer>("b1r1"));
  seq.add(std::make_shared<MaxPoolLayer>("p1"));

  CHECK(seq.out_shape({1, 3, 32, 32}) == Shape{1, 64, 16, 16});
  // First conv: 3*64*9*32*32 multiply-accumulates.
  CHECK(seq.at(0)->macs({1, 3, 32, 32}) == 1769472);

  ParamList ps = seq.params();
  REQUIRE(ps.size() == 4);
  CHECK(ps[0].name == "b1c1.weight");
  CHECK(ps[3].name == "b1n1.beta");

  Tensor x = rand_tensor({2, 3, 32, 32}, rng, 0, 1);
  Tensor y = seq.forward(x, Mode::Train);
  CHECK(y.shape() == Shape{2, 64, 16, 16});
}

TEST_CASE("gdn layer initialization matches its declared effective params") {
  GdnLayer g("enc_gdn", 4, false);
  Tensor x = Tensor::ones({1, 4, 1, 1});
  Tensor y = g.forward(x, Mode::Train);
  // d = beta + gamma_diag * 1 = 1.1
  for (int c = 0; c < 4; ++c) {
    CHECK(y.values()[size_t(c)] == doctest::Approx(1.0 / std::sqrt(1.1)).epsilon(1e-12));
  }
}

TEST_CASE("set_bn_stats_update toggles every bn layer") {
  Rng rng(6);
  Sequential seq;
  seq.add(std::make_shared<ConvLayer>("c", 1, 2, 1, 1, rng));
  seq.add(std::make_shared<BatchNormLayer>("n", 2));
  seq.set_bn_stats_update(false);
  auto* bn = dynamic_cast<BatchNormLayer*>(seq.at(1).get());
  REQUIRE(bn != nullptr);
  CHECK_FALSE(bn->update_stats);
  Tensor x = rand_tensor({2, 1, 4, 4}, rng);
  seq.forward(x, Mode::Train);
  CHECK_FALSE(bn->stats.initialized);
}
