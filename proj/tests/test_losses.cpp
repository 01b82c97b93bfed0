#include <doctest.h>

#include <cmath>

#include "cseg/losses.hpp"
#include "support.hpp"

using namespace cseg;
using namespace cseg::testing;

namespace {

Tensor vec(std::initializer_list<double> v) {
  Tensor t({v.size()});
  std::size_t i = 0;
  for (double x : v) t[i++] = x;
  return t;
}

Tensor binary(const Shape& s, Rng& rng, double p) {
  Tensor t(s);
  for (auto& v : t.values()) v = rng.bernoulli(p) ? 1.0 : 0.0;
  return t;
}

double differentiable_value(const LossSpec& spec, const Tensor& pred, const Tensor& target) {
  GradTape tape;
  return tape.value(loss(tape, spec, tape.constant(pred), target)).item();
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("bce examples") {
    CHECK(bce_loss(vec({0.5}), vec({1.0})) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(bce_loss(vec({1e-9}), vec({1.0})) == doctest::Approx(-std::log(1e-7)).epsilon(1e-12));
    const Tensor y = vec({1, 0, 1, 1, 0});
    CHECK(bce_loss(y, y) <= 2e-7);
    CHECK(bce_loss(y, y) >= 0.0);
    // Mean over pixels: two pixels at p=0.5 still give ln 2.
    CHECK(bce_loss(vec({0.5, 0.5}), vec({1, 0})) == doctest::Approx(std::log(2.0)));
    CHECK_THROWS_AS(bce_loss(vec({0.5}), vec({1, 0})), std::invalid_argument);
  }

  TEST_CASE("soft confusion examples") {
    const ConfusionCounts c = soft_confusion(vec({0.8, 0.4}), vec({1, 0}));
    CHECK(c.tp == doctest::Approx(0.8));
    CHECK(c.fp == doctest::Approx(0.4));
    CHECK(c.fn == doctest::Approx(0.2));
    CHECK(c.tn == doctest::Approx(0.6));

    const ConfusionCounts h = soft_confusion(vec({1, 1, 0, 0, 1}), vec({1, 0, 1, 0, 1}));
    CHECK(h.tp == 2.0);
    CHECK(h.fp == 1.0);
    CHECK(h.fn == 1.0);
    CHECK(h.tn == 1.0);
    CHECK(h.total() == 5.0);

    const ConfusionCounts z = soft_confusion(vec({0.3, 0.9}), vec({0, 0}));
    CHECK(z.tp == 0.0);
    CHECK(z.fn == 0.0);
    CHECK_THROWS_AS(soft_confusion(vec({0.5}), vec({1, 0})), std::invalid_argument);
  }

  TEST_CASE("dsc examples") {
    CHECK(dsc({3, 0, 0, 5}) == 1.0);
    CHECK(dsc({2, 1, 1, 0}) == doctest::Approx(4.0 / 6.0));
    CHECK(dsc({0, 2, 1, 7}) == 0.0);
    CHECK(dsc({0, 0, 0, 9}) == 1.0);
  }

  TEST_CASE("tversky index examples") {
    CHECK(tversky_index({2, 1, 1, 0}, 0.5) == doctest::Approx(2.0 / 3.0));
    CHECK(tversky_index({2, 1, 1, 0}, 0.5) == doctest::Approx(dsc({2, 1, 1, 0})));
    for (double beta : {0.0, 0.3, 1.0}) CHECK(tversky_index({4, 0, 0, 1}, beta) == 1.0);
    CHECK(tversky_index({3, 2, 7, 0}, 1.0) == doctest::Approx(3.0 / 5.0));
    CHECK(tversky_index({0, 0, 0, 4}, 0.7) == 1.0);
    CHECK(tversky_index({0, 0, 3, 1}, 1.0) == 0.0);
  }

  TEST_CASE("tversky loss examples") {
    CHECK(tversky_loss(vec({0.8, 0.4}), vec({1, 0}), 0.5, 1e-12) == doctest::Approx(1.0 - 0.8 / 1.1).epsilon(1e-9));
    const Tensor y = vec({1, 0, 0, 1});
    CHECK(tversky_loss(y, y, 0.5, 1e-6) == 0.0);
    const Tensor inv = vec({0, 1, 1, 0});
    CHECK(tversky_loss(inv, y, 0.5, 1e-9) == doctest::Approx(1.0).epsilon(1e-8));
    CHECK_THROWS_AS(tversky_loss(vec({0.5}), vec({1, 0}), 0.5, 1e-6), std::invalid_argument);
    CHECK_THROWS_AS(tversky_loss(vec({0.5}), vec({1}), 0.5, 0.0), std::invalid_argument);
  }

  TEST_CASE("loss spec validation and names") {
    CHECK(parse_loss_kind("bce") == LossKind::bce);
    CHECK(parse_loss_kind("tversky") == LossKind::tversky);
    CHECK(to_string(LossKind::tversky) == "tversky");
    CHECK_THROWS_AS(parse_loss_kind("focal"), std::invalid_argument);
    CHECK_THROWS_AS((LossSpec{LossKind::tversky, 0.5, 0.0}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((LossSpec{LossKind::tversky, 1.5, 1e-6}.validate()), std::invalid_argument);
    CHECK_NOTHROW((LossSpec{LossKind::bce}.validate()));
  }

  TEST_CASE("tape losses agree with the plain evaluations") {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
      const Tensor p = random_tensor({2, 1, 4, 5}, rng, 0.01, 0.99);
      const Tensor y = binary({2, 1, 4, 5}, rng, 0.4);
      const LossSpec b{LossKind::bce}, t{LossKind::tversky, rng.uniform(), 1e-6};
      CHECK(differentiable_value(b, p, y) == doctest::Approx(bce_loss(p, y)).epsilon(1e-12));
      CHECK(differentiable_value(t, p, y) == doctest::Approx(tversky_loss(p, y, t.beta, t.epsilon)).epsilon(1e-12));
      CHECK(loss_value(t, p, y) == doctest::Approx(tversky_loss(p, y, t.beta, t.epsilon)));
    }
  }
}

TEST_SUITE("losses-properties") {
  TEST_CASE("tversky at one half equals dsc over random count triples") {
    Rng rng(2);
    for (int i = 0; i < 2000; ++i) {
      ConfusionCounts c;
      // Mix integral and real-valued counts, including exact zeros.
      auto draw = [&] { return rng.bernoulli(0.1) ? 0.0 : (rng.bernoulli(0.5) ? double(rng.below(50)) : rng.uniform(0, 30)); };
      c.tp = draw();
      c.fp = draw();
      c.fn = draw();
      c.tn = draw();
      CAPTURE(c.tp);
      CAPTURE(c.fp);
      CAPTURE(c.fn);
      CHECK(tversky_index(c, 0.5) == doctest::Approx(dsc(c)).epsilon(1e-14));
    }
  }

  TEST_CASE("dsc is symmetric under swapping prediction and target") {
    Rng rng(3);
    for (int i = 0; i < 300; ++i) {
      const Tensor a = binary({30}, rng, 0.4), b = binary({30}, rng, 0.4);
      CHECK(dsc(soft_confusion(a, b)) == dsc(soft_confusion(b, a)));
    }
  }

  TEST_CASE("tversky index is monotone non-increasing in fp and fn") {
    Rng rng(4);
    for (int i = 0; i < 1000; ++i) {
      const ConfusionCounts c{rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0, 10), 0};
      const double beta = rng.uniform();
      const double d = rng.uniform(0, 5);
      ConfusionCounts more_fp = c, more_fn = c;
      more_fp.fp += d;
      more_fn.fn += d;
      CHECK(tversky_index(more_fp, beta) <= tversky_index(c, beta));
      CHECK(tversky_index(more_fn, beta) <= tversky_index(c, beta));
      const double t = tversky_index(c, beta);
      CHECK((t >= 0.0 && t <= 1.0));
    }
  }

  TEST_CASE("losses are non-negative and vanish only at perfect prediction") {
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
      const Tensor y = binary({12}, rng, 0.5);
      const Tensor p = random_tensor({12}, rng, 0.0, 1.0);
      const double beta = rng.uniform();
      CHECK(bce_loss(p, y) >= 0.0);
      const double tv = tversky_loss(p, y, beta, 1e-6);
      CHECK(tv >= 0.0);
      CHECK(tv > 0.0);  // continuous draws are never exactly binary
      CHECK(bce_loss(p, y) > 2e-7);
      CHECK(tversky_loss(y, y, beta, 1e-6) == 0.0);
      CHECK(bce_loss(y, y) <= 2e-7);
    }
  }

  TEST_CASE("loss gradients match finite differences") {
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
      const Tensor p = random_tensor({1, 1, 5, 6}, rng, 0.05, 0.95);
      const Tensor y = binary({1, 1, 5, 6}, rng, 0.4);
      const double beta = rng.uniform(0.1, 0.9);
      const auto tv = finite_difference_check(
          {p}, [&](GradTape& t, const std::vector<Var>& v) { return tversky_loss(t, v[0], y, beta, 1e-6); });
      CHECK(tv.max_rel < 1e-4);
      const auto bc = finite_difference_check(
          {p}, [&](GradTape& t, const std::vector<Var>& v) { return bce_loss(t, v[0], y); });
      CHECK(bc.max_rel < 1e-4);
    }
  }

  TEST_CASE("hard counts always sum to the pixel count") {
    Rng rng(7);
    for (int i = 0; i < 200; ++i) {
      const std::size_t n = 1 + rng.below(40);
      const ConfusionCounts c = soft_confusion(binary({n}, rng, 0.5), binary({n}, rng, 0.5));
      CHECK(c.total() == double(n));
      CHECK((c.tp >= 0 && c.fp >= 0 && c.fn >= 0 && c.tn >= 0));
    }
  }
}
