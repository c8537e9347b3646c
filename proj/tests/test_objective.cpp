#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "filigrain/objective.hpp"
#include "filigrain/rng.hpp"

using namespace filigrain;

namespace {

Tensor square(std::vector<double> v, int b, bool requires_grad = false) {
  return Tensor::from_values({b, b}, std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("image_to_text_loss values") {
  Temperature tau = Temperature::init(1.0);
  SECTION("b=1 is exactly zero") {
    Tape tape;
    Tensor loss = image_to_text_loss(tape, square({3.7}, 1), tau, one_hot_targets(1));
    CHECK(loss.scalar_value() == 0.0);
  }
  SECTION("diagonal b=2 instance") {
    Tape tape;
    Tensor loss =
        image_to_text_loss(tape, square({1, 0, 0, 1}, 2), tau, one_hot_targets(2));
    CHECK(loss.scalar_value() == Catch::Approx(0.3132616875182228).margin(1e-9));
  }
  SECTION("adding a constant to a whole row leaves the loss unchanged") {
    Tape tape;
    Tensor base = square({0.3, -0.1, 0.4, 0.9}, 2);
    Tensor shifted = square({0.3 + 5.5, -0.1 + 5.5, 0.4, 0.9}, 2);
    const double a =
        image_to_text_loss(tape, base, tau, one_hot_targets(2)).scalar_value();
    const double b =
        image_to_text_loss(tape, shifted, tau, one_hot_targets(2)).scalar_value();
    CHECK(std::fabs(a - b) <= 1e-12);
  }
}

TEST_CASE("text_to_image_loss values") {
  Temperature tau = Temperature::init(1.0);
  SECTION("b=1 is exactly zero") {
    Tape tape;
    Tensor loss = text_to_image_loss(tape, square({-2.0}, 1), tau, one_hot_targets(1));
    CHECK(loss.scalar_value() == 0.0);
  }
  SECTION("symmetric diagonal instance equals the image direction") {
    Tape tape;
    Tensor s = square({1, 0, 0, 1}, 2);
    const double li =
        image_to_text_loss(tape, s, tau, one_hot_targets(2)).scalar_value();
    const double lt =
        text_to_image_loss(tape, s, tau, one_hot_targets(2)).scalar_value();
    CHECK(li == Catch::Approx(lt).epsilon(1e-15));
  }
  SECTION("uniform logits give log b") {
    Tape tape;
    Tensor loss =
        text_to_image_loss(tape, square({0.4, 0.4, 0.4, 0.4}, 2), tau,
                           one_hot_targets(2));
    CHECK(loss.scalar_value() == Catch::Approx(0.6931471805599453).margin(1e-9));
  }
}

TEST_CASE("total_loss") {
  Temperature tau = Temperature::init(1.0);
  SECTION("diagonal instance totals 0.313262") {
    Tape tape;
    SimilarityPair pair;
    pair.image_to_text = square({1, 0, 0, 1}, 2);
    pair.text_to_image = square({1, 0, 0, 1}, 2);
    Tensor loss =
        total_loss(tape, pair, tau, one_hot_targets(2), one_hot_targets(2));
    CHECK(loss.scalar_value() == Catch::Approx(0.3132616875182228).margin(1e-6));
  }
  SECTION("gradient flows into tau and matches finite differences") {
    Rng rng(3);
    std::vector<double> si(9), st(9);
    for (double& v : si) v = rng.uniform(-1, 1);
    for (double& v : st) v = rng.uniform(-1, 1);
    auto eval = [&](double tau_value, Tensor* feat_i = nullptr,
                    Tensor* tau_out = nullptr) {
      Tape tape;
      Temperature t = Temperature::init(tau_value);
      SimilarityPair pair;
      pair.image_to_text = square(si, 3, true);
      pair.text_to_image = square(st, 3, true);
      Tensor loss =
          total_loss(tape, pair, t, one_hot_targets(3), one_hot_targets(3));
      if (feat_i) {
        tape.backward(loss);
        *feat_i = pair.image_to_text;
        *tau_out = t.value;
      }
      return loss.scalar_value();
    };
    Tensor feat_i, tau_t;
    eval(0.07, &feat_i, &tau_t);
    const double h = 1e-6;
    const double fd = (eval(0.07 + h) - eval(0.07 - h)) / (2 * h);
    CHECK(tau_t.grad()[0] != 0.0);
    CHECK(std::fabs(tau_t.grad()[0] - fd) /
              std::max({std::fabs(fd), std::fabs(tau_t.grad()[0]), 1e-6}) <=
          1e-4);

    // and the similarity-entry gradients too
    Tape tape;
    Temperature t = Temperature::init(0.07);
    SimilarityPair pair;
    pair.image_to_text = square(si, 3, true);
    pair.text_to_image = square(st, 3, true);
    Tensor loss = total_loss(tape, pair, t, one_hot_targets(3), one_hot_targets(3));
    tape.backward(loss);
    for (int i = 0; i < 9; ++i) {
      const double keep = si[static_cast<std::size_t>(i)];
      si[static_cast<std::size_t>(i)] = keep + h;
      const double fp = eval(0.07);
      si[static_cast<std::size_t>(i)] = keep - h;
      const double fm = eval(0.07);
      si[static_cast<std::size_t>(i)] = keep;
      const double fdi = (fp - fm) / (2 * h);
      const double an = pair.image_to_text.grad()[i];
      CHECK(std::fabs(an - fdi) /
                std::max({std::fabs(an), std::fabs(fdi), 1e-6}) <=
            1e-4);
    }
  }
  SECTION("one-hot targets keep every loss non-negative") {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
      Tape tape;
      std::vector<double> v(16);
      for (double& x : v) x = rng.uniform(-1, 1);
      Temperature t = Temperature::init(0.07);
      Tensor li = image_to_text_loss(tape, square(v, 4), t, one_hot_targets(4));
      Tensor lt = text_to_image_loss(tape, square(v, 4), t, one_hot_targets(4));
      CHECK(li.scalar_value() >= 0.0);
      CHECK(lt.scalar_value() >= 0.0);
    }
  }
  SECTION("free-logit descent decreases the loss monotonically") {
    Rng rng(13);
    std::vector<double> si(9), st(9);
    for (double& v : si) v = rng.uniform(-0.5, 0.5);
    for (double& v : st) v = rng.uniform(-0.5, 0.5);
    Temperature tau1 = Temperature::init(1.0);
    double prev = 1e300;
    for (int step = 0; step < 50; ++step) {
      Tape tape;
      SimilarityPair pair;
      pair.image_to_text = square(si, 3, true);
      pair.text_to_image = square(st, 3, true);
      Tensor loss =
          total_loss(tape, pair, tau1, one_hot_targets(3), one_hot_targets(3));
      CHECK(loss.scalar_value() < prev);
      prev = loss.scalar_value();
      tape.backward(loss);
      for (int i = 0; i < 9; ++i) {
        si[static_cast<std::size_t>(i)] -= 0.5 * pair.image_to_text.grad()[i];
        st[static_cast<std::size_t>(i)] -= 0.5 * pair.text_to_image.grad()[i];
      }
    }
  }
  SECTION("argmax columns survive a common rescale absorbed into tau") {
    Rng rng(15);
    std::vector<double> v(16);
    for (double& x : v) x = rng.uniform(-1, 1);
    Tape tape;
    Tensor p1 = tape.softmax_rows(tape.scale(square(v, 4), 1.0 / 0.07));
    Tensor p2 = tape.softmax_rows(tape.scale(square(v, 4), 3.0 / 0.07));
    for (int i = 0; i < 4; ++i) {
      int a1 = 0, a2 = 0;
      for (int j = 1; j < 4; ++j) {
        if (p1.values()[i * 4 + j] > p1.values()[i * 4 + a1]) a1 = j;
        if (p2.values()[i * 4 + j] > p2.values()[i * 4 + a2]) a2 = j;
      }
      CHECK(a1 == a2);
    }
  }
}

TEST_CASE("multi_positive_targets") {
  SECTION("singleton diagonal sets reduce to one-hot") {
    TargetDistribution t = multi_positive_targets({{0}, {1}, {2}}, 3);
    TargetDistribution oh = one_hot_targets(3);
    for (int i = 0; i < 9; ++i) CHECK(t.probs.values()[i] == oh.probs.values()[i]);
  }
  SECTION("positives {0,2} in b=4 spread half each") {
    TargetDistribution t = multi_positive_targets({{0, 2}, {1}, {2}, {3}}, 4);
    CHECK(t.probs.values()[0] == 0.5);
    CHECK(t.probs.values()[1] == 0.0);
    CHECK(t.probs.values()[2] == 0.5);
    CHECK(t.probs.values()[3] == 0.0);
  }
  SECTION("empty set throws") {
    CHECK_THROWS_AS(multi_positive_targets({{0}, {}}, 2), Error);
  }
  SECTION("5-caption batch: multi-positive loss beats a single assignment") {
    // One image repeated five times with five captions; the diagonal caption
    // scores poorly while the other four score well.
    const int b = 5;
    std::vector<double> v(25, 2.0);
    for (int i = 0; i < b; ++i) v[static_cast<std::size_t>(i * b + i)] = 0.0;
    std::vector<std::vector<int>> all;
    for (int i = 0; i < b; ++i) all.push_back({0, 1, 2, 3, 4});
    Temperature tau = Temperature::init(1.0);
    Tape tape;
    const double multi =
        image_to_text_loss(tape, square(v, b), tau, multi_positive_targets(all, b))
            .scalar_value();
    const double single =
        image_to_text_loss(tape, square(v, b), tau, one_hot_targets(b))
            .scalar_value();
    CHECK(multi <= single);
  }
}
