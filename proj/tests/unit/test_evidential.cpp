#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "megan/errors.hpp"
#include "megan/evidential.hpp"

using namespace megan::evidential;
using megan::diff::Tape;
using megan::diff::Tensor;
using megan::diff::Var;

namespace {

// KL[Dir([2,1,1,1]) || Dir(1)] reduces to E[ln 4 + ln p1] with p1 ~ Beta(2, 3);
// composite Simpson on the Beta density, independent of any gamma function.
double kl_2111_by_quadrature() {
  const int n = 200000;
  const double h = 1.0 / n;
  auto f = [](double p) {
    if (p <= 0.0) return 0.0;
    return 12.0 * p * (1.0 - p) * (1.0 - p) * (std::log(4.0) + std::log(p));
  };
  double acc = f(0.0) + f(1.0);
  for (int i = 1; i < n; ++i) acc += (i % 2 ? 4.0 : 2.0) * f(i * h);
  return acc * h / 3.0;
}

double classification_term(const EvidentialOutput& out, int label) {
  // psi(S) - psi(alpha_y) through the loss with KL disabled (t = 0).
  return edl_loss(std::span(&out, 1), std::span(&label, 1), 0, EdlLossConfig{});
}

}  // namespace

TEST_CASE("evidential_from_logits examples") {
  SUBCASE("no evidence") {
    const auto out = evidential_from_logits(std::vector<double>(4, -800.0));
    CHECK(out.uncertainty == 1.0);
    for (double p : out.probs) CHECK(p == 0.25);
  }
  SUBCASE("evidence [4,0,0,0]") {
    const auto out = evidential_from_evidence(std::vector<double>{4, 0, 0, 0});
    CHECK(out.alpha == std::vector<double>{5, 1, 1, 1});
    CHECK(out.strength == 8.0);
    CHECK(out.uncertainty == 0.5);
    CHECK(out.probs == std::vector<double>{0.625, 0.125, 0.125, 0.125});
  }
  SUBCASE("zero logits") {
    const auto out = evidential_from_logits(std::vector<double>(4, 0.0));
    CHECK(std::abs(out.strength - 6.772588722239781) < 1e-12);
    // 4 / (4 (1 + ln 2)) evaluated at 30 digits: 0.590616109149641...
    CHECK(std::abs(out.uncertainty - 0.5906161091496412) < 1e-12);
    for (double p : out.probs) CHECK(p == 0.25);
  }
}

TEST_CASE("evidential invariants over random logits") {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> n(0.0, 8.0);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> z(4);
    for (double& v : z) v = n(rng);
    const auto out = evidential_from_logits(z);
    double total = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(out.alpha[c] == out.evidence[c] + 1.0);
      total += out.probs[c];
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
    CHECK(out.uncertainty > 0.0);
    CHECK(out.uncertainty <= 1.0);
    CHECK(std::abs(out.uncertainty - 4.0 / out.strength) < 1e-12);
  }
}

TEST_CASE("KL to the uniform Dirichlet") {
  CHECK(kl_dirichlet_vs_uniform(std::vector<double>{1, 1, 1, 1}) == 0.0);
  const double kl = kl_dirichlet_vs_uniform(std::vector<double>{2, 1, 1, 1});
  CHECK(std::abs(kl - 0.302961027786557) < 1e-12);
  CHECK(std::abs(kl - kl_2111_by_quadrature()) < 1e-8);
  CHECK(kl_dirichlet_vs_uniform(std::vector<double>(4, 10.0)) >
        kl_dirichlet_vs_uniform(std::vector<double>(4, 2.0)));
  CHECK_THROWS_AS(kl_dirichlet_vs_uniform(std::vector<double>{0.5, 1, 1, 1}), megan::DomainError);
}

TEST_CASE("KL is positive away from the all-ones vector") {
  std::mt19937_64 rng(7);
  std::exponential_distribution<double> e(0.5);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> a(4);
    for (double& v : a) v = 1.0 + e(rng);
    CHECK(kl_dirichlet_vs_uniform(a) > 0.0);
  }
}

TEST_CASE("tape KL agrees with the scalar closed form") {
  Tape t;
  Var a = t.constant(Tensor::matrix(2, 4, {2, 1, 1, 1, 3.5, 1.2, 7.0, 1.0}));
  const Tensor kl = kl_to_uniform(a).value();
  CHECK(std::abs(kl[0] - kl_dirichlet_vs_uniform(std::vector<double>{2, 1, 1, 1})) < 1e-12);
  CHECK(std::abs(kl[1] - kl_dirichlet_vs_uniform(std::vector<double>{3.5, 1.2, 7.0, 1.0})) < 1e-12);
}

TEST_CASE("annealing coefficient") {
  CHECK(annealing_coefficient(0, 10) == 0.0);
  CHECK(annealing_coefficient(10, 10) == 1.0);
  CHECK(annealing_coefficient(3, 10) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(annealing_coefficient(25, 10) == 1.0);
  double prev = 0.0;
  for (int t = 0; t < 40; ++t) {
    const double l = annealing_coefficient(t, 7);
    CHECK(l >= prev);
    CHECK(l <= 1.0);
    prev = l;
  }
  CHECK_THROWS_AS(annealing_coefficient(1, 0), megan::ConfigError);
}

TEST_CASE("edl_loss examples") {
  SUBCASE("zero evidence at t = 0") {
    const auto zero = evidential_from_evidence(std::vector<double>(4, 0.0));
    for (int label = 0; label < 4; ++label) {
      CHECK(std::abs(classification_term(zero, label) - 11.0 / 6.0) < 1e-12);
    }
    std::vector<EvidentialOutput> batch(3, zero);
    std::vector<int> labels = {0, 2, 3};
    CHECK(std::abs(edl_loss(batch, labels, 0, EdlLossConfig{}) - 11.0 / 6.0) < 1e-12);
  }
  SUBCASE("adjusted KL vanishes when all evidence is on the true class") {
    const auto out = evidential_from_evidence(std::vector<double>{4, 0, 0, 0});
    const int label = 0;
    EdlLossConfig cfg{10, true};
    const double loss = edl_loss(std::span(&out, 1), std::span(&label, 1), 12, cfg);
    CHECK(std::abs(loss - (1.0 / 5 + 1.0 / 6 + 1.0 / 7)) < 1e-12);
    CHECK(std::abs(loss - 0.509524) < 1e-6);

    cfg.kl_evidence_adjustment = false;
    const double literal = edl_loss(std::span(&out, 1), std::span(&label, 1), 12, cfg);
    CHECK(std::abs(literal - loss - kl_dirichlet_vs_uniform(out.alpha)) < 1e-12);
  }
  SUBCASE("label mismatch") {
    const auto out = evidential_from_evidence(std::vector<double>{1, 0, 0, 0});
    std::vector<int> labels = {0, 1};
    CHECK_THROWS_AS(edl_loss(std::span(&out, 1), labels, 0, EdlLossConfig{}), megan::ShapeError);
    const int bad = 4;
    CHECK_THROWS_AS(edl_loss(std::span(&out, 1), std::span(&bad, 1), 0, EdlLossConfig{}),
                    megan::ShapeError);
  }
}

TEST_CASE("edl_loss gradient matches finite differences") {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> n(0.0, 2.0);
  std::uniform_int_distribution<int> cls(0, 3);
  for (bool adjust : {true, false}) {
    for (int epoch : {0, 5, 10, 15}) {
      std::vector<double> z(6 * 4);
      for (double& v : z) v = n(rng);
      std::vector<int> labels(6);
      for (int& y : labels) y = cls(rng);
      EdlLossConfig cfg{10, adjust};
      auto f = [&](Tape&, std::span<const Var> p) {
        return edl_loss(dirichlet_from_logits(p[0]).alpha, labels, epoch, cfg);
      };
      CHECK(megan::diff::grad_check(f, {Tensor::matrix(6, 4, z)}) < 1e-4);
    }
  }
}

TEST_CASE("raising the true-class logit never raises the classification term") {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> z(4);
    for (double& v : z) v = n(rng);
    const int label = trial % 4;
    double prev = classification_term(evidential_from_logits(z), label);
    for (int step = 0; step < 10; ++step) {
      z[label] += 0.7;
      const double cur = classification_term(evidential_from_logits(z), label);
      CHECK(cur <= prev + 1e-15);
      prev = cur;
    }
  }
}

TEST_CASE("edl_loss is permutation invariant over the batch") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 2.0);
  std::vector<EvidentialOutput> batch;
  std::vector<int> labels;
  for (int i = 0; i < 8; ++i) {
    std::vector<double> z(4);
    for (double& v : z) v = n(rng);
    batch.push_back(evidential_from_logits(z));
    labels.push_back(i % 4);
  }
  const double base = edl_loss(batch, labels, 7, EdlLossConfig{});
  std::vector<std::size_t> order(8);
  for (std::size_t i = 0; i < 8; ++i) order[i] = i;
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<EvidentialOutput> b2;
    std::vector<int> l2;
    for (std::size_t i : order) {
      b2.push_back(batch[i]);
      l2.push_back(labels[i]);
    }
    CHECK(edl_loss(b2, l2, 7, EdlLossConfig{}) == doctest::Approx(base).epsilon(1e-13));
  }
}
