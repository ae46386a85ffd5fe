#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "megan/errors.hpp"
#include "megan/expert.hpp"

using namespace megan::expert;
using megan::diff::Tensor;
namespace simdata = megan::simdata;

namespace {

simdata::Dataset tiny_dataset(double separation, std::size_t n_train, std::uint64_t seed = 3) {
  simdata::GeneratorConfig cfg;
  cfg.n_train = n_train;
  cfg.n_val = 8;
  cfg.n_test = 8;
  cfg.n_unseen = 8;
  cfg.frames_min = 4;
  cfg.frames_max = 12;
  cfg.feature_dim = 16;
  cfg.class_separation = separation;
  cfg.difficulty_sd = 0.1;
  cfg.seed = seed;
  simdata::TrialRaters raters;
  raters.local.noise_sd = raters.central.noise_sd = raters.adjudicator.noise_sd = 0.05;
  return simdata::generate_dataset(cfg, raters, raters);
}

ExpertSpec small_spec(HeadKind head = HeadKind::evidential, double dropout = 0.1) {
  ExpertSpec s;
  s.name = "t";
  s.head = head;
  s.hidden = 16;
  s.attention = 8;
  s.dropout = dropout;
  s.seed = 21;
  return s;
}

Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(r * c);
  for (double& x : v) x = n(rng);
  return Tensor::matrix(r, c, std::move(v));
}

double weighted_f1_oracle(const std::vector<int>& preds, const std::vector<int>& labels) {
  double total = 0.0;
  for (int c = 0; c < 4; ++c) {
    double tp = 0, fp = 0, fn = 0, support = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (labels[i] == c) ++support;
      if (preds[i] == c && labels[i] == c) ++tp;
      if (preds[i] == c && labels[i] != c) ++fp;
      if (preds[i] != c && labels[i] == c) ++fn;
    }
    if (support == 0) continue;
    const double f1 = tp == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
    total += support * f1;
  }
  return total / static_cast<double>(labels.size());
}

}  // namespace

TEST_CASE("abmil_pool examples") {
  std::mt19937_64 rng(1);
  const Tensor v = random_matrix(5, 3, rng);
  const Tensor u = random_matrix(5, 3, rng);
  const Tensor w = random_matrix(3, 1, rng);

  SUBCASE("single frame") {
    const Tensor h = random_matrix(1, 5, rng);
    const auto out = abmil_pool(h, v, &u, w);
    CHECK(out.weights == std::vector<double>{1.0});
    for (std::size_t k = 0; k < 5; ++k) CHECK(out.embedding[k] == doctest::Approx(h[k]).epsilon(1e-15));
  }
  SUBCASE("duplicate frames") {
    std::vector<double> row = {0.3, -0.2, 1.1, 0.0, 0.7};
    std::vector<double> vals;
    for (int i = 0; i < 4; ++i) vals.insert(vals.end(), row.begin(), row.end());
    const auto out = abmil_pool(Tensor::matrix(4, 5, vals), v, &u, w);
    for (double a : out.weights) CHECK(a == doctest::Approx(0.25).epsilon(1e-15));
    for (std::size_t k = 0; k < 5; ++k) CHECK(std::abs(out.embedding[k] - row[k]) < 1e-12);
  }
  SUBCASE("permutation") {
    const Tensor h = random_matrix(6, 5, rng);
    const auto out = abmil_pool(h, v, &u, w);
    std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
    std::vector<double> vals;
    for (std::size_t p : perm) {
      for (std::size_t k = 0; k < 5; ++k) vals.push_back(h.at(p, k));
    }
    const auto permuted = abmil_pool(Tensor::matrix(6, 5, vals), v, &u, w);
    for (std::size_t j = 0; j < 6; ++j) CHECK(std::abs(permuted.weights[j] - out.weights[perm[j]]) < 1e-15);
    for (std::size_t k = 0; k < 5; ++k) CHECK(std::abs(permuted.embedding[k] - out.embedding[k]) < 1e-12);
  }
  SUBCASE("weights form a simplex and the embedding stays in the hull") {
    const Tensor h = random_matrix(9, 5, rng);
    const auto out = abmil_pool(h, v, nullptr, w);
    CHECK(std::accumulate(out.weights.begin(), out.weights.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t k = 0; k < 5; ++k) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t j = 0; j < 9; ++j) {
        lo = std::min(lo, h.at(j, k));
        hi = std::max(hi, h.at(j, k));
      }
      CHECK(out.embedding[k] >= lo - 1e-12);
      CHECK(out.embedding[k] <= hi + 1e-12);
    }
  }
}

TEST_CASE("forward determinism and dropout degeneracy") {
  const auto ds = tiny_dataset(2.0, 8);
  const ExpertModel model(small_spec(), 16, 8);
  const auto a = forward(model, ds.train[0], Mode::eval);
  const auto b = forward(model, ds.train[0], Mode::eval);
  CHECK(a.logits == b.logits);
  CHECK(a.features == b.features);
  CHECK(a.features.size() == 8);
  CHECK(a.attention.size() == ds.train[0].num_frames());

  const ExpertModel no_drop(small_spec(HeadKind::evidential, 0.0), 16, 8);
  std::mt19937_64 rng(4);
  CHECK(forward(no_drop, ds.train[1], Mode::train, &rng).logits ==
        forward(no_drop, ds.train[1], Mode::eval).logits);

  std::mt19937_64 rng2(4);
  const auto t = forward(model, ds.train[1], Mode::train, &rng2);
  CHECK(t.logits != forward(model, ds.train[1], Mode::eval).logits);
  CHECK_THROWS_AS(forward(model, ds.train[1], Mode::train), megan::StateError);
}

TEST_CASE("predict matches single-bag forward") {
  const auto ds = tiny_dataset(2.0, 10);
  const ExpertModel model(small_spec(HeadKind::softmax), 16, 8);
  const auto all = predict(model, ds.train, 3);
  REQUIRE(all.size() == ds.train.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto one = forward(model, ds.train[i], Mode::eval);
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(all[i].probs[c] - one.probs[c]) < 1e-12);
  }
}

TEST_CASE("zero head gives the zero-logit evidential output") {
  const auto ds = tiny_dataset(2.0, 4);
  ExpertModel model(small_spec(), 16, 8);
  auto& p = model.mutable_params();
  p["head.weight"] = Tensor::zeros({8, 4});
  p["head.bias"] = Tensor::zeros({1, 4});
  const auto out = forward(model, ds.train[0], Mode::eval);
  REQUIRE(out.evidential.has_value());
  for (double pc : out.probs) CHECK(pc == 0.25);
  CHECK(std::abs(out.uncertainty - 0.5906161091496412) < 1e-12);
}

TEST_CASE("shape errors") {
  const auto ds = tiny_dataset(2.0, 4);
  const ExpertModel model(small_spec(), 12, 8);
  CHECK_THROWS_AS(forward(model, ds.train[0], Mode::eval), megan::ShapeError);
  {
    auto params = ExpertModel(small_spec(), 16, 8).params();
    params["head.bias"] = Tensor::zeros({1, 3});
    CHECK_THROWS_AS(ExpertModel(small_spec(), 16, 8, params), megan::ShapeError);
  }
  ExpertSpec bad = small_spec();
  bad.dropout = 1.0;
  CHECK_THROWS_AS(ExpertModel(bad, 16, 8), megan::ConfigError);
}

TEST_CASE("plain attention has no gate parameters") {
  ExpertSpec s = small_spec();
  s.attention_kind = AttentionKind::plain;
  const ExpertModel m(s, 16, 8);
  CHECK(m.params().count("attention.U") == 0);
  CHECK(ExpertModel(small_spec(), 16, 8).params().count("attention.U") == 1);
}

TEST_CASE("training: epochs 0, determinism, missing labels") {
  const auto ds = tiny_dataset(2.0, 24);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = 0;
  ExpertModel m(small_spec(), 16, 8);
  const auto before = megan::nn::parameter_hash(m.params());
  const auto rep = train_expert(m, ds.train, cfg, {});
  CHECK(rep.epoch_loss.empty());
  CHECK(megan::nn::parameter_hash(m.params()) == before);

  cfg.epochs = 2;
  ExpertModel a(small_spec(), 16, 8);
  ExpertModel b(small_spec(), 16, 8);
  const auto ra = train_expert(a, ds.train, cfg, {});
  const auto rb = train_expert(b, ds.train, cfg, {});
  CHECK(a.params() == b.params());
  CHECK(ra.epoch_loss == rb.epoch_loss);
  CHECK(ra.steps == 6);
  CHECK(megan::nn::parameter_hash(a.params()) != before);

  auto unlabeled = ds.train;
  unlabeled[3].central_label.reset();
  ExpertModel c(small_spec(), 16, 8);
  CHECK_THROWS_AS(train_expert(c, unlabeled, cfg, {}), megan::ConfigError);
  CHECK_THROWS_AS(train_expert(c, std::span<const FeatureBag>{}, cfg, {}), megan::ConfigError);
}

TEST_CASE("training reaches high F1 on separable data") {
  const auto ds = tiny_dataset(6.0, 320);
  TrainConfig cfg;
  cfg.epochs = 20;
  // 400 steps at the default 1e-4 barely leave the initialization at this
  // scale; the sanity check only asks that the training loop can fit.
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 16;
  for (HeadKind head : {HeadKind::evidential, HeadKind::softmax}) {
    ExpertModel m(small_spec(head), 16, 8);
    const auto rep = train_expert(m, ds.train, cfg, {});
    CHECK(rep.epoch_loss.back() < rep.epoch_loss.front());
    const auto out = predict(m, ds.train);
    std::vector<int> preds, labels;
    for (std::size_t i = 0; i < out.size(); ++i) {
      preds.push_back(static_cast<int>(std::max_element(out[i].probs.begin(), out[i].probs.end()) -
                                       out[i].probs.begin()));
      labels.push_back(*ds.train[i].central_label);
    }
    CHECK(weighted_f1_oracle(preds, labels) >= 0.95);
  }
}

TEST_CASE("normalized entropy") {
  CHECK(normalized_entropy(std::vector<double>(4, 0.25)) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(normalized_entropy(std::vector<double>{1, 0, 0, 0}) == 0.0);
}

TEST_CASE("MC dropout and ensemble baselines") {
  const auto ds = tiny_dataset(2.0, 6);
  const auto& bag = ds.train[0];

  SUBCASE("dropout 0 collapses to the eval output") {
    const ExpertModel m(small_spec(HeadKind::softmax, 0.0), 16, 8);
    const auto mc = mc_dropout_predict(m, bag, 40);
    const auto ev = forward(m, bag, Mode::eval);
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(mc.probs[c] - ev.probs[c]) < 1e-12);
    CHECK(std::abs(mc.uncertainty - normalized_entropy(ev.probs)) < 1e-12);
  }
  SUBCASE("one pass equals a single stochastic forward with the same stream") {
    const ExpertModel m(small_spec(HeadKind::softmax, 0.25), 16, 8);
    const auto a = mc_dropout_predict(m, bag, 1);
    const auto b = mc_dropout_predict(m, bag, 1);
    CHECK(a.probs == b.probs);
    CHECK(std::abs(std::accumulate(a.probs.begin(), a.probs.end(), 0.0) - 1.0) < 1e-12);
    const auto many = mc_dropout_predict(m, bag, 40);
    CHECK(many.probs != a.probs);
  }
  SUBCASE("ensemble") {
    const ExpertModel m1(small_spec(HeadKind::softmax), 16, 8);
    ExpertSpec s2 = small_spec(HeadKind::softmax);
    s2.seed = 99;
    const ExpertModel m2(s2, 16, 8);
    const ExpertModel* same[] = {&m1, &m1};
    const auto avg = ensemble_predict(same, bag);
    const auto one = forward(m1, bag, Mode::eval);
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(avg.probs[c] - one.probs[c]) < 1e-15);
    const ExpertModel* ab[] = {&m1, &m2};
    const ExpertModel* ba[] = {&m2, &m1};
    CHECK(ensemble_predict(ab, bag).probs == ensemble_predict(ba, bag).probs);
    const ExpertModel* single[] = {&m1};
    CHECK_THROWS_AS(ensemble_predict(single, bag), megan::ConfigError);
  }
  SUBCASE("opposite one-hot members") {
    const std::vector<std::vector<double>> members = {{1, 0, 0, 0}, {0, 0, 1, 0}};
    const auto avg = average_predictions(members);
    CHECK(avg.probs == std::vector<double>{0.5, 0, 0.5, 0});
    CHECK(avg.uncertainty == doctest::Approx(0.5).epsilon(1e-15));
  }
}
