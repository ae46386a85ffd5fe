#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "megan/errors.hpp"
#include "megan/gate.hpp"

using namespace megan::gate;
using megan::diff::Tape;
using megan::diff::Tensor;
using megan::diff::Var;
namespace expert = megan::expert;
namespace evidential = megan::evidential;

namespace {

std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t c) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> p(c);
  double s = 0.0;
  for (double& x : p) s += (x = e(rng) + 1e-12);
  for (double& x : p) x /= s;
  return p;
}

GateSample random_sample(std::mt19937_64& rng, std::size_t k, std::size_t d) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::vector<double> f(k * d), p, un(k);
  for (double& x : f) x = n(rng);
  for (std::size_t e = 0; e < k; ++e) {
    const auto s = random_simplex(rng, 4);
    p.insert(p.end(), s.begin(), s.end());
    un[e] = u(rng);
  }
  return GateSample{Tensor::matrix(k, d, f), Tensor::matrix(k, 4, p), Tensor::matrix(k, 1, un)};
}

GateSpec small_gate_spec(double dropout = 0.25) {
  GateSpec s;
  s.shared_dim = 6;
  s.head_hidden = 5;
  s.dropout = dropout;
  s.seed = 8;
  return s;
}

}  // namespace

TEST_CASE("fusion examples") {
  const Tensor probs = Tensor::matrix(2, 4, {0.7, 0.1, 0.1, 0.1, 0.7, 0.1, 0.1, 0.1});
  SUBCASE("weighted mean uncertainty") {
    const auto f = fuse_values(std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.5}, 0.0, probs,
                               std::vector<double>{0.2, 0.4});
    CHECK(std::abs(f.uncertainty - 0.3) < 1e-15);
  }
  SUBCASE("eps shift") {
    const auto f = fuse_values(std::vector<double>{0.5, 0.5}, std::vector<double>{0.9, 0.1}, 0.5, probs,
                               std::vector<double>{0.0, 1.0});
    CHECK(std::abs(f.uncertainty - 0.6) < 1e-15);
  }
  SUBCASE("agreement with equal weights returns the shared distribution") {
    for (double w : {0.3, 0.9, -0.4}) {
      const auto f = fuse_values(std::vector<double>{w, w}, std::vector<double>{0.5, 0.5}, 0.0, probs,
                                 std::vector<double>{0.2, 0.2});
      if (w > 0) {
        for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(f.probs[c] - probs[c]) < 1e-15);
      } else {
        // Every entry hits the floor, so the renormalized output is uniform.
        for (double pc : f.probs) CHECK(std::abs(pc - 0.25) < 1e-15);
      }
    }
  }
  SUBCASE("clamped uncertainty") {
    const auto hi = fuse_values(std::vector<double>{1, 1}, std::vector<double>{0.5, 0.5}, 0.9, probs,
                                std::vector<double>{0.8, 0.8});
    CHECK(hi.uncertainty == 1.0);
    const auto lo = fuse_values(std::vector<double>{1, 1}, std::vector<double>{0.5, 0.5}, -0.9, probs,
                                std::vector<double>{0.1, 0.1});
    CHECK(lo.uncertainty == 0.0);
  }
}

TEST_CASE("fusion stays on the simplex for random states") {
  std::mt19937_64 rng(123);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  std::uniform_real_distribution<double> pos(1e-6, 1.0);
  std::uniform_int_distribution<int> kdist(2, 8);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t k = static_cast<std::size_t>(kdist(rng));
    std::vector<double> wp(k), wu(k), u(k), p;
    const bool all_negative = trial % 10 == 0;
    for (std::size_t e = 0; e < k; ++e) {
      wp[e] = all_negative ? -std::abs(sym(rng)) : sym(rng);
      wu[e] = pos(rng);
      u[e] = pos(rng);
      const auto s = random_simplex(rng, 4);
      p.insert(p.end(), s.begin(), s.end());
    }
    const auto f = fuse_values(wp, wu, sym(rng), Tensor::matrix(k, 4, p), u);
    double sum = 0.0;
    for (double pc : f.probs) {
      CHECK(pc > 0.0);
      sum += pc;
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);
    CHECK(f.uncertainty >= 0.0);
    CHECK(f.uncertainty <= 1.0);
  }
}

TEST_CASE("gate_loss examples") {
  const GateLossConfig cfg;
  SUBCASE("correct sample") {
    FusedOutput f;
    f.probs = {0.7, 0.1, 0.1, 0.1};
    f.uncertainty = 0.3;
    f.epsilon = -0.2;
    const double loss = gate_loss(std::span(&f, 1), std::vector<int>{0}, cfg);
    CHECK(std::abs(loss - (-std::log(0.7) + 0.3)) < 1e-14);
  }
  SUBCASE("incorrect sample at full uncertainty") {
    FusedOutput f;
    f.probs = {0.7, 0.1, 0.1, 0.1};
    f.uncertainty = 1.0;
    f.epsilon = 0.4;
    const double loss = gate_loss(std::span(&f, 1), std::vector<int>{2}, cfg);
    CHECK(std::abs(loss - (-std::log(0.1))) < 1e-14);
  }
  SUBCASE("incorrect sample with negative eps") {
    FusedOutput f;
    f.probs = {0.7, 0.1, 0.1, 0.1};
    f.uncertainty = 0.6;
    f.epsilon = -0.1;
    const double loss = gate_loss(std::span(&f, 1), std::vector<int>{1}, cfg);
    CHECK(std::abs(loss - (-std::log(0.1) + 5.0 * 0.4 + 5.0 * 0.1)) < 1e-14);
  }
  SUBCASE("errors") {
    FusedOutput f;
    f.probs = {0.25, 0.25, 0.25, 0.25};
    CHECK_THROWS_AS(gate_loss(std::span(&f, 1), std::vector<int>{0, 1}, cfg), megan::ShapeError);
    GateLossConfig bad;
    bad.beta1 = bad.beta2 = 0.0;
    CHECK_THROWS_AS(gate_loss(std::span(&f, 1), std::vector<int>{0}, bad), megan::ConfigError);
  }
}

TEST_CASE("uncertainty term gradient sign follows correctness") {
  const GateLossConfig cfg;
  Tape tape;
  Var probs = tape.constant(Tensor::matrix(2, 4, {0.7, 0.1, 0.1, 0.1, 0.7, 0.1, 0.1, 0.1}));
  Var u = tape.parameter(Tensor::column({0.4, 0.4}));
  Var eps = tape.constant(Tensor::column({0.0, 0.0}));
  const auto grads = tape.backward(gate_loss(FusedVars{probs, u}, eps, std::vector<int>{0, 3}, cfg));
  CHECK(std::abs(grads[u][0] - cfg.beta1 / 2.0) < 1e-15);
  CHECK(std::abs(grads[u][1] + cfg.beta2 / 2.0) < 1e-15);
}

TEST_CASE("gate_loss gradient through the fusion matches finite differences") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> sym(-0.9, 0.9);
  std::uniform_real_distribution<double> pos(0.1, 0.9);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t k = 3, b = 4;
    std::vector<double> wp(b * k), wu(b * k), eps(b), p, u(b * k);
    for (std::size_t i = 0; i < b * k; ++i) {
      wp[i] = 0.2 + 0.7 * pos(rng);
      wu[i] = pos(rng);
      u[i] = pos(rng) * 0.5;
      const auto s = random_simplex(rng, 4);
      p.insert(p.end(), s.begin(), s.end());
    }
    for (double& e : eps) e = 0.3 * sym(rng);
    std::vector<int> labels(b);
    for (auto& y : labels) y = static_cast<int>(rng() % 4);
    const Tensor probs = Tensor::matrix(b * k, 4, p);
    const Tensor unc = Tensor::column(u);
    auto f = [&](Tape& tape, std::span<const Var> v) {
      const FusedVars fused = fuse(v[0], v[1], v[2], tape.constant(probs), tape.constant(unc), k);
      return gate_loss(fused, v[2], labels, GateLossConfig{});
    };
    const double err = megan::diff::grad_check(f, {Tensor::column(wp), Tensor::column(wu), Tensor::column(eps)});
    CHECK(err < 1e-4);
  }
}

TEST_CASE("gate parameters gradient matches finite differences") {
  std::mt19937_64 rng(5);
  const std::size_t k = 3, d = 4;
  std::vector<GateSample> samples;
  for (int i = 0; i < 6; ++i) samples.push_back(random_sample(rng, k, d));
  std::vector<const GateSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  const std::vector<int> labels = {0, 1, 2, 3, 1, 0};
  for (int trial = 0; trial < 5; ++trial) {
    GateSpec spec = small_gate_spec(0.0);
    spec.seed = 100 + static_cast<std::uint64_t>(trial);
    const GateModel gate(spec, k, d);
    std::vector<std::string> names;
    std::vector<Tensor> tensors;
    // Zero biases put relu inputs exactly on the kink for rows whose input is
    // all zero; move them off it so central differences are meaningful.
    std::uniform_real_distribution<double> off(-0.3, 0.3);
    for (const auto& [name, t] : gate.params()) {
      names.push_back(name);
      std::vector<double> v(t.values().begin(), t.values().end());
      if (name.ends_with(".bias")) {
        for (double& x : v) x += off(rng);
      }
      tensors.emplace_back(t.shape(), v);
    }
    auto loss_at = [&](const std::vector<Tensor>& values) {
      megan::nn::ParameterSet ps;
      for (std::size_t i = 0; i < names.size(); ++i) ps[names[i]] = values[i];
      const GateModel g(spec, k, d, ps);
      Tape t;
      megan::nn::BoundParameters bound(t, g.params());
      const GateGraph graph = gate_graph(t, g, bound, ptrs, expert::Mode::eval, nullptr);
      return gate_loss(graph.fused, graph.eps, labels, GateLossConfig{}).value().item();
    };
    megan::nn::ParameterSet shifted;
    for (std::size_t i = 0; i < names.size(); ++i) shifted[names[i]] = tensors[i];
    const GateModel moved_gate(spec, k, d, shifted);
    Tape tape;
    megan::nn::BoundParameters bound(tape, moved_gate.params());
    const GateGraph graph = gate_graph(tape, moved_gate, bound, ptrs, expert::Mode::eval, nullptr);
    const auto grads = tape.backward(gate_loss(graph.fused, graph.eps, labels, GateLossConfig{}));
    double worst = 0.0;
    const double h = 1e-5;
    for (std::size_t i = 0; i < names.size(); ++i) {
      for (std::size_t j = 0; j < tensors[i].size(); ++j) {
        auto eval_at = [&](double delta) {
          std::vector<Tensor> moved = tensors;
          auto vals = std::vector<double>(moved[i].values().begin(), moved[i].values().end());
          vals[j] += delta;
          moved[i] = Tensor(moved[i].shape(), vals);
          return loss_at(moved);
        };
        const double cd = (eval_at(h) - eval_at(-h)) / (2 * h);
        const double a = grads[bound[names[i]]][j];
        const double rel = std::abs(a - cd) / (std::abs(a) + std::abs(cd) + 1e-12);
        worst = std::max(worst, rel);
      }
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("gate output properties and permutation") {
  std::mt19937_64 rng(31);
  const std::size_t k = 4, d = 5;
  const GateModel gate(small_gate_spec(), k, d);
  const GateSample s = random_sample(rng, k, d);
  const auto f = gate_forward(gate, s);
  CHECK(std::abs(std::accumulate(f.probs.begin(), f.probs.end(), 0.0) - 1.0) < 1e-9);
  CHECK(f.uncertainty >= 0.0);
  CHECK(f.uncertainty <= 1.0);
  for (double w : f.w_u) CHECK((w > 0.0 && w < 1.0));
  for (double w : f.w_p) CHECK((w > -1.0 && w < 1.0));
  CHECK(std::abs(f.epsilon) < 1.0);
  CHECK(gate_forward(gate, s).probs == f.probs);

  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  std::vector<double> fp, pp, up;
  for (std::size_t e : perm) {
    for (std::size_t j = 0; j < d; ++j) fp.push_back(s.features.at(e, j));
    for (std::size_t j = 0; j < 4; ++j) pp.push_back(s.probs.at(e, j));
    up.push_back(s.uncertainty[e]);
  }
  const GateSample permuted{Tensor::matrix(k, d, fp), Tensor::matrix(k, 4, pp), Tensor::matrix(k, 1, up)};
  const auto g = gate_forward(gate, permuted);
  for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(g.probs[c] - f.probs[c]) < 1e-12);
  CHECK(std::abs(g.uncertainty - f.uncertainty) < 1e-12);
  for (std::size_t i = 0; i < k; ++i) CHECK(std::abs(g.w_p[i] - f.w_p[perm[i]]) < 1e-12);

  const GateSample wrong = random_sample(rng, 3, d);
  CHECK_THROWS_AS(gate_forward(gate, wrong), megan::ShapeError);
  CHECK_THROWS_AS(GateModel(small_gate_spec(), 1, d), megan::ConfigError);
}

TEST_CASE("naive fusion") {
  const auto a = evidential::evidential_from_logits(std::vector<double>{1.0, 0.0, -1.0, 2.0});
  const auto b = evidential::evidential_from_logits(std::vector<double>{0.0, 3.0, 0.5, -2.0});
  const auto c = evidential::evidential_from_logits(std::vector<double>{-1.0, 0.2, 0.1, 0.0});
  const std::vector<evidential::EvidentialOutput> same = {a, a};
  const auto s = naive_fuse(same);
  CHECK(s.probs == a.probs);
  CHECK(s.uncertainty == a.uncertainty);

  const std::vector<evidential::EvidentialOutput> abc = {a, b, c};
  const std::vector<evidential::EvidentialOutput> cab = {c, a, b};
  const auto x = naive_fuse(abc);
  const auto y = naive_fuse(cab);
  for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(x.probs[j] - y.probs[j]) < 1e-15);

  auto with_u = [](double u) {
    evidential::EvidentialOutput o = evidential::evidential_from_logits(std::vector<double>(4, 0.0));
    o.uncertainty = u;
    return o;
  };
  const std::vector<evidential::EvidentialOutput> us = {with_u(0.2), with_u(0.4), with_u(0.6)};
  CHECK(std::abs(naive_fuse(us).uncertainty - 0.4) < 1e-15);
  CHECK(naive_fuse(us).epsilon == 0.0);
  CHECK_THROWS_AS(naive_fuse(std::span(us.data(), 1)), megan::ConfigError);
}

TEST_CASE("gate training: lr 0, determinism, freeze contract") {
  megan::simdata::GeneratorConfig gcfg;
  gcfg.n_train = 40;
  gcfg.n_val = gcfg.n_test = gcfg.n_unseen = 4;
  gcfg.frames_min = 3;
  gcfg.frames_max = 6;
  gcfg.feature_dim = 8;
  const auto ds = megan::simdata::generate_dataset(gcfg, {}, {});
  std::vector<expert::ExpertModel> experts;
  for (std::uint64_t s = 1; s <= 3; ++s) {
    expert::ExpertSpec spec;
    spec.name = "e" + std::to_string(s);
    spec.hidden = 8;
    spec.attention = 4;
    spec.seed = s;
    experts.emplace_back(spec, 8, 6);
  }
  std::vector<const expert::ExpertModel*> ptrs;
  for (const auto& e : experts) ptrs.push_back(&e);
  std::vector<std::uint64_t> before;
  for (const auto& e : experts) before.push_back(megan::nn::parameter_hash(e.params()));

  expert::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.weighted_sampling = false;

  GateModel frozen(small_gate_spec(), 3, 6);
  const auto initial = frozen.params();
  expert::TrainConfig zero = cfg;
  zero.learning_rate = 0.0;
  zero.weight_decay = 0.0;
  train_gate(frozen, ptrs, ds.train, zero, {});
  CHECK(frozen.params() == initial);

  GateModel a(small_gate_spec(), 3, 6);
  GateModel b(small_gate_spec(), 3, 6);
  const auto ra = train_gate(a, ptrs, ds.train, cfg, {});
  const auto rb = train_gate(b, ptrs, ds.train, cfg, {});
  CHECK(a.params() == b.params());
  CHECK(ra.epoch_loss == rb.epoch_loss);
  CHECK_FALSE(a.params() == initial);
  for (std::size_t i = 0; i < experts.size(); ++i) {
    CHECK(megan::nn::parameter_hash(experts[i].params()) == before[i]);
  }

  expert::ExpertSpec odd;
  odd.seed = 9;
  const expert::ExpertModel mismatched(odd, 8, 7);
  std::vector<const expert::ExpertModel*> bad = {ptrs[0], &mismatched};
  CHECK_THROWS_AS(collect_gate_inputs(bad, ds.train), megan::ConfigError);
}

TEST_CASE("gate training keeps the epoch with the lowest validation cross-entropy") {
  megan::simdata::GeneratorConfig gcfg;
  gcfg.n_train = 40;
  gcfg.n_val = 20;
  gcfg.n_test = gcfg.n_unseen = 4;
  gcfg.frames_min = 3;
  gcfg.frames_max = 6;
  gcfg.feature_dim = 8;
  const auto ds = megan::simdata::generate_dataset(gcfg, {}, {});
  std::vector<expert::ExpertModel> experts;
  for (std::uint64_t s = 1; s <= 2; ++s) {
    expert::ExpertSpec spec;
    spec.name = "e" + std::to_string(s);
    spec.hidden = 8;
    spec.attention = 4;
    spec.seed = s;
    experts.emplace_back(spec, 8, 6);
  }
  std::vector<const expert::ExpertModel*> ptrs;
  for (const auto& e : experts) ptrs.push_back(&e);
  const auto train = collect_gate_inputs(ptrs, ds.train);
  const auto val = collect_gate_inputs(ptrs, ds.val);
  std::vector<int> ytr, yva;
  for (const auto& b : ds.train) ytr.push_back(b.final_label);
  for (const auto& b : ds.val) yva.push_back(b.final_label);

  expert::TrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 8;
  cfg.learning_rate = 3e-2;
  cfg.weighted_sampling = false;
  const GateValidation validation{val, yva};

  GateModel selected(small_gate_spec(), 2, 6);
  const auto report = train_gate(selected, train, ytr, cfg, {}, &validation);
  REQUIRE(report.val_loss.size() == 6);
  REQUIRE(report.selected_epoch >= 0);
  const auto best = std::min_element(report.val_loss.begin(), report.val_loss.end());
  CHECK(report.selected_epoch == best - report.val_loss.begin());

  // Validation does not touch the training RNG, so replaying the same number
  // of epochs without it lands on the kept parameters.
  GateModel replay(small_gate_spec(), 2, 6);
  expert::TrainConfig shorter = cfg;
  shorter.epochs = report.selected_epoch + 1;
  train_gate(replay, train, ytr, shorter, {});
  CHECK(replay.params() == selected.params());

  const auto fused = gate_predict(selected, val);
  double sum = 0.0;
  for (std::size_t i = 0; i < fused.size(); ++i) sum -= std::log(fused[i].probs[static_cast<std::size_t>(yva[i])]);
  CHECK(sum / static_cast<double>(fused.size()) == doctest::Approx(*best).epsilon(1e-12));

  const GateValidation empty{};
  CHECK_THROWS_AS(train_gate(selected, train, ytr, cfg, {}, &empty), megan::ConfigError);
}
