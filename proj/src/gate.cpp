#include "megan/gate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <limits>
#include <optional>

#include "megan/errors.hpp"
#include "megan/rng.hpp"

namespace megan::gate {

using diff::Tape;
using diff::Tensor;
using diff::Var;

namespace {

constexpr std::uint64_t kInitStream = 21;
constexpr std::uint64_t kTrainStream = 22;

void validate_spec(const GateSpec& spec, std::size_t k, std::size_t d) {
  if (k < 2) throw ConfigError("the gate needs at least two experts");
  if (d == 0 || spec.shared_dim == 0 || spec.head_hidden == 0) throw ConfigError("gate widths must be positive");
  if (!(spec.dropout >= 0.0 && spec.dropout < 1.0)) throw ConfigError("gate dropout must lie in [0, 1)");
}

std::vector<std::size_t> uniform_offsets(std::size_t groups, std::size_t k) {
  std::vector<std::size_t> off(groups + 1);
  for (std::size_t i = 0; i <= groups; ++i) off[i] = i * k;
  return off;
}

Var head(const nn::BoundParameters& p, const std::string& name, Var x) {
  return nn::affine(diff::relu(nn::affine(x, p[name + ".l1.weight"], p[name + ".l1.bias"])),
                    p[name + ".l2.weight"], p[name + ".l2.bias"]);
}

Tensor stack_rows(std::span<const GateSample* const> samples, const Tensor GateSample::*field) {
  const Tensor& first = (*samples.front()).*field;
  const std::size_t cols = first.cols();
  std::vector<double> values;
  std::size_t rows = 0;
  for (const GateSample* s : samples) {
    const Tensor& t = (*s).*field;
    values.insert(values.end(), t.values().begin(), t.values().end());
    rows += t.rows();
  }
  return Tensor::matrix(rows, cols, std::move(values));
}

void check_sample(const GateModel& gate, const GateSample& s) {
  const std::size_t k = gate.num_experts();
  if (s.features.rows() != k || s.probs.rows() != k || s.uncertainty.rows() != k) {
    throw ShapeError("gate expects " + std::to_string(k) + " experts per sample, got " +
                     std::to_string(s.features.rows()));
  }
  if (s.features.cols() != gate.feature_dim()) {
    throw ShapeError("gate expects expert features of dim " + std::to_string(gate.feature_dim()) + ", got " +
                     std::to_string(s.features.cols()));
  }
  if (s.probs.cols() != expert::kNumClasses || s.uncertainty.cols() != 1) {
    throw ShapeError("gate sample has malformed probability or uncertainty block");
  }
}

std::vector<double> row_of(const Tensor& t, std::size_t r) {
  const std::size_t c = t.cols();
  return {t.values().begin() + static_cast<std::ptrdiff_t>(r * c),
          t.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * c)};
}

}  // namespace

void GateLossConfig::validate() const {
  for (double v : {beta1, beta2, gamma1, gamma2}) {
    if (!(v >= 0.0)) throw ConfigError("gate loss weights must be >= 0");
  }
  if (beta1 + beta2 <= 0.0) throw ConfigError("at least one of beta1, beta2 must be positive");
  if (gamma1 + gamma2 <= 0.0) throw ConfigError("at least one of gamma1, gamma2 must be positive");
}

std::map<std::string, std::vector<std::size_t>> gate_parameter_shapes(const GateSpec& spec,
                                                                     std::size_t feature_dim) {
  const std::size_t s = spec.shared_dim;
  const std::size_t h = spec.head_hidden;
  std::map<std::string, std::vector<std::size_t>> shapes = {
      {"shared.l1.weight", {feature_dim, s}},
      {"shared.l1.bias", {1, s}},
      {"shared.l2.weight", {s, s}},
      {"shared.l2.bias", {1, s}},
  };
  for (const char* name : {"prob", "unc", "eps"}) {
    const std::string n = name;
    shapes[n + ".l1.weight"] = {s, h};
    shapes[n + ".l1.bias"] = {1, h};
    shapes[n + ".l2.weight"] = {h, 1};
    shapes[n + ".l2.bias"] = {1, 1};
  }
  return shapes;
}

GateModel::GateModel(GateSpec spec, std::size_t num_experts, std::size_t feature_dim)
    : spec_(spec), k_(num_experts), d_(feature_dim) {
  validate_spec(spec_, k_, d_);
  auto rng = make_rng(spec_.seed, 0, kInitStream);
  const std::size_t s = spec_.shared_dim;
  const std::size_t h = spec_.head_hidden;
  params_["shared.l1.weight"] = nn::xavier_uniform(d_, s, rng);
  params_["shared.l1.bias"] = Tensor::zeros({1, s});
  params_["shared.l2.weight"] = nn::xavier_uniform(s, s, rng);
  params_["shared.l2.bias"] = Tensor::zeros({1, s});
  for (const std::string n : {"prob", "unc", "eps"}) {
    params_[n + ".l1.weight"] = nn::xavier_uniform(s, h, rng);
    params_[n + ".l1.bias"] = Tensor::zeros({1, h});
    params_[n + ".l2.weight"] = nn::xavier_uniform(h, 1, rng);
    params_[n + ".l2.bias"] = Tensor::zeros({1, 1});
  }
  // Start with positive probability weights (tanh(1) ~ 0.76) so the p~ floor
  // is inactive, and with a small eps so the initial u^ is the weighted mean.
  params_["prob.l2.bias"] = Tensor::full({1, 1}, 1.0);
  for (double& w : params_["eps.l2.weight"].mutable_values()) w *= 0.1;
}

GateModel::GateModel(GateSpec spec, std::size_t num_experts, std::size_t feature_dim, nn::ParameterSet params)
    : spec_(spec), k_(num_experts), d_(feature_dim), params_(std::move(params)) {
  validate_spec(spec_, k_, d_);
  const auto shapes = gate_parameter_shapes(spec_, d_);
  if (shapes.size() != params_.size()) throw ShapeError("gate: parameter count mismatch");
  for (const auto& [name, shape] : shapes) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ShapeError("gate: missing parameter " + name);
    if (it->second.shape() != shape) {
      throw ShapeError("gate: parameter " + name + " has shape " + diff::shape_string(it->second.shape()) +
                       ", expected " + diff::shape_string(shape));
    }
  }
}

std::vector<GateSample> collect_gate_inputs(std::span<const expert::ExpertModel* const> experts,
                                            std::span<const simdata::FeatureBag> bags) {
  if (experts.size() < 2) throw ConfigError("the gate needs at least two experts");
  const std::size_t d = experts.front()->feature_dim();
  for (const auto* e : experts) {
    if (e->feature_dim() != d) {
      throw ConfigError("expert '" + e->spec().name + "' has feature dim " + std::to_string(e->feature_dim()) +
                        ", expected " + std::to_string(d));
    }
  }
  const std::size_t k = experts.size();
  const std::size_t c = expert::kNumClasses;
  std::vector<std::vector<double>> feats(bags.size(), std::vector<double>(k * d));
  std::vector<std::vector<double>> probs(bags.size(), std::vector<double>(k * c));
  std::vector<std::vector<double>> unc(bags.size(), std::vector<double>(k));
  for (std::size_t e = 0; e < k; ++e) {
    const auto outs = expert::predict(*experts[e], bags);
    for (std::size_t i = 0; i < bags.size(); ++i) {
      std::copy(outs[i].features.begin(), outs[i].features.end(), feats[i].begin() + static_cast<std::ptrdiff_t>(e * d));
      std::copy(outs[i].probs.begin(), outs[i].probs.end(), probs[i].begin() + static_cast<std::ptrdiff_t>(e * c));
      unc[i][e] = outs[i].uncertainty;
    }
  }
  std::vector<GateSample> out;
  out.reserve(bags.size());
  for (std::size_t i = 0; i < bags.size(); ++i) {
    out.push_back(GateSample{Tensor::matrix(k, d, std::move(feats[i])), Tensor::matrix(k, c, std::move(probs[i])),
                             Tensor::matrix(k, 1, std::move(unc[i]))});
  }
  return out;
}

FusedVars fuse(Var wp, Var wu, Var eps, Var probs, Var unc, std::size_t num_experts) {
  const std::size_t n = probs.value().rows();
  if (num_experts == 0 || n % num_experts != 0) throw ShapeError("fuse: rows not a multiple of K");
  const std::size_t b = n / num_experts;
  if (wp.value().shape() != std::vector<std::size_t>{n, 1} || wu.value().shape() != wp.value().shape() ||
      unc.value().shape() != wp.value().shape() || eps.value().shape() != std::vector<std::size_t>{b, 1}) {
    throw ShapeError("fuse: weight, uncertainty or eps block has the wrong shape");
  }
  const auto offsets = uniform_offsets(b, num_experts);
  Tape& tape = probs.tape();
  Var raw = diff::segment_pool(wp, probs, offsets) * (1.0 / static_cast<double>(num_experts));
  Var floored = diff::clamp(raw, kProbFloor, std::numeric_limits<double>::max());
  Var p_hat = floored / diff::sum_rows(floored);
  Var num = diff::segment_pool(wu, unc, offsets);
  Var den = diff::segment_pool(wu, tape.constant(Tensor::full({n, 1}, 1.0)), offsets);
  Var u_hat = diff::clamp(num / den + eps, 0.0, 1.0);
  return FusedVars{p_hat, u_hat};
}

FusedOutput fuse_values(std::span<const double> wp, std::span<const double> wu, double eps, const Tensor& probs,
                        std::span<const double> unc) {
  const std::size_t k = probs.rows();
  if (wp.size() != k || wu.size() != k || unc.size() != k) throw ShapeError("fuse_values: K mismatch");
  Tape tape;
  const FusedVars f = fuse(tape.constant(Tensor::column({wp.begin(), wp.end()})),
                           tape.constant(Tensor::column({wu.begin(), wu.end()})),
                           tape.constant(Tensor::column({eps})), tape.constant(probs),
                           tape.constant(Tensor::column({unc.begin(), unc.end()})), k);
  FusedOutput out;
  const auto pv = f.probs.value().values();
  out.probs.assign(pv.begin(), pv.end());
  out.uncertainty = f.uncertainty.value().item();
  out.w_p.assign(wp.begin(), wp.end());
  out.w_u.assign(wu.begin(), wu.end());
  out.epsilon = eps;
  return out;
}

GateGraph gate_graph(Tape& tape, const GateModel& gate, const nn::BoundParameters& p,
                     std::span<const GateSample* const> samples, expert::Mode mode, std::mt19937_64* rng) {
  if (samples.empty()) throw EmptyInput("gate forward over an empty batch");
  for (const GateSample* s : samples) check_sample(gate, *s);
  const bool train = mode == expert::Mode::train && gate.spec().dropout > 0.0;
  if (train && rng == nullptr) throw StateError("train-mode gate forward needs an rng");
  const std::size_t k = gate.num_experts();
  const std::size_t b = samples.size();

  Var feats = tape.constant(stack_rows(samples, &GateSample::features));
  Var probs = tape.constant(stack_rows(samples, &GateSample::probs));
  Var unc = tape.constant(stack_rows(samples, &GateSample::uncertainty));

  Var shared = diff::relu(nn::affine(feats, p["shared.l1.weight"], p["shared.l1.bias"]));
  shared = diff::relu(nn::affine(shared, p["shared.l2.weight"], p["shared.l2.bias"]));
  if (train) shared = diff::dropout(shared, gate.spec().dropout, *rng);

  GateGraph g;
  g.wp = diff::tanh(head(p, "prob", shared));
  g.wu = diff::clamp(diff::sigmoid(head(p, "unc", shared)), kWeightFloor, 1.0);
  Var mean_weights = tape.constant(Tensor::full({b * k, 1}, 1.0 / static_cast<double>(k)));
  Var mean_shared = diff::segment_pool(mean_weights, shared, uniform_offsets(b, k));
  g.eps = diff::tanh(head(p, "eps", mean_shared));
  g.fused = fuse(g.wp, g.wu, g.eps, probs, unc, k);
  return g;
}

FusedOutput gate_forward(const GateModel& gate, const GateSample& sample) {
  return gate_predict(gate, std::span(&sample, 1)).front();
}

std::vector<FusedOutput> gate_predict(const GateModel& gate, std::span<const GateSample> samples,
                                      std::size_t chunk) {
  std::vector<FusedOutput> out;
  out.reserve(samples.size());
  chunk = std::max<std::size_t>(chunk, 1);
  const std::size_t k = gate.num_experts();
  std::vector<const GateSample*> ptrs;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::size_t end = std::min(samples.size(), start + chunk);
    ptrs.clear();
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&samples[i]);
    Tape tape;
    nn::BoundParameters bound(tape, gate.params());
    const GateGraph g = gate_graph(tape, gate, bound, ptrs, expert::Mode::eval, nullptr);
    for (std::size_t i = 0; i < ptrs.size(); ++i) {
      FusedOutput f;
      f.probs = row_of(g.fused.probs.value(), i);
      f.uncertainty = g.fused.uncertainty.value()[i];
      f.epsilon = g.eps.value()[i];
      const auto wp = g.wp.value().values();
      const auto wu = g.wu.value().values();
      f.w_p.assign(wp.begin() + static_cast<std::ptrdiff_t>(i * k), wp.begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
      f.w_u.assign(wu.begin() + static_cast<std::ptrdiff_t>(i * k), wu.begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
      out.push_back(std::move(f));
    }
  }
  return out;
}

std::vector<double> correctness(const Tensor& fused_probs, std::span<const int> labels) {
  if (fused_probs.rows() != labels.size()) throw ShapeError("correctness: label count mismatch");
  const std::size_t c = fused_probs.cols();
  std::vector<double> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = fused_probs.values().subspan(i * c, c);
    const auto arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    out[i] = arg == labels[i] ? 1.0 : 0.0;
  }
  return out;
}

Var gate_loss(const FusedVars& fused, Var eps, std::span<const int> labels, const GateLossConfig& cfg) {
  cfg.validate();
  const std::size_t b = labels.size();
  if (b == 0) throw EmptyInput("gate_loss over an empty batch");
  if (fused.probs.value().rows() != b || fused.uncertainty.value().rows() != b || eps.value().rows() != b) {
    throw ShapeError("gate_loss: batch size mismatch");
  }
  Tape& tape = fused.probs.tape();
  const auto c_values = correctness(fused.probs.value(), labels);
  Var c = tape.constant(Tensor::column(c_values));
  Var not_c = rsub(1.0, c);
  Var y = tape.constant(evidential::one_hot(labels, fused.probs.value().cols()));

  Var cls = -diff::sum(y * diff::log(fused.probs));
  Var unc = cfg.beta1 * diff::sum(c * fused.uncertainty) + cfg.beta2 * diff::sum(not_c * rsub(1.0, fused.uncertainty));
  Var eps_term = cfg.gamma1 * diff::sum(c * diff::relu(eps)) + cfg.gamma2 * diff::sum(not_c * diff::relu(-eps));
  return (cls + unc + eps_term) * (1.0 / static_cast<double>(b));
}

double gate_loss(std::span<const FusedOutput> fused, std::span<const int> labels, const GateLossConfig& cfg) {
  if (fused.empty()) throw EmptyInput("gate_loss over an empty batch");
  if (fused.size() != labels.size()) throw ShapeError("gate_loss: batch size mismatch");
  const std::size_t c = fused.front().probs.size();
  std::vector<double> probs, unc, eps;
  for (const auto& f : fused) {
    if (f.probs.size() != c) throw ShapeError("gate_loss: class count mismatch");
    probs.insert(probs.end(), f.probs.begin(), f.probs.end());
    unc.push_back(f.uncertainty);
    eps.push_back(f.epsilon);
  }
  Tape tape;
  const FusedVars v{tape.constant(Tensor::matrix(fused.size(), c, probs)), tape.constant(Tensor::column(unc))};
  return gate_loss(v, tape.constant(Tensor::column(eps)), labels, cfg).value().item();
}

namespace {

double validation_ce(const GateModel& gate, const GateValidation& val) {
  const auto fused = gate_predict(gate, val.samples);
  double ce = 0.0;
  for (std::size_t i = 0; i < fused.size(); ++i) ce -= std::log(fused[i].probs[static_cast<std::size_t>(val.labels[i])]);
  return ce / static_cast<double>(fused.size());
}

}  // namespace

expert::TrainReport train_gate(GateModel& gate, std::span<const GateSample> samples, std::span<const int> labels,
                               const expert::TrainConfig& cfg, const GateLossConfig& loss_cfg,
                               const GateValidation* validation) {
  cfg.validate();
  loss_cfg.validate();
  if (samples.empty()) throw ConfigError("train_gate: empty dataset");
  if (samples.size() != labels.size()) throw ShapeError("train_gate: label count mismatch");
  for (const auto& s : samples) check_sample(gate, s);
  if (validation) {
    if (validation->samples.empty()) throw ConfigError("train_gate: empty validation set");
    if (validation->samples.size() != validation->labels.size()) {
      throw ShapeError("train_gate: validation label count mismatch");
    }
    for (const auto& s : validation->samples) check_sample(gate, s);
  }
  std::optional<nn::ParameterSet> best;
  double best_loss = std::numeric_limits<double>::infinity();

  auto rng = make_rng(gate.spec().seed, 0, kTrainStream);
  std::optional<nn::WeightedSampler> sampler;
  if (cfg.weighted_sampling) sampler.emplace(labels);
  nn::AdamW optimizer({cfg.learning_rate, cfg.weight_decay});

  expert::TrainReport report;
  std::vector<std::size_t> order(samples.size());
  std::vector<const GateSample*> batch;
  std::vector<int> batch_labels;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (sampler) {
      for (auto& i : order) i = (*sampler)(rng);
    } else {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
    }
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      batch_labels.clear();
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&samples[order[i]]);
        batch_labels.push_back(labels[order[i]]);
      }
      Tape tape;
      nn::BoundParameters bound(tape, gate.params());
      const GateGraph g = gate_graph(tape, gate, bound, batch, expert::Mode::train, &rng);
      Var loss = gate_loss(g.fused, g.eps, batch_labels, loss_cfg);
      loss_sum += loss.value().item();
      ++batches;
      optimizer.step(gate.mutable_params(), bound, tape.backward(loss));
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1)));
    if (validation) {
      const double v = validation_ce(gate, *validation);
      report.val_loss.push_back(v);
      if (v < best_loss) {
        best_loss = v;
        best = gate.params();
        report.selected_epoch = epoch;
      }
    }
  }
  if (best) gate.mutable_params() = *best;
  report.steps = optimizer.steps();
  return report;
}

expert::TrainReport train_gate(GateModel& gate, std::span<const expert::ExpertModel* const> experts,
                               std::span<const simdata::FeatureBag> bags, const expert::TrainConfig& cfg,
                               const GateLossConfig& loss_cfg) {
  std::vector<std::uint64_t> before;
  for (const auto* e : experts) before.push_back(nn::parameter_hash(e->params()));
  const auto samples = collect_gate_inputs(experts, bags);
  std::vector<int> labels;
  labels.reserve(bags.size());
  for (const auto& b : bags) labels.push_back(b.final_label);
  auto report = train_gate(gate, samples, labels, cfg, loss_cfg);
  for (std::size_t i = 0; i < experts.size(); ++i) {
    if (nn::parameter_hash(experts[i]->params()) != before[i]) {
      throw StateError("expert '" + experts[i]->spec().name + "' changed during gate training");
    }
  }
  return report;
}

namespace {

// Sums in sorted order so the result does not depend on expert order.
double order_free_mean(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

}  // namespace

FusedOutput naive_fuse(std::span<const evidential::EvidentialOutput> outputs) {
  if (outputs.size() < 2) throw ConfigError("naive fusion needs at least two experts");
  const std::size_t c = outputs.front().classes();
  for (const auto& o : outputs) {
    if (o.classes() != c) throw ShapeError("naive fusion: class count mismatch");
  }
  FusedOutput out;
  std::vector<double> column(outputs.size());
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t e = 0; e < outputs.size(); ++e) column[e] = outputs[e].probs[j];
    out.probs.push_back(order_free_mean(column));
  }
  for (std::size_t e = 0; e < outputs.size(); ++e) column[e] = outputs[e].uncertainty;
  out.uncertainty = order_free_mean(column);
  out.w_p.assign(outputs.size(), 1.0);
  out.w_u.assign(outputs.size(), 1.0);
  return out;
}

FusedOutput naive_fuse(const GateSample& sample) {
  const std::size_t k = sample.probs.rows();
  const std::size_t c = sample.probs.cols();
  if (k < 2) throw ConfigError("naive fusion needs at least two experts");
  FusedOutput out;
  std::vector<double> column(k);
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t e = 0; e < k; ++e) column[e] = sample.probs.at(e, j);
    out.probs.push_back(order_free_mean(column));
  }
  for (std::size_t e = 0; e < k; ++e) column[e] = sample.uncertainty[e];
  out.uncertainty = order_free_mean(column);
  out.w_p.assign(k, 1.0);
  out.w_u.assign(k, 1.0);
  return out;
}

}  // namespace megan::gate
