#include "megan/expert.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "megan/errors.hpp"
#include "megan/rng.hpp"

namespace megan::expert {

using diff::Tape;
using diff::Tensor;
using diff::Var;

namespace {

constexpr std::uint64_t kInitStream = 11;
constexpr std::uint64_t kTrainStream = 12;
constexpr std::uint64_t kMcDropoutStream = 13;

void validate_spec(const ExpertSpec& spec, std::size_t input_dim, std::size_t feature_dim) {
  if (spec.hidden == 0 || spec.attention == 0 || input_dim == 0 || feature_dim == 0) {
    throw ConfigError("expert '" + spec.name + "': widths must be positive");
  }
  if (!(spec.dropout >= 0.0 && spec.dropout < 1.0)) {
    throw ConfigError("expert '" + spec.name + "': dropout must lie in [0, 1)");
  }
}

Tensor stack_frames(std::span<const FeatureBag* const> bags, std::size_t dim,
                    std::vector<std::size_t>& offsets) {
  offsets.assign(1, 0);
  std::size_t rows = 0;
  for (const FeatureBag* b : bags) {
    if (b->num_frames() == 0) throw ShapeError("bag " + std::to_string(b->bag_id) + " has no frames");
    if (b->dim() != dim) {
      throw ShapeError("bag " + std::to_string(b->bag_id) + " has frame dim " +
                       std::to_string(b->dim()) + ", model expects " + std::to_string(dim));
    }
    rows += b->num_frames();
    offsets.push_back(rows);
  }
  std::vector<double> values;
  values.reserve(rows * dim);
  for (const FeatureBag* b : bags) {
    values.insert(values.end(), b->frames.values().begin(), b->frames.values().end());
  }
  return Tensor::matrix(rows, dim, std::move(values));
}

std::vector<double> row_of(const Tensor& t, std::size_t r) {
  const std::size_t c = t.cols();
  return std::vector<double>(t.values().begin() + static_cast<std::ptrdiff_t>(r * c),
                             t.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
}

ExpertOutput make_output(const ExpertModel& model, const BatchGraph& g, std::size_t b) {
  ExpertOutput out;
  out.logits = row_of(g.logits.value(), b);
  out.features = row_of(g.features.value(), b);
  const auto& att = g.attention.value().values();
  out.attention.assign(att.begin() + static_cast<std::ptrdiff_t>(g.offsets[b]),
                       att.begin() + static_cast<std::ptrdiff_t>(g.offsets[b + 1]));
  if (model.spec().head == HeadKind::evidential) {
    out.evidential = evidential::evidential_from_logits(out.logits);
    out.probs = out.evidential->probs;
    out.uncertainty = out.evidential->uncertainty;
  } else {
    const double m = *std::max_element(out.logits.begin(), out.logits.end());
    double z = 0.0;
    out.probs.resize(out.logits.size());
    for (std::size_t c = 0; c < out.logits.size(); ++c) {
      out.probs[c] = std::exp(out.logits[c] - m);
      z += out.probs[c];
    }
    for (double& p : out.probs) p /= z;
    out.uncertainty = normalized_entropy(out.probs);
  }
  return out;
}

Var pooled_attention_scores(Var hidden, Var v, const Var* u, Var w) {
  Var a = diff::tanh(diff::matmul(hidden, v));
  if (u != nullptr) a = a * diff::sigmoid(diff::matmul(hidden, *u));
  return diff::matmul(a, w);
}

}  // namespace

std::string to_string(HeadKind h) { return h == HeadKind::evidential ? "evidential" : "softmax"; }

HeadKind parse_head_kind(const std::string& s) {
  if (s == "evidential") return HeadKind::evidential;
  if (s == "softmax") return HeadKind::softmax;
  throw ConfigError("unknown head kind '" + s + "'");
}

std::map<std::string, std::vector<std::size_t>> expert_parameter_shapes(const ExpertSpec& spec,
                                                                         std::size_t input_dim,
                                                                         std::size_t feature_dim) {
  std::map<std::string, std::vector<std::size_t>> shapes = {
      {"encoder.weight", {input_dim, spec.hidden}},
      {"encoder.bias", {1, spec.hidden}},
      {"attention.V", {spec.hidden, spec.attention}},
      {"attention.w", {spec.attention, 1}},
      {"penult.weight", {spec.hidden, feature_dim}},
      {"penult.bias", {1, feature_dim}},
      {"head.weight", {feature_dim, kNumClasses}},
      {"head.bias", {1, kNumClasses}},
  };
  if (spec.attention_kind == AttentionKind::gated) shapes["attention.U"] = {spec.hidden, spec.attention};
  return shapes;
}

ExpertModel::ExpertModel(ExpertSpec spec, std::size_t input_dim, std::size_t feature_dim)
    : spec_(std::move(spec)), input_dim_(input_dim), feature_dim_(feature_dim) {
  validate_spec(spec_, input_dim_, feature_dim_);
  auto rng = make_rng(spec_.seed, 0, kInitStream);
  // Fixed initialization order keeps parameters a pure function of the seed.
  params_["encoder.weight"] = nn::xavier_uniform(input_dim_, spec_.hidden, rng);
  params_["encoder.bias"] = Tensor::zeros({1, spec_.hidden});
  params_["attention.V"] = nn::xavier_uniform(spec_.hidden, spec_.attention, rng);
  if (spec_.attention_kind == AttentionKind::gated) {
    params_["attention.U"] = nn::xavier_uniform(spec_.hidden, spec_.attention, rng);
  }
  params_["attention.w"] = nn::xavier_uniform(spec_.attention, 1, rng);
  params_["penult.weight"] = nn::xavier_uniform(spec_.hidden, feature_dim_, rng);
  params_["penult.bias"] = Tensor::zeros({1, feature_dim_});
  params_["head.weight"] = nn::xavier_uniform(feature_dim_, kNumClasses, rng);
  params_["head.bias"] = Tensor::zeros({1, kNumClasses});
}

ExpertModel::ExpertModel(ExpertSpec spec, std::size_t input_dim, std::size_t feature_dim,
                         nn::ParameterSet params)
    : spec_(std::move(spec)), input_dim_(input_dim), feature_dim_(feature_dim), params_(std::move(params)) {
  validate_spec(spec_, input_dim_, feature_dim_);
  const auto shapes = expert_parameter_shapes(spec_, input_dim_, feature_dim_);
  if (shapes.size() != params_.size()) throw ShapeError("expert '" + spec_.name + "': parameter count mismatch");
  for (const auto& [name, shape] : shapes) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ShapeError("expert '" + spec_.name + "': missing parameter " + name);
    if (it->second.shape() != shape) {
      throw ShapeError("expert '" + spec_.name + "': parameter " + name + " has shape " +
                       diff::shape_string(it->second.shape()) + ", expected " + diff::shape_string(shape));
    }
  }
}

BatchGraph forward_graph(Tape& tape, const ExpertModel& model, const nn::BoundParameters& p,
                         std::span<const FeatureBag* const> bags, Mode mode, std::mt19937_64* rng) {
  if (bags.empty()) throw EmptyInput("forward over an empty batch");
  const bool train = mode == Mode::train && model.spec().dropout > 0.0;
  if (train && rng == nullptr) throw StateError("train-mode forward needs an rng");

  BatchGraph g;
  Var x = tape.constant(stack_frames(bags, model.input_dim(), g.offsets));
  Var hidden = diff::relu(nn::affine(x, p["encoder.weight"], p["encoder.bias"]));
  if (train) hidden = diff::dropout(hidden, model.spec().dropout, *rng);

  const bool gated = model.spec().attention_kind == AttentionKind::gated;
  Var u = gated ? p["attention.U"] : Var{};
  Var scores = pooled_attention_scores(hidden, p["attention.V"], gated ? &u : nullptr, p["attention.w"]);
  g.attention = diff::segment_softmax(scores, g.offsets);
  Var pooled = diff::segment_pool(g.attention, hidden, g.offsets);

  g.features = diff::relu(nn::affine(pooled, p["penult.weight"], p["penult.bias"]));
  Var head_in = train ? diff::dropout(g.features, model.spec().dropout, *rng) : g.features;
  g.logits = nn::affine(head_in, p["head.weight"], p["head.bias"]);
  return g;
}

ExpertOutput forward(const ExpertModel& model, const FeatureBag& bag, Mode mode, std::mt19937_64* rng) {
  Tape tape;
  nn::BoundParameters bound(tape, model.params());
  const FeatureBag* ptr = &bag;
  const BatchGraph g = forward_graph(tape, model, bound, std::span(&ptr, 1), mode, rng);
  return make_output(model, g, 0);
}

std::vector<ExpertOutput> predict(const ExpertModel& model, std::span<const FeatureBag> bags,
                                  std::size_t chunk) {
  std::vector<ExpertOutput> out;
  out.reserve(bags.size());
  chunk = std::max<std::size_t>(chunk, 1);
  std::vector<const FeatureBag*> ptrs;
  for (std::size_t start = 0; start < bags.size(); start += chunk) {
    const std::size_t end = std::min(bags.size(), start + chunk);
    ptrs.clear();
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&bags[i]);
    Tape tape;
    nn::BoundParameters bound(tape, model.params());
    const BatchGraph g = forward_graph(tape, model, bound, ptrs, Mode::eval, nullptr);
    for (std::size_t b = 0; b < ptrs.size(); ++b) out.push_back(make_output(model, g, b));
  }
  return out;
}

PooledBag abmil_pool(const Tensor& hidden, const Tensor& v, const Tensor* u, const Tensor& w) {
  if (hidden.rows() == 0) throw EmptyInput("abmil_pool over an empty bag");
  Tape tape;
  Var h = tape.constant(hidden);
  Var vv = tape.constant(v);
  Var uu = u ? tape.constant(*u) : Var{};
  Var scores = pooled_attention_scores(h, vv, u ? &uu : nullptr, tape.constant(w));
  const std::vector<std::size_t> offsets = {0, hidden.rows()};
  Var weights = diff::segment_softmax(scores, offsets);
  Var pooled = diff::segment_pool(weights, h, offsets);
  const auto wv = weights.value().values();
  const auto pv = pooled.value().values();
  return PooledBag{std::vector<double>(pv.begin(), pv.end()), std::vector<double>(wv.begin(), wv.end())};
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
}

TrainReport train_expert(ExpertModel& model, std::span<const FeatureBag> dataset, const TrainConfig& cfg,
                         const evidential::EdlLossConfig& edl_cfg) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("train_expert: empty dataset");
  const LabelSource source = model.spec().label_source;
  std::vector<int> labels;
  labels.reserve(dataset.size());
  for (const FeatureBag& b : dataset) {
    const auto y = b.label(source);
    if (!y) {
      throw ConfigError("bag " + std::to_string(b.bag_id) + " has no " + simdata::to_string(source) +
                        " label required by expert '" + model.spec().name + "'");
    }
    labels.push_back(*y);
  }

  auto rng = make_rng(model.spec().seed, 0, kTrainStream);
  std::optional<nn::WeightedSampler> sampler;
  if (cfg.weighted_sampling) sampler.emplace(labels);
  nn::AdamW optimizer({cfg.learning_rate, cfg.weight_decay});

  TrainReport report;
  std::vector<std::size_t> order(dataset.size());
  std::vector<const FeatureBag*> batch;
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
        batch.push_back(&dataset[order[i]]);
        batch_labels.push_back(labels[order[i]]);
      }
      Tape tape;
      nn::BoundParameters bound(tape, model.params());
      const BatchGraph g = forward_graph(tape, model, bound, batch, Mode::train, &rng);
      Var loss;
      if (model.spec().head == HeadKind::evidential) {
        loss = evidential::edl_loss(evidential::dirichlet_from_logits(g.logits).alpha, batch_labels, epoch,
                                    edl_cfg);
      } else {
        Var y = tape.constant(evidential::one_hot(batch_labels, kNumClasses));
        loss = -diff::sum(y * diff::log_softmax_rows(g.logits)) * (1.0 / static_cast<double>(batch.size()));
      }
      loss_sum += loss.value().item();
      ++batches;
      const diff::Gradients grads = tape.backward(loss);
      optimizer.step(model.mutable_params(), bound, grads);
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1)));
  }
  report.steps = optimizer.steps();
  return report;
}

double normalized_entropy(std::span<const double> probs) {
  if (probs.size() < 2) return 0.0;
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::clamp(h / std::log(static_cast<double>(probs.size())), 0.0, 1.0);
}

Prediction average_predictions(std::span<const std::vector<double>> member_probs) {
  if (member_probs.size() < 2) throw ConfigError("an ensemble needs at least two members");
  const std::size_t classes = member_probs.front().size();
  Prediction out;
  out.probs.assign(classes, 0.0);
  for (const auto& p : member_probs) {
    if (p.size() != classes) throw ShapeError("ensemble members disagree on the class count");
    for (std::size_t c = 0; c < classes; ++c) out.probs[c] += p[c];
  }
  for (double& p : out.probs) p /= static_cast<double>(member_probs.size());
  out.uncertainty = normalized_entropy(out.probs);
  return out;
}

Prediction mc_dropout_predict(const ExpertModel& model, const FeatureBag& bag, int passes) {
  if (passes < 1) throw ConfigError("mc_dropout_predict needs passes >= 1");
  auto rng = make_rng(model.spec().seed, bag.bag_id, kMcDropoutStream);
  // All passes share one tape: the bag is replicated and every replica
  // draws its own dropout masks.
  std::vector<const FeatureBag*> replicas(static_cast<std::size_t>(passes), &bag);
  Tape tape;
  nn::BoundParameters bound(tape, model.params());
  const BatchGraph g = forward_graph(tape, model, bound, replicas, Mode::train, &rng);
  Prediction out;
  out.probs.assign(kNumClasses, 0.0);
  for (std::size_t r = 0; r < replicas.size(); ++r) {
    const ExpertOutput o = make_output(model, g, r);
    for (std::size_t c = 0; c < kNumClasses; ++c) out.probs[c] += o.probs[c];
  }
  for (double& p : out.probs) p /= static_cast<double>(passes);
  out.uncertainty = normalized_entropy(out.probs);
  return out;
}

Prediction ensemble_predict(std::span<const ExpertModel* const> models, const FeatureBag& bag) {
  if (models.size() < 2) throw ConfigError("an ensemble needs at least two members");
  std::vector<std::vector<double>> member_probs;
  for (const ExpertModel* m : models) member_probs.push_back(forward(*m, bag, Mode::eval).probs);
  return average_predictions(member_probs);
}

}  // namespace megan::expert
