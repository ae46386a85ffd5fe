#pragma once

// Per-expert video classifier: a frame encoder, attention-based MIL pooling
// over frames, a dense penultimate layer whose activation is exposed to the
// gate, and either an evidential head (softplus evidence) or a softmax head.
// Also the MC Dropout and deep-ensemble inference baselines.

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "megan/diffcore.hpp"
#include "megan/evidential.hpp"
#include "megan/nn.hpp"
#include "megan/simdata.hpp"

namespace megan::expert {

using simdata::FeatureBag;
using simdata::LabelSource;

inline constexpr std::size_t kNumClasses = 4;

enum class HeadKind { evidential, softmax };
enum class AttentionKind { gated, plain };
enum class Mode { train, eval };

std::string to_string(HeadKind h);
HeadKind parse_head_kind(const std::string& s);

struct ExpertSpec {
  std::string name = "expert";
  LabelSource label_source = LabelSource::central;
  HeadKind head = HeadKind::evidential;
  AttentionKind attention_kind = AttentionKind::gated;
  std::size_t hidden = 64;     // encoder width h
  std::size_t attention = 32;  // attention width a
  double dropout = 0.1;
  std::uint64_t seed = 1;
};

class ExpertModel {
 public:
  /// Initializes parameters from spec.seed. ConfigError on zero widths or a
  /// dropout rate outside [0, 1).
  ExpertModel(ExpertSpec spec, std::size_t input_dim, std::size_t feature_dim);
  /// Adopts existing parameters (checkpoint load); ShapeError if they do not
  /// match the architecture.
  ExpertModel(ExpertSpec spec, std::size_t input_dim, std::size_t feature_dim,
              nn::ParameterSet params);

  const ExpertSpec& spec() const noexcept { return spec_; }
  std::size_t input_dim() const noexcept { return input_dim_; }
  std::size_t feature_dim() const noexcept { return feature_dim_; }
  const nn::ParameterSet& params() const noexcept { return params_; }
  nn::ParameterSet& mutable_params() noexcept { return params_; }

 private:
  ExpertSpec spec_;
  std::size_t input_dim_;
  std::size_t feature_dim_;
  nn::ParameterSet params_;
};

/// Expected parameter shapes for an architecture.
std::map<std::string, std::vector<std::size_t>> expert_parameter_shapes(const ExpertSpec& spec,
                                                                         std::size_t input_dim,
                                                                         std::size_t feature_dim);

struct ExpertOutput {
  std::vector<double> logits;
  /// Softmax probabilities, or the Dirichlet mean alpha / S.
  std::vector<double> probs;
  /// u = C / S for evidential heads, normalized entropy for softmax heads.
  double uncertainty = 1.0;
  /// Penultimate activation g (feature_dim values).
  std::vector<double> features;
  /// Attention weights over the bag's frames.
  std::vector<double> attention;
  std::optional<evidential::EvidentialOutput> evidential;
};

/// Differentiable forward pass over a minibatch of bags.
struct BatchGraph {
  diff::Var logits;     // B x C
  diff::Var features;   // B x d
  diff::Var attention;  // n x 1
  std::vector<std::size_t> offsets;
};
BatchGraph forward_graph(diff::Tape& tape, const ExpertModel& model, const nn::BoundParameters& bound,
                         std::span<const FeatureBag* const> bags, Mode mode, std::mt19937_64* rng);

/// Single-bag forward. Train mode needs `rng` for dropout masks.
ExpertOutput forward(const ExpertModel& model, const FeatureBag& bag, Mode mode,
                     std::mt19937_64* rng = nullptr);

/// Eval-mode outputs for many bags, processed in chunks.
std::vector<ExpertOutput> predict(const ExpertModel& model, std::span<const FeatureBag> bags,
                                  std::size_t chunk = 64);

struct PooledBag {
  std::vector<double> embedding;
  std::vector<double> weights;
};
/// ABMIL pooling of an (N x h) hidden matrix with attention parameters
/// V (h x a), U (h x a, gated only) and w (a x 1).
PooledBag abmil_pool(const diff::Tensor& hidden, const diff::Tensor& v, const diff::Tensor* u,
                     const diff::Tensor& w);

struct TrainConfig {
  int epochs = 20;
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  std::size_t batch_size = 16;
  bool weighted_sampling = true;

  void validate() const;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
  /// Per-epoch held-out loss and the epoch whose parameters were kept, when
  /// training selected on a validation set. -1 otherwise.
  std::vector<double> val_loss;
  int selected_epoch = -1;
};

/// Minibatch AdamW training on model.spec().label_source. Evidential heads
/// use the annealed evidential loss, softmax heads cross-entropy.
/// ConfigError if a bag lacks the required label or the dataset is empty.
TrainReport train_expert(ExpertModel& model, std::span<const FeatureBag> dataset,
                         const TrainConfig& cfg, const evidential::EdlLossConfig& edl_cfg);

struct Prediction {
  std::vector<double> probs;
  double uncertainty = 1.0;
};

/// Entropy of p divided by ln C, in [0, 1].
double normalized_entropy(std::span<const double> probs);

/// Mean softmax over `passes` train-mode forwards; uncertainty is the
/// normalized entropy of the mean. Masks are seeded from (model seed, bag id).
Prediction mc_dropout_predict(const ExpertModel& model, const FeatureBag& bag, int passes);

/// Uniform average of member probabilities. ConfigError for fewer than two
/// members.
Prediction ensemble_predict(std::span<const ExpertModel* const> models, const FeatureBag& bag);
Prediction average_predictions(std::span<const std::vector<double>> member_probs);

}  // namespace megan::expert
