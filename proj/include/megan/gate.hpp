#pragma once

// Gating network over K frozen evidential experts.
//
// Each expert's penultimate feature g_k goes through a shared MLP; small
// heads turn the shared features into a probability weight w_p (tanh), an
// uncertainty weight w_u (sigmoid) and, from the expert-mean shared feature,
// one additive uncertainty correction eps (tanh) per sample. Fusion:
//   p~ = (1/K) sum_k w_p^k p^k, p^ = renorm(max(p~, 1e-6))
//   u^ = clamp(sum_k w_u^k u^k / sum_k w_u^k + eps, 0, 1)

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "megan/diffcore.hpp"
#include "megan/evidential.hpp"
#include "megan/expert.hpp"
#include "megan/nn.hpp"

namespace megan::gate {

inline constexpr double kProbFloor = 1e-6;
inline constexpr double kWeightFloor = 1e-6;

struct GateSpec {
  std::size_t shared_dim = 32;
  std::size_t head_hidden = 16;
  double dropout = 0.25;
  std::uint64_t seed = 1;
};

struct GateLossConfig {
  double beta1 = 1.0;
  double beta2 = 5.0;
  double gamma1 = 1.0;
  double gamma2 = 5.0;

  /// ConfigError on negative values or a pair that is entirely zero.
  void validate() const;
};

class GateModel {
 public:
  /// ConfigError for K < 2, zero widths or dropout outside [0, 1).
  GateModel(GateSpec spec, std::size_t num_experts, std::size_t feature_dim);
  GateModel(GateSpec spec, std::size_t num_experts, std::size_t feature_dim, nn::ParameterSet params);

  const GateSpec& spec() const noexcept { return spec_; }
  std::size_t num_experts() const noexcept { return k_; }
  std::size_t feature_dim() const noexcept { return d_; }
  const nn::ParameterSet& params() const noexcept { return params_; }
  nn::ParameterSet& mutable_params() noexcept { return params_; }

 private:
  GateSpec spec_;
  std::size_t k_;
  std::size_t d_;
  nn::ParameterSet params_;
};

std::map<std::string, std::vector<std::size_t>> gate_parameter_shapes(const GateSpec& spec,
                                                                     std::size_t feature_dim);

/// What the gate sees of one sample: the K experts' penultimate features,
/// class probabilities and uncertainties.
struct GateSample {
  diff::Tensor features;  // K x d
  diff::Tensor probs;     // K x C
  diff::Tensor uncertainty;  // K x 1
};

/// Runs every expert once over `bags` (eval mode). ConfigError if the experts
/// disagree on the feature dimension or are fewer than two.
std::vector<GateSample> collect_gate_inputs(std::span<const expert::ExpertModel* const> experts,
                                            std::span<const simdata::FeatureBag> bags);

struct FusedOutput {
  std::vector<double> probs;
  double uncertainty = 1.0;
  std::vector<double> w_p;
  std::vector<double> w_u;
  double epsilon = 0.0;
};

/// Fusion on the tape. wp, wu: (B K) x 1; probs: (B K) x C; unc: (B K) x 1;
/// eps: B x 1. Rows are grouped per sample, expert-major inside a sample.
struct FusedVars {
  diff::Var probs;        // B x C
  diff::Var uncertainty;  // B x 1
};
FusedVars fuse(diff::Var wp, diff::Var wu, diff::Var eps, diff::Var probs, diff::Var unc,
               std::size_t num_experts);

/// The same fusion for a single sample on plain values.
FusedOutput fuse_values(std::span<const double> wp, std::span<const double> wu, double eps,
                        const diff::Tensor& probs, std::span<const double> unc);

struct GateGraph {
  FusedVars fused;
  diff::Var eps;  // B x 1
  diff::Var wp;   // (B K) x 1
  diff::Var wu;   // (B K) x 1
};
GateGraph gate_graph(diff::Tape& tape, const GateModel& gate, const nn::BoundParameters& bound,
                     std::span<const GateSample* const> samples, expert::Mode mode, std::mt19937_64* rng);

/// Eval-mode fusion of one sample. ShapeError on K or d mismatch.
FusedOutput gate_forward(const GateModel& gate, const GateSample& sample);
std::vector<FusedOutput> gate_predict(const GateModel& gate, std::span<const GateSample> samples,
                                      std::size_t chunk = 128);

/// Correctness indicators 1[argmax p^_i = y_i] read off the current values.
std::vector<double> correctness(const diff::Tensor& fused_probs, std::span<const int> labels);

/// Batch-mean composite loss: cross-entropy on p^, the uncertainty term and
/// the eps term. Correctness is taken from the values of `fused.probs` and
/// carries no gradient.
diff::Var gate_loss(const FusedVars& fused, diff::Var eps, std::span<const int> labels,
                    const GateLossConfig& cfg);
double gate_loss(std::span<const FusedOutput> fused, std::span<const int> labels, const GateLossConfig& cfg);

struct GateValidation {
  std::span<const GateSample> samples;
  std::span<const int> labels;
};

/// Trains the gate on cached expert outputs with final labels. With a
/// validation set, the parameters after the epoch with the lowest held-out
/// cross-entropy of p^ are kept.
expert::TrainReport train_gate(GateModel& gate, std::span<const GateSample> samples,
                               std::span<const int> labels, const expert::TrainConfig& cfg,
                               const GateLossConfig& loss_cfg, const GateValidation* validation = nullptr);

/// Convenience wrapper that runs the frozen experts first and verifies that
/// their parameters are untouched afterwards (StateError otherwise).
expert::TrainReport train_gate(GateModel& gate, std::span<const expert::ExpertModel* const> experts,
                               std::span<const simdata::FeatureBag> bags, const expert::TrainConfig& cfg,
                               const GateLossConfig& loss_cfg);

/// Unweighted average of expert probabilities and uncertainties.
FusedOutput naive_fuse(std::span<const evidential::EvidentialOutput> outputs);
FusedOutput naive_fuse(const GateSample& sample);

}  // namespace megan::gate
