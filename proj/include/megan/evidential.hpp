#pragma once

// Dirichlet-evidence quantities and the evidential training loss.
//
// For logits z over C classes: evidence e = softplus(z), concentration
// alpha = e + 1, strength S = sum(alpha), expected probability p = alpha / S
// and uncertainty u = C / S. The loss is the expected cross-entropy under
// Dir(alpha) plus an annealed KL penalty towards the uniform Dirichlet.

#include <cstddef>
#include <span>
#include <vector>

#include "megan/diffcore.hpp"

namespace megan::evidential {

struct EvidentialOutput {
  std::vector<double> evidence;
  std::vector<double> alpha;
  double strength = 0.0;
  std::vector<double> probs;
  double uncertainty = 1.0;

  std::size_t classes() const noexcept { return alpha.size(); }
};

struct EdlLossConfig {
  /// Epoch at which the KL weight reaches 1.
  int annealing_threshold = 10;
  /// Remove the true-class evidence before the KL term.
  bool kl_evidence_adjustment = true;
};

EvidentialOutput evidential_from_logits(std::span<const double> logits);
/// Rebuilds every derived quantity from evidence values (>= 0).
EvidentialOutput evidential_from_evidence(std::span<const double> evidence);

/// KL[Dir(alpha) || Dir(1)]. DomainError if any alpha < 1 - 1e-12.
double kl_dirichlet_vs_uniform(std::span<const double> alpha);

/// min(1, t / T). ConfigError if T < 1 or t < 0.
double annealing_coefficient(int epoch, int threshold);

/// Differentiable pieces, shape (batch x C) in, per-row results (batch x 1).
struct DirichletVars {
  diff::Var evidence;
  diff::Var alpha;
  diff::Var strength;
  diff::Var probs;
  diff::Var uncertainty;
};
DirichletVars dirichlet_from_logits(diff::Var logits);

/// Per-row KL[Dir(alpha_i) || Dir(1)] as a (batch x 1) column.
diff::Var kl_to_uniform(diff::Var alpha);

/// Batch-mean evidential loss on a (batch x C) alpha matrix:
///   (1/B) * [ sum_i (psi(S_i) - psi(alpha_{i,y_i})) + lambda_t * sum_i KL_i ].
/// ShapeError if labels.size() != batch or any label is outside [0, C).
diff::Var edl_loss(diff::Var alpha, std::span<const int> labels, int epoch,
                   const EdlLossConfig& cfg);

/// Same loss evaluated on already-computed outputs.
double edl_loss(std::span<const EvidentialOutput> batch, std::span<const int> labels, int epoch,
                const EdlLossConfig& cfg);

/// One-hot (batch x classes) matrix. ShapeError on out-of-range labels.
diff::Tensor one_hot(std::span<const int> labels, std::size_t classes);

}  // namespace megan::evidential
