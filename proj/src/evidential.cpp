#include "megan/evidential.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "megan/errors.hpp"
#include "megan/special_functions.hpp"

namespace megan::evidential {

using diff::Tensor;
using diff::Var;

EvidentialOutput evidential_from_evidence(std::span<const double> evidence) {
  if (evidence.empty()) throw ShapeError("evidential output needs at least one class");
  EvidentialOutput out;
  out.evidence.assign(evidence.begin(), evidence.end());
  out.alpha.resize(evidence.size());
  out.strength = 0.0;
  for (std::size_t c = 0; c < evidence.size(); ++c) {
    if (!(evidence[c] >= 0.0) || !std::isfinite(evidence[c])) {
      throw DomainError("evidence must be finite and non-negative");
    }
    out.alpha[c] = evidence[c] + 1.0;
    out.strength += out.alpha[c];
  }
  out.probs.resize(evidence.size());
  for (std::size_t c = 0; c < evidence.size(); ++c) out.probs[c] = out.alpha[c] / out.strength;
  out.uncertainty = static_cast<double>(evidence.size()) / out.strength;
  return out;
}

EvidentialOutput evidential_from_logits(std::span<const double> logits) {
  std::vector<double> e(logits.size());
  for (std::size_t c = 0; c < logits.size(); ++c) {
    if (!std::isfinite(logits[c])) throw DomainError("non-finite logit");
    e[c] = diff::softplus_value(logits[c]);
  }
  return evidential_from_evidence(e);
}

double kl_dirichlet_vs_uniform(std::span<const double> alpha) {
  if (alpha.empty()) throw ShapeError("KL of an empty Dirichlet");
  double strength = 0.0;
  for (double a : alpha) {
    if (a < 1.0 - 1e-12) throw DomainError("Dirichlet concentration below 1: " + std::to_string(a));
    strength += a;
  }
  const double psi_s = special::digamma(strength);
  double kl = special::log_gamma(strength) - special::log_gamma(static_cast<double>(alpha.size()));
  for (double a : alpha) {
    kl -= special::log_gamma(a);
    kl += (a - 1.0) * (special::digamma(a) - psi_s);
  }
  return std::max(kl, 0.0);
}

double annealing_coefficient(int epoch, int threshold) {
  if (threshold < 1) throw ConfigError("annealing threshold must be >= 1");
  if (epoch < 0) throw ConfigError("epoch must be >= 0");
  return std::min(1.0, static_cast<double>(epoch) / static_cast<double>(threshold));
}

Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  std::vector<double> v(labels.size() * classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ShapeError("label " + std::to_string(labels[i]) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    v[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return Tensor::matrix(labels.size(), classes, std::move(v));
}

DirichletVars dirichlet_from_logits(Var logits) {
  DirichletVars d;
  d.evidence = diff::softplus(logits);
  d.alpha = d.evidence + 1.0;
  d.strength = diff::sum_rows(d.alpha);
  d.probs = d.alpha / d.strength;
  const double classes = static_cast<double>(logits.value().cols());
  Var c = logits.tape().constant(Tensor::scalar(classes));
  d.uncertainty = c / d.strength;
  return d;
}

Var kl_to_uniform(Var alpha) {
  const double classes = static_cast<double>(alpha.value().cols());
  Var strength = diff::sum_rows(alpha);
  Var log_norm = diff::lgamma(strength) - diff::sum_rows(diff::lgamma(alpha));
  Var digamma_gap = diff::digamma(alpha) - diff::digamma(strength);
  Var cross = diff::sum_rows((alpha - 1.0) * digamma_gap);
  return (log_norm + cross) - special::log_gamma(classes);
}

Var edl_loss(Var alpha, std::span<const int> labels, int epoch, const EdlLossConfig& cfg) {
  const Tensor& av = alpha.value();
  const std::size_t batch = av.rows();
  const std::size_t classes = av.cols();
  if (labels.size() != batch) {
    throw ShapeError("edl_loss: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(batch));
  }
  diff::Tape& tape = alpha.tape();
  Var y = tape.constant(one_hot(labels, classes));

  Var strength = diff::sum_rows(alpha);
  Var classification = diff::sum(diff::digamma(strength)) - diff::sum(y * diff::digamma(alpha));

  const double lambda = annealing_coefficient(epoch, cfg.annealing_threshold);
  Var total = classification;
  if (lambda > 0.0) {
    Var kl_alpha = alpha;
    if (cfg.kl_evidence_adjustment) {
      Var not_y = tape.constant(Tensor::matrix(batch, classes, [&] {
        std::vector<double> v(batch * classes);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 - y.value()[i];
        return v;
      }()));
      kl_alpha = y + not_y * alpha;
    }
    total = total + lambda * diff::sum(kl_to_uniform(kl_alpha));
  }
  return total * (1.0 / static_cast<double>(batch));
}

double edl_loss(std::span<const EvidentialOutput> batch, std::span<const int> labels, int epoch,
                const EdlLossConfig& cfg) {
  if (batch.empty()) throw EmptyInput("edl_loss on an empty batch");
  const std::size_t classes = batch.front().classes();
  std::vector<double> alpha;
  alpha.reserve(batch.size() * classes);
  for (const auto& out : batch) {
    if (out.classes() != classes) throw ShapeError("edl_loss: inconsistent class counts");
    alpha.insert(alpha.end(), out.alpha.begin(), out.alpha.end());
  }
  diff::Tape tape;
  Var a = tape.constant(Tensor::matrix(batch.size(), classes, std::move(alpha)));
  return edl_loss(a, labels, epoch, cfg).value().item();
}

}  // namespace megan::evidential
