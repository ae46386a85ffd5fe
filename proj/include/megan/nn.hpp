#pragma once

// Shared model machinery: named parameter sets, initialization, the AdamW
// optimizer and class-balanced sampling.

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "megan/diffcore.hpp"

namespace megan::nn {

/// Ordered by name so serialization and hashing are canonical.
using ParameterSet = std::map<std::string, diff::Tensor>;

/// Parameters registered as leaves on one tape.
class BoundParameters {
 public:
  BoundParameters(diff::Tape& tape, const ParameterSet& params);
  diff::Var operator[](const std::string& name) const;
  const std::map<std::string, diff::Var>& vars() const noexcept { return vars_; }

 private:
  std::map<std::string, diff::Var> vars_;
};

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
diff::Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

/// FNV-1a over names, shapes and raw value bytes.
std::uint64_t parameter_hash(const ParameterSet& params);
std::size_t parameter_count(const ParameterSet& params);

/// Affine map x W + b for x (n x in), W (in x out), b (1 x out).
diff::Var affine(diff::Var x, diff::Var weight, diff::Var bias);

struct AdamWConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with decoupled weight decay: w -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * w).
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}
  void step(ParameterSet& params, const BoundParameters& bound, const diff::Gradients& grads);
  std::size_t steps() const noexcept { return t_; }

 private:
  AdamWConfig cfg_;
  std::map<std::string, std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Draws indices with probability proportional to 1 / frequency(label), so
/// every class present in `labels` receives equal expected mass.
class WeightedSampler {
 public:
  explicit WeightedSampler(std::span<const int> labels);
  std::size_t operator()(std::mt19937_64& rng);
  double class_mass(int label) const;

 private:
  std::vector<double> weights_;
  std::vector<int> labels_;
  std::discrete_distribution<std::size_t> dist_;
};

}  // namespace megan::nn
