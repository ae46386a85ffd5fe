#include "megan/nn.hpp"

#include <cmath>
#include <cstring>

#include "megan/errors.hpp"

namespace megan::nn {

BoundParameters::BoundParameters(diff::Tape& tape, const ParameterSet& params) {
  for (const auto& [name, value] : params) vars_.emplace(name, tape.parameter(value));
}

diff::Var BoundParameters::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw StateError("unknown parameter '" + name + "'");
  return it->second;
}

diff::Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  std::vector<double> v(fan_in * fan_out);
  for (double& x : v) x = u(rng);
  return diff::Tensor::matrix(fan_in, fan_out, std::move(v));
}

std::uint64_t parameter_hash(const ParameterSet& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : params) {
    feed(name.data(), name.size());
    for (std::size_t d : t.shape()) {
      const std::uint64_t e = d;
      feed(&e, sizeof e);
    }
    feed(t.values().data(), t.size() * sizeof(double));
  }
  return h;
}

std::size_t parameter_count(const ParameterSet& params) {
  std::size_t n = 0;
  for (const auto& [_, t] : params) n += t.size();
  return n;
}

diff::Var affine(diff::Var x, diff::Var weight, diff::Var bias) {
  return diff::matmul(x, weight) + bias;
}

void AdamW::step(ParameterSet& params, const BoundParameters& bound, const diff::Gradients& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, value] : params) {
    const diff::Tensor& g = grads[bound[name]];
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(value.size(), 0.0);
      v.assign(value.size(), 0.0);
    }
    auto w = value.mutable_values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      w[i] -= cfg_.learning_rate * (update + cfg_.weight_decay * w[i]);
    }
  }
}

WeightedSampler::WeightedSampler(std::span<const int> labels) : labels_(labels.begin(), labels.end()) {
  if (labels.empty()) throw EmptyInput("weighted sampler over an empty label set");
  std::map<int, std::size_t> counts;
  for (int y : labels) ++counts[y];
  weights_.reserve(labels.size());
  for (int y : labels) weights_.push_back(1.0 / static_cast<double>(counts[y]));
  dist_ = std::discrete_distribution<std::size_t>(weights_.begin(), weights_.end());
}

std::size_t WeightedSampler::operator()(std::mt19937_64& rng) { return dist_(rng); }

double WeightedSampler::class_mass(int label) const {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    den += weights_[i];
    if (labels_[i] == label) num += weights_[i];
  }
  return num / den;
}

}  // namespace megan::nn
