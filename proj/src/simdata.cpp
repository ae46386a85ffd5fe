#include "megan/simdata.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "megan/errors.hpp"
#include "megan/rng.hpp"

namespace megan::simdata {
namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kGeometryStream = 0;
constexpr std::uint64_t kLabelStream = 1;
constexpr std::uint64_t kFrameStream = 2;

std::vector<double> random_unit(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(dim);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (double& x : v) {
      x = n(rng);
      norm += x * x;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

void check_grade(int g, const char* what) {
  if (g < 0 || g >= kNumGrades) {
    throw ConfigError(std::string(what) + " " + std::to_string(g) + " outside 0.." +
                      std::to_string(kNumGrades - 1));
  }
}

}  // namespace

std::string to_string(RaterRole r) {
  switch (r) {
    case RaterRole::local:
      return "local";
    case RaterRole::central:
      return "central";
    case RaterRole::adjudicator:
      return "adjudicator";
  }
  return "?";
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
    case Split::unseen:
      return "unseen";
  }
  return "?";
}

std::string to_string(LabelSource s) {
  switch (s) {
    case LabelSource::local:
      return "local";
    case LabelSource::central:
      return "central";
    case LabelSource::final:
      return "final";
  }
  return "?";
}

RaterRole parse_rater_role(const std::string& s) {
  if (s == "local") return RaterRole::local;
  if (s == "central") return RaterRole::central;
  if (s == "adjudicator") return RaterRole::adjudicator;
  throw ConfigError("unknown rater role '" + s + "'");
}

Split parse_split(const std::string& s) {
  for (Split sp : kAllSplits) {
    if (to_string(sp) == s) return sp;
  }
  throw ConfigError("unknown split '" + s + "'");
}

LabelSource parse_label_source(const std::string& s) {
  if (s == "local") return LabelSource::local;
  if (s == "central") return LabelSource::central;
  if (s == "final") return LabelSource::final;
  throw ConfigError("unknown label source '" + s + "'");
}

void GeneratorConfig::validate() const {
  double total = 0.0;
  for (double p : class_prior) {
    if (!(p >= 0.0)) throw ConfigError("class_prior entries must be >= 0");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("class_prior must sum to 1");
  if (frames_min < 1) throw ConfigError("frames_min must be >= 1");
  if (frames_max < frames_min) throw ConfigError("frames_max must be >= frames_min");
  if (feature_dim < 2) throw ConfigError("feature_dim must be >= 2");
  if (!(class_separation > 0.0)) throw ConfigError("class_separation must be > 0");
  if (!(difficulty_sd > 0.0)) throw ConfigError("difficulty_sd must be > 0");
  if (!(noninformative_frame_rate >= 0.0 && noninformative_frame_rate < 1.0)) {
    throw ConfigError("noninformative_frame_rate must lie in [0, 1)");
  }
  if (!(unseen_shift >= 0.0)) throw ConfigError("unseen_shift must be >= 0");
}

std::optional<int> FeatureBag::label(LabelSource source) const {
  switch (source) {
    case LabelSource::local:
      return local_label;
    case LabelSource::central:
      return central_label;
    case LabelSource::final:
      return final_label;
  }
  return std::nullopt;
}

const std::vector<FeatureBag>& Dataset::split(Split s) const {
  switch (s) {
    case Split::train:
      return train;
    case Split::val:
      return val;
    case Split::test:
      return test;
    case Split::unseen:
      return unseen;
  }
  throw ConfigError("unknown split");
}

std::vector<FeatureBag>& Dataset::split(Split s) {
  return const_cast<std::vector<FeatureBag>&>(std::as_const(*this).split(s));
}

FeatureGeometry make_geometry(const GeneratorConfig& cfg) {
  auto rng = make_rng(cfg.seed, 0, kGeometryStream);
  FeatureGeometry g;
  g.severity_axis = random_unit(rng, cfg.feature_dim);
  // Gram-Schmidt the background direction against the severity axis so that
  // background frames carry no grade information.
  std::vector<double> b = random_unit(rng, cfg.feature_dim);
  const double proj = std::inner_product(b.begin(), b.end(), g.severity_axis.begin(), 0.0);
  double norm = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    b[i] -= proj * g.severity_axis[i];
    norm += b[i] * b[i];
  }
  norm = std::sqrt(norm);
  const double background_norm = 1.5 * cfg.class_separation;
  for (double& x : b) x *= background_norm / norm;
  g.background_mean = std::move(b);
  g.unseen_offset = random_unit(rng, cfg.feature_dim);
  for (double& x : g.unseen_offset) x *= cfg.unseen_shift;
  return g;
}

diff::Tensor generate_video(int true_class, double difficulty, const GeneratorConfig& cfg,
                            std::uint64_t bag_id, bool covariate_shift) {
  cfg.validate();
  check_grade(true_class, "true class");
  if (!(difficulty >= 0.0)) throw ConfigError("difficulty must be >= 0");
  const FeatureGeometry geom = make_geometry(cfg);
  auto rng = make_rng(cfg.seed, bag_id, kFrameStream);

  std::uniform_int_distribution<std::size_t> frame_count(cfg.frames_min, cfg.frames_max);
  const std::size_t n = frame_count(rng);
  const std::size_t d = cfg.feature_dim;
  const std::size_t background =
      std::min(n - 1, static_cast<std::size_t>(std::lround(cfg.noninformative_frame_rate * n)));
  std::vector<char> is_background(n, 0);
  std::fill(is_background.begin(), is_background.begin() + static_cast<std::ptrdiff_t>(background), 1);
  std::shuffle(is_background.begin(), is_background.end(), rng);

  const double position = (static_cast<double>(true_class) - 1.5) * cfg.class_separation;
  const double noise_scale = 1.0 + difficulty;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> values(n * d);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < d; ++k) {
      double v;
      if (is_background[j]) {
        v = geom.background_mean[k] + normal(rng);
      } else {
        v = position * geom.severity_axis[k] + noise_scale * normal(rng);
      }
      if (covariate_shift) v += geom.unseen_offset[k];
      values[j * d + k] = static_cast<double>(static_cast<float>(v));
    }
  }
  return diff::Tensor::matrix(n, d, std::move(values));
}

int rate(int true_class, double difficulty, const RaterProfile& rater, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, rater.noise_sd * (1.0 + difficulty));
  const double raw = static_cast<double>(true_class) + rater.bias + noise(rng);
  const long rounded = std::lround(std::clamp(raw, -1e6, 1e6));
  return static_cast<int>(std::clamp<long>(rounded, 0, kNumGrades - 1));
}

int median3(int a, int b, int c) { return std::max(std::min(a, b), std::min(std::max(a, b), c)); }

TrialLabel trial_label(int local, int central, const std::function<int()>& adjudicate) {
  if (local == central) return TrialLabel{local, false, std::nullopt};
  const int adj = adjudicate();
  return TrialLabel{median3(local, central, adj), true, adj};
}

Dataset generate_dataset(const GeneratorConfig& cfg, const TrialRaters& trial,
                         const TrialRaters& unseen) {
  cfg.validate();
  for (const TrialRaters* rs : {&trial, &unseen}) {
    for (const RaterProfile* r : {&rs->local, &rs->central, &rs->adjudicator}) {
      if (!(r->noise_sd > 0.0)) throw ConfigError("rater noise_sd must be > 0");
    }
  }

  Dataset ds;
  std::uint64_t next_id = 0;
  const std::array<std::size_t, 4> counts = {cfg.n_train, cfg.n_val, cfg.n_test, cfg.n_unseen};
  for (std::size_t s = 0; s < kAllSplits.size(); ++s) {
    const Split split = kAllSplits[s];
    const bool shifted = split == Split::unseen;
    const TrialRaters& raters = shifted ? unseen : trial;
    auto& bags = ds.split(split);
    bags.reserve(counts[s]);
    for (std::size_t i = 0; i < counts[s]; ++i) {
      FeatureBag bag;
      bag.bag_id = next_id++;
      bag.split = split;
      auto rng = make_rng(cfg.seed, bag.bag_id, kLabelStream);
      std::discrete_distribution<int> prior(cfg.class_prior.begin(), cfg.class_prior.end());
      std::normal_distribution<double> diff_dist(0.0, cfg.difficulty_sd);
      bag.true_class = prior(rng);
      bag.difficulty = std::abs(diff_dist(rng));
      const int local = rate(bag.true_class, bag.difficulty, raters.local, rng);
      const int central = rate(bag.true_class, bag.difficulty, raters.central, rng);
      const TrialLabel tl = trial_label(
          local, central, [&] { return rate(bag.true_class, bag.difficulty, raters.adjudicator, rng); });
      bag.local_label = local;
      bag.central_label = central;
      bag.adjudicator_label = tl.adjudicator_score;
      bag.final_label = tl.final_label;
      bag.frames = generate_video(bag.true_class, bag.difficulty, cfg, bag.bag_id, shifted);
      bags.push_back(std::move(bag));
    }
  }
  return ds;
}

}  // namespace megan::simdata
