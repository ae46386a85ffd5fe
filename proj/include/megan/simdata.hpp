#pragma once

// Synthetic multi-rater trial data.
//
// Each video has a latent true grade y* in {0..3} and a difficulty
// d = |N(0, difficulty_sd)|. Frames are Gaussian around a point on an ordinal
// severity axis, with noise inflated by (1 + d); a fraction of frames comes
// from a class-free background cloud. Raters score y* + bias + N(0, sd (1 + d))
// rounded and clamped to the grade range. The trial label follows the
// local -> central -> adjudicator workflow with a median on disagreement.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "megan/diffcore.hpp"

namespace megan::simdata {

inline constexpr int kNumGrades = 4;

enum class RaterRole { local, central, adjudicator };
enum class Split { train, val, test, unseen };
enum class LabelSource { local, central, final };

std::string to_string(RaterRole r);
std::string to_string(Split s);
std::string to_string(LabelSource s);
RaterRole parse_rater_role(const std::string& s);
Split parse_split(const std::string& s);
LabelSource parse_label_source(const std::string& s);
inline constexpr std::array<Split, 4> kAllSplits = {Split::train, Split::val, Split::test,
                                                    Split::unseen};

struct RaterProfile {
  RaterRole role = RaterRole::central;
  double bias = 0.0;
  double noise_sd = 0.3;
};

struct TrialRaters {
  RaterProfile local{RaterRole::local, 0.0, 0.3};
  RaterProfile central{RaterRole::central, 0.0, 0.3};
  RaterProfile adjudicator{RaterRole::adjudicator, 0.0, 0.3};
};

struct GeneratorConfig {
  std::array<double, kNumGrades> class_prior{0.25, 0.25, 0.25, 0.25};
  std::size_t n_train = 2000;
  std::size_t n_val = 500;
  std::size_t n_test = 500;
  std::size_t n_unseen = 500;
  std::size_t frames_min = 16;
  std::size_t frames_max = 64;
  std::size_t feature_dim = 32;
  double class_separation = 1.0;
  double difficulty_sd = 0.5;
  double noninformative_frame_rate = 0.25;
  /// Norm of the feature-mean perturbation applied to the unseen split.
  double unseen_shift = 0.5;
  std::uint64_t seed = 1;

  /// ConfigError on invalid ranges.
  void validate() const;
};

struct FeatureBag {
  std::uint64_t bag_id = 0;
  Split split = Split::train;
  diff::Tensor frames;  // N x D
  std::optional<int> local_label;
  std::optional<int> central_label;
  std::optional<int> adjudicator_label;
  int final_label = 0;
  int true_class = 0;
  double difficulty = 0.0;

  std::size_t num_frames() const { return frames.rows(); }
  std::size_t dim() const { return frames.cols(); }
  /// Empty when the bag carries no score from that source.
  std::optional<int> label(LabelSource source) const;

  bool operator==(const FeatureBag&) const = default;
};

struct Dataset {
  std::vector<FeatureBag> train, val, test, unseen;

  const std::vector<FeatureBag>& split(Split s) const;
  std::vector<FeatureBag>& split(Split s);
  bool operator==(const Dataset&) const = default;
};

/// Fixed directions shared by all bags of one generator seed.
struct FeatureGeometry {
  std::vector<double> severity_axis;    // unit norm
  std::vector<double> background_mean;  // orthogonal to the axis
  std::vector<double> unseen_offset;    // norm = unseen_shift
};
FeatureGeometry make_geometry(const GeneratorConfig& cfg);

/// Frames of one video, values rounded to float precision. Deterministic in
/// (cfg.seed, bag_id). ConfigError for an invalid cfg or grade.
diff::Tensor generate_video(int true_class, double difficulty, const GeneratorConfig& cfg,
                            std::uint64_t bag_id, bool covariate_shift = false);

/// round(y* + bias + N(0, noise_sd (1 + difficulty))) clamped to {0..3}.
int rate(int true_class, double difficulty, const RaterProfile& rater, std::mt19937_64& rng);

struct TrialLabel {
  int final_label = 0;
  bool adjudicated = false;
  std::optional<int> adjudicator_score;
};

/// Agreement keeps the shared score; disagreement draws the adjudicator
/// score and takes the median of the three.
TrialLabel trial_label(int local, int central, const std::function<int()>& adjudicate);

int median3(int a, int b, int c);

Dataset generate_dataset(const GeneratorConfig& cfg, const TrialRaters& trial,
                         const TrialRaters& unseen);

}  // namespace megan::simdata
