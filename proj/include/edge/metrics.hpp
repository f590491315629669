#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "edge/audio.hpp"
#include "edge/kinematics.hpp"

namespace edge::metrics {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Positions below are N x 3J joint-position matrices as returned by
// kinematics::forward_kinematics, z-up.

struct PfcOptions {
  /// Measure foot speed on the ground plane only.
  bool horizontal_foot_speed = false;
};

struct PfcResult {
  double value = 0.0;
  /// Set when the clip has no root acceleration, in which case value is 0.
  bool degenerate = false;
};

/// Physical foot contact score. With a = second difference of the root
/// position, its vertical component clamped to >= 0, and per-foot speed the
/// mean of heel and toe first-difference magnitudes:
///   s_i = |a_i| |v_left,i| |v_right,i|,   PFC = sum_i s_i / (N max_j |a_j|)
/// where s_i exists on the N - 2 frames with an acceleration and N is the clip
/// length. Throws TooShort for N < 3.
PfcResult pfc(const MatrixXd& positions, const kinematics::Skeleton& skel, const PfcOptions& opts = {});
PfcResult pfc(const kinematics::MotionClip& clip, const kinematics::Skeleton& skel, const PfcOptions& opts = {});

/// Times (i / fps) of strict local minima of the mean joint speed.
std::vector<double> kinematic_beats(const MatrixXd& positions, double fps);
std::vector<double> kinematic_beats(const kinematics::MotionClip& clip, const kinematics::Skeleton& skel);

/// Mean over music beats of exp(-d^2 / (2 sigma^2)), d the distance to the
/// nearest kinematic beat (seconds). Throws EmptyMusicBeats.
double beat_alignment(const std::vector<double>& kinematic, const std::vector<double>& music, double sigma);
double beat_alignment(const std::vector<double>& kinematic, const audio::BeatGrid& music, double sigma);

/// Per joint, mean squared speed (units / s)^2 over the N - 1 velocity frames.
VectorXd kinetic_features(const MatrixXd& positions, double fps);
VectorXd kinetic_features(const kinematics::MotionClip& clip, const kinematics::Skeleton& skel);

/// Identifier of the predicate list evaluated by geometric_features.
inline constexpr const char* kGeometricFeatureVersion = "geo-v1";
inline constexpr int kGeometricFeatureCount = 16;
/// Names of the predicates, in output order.
const std::vector<std::string>& geometric_feature_names();

/// Fraction of frames on which each relational predicate holds. Needs the
/// 24-joint SMPL topology (InvalidSkeleton otherwise).
VectorXd geometric_features(const MatrixXd& positions, const kinematics::Skeleton& skel);
VectorXd geometric_features(const kinematics::MotionClip& clip, const kinematics::Skeleton& skel);
/// Per-frame predicate values, N x 16.
MatrixXd geometric_predicates(const MatrixXd& positions, const kinematics::Skeleton& skel);

/// Mean pairwise Euclidean distance between rows. Throws TooFewClips for M < 2.
double diversity(const MatrixXd& features);

struct FeatureDistribution {
  MatrixXd samples;  // M x F
  VectorXd mean;
  MatrixXd covariance;  // unbiased (M - 1)

  /// Throws TooFewClips for M < 2.
  static FeatureDistribution from_samples(const MatrixXd& samples);
};

/// |mu_p - mu_q|^2 + Tr(S_p + S_q - 2 (S_p S_q)^(1/2)), each covariance
/// jittered by `jitter` I. The square-root trace is taken from the
/// eigenvalues of the symmetric S_p^(1/2) S_q S_p^(1/2).
double frechet_distance(const FeatureDistribution& p, const FeatureDistribution& q, double jitter = 1e-6);

/// Max over bones of (max length - min length) / mean length.
double bone_length_drift(const MatrixXd& positions, const kinematics::Skeleton& skel);

struct ClipMetrics {
  std::string id;
  double pfc = 0.0;
  bool pfc_degenerate = false;
  /// Negative when no music beats were available for the clip.
  double beat_alignment = -1.0;
  double bone_drift = 0.0;
  VectorXd kinetic;
  VectorXd geometric;
};

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;
  int count = 0;
};

struct MetricReport {
  double fps = 30.0;
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<ClipMetrics> clips;
  /// Set-level metrics (diversity, Frechet distances).
  std::map<std::string, double> set_metrics;

  /// Arithmetic mean and population std of a per-clip metric: "pfc",
  /// "beat_alignment" (clips without music beats skipped) or "bone_drift".
  Aggregate aggregate(const std::string& metric) const;

  void write_text(const std::filesystem::path& path) const;
  std::string to_text() const;
  void write_csv(const std::filesystem::path& path) const;
  std::string to_csv() const;
};

struct EvaluationOptions {
  double beat_sigma_frames = 3.0;
  PfcOptions pfc;
};

/// All per-clip metrics; beat alignment only when `music_beats` has beats.
ClipMetrics evaluate_clip(const std::string& id, const kinematics::MotionClip& clip, const kinematics::Skeleton& skel,
                          const audio::BeatGrid* music_beats, const EvaluationOptions& opts = {});

/// Per-clip metrics plus Dist_k / Dist_g diversity when there are >= 2 clips.
/// `music_beats` may be empty or hold one grid per clip.
MetricReport evaluate(const std::vector<std::pair<std::string, kinematics::MotionClip>>& clips,
                      const kinematics::Skeleton& skel, const std::vector<audio::BeatGrid>& music_beats,
                      const EvaluationOptions& opts = {});

}  // namespace edge::metrics
