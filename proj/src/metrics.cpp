#include "edge/metrics.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "edge/errors.hpp"

namespace edge::metrics {

namespace {

using kinematics::Vec3;

Vec3 joint(const MatrixXd& positions, Eigen::Index frame, int j) {
  return positions.block<1, 3>(frame, 3 * j).transpose();
}

void check_positions(const MatrixXd& positions, const kinematics::Skeleton& skel) {
  if (positions.cols() != 3 * skel.joint_count())
    throw ShapeMismatch("positions have " + std::to_string(positions.cols()) + " columns, skeleton needs " +
                        std::to_string(3 * skel.joint_count()));
}

/// N - 1 x J joint speeds per frame (not scaled by fps).
MatrixXd joint_displacements(const MatrixXd& positions) {
  const auto N = positions.rows();
  const auto J = positions.cols() / 3;
  MatrixXd out(N - 1, J);
  for (Eigen::Index i = 0; i + 1 < N; ++i)
    for (Eigen::Index j = 0; j < J; ++j)
      out(i, j) = (positions.block<1, 3>(i + 1, 3 * j) - positions.block<1, 3>(i, 3 * j)).norm();
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

double angle_deg(const Vec3& a, const Vec3& b) {
  const double na = a.norm(), nb = b.norm();
  if (na < 1e-12 || nb < 1e-12) return 180.0;
  return std::acos(std::clamp(a.dot(b) / (na * nb), -1.0, 1.0)) * 180.0 / M_PI;
}

// SMPL joint indices
enum Smpl : int {
  kPelvis = 0,
  kLHip = 1,
  kRHip = 2,
  kLKnee = 4,
  kRKnee = 5,
  kLAnkle = 7,
  kRAnkle = 8,
  kNeck = 12,
  kHead = 15,
  kLShoulder = 16,
  kRShoulder = 17,
  kLElbow = 18,
  kRElbow = 19,
  kLWrist = 20,
  kRWrist = 21,
};

}  // namespace

PfcResult pfc(const MatrixXd& positions, const kinematics::Skeleton& skel, const PfcOptions& opts) {
  check_positions(positions, skel);
  const auto N = positions.rows();
  if (N < 3) throw TooShort("PFC needs at least 3 frames");
  const auto K = N - 2;
  const auto& c = skel.contact_joints;

  std::vector<double> accel(static_cast<std::size_t>(K));
  std::vector<double> left(static_cast<std::size_t>(K)), right(static_cast<std::size_t>(K));
  auto speed = [&](Eigen::Index i, int j) {
    Vec3 d = joint(positions, i + 1, j) - joint(positions, i, j);
    if (opts.horizontal_foot_speed) d(kinematics::kUpAxis) = 0.0;
    return d.norm();
  };
  double max_accel = 0.0;
  for (Eigen::Index i = 0; i < K; ++i) {
    Vec3 a = joint(positions, i + 2, 0) - 2.0 * joint(positions, i + 1, 0) + joint(positions, i, 0);
    a(kinematics::kUpAxis) = std::max(a(kinematics::kUpAxis), 0.0);
    accel[static_cast<std::size_t>(i)] = a.norm();
    max_accel = std::max(max_accel, a.norm());
    // velocity i (frames i -> i+1) pairs with acceleration i (frames i..i+2)
    left[static_cast<std::size_t>(i)] = 0.5 * (speed(i, c[0]) + speed(i, c[1]));
    right[static_cast<std::size_t>(i)] = 0.5 * (speed(i, c[2]) + speed(i, c[3]));
  }
  if (max_accel < 1e-9) return {0.0, true};
  double total = 0.0;
  for (std::size_t i = 0; i < accel.size(); ++i) total += accel[i] * left[i] * right[i];
  // normalized by the clip length N; only the K = N - 2 interior frames contribute
  return {total / (static_cast<double>(N) * max_accel), false};
}

PfcResult pfc(const kinematics::MotionClip& clip, const kinematics::Skeleton& skel, const PfcOptions& opts) {
  return pfc(kinematics::forward_kinematics(skel, clip), skel, opts);
}

std::vector<double> kinematic_beats(const MatrixXd& positions, double fps) {
  if (positions.rows() < 3) throw TooShort("kinematic beats need at least 3 frames");
  const VectorXd speed = joint_displacements(positions).rowwise().mean();
  std::vector<double> beats;
  for (Eigen::Index i = 1; i + 1 < speed.size(); ++i)
    if (speed(i) < speed(i - 1) && speed(i) < speed(i + 1)) beats.push_back(static_cast<double>(i) / fps);
  return beats;
}

std::vector<double> kinematic_beats(const kinematics::MotionClip& clip, const kinematics::Skeleton& skel) {
  return kinematic_beats(kinematics::forward_kinematics(skel, clip), clip.fps());
}

double beat_alignment(const std::vector<double>& kinematic, const std::vector<double>& music, double sigma) {
  if (music.empty()) throw EmptyMusicBeats("beat alignment needs at least one music beat");
  if (!(sigma > 0.0)) throw ConfigError("beat alignment sigma must be positive");
  if (kinematic.empty()) return 0.0;
  double total = 0.0;
  for (double b : music) {
    double best = std::numeric_limits<double>::infinity();
    for (double k : kinematic) best = std::min(best, (b - k) * (b - k));
    total += std::exp(-best / (2.0 * sigma * sigma));
  }
  return total / static_cast<double>(music.size());
}

double beat_alignment(const std::vector<double>& kinematic, const audio::BeatGrid& music, double sigma) {
  return beat_alignment(kinematic, music.beat_times, sigma);
}

VectorXd kinetic_features(const MatrixXd& positions, double fps) {
  if (positions.rows() < 2) throw TooShort("kinetic features need at least 2 frames");
  const MatrixXd speed = joint_displacements(positions) * fps;
  return speed.array().square().colwise().mean().transpose();
}

VectorXd kinetic_features(const kinematics::MotionClip& clip, const kinematics::Skeleton& skel) {
  return kinetic_features(kinematics::forward_kinematics(skel, clip), clip.fps());
}

const std::vector<std::string>& geometric_feature_names() {
  static const std::vector<std::string> names = {
      "left_foot_in_front",  "right_foot_in_front", "left_hand_above_head", "right_hand_above_head",
      "feet_wide_apart",     "left_foot_raised",    "right_foot_raised",    "left_hand_forward",
      "right_hand_forward",  "left_knee_bent",      "right_knee_bent",      "left_elbow_bent",
      "right_elbow_bent",    "hands_wide_apart",    "hands_below_pelvis",   "torso_leaning",
  };
  return names;
}

MatrixXd geometric_predicates(const MatrixXd& positions, const kinematics::Skeleton& skel) {
  check_positions(positions, skel);
  if (skel.joint_count() != 24) throw InvalidSkeleton("geometric features need the 24-joint SMPL topology");
  const auto N = positions.rows();
  const Vec3 up = Vec3::UnitZ();
  MatrixXd out = MatrixXd::Zero(N, kGeometricFeatureCount);
  for (Eigen::Index i = 0; i < N; ++i) {
    auto p = [&](int j) { return joint(positions, i, j); };
    Vec3 left = p(kLHip) - p(kRHip);
    left(kinematics::kUpAxis) = 0.0;
    const double hip_width = left.norm();
    const double shoulder_width = (p(kLShoulder) - p(kRShoulder)).norm();
    const Vec3 forward = left.norm() > 1e-12 ? Vec3(left.normalized().cross(up)) : Vec3::Zero();
    auto ahead = [&](int j) { return (p(j) - p(kPelvis)).dot(forward); };
    auto height = [&](int j) { return p(j)(kinematics::kUpAxis); };
    Vec3 ankle_gap = p(kLAnkle) - p(kRAnkle);
    ankle_gap(kinematics::kUpAxis) = 0.0;

    const bool flags[kGeometricFeatureCount] = {
        ahead(kLAnkle) > 0.0,
        ahead(kRAnkle) > 0.0,
        height(kLWrist) > height(kHead),
        height(kRWrist) > height(kHead),
        ankle_gap.norm() > 2.0 * hip_width,
        height(kLAnkle) - height(kRAnkle) > hip_width,
        height(kRAnkle) - height(kLAnkle) > hip_width,
        ahead(kLWrist) > hip_width,
        ahead(kRWrist) > hip_width,
        angle_deg(p(kLHip) - p(kLKnee), p(kLAnkle) - p(kLKnee)) < 150.0,
        angle_deg(p(kRHip) - p(kRKnee), p(kRAnkle) - p(kRKnee)) < 150.0,
        angle_deg(p(kLShoulder) - p(kLElbow), p(kLWrist) - p(kLElbow)) < 150.0,
        angle_deg(p(kRShoulder) - p(kRElbow), p(kRWrist) - p(kRElbow)) < 150.0,
        (p(kLWrist) - p(kRWrist)).norm() > 2.0 * shoulder_width,
        height(kLWrist) < height(kPelvis) && height(kRWrist) < height(kPelvis),
        angle_deg(p(kNeck) - p(kPelvis), up) > 30.0,
    };
    for (int f = 0; f < kGeometricFeatureCount; ++f) out(i, f) = flags[f] ? 1.0 : 0.0;
  }
  return out;
}

VectorXd geometric_features(const MatrixXd& positions, const kinematics::Skeleton& skel) {
  if (positions.rows() < 1) throw TooShort("geometric features need at least 1 frame");
  return geometric_predicates(positions, skel).colwise().mean().transpose();
}

VectorXd geometric_features(const kinematics::MotionClip& clip, const kinematics::Skeleton& skel) {
  return geometric_features(kinematics::forward_kinematics(skel, clip), skel);
}

double diversity(const MatrixXd& features) {
  const auto M = features.rows();
  if (M < 2) throw TooFewClips("diversity needs at least 2 feature vectors");
  double total = 0.0;
  for (Eigen::Index a = 0; a < M; ++a)
    for (Eigen::Index b = a + 1; b < M; ++b) total += (features.row(a) - features.row(b)).norm();
  return total / (0.5 * static_cast<double>(M) * static_cast<double>(M - 1));
}

FeatureDistribution FeatureDistribution::from_samples(const MatrixXd& samples) {
  if (samples.rows() < 2) throw TooFewClips("a feature distribution needs at least 2 samples");
  FeatureDistribution d;
  d.samples = samples;
  d.mean = samples.colwise().mean().transpose();
  const MatrixXd centered = samples.rowwise() - d.mean.transpose();
  d.covariance = centered.transpose() * centered / static_cast<double>(samples.rows() - 1);
  return d;
}

double frechet_distance(const FeatureDistribution& p, const FeatureDistribution& q, double jitter) {
  const auto F = p.mean.size();
  if (q.mean.size() != F || p.covariance.rows() != F || q.covariance.rows() != F)
    throw DimensionMismatch("feature distributions have different dimensions");
  const MatrixXd I = MatrixXd::Identity(F, F);
  const MatrixXd sp = 0.5 * (p.covariance + p.covariance.transpose()) + jitter * I;
  const MatrixXd sq = 0.5 * (q.covariance + q.covariance.transpose()) + jitter * I;

  Eigen::SelfAdjointEigenSolver<MatrixXd> eig_p(sp);
  if (eig_p.info() != Eigen::Success) throw NonConvergentSqrt("eigendecomposition of the first covariance failed");
  const VectorXd root_vals = eig_p.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const MatrixXd root_p = eig_p.eigenvectors() * root_vals.asDiagonal() * eig_p.eigenvectors().transpose();
  MatrixXd inner = root_p * sq * root_p;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig_inner(inner, Eigen::EigenvaluesOnly);
  if (eig_inner.info() != Eigen::Success) throw NonConvergentSqrt("eigendecomposition of the covariance product failed");
  const VectorXd lambda = eig_inner.eigenvalues();
  const double scale = std::max(1.0, lambda.cwiseAbs().maxCoeff());
  double trace_root = 0.0;
  for (Eigen::Index i = 0; i < lambda.size(); ++i) {
    if (lambda(i) < -1e-8 * scale) throw NonConvergentSqrt("covariance product has a negative eigenvalue");
    trace_root += std::sqrt(std::max(lambda(i), 0.0));
  }
  const double value = (p.mean - q.mean).squaredNorm() + sp.trace() + sq.trace() - 2.0 * trace_root;
  return std::max(value, 0.0);
}

double bone_length_drift(const MatrixXd& positions, const kinematics::Skeleton& skel) {
  check_positions(positions, skel);
  if (positions.rows() < 1) throw TooShort("bone length drift needs at least 1 frame");
  double worst = 0.0;
  for (int j = 1; j < skel.joint_count(); ++j) {
    const int parent = skel.parents[static_cast<std::size_t>(j)];
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0, sum = 0.0;
    for (Eigen::Index i = 0; i < positions.rows(); ++i) {
      const double len = (joint(positions, i, j) - joint(positions, i, parent)).norm();
      lo = std::min(lo, len);
      hi = std::max(hi, len);
      sum += len;
    }
    const double mean = sum / static_cast<double>(positions.rows());
    if (mean < 1e-12) throw ZeroLengthBone("bone ending at joint " + std::to_string(j) + " has zero length");
    worst = std::max(worst, (hi - lo) / mean);
  }
  return worst;
}

Aggregate MetricReport::aggregate(const std::string& metric) const {
  std::vector<double> values;
  for (const auto& c : clips) {
    if (metric == "pfc") values.push_back(c.pfc);
    else if (metric == "bone_drift") values.push_back(c.bone_drift);
    else if (metric == "beat_alignment") {
      if (c.beat_alignment >= 0.0) values.push_back(c.beat_alignment);
    } else {
      throw ConfigError("unknown per-clip metric '" + metric + "'");
    }
  }
  Aggregate a;
  a.count = static_cast<int>(values.size());
  if (values.empty()) return a;
  for (double v : values) a.mean += v;
  a.mean /= static_cast<double>(values.size());
  for (double v : values) a.std += (v - a.mean) * (v - a.mean);
  a.std = std::sqrt(a.std / static_cast<double>(values.size()));
  return a;
}

std::string MetricReport::to_text() const {
  std::ostringstream out;
  out << "metadata:\n";
  out << "  fps: " << fmt(fps) << "\n";
  out << "  geometric_features: " << kGeometricFeatureVersion << "\n";
  for (const auto& [k, v] : metadata) out << "  " << k << ": " << v << "\n";
  for (const auto& c : clips) {
    out << "clip: " << c.id << "\n";
    out << "  pfc: " << fmt(c.pfc) << "\n";
    out << "  pfc_degenerate: " << (c.pfc_degenerate ? "true" : "false") << "\n";
    out << "  beat_alignment: " << (c.beat_alignment >= 0.0 ? fmt(c.beat_alignment) : "n/a") << "\n";
    out << "  bone_drift: " << fmt(c.bone_drift) << "\n";
  }
  out << "aggregate:\n";
  for (const char* m : {"pfc", "beat_alignment", "bone_drift"}) {
    const auto a = aggregate(m);
    out << "  " << m << "_mean: " << (a.count ? fmt(a.mean) : "n/a") << "\n";
    out << "  " << m << "_std: " << (a.count ? fmt(a.std) : "n/a") << "\n";
  }
  for (const auto& [k, v] : set_metrics) out << "  " << k << ": " << fmt(v) << "\n";
  return out.str();
}

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out << "clip,pfc,pfc_degenerate,beat_alignment,bone_drift\n";
  for (const auto& c : clips) {
    out << c.id << "," << fmt(c.pfc) << "," << (c.pfc_degenerate ? 1 : 0) << ","
        << (c.beat_alignment >= 0.0 ? fmt(c.beat_alignment) : "") << "," << fmt(c.bone_drift) << "\n";
  }
  return out.str();
}

namespace {

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

void MetricReport::write_text(const std::filesystem::path& path) const { write_text_file(path, to_text()); }

void MetricReport::write_csv(const std::filesystem::path& path) const { write_text_file(path, to_csv()); }

ClipMetrics evaluate_clip(const std::string& id, const kinematics::MotionClip& clip, const kinematics::Skeleton& skel,
                          const audio::BeatGrid* music_beats, const EvaluationOptions& opts) {
  const MatrixXd positions = kinematics::forward_kinematics(skel, clip);
  ClipMetrics m;
  m.id = id;
  const auto p = pfc(positions, skel, opts.pfc);
  m.pfc = p.value;
  m.pfc_degenerate = p.degenerate;
  if (music_beats && !music_beats->beat_times.empty()) {
    m.beat_alignment =
        beat_alignment(kinematic_beats(positions, clip.fps()), *music_beats, opts.beat_sigma_frames / clip.fps());
  }
  m.bone_drift = bone_length_drift(positions, skel);
  m.kinetic = kinetic_features(positions, clip.fps());
  m.geometric = geometric_features(positions, skel);
  return m;
}

MetricReport evaluate(const std::vector<std::pair<std::string, kinematics::MotionClip>>& clips,
                      const kinematics::Skeleton& skel, const std::vector<audio::BeatGrid>& music_beats,
                      const EvaluationOptions& opts) {
  if (!music_beats.empty() && music_beats.size() != clips.size())
    throw ShapeMismatch("expected one beat grid per clip");
  MetricReport report;
  if (!clips.empty()) report.fps = clips.front().second.fps();
  MatrixXd kinetic(static_cast<Eigen::Index>(clips.size()), skel.joint_count());
  MatrixXd geometric(static_cast<Eigen::Index>(clips.size()), kGeometricFeatureCount);
  for (std::size_t k = 0; k < clips.size(); ++k) {
    const auto& [id, clip] = clips[k];
    if (std::abs(clip.fps() - report.fps) > 1e-9) throw FpsMismatch("clips in one report must share a frame rate");
    auto m = evaluate_clip(id, clip, skel, music_beats.empty() ? nullptr : &music_beats[k], opts);
    kinetic.row(static_cast<Eigen::Index>(k)) = m.kinetic.transpose();
    geometric.row(static_cast<Eigen::Index>(k)) = m.geometric.transpose();
    report.clips.push_back(std::move(m));
  }
  if (clips.size() >= 2) {
    report.set_metrics["dist_k"] = diversity(kinetic);
    report.set_metrics["dist_g"] = diversity(geometric);
  }
  return report;
}

}  // namespace edge::metrics
