#include <doctest.h>

#include <cmath>
#include <vector>

#include "edge/errors.hpp"
#include "edge/kinematics.hpp"
#include "edge/metrics.hpp"
#include "support.hpp"

using namespace edge;
using namespace edge::metrics;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

const kinematics::Skeleton& smpl() {
  static const auto s = kinematics::Skeleton::smpl();
  return s;
}

MatrixXd rest_positions(int frames) { return kinematics::forward_kinematics(smpl(), test::rest_poses(frames, 24)); }

void set_joint(MatrixXd& pos, int frame, int j, const Eigen::Vector3d& p) { pos.block<1, 3>(frame, 3 * j) = p.transpose(); }
Eigen::Vector3d get_joint(const MatrixXd& pos, int frame, int j) { return pos.block<1, 3>(frame, 3 * j).transpose(); }

/// Rigid transform of every joint: rotation about the vertical axis then shift.
MatrixXd transformed(const MatrixXd& pos, double yaw, const Eigen::Vector3d& shift) {
  const Eigen::Matrix3d r = Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  MatrixXd out = pos;
  for (Eigen::Index i = 0; i < pos.rows(); ++i)
    for (int j = 0; j < 24; ++j) set_joint(out, static_cast<int>(i), j, r * get_joint(pos, static_cast<int>(i), j) + shift);
  return out;
}

}  // namespace

TEST_CASE("PFC on a static clip is zero and flagged degenerate") {
  const auto r = pfc(rest_positions(10), smpl());
  CHECK(r.value == 0.0);
  CHECK(r.degenerate);
  CHECK_THROWS_AS(pfc(rest_positions(2), smpl()), TooShort);
  CHECK_THROWS_AS(pfc(MatrixXd::Zero(5, 30), smpl()), ShapeMismatch);
}

TEST_CASE("PFC is zero when the feet are pinned and the root accelerates") {
  MatrixXd pos = rest_positions(6);
  for (int i = 0; i < 6; ++i) set_joint(pos, i, 0, Eigen::Vector3d(0.1 * i * i, 0.0, 0.0));
  const auto r = pfc(pos, smpl());
  CHECK_FALSE(r.degenerate);
  CHECK(r.value == 0.0);
}

TEST_CASE("PFC four-frame hand oracle") {
  // root (0,0,0),(0,0,0),(1,0,0),(3,0,0); every foot joint moves one unit per frame
  MatrixXd pos = rest_positions(4);
  const double root_x[] = {0.0, 0.0, 1.0, 3.0};
  for (int i = 0; i < 4; ++i) {
    set_joint(pos, i, 0, Eigen::Vector3d(root_x[i], 0.0, 0.0));
    for (int j : smpl().contact_joints) set_joint(pos, i, j, get_joint(pos, 0, j) + Eigen::Vector3d(0.0, i, 0.0));
  }

  // literal evaluation: a_i for the two interior frames, unit foot speeds
  const int N = 4;
  std::vector<double> a_norm;
  for (int i = 1; i < N - 1; ++i) {
    Eigen::Vector3d a(root_x[i + 1] - 2 * root_x[i] + root_x[i - 1], 0.0, 0.0);
    a.z() = std::max(a.z(), 0.0);
    a_norm.push_back(a.norm());
  }
  const double max_a = *std::max_element(a_norm.begin(), a_norm.end());
  double sum = 0.0;
  for (double a : a_norm) sum += a * 1.0 * 1.0;
  const double oracle = sum / (N * max_a);

  CHECK(oracle == doctest::Approx(0.5));
  CHECK(std::abs(pfc(pos, smpl()).value - oracle) < 1e-9);
}

TEST_CASE("PFC clamps downward vertical acceleration") {
  MatrixXd pos = rest_positions(3);
  set_joint(pos, 1, 0, Eigen::Vector3d(0.0, 0.0, 1.0));  // a_z = -2 at the middle frame
  for (int i = 0; i < 3; ++i)
    for (int j : smpl().contact_joints) set_joint(pos, i, j, get_joint(pos, 0, j) + Eigen::Vector3d(0.0, i, 0.0));
  const auto r = pfc(pos, smpl());
  CHECK(r.degenerate);
  CHECK(r.value == 0.0);
}

TEST_CASE("PFC is invariant to translation and yaw") {
  Rng rng(1);
  const MatrixXd poses = test::random_poses(rng, 12, 24, 0.3);
  const MatrixXd pos = kinematics::forward_kinematics(smpl(), poses);
  const double base = pfc(pos, smpl()).value;
  CHECK(base > 0.0);
  for (double yaw : {0.3, -1.7, 3.0}) {
    const MatrixXd moved = transformed(pos, yaw, Eigen::Vector3d(2.0, -5.0, 0.7));
    CHECK(std::abs(pfc(moved, smpl()).value - base) < 1e-12 * std::max(1.0, base));
  }
}

TEST_CASE("horizontal foot speed ignores vertical foot motion") {
  MatrixXd pos = rest_positions(5);
  for (int i = 0; i < 5; ++i) {
    set_joint(pos, i, 0, Eigen::Vector3d(0.05 * i * i, 0.0, 0.0));
    for (int j : smpl().contact_joints) set_joint(pos, i, j, get_joint(pos, 0, j) + Eigen::Vector3d(0.0, 0.0, 0.1 * i));
  }
  CHECK(pfc(pos, smpl()).value > 0.0);
  CHECK(pfc(pos, smpl(), PfcOptions{true}).value == 0.0);
}

TEST_CASE("kinematic beats") {
  // only the root moves; per-frame displacement |sin(pi i / 10)|
  const int N = 31;
  MatrixXd pos = rest_positions(N);
  double x = 0.0;
  for (int i = 0; i < N; ++i) {
    set_joint(pos, i, 0, Eigen::Vector3d(x, 0.0, 0.0));
    x += std::abs(std::sin(M_PI * i / 10.0));
  }
  const auto beats = kinematic_beats(pos, 30.0);
  REQUIRE(beats.size() == 2);
  CHECK(beats[0] == doctest::Approx(10.0 / 30.0));
  CHECK(beats[1] == doctest::Approx(20.0 / 30.0));

  MatrixXd constant = rest_positions(20);
  for (int i = 0; i < 20; ++i) set_joint(constant, i, 3, Eigen::Vector3d(0.125 * i, 0.0, 0.0));  // exact steps, no rounding ties
  CHECK(kinematic_beats(constant, 30.0).empty());

  MatrixXd slowing = rest_positions(20);
  double y = 0.0;
  for (int i = 0; i < 20; ++i) {
    set_joint(slowing, i, 3, Eigen::Vector3d(0.0, y, 0.0));
    y += 1.0 / (i + 1.0);
  }
  CHECK(kinematic_beats(slowing, 30.0).empty());
  CHECK_THROWS_AS(kinematic_beats(rest_positions(2), 30.0), TooShort);
}

TEST_CASE("beat alignment examples") {
  const std::vector<double> music = {0.5, 1.0, 1.5};
  CHECK(beat_alignment(music, music, 0.1) == doctest::Approx(1.0));
  CHECK(beat_alignment({}, music, 0.1) == 0.0);
  CHECK(beat_alignment({1.0 + 0.1}, std::vector<double>{1.0}, 0.1) == doctest::Approx(std::exp(-0.5)));
  CHECK_THROWS_AS(beat_alignment(music, std::vector<double>{}, 0.1), EmptyMusicBeats);
  audio::BeatGrid grid;
  grid.beat_times = music;
  CHECK(beat_alignment(music, grid, 0.1) == doctest::Approx(1.0));
}

TEST_CASE("beat alignment is bounded and decays with a common shift") {
  Rng rng(2);
  std::vector<double> music;
  double t = 0.0;
  for (int i = 0; i < 12; ++i) music.push_back(t += rng.uniform(0.8, 1.2));
  double previous = 1.0 + 1e-12;
  for (double shift = 0.0; shift <= 0.4; shift += 0.02) {
    std::vector<double> kin;
    for (double b : music) kin.push_back(b + shift);
    const double v = beat_alignment(kin, music, 0.1);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(v <= previous);
    previous = v;
  }
}

TEST_CASE("kinetic features") {
  CHECK(kinetic_features(rest_positions(5), 30.0).isZero());
  const double v = 0.6;
  MatrixXd pos = rest_positions(8);
  for (int i = 0; i < 8; ++i) set_joint(pos, i, 5, get_joint(pos, 0, 5) + Eigen::Vector3d(0.0, v * i / 30.0, 0.0));
  const VectorXd k = kinetic_features(pos, 30.0);
  REQUIRE(k.size() == 24);
  for (int j = 0; j < 24; ++j) CHECK(k(j) == doctest::Approx(j == 5 ? v * v : 0.0));

  Rng rng(3);
  const MatrixXd moving = kinematics::forward_kinematics(smpl(), test::random_poses(rng, 6, 24));
  MatrixXd doubled = moving;
  for (Eigen::Index i = 1; i < moving.rows(); ++i) doubled.row(i) = doubled.row(i - 1) + 2.0 * (moving.row(i) - moving.row(i - 1));
  CHECK((kinetic_features(doubled, 30.0) - 4.0 * kinetic_features(moving, 30.0)).cwiseAbs().maxCoeff() < 1e-9);
  CHECK_THROWS_AS(kinetic_features(rest_positions(1), 30.0), TooShort);
}

TEST_CASE("geometric features of the rest pose") {
  // Hand evaluation on the rest offsets: the T-pose only spreads the hands
  // wider than twice the shoulder width; every other predicate is false.
  const VectorXd g = geometric_features(rest_positions(1), smpl());
  REQUIRE(g.size() == kGeometricFeatureCount);
  REQUIRE(geometric_feature_names().size() == static_cast<std::size_t>(kGeometricFeatureCount));
  for (int f = 0; f < kGeometricFeatureCount; ++f)
    CHECK_MESSAGE(g(f) == (geometric_feature_names()[static_cast<std::size_t>(f)] == "hands_wide_apart" ? 1.0 : 0.0),
                  geometric_feature_names()[static_cast<std::size_t>(f)]);
  CHECK(geometric_features(rest_positions(7), smpl()) == g);
  CHECK(std::string(kGeometricFeatureVersion) == "geo-v1");
}

TEST_CASE("geometric features are fractions") {
  Rng rng(4);
  const MatrixXd pos = kinematics::forward_kinematics(smpl(), test::random_poses(rng, 20, 24));
  const VectorXd g = geometric_features(pos, smpl());
  CHECK(g.minCoeff() >= 0.0);
  CHECK(g.maxCoeff() <= 1.0);
  const MatrixXd per_frame = geometric_predicates(pos, smpl());
  CHECK(per_frame.rows() == 20);
  CHECK((per_frame.array() * (1.0 - per_frame.array())).isZero());
  CHECK_THROWS_AS(geometric_features(MatrixXd::Zero(3, 9), test::three_joint_chain()), InvalidSkeleton);
}

TEST_CASE("diversity examples") {
  CHECK(diversity(MatrixXd::Ones(4, 3)) == 0.0);
  MatrixXd two(2, 2);
  two << 0, 0, 3, 4;
  CHECK(diversity(two) == doctest::Approx(5.0));
  MatrixXd three(3, 2);
  three << 0, 0, 3, 0, 0, 4;
  CHECK(diversity(three) == doctest::Approx((3.0 + 4.0 + 5.0) / 3.0));
  CHECK_THROWS_AS(diversity(MatrixXd::Zero(1, 3)), TooFewClips);
}

TEST_CASE("Frechet distance of diagonal Gaussians matches the closed form") {
  // orthogonal zero-mean +-1 columns give an exactly diagonal sample covariance
  MatrixXd h(4, 3);
  h << 1, 1, 1, 1, -1, -1, -1, 1, -1, -1, -1, 1;
  const Eigen::Vector3d mu_p(0.5, -1.0, 2.0), mu_q(0.0, 0.3, 2.5);
  const Eigen::Vector3d s_p(1.0, 0.2, 3.0), s_q(0.5, 0.7, 3.0);
  MatrixXd xp(4, 3), xq(4, 3);
  for (int f = 0; f < 3; ++f) {
    xp.col(f) = mu_p(f) + s_p(f) * h.col(f).array();
    xq.col(f) = mu_q(f) + s_q(f) * h.col(f).array();
  }
  const auto p = FeatureDistribution::from_samples(xp), q = FeatureDistribution::from_samples(xq);
  const double jitter = 1e-6;
  double closed = 0.0;
  for (int f = 0; f < 3; ++f) {
    const double var_p = s_p(f) * s_p(f) * 4.0 / 3.0 + jitter, var_q = s_q(f) * s_q(f) * 4.0 / 3.0 + jitter;
    closed += std::pow(mu_p(f) - mu_q(f), 2) + std::pow(std::sqrt(var_p) - std::sqrt(var_q), 2);
  }
  CHECK(std::abs(frechet_distance(p, q, jitter) - closed) < 1e-6);
  CHECK(frechet_distance(p, q) == doctest::Approx(frechet_distance(q, p)).epsilon(1e-12));
}

TEST_CASE("Frechet distance properties") {
  Rng rng(5);
  const MatrixXd a = rng.normal_matrix(30, 6), b = rng.normal_matrix(25, 6);
  const auto p = FeatureDistribution::from_samples(a), q = FeatureDistribution::from_samples(b);
  CHECK(frechet_distance(p, p) < 1e-6);
  CHECK(frechet_distance(p, q) > 0.0);
  CHECK(std::abs(frechet_distance(p, q) - frechet_distance(q, p)) < 1e-9);

  // a mean shift alone adds its squared length
  MatrixXd shifted = a;
  shifted.col(2).array() += 2.0;
  CHECK(frechet_distance(p, FeatureDistribution::from_samples(shifted)) == doctest::Approx(4.0).epsilon(1e-6));

  // rank-deficient covariances (fewer samples than features) stay finite
  const auto thin = FeatureDistribution::from_samples(rng.normal_matrix(3, 6));
  CHECK(std::isfinite(frechet_distance(thin, q)));
  CHECK(p.covariance.isApprox(p.covariance.transpose()));

  CHECK_THROWS_AS(frechet_distance(p, FeatureDistribution::from_samples(rng.normal_matrix(5, 4))), DimensionMismatch);
  CHECK_THROWS_AS(FeatureDistribution::from_samples(rng.normal_matrix(1, 4)), TooFewClips);
}

TEST_CASE("bone length drift") {
  Rng rng(6);
  const MatrixXd fk = kinematics::forward_kinematics(smpl(), test::random_poses(rng, 15, 24));
  CHECK(bone_length_drift(fk, smpl()) < 1e-6);
  CHECK(bone_length_drift(rest_positions(1), smpl()) == 0.0);

  // the head bone at 0.9, 1.0 and 1.1 times its rest length
  MatrixXd stretched = rest_positions(3);
  const Eigen::Vector3d neck = get_joint(stretched, 0, 12), head = get_joint(stretched, 0, 15);
  const double scale[] = {0.9, 1.0, 1.1};
  for (int i = 0; i < 3; ++i) set_joint(stretched, i, 15, neck + scale[i] * (head - neck));
  CHECK(bone_length_drift(stretched, smpl()) == doctest::Approx(0.2).epsilon(1e-9));

  MatrixXd collapsed = rest_positions(2);
  set_joint(collapsed, 0, 15, get_joint(collapsed, 0, 12));
  set_joint(collapsed, 1, 15, get_joint(collapsed, 1, 12));
  CHECK_THROWS_AS(bone_length_drift(collapsed, smpl()), ZeroLengthBone);
}

TEST_CASE("evaluation report") {
  Rng rng(7);
  std::vector<std::pair<std::string, kinematics::MotionClip>> clips;
  clips.emplace_back("still", kinematics::MotionClip(test::rest_poses(20, 24), 30.0));
  clips.emplace_back("moving", kinematics::MotionClip(test::random_poses(rng, 20, 24, 0.2), 30.0));
  audio::BeatGrid grid;
  grid.beat_times = {0.2, 0.4};
  const auto report = evaluate(clips, smpl(), {grid, audio::BeatGrid{}});

  REQUIRE(report.clips.size() == 2);
  CHECK(report.clips[0].pfc == 0.0);
  CHECK(report.clips[0].pfc_degenerate);
  CHECK(report.clips[0].beat_alignment == 0.0);
  CHECK(report.clips[1].beat_alignment < 0.0);
  CHECK(report.clips[1].pfc > 0.0);
  CHECK(report.set_metrics.count("dist_k") == 1);
  CHECK(report.set_metrics.count("dist_g") == 1);

  const auto agg = report.aggregate("pfc");
  CHECK(agg.count == 2);
  CHECK(agg.mean == doctest::Approx(0.5 * report.clips[1].pfc));
  CHECK(agg.std == doctest::Approx(0.5 * report.clips[1].pfc));
  CHECK(report.aggregate("beat_alignment").count == 1);
  CHECK_THROWS_AS(report.aggregate("elo"), ConfigError);

  const auto text = report.to_text();
  CHECK(text.find("clip: still") != std::string::npos);
  CHECK(text.find("pfc_degenerate: true") != std::string::npos);
  CHECK(text.find("aggregate:") != std::string::npos);
  CHECK(text.find("dist_k:") != std::string::npos);
  CHECK(text.find("geometric_features: geo-v1") != std::string::npos);

  const auto csv = report.to_csv();
  CHECK(csv.rfind("clip,pfc,pfc_degenerate,beat_alignment,bone_drift\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

  test::TempDir dir("report");
  report.write_text(dir / "r.txt");
  report.write_csv(dir / "r.csv");
  CHECK(std::filesystem::file_size(dir / "r.txt") == text.size());
  CHECK(std::filesystem::file_size(dir / "r.csv") == csv.size());

  CHECK_THROWS_AS(evaluate(clips, smpl(), {grid}), ShapeMismatch);
}
