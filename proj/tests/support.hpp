#pragma once

// Shared fixtures for the unit tests.

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "edge/kinematics.hpp"
#include "edge/rng.hpp"

namespace edge::test {

inline Eigen::Matrix3d random_rotation(Rng& rng) {
  Eigen::Vector3d axis;
  do {
    axis = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
  } while (axis.norm() < 1e-3);
  return Eigen::AngleAxisd(rng.uniform(-M_PI, M_PI), axis.normalized()).toRotationMatrix();
}

/// Root, a child one unit along x, a grandchild one unit along y.
inline kinematics::Skeleton three_joint_chain() {
  kinematics::Skeleton s;
  s.names = {"root", "mid", "tip"};
  s.parents = {-1, 0, 1};
  s.offsets = {Eigen::Vector3d::Zero(), Eigen::Vector3d(1, 0, 0), Eigen::Vector3d(0, 1, 0)};
  s.contact_joints = {1, 2, 1, 2};
  return s;
}

/// Poses with random rotations and translations for `joints` joints.
inline Eigen::MatrixXd random_poses(Rng& rng, int frames, int joints, double translation_scale = 0.5) {
  const kinematics::PoseLayout layout{joints};
  Eigen::MatrixXd poses = Eigen::MatrixXd::Zero(frames, layout.dim());
  for (int i = 0; i < frames; ++i) {
    for (int c = 0; c < kinematics::PoseLayout::kContacts; ++c) poses(i, c) = rng.uniform();
    for (int j = 0; j < joints; ++j)
      poses.block(i, layout.rotation_offset(j), 1, 6) = kinematics::matrix_to_rot6d(random_rotation(rng)).transpose();
    for (int k = 0; k < 3; ++k) poses(i, layout.translation_offset() + k) = translation_scale * rng.normal();
  }
  return poses;
}

/// Identity rotations everywhere, zero translation.
inline Eigen::MatrixXd rest_poses(int frames, int joints) {
  const kinematics::PoseLayout layout{joints};
  Eigen::MatrixXd poses = Eigen::MatrixXd::Zero(frames, layout.dim());
  for (int i = 0; i < frames; ++i)
    for (int j = 0; j < joints; ++j) {
      poses(i, layout.rotation_offset(j)) = 1.0;
      poses(i, layout.rotation_offset(j) + 4) = 1.0;
    }
  return poses;
}

/// Element-wise float rounding. Eigen's vectorized cast<float>() mis-rounds
/// tail elements under -O3 with this toolchain, so it is avoided here.
inline Eigen::MatrixXd float_rounded(Eigen::MatrixXd m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(m.data()[i]);
  return m;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("edge_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline bool files_equal(const std::filesystem::path& a, const std::filesystem::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  if (!fa || !fb) return false;
  const std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  const std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  return sa == sb;
}

}  // namespace edge::test
