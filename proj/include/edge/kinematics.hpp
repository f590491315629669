#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace edge::kinematics {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Rot6 = Eigen::Matrix<double, 6, 1>;

/// Index of the vertical axis. Motion is z-up throughout.
inline constexpr int kUpAxis = 2;

/// Joint tree used by forward kinematics. The default is the 24-joint SMPL
/// topology; tests build small chains directly.
struct Skeleton {
  std::vector<std::string> names;
  std::vector<int> parents;  // root is -1, parents[j] < j
  std::vector<Vec3> offsets;  // rest offset from parent, in the parent's frame

  /// Joints whose motion the contact channels describe, in channel order:
  /// left heel, left toe, right heel, right toe.
  std::array<int, 4> contact_joints{7, 10, 8, 11};

  int joint_count() const { return static_cast<int>(parents.size()); }

  /// Throws InvalidSkeleton unless there is exactly one root at index 0,
  /// every parent precedes its child and all offsets are finite.
  void validate() const;

  static Skeleton smpl();
  /// Text format: one "name parent ox oy oz" line per joint.
  static Skeleton load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

/// Column layout of one pose frame: contacts, per-joint 6-DOF rotations, root
/// translation. For 24 joints this is 4 + 144 + 3 = 151.
struct PoseLayout {
  int joints = 24;

  static constexpr int kContacts = 4;
  constexpr int dim() const { return kContacts + 6 * joints + 3; }
  constexpr int contact_offset() const { return 0; }
  constexpr int rotation_offset(int joint = 0) const { return kContacts + 6 * joint; }
  constexpr int translation_offset() const { return kContacts + 6 * joints; }
  /// "b4|rot6d144|trans3" for the default layout.
  std::string descriptor() const;
};

inline constexpr int kSmplPoseDim = PoseLayout{}.dim();

/// N x dim frame matrix at a fixed frame rate.
class MotionClip {
 public:
  MotionClip() = default;
  MotionClip(Eigen::MatrixXd frames, double fps, int joints = 24);

  const Eigen::MatrixXd& frames() const { return frames_; }
  Eigen::MatrixXd& frames() { return frames_; }
  double fps() const { return fps_; }
  PoseLayout layout() const { return layout_; }
  Eigen::Index frame_count() const { return frames_.rows(); }

  Rot6 rotation(Eigen::Index frame, int joint) const;
  Vec3 root_translation(Eigen::Index frame) const;
  Eigen::Vector4d contacts(Eigen::Index frame) const;

 private:
  Eigen::MatrixXd frames_;
  double fps_ = 30.0;
  PoseLayout layout_;
};

/// Gram-Schmidt map from two stacked 3-vectors to a rotation whose first two
/// columns span them. Throws DegenerateRotation on near-zero or parallel input.
Mat3 rot6d_to_matrix(const Rot6& r);

/// First two columns of R. Throws NotARotation if R is not orthonormal with
/// determinant +1 to within 1e-4.
Rot6 matrix_to_rot6d(const Mat3& R);

/// Vector-Jacobian product of rot6d_to_matrix: gradient w.r.t. r given the
/// gradient w.r.t. the output matrix.
Rot6 rot6d_to_matrix_vjp(const Rot6& r, const Mat3& grad_matrix);

/// Joint positions for every frame, N x (3 * joints), joint j in columns
/// [3j, 3j+3). Frames are rows of a pose matrix in `layout`.
Eigen::MatrixXd forward_kinematics(const Skeleton& skel, const Eigen::MatrixXd& poses);
Eigen::MatrixXd forward_kinematics(const Skeleton& skel, const MotionClip& clip);

/// Gradient w.r.t. the pose matrix of <grad_positions, FK(poses)>. Contact
/// columns receive zero.
Eigen::MatrixXd forward_kinematics_vjp(const Skeleton& skel, const Eigen::MatrixXd& poses,
                                       const Eigen::MatrixXd& grad_positions);

/// Per-frame global rotation of every joint, composed along the chain.
std::vector<std::vector<Mat3>> global_rotations(const Skeleton& skel, const Eigen::MatrixXd& poses);

/// Forward difference scaled to per-second units: out[i] = (v[i+1] - v[i]) * fps.
Eigen::MatrixXd finite_difference(const Eigen::MatrixXd& values, double fps);

struct ContactThresholds {
  double height = 0.05;  // meters above the clip's ground plane
  double speed = 0.3;    // meters per second
};

/// N x 4 binary labels for the skeleton's contact joints. The ground plane is
/// the lowest contact-joint height over the clip.
Eigen::MatrixXd extract_contact_labels(const MotionClip& clip, const Skeleton& skel,
                                       const ContactThresholds& thresholds = {});
Eigen::MatrixXd extract_contact_labels(const Eigen::MatrixXd& positions, double fps,
                                       const std::array<int, 4>& contact_joints,
                                       const ContactThresholds& thresholds = {});

// ---- motion files --------------------------------------------------------

/// Writes the motion container: header (frames, fps, layout, extra fields)
/// followed by N x dim float32 values, row-major.
void write_motion(const std::filesystem::path& path, const MotionClip& clip,
                  const std::vector<std::pair<std::string, std::string>>& extra = {});

MotionClip read_motion(const std::filesystem::path& path);

/// Header fields of a motion file without loading frames.
std::vector<std::pair<std::string, std::string>> read_motion_header(const std::filesystem::path& path);

}  // namespace edge::kinematics
