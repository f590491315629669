#include "edge/kinematics.hpp"

#include <cmath>
#include <limits>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <Eigen/Geometry>

#include "edge/container.hpp"
#include "edge/errors.hpp"

namespace edge::kinematics {

namespace {

constexpr double kDegenerateNorm = 1e-8;
constexpr char kMotionMagic[] = "EDGEMOTION";

// SMPL neutral mean-shape joint offsets (y-up, meters), converted to z-up on
// load by mapping (x, y, z) -> (x, -z, y).
constexpr double kSmplOffsetsYUp[24][3] = {
    {0.0, 0.0, 0.0},
    {0.05858135, -0.08228004, -0.01766408},
    {-0.06030973, -0.09051332, -0.01354254},
    {0.00443945, 0.12440352, -0.03838522},
    {0.04345142, -0.38646945, 0.008037},
    {-0.04325663, -0.38368791, -0.00484304},
    {0.00448844, 0.1379564, 0.02682033},
    {-0.01479032, -0.42687458, -0.037428},
    {0.01905555, -0.4200455, -0.03456167},
    {-0.00226458, 0.05603239, 0.00285505},
    {0.04105436, -0.06028581, 0.12204243},
    {-0.03483987, -0.06210566, 0.13032329},
    {-0.0133902, 0.21163553, -0.03346758},
    {0.07170245, 0.11399969, -0.01889817},
    {-0.08295366, 0.11247234, -0.02370739},
    {0.01011321, 0.08893734, 0.05040987},
    {0.12292141, 0.04520509, -0.019046},
    {-0.11322832, 0.04685326, -0.00847207},
    {0.2553319, -0.01564902, -0.02294649},
    {-0.26012748, -0.01436928, -0.03126873},
    {0.26570925, 0.01269811, -0.00737473},
    {-0.26910836, 0.00679372, -0.00602676},
    {0.08669055, -0.01063603, -0.01559429},
    {-0.0887537, -0.00865157, -0.01010708},
};

constexpr int kSmplParents[24] = {-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21};

constexpr const char* kSmplNames[24] = {
    "pelvis",     "left_hip",      "right_hip",      "spine1",     "left_knee",   "right_knee",
    "spine2",     "left_ankle",    "right_ankle",    "spine3",     "left_foot",   "right_foot",
    "neck",       "left_collar",   "right_collar",   "head",       "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow",   "left_wrist",     "right_wrist", "left_hand",  "right_hand",
};

Rot6 rotation_at(const Eigen::MatrixXd& poses, Eigen::Index frame, const PoseLayout& layout, int joint) {
  return poses.block<1, 6>(frame, layout.rotation_offset(joint)).transpose();
}

PoseLayout layout_for(const Skeleton& skel, const Eigen::MatrixXd& poses) {
  PoseLayout layout{skel.joint_count()};
  if (poses.cols() != layout.dim())
    throw ShapeMismatch("pose matrix has " + std::to_string(poses.cols()) + " columns, skeleton needs " +
                        std::to_string(layout.dim()));
  return layout;
}

Mat3 rotation_or_throw(const Eigen::MatrixXd& poses, Eigen::Index frame, const PoseLayout& layout, int joint) {
  try {
    return rot6d_to_matrix(rotation_at(poses, frame, layout, joint));
  } catch (const DegenerateRotation& e) {
    throw DegenerateRotation("frame " + std::to_string(frame) + ", joint " + std::to_string(joint) + ": " +
                             e.what());
  }
}

}  // namespace

// ---- Skeleton -------------------------------------------------------------

void Skeleton::validate() const {
  const auto n = parents.size();
  if (n == 0) throw InvalidSkeleton("no joints");
  if (offsets.size() != n || (!names.empty() && names.size() != n))
    throw InvalidSkeleton("parents, offsets and names differ in length");
  if (parents[0] != -1) throw InvalidSkeleton("joint 0 must be the root");
  for (std::size_t j = 1; j < n; ++j) {
    if (parents[j] < 0) throw InvalidSkeleton("more than one root (joint " + std::to_string(j) + ")");
    if (parents[j] >= static_cast<int>(j))
      throw InvalidSkeleton("parent of joint " + std::to_string(j) + " does not precede it");
  }
  for (std::size_t j = 0; j < n; ++j)
    if (!offsets[j].allFinite()) throw InvalidSkeleton("non-finite offset at joint " + std::to_string(j));
  for (int c : contact_joints)
    if (c < 0 || c >= static_cast<int>(n)) throw InvalidSkeleton("contact joint index out of range");
}

Skeleton Skeleton::smpl() {
  Skeleton s;
  for (int j = 0; j < 24; ++j) {
    s.names.emplace_back(kSmplNames[j]);
    s.parents.push_back(kSmplParents[j]);
    const auto* o = kSmplOffsetsYUp[j];
    s.offsets.emplace_back(o[0], -o[2], o[1]);
  }
  return s;
}

Skeleton Skeleton::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open skeleton file " + path.string());
  Skeleton s;
  bool explicit_contacts = false;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (line[0] == '#') {
      std::string hash, key;
      ls >> hash >> key;
      if (key == "contacts") {
        for (auto& c : s.contact_joints) ls >> c;
        if (ls.fail()) throw InvalidSkeleton(path.string() + ":" + std::to_string(lineno) + ": bad contacts line");
        explicit_contacts = true;
      }
      continue;
    }
    std::string name;
    int parent = 0;
    Vec3 o;
    ls >> name >> parent >> o.x() >> o.y() >> o.z();
    if (ls.fail()) throw InvalidSkeleton(path.string() + ":" + std::to_string(lineno) + ": expected 'name parent ox oy oz'");
    s.names.push_back(name);
    s.parents.push_back(parent);
    s.offsets.push_back(o);
  }
  if (!explicit_contacts && s.joint_count() != 24)
    throw InvalidSkeleton(path.string() + ": non-SMPL skeletons need a '# contacts a b c d' line");
  s.validate();
  return s;
}

void Skeleton::save(const std::filesystem::path& path) const {
  validate();
  std::ofstream out(path);
  if (!out) throw IoError("cannot write skeleton file " + path.string());
  out << "# contacts " << contact_joints[0] << ' ' << contact_joints[1] << ' ' << contact_joints[2] << ' '
      << contact_joints[3] << '\n';
  out << std::setprecision(9);
  for (int j = 0; j < joint_count(); ++j) {
    const std::string name = names.empty() ? "joint" + std::to_string(j) : names[j];
    out << name << ' ' << parents[j] << ' ' << offsets[j].x() << ' ' << offsets[j].y() << ' ' << offsets[j].z()
        << '\n';
  }
}

std::string PoseLayout::descriptor() const {
  return "b4|rot6d" + std::to_string(6 * joints) + "|trans3";
}

// ---- MotionClip -----------------------------------------------------------

MotionClip::MotionClip(Eigen::MatrixXd frames, double fps, int joints)
    : frames_(std::move(frames)), fps_(fps), layout_{joints} {
  if (!(fps > 0.0)) throw ShapeMismatch("fps must be positive");
  if (frames_.cols() != layout_.dim())
    throw ShapeMismatch("clip has " + std::to_string(frames_.cols()) + " columns, layout needs " +
                        std::to_string(layout_.dim()));
}

Rot6 MotionClip::rotation(Eigen::Index frame, int joint) const {
  return rotation_at(frames_, frame, layout_, joint);
}

Vec3 MotionClip::root_translation(Eigen::Index frame) const {
  return frames_.block<1, 3>(frame, layout_.translation_offset()).transpose();
}

Eigen::Vector4d MotionClip::contacts(Eigen::Index frame) const {
  return frames_.block<1, 4>(frame, 0).transpose();
}

// ---- rotations -------------------------------------------------------------

Mat3 rot6d_to_matrix(const Rot6& r) {
  if (!r.allFinite()) throw DegenerateRotation("non-finite 6-DOF input");
  const Vec3 a1 = r.head<3>();
  const Vec3 a2 = r.tail<3>();
  const double n1 = a1.norm();
  if (n1 < kDegenerateNorm || a2.norm() < kDegenerateNorm) throw DegenerateRotation("near-zero column");
  const Vec3 b1 = a1 / n1;
  const Vec3 u2 = a2 - b1.dot(a2) * b1;
  const double n2 = u2.norm();
  if (n2 < kDegenerateNorm) throw DegenerateRotation("columns are parallel");
  const Vec3 b2 = u2 / n2;
  Mat3 R;
  R.col(0) = b1;
  R.col(1) = b2;
  R.col(2) = b1.cross(b2);
  return R;
}

Rot6 matrix_to_rot6d(const Mat3& R) {
  constexpr double tol = 1e-4;
  if (!R.allFinite() || (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() > tol ||
      std::abs(R.determinant() - 1.0) > tol)
    throw NotARotation("matrix is not a proper rotation");
  Rot6 out;
  out << R.col(0), R.col(1);
  return out;
}

Rot6 rot6d_to_matrix_vjp(const Rot6& r, const Mat3& grad) {
  const Vec3 a1 = r.head<3>();
  const Vec3 a2 = r.tail<3>();
  const double n1 = a1.norm();
  const Vec3 b1 = a1 / n1;
  const double proj = b1.dot(a2);
  const Vec3 u2 = a2 - proj * b1;
  const double n2 = u2.norm();
  const Vec3 b2 = u2 / n2;

  const Vec3 g3 = grad.col(2);
  Vec3 gb1 = grad.col(0) + b2.cross(g3);
  const Vec3 gb2 = grad.col(1) + g3.cross(b1);

  const Vec3 gu2 = (gb2 - b2 * b2.dot(gb2)) / n2;
  const Vec3 ga2 = gu2 - b1 * b1.dot(gu2);
  gb1 += -proj * gu2 - a2 * b1.dot(gu2);
  const Vec3 ga1 = (gb1 - b1 * b1.dot(gb1)) / n1;

  Rot6 out;
  out << ga1, ga2;
  return out;
}

// ---- forward kinematics ----------------------------------------------------

std::vector<std::vector<Mat3>> global_rotations(const Skeleton& skel, const Eigen::MatrixXd& poses) {
  const auto layout = layout_for(skel, poses);
  const int J = skel.joint_count();
  std::vector<std::vector<Mat3>> out(static_cast<std::size_t>(poses.rows()), std::vector<Mat3>(J));
  for (Eigen::Index i = 0; i < poses.rows(); ++i) {
    auto& G = out[static_cast<std::size_t>(i)];
    for (int j = 0; j < J; ++j) {
      const Mat3 R = rotation_or_throw(poses, i, layout, j);
      const int p = skel.parents[j];
      G[j] = p < 0 ? R : Mat3(G[p] * R);
    }
  }
  return out;
}

Eigen::MatrixXd forward_kinematics(const Skeleton& skel, const Eigen::MatrixXd& poses) {
  const auto layout = layout_for(skel, poses);
  const int J = skel.joint_count();
  Eigen::MatrixXd out(poses.rows(), 3 * J);
  std::vector<Mat3> G(J);
  for (Eigen::Index i = 0; i < poses.rows(); ++i) {
    for (int j = 0; j < J; ++j) {
      const Mat3 R = rotation_or_throw(poses, i, layout, j);
      const int p = skel.parents[j];
      if (p < 0) {
        G[j] = R;
        out.block<1, 3>(i, 3 * j) = poses.block<1, 3>(i, layout.translation_offset());
      } else {
        G[j] = G[p] * R;
        out.block<1, 3>(i, 3 * j) = out.block<1, 3>(i, 3 * p) + (G[p] * skel.offsets[j]).transpose();
      }
    }
  }
  return out;
}

Eigen::MatrixXd forward_kinematics(const Skeleton& skel, const MotionClip& clip) {
  return forward_kinematics(skel, clip.frames());
}

Eigen::MatrixXd forward_kinematics_vjp(const Skeleton& skel, const Eigen::MatrixXd& poses,
                                       const Eigen::MatrixXd& grad_positions) {
  const auto layout = layout_for(skel, poses);
  const int J = skel.joint_count();
  if (grad_positions.rows() != poses.rows() || grad_positions.cols() != 3 * J)
    throw ShapeMismatch("position gradient shape does not match FK output");

  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(poses.rows(), poses.cols());
  std::vector<Mat3> R(J), G(J), gG(J);
  std::vector<Vec3> gpos(J);
  for (Eigen::Index i = 0; i < poses.rows(); ++i) {
    for (int j = 0; j < J; ++j) {
      R[j] = rotation_or_throw(poses, i, layout, j);
      const int p = skel.parents[j];
      G[j] = p < 0 ? R[j] : Mat3(G[p] * R[j]);
      gG[j].setZero();
      gpos[j] = grad_positions.block<1, 3>(i, 3 * j).transpose();
    }
    for (int j = J - 1; j >= 0; --j) {
      const int p = skel.parents[j];
      Mat3 gR;
      if (p < 0) {
        grad.block<1, 3>(i, layout.translation_offset()) = gpos[j].transpose();
        gR = gG[j];
      } else {
        gpos[p] += gpos[j];
        gG[p] += gpos[j] * skel.offsets[j].transpose();
        gG[p] += gG[j] * R[j].transpose();
        gR = G[p].transpose() * gG[j];
      }
      grad.block<1, 6>(i, layout.rotation_offset(j)) =
          rot6d_to_matrix_vjp(rotation_at(poses, i, layout, j), gR).transpose();
    }
  }
  return grad;
}

// ---- derivatives and contacts ---------------------------------------------

Eigen::MatrixXd finite_difference(const Eigen::MatrixXd& values, double fps) {
  if (values.rows() < 2) throw TooShort("finite difference needs at least 2 rows, got " + std::to_string(values.rows()));
  const auto n = values.rows() - 1;
  return (values.bottomRows(n) - values.topRows(n)) * fps;
}

Eigen::MatrixXd extract_contact_labels(const Eigen::MatrixXd& positions, double fps,
                                       const std::array<int, 4>& contact_joints,
                                       const ContactThresholds& thresholds) {
  const auto N = positions.rows();
  if (N < 2) throw TooShort("contact labels need at least 2 frames");
  double ground = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < N; ++i)
    for (int c : contact_joints) ground = std::min(ground, positions(i, 3 * c + kUpAxis));

  const Eigen::MatrixXd velocity = finite_difference(positions, fps);
  Eigen::MatrixXd labels(N, 4);
  for (Eigen::Index i = 0; i + 1 < N; ++i) {
    for (int k = 0; k < 4; ++k) {
      const int c = contact_joints[static_cast<std::size_t>(k)];
      const double height = positions(i, 3 * c + kUpAxis) - ground;
      const double speed = velocity.block<1, 3>(i, 3 * c).norm();
      labels(i, k) = (height < thresholds.height && speed < thresholds.speed) ? 1.0 : 0.0;
    }
  }
  labels.row(N - 1) = labels.row(N - 2);
  return labels;
}

Eigen::MatrixXd extract_contact_labels(const MotionClip& clip, const Skeleton& skel,
                                       const ContactThresholds& thresholds) {
  return extract_contact_labels(forward_kinematics(skel, clip), clip.fps(), skel.contact_joints, thresholds);
}

// ---- motion files -----------------------------------------------------------

void write_motion(const std::filesystem::path& path, const MotionClip& clip,
                  const std::vector<std::pair<std::string, std::string>>& extra) {
  Container c;
  c.magic = kMotionMagic;
  c.set("frames", std::to_string(clip.frame_count()));
  std::ostringstream fps;
  fps << std::setprecision(17) << clip.fps();
  c.set("fps", fps.str());
  c.set("layout", clip.layout().descriptor());
  for (const auto& [k, v] : extra) c.set(k, v);
  const auto& f = clip.frames();
  c.payload.reserve(static_cast<std::size_t>(f.size()));
  for (Eigen::Index i = 0; i < f.rows(); ++i)
    for (Eigen::Index j = 0; j < f.cols(); ++j) c.payload.push_back(static_cast<float>(f(i, j)));
  write_container(path, c);
}

namespace {

int joints_from_layout(const std::string& layout) {
  // "b4|rot6d<6J>|trans3"
  const auto a = layout.find("|rot6d");
  const auto b = layout.find("|trans3");
  if (layout.rfind("b4", 0) != 0 || a == std::string::npos || b == std::string::npos || b <= a + 6)
    throw BadHeader("unsupported motion layout '" + layout + "'");
  const int rot = std::stoi(layout.substr(a + 6, b - a - 6));
  if (rot <= 0 || rot % 6 != 0) throw BadHeader("rotation block width must be a multiple of 6");
  return rot / 6;
}

}  // namespace

MotionClip read_motion(const std::filesystem::path& path) {
  const auto header = read_container_header(path, kMotionMagic);
  const auto frames = header.get_int("frames");
  const double fps = header.get_double("fps");
  const int joints = joints_from_layout(header.get("layout"));
  const PoseLayout layout{joints};
  if (frames < 0 || !(fps > 0.0)) throw BadHeader(path.string() + ": invalid frame count or fps");
  const auto c = read_container(path, kMotionMagic, frames * layout.dim());
  Eigen::MatrixXd m(frames, layout.dim());
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = c.payload[k++];
  return MotionClip(std::move(m), fps, joints);
}

std::vector<std::pair<std::string, std::string>> read_motion_header(const std::filesystem::path& path) {
  return read_container_header(path, kMotionMagic).fields;
}

}  // namespace edge::kinematics
