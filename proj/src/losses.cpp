#include "edge/losses.hpp"

#include <cmath>

#include "edge/errors.hpp"

namespace edge::denoiser {

using ag::Tensor;

void LossWeights::validate() const {
  for (double w : {pos, vel, contact})
    if (!std::isfinite(w) || w < 0.0) throw ConfigError("loss weights must be finite and >= 0");
}

Tensor forward_kinematics(const Tensor& poses, const kinematics::Skeleton& skel) {
  Eigen::MatrixXd positions = kinematics::forward_kinematics(skel, poses.value());
  if (!poses.requires_grad() || !ag::grad_enabled()) return ag::constant(std::move(positions));
  const Eigen::MatrixXd input = poses.value();
  return ag::custom(poses, std::move(positions), [input, skel](const Eigen::MatrixXd& g) {
    return kinematics::forward_kinematics_vjp(skel, input, g);
  });
}

Tensor loss_simple(const Tensor& x, const Tensor& x_hat) {
  return ag::mean(ag::square(ag::sub(x_hat, x)));
}

Tensor loss_joint(const Tensor& x, const Tensor& x_hat, const kinematics::Skeleton& skel) {
  const auto diff = ag::sub(forward_kinematics(x, skel), forward_kinematics(x_hat, skel));
  return ag::scale(ag::sum(ag::square(diff)), 1.0 / static_cast<double>(x.rows()));
}

Tensor loss_vel(const Tensor& x, const Tensor& x_hat) {
  if (x.rows() < 2) throw TooShort("velocity loss needs at least 2 frames");
  const auto diff = ag::sub(ag::diff_rows(x), ag::diff_rows(x_hat));
  return ag::scale(ag::sum(ag::square(diff)), 1.0 / static_cast<double>(x.rows() - 1));
}

Tensor loss_contact(const Tensor& x_hat, const kinematics::Skeleton& skel, ContactActivation activation) {
  const auto N = x_hat.rows();
  if (N < 2) throw TooShort("contact loss needs at least 2 frames");
  const auto raw = ag::slice_cols(ag::slice_rows(x_hat, 0, N - 1), 0, kinematics::PoseLayout::kContacts);
  const auto contact = activation == ContactActivation::Clamp ? ag::clamp(raw, 0.0, 1.0) : ag::sigmoid(raw);
  const auto displacement = ag::diff_rows(forward_kinematics(x_hat, skel));

  Tensor total;
  for (int k = 0; k < kinematics::PoseLayout::kContacts; ++k) {
    const int joint = skel.contact_joints[static_cast<std::size_t>(k)];
    const auto weighted = ag::mul_col(ag::slice_cols(displacement, 3 * joint, 3), ag::slice_cols(contact, k, 1));
    const auto term = ag::sum(ag::square(weighted));
    total = total.defined() ? ag::add(total, term) : term;
  }
  return ag::scale(total, 1.0 / static_cast<double>(N - 1));
}

LossBreakdown total_loss(const Tensor& x, const Tensor& x_hat, const kinematics::Skeleton& skel,
                         const LossWeights& weights, ContactActivation activation) {
  weights.validate();
  if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols()) throw ShapeMismatch("total_loss: shapes differ");
  LossBreakdown out;
  const auto simple = loss_simple(x, x_hat);
  out.simple = simple.item();
  out.total = simple;
  if (weights.pos > 0.0) {
    const auto joint = loss_joint(x, x_hat, skel);
    out.joint = joint.item();
    out.total = ag::add(out.total, ag::scale(joint, weights.pos));
  }
  if (weights.vel > 0.0) {
    const auto vel = loss_vel(x, x_hat);
    out.vel = vel.item();
    out.total = ag::add(out.total, ag::scale(vel, weights.vel));
  }
  if (weights.contact > 0.0) {
    const auto contact = loss_contact(x_hat, skel, activation);
    out.contact = contact.item();
    out.total = ag::add(out.total, ag::scale(contact, weights.contact));
  }
  return out;
}

double loss_simple(const Eigen::MatrixXd& x, const Eigen::MatrixXd& x_hat) {
  ag::NoGradGuard guard;
  return loss_simple(ag::constant(x), ag::constant(x_hat)).item();
}

double loss_joint(const Eigen::MatrixXd& x, const Eigen::MatrixXd& x_hat, const kinematics::Skeleton& skel) {
  ag::NoGradGuard guard;
  return loss_joint(ag::constant(x), ag::constant(x_hat), skel).item();
}

double loss_vel(const Eigen::MatrixXd& x, const Eigen::MatrixXd& x_hat) {
  ag::NoGradGuard guard;
  return loss_vel(ag::constant(x), ag::constant(x_hat)).item();
}

double loss_contact(const Eigen::MatrixXd& x_hat, const kinematics::Skeleton& skel, ContactActivation activation) {
  ag::NoGradGuard guard;
  return loss_contact(ag::constant(x_hat), skel, activation).item();
}

double total_loss(const Eigen::MatrixXd& x, const Eigen::MatrixXd& x_hat, const kinematics::Skeleton& skel,
                  const LossWeights& weights, ContactActivation activation) {
  ag::NoGradGuard guard;
  return total_loss(ag::constant(x), ag::constant(x_hat), skel, weights, activation).total.item();
}

}  // namespace edge::denoiser
