#pragma once

#include <Eigen/Core>

#include "edge/autograd.hpp"
#include "edge/kinematics.hpp"

namespace edge::denoiser {

/// How raw contact outputs become the [0, 1] weights used by the contact
/// consistency term.
enum class ContactActivation { Clamp, Sigmoid };

struct LossWeights {
  double pos = 1.0;
  double vel = 1.0;
  double contact = 1.0;

  void validate() const;
};

/// Differentiable FK: N x dim poses -> N x 3J joint positions.
ag::Tensor forward_kinematics(const ag::Tensor& poses, const kinematics::Skeleton& skel);

/// Mean squared error over every entry.
ag::Tensor loss_simple(const ag::Tensor& x, const ag::Tensor& x_hat);

/// (1/N) sum_i ||FK(x_i) - FK(x_hat_i)||^2 over all joint coordinates.
ag::Tensor loss_joint(const ag::Tensor& x, const ag::Tensor& x_hat, const kinematics::Skeleton& skel);

/// (1/(N-1)) sum_i ||(x_{i+1} - x_i) - (x_hat_{i+1} - x_hat_i)||^2 on the raw
/// pose representation.
ag::Tensor loss_vel(const ag::Tensor& x, const ag::Tensor& x_hat);

/// (1/(N-1)) sum_i sum_k ||b_hat_{i,k} * (p_k(i+1) - p_k(i))||^2 where p_k is
/// the FK position of contact joint k and b_hat comes from the prediction's
/// own contact channels. Gradient reaches both the motion and the contacts.
ag::Tensor loss_contact(const ag::Tensor& x_hat, const kinematics::Skeleton& skel,
                        ContactActivation activation = ContactActivation::Clamp);

struct LossBreakdown {
  ag::Tensor total;
  double simple = 0.0;
  double joint = 0.0;
  double vel = 0.0;
  double contact = 0.0;
};

LossBreakdown total_loss(const ag::Tensor& x, const ag::Tensor& x_hat, const kinematics::Skeleton& skel,
                         const LossWeights& weights, ContactActivation activation = ContactActivation::Clamp);

// Value-only conveniences.
double loss_simple(const Eigen::MatrixXd& x, const Eigen::MatrixXd& x_hat);
double loss_joint(const Eigen::MatrixXd& x, const Eigen::MatrixXd& x_hat, const kinematics::Skeleton& skel);
double loss_vel(const Eigen::MatrixXd& x, const Eigen::MatrixXd& x_hat);
double loss_contact(const Eigen::MatrixXd& x_hat, const kinematics::Skeleton& skel,
                    ContactActivation activation = ContactActivation::Clamp);
double total_loss(const Eigen::MatrixXd& x, const Eigen::MatrixXd& x_hat, const kinematics::Skeleton& skel,
                  const LossWeights& weights, ContactActivation activation = ContactActivation::Clamp);

}  // namespace edge::denoiser
