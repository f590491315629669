#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "edge/autograd.hpp"
#include "edge/diffusion.hpp"
#include "edge/rng.hpp"

namespace edge::denoiser {

struct ModelConfig {
  int layers = 8;
  int heads = 8;
  int model_dim = 512;
  int mlp_dim = 1024;
  double dropout = 0.1;
  int cond_dim = 35;
  int seq_len = 150;
  int joints = 24;
  double cond_dropout_prob = 0.25;
  double ema_decay = 0.9999;

  int pose_dim() const;
  /// Throws ConfigError on non-positive sizes, model_dim % heads != 0 or
  /// probabilities outside [0, 1].
  void validate() const;

  std::vector<std::pair<std::string, std::string>> to_fields() const;
  /// Reads the keys written by to_fields(); unknown keys are ignored.
  static ModelConfig from_fields(const std::vector<std::pair<std::string, std::string>>& fields);
};

/// Transformer-decoder denoiser predicting the clean motion x_hat(z_t, t, c).
///
/// Each frame of z_t is projected to model_dim and given a learned position
/// embedding. Music features are projected the same way (or replaced by a
/// learned null embedding) and a token derived from the timestep embedding is
/// prepended to form the cross-attention context. Every decoder layer runs
/// self-attention, cross-attention and a GELU feed-forward block, each
/// pre-normalized and modulated by a FiLM scale/shift computed from the
/// timestep embedding. A final linear layer maps back to the pose dimension.
class DenoiserModel final : public diffusion::Denoiser {
 public:
  DenoiserModel(const ModelConfig& config, std::uint64_t seed);
  // Tensors share storage on copy, so copies must go through clone().
  DenoiserModel(const DenoiserModel&) = delete;
  DenoiserModel& operator=(const DenoiserModel&) = delete;
  DenoiserModel(DenoiserModel&&) = default;
  DenoiserModel& operator=(DenoiserModel&&) = default;

  /// Independent copy of the architecture and current weights.
  DenoiserModel clone() const;

  const ModelConfig& config() const { return config_; }

  /// Differentiable forward pass. A non-null `dropout_rng` selects training
  /// mode (residual dropout active).
  ag::Tensor forward(const Eigen::MatrixXd& z, int t, const Eigen::MatrixXd* cond, Rng* dropout_rng = nullptr) const;

  /// Evaluation-mode prediction without graph construction. Throws
  /// ShapeMismatch for bad inputs and NonFiniteActivation if the output is
  /// not finite.
  Eigen::MatrixXd denoise(const Eigen::MatrixXd& z, int t, const Eigen::MatrixXd* cond) const override;

  const std::vector<std::string>& parameter_names() const { return names_; }
  std::vector<ag::Tensor>& parameters() { return params_; }
  const std::vector<ag::Tensor>& parameters() const { return params_; }
  std::vector<Eigen::MatrixXd> parameter_values() const;
  void set_parameter_values(const std::vector<Eigen::MatrixXd>& values);
  std::size_t parameter_count() const;

 private:
  struct Attention {
    ag::Tensor wq, wk, wv, wo, bo;
  };
  struct Layer {
    ag::Tensor ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
    Attention self_attn, cross_attn;
    ag::Tensor ff_w1, ff_b1, ff_w2, ff_b2;
    ag::Tensor film_w, film_b;
  };

  ag::Tensor add_param(const std::string& name, Eigen::MatrixXd init);
  ag::Tensor dense(const std::string& name, int in, int out, Rng& rng);
  ag::Tensor zeros(const std::string& name, int rows, int cols);
  ag::Tensor ones(const std::string& name, int rows, int cols);

  ag::Tensor attend(const Attention& a, const ag::Tensor& queries, const ag::Tensor& context) const;
  ag::Tensor residual_dropout(const ag::Tensor& a, Rng* rng) const;

  ModelConfig config_;
  std::vector<std::string> names_;
  std::vector<ag::Tensor> params_;

  ag::Tensor in_w_, in_b_, pos_, cond_w_, cond_b_, cond_pos_, null_cond_;
  ag::Tensor time_w1_, time_b1_, time_w2_, time_b2_, token_w_, token_b_;
  std::vector<Layer> layers_;
  ag::Tensor final_g_, final_b_, out_w_, out_b_;
};

/// Sinusoidal timestep features, 1 x dim.
Eigen::MatrixXd timestep_features(int t, int dim);

}  // namespace edge::denoiser
