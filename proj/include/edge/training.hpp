#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "edge/diffusion.hpp"
#include "edge/kinematics.hpp"
#include "edge/losses.hpp"
#include "edge/model.hpp"
#include "edge/rng.hpp"

namespace edge::denoiser {

enum class OptimizerKind { Adan, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adan;
  double lr = 4e-4;
  double beta1 = 0.98;
  double beta2 = 0.92;
  double beta3 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.02;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
  /// Cosine decay from lr to lr * min_lr_ratio over this many steps; 0 keeps
  /// the rate constant.
  long long decay_steps = 0;
  double min_lr_ratio = 0.05;

  /// Learning rate used for the given 1-based update count.
  double lr_at(long long step) const;

  void validate() const;
  std::vector<std::pair<std::string, std::string>> to_fields() const;
  static OptimizerConfig from_fields(const std::vector<std::pair<std::string, std::string>>& fields);
};

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(const std::string& s);

/// Updates parameter values in place from their gradients.
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(std::vector<ag::Tensor>& params, const std::vector<Eigen::MatrixXd>& grads) = 0;
  /// Named state buffers for checkpointing.
  virtual std::vector<std::pair<std::string, Eigen::MatrixXd>> state() const = 0;
  virtual void load_state(const std::vector<std::pair<std::string, Eigen::MatrixXd>>& state) = 0;
  virtual long long steps_taken() const = 0;
};

/// Adan: Nesterov-style adaptive moments with a gradient-difference term.
///   m <- b1 m + (1-b1) g
///   v <- b2 v + (1-b2) (g - g_prev)
///   n <- b3 n + (1-b3) (g + b2 (g - g_prev))^2
///   theta <- (theta - lr (m/bc1 + b2 v/bc2) / (sqrt(n/bc3) + eps)) / (1 + lr wd)
/// Here b_i are the decay rates of the moving averages.
std::unique_ptr<Optimizer> make_adan(const OptimizerConfig& cfg, const std::vector<ag::Tensor>& params);
/// Adam with decoupled weight decay; uses beta1 and beta3 as its two rates.
std::unique_ptr<Optimizer> make_adam(const OptimizerConfig& cfg, const std::vector<ag::Tensor>& params);
std::unique_ptr<Optimizer> make_optimizer(const OptimizerConfig& cfg, const std::vector<ag::Tensor>& params);

struct TrainingExample {
  Eigen::MatrixXd motion;  // N x pose_dim
  Eigen::MatrixXd cond;    // N x cond_dim
};

struct TrainSettings {
  LossWeights weights;
  ContactActivation activation = ContactActivation::Clamp;
  int diffusion_steps = 50;
};

struct TrainState {
  TrainState(const ModelConfig& model_cfg, const OptimizerConfig& opt_cfg, std::uint64_t seed);

  DenoiserModel model;
  std::vector<Eigen::MatrixXd> ema;
  OptimizerConfig optimizer_config;
  std::unique_ptr<Optimizer> optimizer;
  long long step = 0;
  std::uint64_t seed = 0;

  /// Copy of the model carrying the EMA weights.
  DenoiserModel ema_model() const;
  void ema_update();
};

struct StepStats {
  double loss = 0.0;
  double simple = 0.0;
  double joint = 0.0;
  double vel = 0.0;
  double contact = 0.0;
  int unconditional_clips = 0;
};

/// One optimizer update on the mean loss over `batch`. Throws NonFiniteLoss
/// (leaving parameters untouched) when any clip's loss is not finite.
StepStats train_step(TrainState& state, std::span<const TrainingExample> batch, const diffusion::NoiseSchedule& sched,
                     const kinematics::Skeleton& skel, const TrainSettings& settings, Rng& rng);

/// Checkpoint with config echo, step, parameters, EMA shadow under "ema/" and
/// optimizer state under "opt/". `extra` fields are stored verbatim.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state,
                     const std::vector<std::pair<std::string, std::string>>& extra = {});

struct LoadedCheckpoint {
  std::unique_ptr<TrainState> state;
  std::vector<std::pair<std::string, std::string>> fields;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace edge::denoiser
