#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "edge/rng.hpp"

namespace edge::diffusion {

using Eigen::MatrixXd;

/// Cumulative signal level alpha_bar_t for t = 0..T.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> alpha_bar;

  double at(int t) const;
  /// Throws StepOutOfRange unless 0 <= t <= steps.
  void check_step(int t) const;
};

/// alpha_bar_t = f(t) / f(0) with f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2);
/// each per-step beta is clamped to max_beta. Throws InvalidSteps for T < 1.
NoiseSchedule cosine_schedule(int steps, double offset = 0.008, double max_beta = 0.999);

/// z_t = sqrt(alpha_bar_t) x + sqrt(1 - alpha_bar_t) noise.
MatrixXd forward_diffuse(const MatrixXd& x, int t, const NoiseSchedule& sched, const MatrixXd& noise);

/// w * cond + (1 - w) * uncond.
MatrixXd guided_prediction(const MatrixXd& cond, const MatrixXd& uncond, double w);

/// Re-noises the clean prediction to level t-1 with the supplied noise; at
/// t == 1 the prediction is returned unchanged.
MatrixXd reverse_step(const MatrixXd& z_t, int t, const MatrixXd& x_hat, const NoiseSchedule& sched,
                      const MatrixXd& noise);
MatrixXd reverse_step(const MatrixXd& z_t, int t, const MatrixXd& x_hat, const NoiseSchedule& sched, Rng& rng);

/// Known values plus a binary mask (1 = constrained) over frames x features.
struct EditConstraint {
  MatrixXd known;
  MatrixXd mask;

  /// Throws ConstraintShapeMismatch on mismatched shapes or non-binary mask.
  void validate() const;
  void validate_for(Eigen::Index frames, Eigen::Index dim) const;

  /// Nothing constrained.
  static EditConstraint empty(const MatrixXd& reference);
  /// First `seed_frames` frames fixed (dance continuation from a seed motion).
  static EditConstraint seed_motion(const MatrixXd& reference, int seed_frames);
  /// First and last `frames` fixed (in-betweening).
  static EditConstraint in_between(const MatrixXd& reference, int frames);
  /// A block of frames [first, first + count) fixed mid-sequence.
  static EditConstraint keyframe(const MatrixXd& reference, int first, int count);
  /// Joint-wise: every channel of the listed joints fixed on all frames. With
  /// `root_translation` the root trajectory is fixed too.
  static EditConstraint joints(const MatrixXd& reference, int joint_count, const std::vector<int>& joint_ids,
                               bool root_translation);
  /// SMPL upper body (spine, neck, head, collars, arms) given.
  static EditConstraint upper_body(const MatrixXd& reference);
  /// SMPL lower body (pelvis, legs, feet) plus root trajectory and contacts given.
  static EditConstraint lower_body(const MatrixXd& reference);
};

/// Container: header (frames, dim, mask encoding) + mask bitset packed into
/// float32 words (24 bits each) + known values as float32.
void write_constraint(const std::filesystem::path& path, const EditConstraint& c);
EditConstraint read_constraint(const std::filesystem::path& path);

/// Replaces masked entries with the constraint forward-diffused to level t;
/// at t == 0 the known values are written unnoised.
MatrixXd apply_constraint(const MatrixXd& z, int t, const EditConstraint& c, const NoiseSchedule& sched,
                          const MatrixXd& noise);
MatrixXd apply_constraint(const MatrixXd& z, int t, const EditConstraint& c, const NoiseSchedule& sched, Rng& rng);

/// x_hat(z_t, t, cond); `cond == nullptr` requests the unconditional branch.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual MatrixXd denoise(const MatrixXd& z, int t, const MatrixXd* cond) const = 0;
};

struct SamplerConfig {
  double guidance_weight = 2.0;
  /// Fraction of the earliest (noisiest) steps sampled with w forced to 0.
  /// Unset: 0.4 when w == 1, otherwise 0.
  std::optional<double> guidance_dropout;
  std::uint64_t seed = 0;

  double dropout_fraction() const;
  void validate() const;
};

/// Steps t (counting down from T) at or above this value use w = 0.
int first_unguided_step(int steps, double dropout_fraction);

/// Observer for sampler internals: called after every reverse step with the
/// new latent at level t-1, and the noise used for the constraint (if any).
struct SampleTrace {
  std::function<void(int t_minus_1, const MatrixXd& z, const MatrixXd* constraint_noise)> on_step;
};

/// Guided prediction with the configured dropout: queries only the branches
/// whose weight is nonzero.
MatrixXd predict(const Denoiser& model, const MatrixXd& z, int t, const MatrixXd* cond, const NoiseSchedule& sched,
                 const SamplerConfig& cfg);

/// Full reverse process from z_T ~ N(0, I) to the final prediction.
MatrixXd sample(const Denoiser& model, const MatrixXd* cond, Eigen::Index frames, Eigen::Index dim,
                const NoiseSchedule& sched, const SamplerConfig& cfg, const EditConstraint* constraint = nullptr,
                const SampleTrace* trace = nullptr);

struct LongFormResult {
  MatrixXd stitched;          // (B + 1) * N/2 frames
  std::vector<MatrixXd> clips;  // per-slice results before blending
};

/// Batched sampling of B overlapping slices: after every reverse step the
/// first half of slice k > 0 is overwritten with the second half of slice
/// k - 1; results are then stitched with linear cross-fades over each overlap.
LongFormResult long_form_sample(const Denoiser& model, const std::vector<MatrixXd>& cond_batch, Eigen::Index frames,
                                Eigen::Index dim, const NoiseSchedule& sched, const SamplerConfig& cfg);

/// Stitches overlapping slices: previous slice weight 1 - j/(h-1), next j/(h-1).
MatrixXd blend_overlapping(const std::vector<MatrixXd>& clips);

/// Throws BadOverlap unless consecutive conditioning slices repeat N/2 frames.
void check_overlapping_conditioning(const std::vector<MatrixXd>& cond_batch, Eigen::Index frames);

}  // namespace edge::diffusion
