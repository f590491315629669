#include "edge/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "edge/container.hpp"
#include "edge/errors.hpp"
#include "edge/kinematics.hpp"

namespace edge::diffusion {

namespace {

constexpr char kConstraintMagic[] = "EDGECONSTRAINT";
constexpr int kBitsPerWord = 24;

void require_same_shape(const MatrixXd& a, const MatrixXd& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeMismatch(std::string(what) + ": " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                        " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

// Per-slice stream layout: initial latent, then one child per step with
// sub-streams for the reverse step and the constraint.
Rng init_stream(const Rng& slice, int steps) { return slice.split(static_cast<std::uint64_t>(steps) + 1); }
Rng reverse_stream(const Rng& slice, int t) { return slice.split(static_cast<std::uint64_t>(t)).split(0); }
Rng constraint_stream(const Rng& slice, int t) { return slice.split(static_cast<std::uint64_t>(t)).split(1); }

}  // namespace

// ---- schedule ------------------------------------------------------------

double NoiseSchedule::at(int t) const {
  check_step(t);
  return alpha_bar[static_cast<std::size_t>(t)];
}

void NoiseSchedule::check_step(int t) const {
  if (t < 0 || t > steps)
    throw StepOutOfRange("step " + std::to_string(t) + " outside [0, " + std::to_string(steps) + "]");
}

NoiseSchedule cosine_schedule(int steps, double offset, double max_beta) {
  if (steps < 1) throw InvalidSteps("diffusion needs at least one step, got " + std::to_string(steps));
  const auto f = [&](int t) {
    const double c = std::cos(((static_cast<double>(t) / steps + offset) / (1.0 + offset)) * M_PI / 2.0);
    return c * c;
  };
  NoiseSchedule s;
  s.steps = steps;
  s.alpha_bar.resize(static_cast<std::size_t>(steps) + 1);
  s.alpha_bar[0] = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const double beta = std::min(1.0 - f(t) / f(t - 1), max_beta);
    s.alpha_bar[static_cast<std::size_t>(t)] = s.alpha_bar[static_cast<std::size_t>(t) - 1] * (1.0 - beta);
  }
  return s;
}

MatrixXd forward_diffuse(const MatrixXd& x, int t, const NoiseSchedule& sched, const MatrixXd& noise) {
  require_same_shape(x, noise, "forward_diffuse");
  const double ab = sched.at(t);
  return std::sqrt(ab) * x + std::sqrt(1.0 - ab) * noise;
}

MatrixXd guided_prediction(const MatrixXd& cond, const MatrixXd& uncond, double w) {
  require_same_shape(cond, uncond, "guided_prediction");
  if (w == 1.0) return cond;
  if (w == 0.0) return uncond;
  return w * cond + (1.0 - w) * uncond;
}

MatrixXd reverse_step(const MatrixXd& z_t, int t, const MatrixXd& x_hat, const NoiseSchedule& sched,
                      const MatrixXd& noise) {
  if (t < 1 || t > sched.steps) throw StepOutOfRange("reverse step from t=" + std::to_string(t));
  require_same_shape(z_t, x_hat, "reverse_step");
  if (t == 1) return x_hat;
  return forward_diffuse(x_hat, t - 1, sched, noise);
}

MatrixXd reverse_step(const MatrixXd& z_t, int t, const MatrixXd& x_hat, const NoiseSchedule& sched, Rng& rng) {
  if (t == 1) return reverse_step(z_t, t, x_hat, sched, MatrixXd());
  return reverse_step(z_t, t, x_hat, sched, rng.normal_matrix(x_hat.rows(), x_hat.cols()));
}

// ---- constraints ---------------------------------------------------------

void EditConstraint::validate() const {
  if (known.rows() != mask.rows() || known.cols() != mask.cols())
    throw ConstraintShapeMismatch("known values and mask differ in shape");
  if (!((mask.array() == 0.0) || (mask.array() == 1.0)).all())
    throw ConstraintShapeMismatch("mask must be binary");
}

void EditConstraint::validate_for(Eigen::Index frames, Eigen::Index dim) const {
  validate();
  if (known.rows() != frames || known.cols() != dim)
    throw ConstraintShapeMismatch("constraint is " + std::to_string(known.rows()) + "x" +
                                  std::to_string(known.cols()) + ", sampling target is " + std::to_string(frames) +
                                  "x" + std::to_string(dim));
}

EditConstraint EditConstraint::empty(const MatrixXd& reference) {
  return {reference, MatrixXd::Zero(reference.rows(), reference.cols())};
}

EditConstraint EditConstraint::seed_motion(const MatrixXd& reference, int seed_frames) {
  auto c = empty(reference);
  c.mask.topRows(std::clamp<Eigen::Index>(seed_frames, 0, reference.rows())).setOnes();
  return c;
}

EditConstraint EditConstraint::in_between(const MatrixXd& reference, int frames) {
  if (2 * static_cast<Eigen::Index>(frames) >= reference.rows())
    throw ConstraintShapeMismatch("in-betweening needs 2n < N");
  auto c = empty(reference);
  c.mask.topRows(frames).setOnes();
  c.mask.bottomRows(frames).setOnes();
  return c;
}

EditConstraint EditConstraint::keyframe(const MatrixXd& reference, int first, int count) {
  if (first < 0 || count < 0 || first + count > reference.rows())
    throw ConstraintShapeMismatch("keyframe block outside the sequence");
  auto c = empty(reference);
  c.mask.middleRows(first, count).setOnes();
  return c;
}

EditConstraint EditConstraint::joints(const MatrixXd& reference, int joint_count,
                                      const std::vector<int>& joint_ids, bool root_translation) {
  const kinematics::PoseLayout layout{joint_count};
  if (reference.cols() != layout.dim()) throw ConstraintShapeMismatch("reference does not match joint layout");
  auto c = empty(reference);
  for (int j : joint_ids) {
    if (j < 0 || j >= joint_count) throw ConstraintShapeMismatch("joint id out of range");
    c.mask.middleCols(layout.rotation_offset(j), 6).setOnes();
  }
  if (root_translation) c.mask.middleCols(layout.translation_offset(), 3).setOnes();
  return c;
}

EditConstraint EditConstraint::upper_body(const MatrixXd& reference) {
  return joints(reference, 24, {3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23}, false);
}

EditConstraint EditConstraint::lower_body(const MatrixXd& reference) {
  auto c = joints(reference, 24, {0, 1, 2, 4, 5, 7, 8, 10, 11}, true);
  c.mask.leftCols(kinematics::PoseLayout::kContacts).setOnes();
  return c;
}

void write_constraint(const std::filesystem::path& path, const EditConstraint& c) {
  c.validate();
  Container out;
  out.magic = kConstraintMagic;
  out.set("frames", std::to_string(c.known.rows()));
  out.set("dim", std::to_string(c.known.cols()));
  out.set("mask", "bitset24");
  const auto n = c.mask.size();
  const auto words = (n + kBitsPerWord - 1) / kBitsPerWord;
  out.payload.assign(static_cast<std::size_t>(words), 0.0f);
  // row-major bit order
  Eigen::Index bit = 0;
  for (Eigen::Index i = 0; i < c.mask.rows(); ++i) {
    for (Eigen::Index j = 0; j < c.mask.cols(); ++j, ++bit) {
      if (c.mask(i, j) != 0.0) {
        auto& w = out.payload[static_cast<std::size_t>(bit / kBitsPerWord)];
        w = static_cast<float>(static_cast<std::uint32_t>(w) | (1u << (bit % kBitsPerWord)));
      }
    }
  }
  for (Eigen::Index i = 0; i < c.known.rows(); ++i)
    for (Eigen::Index j = 0; j < c.known.cols(); ++j) out.payload.push_back(static_cast<float>(c.known(i, j)));
  write_container(path, out);
}

EditConstraint read_constraint(const std::filesystem::path& path) {
  const auto header = read_container_header(path, kConstraintMagic);
  const auto frames = header.get_int("frames");
  const auto dim = header.get_int("dim");
  if (header.get("mask") != "bitset24") throw BadHeader("unsupported mask encoding '" + header.get("mask") + "'");
  if (frames < 0 || dim < 0) throw BadHeader("negative constraint shape");
  const auto n = frames * dim;
  const auto words = (n + kBitsPerWord - 1) / kBitsPerWord;
  const auto c = read_container(path, kConstraintMagic, words + n);
  EditConstraint out{MatrixXd(frames, dim), MatrixXd(frames, dim)};
  Eigen::Index bit = 0;
  for (Eigen::Index i = 0; i < frames; ++i) {
    for (Eigen::Index j = 0; j < dim; ++j, ++bit) {
      const auto w = static_cast<std::uint32_t>(c.payload[static_cast<std::size_t>(bit / kBitsPerWord)]);
      out.mask(i, j) = ((w >> (bit % kBitsPerWord)) & 1u) ? 1.0 : 0.0;
      out.known(i, j) = c.payload[static_cast<std::size_t>(words + bit)];
    }
  }
  return out;
}

MatrixXd apply_constraint(const MatrixXd& z, int t, const EditConstraint& c, const NoiseSchedule& sched,
                          const MatrixXd& noise) {
  c.validate_for(z.rows(), z.cols());
  const MatrixXd target = t == 0 ? c.known : forward_diffuse(c.known, t, sched, noise);
  return (c.mask.array() != 0.0).select(target, z);
}

MatrixXd apply_constraint(const MatrixXd& z, int t, const EditConstraint& c, const NoiseSchedule& sched, Rng& rng) {
  sched.check_step(t);
  if (t == 0) return apply_constraint(z, t, c, sched, MatrixXd::Zero(z.rows(), z.cols()));
  return apply_constraint(z, t, c, sched, rng.normal_matrix(z.rows(), z.cols()));
}

// ---- sampling ------------------------------------------------------------

double SamplerConfig::dropout_fraction() const {
  if (guidance_dropout) return *guidance_dropout;
  return guidance_weight == 1.0 ? 0.4 : 0.0;
}

void SamplerConfig::validate() const {
  if (!(guidance_weight >= 0.0) || !std::isfinite(guidance_weight))
    throw ConfigError("guidance weight must be finite and >= 0");
  const double f = dropout_fraction();
  if (!(f >= 0.0 && f < 1.0)) throw ConfigError("guidance dropout fraction must be in [0, 1)");
}

int first_unguided_step(int steps, double dropout_fraction) {
  const int unguided = static_cast<int>(std::lround(dropout_fraction * steps));
  return steps - unguided + 1;
}

MatrixXd predict(const Denoiser& model, const MatrixXd& z, int t, const MatrixXd* cond, const NoiseSchedule& sched,
                 const SamplerConfig& cfg) {
  const double w = t >= first_unguided_step(sched.steps, cfg.dropout_fraction()) ? 0.0 : cfg.guidance_weight;
  if (cond == nullptr || w == 0.0) return model.denoise(z, t, nullptr);
  if (w == 1.0) return model.denoise(z, t, cond);
  return guided_prediction(model.denoise(z, t, cond), model.denoise(z, t, nullptr), w);
}

MatrixXd sample(const Denoiser& model, const MatrixXd* cond, Eigen::Index frames, Eigen::Index dim,
                const NoiseSchedule& sched, const SamplerConfig& cfg, const EditConstraint* constraint,
                const SampleTrace* trace) {
  cfg.validate();
  if (constraint) constraint->validate_for(frames, dim);
  if (cond && cond->rows() != frames) throw ShapeMismatch("conditioning length differs from sample length");

  const Rng slice = Rng(cfg.seed).split(0);
  auto init = init_stream(slice, sched.steps);
  MatrixXd z = init.normal_matrix(frames, dim);
  for (int t = sched.steps; t >= 1; --t) {
    const MatrixXd x_hat = predict(model, z, t, cond, sched, cfg);
    auto rs = reverse_stream(slice, t);
    z = reverse_step(z, t, x_hat, sched, rs);
    MatrixXd constraint_noise;
    if (constraint) {
      constraint_noise =
          t - 1 == 0 ? MatrixXd::Zero(frames, dim) : constraint_stream(slice, t).normal_matrix(frames, dim);
      z = apply_constraint(z, t - 1, *constraint, sched, constraint_noise);
    }
    if (trace && trace->on_step) trace->on_step(t - 1, z, constraint ? &constraint_noise : nullptr);
  }
  return z;
}

void check_overlapping_conditioning(const std::vector<MatrixXd>& cond_batch, Eigen::Index frames) {
  if (frames % 2 != 0) throw BadOverlap("slice length must be even");
  const auto half = frames / 2;
  for (std::size_t k = 0; k < cond_batch.size(); ++k) {
    if (cond_batch[k].rows() != frames) throw BadOverlap("conditioning slice " + std::to_string(k) + " has wrong length");
    if (k > 0 && (cond_batch[k].cols() != cond_batch[k - 1].cols() ||
                  cond_batch[k].topRows(half) != cond_batch[k - 1].bottomRows(half)))
      throw BadOverlap("slice " + std::to_string(k) + " does not repeat the second half of slice " +
                       std::to_string(k - 1));
  }
}

MatrixXd blend_overlapping(const std::vector<MatrixXd>& clips) {
  if (clips.empty()) return {};
  const auto frames = clips.front().rows();
  const auto half = frames / 2;
  const auto dim = clips.front().cols();
  const auto B = static_cast<Eigen::Index>(clips.size());
  MatrixXd out(half * (B + 1), dim);
  out.topRows(half) = clips.front().topRows(half);
  for (Eigen::Index k = 1; k < B; ++k) {
    const auto& prev = clips[static_cast<std::size_t>(k - 1)];
    const auto& next = clips[static_cast<std::size_t>(k)];
    for (Eigen::Index j = 0; j < half; ++j) {
      const double w_next = half > 1 ? static_cast<double>(j) / static_cast<double>(half - 1) : 0.5;
      out.row(k * half + j) = (1.0 - w_next) * prev.row(half + j) + w_next * next.row(j);
    }
  }
  out.bottomRows(half) = clips.back().bottomRows(half);
  return out;
}

LongFormResult long_form_sample(const Denoiser& model, const std::vector<MatrixXd>& cond_batch, Eigen::Index frames,
                                Eigen::Index dim, const NoiseSchedule& sched, const SamplerConfig& cfg) {
  cfg.validate();
  if (cond_batch.size() < 2) throw BadOverlap("long-form sampling needs at least two slices");
  check_overlapping_conditioning(cond_batch, frames);
  const auto half = frames / 2;
  const auto B = cond_batch.size();

  const Rng root(cfg.seed);
  std::vector<Rng> slices;
  std::vector<MatrixXd> z;
  for (std::size_t k = 0; k < B; ++k) {
    slices.push_back(root.split(k));
    auto init = init_stream(slices.back(), sched.steps);
    z.push_back(init.normal_matrix(frames, dim));
  }
  for (int t = sched.steps; t >= 1; --t) {
    for (std::size_t k = 0; k < B; ++k) {
      const MatrixXd x_hat = predict(model, z[k], t, &cond_batch[k], sched, cfg);
      auto rs = reverse_stream(slices[k], t);
      z[k] = reverse_step(z[k], t, x_hat, sched, rs);
    }
    // every slice's second half is untouched by this loop, so order is irrelevant
    for (std::size_t k = 1; k < B; ++k) z[k].topRows(half) = z[k - 1].bottomRows(half);
  }
  LongFormResult result;
  result.clips = std::move(z);
  result.stitched = blend_overlapping(result.clips);
  return result;
}

}  // namespace edge::diffusion
