#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "edge/audio.hpp"
#include "edge/diffusion.hpp"
#include "edge/kinematics.hpp"
#include "edge/losses.hpp"
#include "edge/metrics.hpp"
#include "edge/model.hpp"
#include "edge/training.hpp"

namespace edge::pipeline {

namespace fs = std::filesystem;

/// Everything a command needs, merged from a flat key = value file. Defaults
/// are the desk-scale preset (2 s clips at 30 fps, 64-wide model, T = 50).
struct RunConfig {
  denoiser::ModelConfig model;
  denoiser::LossWeights weights;
  denoiser::ContactActivation activation = denoiser::ContactActivation::Clamp;
  denoiser::OptimizerConfig optimizer;
  diffusion::SamplerConfig sampler;
  int diffusion_steps = 50;

  int train_steps = 1000;
  int batch_size = 4;
  int checkpoint_every = 100;
  /// Use only the first `max_clips` training windows (0 = all).
  int max_clips = 0;
  std::string manifest;
  std::string resume;
  std::string skeleton;  // empty = built-in SMPL
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  double fps = 30.0;

  RunConfig();

  /// Sets one key; throws ConfigError for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  /// Throws ConfigError on any invalid combination.
  void validate() const;
  /// key = value text that parse() reads back to an equal config.
  std::string to_text() const;

  static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
  static RunConfig load(const fs::path& path);
  /// Every key accepted by set().
  static const std::vector<std::string>& keys();

  kinematics::Skeleton load_skeleton() const;
};

enum class Split { Train, Test };

struct ManifestEntry {
  fs::path motion;
  fs::path features;
  fs::path audio;  // may be empty
  Split split = Split::Train;
};

/// Paths are stored relative to the manifest's directory.
struct DatasetManifest {
  double fps = 30.0;
  int frames = 0;
  std::vector<ManifestEntry> clips;

  void save(const fs::path& path) const;
  /// Throws BadHeader / IoError; resolves paths against the manifest dir.
  static DatasetManifest load(const fs::path& path);
  /// Checks every referenced file exists and parses, with matching lengths.
  void validate() const;
  std::vector<ManifestEntry> split(Split s) const;
};

struct SynthOptions {
  int count = 10;
  int frames = 60;
  double fps = 30.0;
  double sample_rate = 22050.0;
  double min_bpm = 90.0;
  double max_bpm = 140.0;
  std::uint64_t seed = 0;
  /// Fraction of clips tagged as test (taken from the end).
  double test_fraction = 0.2;
};

/// Labels used for synthetic clips. The SMPL ankle sits about 6 cm above the
/// foot joint, so the heel needs a looser height bound than the toe default.
kinematics::ContactThresholds synthetic_contact_thresholds();

struct SyntheticClip {
  kinematics::MotionClip motion;
  audio::AudioBuffer audio;
  audio::BaselineFeatures features;
  double bpm = 0.0;
};

/// Procedural dance: upper-body rotations phase-locked to a click track,
/// feet alternately pinned per beat with the root translated to keep the
/// pinned foot still. Deterministic in (options, index).
SyntheticClip synthesize_clip(const SynthOptions& opts, int index, const kinematics::Skeleton& skel);

/// Writes clip_XXXX.motion / .feat / .wav plus manifest.txt into out_dir.
DatasetManifest cmd_synth_data(const fs::path& out_dir, const SynthOptions& opts);

struct TrainReport {
  long long final_step = 0;
  double final_loss = 0.0;
  std::vector<fs::path> checkpoints;
  fs::path log;
};

/// Trains from `config.manifest`, writing ckpt_<step>.edge every
/// checkpoint_every steps, checkpoint.edge at the end and loss_log.csv (one
/// row per executed step). Resumes from `config.resume` when set.
TrainReport cmd_train(const RunConfig& config);

struct SampleRequest {
  fs::path checkpoint;
  fs::path features;
  fs::path out;
  std::optional<double> guidance_weight;
  std::optional<double> guidance_dropout;
  std::uint64_t seed = 0;
  /// First feature frame used as conditioning.
  long long start_frame = 0;
  /// When set, must equal the checkpoint's frame rate (FpsMismatch otherwise).
  std::optional<double> fps;
};

/// Single-clip generation from the checkpoint's EMA weights.
kinematics::MotionClip cmd_sample(const SampleRequest& req);
/// Constrained generation; masked entries of the output equal the
/// constraint's known values exactly.
kinematics::MotionClip cmd_edit(const SampleRequest& req, const fs::path& constraint);

struct LongFormReport {
  kinematics::MotionClip motion;
  int slices = 0;
  /// Largest absolute difference over the overlapped halves of consecutive
  /// slices before blending (0 means bit-equal).
  double max_overlap_difference = 0.0;
};

/// Chains N/2-overlapping slices and writes exactly round(seconds * fps)
/// frames. Throws FeatureTooShort when the features do not cover the request.
LongFormReport cmd_longform(const SampleRequest& req, double seconds);

struct EvaluateRequest {
  fs::path motion_dir;
  fs::path music_dir;  // optional: .wav or .feat files named like the motions
  fs::path reference_dir;  // optional: second motion corpus for Frechet
  fs::path skeleton;
  fs::path out;  // report path
  fs::path csv;  // optional
  metrics::EvaluationOptions options;
  /// When set, clips at another frame rate are recorded as failures.
  std::optional<double> fps;
};

struct EvaluateResult {
  metrics::MetricReport report;
  int failures = 0;
};

EvaluateResult cmd_evaluate(const EvaluateRequest& req);

struct SweepRequest {
  fs::path checkpoint_dir;
  fs::path manifest;
  int samples = 4;
  std::optional<double> guidance_weight;
  std::uint64_t seed = 0;
  fs::path csv;  // optional
};

struct SweepPoint {
  fs::path checkpoint;
  long long step = 0;
  double pfc_mean = 0.0;
};

/// Samples `samples` clips per ckpt_<step>.edge in step order and reports the
/// mean PFC of each checkpoint.
std::vector<SweepPoint> cmd_evaluate_sweep(const SweepRequest& req);

/// Process exit code for an exception: 2 config, 3 data, 4 numeric.
int exit_code_for(const std::exception& e);

}  // namespace edge::pipeline
