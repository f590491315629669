#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace edge::audio {

/// Mono samples in [-1, 1].
struct AudioBuffer {
  std::vector<float> samples;
  double sample_rate = 22050.0;

  /// Throws EmptyAudio for no samples and Data errors for a bad rate or
  /// non-finite samples.
  void validate() const;
  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

/// Reads uncompressed PCM (8/16/24/32-bit integer or 32/64-bit float) wave
/// files; multi-channel input is averaged to mono.
AudioBuffer read_wav(const std::filesystem::path& path);
/// Writes 32-bit float mono.
void write_wav(const std::filesystem::path& path, const AudioBuffer& audio);

enum class FeatureSource { Baseline, Precomputed };
std::string to_string(FeatureSource s);

struct ConditioningSequence {
  Eigen::MatrixXd features;  // N x D
  double fps = 30.0;
  FeatureSource source = FeatureSource::Baseline;

  Eigen::Index frames() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }
};

struct BeatGrid {
  std::vector<double> beat_times;  // seconds, strictly increasing
  double tempo_bpm = 0.0;
};

struct FeatureOptions {
  int window = 1024;
  int mel_bands = 64;
  int mfcc = 20;
  double chroma_min_hz = 55.0;
  double chroma_max_hz = 5000.0;
  double top_db = 80.0;
  /// Minimum normalized envelope value for an onset peak.
  double peak_threshold = 0.1;
};

/// Column order of the baseline feature matrix.
struct BaselineLayout {
  static constexpr int kEnvelope = 0;
  static constexpr int kMfcc = 1;
  static constexpr int kChroma = 21;
  static constexpr int kBeat = 33;
  static constexpr int kPeak = 34;
  static constexpr int kDim = 35;
};

struct BaselineFeatures {
  ConditioningSequence cond;
  BeatGrid beats;
};

/// Per-frame envelope, 20 MFCCs, 12 chroma energies, beat and onset-peak
/// indicators at `fps`. Frame i summarizes audio up to time (i + 1) / fps.
/// Audio too short for beat tracking (or without a detectable tempo) yields
/// an empty beat grid rather than an error.
BaselineFeatures extract_baseline_features(const AudioBuffer& audio, double fps, const FeatureOptions& opts = {});

/// Log-mel spectrogram in dB relative to the clip maximum, floored at
/// -top_db. Frame i's window ends at sample (i + 1) * hop. frames x bands.
Eigen::MatrixXd log_mel_spectrogram(const AudioBuffer& audio, int hop, const FeatureOptions& opts = {});

/// Spectral-flux onset strength from a log-mel spectrogram, scaled so the
/// maximum is 1 (all zeros when there is no positive flux).
Eigen::VectorXd onset_envelope(const Eigen::MatrixXd& log_mel);

/// Power-spectrum chroma (C = 0 ... B = 11), frames x 12, each row scaled to
/// a maximum of 1.
Eigen::MatrixXd chroma(const AudioBuffer& audio, int hop, const FeatureOptions& opts = {});

/// Tempo from the envelope autocorrelation (40-220 BPM), beats by dynamic
/// programming. Throws TooShort under 2 s and NoTempoFound for a flat
/// envelope.
BeatGrid detect_beats(const AudioBuffer& audio);

/// Linear-interpolation resampling to N_t = floor(N_s * to / from) frames.
Eigen::MatrixXd resample_features(const Eigen::MatrixXd& features, double from_fps, double to_fps);

/// Feature container: header (frames, dim, fps, source) + row-major float32.
void save_features(const std::filesystem::path& path, const ConditioningSequence& seq);
/// Loads a feature container, resampling to `fps` when the stored rate
/// differs (FpsMismatch instead when `allow_resample` is false).
ConditioningSequence load_precomputed(const std::filesystem::path& path, double fps, bool allow_resample = true);

/// Click track: short decaying 1 kHz bursts at offset + k * 60 / bpm.
AudioBuffer click_track(double bpm, double seconds, double sample_rate = 22050.0, double offset = 0.0,
                        double amplitude = 0.8);

}  // namespace edge::audio
