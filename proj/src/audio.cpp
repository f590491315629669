#include "edge/audio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <unsupported/Eigen/FFT>

#include "edge/container.hpp"
#include "edge/errors.hpp"

namespace edge::audio {

using Eigen::MatrixXd;
using Eigen::VectorXd;

static_assert(std::endian::native == std::endian::little, "wave IO assumes a little-endian host");

namespace {

constexpr const char* kFeatureMagic = "EDGEFEATURES";

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

int hop_for(double sample_rate, double fps) {
  if (!(fps > 0.0) || !std::isfinite(fps)) throw ConfigError("fps must be positive");
  return std::max(1, static_cast<int>(std::lround(sample_rate / fps)));
}

Eigen::Index frame_count(const AudioBuffer& audio, int hop) {
  return static_cast<Eigen::Index>(audio.samples.size()) / hop;
}

/// |FFT|^2 of Hann-windowed frames; frame i ends at sample (i + 1) * hop.
MatrixXd power_spectrogram(const AudioBuffer& audio, int hop, int window) {
  const Eigen::Index frames = frame_count(audio, hop);
  const int bins = window / 2 + 1;
  MatrixXd power(frames, bins);
  std::vector<double> hann(static_cast<std::size_t>(window));
  for (int n = 0; n < window; ++n) hann[static_cast<std::size_t>(n)] = 0.5 - 0.5 * std::cos(2.0 * M_PI * n / window);

  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> buf(static_cast<std::size_t>(window));
  std::vector<std::complex<double>> spec;
  const auto total = static_cast<long long>(audio.samples.size());
  for (Eigen::Index i = 0; i < frames; ++i) {
    const long long end = (i + 1) * static_cast<long long>(hop);
    const long long start = end - window;
    for (int n = 0; n < window; ++n) {
      const long long s = start + n;
      const double v = (s >= 0 && s < total) ? audio.samples[static_cast<std::size_t>(s)] : 0.0;
      buf[static_cast<std::size_t>(n)] = v * hann[static_cast<std::size_t>(n)];
    }
    fft.fwd(spec, buf);
    for (int k = 0; k < bins; ++k) power(i, k) = std::norm(spec[static_cast<std::size_t>(k)]);
  }
  return power;
}

/// Triangular filters evenly spaced on the mel scale, bands x bins.
MatrixXd mel_filterbank(int bands, int window, double sample_rate) {
  const int bins = window / 2 + 1;
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(static_cast<std::size_t>(bands + 2));
  for (int b = 0; b < bands + 2; ++b) edges[static_cast<std::size_t>(b)] = mel_to_hz(top * b / (bands + 1));
  MatrixXd fb = MatrixXd::Zero(bands, bins);
  for (int b = 0; b < bands; ++b) {
    const double lo = edges[static_cast<std::size_t>(b)];
    const double mid = edges[static_cast<std::size_t>(b + 1)];
    const double hi = edges[static_cast<std::size_t>(b + 2)];
    for (int k = 0; k < bins; ++k) {
      const double f = k * sample_rate / window;
      if (f > lo && f < hi) fb(b, k) = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
    }
  }
  return fb;
}

MatrixXd dct_ortho(const MatrixXd& x, int coeffs) {
  const auto M = x.cols();
  MatrixXd basis(M, coeffs);
  for (int k = 0; k < coeffs; ++k) {
    const double s = k == 0 ? std::sqrt(1.0 / M) : std::sqrt(2.0 / M);
    for (Eigen::Index n = 0; n < M; ++n) basis(n, k) = s * std::cos(M_PI * k * (2.0 * n + 1.0) / (2.0 * M));
  }
  return x * basis;
}

std::vector<std::size_t> onset_peaks(const VectorXd& env, double threshold) {
  std::vector<std::size_t> peaks;
  const auto n = env.size();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (env(i) < threshold) continue;
    if (i > 0 && env(i) <= env(i - 1)) continue;
    if (i + 1 < n && env(i) < env(i + 1)) continue;
    peaks.push_back(static_cast<std::size_t>(i));
  }
  return peaks;
}

// ---- wave IO -------------------------------------------------------------

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}

}  // namespace

void AudioBuffer::validate() const {
  if (samples.empty()) throw EmptyAudio("audio has no samples");
  if (!(sample_rate > 0.0) || !std::isfinite(sample_rate)) throw ConfigError("sample rate must be positive");
  for (float s : samples)
    if (!std::isfinite(s)) throw ShapeMismatch("audio contains non-finite samples");
}

AudioBuffer read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw BadHeader(path.string() + " is not a RIFF/WAVE file");

  int format = 0, channels = 0, bits = 0;
  double rate = 0.0;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::size_t size = read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size() && std::memcmp(chunk, "data", 4) != 0)
      throw BadHeader("truncated chunk in " + path.string());
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16) throw BadHeader("short fmt chunk in " + path.string());
      format = read_u16(chunk + 8);
      channels = read_u16(chunk + 10);
      rate = read_u32(chunk + 12);
      bits = read_u16(chunk + 22);
      // WAVE_FORMAT_EXTENSIBLE carries the real format in the sub-format GUID
      if (format == 0xFFFE && size >= 40) format = read_u16(chunk + 32);
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = bytes.data() + body;
      data_size = std::min(size, bytes.size() - body);
    }
    pos = body + size + (size & 1);
  }
  if (!data || channels < 1 || rate <= 0.0) throw BadHeader("missing fmt or data chunk in " + path.string());
  const bool is_float = format == 3;
  if (!(format == 1 || is_float)) throw BadHeader("unsupported wave encoding " + std::to_string(format));
  if (is_float ? (bits != 32 && bits != 64) : (bits != 8 && bits != 16 && bits != 24 && bits != 32))
    throw BadHeader("unsupported bit depth " + std::to_string(bits));

  const std::size_t width = static_cast<std::size_t>(bits / 8);
  const std::size_t frames = data_size / (width * static_cast<std::size_t>(channels));
  AudioBuffer out;
  out.sample_rate = rate;
  out.samples.resize(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (int c = 0; c < channels; ++c) {
      const unsigned char* p = data + (f * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c)) * width;
      double v = 0.0;
      if (is_float && bits == 32) {
        float x;
        std::memcpy(&x, p, 4);
        v = x;
      } else if (is_float) {
        double x;
        std::memcpy(&x, p, 8);
        v = x;
      } else if (bits == 8) {
        v = (static_cast<int>(p[0]) - 128) / 128.0;
      } else if (bits == 16) {
        v = static_cast<std::int16_t>(read_u16(p)) / 32768.0;
      } else if (bits == 24) {
        std::int32_t x = p[0] | p[1] << 8 | p[2] << 16;
        if (x & 0x800000) x -= 0x1000000;
        v = x / 8388608.0;
      } else {
        v = static_cast<std::int32_t>(read_u32(p)) / 2147483648.0;
      }
      acc += v;
    }
    out.samples[f] = static_cast<float>(acc / channels);
  }
  return out;
}

void write_wav(const std::filesystem::path& path, const AudioBuffer& audio) {
  const auto data_size = static_cast<std::uint32_t>(audio.samples.size() * 4);
  const auto rate = static_cast<std::uint32_t>(std::lround(audio.sample_rate));
  auto u32 = [](std::ofstream& o, std::uint32_t v) { o.write(reinterpret_cast<const char*>(&v), 4); };
  auto u16 = [](std::ofstream& o, std::uint16_t v) { o.write(reinterpret_cast<const char*>(&v), 2); };
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write("RIFF", 4);
    u32(out, 36 + data_size);
    out.write("WAVEfmt ", 8);
    u32(out, 16);
    u16(out, 3);
    u16(out, 1);
    u32(out, rate);
    u32(out, rate * 4);
    u16(out, 4);
    u16(out, 32);
    out.write("data", 4);
    u32(out, data_size);
    out.write(reinterpret_cast<const char*>(audio.samples.data()), static_cast<std::streamsize>(data_size));
    if (!out) throw IoError("failed writing " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string to_string(FeatureSource s) { return s == FeatureSource::Baseline ? "baseline" : "precomputed"; }

MatrixXd log_mel_spectrogram(const AudioBuffer& audio, int hop, const FeatureOptions& opts) {
  const MatrixXd power = power_spectrogram(audio, hop, opts.window);
  const MatrixXd mel = power * mel_filterbank(opts.mel_bands, opts.window, audio.sample_rate).transpose();
  const double ref = mel.size() > 0 ? mel.maxCoeff() : 0.0;
  if (!(ref > 0.0)) return MatrixXd::Constant(mel.rows(), mel.cols(), -opts.top_db);
  // relative to the clip maximum, so any positive gain cancels out
  const double floor_power = ref * std::pow(10.0, -opts.top_db / 10.0);
  MatrixXd db(mel.rows(), mel.cols());
  for (Eigen::Index i = 0; i < mel.size(); ++i)
    db.data()[i] = 10.0 * std::log10(std::max(mel.data()[i], floor_power) / ref);
  return db;
}

VectorXd onset_envelope(const MatrixXd& log_mel) {
  const auto frames = log_mel.rows();
  VectorXd env = VectorXd::Zero(frames);
  if (frames == 0) return env;
  const double floor_db = log_mel.minCoeff();
  for (Eigen::Index i = 0; i < frames; ++i) {
    double flux = 0.0;
    for (Eigen::Index b = 0; b < log_mel.cols(); ++b) {
      // before the first frame the signal is treated as being at the floor
      const double prev = i > 0 ? log_mel(i - 1, b) : floor_db;
      flux += std::max(0.0, log_mel(i, b) - prev);
    }
    env(i) = flux / static_cast<double>(log_mel.cols());
  }
  const double peak = env.maxCoeff();
  if (peak > 0.0) env /= peak;
  return env;
}

MatrixXd chroma(const AudioBuffer& audio, int hop, const FeatureOptions& opts) {
  const MatrixXd power = power_spectrogram(audio, hop, opts.window);
  MatrixXd out = MatrixXd::Zero(power.rows(), 12);
  for (Eigen::Index k = 1; k < power.cols(); ++k) {
    const double f = static_cast<double>(k) * audio.sample_rate / opts.window;
    if (f < opts.chroma_min_hz || f > opts.chroma_max_hz) continue;
    const long semitones_from_a = std::lround(12.0 * std::log2(f / 440.0));
    const long pc = ((semitones_from_a + 9) % 12 + 12) % 12;
    out.col(pc) += power.col(k);
  }
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double m = out.row(i).maxCoeff();
    if (m > 0.0) out.row(i) /= m;
  }
  return out;
}

BeatGrid detect_beats(const AudioBuffer& audio) {
  audio.validate();
  if (audio.duration() < 2.0) throw TooShort("beat detection needs at least 2 s of audio");
  const int hop = hop_for(audio.sample_rate, 100.0);
  const double rate = audio.sample_rate / hop;
  const VectorXd env = onset_envelope(log_mel_spectrogram(audio, hop));
  const auto M = env.size();
  if (!(env.maxCoeff() > 0.0)) throw NoTempoFound("onset envelope is flat");

  // tempo: autocorrelation weighted by a log-normal prior around 120 BPM
  const int min_lag = std::max(1, static_cast<int>(std::floor(60.0 * rate / 220.0)));
  const int max_lag = static_cast<int>(std::ceil(60.0 * rate / 40.0));
  std::vector<double> weighted(static_cast<std::size_t>(max_lag + 2), 0.0);
  for (int lag = min_lag - 1; lag <= max_lag + 1; ++lag) {
    if (lag < 1 || lag >= M) continue;
    const double acf = env.head(M - lag).dot(env.tail(M - lag));
    const double bpm = 60.0 * rate / lag;
    const double octaves = std::log2(bpm / 120.0);
    weighted[static_cast<std::size_t>(lag)] = acf * std::exp(-0.5 * octaves * octaves);
  }
  int best = -1;
  for (int lag = min_lag; lag <= std::min<Eigen::Index>(max_lag, M - 1); ++lag) {
    if (best < 0 || weighted[static_cast<std::size_t>(lag)] > weighted[static_cast<std::size_t>(best)]) best = lag;
  }
  if (best < 0 || !(weighted[static_cast<std::size_t>(best)] > 0.0))
    throw NoTempoFound("no periodicity between 40 and 220 BPM");
  double period = best;
  {
    const double a = weighted[static_cast<std::size_t>(best - 1)];
    const double b = weighted[static_cast<std::size_t>(best)];
    const double c = weighted[static_cast<std::size_t>(best + 1)];
    const double denom = a - 2.0 * b + c;
    if (denom < 0.0) period += std::clamp(0.5 * (a - c) / denom, -0.5, 0.5);
  }
  BeatGrid grid;
  grid.tempo_bpm = 60.0 * rate / period;

  // beat placement by dynamic programming
  const double mean = env.mean();
  const double sd = std::sqrt((env.array() - mean).square().mean());
  const VectorXd local = sd > 0.0 ? VectorXd(env / sd) : env;
  constexpr double kTightness = 100.0;
  std::vector<double> score(static_cast<std::size_t>(M));
  std::vector<long> back(static_cast<std::size_t>(M), -1);
  const long near = std::max(1L, std::lround(period / 2.0));
  const long far = std::lround(2.0 * period);
  for (long i = 0; i < M; ++i) {
    double best_prev = 0.0;
    for (long j = i - far; j <= i - near; ++j) {
      if (j < 0) continue;
      const double gap = std::log(static_cast<double>(i - j) / period);
      const double s = score[static_cast<std::size_t>(j)] - kTightness * gap * gap;
      if (s > best_prev) {
        best_prev = s;
        back[static_cast<std::size_t>(i)] = j;
      }
    }
    score[static_cast<std::size_t>(i)] = local(i) + best_prev;
  }
  long last = M - 1;
  for (long i = std::max(0L, static_cast<long>(M - std::ceil(period))); i < M; ++i)
    if (score[static_cast<std::size_t>(i)] > score[static_cast<std::size_t>(last)]) last = i;
  std::vector<long> beats;
  for (long i = last; i >= 0; i = back[static_cast<std::size_t>(i)]) beats.push_back(i);
  std::reverse(beats.begin(), beats.end());

  // drop weak beats at either end (chain extrapolated into silence)
  double energy = 0.0;
  for (long b : beats) energy += env(b) * env(b);
  const double threshold = 0.5 * std::sqrt(energy / static_cast<double>(beats.size()));
  auto first = beats.begin();
  auto end = beats.end();
  while (first != end && env(*first) < threshold) ++first;
  while (end != first && env(*(end - 1)) < threshold) --end;
  for (auto it = first; it != end; ++it) {
    const double t = (static_cast<double>(*it) + 0.5) * hop / audio.sample_rate;
    if (t <= audio.duration()) grid.beat_times.push_back(t);
  }
  return grid;
}

BaselineFeatures extract_baseline_features(const AudioBuffer& audio, double fps, const FeatureOptions& opts) {
  audio.validate();
  const int hop = hop_for(audio.sample_rate, fps);
  const Eigen::Index N = frame_count(audio, hop);
  if (N < 1) throw TooShort("audio is shorter than one frame at " + fmt(fps) + " fps");

  const MatrixXd log_mel = log_mel_spectrogram(audio, hop, opts);
  const VectorXd env = onset_envelope(log_mel);

  BaselineFeatures out;
  out.cond.fps = fps;
  out.cond.source = FeatureSource::Baseline;
  MatrixXd& f = out.cond.features;
  f = MatrixXd::Zero(N, BaselineLayout::kDim);
  f.col(BaselineLayout::kEnvelope) = env;
  f.middleCols(BaselineLayout::kMfcc, opts.mfcc) = dct_ortho(log_mel, opts.mfcc);
  f.middleCols(BaselineLayout::kChroma, 12) = chroma(audio, hop, opts);

  if (audio.duration() >= 2.0) {
    try {
      out.beats = detect_beats(audio);
    } catch (const NoTempoFound&) {
      out.beats = {};
    }
  }
  for (double t : out.beats.beat_times) {
    const auto i = static_cast<Eigen::Index>(std::lround(t * fps));
    if (i >= 0 && i < N) f(i, BaselineLayout::kBeat) = 1.0;
  }
  for (auto i : onset_peaks(env, opts.peak_threshold)) f(static_cast<Eigen::Index>(i), BaselineLayout::kPeak) = 1.0;
  return out;
}

MatrixXd resample_features(const MatrixXd& features, double from_fps, double to_fps) {
  if (!(from_fps > 0.0) || !(to_fps > 0.0)) throw ConfigError("frame rates must be positive");
  const auto src = features.rows();
  const auto dst = static_cast<Eigen::Index>(std::floor(static_cast<double>(src) * to_fps / from_fps + 1e-9));
  MatrixXd out(dst, features.cols());
  for (Eigen::Index i = 0; i < dst; ++i) {
    const double pos = static_cast<double>(i) * from_fps / to_fps;
    const auto lo = std::min<Eigen::Index>(static_cast<Eigen::Index>(std::floor(pos)), src - 1);
    const auto hi = std::min<Eigen::Index>(lo + 1, src - 1);
    const double w = pos - static_cast<double>(lo);
    out.row(i) = w == 0.0 ? MatrixXd(features.row(lo)) : MatrixXd((1.0 - w) * features.row(lo) + w * features.row(hi));
  }
  return out;
}

void save_features(const std::filesystem::path& path, const ConditioningSequence& seq) {
  Container c;
  c.magic = kFeatureMagic;
  c.set("frames", std::to_string(seq.frames()));
  c.set("dim", std::to_string(seq.dim()));
  c.set("fps", fmt(seq.fps));
  c.set("source", to_string(seq.source));
  c.payload.reserve(static_cast<std::size_t>(seq.features.size()));
  for (Eigen::Index i = 0; i < seq.frames(); ++i)
    for (Eigen::Index j = 0; j < seq.dim(); ++j) c.payload.push_back(static_cast<float>(seq.features(i, j)));
  write_container(path, c);
}

ConditioningSequence load_precomputed(const std::filesystem::path& path, double fps, bool allow_resample) {
  const Container header = read_container_header(path, kFeatureMagic);
  const long long frames = header.get_int("frames");
  const long long dim = header.get_int("dim");
  const double stored_fps = header.get_double("fps");
  if (frames < 0 || dim < 1 || !(stored_fps > 0.0)) throw BadHeader("invalid feature header in " + path.string());
  const Container c = read_container(path, kFeatureMagic, frames * dim);

  ConditioningSequence out;
  out.source = FeatureSource::Precomputed;
  out.fps = stored_fps;
  out.features.resize(frames, dim);
  for (long long i = 0; i < frames; ++i)
    for (long long j = 0; j < dim; ++j) out.features(i, j) = c.payload[static_cast<std::size_t>(i * dim + j)];
  if (std::abs(stored_fps - fps) > 1e-9) {
    if (!allow_resample)
      throw FpsMismatch(path.string() + " is stored at " + fmt(stored_fps) + " fps, expected " + fmt(fps));
    out.features = resample_features(out.features, stored_fps, fps);
    out.fps = fps;
  }
  return out;
}

AudioBuffer click_track(double bpm, double seconds, double sample_rate, double offset, double amplitude) {
  if (!(bpm > 0.0) || !(seconds > 0.0) || !(sample_rate > 0.0)) throw ConfigError("click track needs positive parameters");
  AudioBuffer out;
  out.sample_rate = sample_rate;
  out.samples.assign(static_cast<std::size_t>(std::llround(seconds * sample_rate)), 0.0f);
  const double period = 60.0 / bpm;
  const auto burst = static_cast<long long>(0.02 * sample_rate);
  for (double t = offset; t < seconds; t += period) {
    const auto start = static_cast<long long>(std::llround(t * sample_rate));
    for (long long n = 0; n < burst; ++n) {
      const auto idx = start + n;
      if (idx < 0 || idx >= static_cast<long long>(out.samples.size())) continue;
      const double tau = static_cast<double>(n) / sample_rate;
      out.samples[static_cast<std::size_t>(idx)] +=
          static_cast<float>(amplitude * std::exp(-tau / 0.004) * std::sin(2.0 * M_PI * 1000.0 * tau));
    }
  }
  return out;
}

}  // namespace edge::audio
