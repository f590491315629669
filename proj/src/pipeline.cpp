#include "edge/pipeline.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>

#include "edge/errors.hpp"

namespace edge::pipeline {

using Eigen::MatrixXd;
using kinematics::MotionClip;
using kinematics::Skeleton;

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_short(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size() && std::isfinite(d)) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
}

long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used == v.size()) return i;
  } catch (const std::exception&) {
  }
  throw ConfigError("key '" + key + "' expects an integer, got '" + v + "'");
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] != '-') {
      const auto u = std::stoull(v, &used);
      if (used == v.size()) return u;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError("key '" + key + "' expects a non-negative integer, got '" + v + "'");
}

int to_int(const std::string& key, const std::string& v) {
  const auto i = parse_int(key, v);
  if (i < std::numeric_limits<int>::min() || i > std::numeric_limits<int>::max())
    throw ConfigError("key '" + key + "' is out of range");
  return static_cast<int>(i);
}

void ensure_dir(const fs::path& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

void ensure_parent(const fs::path& file) { ensure_dir(file.parent_path()); }

std::string split_name(Split s) { return s == Split::Train ? "train" : "test"; }

/// Sorted regular files in `dir` with the given extension.
std::vector<fs::path> list_files(const fs::path& dir, const std::string& ext) {
  if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

const std::string* find_field(const std::vector<std::pair<std::string, std::string>>& fields, const std::string& key) {
  for (const auto& [k, v] : fields)
    if (k == key) return &v;
  return nullptr;
}

/// Sampling context rebuilt from a checkpoint.
struct Generator {
  denoiser::DenoiserModel model;
  diffusion::NoiseSchedule sched;
  double fps = 30.0;
  double guidance_weight = 2.0;
  std::optional<double> guidance_dropout;
  long long step = 0;
};

Generator load_generator(const fs::path& checkpoint) {
  auto loaded = denoiser::load_checkpoint(checkpoint);
  const auto& f = loaded.fields;
  auto get = [&](const std::string& key) -> std::string {
    const auto* v = find_field(f, key);
    if (!v) throw BadHeader(checkpoint.string() + " lacks field '" + key + "'");
    return *v;
  };
  Generator g{loaded.state->ema_model(), diffusion::cosine_schedule(to_int("diffusion_steps", get("diffusion_steps"))),
              parse_double("fps", get("fps")), parse_double("guidance_weight", get("guidance_weight")),
              std::nullopt, loaded.state->step};
  const auto dropout = get("guidance_dropout");
  if (dropout != "auto") g.guidance_dropout = parse_double("guidance_dropout", dropout);
  return g;
}

diffusion::SamplerConfig sampler_for(const Generator& g, const SampleRequest& req) {
  if (req.fps && std::abs(*req.fps - g.fps) > 1e-9)
    throw FpsMismatch("requested " + fmt_short(*req.fps) + " fps, the checkpoint was trained at " + fmt_short(g.fps));
  diffusion::SamplerConfig sc;
  sc.guidance_weight = req.guidance_weight.value_or(g.guidance_weight);
  sc.guidance_dropout = req.guidance_dropout ? req.guidance_dropout : g.guidance_dropout;
  sc.seed = req.seed;
  sc.validate();
  return sc;
}

audio::ConditioningSequence load_conditioning(const fs::path& path, const Generator& g) {
  auto cond = audio::load_precomputed(path, g.fps);
  if (cond.dim() != g.model.config().cond_dim)
    throw DimensionMismatch(path.string() + " has " + std::to_string(cond.dim()) +
                            " feature channels, the checkpoint expects " + std::to_string(g.model.config().cond_dim));
  return cond;
}

/// Squashes predicted contacts into [0, 1], leaving constrained entries
/// untouched so they stay bit-equal to the constraint.
void finalize_contacts(MatrixXd& x, const diffusion::EditConstraint* constraint) {
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (int c = 0; c < kinematics::PoseLayout::kContacts; ++c)
      if (!constraint || constraint->mask(i, c) == 0.0) x(i, c) = std::clamp(x(i, c), 0.0, 1.0);
}

std::vector<std::pair<std::string, std::string>> provenance(const Generator& g, const SampleRequest& req,
                                                            const diffusion::SamplerConfig& sc,
                                                            const std::string& command) {
  std::vector<std::pair<std::string, std::string>> out = {
      {"command", command},
      {"checkpoint", req.checkpoint.string()},
      {"checkpoint_step", std::to_string(g.step)},
      {"features", req.features.string()},
      {"start_frame", std::to_string(req.start_frame)},
      {"seed", std::to_string(sc.seed)},
      {"guidance_weight", fmt(sc.guidance_weight)},
      {"guidance_dropout", fmt(sc.dropout_fraction())},
      {"diffusion_steps", std::to_string(g.sched.steps)},
  };
  for (const auto& [k, v] : g.model.config().to_fields()) out.emplace_back("model." + k, v);
  return out;
}

MatrixXd conditioning_window(const audio::ConditioningSequence& cond, long long start, long long frames,
                             const fs::path& path) {
  if (start < 0 || start + frames > cond.frames())
    throw FeatureTooShort(path.string() + " has " + std::to_string(cond.frames()) + " frames, need " +
                          std::to_string(start + frames));
  return cond.features.middleRows(start, frames);
}

MotionClip sample_impl(const SampleRequest& req, const fs::path* constraint_path, const std::string& command) {
  if (req.out.empty()) throw ConfigError("an output path is required");
  auto g = load_generator(req.checkpoint);
  const auto sc = sampler_for(g, req);
  const auto cond_seq = load_conditioning(req.features, g);
  const int N = g.model.config().seq_len;
  const int dim = g.model.config().pose_dim();
  const MatrixXd cond = conditioning_window(cond_seq, req.start_frame, N, req.features);

  std::optional<diffusion::EditConstraint> constraint;
  if (constraint_path) {
    constraint = diffusion::read_constraint(*constraint_path);
    constraint->validate_for(N, dim);
  }
  ensure_parent(req.out);

  MatrixXd x = diffusion::sample(g.model, &cond, N, dim, g.sched, sc, constraint ? &*constraint : nullptr);
  finalize_contacts(x, constraint ? &*constraint : nullptr);
  MotionClip clip(std::move(x), g.fps, g.model.config().joints);
  auto extra = provenance(g, req, sc, command);
  if (constraint_path) extra.emplace_back("constraint", constraint_path->string());
  kinematics::write_motion(req.out, clip, extra);
  return clip;
}

/// Beat grid for a motion: a same-named .wav or .feat in `music_dir`, else
/// the beat channel of the features echoed in the motion header.
std::optional<audio::BeatGrid> music_beats_for(const fs::path& motion_path, const fs::path& music_dir,
                                               double fps, long long frames) {
  auto from_features = [&](const fs::path& feat, long long start) -> std::optional<audio::BeatGrid> {
    const auto seq = audio::load_precomputed(feat, fps);
    if (seq.dim() != audio::BaselineLayout::kDim) return std::nullopt;
    audio::BeatGrid grid;
    for (long long i = start; i < std::min<long long>(seq.frames(), start + frames); ++i)
      if (seq.features(i, audio::BaselineLayout::kBeat) > 0.5) grid.beat_times.push_back((i - start) / fps);
    return grid;
  };
  if (!music_dir.empty()) {
    const auto stem = motion_path.stem().string();
    const auto wav = music_dir / (stem + ".wav");
    if (fs::exists(wav)) {
      try {
        return audio::detect_beats(audio::read_wav(wav));
      } catch (const NoTempoFound&) {
        return audio::BeatGrid{};
      } catch (const TooShort&) {
        return audio::BeatGrid{};
      }
    }
    const auto feat = music_dir / (stem + ".feat");
    if (fs::exists(feat)) return from_features(feat, 0);
    return std::nullopt;
  }
  const auto header = kinematics::read_motion_header(motion_path);
  const auto* feat = find_field(header, "features");
  if (!feat || !fs::exists(*feat)) return std::nullopt;
  const auto* start = find_field(header, "start_frame");
  return from_features(*feat, start ? parse_int("start_frame", *start) : 0);
}

std::pair<MatrixXd, MatrixXd> corpus_features(const fs::path& dir, const Skeleton& skel) {
  const auto files = list_files(dir, ".motion");
  MatrixXd kinetic(static_cast<Eigen::Index>(files.size()), skel.joint_count());
  MatrixXd geometric(static_cast<Eigen::Index>(files.size()), metrics::kGeometricFeatureCount);
  for (std::size_t i = 0; i < files.size(); ++i) {
    const auto clip = kinematics::read_motion(files[i]);
    const MatrixXd positions = kinematics::forward_kinematics(skel, clip);
    kinetic.row(static_cast<Eigen::Index>(i)) = metrics::kinetic_features(positions, clip.fps()).transpose();
    geometric.row(static_cast<Eigen::Index>(i)) = metrics::geometric_features(positions, skel).transpose();
  }
  return {kinetic, geometric};
}

void write_text(const fs::path& path, const std::string& text) {
  ensure_parent(path);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

// ---- configuration -------------------------------------------------------

RunConfig::RunConfig() {
  model.layers = 2;
  model.heads = 4;
  model.model_dim = 64;
  model.mlp_dim = 128;
  model.seq_len = 60;
  model.ema_decay = 0.995;
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = {
      "layers",         "heads",           "model_dim",       "mlp_dim",         "dropout",
      "cond_dim",       "seq_len",         "joints",          "cond_dropout_prob", "ema_decay",
      "lambda_pos",     "lambda_vel",      "lambda_contact",  "contact_activation", "optimizer",
      "lr",             "beta1",           "beta2",           "beta3",           "eps",
      "weight_decay",   "clip_norm",       "decay_steps",     "min_lr_ratio",    "guidance_weight",
      "guidance_dropout", "diffusion_steps", "train_steps",   "batch_size",      "checkpoint_every",
      "max_clips",      "manifest",        "resume",          "skeleton",        "out_dir",
      "seed",           "fps",
  };
  return k;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "layers") model.layers = to_int(key, value);
  else if (key == "heads") model.heads = to_int(key, value);
  else if (key == "model_dim") model.model_dim = to_int(key, value);
  else if (key == "mlp_dim") model.mlp_dim = to_int(key, value);
  else if (key == "dropout") model.dropout = parse_double(key, value);
  else if (key == "cond_dim") model.cond_dim = to_int(key, value);
  else if (key == "seq_len") model.seq_len = to_int(key, value);
  else if (key == "joints") model.joints = to_int(key, value);
  else if (key == "cond_dropout_prob") model.cond_dropout_prob = parse_double(key, value);
  else if (key == "ema_decay") model.ema_decay = parse_double(key, value);
  else if (key == "lambda_pos") weights.pos = parse_double(key, value);
  else if (key == "lambda_vel") weights.vel = parse_double(key, value);
  else if (key == "lambda_contact") weights.contact = parse_double(key, value);
  else if (key == "contact_activation") {
    if (value == "clamp") activation = denoiser::ContactActivation::Clamp;
    else if (value == "sigmoid") activation = denoiser::ContactActivation::Sigmoid;
    else throw ConfigError("contact_activation must be clamp or sigmoid");
  } else if (key == "optimizer") optimizer.kind = denoiser::parse_optimizer_kind(value);
  else if (key == "lr") optimizer.lr = parse_double(key, value);
  else if (key == "beta1") optimizer.beta1 = parse_double(key, value);
  else if (key == "beta2") optimizer.beta2 = parse_double(key, value);
  else if (key == "beta3") optimizer.beta3 = parse_double(key, value);
  else if (key == "eps") optimizer.eps = parse_double(key, value);
  else if (key == "weight_decay") optimizer.weight_decay = parse_double(key, value);
  else if (key == "clip_norm") optimizer.clip_norm = parse_double(key, value);
  else if (key == "decay_steps") optimizer.decay_steps = parse_int(key, value);
  else if (key == "min_lr_ratio") optimizer.min_lr_ratio = parse_double(key, value);
  else if (key == "guidance_weight") sampler.guidance_weight = parse_double(key, value);
  else if (key == "guidance_dropout") {
    if (value == "auto") sampler.guidance_dropout.reset();
    else sampler.guidance_dropout = parse_double(key, value);
  } else if (key == "diffusion_steps") diffusion_steps = to_int(key, value);
  else if (key == "train_steps") train_steps = to_int(key, value);
  else if (key == "batch_size") batch_size = to_int(key, value);
  else if (key == "checkpoint_every") checkpoint_every = to_int(key, value);
  else if (key == "max_clips") max_clips = to_int(key, value);
  else if (key == "manifest") manifest = value;
  else if (key == "resume") resume = value;
  else if (key == "skeleton") skeleton = value;
  else if (key == "out_dir") out_dir = value;
  else if (key == "seed") seed = parse_u64(key, value);
  else if (key == "fps") fps = parse_double(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::validate() const {
  model.validate();
  weights.validate();
  optimizer.validate();
  sampler.validate();
  if (diffusion_steps < 1) throw ConfigError("diffusion_steps must be >= 1");
  if (train_steps < 0) throw ConfigError("train_steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
  if (max_clips < 0) throw ConfigError("max_clips must be >= 0");
  if (!(fps > 0.0)) throw ConfigError("fps must be positive");
  if (model.seq_len < 2) throw ConfigError("seq_len must be >= 2 (velocity and contact losses)");
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  for (const auto& [k, v] : model.to_fields()) out << k << " = " << v << "\n";
  out << "lambda_pos = " << fmt(weights.pos) << "\n";
  out << "lambda_vel = " << fmt(weights.vel) << "\n";
  out << "lambda_contact = " << fmt(weights.contact) << "\n";
  out << "contact_activation = " << (activation == denoiser::ContactActivation::Clamp ? "clamp" : "sigmoid") << "\n";
  for (const auto& [k, v] : optimizer.to_fields()) out << k << " = " << v << "\n";
  out << "guidance_weight = " << fmt(sampler.guidance_weight) << "\n";
  out << "guidance_dropout = " << (sampler.guidance_dropout ? fmt(*sampler.guidance_dropout) : "auto") << "\n";
  out << "diffusion_steps = " << diffusion_steps << "\n";
  out << "train_steps = " << train_steps << "\n";
  out << "batch_size = " << batch_size << "\n";
  out << "checkpoint_every = " << checkpoint_every << "\n";
  out << "max_clips = " << max_clips << "\n";
  if (!manifest.empty()) out << "manifest = " << manifest << "\n";
  if (!resume.empty()) out << "resume = " << resume << "\n";
  if (!skeleton.empty()) out << "skeleton = " << skeleton << "\n";
  out << "out_dir = " << out_dir << "\n";
  out << "seed = " << seed << "\n";
  out << "fps = " << fmt(fps) << "\n";
  return out.str();
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    try {
      c.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  auto c = parse(text.str(), path.string());
  // relative paths in a config resolve against the config's directory
  const auto base = path.parent_path();
  for (auto* p : {&c.manifest, &c.resume, &c.skeleton, &c.out_dir})
    if (!p->empty() && fs::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  return c;
}

Skeleton RunConfig::load_skeleton() const {
  auto skel = skeleton.empty() ? Skeleton::smpl() : Skeleton::load(skeleton);
  if (skel.joint_count() != model.joints)
    throw ConfigError("skeleton has " + std::to_string(skel.joint_count()) + " joints, config says " +
                      std::to_string(model.joints));
  return skel;
}

// ---- manifest ------------------------------------------------------------

void DatasetManifest::save(const fs::path& path) const {
  std::ostringstream out;
  out << "EDGEMANIFEST 1\n";
  out << "fps " << fmt(fps) << "\n";
  out << "frames " << frames << "\n";
  const auto base = path.parent_path();
  auto rel = [&](const fs::path& p) {
    if (p.empty()) return std::string("-");
    return p.lexically_relative(base.empty() ? fs::path(".") : base).generic_string();
  };
  for (const auto& c : clips)
    out << "clip " << split_name(c.split) << " " << rel(c.motion) << " " << rel(c.features) << " " << rel(c.audio)
        << "\n";
  write_text(path, out.str());
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line) || trim(line) != "EDGEMANIFEST 1") throw BadHeader(path.string() + " is not a manifest");
  DatasetManifest m;
  const auto base = path.parent_path();
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "fps") {
      ls >> m.fps;
    } else if (tag == "frames") {
      ls >> m.frames;
    } else if (tag == "clip") {
      std::string split, motion, features, audio_path;
      ls >> split >> motion >> features >> audio_path;
      if (split != "train" && split != "test") ls.setstate(std::ios::failbit);
      if (!ls.fail()) {
        ManifestEntry e;
        e.split = split == "train" ? Split::Train : Split::Test;
        e.motion = base / motion;
        e.features = base / features;
        if (audio_path != "-") e.audio = base / audio_path;
        m.clips.push_back(std::move(e));
      }
    } else {
      ls.setstate(std::ios::failbit);
    }
    if (ls.fail()) throw BadHeader(path.string() + ":" + std::to_string(lineno) + ": malformed line");
  }
  if (!(m.fps > 0.0) || m.frames < 1) throw BadHeader(path.string() + ": missing fps or frames");
  return m;
}

void DatasetManifest::validate() const {
  for (const auto& c : clips) {
    if (!fs::exists(c.motion)) throw IoError("missing motion file " + c.motion.string());
    if (!fs::exists(c.features)) throw IoError("missing feature file " + c.features.string());
    if (!c.audio.empty() && !fs::exists(c.audio)) throw IoError("missing audio file " + c.audio.string());
    const auto motion = kinematics::read_motion(c.motion);
    if (std::abs(motion.fps() - fps) > 1e-9) throw FpsMismatch(c.motion.string() + " has a different frame rate");
    const auto feats = audio::load_precomputed(c.features, fps);
    if (feats.frames() != motion.frame_count())
      throw ShapeMismatch(c.features.string() + " has " + std::to_string(feats.frames()) + " frames, motion has " +
                          std::to_string(motion.frame_count()));
  }
}

std::vector<ManifestEntry> DatasetManifest::split(Split s) const {
  std::vector<ManifestEntry> out;
  for (const auto& c : clips)
    if (c.split == s) out.push_back(c);
  return out;
}

// ---- synthetic data ------------------------------------------------------

kinematics::ContactThresholds synthetic_contact_thresholds() { return {0.08, 0.3}; }

SyntheticClip synthesize_clip(const SynthOptions& opts, int index, const Skeleton& skel) {
  if (skel.joint_count() != 24) throw InvalidSkeleton("synthetic dances need the 24-joint SMPL topology");
  if (opts.frames < 3) throw ConfigError("synthetic clips need at least 3 frames");
  Rng rng = Rng(opts.seed).split(static_cast<std::uint64_t>(index));

  SyntheticClip out;
  out.bpm = rng.uniform(opts.min_bpm, opts.max_bpm);
  const double period = 60.0 / out.bpm;
  const double offset = rng.uniform(0.0, period);
  const double yaw = rng.uniform(-M_PI, M_PI);
  const double sway = rng.uniform(0.15, 0.3);
  const double lift = rng.uniform(0.5, 0.9);

  struct Oscillator {
    int joint;
    Eigen::Vector3d axis;
    double amplitude, harmonic, phase;
  };
  const std::vector<std::pair<int, std::pair<double, double>>> upper = {
      {3, {0.05, 0.2}},  {6, {0.05, 0.2}},  {9, {0.05, 0.2}},  {12, {0.05, 0.25}}, {13, {0.05, 0.15}},
      {14, {0.05, 0.15}}, {15, {0.1, 0.3}}, {16, {0.3, 0.8}},  {17, {0.3, 0.8}},   {18, {0.2, 0.9}},
      {19, {0.2, 0.9}},  {20, {0.1, 0.4}},  {21, {0.1, 0.4}},
  };
  std::vector<Oscillator> oscillators;
  for (const auto& [j, range] : upper) {
    Eigen::Vector3d axis;
    do {
      axis = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
    } while (axis.norm() < 1e-6);
    oscillators.push_back({j, axis.normalized(), rng.uniform(range.first, range.second),
                           rng.bernoulli(0.5) ? 0.5 : 1.0, rng.uniform(0.0, 2.0 * M_PI)});
  }

  // a little extra audio so the feature extractor covers every motion frame
  out.audio = audio::click_track(out.bpm, (opts.frames + 1) / opts.fps, opts.sample_rate, offset);
  out.features = audio::extract_baseline_features(out.audio, opts.fps);
  if (out.features.cond.frames() < opts.frames) throw FeatureTooShort("synthetic audio is too short");
  out.features.cond.features.conservativeResize(opts.frames, Eigen::NoChange);
  auto& beats = out.features.beats.beat_times;
  beats.erase(std::remove_if(beats.begin(), beats.end(), [&](double t) { return t >= opts.frames / opts.fps; }),
              beats.end());

  const kinematics::PoseLayout layout;
  const Eigen::Matrix3d root_yaw = Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  auto rot_x = [](double a) { return Eigen::AngleAxisd(a, Eigen::Vector3d::UnitX()).toRotationMatrix(); };
  const int hips[2] = {1, 2}, knees[2] = {4, 5}, ankles[2] = {7, 8}, toes[2] = {10, 11};

  // rest ankle positions relative to the root (legs straight, root yawed)
  Eigen::Vector3d rest_ankle[2];
  for (int s = 0; s < 2; ++s)
    rest_ankle[s] = root_yaw * (skel.offsets[static_cast<std::size_t>(hips[s])] +
                                skel.offsets[static_cast<std::size_t>(knees[s])] +
                                skel.offsets[static_cast<std::size_t>(ankles[s])]);
  const double toe_height =
      (rest_ankle[0] + root_yaw * skel.offsets[static_cast<std::size_t>(toes[0])]).z();
  const Eigen::Vector3d base_translation(0.0, 0.0, -toe_height);

  MatrixXd poses = MatrixXd::Zero(opts.frames, layout.dim());
  for (int i = 0; i < opts.frames; ++i) {
    const double t = i / opts.fps;
    const double beat_pos = (t - offset) / period;
    const double beat = std::floor(beat_pos);
    const double u = beat_pos - beat;
    const int pinned = static_cast<int>(((static_cast<long long>(beat) % 2) + 2) % 2);
    const int free_leg = 1 - pinned;
    const double theta = 2.0 * M_PI * beat_pos;

    std::vector<Eigen::Matrix3d> R(24, Eigen::Matrix3d::Identity());
    R[0] = root_yaw;
    const double sway_angle = sway * std::sin(2.0 * M_PI * u);
    R[static_cast<std::size_t>(hips[pinned])] = rot_x(sway_angle);
    R[static_cast<std::size_t>(ankles[pinned])] = rot_x(-sway_angle);
    const double s2 = std::pow(std::sin(M_PI * u), 2);
    R[static_cast<std::size_t>(hips[free_leg])] = rot_x(-0.6 * lift * s2);
    R[static_cast<std::size_t>(knees[free_leg])] = rot_x(1.1 * lift * s2);
    R[static_cast<std::size_t>(ankles[free_leg])] = rot_x(-0.5 * lift * s2);
    for (const auto& o : oscillators)
      R[static_cast<std::size_t>(o.joint)] =
          Eigen::AngleAxisd(o.amplitude * std::sin(o.harmonic * theta + o.phase), o.axis).toRotationMatrix();

    for (int j = 0; j < 24; ++j)
      poses.block(i, layout.rotation_offset(j), 1, 6) =
          kinematics::matrix_to_rot6d(R[static_cast<std::size_t>(j)]).transpose();

    // keep the pinned ankle where it sits with straight legs
    const Eigen::Vector3d ankle_local =
        root_yaw * (skel.offsets[static_cast<std::size_t>(hips[pinned])] +
                    R[static_cast<std::size_t>(hips[pinned])] *
                        (skel.offsets[static_cast<std::size_t>(knees[pinned])] +
                         skel.offsets[static_cast<std::size_t>(ankles[pinned])]));
    const Eigen::Vector3d translation = base_translation + rest_ankle[pinned] - ankle_local;
    poses.block(i, layout.translation_offset(), 1, 3) = translation.transpose();
  }
  const MatrixXd positions = kinematics::forward_kinematics(skel, poses);
  poses.leftCols(kinematics::PoseLayout::kContacts) =
      kinematics::extract_contact_labels(positions, opts.fps, skel.contact_joints, synthetic_contact_thresholds());
  out.motion = MotionClip(std::move(poses), opts.fps);
  return out;
}

DatasetManifest cmd_synth_data(const fs::path& out_dir, const SynthOptions& opts) {
  if (opts.count < 1) throw ConfigError("count must be >= 1");
  if (opts.frames < 3) throw ConfigError("frames must be >= 3");
  if (!(opts.fps > 0.0)) throw ConfigError("fps must be positive");
  if (!(opts.min_bpm > 0.0 && opts.max_bpm >= opts.min_bpm)) throw ConfigError("invalid BPM range");
  if (!(opts.test_fraction >= 0.0 && opts.test_fraction < 1.0)) throw ConfigError("test_fraction must be in [0, 1)");
  ensure_dir(out_dir);
  const auto skel = Skeleton::smpl();
  DatasetManifest manifest;
  manifest.fps = opts.fps;
  manifest.frames = opts.frames;
  const int test_count = static_cast<int>(std::floor(opts.count * opts.test_fraction));
  for (int k = 0; k < opts.count; ++k) {
    const auto clip = synthesize_clip(opts, k, skel);
    char stem[32];
    std::snprintf(stem, sizeof stem, "clip_%04d", k);
    ManifestEntry e;
    e.motion = out_dir / (std::string(stem) + ".motion");
    e.features = out_dir / (std::string(stem) + ".feat");
    e.audio = out_dir / (std::string(stem) + ".wav");
    e.split = k >= opts.count - test_count ? Split::Test : Split::Train;
    kinematics::write_motion(e.motion, clip.motion,
                             {{"source", "synthetic"}, {"seed", std::to_string(opts.seed)}, {"index", std::to_string(k)},
                              {"bpm", fmt(clip.bpm)}});
    audio::save_features(e.features, clip.features.cond);
    audio::write_wav(e.audio, clip.audio);
    manifest.clips.push_back(std::move(e));
  }
  manifest.save(out_dir / "manifest.txt");
  return manifest;
}

// ---- training ------------------------------------------------------------

TrainReport cmd_train(const RunConfig& config) {
  config.validate();
  if (config.manifest.empty()) throw ConfigError("train needs 'manifest'");
  const auto skel = config.load_skeleton();
  const auto manifest = DatasetManifest::load(config.manifest);
  manifest.validate();
  if (std::abs(manifest.fps - config.fps) > 1e-9) throw FpsMismatch("manifest fps differs from config fps");

  const int N = config.model.seq_len;
  std::vector<denoiser::TrainingExample> windows;
  for (const auto& entry : manifest.split(Split::Train)) {
    const auto motion = kinematics::read_motion(entry.motion);
    const auto feats = audio::load_precomputed(entry.features, config.fps);
    if (feats.dim() != config.model.cond_dim)
      throw DimensionMismatch(entry.features.string() + " has " + std::to_string(feats.dim()) +
                              " channels, cond_dim is " + std::to_string(config.model.cond_dim));
    if (motion.frames().cols() != config.model.pose_dim())
      throw ShapeMismatch(entry.motion.string() + " does not match the configured pose layout");
    const int stride = std::max(1, N / 2);
    for (Eigen::Index start = 0; start + N <= motion.frame_count(); start += stride)
      windows.push_back({motion.frames().middleRows(start, N), feats.features.middleRows(start, N)});
  }
  if (windows.empty()) throw TooShort("no training clip is at least seq_len = " + std::to_string(N) + " frames");
  if (config.max_clips > 0 && windows.size() > static_cast<std::size_t>(config.max_clips))
    windows.resize(static_cast<std::size_t>(config.max_clips));

  std::unique_ptr<denoiser::TrainState> state;
  if (!config.resume.empty()) {
    state = std::move(denoiser::load_checkpoint(config.resume).state);
    if (state->model.config().to_fields() != config.model.to_fields())
      throw ConfigError("checkpoint " + config.resume + " was trained with a different model config");
    state->optimizer_config = config.optimizer;
  } else {
    state = std::make_unique<denoiser::TrainState>(config.model, config.optimizer, config.seed);
  }

  const fs::path out_dir = config.out_dir;
  ensure_dir(out_dir);
  const auto sched = diffusion::cosine_schedule(config.diffusion_steps);
  const denoiser::TrainSettings settings{config.weights, config.activation, config.diffusion_steps};
  const std::vector<std::pair<std::string, std::string>> extra = {
      {"diffusion_steps", std::to_string(config.diffusion_steps)},
      {"fps", fmt(config.fps)},
      {"guidance_weight", fmt(config.sampler.guidance_weight)},
      {"guidance_dropout", config.sampler.guidance_dropout ? fmt(*config.sampler.guidance_dropout) : "auto"},
      {"lambda_pos", fmt(config.weights.pos)},
      {"lambda_vel", fmt(config.weights.vel)},
      {"lambda_contact", fmt(config.weights.contact)},
  };

  TrainReport report;
  report.log = out_dir / "loss_log.csv";
  const bool append = !config.resume.empty() && fs::exists(report.log);
  std::ofstream log(report.log, append ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write " + report.log.string());
  if (!append) log << "step,loss,simple,joint,vel,contact,unconditional_clips\n";

  const Rng root(config.seed);
  const auto W = static_cast<std::int64_t>(windows.size());
  std::vector<denoiser::TrainingExample> batch(static_cast<std::size_t>(config.batch_size));
  while (state->step < config.train_steps) {
    const Rng step_rng = root.split(static_cast<std::uint64_t>(state->step));
    Rng pick = step_rng.split(0);
    for (auto& ex : batch) ex = windows[static_cast<std::size_t>(pick.uniform_int(0, W - 1))];
    Rng train_rng = step_rng.split(1);
    const auto stats = denoiser::train_step(*state, batch, sched, skel, settings, train_rng);
    log << state->step << "," << fmt_short(stats.loss) << "," << fmt_short(stats.simple) << ","
        << fmt_short(stats.joint) << "," << fmt_short(stats.vel) << "," << fmt_short(stats.contact) << ","
        << stats.unconditional_clips << "\n";
    report.final_loss = stats.loss;
    if (state->step % config.checkpoint_every == 0) {
      const auto path = out_dir / ("ckpt_" + std::to_string(state->step) + ".edge");
      denoiser::save_checkpoint(path, *state, extra);
      report.checkpoints.push_back(path);
    }
  }
  log.flush();
  const auto final_path = out_dir / "checkpoint.edge";
  denoiser::save_checkpoint(final_path, *state, extra);
  report.checkpoints.push_back(final_path);
  report.final_step = state->step;
  return report;
}

// ---- sampling ------------------------------------------------------------

MotionClip cmd_sample(const SampleRequest& req) { return sample_impl(req, nullptr, "sample"); }

MotionClip cmd_edit(const SampleRequest& req, const fs::path& constraint) {
  return sample_impl(req, &constraint, "edit");
}

LongFormReport cmd_longform(const SampleRequest& req, double seconds) {
  if (req.out.empty()) throw ConfigError("an output path is required");
  if (!(seconds > 0.0)) throw ConfigError("seconds must be positive");
  auto g = load_generator(req.checkpoint);
  const auto sc = sampler_for(g, req);
  const auto cond_seq = load_conditioning(req.features, g);
  const int N = g.model.config().seq_len;
  if (N % 2 != 0) throw BadOverlap("long-form sampling needs an even seq_len");
  const int half = N / 2;
  const auto total = static_cast<long long>(std::llround(seconds * g.fps));
  const long long slices = std::max(1LL, (total + half - 1) / half - 1);
  const long long covered = (slices + 1) * half;
  if (req.start_frame < 0 || req.start_frame + covered > cond_seq.frames())
    throw FeatureTooShort(req.features.string() + " covers " + std::to_string(cond_seq.frames()) +
                          " frames, long-form request needs " + std::to_string(req.start_frame + covered));
  std::vector<MatrixXd> cond_batch;
  for (long long k = 0; k < slices; ++k)
    cond_batch.push_back(cond_seq.features.middleRows(req.start_frame + k * half, N));
  ensure_parent(req.out);

  // a request that fits in one window is a plain sample
  diffusion::LongFormResult result;
  if (slices == 1) {
    result.stitched = diffusion::sample(g.model, &cond_batch[0], N, g.model.config().pose_dim(), g.sched, sc);
    result.clips.push_back(result.stitched);
  } else {
    result = diffusion::long_form_sample(g.model, cond_batch, N, g.model.config().pose_dim(), g.sched, sc);
  }
  LongFormReport report;
  report.slices = static_cast<int>(slices);
  for (std::size_t k = 1; k < result.clips.size(); ++k)
    report.max_overlap_difference =
        std::max(report.max_overlap_difference,
                 (result.clips[k].topRows(half) - result.clips[k - 1].bottomRows(half)).cwiseAbs().maxCoeff());
  MatrixXd x = result.stitched.topRows(total);
  finalize_contacts(x, nullptr);
  report.motion = MotionClip(std::move(x), g.fps, g.model.config().joints);
  auto extra = provenance(g, req, sc, "longform");
  extra.emplace_back("seconds", fmt(seconds));
  extra.emplace_back("slices", std::to_string(slices));
  kinematics::write_motion(req.out, report.motion, extra);
  return report;
}

// ---- evaluation ----------------------------------------------------------

EvaluateResult cmd_evaluate(const EvaluateRequest& req) {
  if (req.motion_dir.empty()) throw ConfigError("evaluate needs a motion directory");
  const auto skel = req.skeleton.empty() ? Skeleton::smpl() : Skeleton::load(req.skeleton);
  const auto files = list_files(req.motion_dir, ".motion");
  if (!req.reference_dir.empty() && !fs::is_directory(req.reference_dir))
    throw IoError(req.reference_dir.string() + " is not a directory");

  EvaluateResult result;
  auto& report = result.report;
  std::vector<Eigen::VectorXd> kinetic, geometric;
  bool have_fps = false;
  for (const auto& file : files) {
    try {
      const auto clip = kinematics::read_motion(file);
      if (req.fps && std::abs(clip.fps() - *req.fps) > 1e-9) throw FpsMismatch(file.string() + " is not at the requested fps");
      if (have_fps && std::abs(clip.fps() - report.fps) > 1e-9) throw FpsMismatch(file.string() + " frame rate differs");
      const auto beats = music_beats_for(file, req.music_dir, clip.fps(), clip.frame_count());
      auto m = metrics::evaluate_clip(file.stem().string(), clip, skel, beats ? &*beats : nullptr, req.options);
      report.fps = clip.fps();
      have_fps = true;
      kinetic.push_back(m.kinetic);
      geometric.push_back(m.geometric);
      report.clips.push_back(std::move(m));
    } catch (const Error& e) {
      ++result.failures;
      report.metadata.emplace_back("warning", file.filename().string() + ": " + e.what());
    }
  }
  report.metadata.insert(report.metadata.begin(), {"motion_dir", req.motion_dir.string()});
  report.metadata.insert(report.metadata.begin() + 1, {"clips", std::to_string(report.clips.size())});
  report.metadata.insert(report.metadata.begin() + 2, {"failures", std::to_string(result.failures)});

  auto stack = [](const std::vector<Eigen::VectorXd>& rows, Eigen::Index cols) {
    MatrixXd m(static_cast<Eigen::Index>(rows.size()), cols);
    for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    return m;
  };
  const MatrixXd kin = stack(kinetic, skel.joint_count());
  const MatrixXd geo = stack(geometric, metrics::kGeometricFeatureCount);
  if (kin.rows() >= 2) {
    report.set_metrics["dist_k"] = metrics::diversity(kin);
    report.set_metrics["dist_g"] = metrics::diversity(geo);
  }
  if (!req.reference_dir.empty()) {
    const auto [ref_kin, ref_geo] = corpus_features(req.reference_dir, skel);
    report.metadata.emplace_back("reference_dir", req.reference_dir.string());
    report.set_metrics["fid_k"] = metrics::frechet_distance(metrics::FeatureDistribution::from_samples(kin),
                                                            metrics::FeatureDistribution::from_samples(ref_kin));
    report.set_metrics["fid_g"] = metrics::frechet_distance(metrics::FeatureDistribution::from_samples(geo),
                                                            metrics::FeatureDistribution::from_samples(ref_geo));
  }
  if (!req.out.empty()) write_text(req.out, report.to_text());
  if (!req.csv.empty()) write_text(req.csv, report.to_csv());
  return result;
}

std::vector<SweepPoint> cmd_evaluate_sweep(const SweepRequest& req) {
  if (req.samples < 1) throw ConfigError("sweep needs at least one sample per checkpoint");
  const auto manifest = DatasetManifest::load(req.manifest);
  auto entries = manifest.split(Split::Test);
  if (entries.empty()) entries = manifest.split(Split::Train);
  if (entries.empty()) throw TooFewClips("manifest has no clips");

  std::vector<std::pair<long long, fs::path>> checkpoints;
  const std::regex pattern("ckpt_([0-9]+)\\.edge");
  for (const auto& p : list_files(req.checkpoint_dir, ".edge")) {
    std::smatch m;
    const auto name = p.filename().string();
    if (std::regex_match(name, m, pattern)) checkpoints.emplace_back(std::stoll(m[1].str()), p);
  }
  std::sort(checkpoints.begin(), checkpoints.end());
  if (checkpoints.empty()) throw IoError("no ckpt_<step>.edge files in " + req.checkpoint_dir.string());

  const auto skel = Skeleton::smpl();
  std::vector<SweepPoint> points;
  for (const auto& [step, path] : checkpoints) {
    const auto g = load_generator(path);
    const int N = g.model.config().seq_len;
    double total = 0.0;
    for (int s = 0; s < req.samples; ++s) {
      const auto& entry = entries[static_cast<std::size_t>(s) % entries.size()];
      const auto cond_seq = load_conditioning(entry.features, g);
      const MatrixXd cond = conditioning_window(cond_seq, 0, N, entry.features);
      SampleRequest sreq;
      sreq.guidance_weight = req.guidance_weight;
      sreq.seed = req.seed + static_cast<std::uint64_t>(s);
      const auto sc = sampler_for(g, sreq);
      const MatrixXd x = diffusion::sample(g.model, &cond, N, g.model.config().pose_dim(), g.sched, sc);
      total += metrics::pfc(kinematics::forward_kinematics(skel, x), skel).value;
    }
    points.push_back({path, step, total / req.samples});
  }
  if (!req.csv.empty()) {
    std::ostringstream out;
    out << "step,checkpoint,pfc_mean\n";
    for (const auto& p : points) out << p.step << "," << p.checkpoint.filename().string() << "," << fmt_short(p.pfc_mean) << "\n";
    write_text(req.csv, out.str());
  }
  return points;
}

int exit_code_for(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    switch (err->category()) {
      case ErrorCategory::Config:
        return 2;
      case ErrorCategory::Data:
        return 3;
      case ErrorCategory::Numeric:
        return 4;
    }
  }
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return 3;
  return 1;
}

}  // namespace edge::pipeline
