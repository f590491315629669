#include <doctest.h>

#include <fstream>
#include <sstream>

#include "edge/errors.hpp"
#include "edge/pipeline.hpp"
#include "support.hpp"

using namespace edge;
using namespace edge::pipeline;
using Eigen::MatrixXd;

namespace {

const char* kTinyConfig = R"(# tiny model for plumbing tests
layers = 1
heads = 2
model_dim = 16
mlp_dim = 32
seq_len = 20
ema_decay = 0.9
diffusion_steps = 8
train_steps = 4
batch_size = 2
checkpoint_every = 2
seed = 3
)";

SynthOptions tiny_synth() {
  SynthOptions o;
  o.count = 4;
  o.frames = 60;
  o.test_fraction = 0.25;
  o.seed = 11;
  return o;
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

/// Synthetic dataset plus a 4-step checkpoint, built once for the suite.
struct Workspace {
  test::TempDir dir{"pipeline"};
  DatasetManifest manifest;
  RunConfig config;
  TrainReport trained;

  Workspace() {
    manifest = cmd_synth_data(dir / "data", tiny_synth());
    config = RunConfig::parse(kTinyConfig);
    config.manifest = (dir / "data" / "manifest.txt").string();
    config.out_dir = (dir / "run").string();
    trained = cmd_train(config);
  }

  fs::path checkpoint() const { return dir / "run" / "checkpoint.edge"; }
  fs::path features(int k = 0) const { return manifest.clips.at(k).features; }

  SampleRequest request(const std::string& out) const {
    SampleRequest r;
    r.checkpoint = checkpoint();
    r.features = features();
    r.out = dir / out;
    r.seed = 5;
    return r;
  }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_CASE("run config parses, rejects unknown keys and round-trips") {
  const RunConfig c = RunConfig::parse(kTinyConfig);
  CHECK(c.model.layers == 1);
  CHECK(c.model.model_dim == 16);
  CHECK(c.diffusion_steps == 8);
  CHECK(c.seed == 3);
  CHECK(RunConfig::parse(c.to_text()).to_text() == c.to_text());

  CHECK_THROWS_AS(RunConfig::parse("no_such_key = 1\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("layers = two\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("layers\n"), ConfigError);

  RunConfig bad = c;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.model.heads = 3;  // does not divide 16
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("every listed key is accepted by set") {
  RunConfig c;
  // empty path keys are omitted from the text
  c.manifest = "m.txt";
  c.resume = "r.edge";
  c.skeleton = "s.txt";
  std::istringstream text(c.to_text());
  std::size_t seen = 0;
  for (std::string line; std::getline(text, line);) {
    const auto eq = line.find('=');
    if (line.empty() || line[0] == '#' || eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(' '));
      s.erase(s.find_last_not_of(' ') + 1);
      return s;
    };
    const std::string key = trim(line.substr(0, eq));
    CHECK(std::find(RunConfig::keys().begin(), RunConfig::keys().end(), key) != RunConfig::keys().end());
    CHECK_NOTHROW(c.set(key, trim(line.substr(eq + 1))));
    ++seen;
  }
  CHECK(seen == RunConfig::keys().size());
}

TEST_CASE("manifest round trip and validation") {
  test::TempDir dir("manifest");
  const DatasetManifest m = cmd_synth_data(dir.path(), tiny_synth());
  REQUIRE(m.clips.size() == 4);
  CHECK(m.split(Split::Train).size() == 3);
  CHECK(m.split(Split::Test).size() == 1);

  const DatasetManifest back = DatasetManifest::load(dir / "manifest.txt");
  CHECK(back.fps == m.fps);
  CHECK(back.frames == m.frames);
  REQUIRE(back.clips.size() == m.clips.size());
  for (std::size_t k = 0; k < m.clips.size(); ++k) {
    CHECK(fs::equivalent(back.clips[k].motion, m.clips[k].motion));
    CHECK(back.clips[k].split == m.clips[k].split);
  }
  CHECK_NOTHROW(back.validate());

  fs::remove(m.clips[1].features);
  CHECK_THROWS(DatasetManifest::load(dir / "manifest.txt").validate());
  CHECK_THROWS(DatasetManifest::load(dir / "missing.txt"));
}

TEST_CASE("synthetic clips are deterministic and physically sane") {
  const auto skel = kinematics::Skeleton::smpl();
  const SynthOptions o = tiny_synth();
  const SyntheticClip a = synthesize_clip(o, 2, skel), b = synthesize_clip(o, 2, skel), c = synthesize_clip(o, 3, skel);
  CHECK(a.motion.frames() == b.motion.frames());
  CHECK(a.features.cond.features == b.features.cond.features);
  CHECK(a.motion.frames() != c.motion.frames());
  CHECK(a.motion.frame_count() == o.frames);
  CHECK(a.bpm >= o.min_bpm);
  CHECK(a.bpm <= o.max_bpm);

  // contacts carry both states, and rotations stay rigid
  const MatrixXd contacts = a.motion.frames().leftCols(4);
  CHECK(contacts.maxCoeff() == 1.0);
  CHECK(contacts.minCoeff() == 0.0);
  CHECK(metrics::bone_length_drift(kinematics::forward_kinematics(skel, a.motion), skel) < 1e-9);

  test::TempDir d1("synth_a"), d2("synth_b");
  cmd_synth_data(d1.path(), o);
  cmd_synth_data(d2.path(), o);
  for (const auto& e : fs::directory_iterator(d1.path()))
    CHECK_MESSAGE(test::files_equal(e.path(), d2 / e.path().filename().string()), e.path().filename().string());
}

TEST_CASE("training writes checkpoints and one log row per step") {
  const Workspace& w = workspace();
  CHECK(w.trained.final_step == 4);
  CHECK(std::isfinite(w.trained.final_loss));
  REQUIRE(w.trained.checkpoints.size() == 3);
  CHECK(fs::exists(w.dir / "run" / "ckpt_2.edge"));
  CHECK(fs::exists(w.dir / "run" / "ckpt_4.edge"));
  CHECK(fs::exists(w.checkpoint()));
  CHECK(line_count(w.trained.log) == 1 + 4);
}

TEST_CASE("resumed training continues the step counter and the log") {
  const Workspace& w = workspace();
  RunConfig c = w.config;
  c.out_dir = (w.dir / "resume").string();
  c.train_steps = 2;
  const TrainReport first = cmd_train(c);
  CHECK(first.final_step == 2);

  c.resume = (w.dir / "resume" / "checkpoint.edge").string();
  c.train_steps = 4;
  const TrainReport second = cmd_train(c);
  CHECK(second.final_step == 4);
  CHECK(line_count(second.log) == 1 + 4);

  RunConfig other = c;
  other.model.model_dim = 32;
  other.model.mlp_dim = 64;
  CHECK_THROWS_AS(cmd_train(other), ConfigError);
}

TEST_CASE("sampling is deterministic and guidance changes the output") {
  const Workspace& w = workspace();
  const auto skel = kinematics::Skeleton::smpl();
  SampleRequest r = w.request("s1.motion");
  const auto a = cmd_sample(r);
  r.out = w.dir / "s2.motion";
  const auto b = cmd_sample(r);
  CHECK(test::files_equal(w.dir / "s1.motion", w.dir / "s2.motion"));
  CHECK(a.frames() == b.frames());
  CHECK(a.frame_count() == 20);
  CHECK(metrics::bone_length_drift(kinematics::forward_kinematics(skel, a), skel) < 1e-6);

  r.guidance_weight = 1.0;
  const auto w1 = cmd_sample(r);
  r.guidance_weight = 2.0;
  const auto w2 = cmd_sample(r);
  CHECK((w1.frames() - w2.frames()).cwiseAbs().maxCoeff() > 0.0);

  r.seed = 6;
  const auto other_seed = cmd_sample(r);
  CHECK((other_seed.frames() - w2.frames()).cwiseAbs().maxCoeff() > 0.0);

  r.fps = 25.0;
  CHECK_THROWS_AS(cmd_sample(r), FpsMismatch);
}

TEST_CASE("editing reproduces the constrained entries exactly") {
  const Workspace& w = workspace();
  const MatrixXd reference = kinematics::read_motion(w.manifest.clips[0].motion).frames().topRows(20);

  for (const auto& constraint :
       {diffusion::EditConstraint::in_between(reference, 4), diffusion::EditConstraint::lower_body(reference)}) {
    diffusion::write_constraint(w.dir / "c.constraint", constraint);
    const auto out = cmd_edit(w.request("edit.motion"), w.dir / "c.constraint");
    // the constraint file stores float32, so compare against what was read back
    const auto stored = diffusion::read_constraint(w.dir / "c.constraint");
    int masked = 0;
    for (Eigen::Index i = 0; i < stored.mask.rows(); ++i)
      for (Eigen::Index j = 0; j < stored.mask.cols(); ++j)
        if (stored.mask(i, j) > 0.5) {
          ++masked;
          CHECK(out.frames()(i, j) == static_cast<double>(static_cast<float>(stored.known(i, j))));
        }
    CHECK(masked > 0);
  }

  diffusion::write_constraint(w.dir / "empty.constraint", diffusion::EditConstraint::empty(reference));
  const auto edited = cmd_edit(w.request("empty_edit.motion"), w.dir / "empty.constraint");
  const auto sampled = cmd_sample(w.request("plain.motion"));
  CHECK(edited.frames() == sampled.frames());
}

TEST_CASE("long-form generation writes the requested length") {
  const Workspace& w = workspace();
  const LongFormReport lf = cmd_longform(w.request("long.motion"), 1.5);
  CHECK(lf.motion.frame_count() == 45);
  CHECK(lf.slices >= 4);
  CHECK(lf.max_overlap_difference == 0.0);
  CHECK(kinematics::read_motion(w.dir / "long.motion").frame_count() == 45);
  CHECK_THROWS_AS(cmd_longform(w.request("too_long.motion"), 5.0), FeatureTooShort);
}

TEST_CASE("evaluation of a corpus against itself") {
  const Workspace& w = workspace();
  EvaluateRequest req;
  req.motion_dir = w.dir / "data";
  req.music_dir = w.dir / "data";
  req.reference_dir = w.dir / "data";
  req.out = w.dir / "report.txt";
  req.csv = w.dir / "report.csv";
  const EvaluateResult res = cmd_evaluate(req);
  CHECK(res.failures == 0);
  CHECK(res.report.clips.size() == 4);
  CHECK(fs::exists(req.out));
  CHECK(line_count(req.csv) == 1 + 4);
  // zero up to the rounding in the square roots of the near-null eigenvalues
  // of a rank-deficient covariance, which scales with the feature spread
  const double spread_k = std::pow(res.report.set_metrics.at("dist_k"), 2);
  CHECK(res.report.set_metrics.at("dist_k") > 0.0);
  CHECK(std::abs(res.report.set_metrics.at("fid_k")) < 1e-6 * spread_k);
  CHECK(std::abs(res.report.set_metrics.at("fid_g")) < 1e-6);
  for (const auto& c : res.report.clips) {
    CHECK(c.beat_alignment >= 0.0);
    CHECK(c.beat_alignment <= 1.0);
    CHECK(c.bone_drift < 1e-6);
  }
}

TEST_CASE("static corpus scores zero PFC with degenerate flags") {
  test::TempDir dir("static");
  for (int k = 0; k < 3; ++k)
    kinematics::write_motion(dir / ("clip_" + std::to_string(k) + ".motion"),
                             kinematics::MotionClip(test::rest_poses(30, 24), 30.0));
  EvaluateRequest req;
  req.motion_dir = dir.path();
  req.out = dir / "report.txt";
  const EvaluateResult res = cmd_evaluate(req);
  REQUIRE(res.report.clips.size() == 3);
  for (const auto& c : res.report.clips) {
    CHECK(c.pfc == 0.0);
    CHECK(c.pfc_degenerate);
  }

  // a clip at another frame rate is a per-clip failure when a rate is requested
  kinematics::write_motion(dir / "odd.motion", kinematics::MotionClip(test::rest_poses(30, 24), 25.0));
  req.fps = 30.0;
  const EvaluateResult mixed = cmd_evaluate(req);
  CHECK(mixed.failures == 1);
  CHECK(mixed.report.clips.size() == 3);
}

TEST_CASE("checkpoint sweep reports every checkpoint in step order") {
  const Workspace& w = workspace();
  SweepRequest req;
  req.checkpoint_dir = w.dir / "run";
  req.manifest = w.dir / "data" / "manifest.txt";
  req.samples = 2;
  req.csv = w.dir / "sweep.csv";
  const auto points = cmd_evaluate_sweep(req);
  REQUIRE(points.size() == 2);
  CHECK(points[0].step == 2);
  CHECK(points[1].step == 4);
  for (const auto& p : points) CHECK(p.pfc_mean >= 0.0);
  CHECK(line_count(req.csv) == 1 + 2);
}

TEST_CASE("exit codes follow the error category") {
  CHECK(exit_code_for(ConfigError("x")) == 2);
  CHECK(exit_code_for(IoError("x")) == 3);
  CHECK(exit_code_for(FpsMismatch("x")) == 3);
  CHECK(exit_code_for(NonFiniteLoss("x")) == 4);
  CHECK(exit_code_for(std::runtime_error("x")) == 1);
}
