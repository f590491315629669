// Command-line front end: synth-data, train, sample, edit, longform, evaluate.

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "edge/errors.hpp"
#include "edge/pipeline.hpp"

namespace {

namespace fs = std::filesystem;
using namespace edge;
using namespace edge::pipeline;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<double> fps;
};

void add_common(CLI::App* cmd, CommonFlags& f, const std::string& out_help) {
  cmd->add_option("--config", f.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "seed for every random draw");
  cmd->add_option("--out", f.out, out_help);
  cmd->add_option("--fps", f.fps, "motion frame rate");
}

/// Config file (if any), then --set overrides, then the common flags.
RunConfig build_config(const CommonFlags& f, const std::vector<std::string>& overrides) {
  RunConfig c = f.config.empty() ? RunConfig{} : RunConfig::load(f.config);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (f.seed) c.seed = *f.seed;
  if (f.fps) c.fps = *f.fps;
  if (!f.out.empty()) c.out_dir = f.out;
  c.validate();
  return c;
}

struct EditFlags {
  std::string constraint;
  std::string reference;
  std::string mode;
  int frames = 0;
  int first = 0;
};

/// Builds a constraint file from a reference motion when no constraint file
/// was given.
fs::path resolve_constraint(const EditFlags& e, const fs::path& out) {
  if (!e.constraint.empty()) {
    if (!e.reference.empty() || !e.mode.empty()) throw ConfigError("give either --constraint or --reference/--mode");
    return e.constraint;
  }
  if (e.reference.empty() || e.mode.empty()) throw ConfigError("edit needs --constraint or --reference with --mode");
  const auto ref = kinematics::read_motion(e.reference).frames();
  diffusion::EditConstraint c;
  if (e.mode == "inbetween") c = diffusion::EditConstraint::in_between(ref, e.frames);
  else if (e.mode == "seed") c = diffusion::EditConstraint::seed_motion(ref, e.frames);
  else if (e.mode == "keyframe") c = diffusion::EditConstraint::keyframe(ref, e.first, e.frames);
  else if (e.mode == "upper") c = diffusion::EditConstraint::upper_body(ref);
  else if (e.mode == "lower") c = diffusion::EditConstraint::lower_body(ref);
  else if (e.mode == "none") c = diffusion::EditConstraint::empty(ref);
  else throw ConfigError("unknown edit mode '" + e.mode + "'");
  fs::path path = out;
  path += ".constraint";
  diffusion::write_constraint(path, c);
  return path;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Music-conditioned dance generation"};
  app.require_subcommand(1);

  // synth-data
  CommonFlags synth_flags;
  SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth-data", "procedural dance clips with click-track audio");
  add_common(synth_cmd, synth_flags, "output directory");
  synth_cmd->add_option("--count", synth.count, "number of clips")->capture_default_str();
  synth_cmd->add_option("--frames", synth.frames, "frames per clip")->capture_default_str();
  synth_cmd->add_option("--min-bpm", synth.min_bpm)->capture_default_str();
  synth_cmd->add_option("--max-bpm", synth.max_bpm)->capture_default_str();
  synth_cmd->add_option("--test-fraction", synth.test_fraction)->capture_default_str();

  // train
  CommonFlags train_flags;
  std::vector<std::string> train_sets;
  std::string train_manifest, train_resume;
  std::optional<int> train_steps;
  auto* train_cmd = app.add_subcommand("train", "train the denoiser from a manifest");
  add_common(train_cmd, train_flags, "output directory for checkpoints and the loss log");
  train_cmd->add_option("--set", train_sets, "config override key=value (repeatable)");
  train_cmd->add_option("--manifest", train_manifest, "dataset manifest");
  train_cmd->add_option("--resume", train_resume, "checkpoint to resume from");
  train_cmd->add_option("--steps", train_steps, "total optimizer steps");
  train_cmd->add_flag("--print-config", "print the merged config and exit");

  // sample / edit / longform share request flags
  auto add_sample = [&](CLI::App* cmd, SampleRequest& req, CommonFlags& flags, std::optional<double>& w,
                        std::optional<double>& dropout) {
    add_common(cmd, flags, "output motion file");
    cmd->add_option("--checkpoint", req.checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
    cmd->add_option("--features", req.features, "conditioning feature file")->required()->check(CLI::ExistingFile);
    cmd->add_option("--w,--guidance-weight", w, "guidance weight");
    cmd->add_option("--guidance-dropout", dropout, "fraction of noisy steps sampled unguided");
    cmd->add_option("--start-frame", req.start_frame, "first conditioning frame");
  };
  SampleRequest sample_req, edit_req, long_req;
  CommonFlags sample_flags, edit_flags, long_flags;
  std::optional<double> sample_w, sample_gd, edit_w, edit_gd, long_w, long_gd;
  auto* sample_cmd = app.add_subcommand("sample", "generate one clip");
  add_sample(sample_cmd, sample_req, sample_flags, sample_w, sample_gd);

  EditFlags edit;
  auto* edit_cmd = app.add_subcommand("edit", "constrained generation");
  add_sample(edit_cmd, edit_req, edit_flags, edit_w, edit_gd);
  edit_cmd->add_option("--constraint", edit.constraint, "constraint file")->check(CLI::ExistingFile);
  edit_cmd->add_option("--reference", edit.reference, "reference motion for --mode")->check(CLI::ExistingFile);
  edit_cmd->add_option("--mode", edit.mode, "inbetween, seed, keyframe, upper, lower or none");
  edit_cmd->add_option("--frames", edit.frames, "frames fixed by inbetween / seed / keyframe");
  edit_cmd->add_option("--first", edit.first, "first keyframe frame");

  double seconds = 0.0;
  auto* long_cmd = app.add_subcommand("longform", "chain overlapping clips into a long sequence");
  add_sample(long_cmd, long_req, long_flags, long_w, long_gd);
  long_cmd->add_option("--seconds", seconds, "requested duration")->required();

  // evaluate
  CommonFlags eval_flags;
  EvaluateRequest eval;
  std::string sweep_dir, sweep_manifest;
  int sweep_samples = 4;
  std::optional<double> sweep_w;
  bool csv = false;
  auto* eval_cmd = app.add_subcommand("evaluate", "metrics over a motion directory, or a checkpoint sweep");
  add_common(eval_cmd, eval_flags, "directory for report.txt (and metrics.csv / sweep.csv)");
  eval_cmd->add_option("--motions", eval.motion_dir, "directory of .motion files");
  eval_cmd->add_option("--music", eval.music_dir, "directory of .wav or .feat files named like the motions");
  eval_cmd->add_option("--reference", eval.reference_dir, "reference motion directory for Frechet distances");
  eval_cmd->add_option("--skeleton", eval.skeleton, "skeleton file (default SMPL)");
  eval_cmd->add_option("--sigma-frames", eval.options.beat_sigma_frames, "beat alignment sigma in frames")
      ->capture_default_str();
  eval_cmd->add_flag("--horizontal-foot-speed", eval.options.pfc.horizontal_foot_speed,
                     "PFC foot speed on the ground plane only");
  eval_cmd->add_flag("--csv", csv, "also write a CSV");
  eval_cmd->add_option("--sweep", sweep_dir, "checkpoint directory: mean PFC per ckpt_<step>.edge");
  eval_cmd->add_option("--manifest", sweep_manifest, "manifest supplying conditioning for --sweep");
  eval_cmd->add_option("--samples", sweep_samples, "samples per checkpoint for --sweep")->capture_default_str();
  eval_cmd->add_option("--w,--guidance-weight", sweep_w, "guidance weight for --sweep");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*synth_cmd) {
      if (synth_flags.out.empty()) throw ConfigError("synth-data needs --out");
      if (!synth_flags.config.empty()) {
        const auto c = RunConfig::load(synth_flags.config);
        synth.seed = c.seed;
        synth.fps = c.fps;
        synth.frames = std::max(synth.frames, c.model.seq_len);
      }
      if (synth_flags.seed) synth.seed = *synth_flags.seed;
      if (synth_flags.fps) synth.fps = *synth_flags.fps;
      const auto m = cmd_synth_data(synth_flags.out, synth);
      std::printf("wrote %zu clips to %s\n", m.clips.size(), synth_flags.out.c_str());
    } else if (*train_cmd) {
      if (!train_manifest.empty()) train_sets.push_back("manifest=" + train_manifest);
      if (!train_resume.empty()) train_sets.push_back("resume=" + train_resume);
      if (train_steps) train_sets.push_back("train_steps=" + std::to_string(*train_steps));
      const auto config = build_config(train_flags, train_sets);
      if (train_cmd->count("--print-config")) {
        std::cout << config.to_text();
        return 0;
      }
      const auto report = cmd_train(config);
      std::printf("trained to step %lld, final loss %.6g\nlog: %s\n", report.final_step, report.final_loss,
                  report.log.string().c_str());
    } else if (*sample_cmd || *edit_cmd || *long_cmd) {
      auto* cmd = *sample_cmd ? sample_cmd : *edit_cmd ? edit_cmd : long_cmd;
      auto& req = *sample_cmd ? sample_req : *edit_cmd ? edit_req : long_req;
      auto& flags = *sample_cmd ? sample_flags : *edit_cmd ? edit_flags : long_flags;
      req.guidance_weight = *sample_cmd ? sample_w : *edit_cmd ? edit_w : long_w;
      req.guidance_dropout = *sample_cmd ? sample_gd : *edit_cmd ? edit_gd : long_gd;
      if (!flags.config.empty()) {
        const auto c = RunConfig::load(flags.config);
        req.seed = c.seed;
        if (!req.guidance_weight) req.guidance_weight = c.sampler.guidance_weight;
        if (!req.guidance_dropout) req.guidance_dropout = c.sampler.guidance_dropout;
      }
      if (flags.seed) req.seed = *flags.seed;
      req.fps = flags.fps;
      if (flags.out.empty()) throw ConfigError(cmd->get_name() + " needs --out");
      req.out = flags.out;
      if (cmd == sample_cmd) {
        const auto clip = cmd_sample(req);
        std::printf("wrote %lld frames to %s\n", static_cast<long long>(clip.frame_count()), flags.out.c_str());
      } else if (cmd == edit_cmd) {
        const auto clip = cmd_edit(req, resolve_constraint(edit, req.out));
        std::printf("wrote %lld frames to %s\n", static_cast<long long>(clip.frame_count()), flags.out.c_str());
      } else {
        const auto report = cmd_longform(req, seconds);
        std::printf("wrote %lld frames from %d slices to %s (max pre-blend overlap difference %.3g)\n",
                    static_cast<long long>(report.motion.frame_count()), report.slices, flags.out.c_str(),
                    report.max_overlap_difference);
      }
    } else if (*eval_cmd) {
      const fs::path out_dir = eval_flags.out;
      if (!sweep_dir.empty()) {
        if (sweep_manifest.empty()) throw ConfigError("--sweep needs --manifest");
        SweepRequest sweep;
        sweep.checkpoint_dir = sweep_dir;
        sweep.manifest = sweep_manifest;
        sweep.samples = sweep_samples;
        sweep.guidance_weight = sweep_w;
        sweep.seed = eval_flags.seed.value_or(0);
        if (!out_dir.empty()) sweep.csv = out_dir / "sweep.csv";
        for (const auto& p : cmd_evaluate_sweep(sweep))
          std::printf("step %lld  pfc %.6g  %s\n", p.step, p.pfc_mean, p.checkpoint.filename().string().c_str());
        return 0;
      }
      if (eval.motion_dir.empty()) throw ConfigError("evaluate needs --motions (or --sweep)");
      eval.fps = eval_flags.fps;
      if (!out_dir.empty()) {
        eval.out = out_dir / "report.txt";
        if (csv) eval.csv = out_dir / "metrics.csv";
      }
      const auto result = cmd_evaluate(eval);
      std::cout << result.report.to_text();
      if (result.failures > 0) std::fprintf(stderr, "warning: %d clips failed to evaluate\n", result.failures);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  }
  return 0;
}
