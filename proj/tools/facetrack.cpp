#include "facetrack/model_io.hpp"
#include "facetrack/parallel.hpp"
#include "facetrack/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

using namespace facetrack;

namespace {

struct Options {
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::string config;
};

KeyValueConfig load_config(const std::string& path) {
  return path.empty() ? KeyValueConfig{} : KeyValueConfig::load(path);
}

void set_seed(KeyValueConfig& c, const Options& o, std::initializer_list<const char*> keys) {
  if (!o.seed) return;
  for (const char* k : keys) c.set(k, std::to_string(*o.seed));
}

struct SynthArgs {
  std::string out;
  std::optional<int> frames;
  std::optional<double> distance;
  bool clean = false;
};

int run_synth(const Options& o, const SynthArgs& a) {
  KeyValueConfig c = load_config(o.config);
  set_seed(c, o, {"sequence.seed"});
  SequenceSpec spec = sequence_spec_from(c);
  if (a.frames) spec.frames = *a.frames;
  if (a.distance) spec.distance = *a.distance;
  if (a.clean) spec.noisy = false;
  const SynthSummary s = cmd_synth(spec, a.out);
  std::printf("synth: %d frames at %.3f m, noise sigma %.2f mm%s -> %s\n", s.frames, s.distance, s.sigma_mm,
              spec.noisy ? "" : " (disabled)", a.out.c_str());
  return 0;
}

struct TrainArgs {
  std::string synth;
  std::string manifest;
  std::string tensor;
  std::string rig;
  std::string out;
};

void print_report(const TrainSummary& s) {
  std::printf("train: %zu images, %zu pairs, fit rmse %.3g px\n", s.images, s.pairs, s.fit_rmse);
  for (std::size_t i = 0; i < s.report.residuals.size(); ++i) {
    std::printf("  stage %zu: residual %.6g, landmark rmse %.4f px\n", i, s.report.residuals[i],
                s.report.landmark_rmse[i]);
  }
}

int run_train(const Options& o, const TrainArgs& a) {
  KeyValueConfig c = load_config(o.config);
  set_seed(c, o, {"training.seed", "regressor.seed", "perturb.seed"});
  const PipelineConfig cfg = PipelineConfig::from(c);
  TrainSummary s;
  if (!a.manifest.empty()) {
    require(!a.tensor.empty() && !a.rig.empty(), ErrorCategory::invalid_input,
            "--manifest needs --tensor and --rig");
    const fs::path rig(a.rig);
    s = cmd_train_manifest(a.manifest, a.tensor, read_topology(rig / "triangles.txt", rig / "landmarks.txt"),
                           read_intrinsics(rig / "intrinsics.cfg"), cfg, a.out);
  } else {
    KeyValueConfig synth = a.synth.empty() ? c : KeyValueConfig::load(a.synth);
    set_seed(synth, o, {"training.seed"});
    s = cmd_train_synthetic(synth, cfg, a.out);
  }
  print_report(s);
  std::printf("model -> %s\n", a.out.c_str());
  return 0;
}

struct TrackArgs {
  std::string sequence, model, tensor, out;
  std::vector<double> init;
  std::vector<int> reset_at;
  bool no_3d = false;
  bool no_identity = false;
  bool overlays = false;
};

PipelineConfig pipeline_config(const Options& o) {
  KeyValueConfig c = load_config(o.config);
  set_seed(c, o, {"regressor.seed", "perturb.seed"});
  return PipelineConfig::from(c);
}

int run_track(const Options& o, const TrackArgs& a) {
  PipelineConfig cfg = pipeline_config(o);
  if (!a.sequence.empty()) cfg.sequence = a.sequence;
  if (!a.model.empty()) cfg.model = a.model;
  if (!a.tensor.empty()) cfg.tensor = a.tensor;
  if (!a.out.empty()) cfg.output = a.out;
  if (a.no_3d) cfg.use_3d = false;
  if (a.no_identity) cfg.adapt_identity = false;
  if (a.overlays) cfg.overlays = true;
  if (!a.reset_at.empty()) cfg.reset_at = a.reset_at;
  cfg.validate();
  std::optional<RigidPose> init;
  if (!a.init.empty()) {
    require(a.init.size() == 6, ErrorCategory::invalid_input, "--init takes rx,ry,rz,tx,ty,tz");
    RigidPose p;
    p.rotation = Vec3(a.init[0], a.init[1], a.init[2]);
    p.translation = Vec3(a.init[3], a.init[4], a.init[5]);
    init = p;
  }
  const TrackResult r = cmd_track(cfg, init);
  std::printf("track: %zu frames%s, mean rmse %.4f px, lost fraction %.4f, mean e3d %.4g m^2\n", r.frames.size(),
              r.partial ? " (partial, missing frame)" : "", r.mean_rmse, r.lost_fraction, r.mean_e3d);
  if (r.identity_lock_frame >= 0) std::printf("identity locked at frame %d\n", r.identity_lock_frame);
  if (r.initial_identity_rms >= 0.0) {
    std::printf("identity mesh rms %.4f mm -> %.4f mm\n", 1e3 * r.initial_identity_rms, 1e3 * r.final_identity_rms);
  }
  for (const FrameRecord& f : r.frames) {
    if (!f.ok) std::printf("  frame %d: %s\n", f.frame, f.error.c_str());
  }
  return 0;
}

struct DepthArgs {
  std::string sequence, tensor, track, out;
  std::optional<int> iterations;
  bool no_recover = false;
};

int run_depth(const Options& o, const DepthArgs& a) {
  PipelineConfig cfg = pipeline_config(o);
  if (!a.sequence.empty()) cfg.sequence = a.sequence;
  if (!a.tensor.empty()) cfg.tensor = a.tensor;
  if (!a.out.empty()) cfg.output = a.out;
  if (a.iterations) cfg.filter.iterations = *a.iterations;
  if (a.no_recover) cfg.recover_depth = false;
  require(!cfg.sequence.empty() && !cfg.output.empty(), ErrorCategory::invalid_input,
          "depth needs sequence and output paths");
  const fs::path track = a.track.empty() ? cfg.output / "track.bin" : fs::path(a.track);
  const DepthReport r = cmd_depth(cfg, track);
  std::printf("depth: %zu frames, mae raw %.3f mm, prior %.3f mm, recovered %.3f mm\n", r.frames.size(), r.mae_raw,
              r.mae_prior, r.mae_recovered);
  return 0;
}

struct EvalArgs {
  std::string sequence, track;
  double tau = 10.0;
};

int run_eval(const EvalArgs& a) {
  const EvalSummary s = cmd_eval(a.sequence, a.track, a.tau);
  std::printf("eval: %d frames, mean rmse %.4f px, lost fraction %.4f (tau %.3g px)\n", s.frames, s.mean_rmse,
              s.lost_fraction, a.tau);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Blendshape face tracking on RGBD sequences"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Override every seed of the command");
  app.add_option("--threads", o.threads, "Worker threads, 0 = all cores")->check(CLI::NonNegativeNumber);
  app.add_option("-c,--config", o.config, "key = value config file")->check(CLI::ExistingFile);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Render a synthetic RGBD sequence");
  synth->add_option("-o,--out", sa.out, "Sequence directory")->required();
  synth->add_option("--frames", sa.frames);
  synth->add_option("--distance", sa.distance, "Nominal distance in meters");
  synth->add_flag("--clean", sa.clean, "Disable sensor noise");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train the shape regressor");
  train->add_option("--synth", ta.synth, "Synthetic training config")->check(CLI::ExistingFile);
  train->add_option("--manifest", ta.manifest, "Annotated image manifest")->check(CLI::ExistingFile);
  train->add_option("--tensor", ta.tensor, "Core tensor for --manifest")->check(CLI::ExistingFile);
  train->add_option("--rig", ta.rig, "Directory with triangles.txt, landmarks.txt, intrinsics.cfg")
      ->check(CLI::ExistingDirectory);
  train->add_option("-o,--out", ta.out, "Model file")->required();

  TrackArgs ka;
  auto* track = app.add_subcommand("track", "Track a sequence");
  track->add_option("--sequence", ka.sequence);
  track->add_option("--model", ka.model);
  track->add_option("--tensor", ka.tensor);
  track->add_option("-o,--out", ka.out);
  track->add_option("--init", ka.init, "First-frame pose rx,ry,rz,tx,ty,tz")->delimiter(',');
  track->add_option("--reset-at", ka.reset_at, "Frames that restart the tracker")->delimiter(',');
  track->add_flag("--no-3d", ka.no_3d, "2D-only refinement");
  track->add_flag("--no-identity", ka.no_identity, "Keep the mean identity");
  track->add_flag("--overlays", ka.overlays, "Write landmark overlays");

  DepthArgs da;
  auto* depth = app.add_subcommand("depth", "Recover depth with the face prior");
  depth->add_option("--sequence", da.sequence);
  depth->add_option("--tensor", da.tensor);
  depth->add_option("--track", da.track, "Track results, default <out>/track.bin");
  depth->add_option("-o,--out", da.out);
  depth->add_option("--iterations", da.iterations);
  depth->add_flag("--no-recover", da.no_recover, "Write the unfiltered initialization");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Landmark metrics of track results");
  eval->add_option("--sequence", ea.sequence)->required();
  eval->add_option("--track", ea.track)->required();
  eval->add_option("--tau", ea.tau, "Lost-frame RMSE threshold in pixels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error[%s]: %s\n", to_string(ErrorCategory::invalid_input), e.what());
    return exit_code(ErrorCategory::invalid_input);
  }
  if (app.count("--seed")) o.seed = seed;
  set_thread_count(o.threads);

  try {
    if (*synth) return run_synth(o, sa);
    if (*train) return run_train(o, ta);
    if (*track) return run_track(o, ka);
    if (*depth) return run_depth(o, da);
    return run_eval(ea);
  } catch (const Error& e) {
    std::fprintf(stderr, "error[%s]: %s\n", to_string(e.category()), e.what());
    return exit_code(e.category());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error[internal]: %s\n", e.what());
    return 1;
  }
}
