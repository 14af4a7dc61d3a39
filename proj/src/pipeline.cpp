#include "facetrack/pipeline.hpp"
#include "facetrack/binary_io.hpp"
#include "facetrack/model_io.hpp"
#include "facetrack/parallel.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace facetrack {

namespace {

std::string num(double v, int digits = 17) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::string join(const VectorX& v) {
  std::string s;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += num(v[i]);
  }
  return s;
}

fs::path numbered(const fs::path& dir, const char* prefix, int frame, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%05d.%s", prefix, frame, ext);
  return dir / buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  return out;
}

double parse_number(const std::string& s, const fs::path& origin) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size() || s.find_first_not_of(" \r", used) == std::string::npos) return v;
  } catch (const std::logic_error&) {
  }
  fail(ErrorCategory::format, origin.string() + ": bad number '" + s + "'");
}

void set_weights(const KeyValueConfig& c, const std::string& prefix, BlockWeights& w) {
  w.omega_3d = c.get_double(prefix + "omega_3d", w.omega_3d);
  w.alpha_rotation = c.get_double(prefix + "alpha_rotation", w.alpha_rotation);
  w.beta_rotation = c.get_double(prefix + "beta_rotation", w.beta_rotation);
  w.alpha_translation = c.get_double(prefix + "alpha_translation", w.alpha_translation);
  w.beta_translation = c.get_double(prefix + "beta_translation", w.beta_translation);
  w.alpha_expression = c.get_double(prefix + "alpha_expression", w.alpha_expression);
  w.beta_expression = c.get_double(prefix + "beta_expression", w.beta_expression);
}

TrainSummary train_prepared(const PreparedTrainingSet& prep, const CameraIntrinsics& camera,
                            const PipelineConfig& config, const fs::path& model_out) {
  TrainSummary summary;
  const RegressorModel model = train(prep.data, camera, config.regressor, &summary.report);
  save_regressor(model_out, model);
  summary.images = prep.data.images.size();
  summary.pairs = prep.data.pairs.size();
  summary.fit_rmse = prep.mean_fit_rmse;
  return summary;
}

}  // namespace

SequenceSpec sequence_spec_from(const KeyValueConfig& c) {
  SequenceSpec s;
  s.frames = c.get_int("sequence.frames", s.frames);
  s.distance = c.get_double("sequence.distance", s.distance);
  s.seed = c.get_u64("sequence.seed", s.seed);
  s.noisy = c.get_bool("sequence.noisy", s.noisy);
  s.yaw_amplitude_deg = c.get_double("sequence.yaw_deg", s.yaw_amplitude_deg);
  s.pitch_amplitude_deg = c.get_double("sequence.pitch_deg", s.pitch_amplitude_deg);
  s.translation_amplitude = c.get_double("sequence.translation_amplitude", s.translation_amplitude);
  s.identity_spread = c.get_double("sequence.identity_spread", s.identity_spread);
  s.expression_amplitude = c.get_double("sequence.expression_amplitude", s.expression_amplitude);
  s.rig_seed = c.get_u64("rig.seed", s.rig_seed);
  s.rig.vertices = c.get_int("rig.vertices", s.rig.vertices);
  s.rig.identities = c.get_int("rig.identities", s.rig.identities);
  s.rig.expressions = c.get_int("rig.expressions", s.rig.expressions);
  s.rig.landmarks = c.get_int("rig.landmarks", s.rig.landmarks);
  s.noise.axial_coeff_mm = c.get_double("noise.axial_mm", s.noise.axial_coeff_mm);
  s.noise.quantization_coeff_mm = c.get_double("noise.quantization_mm", s.noise.quantization_coeff_mm);
  s.noise.lateral_sigma_px = c.get_double("noise.lateral_px", s.noise.lateral_sigma_px);
  s.noise.dropout_probability = c.get_double("noise.dropout_probability", s.noise.dropout_probability);
  s.noise.dropout_angle_deg = c.get_double("noise.dropout_angle_deg", s.noise.dropout_angle_deg);
  return s;
}

KeyValueConfig to_config(const SequenceSpec& s) {
  KeyValueConfig c;
  c.set("sequence.frames", std::to_string(s.frames));
  c.set("sequence.distance", num(s.distance));
  c.set("sequence.seed", std::to_string(s.seed));
  c.set("sequence.noisy", s.noisy ? "true" : "false");
  c.set("sequence.yaw_deg", num(s.yaw_amplitude_deg));
  c.set("sequence.pitch_deg", num(s.pitch_amplitude_deg));
  c.set("sequence.translation_amplitude", num(s.translation_amplitude));
  c.set("sequence.identity_spread", num(s.identity_spread));
  c.set("sequence.expression_amplitude", num(s.expression_amplitude));
  c.set("rig.seed", std::to_string(s.rig_seed));
  c.set("rig.vertices", std::to_string(s.rig.vertices));
  c.set("rig.identities", std::to_string(s.rig.identities));
  c.set("rig.expressions", std::to_string(s.rig.expressions));
  c.set("rig.landmarks", std::to_string(s.rig.landmarks));
  c.set("noise.axial_mm", num(s.noise.axial_coeff_mm));
  c.set("noise.quantization_mm", num(s.noise.quantization_coeff_mm));
  c.set("noise.lateral_px", num(s.noise.lateral_sigma_px));
  c.set("noise.dropout_probability", num(s.noise.dropout_probability));
  c.set("noise.dropout_angle_deg", num(s.noise.dropout_angle_deg));
  return c;
}

TrainingSetSpec training_spec_from(const KeyValueConfig& c) {
  TrainingSetSpec s;
  s.subjects = c.get_int("training.subjects", s.subjects);
  s.samples_per_subject = c.get_int("training.samples_per_subject", s.samples_per_subject);
  s.distance_min = c.get_double("training.distance_min", s.distance_min);
  s.distance_max = c.get_double("training.distance_max", s.distance_max);
  s.yaw_deg = c.get_double("training.yaw_deg", s.yaw_deg);
  s.pitch_deg = c.get_double("training.pitch_deg", s.pitch_deg);
  s.roll_deg = c.get_double("training.roll_deg", s.roll_deg);
  s.lateral = c.get_double("training.lateral", s.lateral);
  s.identity_spread = c.get_double("training.identity_spread", s.identity_spread);
  s.seed = c.get_u64("training.seed", s.seed);
  require(s.subjects >= 1 && s.samples_per_subject >= 1, ErrorCategory::invalid_input,
          "training set needs subjects and samples");
  return s;
}

PipelineConfig PipelineConfig::from(const KeyValueConfig& c) {
  PipelineConfig p;
  p.tensor = c.get_string("paths.tensor", "");
  p.model = c.get_string("paths.model", "");
  p.sequence = c.get_string("paths.sequence", "");
  p.output = c.get_string("paths.output", "");

  RefinementConfig& r = p.refinement;
  set_weights(c, "refine.rigid.", r.rigid);
  set_weights(c, "refine.expression.", r.expression);
  r.identity_omega_3d = c.get_double("refine.identity_omega_3d", r.identity_omega_3d);
  r.alternations = c.get_int("refine.alternations", r.alternations);
  r.tolerance = c.get_double("refine.tolerance", r.tolerance);
  r.inner_iterations = c.get_int("refine.inner_iterations", r.inner_iterations);
  r.length_scale = c.get_double("refine.length_scale", r.length_scale);
  r.regularizer_length_scale = c.get_double("refine.regularizer_length_scale", r.regularizer_length_scale);
  r.correspondences.max_samples = c.get_int("refine.max_samples", r.correspondences.max_samples);
  r.correspondences.max_distance = c.get_double("refine.max_distance", r.correspondences.max_distance);
  r.correspondences.max_normal_angle_deg =
      c.get_double("refine.max_normal_angle_deg", r.correspondences.max_normal_angle_deg);
  r.identity_max_frames = c.get_int("refine.identity_max_frames", r.identity_max_frames);
  r.identity_lock_tolerance = c.get_double("refine.identity_lock_tolerance", r.identity_lock_tolerance);
  r.identity_bracket = c.get_double("refine.identity_bracket", r.identity_bracket);
  r.identity_search_tolerance = c.get_double("refine.identity_search_tolerance", r.identity_search_tolerance);
  r.identity_ridge = c.get_double("refine.identity_ridge", r.identity_ridge);

  p.normals.smoothing_radius = c.get_int("normals.smoothing_radius", p.normals.smoothing_radius);
  p.normals.step = c.get_int("normals.step", p.normals.step);
  p.normals.discontinuity = c.get_double("normals.discontinuity", p.normals.discontinuity);

  FilterConfig& f = p.filter;
  f.radius = c.get_int("filter.radius", f.radius);
  f.sigma_s = c.get_double("filter.sigma_s", f.sigma_s);
  f.sigma_c = c.get_double("filter.sigma_c", f.sigma_c);
  f.sigma_d = c.get_double("filter.sigma_d", f.sigma_d);
  f.lambda_d = c.get_double("filter.lambda_d", f.lambda_d);
  f.lambda_f = c.get_double("filter.lambda_f", f.lambda_f);
  f.iterations = c.get_int("filter.iterations", f.iterations);

  RegressorConfig& g = p.regressor;
  g.stages = c.get_int("regressor.stages", g.stages);
  g.forest.trees = c.get_int("regressor.trees", g.forest.trees);
  g.forest.depth = c.get_int("regressor.depth", g.forest.depth);
  g.forest.candidates = c.get_int("regressor.candidates", g.forest.candidates);
  g.reference_face_px = c.get_double("regressor.reference_face_px", g.reference_face_px);
  g.radius_start = c.get_double("regressor.radius_start", g.radius_start);
  g.radius_end = c.get_double("regressor.radius_end", g.radius_end);
  g.lambda = c.get_double("regressor.lambda", g.lambda);
  g.z_ref = c.get_double("regressor.z_ref", g.z_ref);
  g.min_pairs = c.get_int("regressor.min_pairs", g.min_pairs);
  g.seed = c.get_u64("regressor.seed", g.seed);

  PerturbConfig& q = p.perturb;
  q.sigma_rotation = c.get_double("perturb.sigma_rotation", q.sigma_rotation);
  const auto st = c.get_doubles("perturb.sigma_translation", {});
  if (!st.empty()) {
    require(st.size() == 3, ErrorCategory::invalid_input, "perturb.sigma_translation needs 3 values");
    q.sigma_translation = Vec3(st[0], st[1], st[2]);
  }
  q.sigma_expression = c.get_double("perturb.sigma_expression", q.sigma_expression);
  q.sigma_displacement = c.get_double("perturb.sigma_displacement", q.sigma_displacement);
  q.pairs_per_sample = c.get_int("perturb.pairs_per_sample", q.pairs_per_sample);
  q.seed = c.get_u64("perturb.seed", q.seed);

  p.fit_alternations = c.get_int("pipeline.fit_alternations", p.fit_alternations);
  p.adapt_identity = c.get_bool("pipeline.adapt_identity", p.adapt_identity);
  p.recover_depth = c.get_bool("pipeline.recover_depth", p.recover_depth);
  p.use_3d = c.get_bool("pipeline.use_3d", p.use_3d);
  p.lost_threshold = c.get_double("pipeline.lost_threshold", p.lost_threshold);
  p.overlays = c.get_bool("pipeline.overlays", p.overlays);
  for (double v : c.get_doubles("pipeline.reset_at", {})) p.reset_at.push_back(static_cast<int>(v));
  return p;
}

void PipelineConfig::validate() const {
  const RefinementConfig& r = refinement;
  require(r.alternations >= 1 && r.inner_iterations >= 1, ErrorCategory::invalid_input,
          "refinement needs at least one alternation and iteration");
  require(r.tolerance >= 0.0 && r.length_scale > 0.0 && r.regularizer_length_scale > 0.0,
          ErrorCategory::invalid_input, "refinement scales must be positive");
  require(r.correspondences.max_samples >= 1 && r.correspondences.max_distance > 0.0, ErrorCategory::invalid_input,
          "correspondence gates must be positive");
  require(normals.step >= 1 && normals.smoothing_radius >= 0 && normals.discontinuity > 0.0,
          ErrorCategory::invalid_input, "bad normal estimation settings");
  filter.validate();
  regressor.validate();
  perturb.validate();
  require(fit_alternations >= 1, ErrorCategory::invalid_input, "fit_alternations must be >= 1");
  require(lost_threshold > 0.0, ErrorCategory::invalid_input, "lost_threshold must be positive");
  for (int f : reset_at) require(f >= 0, ErrorCategory::invalid_input, "reset_at frames must be >= 0");
}

RefinementConfig PipelineConfig::effective_refinement() const {
  RefinementConfig r = refinement;
  if (!use_3d) {
    r.rigid.omega_3d = 0.0;
    r.expression.omega_3d = 0.0;
    r.identity_omega_3d = 0.0;
  }
  return r;
}

fs::path PipelineConfig::tensor_path() const { return tensor.empty() ? sequence / "rig.btct" : tensor; }

void write_truth_csv(const fs::path& path, const SequenceTruth& truth, const std::vector<Points2D>& landmarks) {
  require(truth.poses.size() == truth.expressions.size() && truth.poses.size() == landmarks.size(),
          ErrorCategory::dimension_mismatch, "truth columns differ in length");
  std::ofstream out(path);
  require(out.good(), ErrorCategory::io, "cannot open for writing: " + path.string());
  const Eigen::Index ne = truth.expressions.empty() ? 0 : truth.expressions[0].size();
  const Eigen::Index nl = landmarks.empty() ? 0 : landmarks[0].cols();
  out << "frame,rx,ry,rz,tx,ty,tz";
  for (Eigen::Index j = 0; j < ne; ++j) out << ",e" << j + 1;
  for (Eigen::Index i = 0; i < nl; ++i) out << ",u" << i << ",v" << i;
  out << '\n';
  for (std::size_t t = 0; t < truth.poses.size(); ++t) {
    out << t;
    const RigidPose& p = truth.poses[t];
    for (int k = 0; k < 3; ++k) out << ',' << num(p.rotation[k]);
    for (int k = 0; k < 3; ++k) out << ',' << num(p.translation[k]);
    for (Eigen::Index j = 0; j < ne; ++j) out << ',' << num(truth.expressions[t][j]);
    for (Eigen::Index i = 0; i < nl; ++i) out << ',' << num(landmarks[t](0, i)) << ',' << num(landmarks[t](1, i));
    out << '\n';
  }
  require(out.good(), ErrorCategory::io, "write failed: " + path.string());
}

TruthTable read_truth_csv(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCategory::io, "cannot open truth table: " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorCategory::format, path.string() + ": empty file");
  const auto header = split_csv(line);
  require(header.size() >= 7 && header[0] == "frame", ErrorCategory::format, path.string() + ": bad header");
  int ne = 0, nl2 = 0;
  for (std::size_t k = 7; k < header.size(); ++k) {
    if (header[k].front() == 'e') ++ne;
    else ++nl2;
  }
  require(nl2 % 2 == 0, ErrorCategory::format, path.string() + ": odd landmark column count");
  TruthTable table;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv(line);
    require(cells.size() == header.size(), ErrorCategory::format, path.string() + ": ragged row");
    std::vector<double> v(cells.size());
    for (std::size_t k = 0; k < cells.size(); ++k) v[k] = parse_number(cells[k], path);
    require(static_cast<int>(v[0]) == table.size(), ErrorCategory::format, path.string() + ": frames out of order");
    RigidPose pose;
    pose.rotation = Vec3(v[1], v[2], v[3]);
    pose.translation = Vec3(v[4], v[5], v[6]);
    VectorX e(ne);
    for (int j = 0; j < ne; ++j) e[j] = v[7 + j];
    Points2D l(2, nl2 / 2);
    for (int i = 0; i < nl2 / 2; ++i) l.col(i) = Vec2(v[7 + ne + 2 * i], v[8 + ne + 2 * i]);
    table.poses.push_back(pose);
    table.expressions.push_back(e);
    table.landmarks.push_back(l);
  }
  return table;
}

SequenceDirectory::SequenceDirectory(fs::path dir) : dir_(std::move(dir)) {
  require(fs::is_directory(dir_), ErrorCategory::io, "not a sequence directory: " + dir_.string());
  spec_ = KeyValueConfig::load(dir_ / "sequence.cfg");
  camera_ = read_intrinsics(dir_ / "intrinsics.cfg");
  if (fs::exists(dir_ / "truth.csv")) truth_ = read_truth_csv(dir_ / "truth.csv");
  frames_ = spec_.get_int("sequence.frames", truth_.size());
  require(frames_ >= 0, ErrorCategory::format, "negative frame count in " + dir_.string());
}

VectorX SequenceDirectory::true_identity() const {
  const auto v = spec_.get_doubles("truth.identity", {});
  return Eigen::Map<const VectorX>(v.data(), static_cast<Eigen::Index>(v.size()));
}

MeshTopology SequenceDirectory::topology() const {
  return read_topology(dir_ / "triangles.txt", dir_ / "landmarks.txt");
}

fs::path SequenceDirectory::color_path(const fs::path& dir, int frame) { return numbered(dir, "frame", frame, "ppm"); }
fs::path SequenceDirectory::depth_path(const fs::path& dir, int frame) {
  return numbered(dir, "frame", frame, "pgm16");
}
fs::path SequenceDirectory::clean_depth_path(const fs::path& dir, int frame) {
  return numbered(dir, "clean", frame, "depth");
}

bool SequenceDirectory::has_frame(int frame) const {
  return fs::exists(color_path(dir_, frame)) && fs::exists(depth_path(dir_, frame));
}
ColorImage SequenceDirectory::color(int frame) const { return read_ppm(color_path(dir_, frame)); }
DepthMap SequenceDirectory::depth(int frame) const { return read_pgm16(depth_path(dir_, frame)); }
DepthMap SequenceDirectory::clean_depth(int frame) const { return read_depth_raw(clean_depth_path(dir_, frame)); }

SynthSummary cmd_synth(const SequenceSpec& spec, const fs::path& out) {
  require(spec.frames >= 1, ErrorCategory::invalid_input, "sequence needs at least one frame");
  fs::create_directories(out);
  const SyntheticRig rig = gen_rig(spec.rig, spec.rig_seed);
  const SequenceTruth truth = make_trajectory(spec, rig);
  const CameraIntrinsics camera;
  std::vector<Points2D> landmarks(static_cast<std::size_t>(spec.frames));
  parallel_for(spec.frames, [&](int t) {
    RenderedFrame f = render_rgbd(rig, truth.identity, truth.poses[t], truth.expressions[t], camera, Lighting{},
                                  spec.noisy ? &spec.noise : nullptr, mix_seed(spec.seed, static_cast<std::uint64_t>(t) + 1));
    write_ppm(SequenceDirectory::color_path(out, t), f.color);
    write_pgm16(SequenceDirectory::depth_path(out, t), f.depth);
    write_depth_raw(SequenceDirectory::clean_depth_path(out, t), f.clean_depth);
    landmarks[t] = std::move(f.landmarks);
  });
  write_truth_csv(out / "truth.csv", truth, landmarks);
  KeyValueConfig cfg = to_config(spec);
  cfg.set("truth.identity", join(truth.identity));
  cfg.save(out / "sequence.cfg");
  write_core_tensor(out / "rig.btct", rig.core);
  write_triangles(out / "triangles.txt", rig.topology);
  write_landmarks(out / "landmarks.txt", rig.topology);
  write_intrinsics(out / "intrinsics.cfg", camera);
  return {spec.frames, spec.distance, 1e3 * spec.noise.axial_sigma_m(spec.distance)};
}

TrainSummary cmd_train_synthetic(const KeyValueConfig& synth_config, const PipelineConfig& config,
                                 const fs::path& model_out) {
  config.validate();
  const SequenceSpec seq = sequence_spec_from(synth_config);
  const TrainingSetSpec spec = training_spec_from(synth_config);
  const SyntheticRig rig = gen_rig(seq.rig, seq.rig_seed);
  const CameraIntrinsics camera;
  const auto samples = make_annotated_samples(rig, spec, camera);
  const PreparedTrainingSet prep =
      prepare_training_set(samples, rig.core, rig.topology, camera, config.perturb, config.fit_alternations);
  return train_prepared(prep, camera, config, model_out);
}

TrainSummary cmd_train_manifest(const fs::path& manifest, const fs::path& tensor, const MeshTopology& topology,
                                const CameraIntrinsics& camera, const PipelineConfig& config,
                                const fs::path& model_out) {
  config.validate();
  const ReducedCoreTensor core = read_core_tensor(tensor);
  std::vector<TrainingSample> samples;
  for (const ManifestEntry& e : read_manifest(manifest)) {
    samples.push_back({read_ppm(e.image), e.landmarks, e.subject_id});
  }
  require(!samples.empty(), ErrorCategory::missing_data, "manifest lists no samples: " + manifest.string());
  const PreparedTrainingSet prep =
      prepare_training_set(samples, core, topology, camera, config.perturb, config.fit_alternations);
  return train_prepared(prep, camera, config, model_out);
}

double identity_mesh_rms(const ReducedCoreTensor& tensor, const VectorX& a, const VectorX& b) {
  const VectorX& neutral = tensor.exp_basis().front();
  const VertexArray va = contract(tensor, a, neutral);
  const VertexArray vb = contract(tensor, b, neutral);
  return std::sqrt((va - vb).colwise().squaredNorm().mean());
}

TrackResult track_sequence(const SequenceDirectory& sequence, const ReducedCoreTensor& tensor,
                           const RegressorModel& model, const PipelineConfig& config,
                           const std::optional<RigidPose>& init) {
  config.validate();
  const RefinementConfig rc = config.effective_refinement();
  const CameraIntrinsics& camera = sequence.camera();
  const MeshTopology topology = sequence.topology();
  topology.validate(tensor.dims().vertices);
  const int nid = tensor.dims().identities;
  const int ne = tensor.dims().expressions - 1;
  const int nl = topology.landmark_count();
  require(model.expression_count == ne && model.landmark_count == nl, ErrorCategory::dimension_mismatch,
          "regressor dimensions do not match the tensor and topology");

  const VectorX w0 = mean_identity(nid);
  const VectorX truth_id = sequence.true_identity();
  TrackResult out;
  const bool know_identity = truth_id.size() == nid;
  if (know_identity) out.initial_identity_rms = identity_mesh_rms(tensor, w0, truth_id);

  TrackerState state = make_tracker_state(tensor, topology, w0, rc);
  ShapeParams prev(ne, nl);
  const TruthTable& truth = sequence.truth();

  for (int t = 0; t < sequence.frame_count(); ++t) {
    if (!sequence.has_frame(t)) {
      out.partial = true;
      break;
    }
    FrameRecord rec;
    rec.frame = t;
    try {
      const bool reset = t == 0 || std::find(config.reset_at.begin(), config.reset_at.end(), t) != config.reset_at.end();
      if (reset) {
        if (t > 0) state = make_tracker_state(tensor, topology, w0, rc);
        prev = ShapeParams(ne, nl);
        if (init) {
          prev.pose = *init;
        } else {
          require(t < truth.size(), ErrorCategory::missing_data, "no truth pose to start frame " + std::to_string(t));
          prev.pose = truth.poses[t];
        }
      }
      const ObservedFrame frame = ObservedFrame::make(sequence.color(t), sequence.depth(t), camera, config.normals);
      const ShapeParams raw = predict(model, frame.gray, prev, state.landmark_basis, camera);
      const RefineResult r = refine(raw, frame, state, camera, rc);
      rec.params = r.params;
      rec.landmarks = r.landmarks;
      rec.params.displacements =
          project_landmarks(state.landmark_basis, r.params.pose, r.params.expr, camera) - r.landmarks;
      rec.w_id = state.w_id;
      rec.e2d = r.e2d;
      rec.e3d = r.e3d;
      rec.ereg = r.ereg;
      rec.correspondences = r.correspondences;
      rec.two_d_only = r.two_d_only;
      rec.fell_back = r.fell_back;
      if (config.adapt_identity && !state.identity_locked) {
        const IdentityUpdate up = update_identity(state, tensor, frame, r.params.theta(), r.landmarks, camera, rc);
        rec.identity_step = up.step;
        if (state.identity_locked && out.identity_lock_frame < 0) out.identity_lock_frame = t;
      }
      rec.identity_locked = state.identity_locked;
      state.push_history(r.params.theta());
      prev = r.params;
      prev.displacements.setZero();
      rec.ok = rec.landmarks.allFinite();
      if (!rec.ok) rec.error = "numerical: non-finite landmarks";
    } catch (const Error& e) {
      rec.ok = false;
      rec.error = std::string(to_string(e.category())) + ": " + e.what();
    }
    if (!rec.ok) {
      rec.params = prev;
      rec.landmarks = Points2D::Zero(2, nl);
      rec.w_id = state.w_id;
    }
    if (rec.ok && t < truth.size() && truth.landmarks[t].cols() == nl) {
      rec.rmse = frame_rmse(rec.landmarks, truth.landmarks[t]);
    }
    out.frames.push_back(std::move(rec));
  }

  std::vector<double> rmse;
  std::vector<bool> empty;
  double sum = 0.0, e3d = 0.0;
  int counted = 0, ok = 0;
  for (const FrameRecord& f : out.frames) {
    rmse.push_back(f.rmse);
    empty.push_back(!f.ok);
    if (f.ok) {
      e3d += f.e3d;
      ++ok;
    }
    if (f.rmse >= 0.0) {
      sum += f.rmse;
      ++counted;
    }
  }
  out.mean_rmse = counted ? sum / counted : 0.0;
  out.mean_e3d = ok ? e3d / ok : 0.0;
  if (!out.frames.empty()) out.lost_fraction = eval_lost_fraction(rmse, empty, config.lost_threshold);
  if (know_identity) out.final_identity_rms = identity_mesh_rms(tensor, state.w_id, truth_id);
  return out;
}

void write_track_results(const fs::path& path, const TrackResult& result) {
  io::BinaryWriter w(path);
  w.magic("BTFR");
  w.put<std::uint32_t>(1);
  const FrameRecord* first = result.frames.empty() ? nullptr : &result.frames.front();
  const auto ne = static_cast<std::uint32_t>(first ? first->params.expr.size() : 0);
  const auto nl = static_cast<std::uint32_t>(first ? first->params.landmark_count() : 0);
  const auto nid = static_cast<std::uint32_t>(first ? first->w_id.size() : 0);
  w.put(ne);
  w.put(nl);
  w.put(nid);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(result.frames.size()));
  w.put<std::uint8_t>(result.partial ? 1 : 0);
  for (const FrameRecord& f : result.frames) {
    require(f.params.expr.size() == ne && static_cast<std::uint32_t>(f.params.landmark_count()) == nl &&
                f.w_id.size() == nid && f.landmarks.cols() == nl,
            ErrorCategory::dimension_mismatch, "frame records differ in size");
    w.put<std::int32_t>(f.frame);
    w.put<std::uint8_t>(f.ok ? 1 : 0);
    w.put<std::uint8_t>(f.identity_locked ? 1 : 0);
    w.put(f.rmse);
    w.put(f.e2d);
    w.put(f.e3d);
    w.put(f.ereg);
    w.put<std::int32_t>(f.correspondences);
    const VectorX p = f.params.to_vector();
    w.put_array(p.data(), static_cast<std::size_t>(p.size()));
    w.put_array(f.landmarks.data(), static_cast<std::size_t>(f.landmarks.size()));
    w.put_array(f.w_id.data(), static_cast<std::size_t>(f.w_id.size()));
    w.string(f.error);
  }
  w.finish();
}

TrackResult read_track_results(const fs::path& path) {
  io::BinaryReader r(path);
  r.expect_magic("BTFR");
  require(r.get<std::uint32_t>() == 1, ErrorCategory::format, path.string() + ": unsupported version");
  const int ne = static_cast<int>(r.get<std::uint32_t>());
  const int nl = static_cast<int>(r.get<std::uint32_t>());
  const int nid = static_cast<int>(r.get<std::uint32_t>());
  const auto count = r.get<std::uint32_t>();
  require(ne < 4096 && nl < 4096 && nid < 4096 && count < (1u << 24), ErrorCategory::format,
          path.string() + ": unreasonable header");
  TrackResult out;
  out.partial = r.get<std::uint8_t>() != 0;
  for (std::uint32_t k = 0; k < count; ++k) {
    FrameRecord f;
    f.frame = r.get<std::int32_t>();
    f.ok = r.get<std::uint8_t>() != 0;
    f.identity_locked = r.get<std::uint8_t>() != 0;
    f.rmse = r.get<double>();
    f.e2d = r.get<double>();
    f.e3d = r.get<double>();
    f.ereg = r.get<double>();
    f.correspondences = r.get<std::int32_t>();
    VectorX p(6 + ne + 2 * nl);
    r.get_array(p.data(), static_cast<std::size_t>(p.size()));
    f.params = ShapeParams::from_vector(p, ne, nl);
    f.landmarks.resize(2, nl);
    r.get_array(f.landmarks.data(), static_cast<std::size_t>(f.landmarks.size()));
    f.w_id.resize(nid);
    r.get_array(f.w_id.data(), static_cast<std::size_t>(nid));
    f.error = r.string();
    out.frames.push_back(std::move(f));
  }
  require(r.at_end(), ErrorCategory::format, path.string() + ": trailing bytes");
  return out;
}

void write_track_csv(const fs::path& path, const TrackResult& result) {
  std::ofstream out(path);
  require(out.good(), ErrorCategory::io, "cannot open for writing: " + path.string());
  const int ne = result.frames.empty() ? 0 : static_cast<int>(result.frames[0].params.expr.size());
  const int nl = result.frames.empty() ? 0 : result.frames[0].params.landmark_count();
  out << "frame,ok,rmse,e2d,e3d,ereg,correspondences,two_d_only,fell_back,identity_locked,identity_step,"
         "rx,ry,rz,tx,ty,tz";
  for (int j = 0; j < ne; ++j) out << ",e" << j + 1;
  for (int i = 0; i < nl; ++i) out << ",u" << i << ",v" << i;
  out << ",error\n";
  for (const FrameRecord& f : result.frames) {
    out << f.frame << ',' << (f.ok ? 1 : 0) << ',' << num(f.rmse, 9) << ',' << num(f.e2d, 9) << ','
        << num(f.e3d, 9) << ',' << num(f.ereg, 9) << ',' << f.correspondences << ',' << f.two_d_only << ','
        << f.fell_back << ',' << f.identity_locked << ',' << num(f.identity_step, 9);
    const VectorX th = f.params.theta();
    for (Eigen::Index k = 0; k < th.size(); ++k) out << ',' << num(th[k], 12);
    for (int i = 0; i < nl; ++i) out << ',' << num(f.landmarks(0, i), 10) << ',' << num(f.landmarks(1, i), 10);
    std::string err = f.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << ',' << err << '\n';
  }
  require(out.good(), ErrorCategory::io, "write failed: " + path.string());
}

namespace {

void draw_cross(ColorImage& image, const Vec2& p) {
  const int cx = static_cast<int>(std::lround(p.x())), cy = static_cast<int>(std::lround(p.y()));
  for (int d = -3; d <= 3; ++d) {
    for (const auto& [x, y] : {std::pair{cx + d, cy}, std::pair{cx, cy + d}}) {
      if (x < 0 || y < 0 || x >= image.width || y >= image.height) continue;
      auto* px = image.pixel(x, y);
      px[0] = 255;
      px[1] = 40;
      px[2] = 40;
    }
  }
}

}  // namespace

TrackResult cmd_track(const PipelineConfig& config, const std::optional<RigidPose>& init) {
  require(!config.sequence.empty() && !config.model.empty() && !config.output.empty(), ErrorCategory::invalid_input,
          "track needs sequence, model and output paths");
  require(fs::exists(config.model), ErrorCategory::io, "model not found: " + config.model.string());
  require(fs::exists(config.tensor_path()), ErrorCategory::io, "tensor not found: " + config.tensor_path().string());
  const SequenceDirectory sequence(config.sequence);
  const ReducedCoreTensor tensor = read_core_tensor(config.tensor_path());
  const RegressorModel model = load_regressor(config.model);
  TrackResult result = track_sequence(sequence, tensor, model, config, init);

  fs::create_directories(config.output);
  write_track_results(config.output / "track.bin", result);
  write_track_csv(config.output / "track.csv", result);
  KeyValueConfig metrics;
  metrics.set("frames", std::to_string(result.frames.size()));
  metrics.set("partial", result.partial ? "true" : "false");
  metrics.set("mean_rmse_px", num(result.mean_rmse, 9));
  metrics.set("lost_fraction", num(result.lost_fraction, 9));
  metrics.set("mean_e3d_m2", num(result.mean_e3d, 9));
  metrics.set("identity_lock_frame", std::to_string(result.identity_lock_frame));
  metrics.set("identity_rms_initial_m", num(result.initial_identity_rms, 9));
  metrics.set("identity_rms_final_m", num(result.final_identity_rms, 9));
  metrics.save(config.output / "track_metrics.cfg");
  if (config.overlays) {
    for (const FrameRecord& f : result.frames) {
      if (f.ok) write_overlay(numbered(config.output, "overlay", f.frame, "ppm"), sequence.color(f.frame), f.landmarks);
    }
  }
  return result;
}

DepthMap prior_depth(const ReducedCoreTensor& tensor, const MeshTopology& topology, const FrameRecord& record,
                     const CameraIntrinsics& camera) {
  const BlendshapeSet shapes = build_blendshapes(tensor, record.w_id);
  return render_prior_depth(transform(blend(shapes, record.params.expr), record.params.pose), topology, camera);
}

DepthFrameReport recover_frame(const SequenceDirectory& sequence, const ReducedCoreTensor& tensor,
                               const MeshTopology& topology, const FrameRecord& record, const FilterConfig& filter,
                               DepthMap* recovered) {
  DepthFrameReport rep;
  rep.frame = record.frame;
  const DepthMap z = sequence.depth(record.frame);
  const DepthMap truth = sequence.clean_depth(record.frame);
  const GrayImage guide = to_gray(sequence.color(record.frame));
  const DepthMap v = record.ok ? prior_depth(tensor, topology, record, sequence.camera())
                               : DepthMap(z.width, z.height);
  RecoverResult x = recover(z, v, guide, filter);
  const std::vector<bool> omega = valid_mask({&truth, &z, &v});
  rep.pixels = static_cast<std::size_t>(std::count(omega.begin(), omega.end(), true));
  rep.flagged = x.flagged || !record.ok || rep.pixels == 0;
  if (rep.pixels > 0) {
    rep.mae_raw = eval_mae(z, truth, omega);
    rep.mae_prior = eval_mae(v, truth, omega);
    rep.mae_recovered = eval_mae(x.depth, truth, omega);
  }
  if (recovered) *recovered = std::move(x.depth);
  return rep;
}

DepthReport cmd_depth(const PipelineConfig& config, const fs::path& track_file) {
  config.validate();
  const SequenceDirectory sequence(config.sequence);
  const ReducedCoreTensor tensor = read_core_tensor(config.tensor_path());
  const MeshTopology topology = sequence.topology();
  const TrackResult track = read_track_results(track_file);
  FilterConfig filter = config.filter;
  if (!config.recover_depth) filter.iterations = 0;
  fs::create_directories(config.output);

  DepthReport report;
  double raw = 0.0, prior = 0.0, rec = 0.0;
  int counted = 0;
  for (const FrameRecord& f : track.frames) {
    DepthMap x;
    DepthFrameReport r;
    try {
      r = recover_frame(sequence, tensor, topology, f, filter, &x);
      write_depth_raw(numbered(config.output, "recovered", f.frame, "depth"), x);
    } catch (const Error&) {
      r.frame = f.frame;
      r.flagged = true;
    }
    if (!r.flagged) {
      raw += r.mae_raw;
      prior += r.mae_prior;
      rec += r.mae_recovered;
      ++counted;
    }
    report.frames.push_back(r);
  }
  if (counted) {
    report.mae_raw = raw / counted;
    report.mae_prior = prior / counted;
    report.mae_recovered = rec / counted;
  }

  std::ofstream out(config.output / "depth_mae.csv");
  require(out.good(), ErrorCategory::io, "cannot write depth_mae.csv");
  out << "frame,flagged,pixels,mae_raw_mm,mae_prior_mm,mae_recovered_mm\n";
  for (const DepthFrameReport& r : report.frames) {
    out << r.frame << ',' << r.flagged << ',' << r.pixels << ',' << num(r.mae_raw, 9) << ',' << num(r.mae_prior, 9)
        << ',' << num(r.mae_recovered, 9) << '\n';
  }
  out << "mean,0," << counted << ',' << num(report.mae_raw, 9) << ',' << num(report.mae_prior, 9) << ','
      << num(report.mae_recovered, 9) << '\n';
  require(out.good(), ErrorCategory::io, "write failed: depth_mae.csv");
  return report;
}

EvalSummary cmd_eval(const fs::path& sequence, const fs::path& track_file, double tau) {
  const TruthTable truth = read_truth_csv(sequence / "truth.csv");
  const TrackResult track = read_track_results(track_file);
  EvalSummary s;
  std::vector<double> rmse;
  std::vector<bool> empty;
  double sum = 0.0;
  int counted = 0;
  for (const FrameRecord& f : track.frames) {
    require(f.frame >= 0 && f.frame < truth.size(), ErrorCategory::missing_data,
            "no truth for frame " + std::to_string(f.frame));
    const double r = f.ok ? frame_rmse(f.landmarks, truth.landmarks[f.frame]) : -1.0;
    rmse.push_back(r);
    empty.push_back(!f.ok);
    if (f.ok) {
      sum += r;
      ++counted;
    }
  }
  s.frames = static_cast<int>(track.frames.size());
  s.mean_rmse = counted ? sum / counted : 0.0;
  if (s.frames) s.lost_fraction = eval_lost_fraction(rmse, empty, tau);
  return s;
}

void write_overlay(const fs::path& path, ColorImage image, const Points2D& landmarks) {
  for (Eigen::Index i = 0; i < landmarks.cols(); ++i) draw_cross(image, landmarks.col(i));
  write_ppm(path, image);
}

}  // namespace facetrack
