#pragma once

#include "facetrack/config.hpp"
#include "facetrack/dataset.hpp"
#include "facetrack/depth_filter.hpp"
#include "facetrack/refinement.hpp"
#include "facetrack/regressor.hpp"
#include "facetrack/synth.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace facetrack {

namespace fs = std::filesystem;

/// Sequence spec from `[sequence]`, `[rig]` and `[noise]` keys.
SequenceSpec sequence_spec_from(const KeyValueConfig& config);
KeyValueConfig to_config(const SequenceSpec& spec);

/// Training set from `[training]` keys plus the rig of `sequence_spec_from`.
TrainingSetSpec training_spec_from(const KeyValueConfig& config);

struct PipelineConfig {
  fs::path tensor;    // defaults to <sequence>/rig.btct
  fs::path model;
  fs::path sequence;
  fs::path output;
  RefinementConfig refinement;
  NormalConfig normals;
  FilterConfig filter;
  RegressorConfig regressor;
  PerturbConfig perturb;
  int fit_alternations = 3;
  bool adapt_identity = true;
  bool recover_depth = true;
  bool use_3d = true;  // false: omega_3D = 0 in both refinement blocks
  std::vector<int> reset_at;
  double lost_threshold = 10.0;
  bool overlays = false;  // track writes overlay_%05d.ppm with the landmarks

  /// Overrides defaults with `[paths]`, `[refine]`, `[filter]`, `[regressor]`,
  /// `[perturb]` and `[pipeline]` keys.
  static PipelineConfig from(const KeyValueConfig& config);
  void validate() const;
  RefinementConfig effective_refinement() const;
  fs::path tensor_path() const;
};

/// Per-frame ground truth as stored in truth.csv.
struct TruthTable {
  std::vector<RigidPose> poses;
  std::vector<VectorX> expressions;
  std::vector<Points2D> landmarks;

  int size() const { return static_cast<int>(poses.size()); }
};

void write_truth_csv(const fs::path& path, const SequenceTruth& truth, const std::vector<Points2D>& landmarks);
TruthTable read_truth_csv(const fs::path& path);

/// Files of a sequence directory, loaded on demand.
class SequenceDirectory {
 public:
  explicit SequenceDirectory(fs::path dir);

  const fs::path& path() const { return dir_; }
  const KeyValueConfig& spec() const { return spec_; }
  const CameraIntrinsics& camera() const { return camera_; }
  const TruthTable& truth() const { return truth_; }
  int frame_count() const { return frames_; }
  /// Ground-truth identity, empty when the directory has none.
  VectorX true_identity() const;
  MeshTopology topology() const;

  static fs::path color_path(const fs::path& dir, int frame);
  static fs::path depth_path(const fs::path& dir, int frame);
  static fs::path clean_depth_path(const fs::path& dir, int frame);

  bool has_frame(int frame) const;
  ColorImage color(int frame) const;
  DepthMap depth(int frame) const;
  DepthMap clean_depth(int frame) const;

 private:
  fs::path dir_;
  KeyValueConfig spec_;
  CameraIntrinsics camera_;
  TruthTable truth_;
  int frames_ = 0;
};

struct SynthSummary {
  int frames = 0;
  double distance = 0.0;
  double sigma_mm = 0.0;  // axial noise at the nominal distance
};

/// Renders a sequence into `out`: frame_%05d.ppm, frame_%05d.pgm16 (sensor
/// depth, mm), clean_%05d.depth, truth.csv, sequence.cfg, rig.btct,
/// triangles.txt, landmarks.txt and intrinsics.cfg.
SynthSummary cmd_synth(const SequenceSpec& spec, const fs::path& out);

struct TrainSummary {
  TrainingReport report;
  std::size_t images = 0;
  std::size_t pairs = 0;
  double fit_rmse = 0.0;
};

/// Trains on synthetic annotated samples of the configured rig.
TrainSummary cmd_train_synthetic(const KeyValueConfig& synth_config, const PipelineConfig& config,
                                 const fs::path& model_out);
/// Trains on a manifest of annotated images; needs the tensor and topology.
TrainSummary cmd_train_manifest(const fs::path& manifest, const fs::path& tensor, const MeshTopology& topology,
                                const CameraIntrinsics& camera, const PipelineConfig& config,
                                const fs::path& model_out);

struct FrameRecord {
  int frame = 0;
  bool ok = false;
  std::string error;
  ShapeParams params;
  Points2D landmarks;
  VectorX w_id;
  double rmse = -1.0;  // against truth; negative when unknown
  double e2d = 0.0;
  double e3d = 0.0;
  double ereg = 0.0;
  int correspondences = 0;
  bool two_d_only = false;
  bool fell_back = false;
  bool identity_locked = false;
  double identity_step = 0.0;
};

struct TrackResult {
  std::vector<FrameRecord> frames;
  bool partial = false;  // a frame was missing, the loop stopped there
  double mean_rmse = 0.0;
  double lost_fraction = 0.0;
  double mean_e3d = 0.0;
  int identity_lock_frame = -1;
  double initial_identity_rms = -1.0;  // neutral mesh RMS to the true identity, meters
  double final_identity_rms = -1.0;
};

/// Neutral-expression vertex RMS between two identities.
double identity_mesh_rms(const ReducedCoreTensor& tensor, const VectorX& a, const VectorX& b);

/// Regress, refine, adapt identity per frame. The first frame (and every reset
/// frame) starts from the truth pose, or from `init` when given.
TrackResult track_sequence(const SequenceDirectory& sequence, const ReducedCoreTensor& tensor,
                           const RegressorModel& model, const PipelineConfig& config,
                           const std::optional<RigidPose>& init = std::nullopt);

/// Results file, little endian: magic "BTFR", u32 version 1, u32 N_e - 1,
/// u32 N_l, u32 N_id, u32 count, u8 partial. Per frame: i32 index, u8 ok,
/// u8 identity locked, f64 rmse, e2d, e3d, ereg, i32 correspondences, the
/// parameter vector, landmarks (2 N_l), w_id, then the error as u32 length
/// and bytes.
void write_track_results(const fs::path& path, const TrackResult& result);
TrackResult read_track_results(const fs::path& path);
void write_track_csv(const fs::path& path, const TrackResult& result);

/// Color frame with a cross at every landmark.
void write_overlay(const fs::path& path, ColorImage image, const Points2D& landmarks);

/// Tracks cfg.sequence with cfg.model and writes track.bin, track.csv and
/// track_metrics.cfg into cfg.output.
TrackResult cmd_track(const PipelineConfig& config, const std::optional<RigidPose>& init = std::nullopt);

struct DepthFrameReport {
  int frame = 0;
  bool flagged = false;
  std::size_t pixels = 0;  // |truth ∩ Z ∩ V|
  double mae_raw = 0.0;
  double mae_prior = 0.0;
  double mae_recovered = 0.0;
};

struct DepthReport {
  std::vector<DepthFrameReport> frames;
  double mae_raw = 0.0;
  double mae_prior = 0.0;
  double mae_recovered = 0.0;
};

/// Prior depth of a tracked frame.
DepthMap prior_depth(const ReducedCoreTensor& tensor, const MeshTopology& topology, const FrameRecord& record,
                     const CameraIntrinsics& camera);

DepthFrameReport recover_frame(const SequenceDirectory& sequence, const ReducedCoreTensor& tensor,
                               const MeshTopology& topology, const FrameRecord& record, const FilterConfig& filter,
                               DepthMap* recovered = nullptr);

/// Recovers every tracked frame, writes recovered_%05d.depth and depth_mae.csv
/// into cfg.output.
DepthReport cmd_depth(const PipelineConfig& config, const fs::path& track_file);

struct EvalSummary {
  int frames = 0;
  double mean_rmse = 0.0;
  double lost_fraction = 0.0;
};

/// Landmark metrics of a results file against the sequence truth.
EvalSummary cmd_eval(const fs::path& sequence, const fs::path& track_file, double tau = 10.0);

}  // namespace facetrack
