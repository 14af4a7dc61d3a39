#pragma once

#include "facetrack/face_model.hpp"
#include "facetrack/image.hpp"
#include "facetrack/least_squares.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace facetrack {

struct TrainingSample {
  ColorImage image;
  Points2D landmarks;
  std::string subject_id;
};

/// Tensor rows of the landmark vertices only, in landmark order.
ReducedCoreTensor landmark_tensor(const ReducedCoreTensor& tensor, const MeshTopology& topology);

/// Per-sample parameters of the landmark fit. The expression-mode vector is
/// w_exp = expression_vector(expr); expr is unbounded here.
struct SampleFit {
  RigidPose pose;
  VectorX w_id;
  VectorX expr;
  double rmse = 0.0;  // reprojection RMSE, pixels
  double cost = 0.0;  // sum of squared reprojection errors, px^2
  int iterations = 0;
  double first_step = 0.0;
  bool converged = false;
  bool rank_deficient = false;
  bool out_of_bounds = false;  // some landmark lies outside the image

  VectorX w_exp(const ReducedCoreTensor& tensor) const { return tensor.expression_vector(expr); }
};

struct FitOptions {
  int max_iterations = 200;
  /// Identity coordinate 0 stays at its initial value (scale gauge).
  bool pin_first_identity = true;
};

/// Heuristic start: mean identity, neutral expression, frontal rotation and a
/// translation matching the landmark centroid and spread.
SampleFit initial_fit(const Points2D& landmarks, const ReducedCoreTensor& landmark_tensor,
                      const CameraIntrinsics& camera);

/// Minimizes the landmark reprojection error over pose, identity and
/// expression. `init` may be null.
SampleFit fit_sample(const TrainingSample& sample, const ReducedCoreTensor& landmark_tensor,
                     const CameraIntrinsics& camera, const SampleFit* init = nullptr, const FitOptions& options = {});

struct JointIdentityResult {
  VectorX w_id;
  std::vector<SampleFit> fits;
  /// Total objective before the first alternation and after each one.
  std::vector<double> objective;
};

/// Shared identity across samples of one subject by alternating an identity
/// solve with per-sample refits.
JointIdentityResult joint_identity_refinement(const std::vector<const TrainingSample*>& samples,
                                              const ReducedCoreTensor& landmark_tensor,
                                              const CameraIntrinsics& camera, int alternations = 3,
                                              const FitOptions& options = {});

struct DisplacementFit {
  ShapeParams params;
  double cost = 0.0;  // sum |D_i|^2
  bool converged = false;
};

/// Fits pose and bounded expression weights to the landmarks with fixed
/// blendshapes; the remaining residual is stored as the displacements.
DisplacementFit fit_expression_displacement(const TrainingSample& sample, const BlendshapeSet& shapes,
                                            const MeshTopology& topology, const CameraIntrinsics& camera,
                                            const ShapeParams& init, int max_iterations = 200);

struct PerturbConfig {
  double sigma_rotation = 0.05;
  Vec3 sigma_translation = Vec3(0.01, 0.01, 0.05);
  double sigma_expression = 0.1;
  double sigma_displacement = 2.0;
  int pairs_per_sample = 8;
  std::uint64_t seed = 1;

  void validate() const;
};

struct GuessTruthPair {
  std::size_t image = 0;  // index into the image list
  ShapeParams guess;
  ShapeParams truth;
};

struct TruthRecord {
  std::size_t image = 0;
  ShapeParams params;
};

std::vector<GuessTruthPair> make_training_pairs(const std::vector<TruthRecord>& truths, const PerturbConfig& config);

/// One line per sample: image path, subject id, then 2*N_l landmark floats.
struct ManifestEntry {
  std::filesystem::path image;
  std::string subject_id;
  Points2D landmarks;
};

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
/// Relative image paths resolve against the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

/// Pair store: magic "BTGP", u32 version, u32 N_e - 1, u32 N_l, u32 count,
/// then per pair the image path and the guess and truth parameter vectors
/// as float64.
void write_pair_store(const std::filesystem::path& path, const std::vector<std::string>& image_paths,
                      const std::vector<GuessTruthPair>& pairs);
std::vector<GuessTruthPair> read_pair_store(const std::filesystem::path& path, std::vector<std::string>& image_paths);

}  // namespace facetrack
