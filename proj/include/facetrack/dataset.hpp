#pragma once

#include "facetrack/regressor.hpp"
#include "facetrack/synth.hpp"
#include "facetrack/training_fit.hpp"

#include <cstdint>
#include <vector>

namespace facetrack {

/// Annotated synthetic training images: several subjects, each seen under
/// random poses, distances and expressions.
struct TrainingSetSpec {
  int subjects = 25;
  int samples_per_subject = 10;
  double distance_min = 1.2;
  double distance_max = 2.2;
  double yaw_deg = 35.0;
  double pitch_deg = 20.0;
  double roll_deg = 8.0;
  double lateral = 0.06;  // meters of x/y offset at most
  double identity_spread = 0.7;
  std::uint64_t seed = 1;
};

std::vector<TrainingSample> make_annotated_samples(const SyntheticRig& rig, const TrainingSetSpec& spec,
                                                   const CameraIntrinsics& camera);

struct PreparedTrainingSet {
  RegressorTrainingData data;
  std::vector<VectorX> subject_identity;  // refined w_id per subject
  std::vector<std::string> subject_names;
  std::vector<TruthRecord> truths;        // one per image
  double mean_fit_rmse = 0.0;             // landmark RMSE of the identity fits
};

/// Recovers per-image shape parameters (identity refinement per subject,
/// then the bounded expression/displacement fit) and perturbs them into
/// guess-truth pairs.
PreparedTrainingSet prepare_training_set(const std::vector<TrainingSample>& samples, const ReducedCoreTensor& tensor,
                                         const MeshTopology& topology, const CameraIntrinsics& camera,
                                         const PerturbConfig& perturb, int alternations = 3);

}  // namespace facetrack
