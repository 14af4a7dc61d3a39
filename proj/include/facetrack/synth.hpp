#pragma once

#include "facetrack/face_model.hpp"
#include "facetrack/image.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace facetrack {

struct RigDims {
  int vertices = 600;
  int identities = 8;
  int expressions = 12;
  int landmarks = 16;
};

/// Procedural stand-in for a face database: a face-like mesh with smooth
/// identity modes and localized expression modes, assembled into a reduced
/// core tensor whose one-hot slices are the stored truth meshes.
///
/// Identity slot 0 is the mean face. Slots 1.. are mutually orthogonal,
/// rigid-motion-free displacement modes, so a subject is (1, c_1, ..., c_k).
struct SyntheticRig {
  ReducedCoreTensor core;
  MeshTopology topology;
  int grid_rows = 0;
  int grid_cols = 0;
  /// Truth mesh of (identity slot i, expression j) at index i * N_e + j.
  std::vector<VertexArray> truth_meshes;
  /// Per-vertex RGB albedo in [0, 1].
  VertexArray albedo;

  const VertexArray& truth_mesh(int identity, int expression) const {
    return truth_meshes[static_cast<std::size_t>(identity) * core.dims().expressions + expression];
  }
  /// A plausible subject: mean face plus Gaussian mode coefficients.
  VectorX random_identity(std::mt19937_64& rng, double spread = 0.7) const;
};

SyntheticRig gen_rig(const RigDims& dims, std::uint64_t seed);

/// Random expression weights in [0, 1], mostly sparse.
VectorX random_expression(std::mt19937_64& rng, int count, double activity = 0.3, double max_weight = 0.8);

/// Depth sensor noise. Axial sigma(z) = axial_coeff * z^2 and quantization
/// step q(z) = quantization_coeff * z^2, both in mm with z in meters.
struct NoiseModel {
  double axial_coeff_mm = 1.425;
  double quantization_coeff_mm = 1.0;
  double lateral_sigma_px = 0.5;
  double dropout_probability = 0.5;
  double dropout_angle_deg = 75.0;

  double axial_sigma_m(double z) const { return axial_coeff_mm * 1e-3 * z * z; }
  double quantization_step_m(double z) const { return quantization_coeff_mm * 1e-3 * z * z; }
};

struct Lighting {
  Vec3 direction = Vec3(0.3, -0.4, 1.0);  // direction light travels, camera frame
  double ambient = 0.35;
  double diffuse = 0.65;
  Vec3 background = Vec3(0.32, 0.34, 0.36);
};

struct RenderedFrame {
  ColorImage color;
  DepthMap depth;        // noisy when a noise model is given, otherwise clean
  DepthMap clean_depth;
  Points2D landmarks;    // ground-truth projections of the landmark vertices
};

/// Renders a subject (identity vector w_id) at pose/expression theta.
RenderedFrame render_rgbd(const SyntheticRig& rig, const VectorX& w_id, const RigidPose& pose, const VectorX& e,
                          const CameraIntrinsics& camera, const Lighting& lighting, const NoiseModel* noise,
                          std::uint64_t noise_seed);

/// Applies the sensor model to a clean depth map. `incidence_cos` holds the
/// per-pixel cosine between surface normal and viewing ray (may be empty).
DepthMap apply_depth_noise(const DepthMap& clean, const std::vector<double>& incidence_cos, const NoiseModel& noise,
                           std::uint64_t seed);

/// Per-frame ground truth of a synthetic sequence.
struct SequenceSpec {
  int frames = 100;
  double distance = 1.5;
  std::uint64_t seed = 1;
  std::uint64_t rig_seed = 7;
  RigDims rig;
  NoiseModel noise;
  bool noisy = true;
  double yaw_amplitude_deg = 30.0;
  double pitch_amplitude_deg = 15.0;
  double translation_amplitude = 0.02;
  double identity_spread = 0.7;
  double expression_amplitude = 0.8;
};

struct SequenceTruth {
  VectorX identity;
  std::vector<RigidPose> poses;
  std::vector<VectorX> expressions;
};

/// Smooth pose and expression trajectory for the spec.
SequenceTruth make_trajectory(const SequenceSpec& spec, const SyntheticRig& rig);

/// Root mean square landmark distance of one frame.
double frame_rmse(const Points2D& predicted, const Points2D& truth);
/// Per-frame RMSE averaged over frames.
double eval_rmse(const std::vector<Points2D>& predicted, const std::vector<Points2D>& truth);
/// Fraction of frames that are empty or whose RMSE exceeds tau.
double eval_lost_fraction(const std::vector<double>& frame_rmse, const std::vector<bool>& empty, double tau = 10.0);
/// Mean absolute depth difference over mask pixels, in millimeters.
double eval_mae(const DepthMap& recovered, const DepthMap& truth, const std::vector<bool>& mask);

}  // namespace facetrack
