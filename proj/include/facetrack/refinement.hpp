#pragma once

#include "facetrack/face_model.hpp"
#include "facetrack/image.hpp"
#include "facetrack/kdtree.hpp"

#include <optional>
#include <vector>

namespace facetrack {

/// Organized point cloud; entry i belongs to pixel i when built from a depth map.
struct PointCloud {
  int width = 0;
  int height = 0;
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
  std::vector<std::uint8_t> valid;         // point present
  std::vector<std::uint8_t> normal_valid;  // normal estimated
  std::vector<std::uint8_t> boundary;      // next to a hole or a depth jump; empty when unorganized

  std::size_t size() const { return points.size(); }
  std::size_t valid_count() const;
  /// Unorganized cloud; every point and normal is valid.
  static PointCloud from_points(const std::vector<Vec3>& points, const std::vector<Vec3>& normals);
};

struct NormalConfig {
  int smoothing_radius = 2;       // points are averaged over this window first
  int step = 2;                   // central-difference half width, pixels
  double discontinuity = 0.05;    // neighbors farther in depth are ignored, meters
};

/// Unit normals of the organized depth grid, oriented toward the camera.
/// A pixel needs at least 3 usable 4-neighbors; otherwise its normal is invalid.
/// Pixels with an unusable pixel within `step` are marked as boundary.
void estimate_normals(PointCloud& cloud, const NormalConfig& config = {});

PointCloud backproject_depth(const DepthMap& depth, const CameraIntrinsics& camera, const NormalConfig& config = {});

/// Color, depth and the derived cloud of one frame.
struct ObservedFrame {
  ColorImage color;
  GrayImage gray;
  DepthMap depth;
  PointCloud cloud;
  KdTree tree;  // over points with valid normals

  static ObservedFrame make(ColorImage color, DepthMap depth, const CameraIntrinsics& camera,
                            const NormalConfig& config = {});
};

KdTree build_cloud_tree(const PointCloud& cloud);

struct CorrespondenceConfig {
  int max_samples = 1000;
  double max_distance = 0.05;
  double max_normal_angle_deg = 60.0;
};

struct Correspondence {
  int sample = 0;  // position in the sampled vertex list
  int vertex = 0;  // model vertex index
  int point = 0;   // cloud index
  double weight = 1.0;
};

struct CorrespondenceSet {
  std::vector<Correspondence> pairs;
  bool two_d_only = false;  // no pair survived the gates
};

/// Uniform-stride vertex subsample of at most max_samples vertices.
std::vector<int> sample_vertices(int vertex_count, int max_samples);

/// Nearest cloud point for each sampled vertex (S holds the posed sampled
/// vertices, normals their model normals), kept when within the distance gate,
/// when the normals agree within the angle gate and when the point is not on
/// the cloud boundary.
CorrespondenceSet find_correspondences(const VertexArray& posed, const VertexArray& normals,
                                       const std::vector<int>& vertices, const PointCloud& cloud, const KdTree& tree,
                                       const CorrespondenceConfig& config);

/// Scalar energy and its gradient with respect to theta = (rotation, translation, e).
struct EnergyValue {
  double value = 0.0;
  VectorX gradient;
  bool flagged = false;  // terms dropped (behind camera) or no correspondences
};

/// (1/N_l) sum |project(S_i(theta)) - l_i|^2 in px^2.
EnergyValue energy_e2d(const VectorX& theta, const Points2D& landmarks, const ExpressionBasis& basis,
                       const CameraIntrinsics& camera);

/// (1/N_d) sum ((S_k(theta) - d_k) . n_k)^2; `basis` covers the sampled
/// vertices referenced by corr.sample. Lengths are multiplied by length_scale.
EnergyValue energy_e3d_point_plane(const VectorX& theta, const CorrespondenceSet& corr, const PointCloud& cloud,
                                   const ExpressionBasis& basis, double length_scale = 1.0);

/// sum_c alpha_c (theta - theta*)_c^2 + beta_c (theta - 2 theta1 + theta2)_c^2.
EnergyValue energy_ereg(const VectorX& theta, const VectorX& target, const VectorX& prev, const VectorX& prev2,
                        const VectorX& alpha, const VectorX& beta);

struct BlockWeights {
  double omega_3d = 0.0;
  double alpha_rotation = 0.0;
  double beta_rotation = 0.0;
  double alpha_translation = 0.0;
  double beta_translation = 0.0;
  double alpha_expression = 0.0;
  double beta_expression = 0.0;
};

struct RefinementConfig {
  BlockWeights rigid{2.0, 100.0, 1e3, 0.1, 10.0, 0.0, 0.0};
  BlockWeights expression{0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
  double identity_omega_3d = 0.5;
  int alternations = 10;
  double tolerance = 1e-5;
  int inner_iterations = 20;
  /// Lengths in the 3D terms are measured in meters times this.
  double length_scale = 1000.0;
  /// Same for the translation regularizer.
  double regularizer_length_scale = 1.0;
  CorrespondenceConfig correspondences;
  int identity_max_frames = 10;
  double identity_lock_tolerance = 1e-3;
  double identity_bracket = 3.0;
  double identity_search_tolerance = 1e-6;
  double identity_ridge = 0.0;
};

/// Per-coordinate regularizer weights of a block for theta of length 6 + n_e.
void block_regularizer(const BlockWeights& w, int expression_count, double length_scale, VectorX& alpha,
                       VectorX& beta);

struct TrackerState {
  VectorX w_id;
  BlendshapeSet blendshapes;
  ExpressionBasis landmark_basis;
  ExpressionBasis sample_basis;  // sampled vertices for correspondences
  MeshTopology topology;
  VectorX theta_prev;
  VectorX theta_prev2;
  int history = 0;  // number of valid history entries (0..2)
  int identity_frames = 0;
  bool identity_locked = false;

  /// Rebuilds blendshapes and the derived bases from w_id.
  void set_identity(const ReducedCoreTensor& tensor, const VectorX& w, int max_samples);
  void push_history(const VectorX& theta);
  /// Posed full mesh at theta.
  VertexArray posed_mesh(const VectorX& theta) const;
};

TrackerState make_tracker_state(const ReducedCoreTensor& tensor, const MeshTopology& topology, const VectorX& w_id,
                                const RefinementConfig& config);

struct RefineResult {
  ShapeParams params;        // refined theta, displacements of the input
  Points2D landmarks;        // the frozen 2D landmarks
  double e2d = 0.0;          // px^2
  double e3d = 0.0;          // m^2, point-to-plane
  double ereg = 0.0;
  double total_initial = 0.0;
  double total_final = 0.0;
  int correspondences = 0;
  bool two_d_only = false;
  bool fell_back = false;    // refined energy was not lower, input returned
  VectorX optimized_theta;   // optimizer output before the energy check
};

/// Alternating rigid / expression refinement against the frozen landmarks of
/// p_raw and the frame's point cloud. `start` overrides the initial theta.
RefineResult refine(const ShapeParams& p_raw, const ObservedFrame& frame, const TrackerState& state,
                    const CameraIntrinsics& camera, const RefinementConfig& config,
                    const std::optional<VectorX>& start = std::nullopt);

/// Rigid-block total energy at theta with correspondences found at theta.
double total_energy(const VectorX& theta, const VectorX& target, const Points2D& landmarks, const ObservedFrame& frame,
                    const TrackerState& state, const CameraIntrinsics& camera, const RefinementConfig& config);

struct IdentityUpdate {
  VectorX w_id;
  double objective_before = 0.0;
  double objective_after = 0.0;
  double step = 0.0;  // |delta w_id|
  bool locked = false;
  bool skipped = false;
};

/// Identity objective E'_2D + omega E'_3D (point-to-point) at w.
double identity_objective(const VectorX& w, const VectorX& theta, const Points2D& landmarks,
                          const ReducedCoreTensor& tensor, const TrackerState& state, const ObservedFrame& frame,
                          const CameraIntrinsics& camera, const RefinementConfig& config);

/// One coordinate-descent sweep over the free identity coordinates, then
/// blendshape rebuild and lock bookkeeping. No-op when locked.
IdentityUpdate update_identity(TrackerState& state, const ReducedCoreTensor& tensor, const ObservedFrame& frame,
                               const VectorX& theta, const Points2D& landmarks, const CameraIntrinsics& camera,
                               const RefinementConfig& config);

}  // namespace facetrack
