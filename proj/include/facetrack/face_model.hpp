#pragma once

#include "facetrack/common.hpp"

#include <array>
#include <span>
#include <vector>

namespace facetrack {

struct ModelDims {
  int vertices = 0;
  int identities = 0;
  int expressions = 0;

  int rows() const { return 3 * vertices; }
  bool operator==(const ModelDims&) const = default;
};

/// Reduced core tensor of a multilinear face model.
///
/// Entry (row, id, ex) lives at data[(row * N_id + id) * N_e + ex], where
/// row = 3 * vertex + coordinate. exp_basis holds the N_e pre-computed
/// expression-mode weight vectors; exp_basis[0] is the neutral expression.
class ReducedCoreTensor {
 public:
  ReducedCoreTensor() = default;
  ReducedCoreTensor(ModelDims dims, std::vector<double> data, std::vector<VectorX> exp_basis);

  const ModelDims& dims() const { return dims_; }
  std::span<const double> data() const { return data_; }
  const std::vector<VectorX>& exp_basis() const { return exp_basis_; }

  double operator()(int row, int id, int ex) const {
    return data_[(static_cast<std::size_t>(row) * dims_.identities + id) * dims_.expressions + ex];
  }

  /// Sub-tensor holding only the listed vertices, in the listed order.
  ReducedCoreTensor select_vertices(std::span<const int> vertices) const;

  /// C x_3 w_exp, a (3 N_v) x N_id matrix.
  MatrixX contract_expression(const VectorX& w_exp) const;
  /// C x_2 w_id, a (3 N_v) x N_e matrix.
  MatrixX contract_identity(const VectorX& w_id) const;

  /// Expression-mode vector for blend weights e:
  /// (1 - sum e) u_exp_0 + sum_j e_j u_exp_j.
  VectorX expression_vector(const VectorX& e) const;

 private:
  ModelDims dims_;
  std::vector<double> data_;
  std::vector<VectorX> exp_basis_;
};

/// Mode-2 and mode-3 contraction: V = C x_2 w_id x_3 w_exp.
VertexArray contract(const ReducedCoreTensor& tensor, const VectorX& w_id, const VectorX& w_exp);

/// Identity vector of the mean face. The leading identity coordinate is the
/// mean-face coefficient; fitting keeps it pinned to fix the scale gauge
/// shared by w_id and the camera distance.
VectorX mean_identity(int identities);

/// Per-subject expression blendshapes B_0..B_{N_e-1}; B_0 is neutral.
struct BlendshapeSet {
  std::vector<VertexArray> shapes;

  int expression_count() const { return static_cast<int>(shapes.size()); }
  int vertex_count() const { return shapes.empty() ? 0 : static_cast<int>(shapes.front().cols()); }
};

BlendshapeSet build_blendshapes(const ReducedCoreTensor& tensor, const VectorX& w_id);

/// Throws unless e has `count` entries, each in [0, 1].
void validate_expression(const VectorX& e, int count);

/// V = B_0 + sum_j (B_j - B_0) e_j.
VertexArray blend(const BlendshapeSet& shapes, const VectorX& e);

/// Blendshapes restricted to a vertex subset in affine form: the stacked
/// coordinates of the subset equal neutral + deltas * e.
struct ExpressionBasis {
  std::vector<int> vertices;
  VectorX neutral;   // 3K
  MatrixX deltas;    // 3K x (N_e - 1)

  static ExpressionBasis from(const BlendshapeSet& shapes, std::span<const int> vertices);
  static ExpressionBasis from_all(const BlendshapeSet& shapes);

  int size() const { return static_cast<int>(vertices.size()); }
  int expression_count() const { return static_cast<int>(deltas.cols()); }
  Vec3 vertex(int k, const VectorX& e) const;
  VertexArray evaluate(const VectorX& e) const;
};

struct RigidPose {
  Vec3 rotation = Vec3::Zero();            // axis-angle, radians
  Vec3 translation = Vec3(0.0, 0.0, 1.0);  // meters

  Mat3 rotation_matrix() const;
  Vec3 apply(const Vec3& p) const { return rotation_matrix() * p + translation; }
  bool valid() const;
};

/// S = R V + T per vertex.
VertexArray transform(const VertexArray& vertices, const RigidPose& pose);

/// Pose of applying `inner` first and then `outer`.
RigidPose compose(const RigidPose& outer, const RigidPose& inner);

struct MeshTopology {
  std::vector<std::array<int, 3>> triangles;
  std::vector<int> landmark_vertices;

  int landmark_count() const { return static_cast<int>(landmark_vertices.size()); }
  /// Throws on out-of-range or duplicate landmark indices.
  void validate(int vertex_count) const;
};

/// Area-weighted vertex normals following the triangle winding.
VertexArray vertex_normals(const VertexArray& vertices, const MeshTopology& topology);

/// Ideal pinhole camera. Looks down +z, image y points down.
struct CameraIntrinsics {
  double fx = 525.0;
  double fy = 525.0;
  double cx = 319.5;
  double cy = 239.5;
  int width = 640;
  int height = 480;

  void validate() const;
  Vec2 project(const Vec3& p) const;
  Vec3 backproject(double u, double v, double z) const;
  /// d(project)/dp at p.
  Eigen::Matrix<double, 2, 3> projection_jacobian(const Vec3& p) const;
};

/// Throws ErrorCategory::behind_camera when p.z <= 0.
Vec2 project(const CameraIntrinsics& camera, const Vec3& p);

/// Regressed parameter set P = (R, T, e, D).
struct ShapeParams {
  RigidPose pose;
  VectorX expr;           // N_e - 1 blend weights in [0, 1]
  Points2D displacements; // D_i, pixels

  ShapeParams() = default;
  ShapeParams(int expression_weights, int landmarks)
      : expr(VectorX::Zero(expression_weights)), displacements(Points2D::Zero(2, landmarks)) {}

  int landmark_count() const { return static_cast<int>(displacements.cols()); }
  int dimension() const { return 6 + static_cast<int>(expr.size()) + 2 * landmark_count(); }

  /// Layout: rotation(3), translation(3), e, D (u0, v0, u1, v1, ...).
  VectorX to_vector() const;
  static ShapeParams from_vector(const VectorX& v, int expression_weights, int landmarks);

  /// theta = (rotation, translation, e).
  VectorX theta() const;
  void set_theta(const VectorX& theta);
};

int theta_dimension(int expression_weights);

/// l_i = project(S_i) - D_i for the landmark vertices in `landmarks`.
Points2D landmark_positions_2d(const ExpressionBasis& landmarks, const ShapeParams& params,
                               const CameraIntrinsics& camera);

Points2D landmark_positions_2d(const BlendshapeSet& shapes, const MeshTopology& topology,
                               const ShapeParams& params, const CameraIntrinsics& camera);

/// Projection of the posed landmark vertices without displacements.
Points2D project_landmarks(const ExpressionBasis& landmarks, const RigidPose& pose, const VectorX& e,
                           const CameraIntrinsics& camera);

}  // namespace facetrack
