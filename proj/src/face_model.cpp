#include "facetrack/face_model.hpp"
#include "facetrack/rotation.hpp"

#include <cmath>
#include <numbers>
#include <set>
#include <string>

namespace facetrack {

namespace {

std::string dims_text(int a, int b) { return std::to_string(a) + " vs " + std::to_string(b); }

}  // namespace

ReducedCoreTensor::ReducedCoreTensor(ModelDims dims, std::vector<double> data, std::vector<VectorX> exp_basis)
    : dims_(dims), data_(std::move(data)), exp_basis_(std::move(exp_basis)) {
  require(dims_.vertices >= 1 && dims_.identities >= 1 && dims_.expressions >= 1, ErrorCategory::invalid_input,
          "tensor dimensions must be >= 1");
  const std::size_t expected =
      static_cast<std::size_t>(3) * dims_.vertices * dims_.identities * dims_.expressions;
  require(data_.size() == expected, ErrorCategory::dimension_mismatch,
          "tensor data length " + std::to_string(data_.size()) + " != " + std::to_string(expected));
  require(static_cast<int>(exp_basis_.size()) == dims_.expressions, ErrorCategory::dimension_mismatch,
          "exp_basis must hold N_e vectors");
  for (const auto& u : exp_basis_) {
    require(u.size() == dims_.expressions, ErrorCategory::dimension_mismatch, "exp_basis vector length != N_e");
  }
}

ReducedCoreTensor ReducedCoreTensor::select_vertices(std::span<const int> vertices) const {
  const std::size_t slab = static_cast<std::size_t>(dims_.identities) * dims_.expressions;
  std::vector<double> out;
  out.reserve(vertices.size() * 3 * slab);
  for (int v : vertices) {
    require(v >= 0 && v < dims_.vertices, ErrorCategory::invalid_input, "vertex index out of range");
    const auto begin = data_.begin() + static_cast<std::ptrdiff_t>(3 * v * slab);
    out.insert(out.end(), begin, begin + static_cast<std::ptrdiff_t>(3 * slab));
  }
  return ReducedCoreTensor({static_cast<int>(vertices.size()), dims_.identities, dims_.expressions}, std::move(out),
                           exp_basis_);
}

MatrixX ReducedCoreTensor::contract_expression(const VectorX& w_exp) const {
  require(w_exp.size() == dims_.expressions, ErrorCategory::dimension_mismatch,
          "w_exp length " + dims_text(static_cast<int>(w_exp.size()), dims_.expressions));
  const Eigen::Map<const MatrixX> slabs(data_.data(), dims_.expressions,
                                        static_cast<Eigen::Index>(dims_.rows()) * dims_.identities);
  const VectorX t = slabs.transpose() * w_exp;  // index row * N_id + id
  return Eigen::Map<const MatrixX>(t.data(), dims_.identities, dims_.rows()).transpose();
}

MatrixX ReducedCoreTensor::contract_identity(const VectorX& w_id) const {
  require(w_id.size() == dims_.identities, ErrorCategory::dimension_mismatch,
          "w_id length " + dims_text(static_cast<int>(w_id.size()), dims_.identities));
  MatrixX out(dims_.rows(), dims_.expressions);
  const std::size_t slab = static_cast<std::size_t>(dims_.identities) * dims_.expressions;
  for (int row = 0; row < dims_.rows(); ++row) {
    const Eigen::Map<const MatrixX> block(data_.data() + row * slab, dims_.expressions, dims_.identities);
    out.row(row) = (block * w_id).transpose();
  }
  return out;
}

VectorX ReducedCoreTensor::expression_vector(const VectorX& e) const {
  require(e.size() == dims_.expressions - 1, ErrorCategory::dimension_mismatch,
          "expression weights length " + dims_text(static_cast<int>(e.size()), dims_.expressions - 1));
  VectorX gamma = (1.0 - e.sum()) * exp_basis_[0];
  for (int j = 1; j < dims_.expressions; ++j) gamma += e[j - 1] * exp_basis_[j];
  return gamma;
}

VertexArray contract(const ReducedCoreTensor& tensor, const VectorX& w_id, const VectorX& w_exp) {
  require(w_id.size() == tensor.dims().identities, ErrorCategory::dimension_mismatch,
          "w_id length " + dims_text(static_cast<int>(w_id.size()), tensor.dims().identities));
  const VectorX flat = tensor.contract_expression(w_exp) * w_id;
  return Eigen::Map<const VertexArray>(flat.data(), 3, tensor.dims().vertices);
}

VectorX mean_identity(int identities) {
  VectorX w = VectorX::Zero(identities);
  w[0] = 1.0;
  return w;
}

BlendshapeSet build_blendshapes(const ReducedCoreTensor& tensor, const VectorX& w_id) {
  const MatrixX by_expression = tensor.contract_identity(w_id);  // 3Nv x N_e
  BlendshapeSet set;
  set.shapes.reserve(tensor.dims().expressions);
  for (const auto& u : tensor.exp_basis()) {
    const VectorX flat = by_expression * u;
    set.shapes.emplace_back(Eigen::Map<const VertexArray>(flat.data(), 3, tensor.dims().vertices));
  }
  return set;
}

void validate_expression(const VectorX& e, int count) {
  require(e.size() == count, ErrorCategory::dimension_mismatch,
          "expression weights length " + dims_text(static_cast<int>(e.size()), count));
  for (Eigen::Index j = 0; j < e.size(); ++j) {
    require(std::isfinite(e[j]) && e[j] >= 0.0 && e[j] <= 1.0, ErrorCategory::invalid_input,
            "expression weight " + std::to_string(j) + " outside [0, 1]");
  }
}

VertexArray blend(const BlendshapeSet& shapes, const VectorX& e) {
  require(!shapes.shapes.empty(), ErrorCategory::invalid_input, "empty blendshape set");
  validate_expression(e, shapes.expression_count() - 1);
  VertexArray v = shapes.shapes[0];
  for (int j = 1; j < shapes.expression_count(); ++j) {
    if (e[j - 1] != 0.0) v += (shapes.shapes[j] - shapes.shapes[0]) * e[j - 1];
  }
  return v;
}

ExpressionBasis ExpressionBasis::from(const BlendshapeSet& shapes, std::span<const int> vertices) {
  require(!shapes.shapes.empty(), ErrorCategory::invalid_input, "empty blendshape set");
  ExpressionBasis basis;
  basis.vertices.assign(vertices.begin(), vertices.end());
  const int k = static_cast<int>(vertices.size());
  const int ne = shapes.expression_count();
  basis.neutral.resize(3 * k);
  basis.deltas.resize(3 * k, ne - 1);
  const auto& b0 = shapes.shapes[0];
  for (int i = 0; i < k; ++i) {
    const int v = vertices[i];
    require(v >= 0 && v < b0.cols(), ErrorCategory::invalid_input, "vertex index out of range");
    basis.neutral.segment<3>(3 * i) = b0.col(v);
    for (int j = 1; j < ne; ++j) basis.deltas.block<3, 1>(3 * i, j - 1) = shapes.shapes[j].col(v) - b0.col(v);
  }
  return basis;
}

ExpressionBasis ExpressionBasis::from_all(const BlendshapeSet& shapes) {
  std::vector<int> all(shapes.vertex_count());
  for (int i = 0; i < static_cast<int>(all.size()); ++i) all[i] = i;
  return from(shapes, all);
}

Vec3 ExpressionBasis::vertex(int k, const VectorX& e) const {
  return neutral.segment<3>(3 * k) + deltas.middleRows<3>(3 * k) * e;
}

VertexArray ExpressionBasis::evaluate(const VectorX& e) const {
  const VectorX flat = neutral + deltas * e;
  return Eigen::Map<const VertexArray>(flat.data(), 3, size());
}

Mat3 RigidPose::rotation_matrix() const { return rotation_from_axis_angle(rotation); }

bool RigidPose::valid() const {
  return rotation.allFinite() && translation.allFinite() && rotation.norm() < std::numbers::pi &&
         translation.z() > 0.0;
}

VertexArray transform(const VertexArray& vertices, const RigidPose& pose) {
  VertexArray out = pose.rotation_matrix() * vertices;
  out.colwise() += pose.translation;
  return out;
}

RigidPose compose(const RigidPose& outer, const RigidPose& inner) {
  const Mat3 r_outer = outer.rotation_matrix();
  RigidPose out;
  out.rotation = axis_angle_from_rotation(r_outer * inner.rotation_matrix());
  out.translation = r_outer * inner.translation + outer.translation;
  return out;
}

void MeshTopology::validate(int vertex_count) const {
  for (const auto& t : triangles) {
    for (int v : t) {
      require(v >= 0 && v < vertex_count, ErrorCategory::invalid_input, "triangle index out of range");
    }
  }
  std::set<int> seen;
  for (int v : landmark_vertices) {
    require(v >= 0 && v < vertex_count, ErrorCategory::invalid_input, "landmark vertex out of range");
    require(seen.insert(v).second, ErrorCategory::invalid_input, "duplicate landmark vertex");
  }
}

VertexArray vertex_normals(const VertexArray& vertices, const MeshTopology& topology) {
  VertexArray normals = VertexArray::Zero(3, vertices.cols());
  for (const auto& t : topology.triangles) {
    const Vec3 a = vertices.col(t[0]);
    const Vec3 n = (vertices.col(t[1]) - a).cross(vertices.col(t[2]) - a);
    for (int v : t) normals.col(v) += n;
  }
  for (Eigen::Index i = 0; i < normals.cols(); ++i) {
    const double len = normals.col(i).norm();
    if (len > 0.0) normals.col(i) /= len;
  }
  return normals;
}

void CameraIntrinsics::validate() const {
  require(fx > 0.0 && fy > 0.0, ErrorCategory::invalid_input, "focal lengths must be positive");
  require(width > 0 && height > 0, ErrorCategory::invalid_input, "image size must be positive");
  require(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height, ErrorCategory::invalid_input,
          "principal point outside the image");
}

Vec2 CameraIntrinsics::project(const Vec3& p) const {
  return {cx + fx * p.x() / p.z(), cy + fy * p.y() / p.z()};
}

Vec3 CameraIntrinsics::backproject(double u, double v, double z) const {
  return {(u - cx) * z / fx, (v - cy) * z / fy, z};
}

Eigen::Matrix<double, 2, 3> CameraIntrinsics::projection_jacobian(const Vec3& p) const {
  const double iz = 1.0 / p.z();
  Eigen::Matrix<double, 2, 3> j;
  j << fx * iz, 0.0, -fx * p.x() * iz * iz,
       0.0, fy * iz, -fy * p.y() * iz * iz;
  return j;
}

Vec2 project(const CameraIntrinsics& camera, const Vec3& p) {
  require(p.z() > 0.0, ErrorCategory::behind_camera, "point behind the camera");
  return camera.project(p);
}

VectorX ShapeParams::to_vector() const {
  VectorX v(dimension());
  v.segment<3>(0) = pose.rotation;
  v.segment<3>(3) = pose.translation;
  v.segment(6, expr.size()) = expr;
  v.tail(2 * landmark_count()) = Eigen::Map<const VectorX>(displacements.data(), 2 * landmark_count());
  return v;
}

ShapeParams ShapeParams::from_vector(const VectorX& v, int expression_weights, int landmarks) {
  ShapeParams p(expression_weights, landmarks);
  require(v.size() == p.dimension(), ErrorCategory::dimension_mismatch, "parameter vector length mismatch");
  p.pose.rotation = v.segment<3>(0);
  p.pose.translation = v.segment<3>(3);
  p.expr = v.segment(6, expression_weights);
  p.displacements = Eigen::Map<const Points2D>(v.tail(2 * landmarks).data(), 2, landmarks);
  return p;
}

VectorX ShapeParams::theta() const {
  VectorX t(theta_dimension(static_cast<int>(expr.size())));
  t << pose.rotation, pose.translation, expr;
  return t;
}

void ShapeParams::set_theta(const VectorX& theta) {
  require(theta.size() == theta_dimension(static_cast<int>(expr.size())), ErrorCategory::dimension_mismatch,
          "theta length mismatch");
  pose.rotation = theta.segment<3>(0);
  pose.translation = theta.segment<3>(3);
  expr = theta.tail(expr.size());
}

int theta_dimension(int expression_weights) { return 6 + expression_weights; }

Points2D project_landmarks(const ExpressionBasis& landmarks, const RigidPose& pose, const VectorX& e,
                           const CameraIntrinsics& camera) {
  const VertexArray posed = transform(landmarks.evaluate(e), pose);
  Points2D out(2, posed.cols());
  for (Eigen::Index i = 0; i < posed.cols(); ++i) out.col(i) = project(camera, posed.col(i));
  return out;
}

Points2D landmark_positions_2d(const ExpressionBasis& landmarks, const ShapeParams& params,
                               const CameraIntrinsics& camera) {
  require(params.landmark_count() == landmarks.size(), ErrorCategory::dimension_mismatch,
          "displacement count != landmark count");
  return project_landmarks(landmarks, params.pose, params.expr, camera) - params.displacements;
}

Points2D landmark_positions_2d(const BlendshapeSet& shapes, const MeshTopology& topology,
                               const ShapeParams& params, const CameraIntrinsics& camera) {
  return landmark_positions_2d(ExpressionBasis::from(shapes, topology.landmark_vertices), params, camera);
}

}  // namespace facetrack
