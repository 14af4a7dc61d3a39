#include "facetrack/refinement.hpp"
#include "facetrack/least_squares.hpp"
#include "facetrack/rotation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace facetrack {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Weighted residual stack over theta: r and J (columns = full theta).
struct Residuals {
  VectorX r;
  MatrixX j;
  bool flagged = false;
};

void append(Residuals& acc, const VectorX& r, const MatrixX& j) {
  const Eigen::Index n = acc.r.size();
  acc.r.conservativeResize(n + r.size());
  acc.r.tail(r.size()) = r;
  MatrixX jj(n + r.size(), j.cols());
  if (n) jj.topRows(n) = acc.j;
  jj.bottomRows(r.size()) = j;
  acc.j.swap(jj);
}

// sqrt(w / N_l) * (project(S_i) - l_i)
void landmark_terms(const VectorX& theta, const Points2D& l, const ExpressionBasis& basis, const CameraIntrinsics& camera,
                    double weight, VectorX& r, MatrixX& j, bool& flagged) {
  const int count = basis.size();
  const int nexp = basis.expression_count();
  const Vec3 omega = theta.segment<3>(0);
  const Vec3 t = theta.segment<3>(3);
  const VectorX e = theta.tail(nexp);
  const Mat3 rot = rotation_from_axis_angle(omega);
  const double s = std::sqrt(weight / std::max(count, 1));
  r = VectorX::Zero(2 * count);
  j = MatrixX::Zero(2 * count, 6 + nexp);
  for (int i = 0; i < count; ++i) {
    const Vec3 v = basis.vertex(i, e);
    const Vec3 p = rot * v + t;
    if (p.z() <= 0.0) {
      flagged = true;
      continue;
    }
    r.segment<2>(2 * i) = s * (camera.project(p) - l.col(i));
    const Eigen::Matrix<double, 2, 3> pj = s * camera.projection_jacobian(p);
    j.block<2, 3>(2 * i, 0) = pj * rotate_point_jacobian(omega, v);
    j.block<2, 3>(2 * i, 3) = pj;
    j.block(2 * i, 6, 2, nexp) = pj * rot * basis.deltas.middleRows<3>(3 * i);
  }
}

// sqrt(w / N_d) * ls * (S_k - d_k) . n_k
void plane_terms(const VectorX& theta, const CorrespondenceSet& corr, const PointCloud& cloud,
                 const ExpressionBasis& basis, double weight, double ls, VectorX& r, MatrixX& j) {
  const int nexp = basis.expression_count();
  const int count = static_cast<int>(corr.pairs.size());
  r = VectorX::Zero(count);
  j = MatrixX::Zero(count, 6 + nexp);
  if (count == 0) return;
  const Vec3 omega = theta.segment<3>(0);
  const Vec3 t = theta.segment<3>(3);
  const VectorX e = theta.tail(nexp);
  const Mat3 rot = rotation_from_axis_angle(omega);
  const double s = std::sqrt(weight / count) * ls;
  for (int k = 0; k < count; ++k) {
    const Correspondence& c = corr.pairs[k];
    const Vec3 v = basis.vertex(c.sample, e);
    const Vec3& n = cloud.normals[c.point];
    const double w = s * std::sqrt(c.weight);
    r[k] = w * (rot * v + t - cloud.points[c.point]).dot(n);
    j.block<1, 3>(k, 0) = w * n.transpose() * rotate_point_jacobian(omega, v);
    j.block<1, 3>(k, 3) = w * n.transpose();
    j.block(k, 6, 1, nexp) = w * n.transpose() * rot * basis.deltas.middleRows<3>(3 * c.sample);
  }
}

void regularizer_terms(const VectorX& theta, const VectorX& target, const VectorX& prev, const VectorX& prev2,
                       const VectorX& alpha, const VectorX& beta, VectorX& r, MatrixX& j) {
  const Eigen::Index n = theta.size();
  r.resize(2 * n);
  j = MatrixX::Zero(2 * n, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    const double a = std::sqrt(alpha[c]), b = std::sqrt(beta[c]);
    r[c] = a * (theta[c] - target[c]);
    j(c, c) = a;
    r[n + c] = beta[c] > 0.0 ? b * (theta[c] - 2.0 * prev[c] + prev2[c]) : 0.0;
    j(n + c, c) = b;
  }
}

struct BlockSetup {
  VectorX alpha, beta;
  double omega = 0.0;
};

BlockSetup block_setup(const BlockWeights& w, int nexp, const TrackerState& state, double ls) {
  BlockSetup b;
  block_regularizer(w, nexp, ls, b.alpha, b.beta);
  if (state.history < 2) b.beta.setZero();
  b.omega = w.omega_3d;
  return b;
}

VectorX history_or(const VectorX& h, const VectorX& fallback) { return h.size() == fallback.size() ? h : fallback; }

CorrespondenceSet correspondences_at(const VectorX& theta, const TrackerState& state, const ObservedFrame& frame,
                                     const RefinementConfig& config) {
  const VertexArray mesh = state.posed_mesh(theta);
  const VertexArray normals = vertex_normals(mesh, state.topology);
  const auto& verts = state.sample_basis.vertices;
  VertexArray posed(3, static_cast<Eigen::Index>(verts.size())), vn(3, static_cast<Eigen::Index>(verts.size()));
  for (std::size_t k = 0; k < verts.size(); ++k) {
    posed.col(static_cast<Eigen::Index>(k)) = mesh.col(verts[k]);
    vn.col(static_cast<Eigen::Index>(k)) = normals.col(verts[k]);
  }
  return find_correspondences(posed, vn, verts, frame.cloud, frame.tree, config.correspondences);
}

double total_with(const VectorX& theta, const VectorX& target, const Points2D& l, const CorrespondenceSet& corr,
                  const ObservedFrame& frame, const TrackerState& state, const CameraIntrinsics& camera,
                  const RefinementConfig& config) {
  const int nexp = static_cast<int>(theta.size()) - 6;
  const BlockSetup rigid = block_setup(config.rigid, nexp, state, config.regularizer_length_scale);
  const EnergyValue e2 = energy_e2d(theta, l, state.landmark_basis, camera);
  const EnergyValue e3 =
      energy_e3d_point_plane(theta, corr, frame.cloud, state.sample_basis, config.length_scale);
  const EnergyValue er = energy_ereg(theta, target, history_or(state.theta_prev, target),
                                     history_or(state.theta_prev2, target), rigid.alpha, rigid.beta);
  return e2.value + rigid.omega * e3.value + er.value;
}

// Minimizes the block energy over the theta coordinates listed in `free`.
void minimize_block(VectorX& theta, const std::vector<int>& free, const BlockSetup& block, const VectorX& target,
                    const Points2D& l, const CorrespondenceSet& corr, const ObservedFrame& frame,
                    const TrackerState& state, const CameraIntrinsics& camera, const RefinementConfig& config,
                    bool bounded) {
  const VectorX prev = history_or(state.theta_prev, target);
  const VectorX prev2 = history_or(state.theta_prev2, target);
  const int nfree = static_cast<int>(free.size());
  VectorX base = theta;
  ResidualFunction residual = [&](const VectorX& x, VectorX& r, MatrixX* jac) {
    VectorX th = base;
    for (int k = 0; k < nfree; ++k) th[free[k]] = x[k];
    Residuals acc;
    acc.j.resize(0, th.size());
    VectorX rr;
    MatrixX jj;
    bool flagged = false;
    landmark_terms(th, l, state.landmark_basis, camera, 1.0, rr, jj, flagged);
    if (flagged) {
      r = VectorX::Constant(1, kNaN);
      if (jac) *jac = MatrixX::Zero(1, nfree);
      return;
    }
    append(acc, rr, jj);
    if (block.omega > 0.0 && !corr.pairs.empty()) {
      plane_terms(th, corr, frame.cloud, state.sample_basis, block.omega, config.length_scale, rr, jj);
      append(acc, rr, jj);
    }
    regularizer_terms(th, target, prev, prev2, block.alpha, block.beta, rr, jj);
    append(acc, rr, jj);
    r = acc.r;
    if (jac) {
      jac->resize(acc.j.rows(), nfree);
      for (int k = 0; k < nfree; ++k) jac->col(k) = acc.j.col(free[k]);
    }
  };
  VectorX x(nfree);
  for (int k = 0; k < nfree; ++k) x[k] = theta[free[k]];
  LeastSquaresOptions options;
  options.max_iterations = config.inner_iterations;
  if (bounded) {
    options.lower = VectorX::Zero(nfree);
    options.upper = VectorX::Ones(nfree);
  }
  minimize_least_squares(residual, x, options);
  for (int k = 0; k < nfree; ++k) theta[free[k]] = x[k];
}

}  // namespace

std::size_t PointCloud::valid_count() const { return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), 1)); }

PointCloud PointCloud::from_points(const std::vector<Vec3>& points, const std::vector<Vec3>& normals) {
  require(points.size() == normals.size(), ErrorCategory::dimension_mismatch, "points and normals differ in count");
  PointCloud c;
  c.points = points;
  c.normals = normals;
  for (auto& n : c.normals) {
    const double len = n.norm();
    require(len > 0.0, ErrorCategory::invalid_input, "zero normal");
    n /= len;
  }
  c.valid.assign(points.size(), 1);
  c.normal_valid.assign(points.size(), 1);
  return c;
}

void estimate_normals(PointCloud& cloud, const NormalConfig& config) {
  const int w = cloud.width, h = cloud.height;
  require(static_cast<std::size_t>(w) * h == cloud.size(), ErrorCategory::invalid_input,
          "normal estimation needs an organized cloud");
  require(config.step >= 1 && config.smoothing_radius >= 0, ErrorCategory::invalid_input, "invalid normal config");
  cloud.normals.assign(cloud.size(), Vec3::Zero());
  cloud.normal_valid.assign(cloud.size(), 0);
  cloud.boundary.assign(cloud.size(), 0);
  auto idx = [w](int x, int y) { return static_cast<std::size_t>(y) * w + x; };

  std::vector<Vec3> smooth(cloud.size(), Vec3::Zero());
  const int rad = config.smoothing_radius;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = idx(x, y);
      if (!cloud.valid[i]) continue;
      const double z = cloud.points[i].z();
      Vec3 sum = Vec3::Zero();
      int n = 0;
      for (int dy = -rad; dy <= rad; ++dy) {
        for (int dx = -rad; dx <= rad; ++dx) {
          const int xx = x + dx, yy = y + dy;
          if (xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
          const std::size_t j = idx(xx, yy);
          if (!cloud.valid[j] || std::abs(cloud.points[j].z() - z) > config.discontinuity) continue;
          sum += cloud.points[j];
          ++n;
        }
      }
      smooth[i] = sum / n;
    }
  }

  const int s = config.step;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = idx(x, y);
      if (!cloud.valid[i]) continue;
      const Vec3& c = smooth[i];
      auto usable = [&](int xx, int yy) {
        if (xx < 0 || yy < 0 || xx >= w || yy >= h) return false;
        const std::size_t j = idx(xx, yy);
        return cloud.valid[j] && std::abs(smooth[j].z() - c.z()) <= config.discontinuity;
      };
      for (int dy = -s; dy <= s && !cloud.boundary[i]; ++dy) {
        for (int dx = -s; dx <= s; ++dx) {
          if (!usable(x + dx, y + dy)) {
            cloud.boundary[i] = 1;
            break;
          }
        }
      }
      const bool l = usable(x - s, y), r = usable(x + s, y), u = usable(x, y - s), d = usable(x, y + s);
      if (l + r + u + d < 3) continue;
      const Vec3 tx = l && r ? Vec3(smooth[idx(x + s, y)] - smooth[idx(x - s, y)])
                      : r    ? Vec3(smooth[idx(x + s, y)] - c)
                             : Vec3(c - smooth[idx(x - s, y)]);
      const Vec3 ty = u && d ? Vec3(smooth[idx(x, y + s)] - smooth[idx(x, y - s)])
                      : d    ? Vec3(smooth[idx(x, y + s)] - c)
                             : Vec3(c - smooth[idx(x, y - s)]);
      Vec3 n = tx.cross(ty);
      const double len = n.norm();
      if (!(len > 1e-300)) continue;
      n /= len;
      if (n.dot(cloud.points[i]) > 0.0) n = -n;
      cloud.normals[i] = n;
      cloud.normal_valid[i] = 1;
    }
  }
}

PointCloud backproject_depth(const DepthMap& depth, const CameraIntrinsics& camera, const NormalConfig& config) {
  camera.validate();
  PointCloud cloud;
  cloud.width = depth.width;
  cloud.height = depth.height;
  cloud.points.assign(depth.size(), Vec3::Zero());
  cloud.valid.assign(depth.size(), 0);
  for (int y = 0; y < depth.height; ++y) {
    for (int x = 0; x < depth.width; ++x) {
      const std::size_t i = depth.index(x, y);
      const double z = depth.values[i];
      if (!(z > 0.0) || !std::isfinite(z)) continue;
      cloud.points[i] = camera.backproject(x, y, z);
      cloud.valid[i] = 1;
    }
  }
  estimate_normals(cloud, config);
  return cloud;
}

KdTree build_cloud_tree(const PointCloud& cloud) {
  std::vector<int> indices;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (cloud.valid[i] && cloud.normal_valid[i]) indices.push_back(static_cast<int>(i));
  }
  return KdTree(cloud.points, indices);
}

ObservedFrame ObservedFrame::make(ColorImage color, DepthMap depth, const CameraIntrinsics& camera,
                                  const NormalConfig& config) {
  ObservedFrame f;
  f.gray = to_gray(color);
  f.color = std::move(color);
  f.cloud = backproject_depth(depth, camera, config);
  f.depth = std::move(depth);
  f.tree = build_cloud_tree(f.cloud);
  return f;
}

std::vector<int> sample_vertices(int vertex_count, int max_samples) {
  require(vertex_count >= 0 && max_samples >= 1, ErrorCategory::invalid_input, "invalid sampling request");
  const int stride = std::max(1, (vertex_count + max_samples - 1) / max_samples);
  std::vector<int> out;
  for (int v = 0; v < vertex_count; v += stride) out.push_back(v);
  return out;
}

CorrespondenceSet find_correspondences(const VertexArray& posed, const VertexArray& normals,
                                       const std::vector<int>& vertices, const PointCloud& cloud, const KdTree& tree,
                                       const CorrespondenceConfig& config) {
  require(posed.cols() == normals.cols() && posed.cols() == static_cast<Eigen::Index>(vertices.size()),
          ErrorCategory::dimension_mismatch, "sampled vertex arrays differ in size");
  const double cos_gate = std::cos(config.max_normal_angle_deg * std::numbers::pi / 180.0);
  CorrespondenceSet out;
  for (Eigen::Index k = 0; k < posed.cols(); ++k) {
    const int p = tree.nearest(posed.col(k), config.max_distance);
    if (p < 0 || (!cloud.boundary.empty() && cloud.boundary[p])) continue;
    if (normals.col(k).dot(cloud.normals[p]) < cos_gate) continue;
    out.pairs.push_back({static_cast<int>(k), vertices[k], p, 1.0});
  }
  out.two_d_only = out.pairs.empty();
  return out;
}

EnergyValue energy_e2d(const VectorX& theta, const Points2D& landmarks, const ExpressionBasis& basis,
                       const CameraIntrinsics& camera) {
  require(landmarks.cols() == basis.size(), ErrorCategory::dimension_mismatch, "landmark count mismatch");
  require(theta.size() == 6 + basis.expression_count(), ErrorCategory::dimension_mismatch, "theta length mismatch");
  VectorX r;
  MatrixX j;
  EnergyValue out;
  landmark_terms(theta, landmarks, basis, camera, 1.0, r, j, out.flagged);
  out.value = r.squaredNorm();
  out.gradient = 2.0 * j.transpose() * r;
  return out;
}

EnergyValue energy_e3d_point_plane(const VectorX& theta, const CorrespondenceSet& corr, const PointCloud& cloud,
                                   const ExpressionBasis& basis, double length_scale) {
  require(theta.size() == 6 + basis.expression_count(), ErrorCategory::dimension_mismatch, "theta length mismatch");
  VectorX r;
  MatrixX j;
  EnergyValue out;
  plane_terms(theta, corr, cloud, basis, 1.0, length_scale, r, j);
  out.value = r.squaredNorm();
  out.gradient = 2.0 * j.transpose() * r;
  out.flagged = corr.pairs.empty();
  return out;
}

EnergyValue energy_ereg(const VectorX& theta, const VectorX& target, const VectorX& prev, const VectorX& prev2,
                        const VectorX& alpha, const VectorX& beta) {
  const Eigen::Index n = theta.size();
  require(target.size() == n && prev.size() == n && prev2.size() == n && alpha.size() == n && beta.size() == n,
          ErrorCategory::dimension_mismatch, "regularizer vectors differ in length");
  require((alpha.array() >= 0.0).all() && (beta.array() >= 0.0).all(), ErrorCategory::invalid_input,
          "regularizer weights must be >= 0");
  VectorX r;
  MatrixX j;
  regularizer_terms(theta, target, prev, prev2, alpha, beta, r, j);
  EnergyValue out;
  out.value = r.squaredNorm();
  out.gradient = 2.0 * j.transpose() * r;
  return out;
}

void block_regularizer(const BlockWeights& w, int expression_count, double length_scale, VectorX& alpha,
                       VectorX& beta) {
  const double l2 = length_scale * length_scale;
  alpha.resize(6 + expression_count);
  beta.resize(6 + expression_count);
  alpha.head<3>().setConstant(w.alpha_rotation);
  beta.head<3>().setConstant(w.beta_rotation);
  alpha.segment<3>(3).setConstant(w.alpha_translation * l2);
  beta.segment<3>(3).setConstant(w.beta_translation * l2);
  alpha.tail(expression_count).setConstant(w.alpha_expression);
  beta.tail(expression_count).setConstant(w.beta_expression);
}

void TrackerState::set_identity(const ReducedCoreTensor& tensor, const VectorX& w, int max_samples) {
  w_id = w;
  blendshapes = build_blendshapes(tensor, w);
  landmark_basis = ExpressionBasis::from(blendshapes, topology.landmark_vertices);
  sample_basis = ExpressionBasis::from(blendshapes, sample_vertices(tensor.dims().vertices, max_samples));
}

void TrackerState::push_history(const VectorX& theta) {
  theta_prev2 = theta_prev;
  theta_prev = theta;
  history = std::min(2, history + 1);
}

VertexArray TrackerState::posed_mesh(const VectorX& theta) const {
  const int nexp = blendshapes.expression_count() - 1;
  require(theta.size() == 6 + nexp, ErrorCategory::dimension_mismatch, "theta length mismatch");
  RigidPose pose;
  pose.rotation = theta.segment<3>(0);
  pose.translation = theta.segment<3>(3);
  return transform(blend(blendshapes, theta.tail(nexp).cwiseMax(0.0).cwiseMin(1.0)), pose);
}

TrackerState make_tracker_state(const ReducedCoreTensor& tensor, const MeshTopology& topology, const VectorX& w_id,
                                const RefinementConfig& config) {
  topology.validate(tensor.dims().vertices);
  TrackerState state;
  state.topology = topology;
  state.set_identity(tensor, w_id, config.correspondences.max_samples);
  return state;
}

double total_energy(const VectorX& theta, const VectorX& target, const Points2D& landmarks, const ObservedFrame& frame,
                    const TrackerState& state, const CameraIntrinsics& camera, const RefinementConfig& config) {
  const CorrespondenceSet corr = correspondences_at(theta, state, frame, config);
  return total_with(theta, target, landmarks, corr, frame, state, camera, config);
}

RefineResult refine(const ShapeParams& p_raw, const ObservedFrame& frame, const TrackerState& state,
                    const CameraIntrinsics& camera, const RefinementConfig& config, const std::optional<VectorX>& start) {
  const int nexp = state.blendshapes.expression_count() - 1;
  require(static_cast<int>(p_raw.expr.size()) == nexp, ErrorCategory::dimension_mismatch,
          "parameters do not match the blendshapes");
  RefineResult out;
  out.landmarks = landmark_positions_2d(state.landmark_basis, p_raw, camera);
  VectorX target = p_raw.theta();
  target.tail(nexp) = target.tail(nexp).cwiseMax(0.0).cwiseMin(1.0);
  VectorX theta = start ? *start : target;
  require(theta.size() == target.size(), ErrorCategory::dimension_mismatch, "start theta length mismatch");
  theta.tail(nexp) = theta.tail(nexp).cwiseMax(0.0).cwiseMin(1.0);

  const BlockSetup rigid = block_setup(config.rigid, nexp, state, config.regularizer_length_scale);
  const BlockSetup expression = block_setup(config.expression, nexp, state, config.regularizer_length_scale);
  const std::vector<int> rigid_free = {0, 1, 2, 3, 4, 5};
  std::vector<int> expr_free;
  for (int k = 0; k < nexp; ++k) expr_free.push_back(6 + k);

  out.total_initial = total_energy(target, target, out.landmarks, frame, state, camera, config);
  double previous = total_energy(theta, target, out.landmarks, frame, state, camera, config);
  for (int a = 0; a < config.alternations; ++a) {
    const CorrespondenceSet corr = correspondences_at(theta, state, frame, config);
    minimize_block(theta, rigid_free, rigid, target, out.landmarks, corr, frame, state, camera, config, false);
    if (nexp > 0) {
      minimize_block(theta, expr_free, expression, target, out.landmarks, corr, frame, state, camera, config, true);
    }
    const double current = total_energy(theta, target, out.landmarks, frame, state, camera, config);
    const double change = std::abs(previous - current);
    previous = current;
    if (change <= config.tolerance * std::max(current, 1e-300)) break;
  }

  CorrespondenceSet corr = correspondences_at(theta, state, frame, config);
  out.total_final = total_with(theta, target, out.landmarks, corr, frame, state, camera, config);
  out.optimized_theta = theta;
  if (!(out.total_final <= out.total_initial)) {
    theta = target;
    out.fell_back = true;
    corr = correspondences_at(theta, state, frame, config);
    out.total_final = out.total_initial;
  }
  out.params = p_raw;
  out.params.set_theta(theta);
  out.e2d = energy_e2d(theta, out.landmarks, state.landmark_basis, camera).value;
  out.e3d = energy_e3d_point_plane(theta, corr, frame.cloud, state.sample_basis).value;
  out.ereg = energy_ereg(theta, target, history_or(state.theta_prev, target), history_or(state.theta_prev2, target),
                         rigid.alpha, rigid.beta)
                 .value;
  out.correspondences = static_cast<int>(corr.pairs.size());
  out.two_d_only = corr.two_d_only;
  return out;
}

namespace {

// Precomputed pieces of the identity objective for one frame.
struct IdentityProblem {
  MatrixX landmark_rows;  // 3 N_l x N_id, tensor contracted with the expression vector
  MatrixX sample_rows;    // 3 N_d x N_id, rows of the matched vertices
  std::vector<Vec3> targets;
  Mat3 rot;
  Vec3 t;
  Points2D landmarks;
  double omega = 0.5;
  double ls = 1000.0;
  double ridge = 0.0;

  double operator()(const VectorX& w, const CameraIntrinsics& camera) const {
    const VectorX vl = landmark_rows * w;
    const int nl = static_cast<int>(landmarks.cols());
    double e2 = 0.0;
    for (int i = 0; i < nl; ++i) {
      const Vec3 p = rot * vl.segment<3>(3 * i) + t;
      if (p.z() <= 0.0) return std::numeric_limits<double>::infinity();
      e2 += (camera.project(p) - landmarks.col(i)).squaredNorm();
    }
    e2 /= std::max(nl, 1);
    double e3 = 0.0;
    if (!targets.empty()) {
      const VectorX vs = sample_rows * w;
      for (std::size_t k = 0; k < targets.size(); ++k) {
        e3 += (rot * vs.segment<3>(3 * static_cast<Eigen::Index>(k)) + t - targets[k]).squaredNorm();
      }
      e3 = e3 * ls * ls / static_cast<double>(targets.size());
    }
    const double reg = ridge > 0.0 ? ridge * w.tail(w.size() - 1).squaredNorm() : 0.0;
    return e2 + omega * e3 + reg;
  }
};

IdentityProblem identity_problem(const VectorX& theta, const Points2D& landmarks, const ReducedCoreTensor& tensor,
                                 const TrackerState& state, const ObservedFrame& frame,
                                 const RefinementConfig& config) {
  const int nexp = tensor.dims().expressions - 1;
  IdentityProblem p;
  const VectorX gamma = tensor.expression_vector(theta.tail(nexp).cwiseMax(0.0).cwiseMin(1.0));
  p.landmark_rows = tensor.select_vertices(state.topology.landmark_vertices).contract_expression(gamma);
  const CorrespondenceSet corr = correspondences_at(theta, state, frame, config);
  std::vector<int> matched;
  for (const auto& c : corr.pairs) {
    matched.push_back(c.vertex);
    p.targets.push_back(frame.cloud.points[c.point]);
  }
  if (!matched.empty()) p.sample_rows = tensor.select_vertices(matched).contract_expression(gamma);
  p.rot = rotation_from_axis_angle(theta.segment<3>(0));
  p.t = theta.segment<3>(3);
  p.landmarks = landmarks;
  p.omega = config.identity_omega_3d;
  p.ls = config.length_scale;
  p.ridge = config.identity_ridge;
  return p;
}

}  // namespace

double identity_objective(const VectorX& w, const VectorX& theta, const Points2D& landmarks,
                          const ReducedCoreTensor& tensor, const TrackerState& state, const ObservedFrame& frame,
                          const CameraIntrinsics& camera, const RefinementConfig& config) {
  return identity_problem(theta, landmarks, tensor, state, frame, config)(w, camera);
}

IdentityUpdate update_identity(TrackerState& state, const ReducedCoreTensor& tensor, const ObservedFrame& frame,
                               const VectorX& theta, const Points2D& landmarks, const CameraIntrinsics& camera,
                               const RefinementConfig& config) {
  IdentityUpdate out;
  out.w_id = state.w_id;
  out.locked = state.identity_locked;
  if (state.identity_locked) {
    out.skipped = true;
    return out;
  }
  const IdentityProblem problem = identity_problem(theta, landmarks, tensor, state, frame, config);
  VectorX w = state.w_id;
  double best = problem(w, camera);
  out.objective_before = best;
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  for (Eigen::Index c = 1; c < w.size(); ++c) {
    double lo = w[c] - config.identity_bracket, hi = w[c] + config.identity_bracket;
    VectorX probe = w;
    auto f = [&](double v) {
      probe[c] = v;
      return problem(probe, camera);
    };
    double x1 = hi - inv_phi * (hi - lo), x2 = lo + inv_phi * (hi - lo);
    double f1 = f(x1), f2 = f(x2);
    while (hi - lo > config.identity_search_tolerance) {
      if (f1 <= f2) {
        hi = x2;
        x2 = x1;
        f2 = f1;
        x1 = hi - inv_phi * (hi - lo);
        f1 = f(x1);
      } else {
        lo = x1;
        x1 = x2;
        f1 = f2;
        x2 = lo + inv_phi * (hi - lo);
        f2 = f(x2);
      }
    }
    const double candidate = f1 <= f2 ? x1 : x2;
    const double value = std::min(f1, f2);
    if (value <= best) {
      best = value;
      w[c] = candidate;
    }
  }
  out.objective_after = best;
  out.step = (w - state.w_id).norm();
  state.set_identity(tensor, w, config.correspondences.max_samples);
  ++state.identity_frames;
  if (out.step < config.identity_lock_tolerance || state.identity_frames >= config.identity_max_frames) {
    state.identity_locked = true;
  }
  out.w_id = w;
  out.locked = state.identity_locked;
  return out;
}

}  // namespace facetrack
