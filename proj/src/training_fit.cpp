#include "facetrack/training_fit.hpp"
#include "facetrack/binary_io.hpp"
#include "facetrack/parallel.hpp"
#include "facetrack/rotation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <sstream>

namespace facetrack {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct LandmarkJacobians {
  MatrixX pose;        // 2L x 6
  MatrixX identity;    // 2L x N_id
  MatrixX expression;  // 2L x (N_e - 1)
};

// Reprojection residuals r_i = project(R V_i + T) - l_i of the landmark tensor
// at (pose, w_id, expr). Behind-camera points yield NaN residuals.
void landmark_residuals(const ReducedCoreTensor& lt, const Points2D& observed, const CameraIntrinsics& camera,
                        const RigidPose& pose, const VectorX& w_id, const VectorX& expr, VectorX& r,
                        LandmarkJacobians* jac) {
  const int count = lt.dims().vertices;
  const int nid = lt.dims().identities;
  const int ne = lt.dims().expressions;
  const MatrixX a = lt.contract_expression(lt.expression_vector(expr));
  const VectorX v = a * w_id;
  const Mat3 rot = pose.rotation_matrix();
  MatrixX dv_de;
  if (jac) {
    const MatrixX b = lt.contract_identity(w_id);
    dv_de.resize(3 * count, ne - 1);
    const auto& basis = lt.exp_basis();
    for (int j = 1; j < ne; ++j) dv_de.col(j - 1) = b * (basis[j] - basis[0]);
    jac->pose.resize(2 * count, 6);
    jac->identity.resize(2 * count, nid);
    jac->expression.resize(2 * count, ne - 1);
  }
  r.resize(2 * count);
  for (int i = 0; i < count; ++i) {
    const Vec3 vi = v.segment<3>(3 * i);
    const Vec3 p = rot * vi + pose.translation;
    if (p.z() <= 0.0) {
      r.segment<2>(2 * i).setConstant(kNaN);
      continue;
    }
    r.segment<2>(2 * i) = camera.project(p) - observed.col(i);
    if (!jac) continue;
    const Eigen::Matrix<double, 2, 3> pj = camera.projection_jacobian(p);
    const Eigen::Matrix<double, 2, 3> pr = pj * rot;
    jac->pose.block<2, 3>(2 * i, 0) = pj * rotate_point_jacobian(pose.rotation, vi);
    jac->pose.block<2, 3>(2 * i, 3) = pj;
    jac->identity.middleRows<2>(2 * i) = pr * a.middleRows<3>(3 * i);
    if (ne > 1) jac->expression.middleRows<2>(2 * i) = pr * dv_de.middleRows<3>(3 * i);
  }
}

void check_sample(const Points2D& landmarks, const ReducedCoreTensor& lt) {
  require(landmarks.cols() == lt.dims().vertices, ErrorCategory::dimension_mismatch,
          "landmark count does not match the landmark tensor");
  require(landmarks.cols() >= 6, ErrorCategory::invalid_input, "fitting needs at least 6 landmarks");
  require(landmarks.allFinite(), ErrorCategory::invalid_input, "non-finite landmark coordinates");
}

bool outside_image(const Points2D& l, const CameraIntrinsics& camera) {
  for (Eigen::Index i = 0; i < l.cols(); ++i) {
    if (l(0, i) < 0.0 || l(1, i) < 0.0 || l(0, i) > camera.width - 1 || l(1, i) > camera.height - 1) return true;
  }
  return false;
}

double sample_cost(const ReducedCoreTensor& lt, const Points2D& l, const CameraIntrinsics& camera,
                   const SampleFit& fit) {
  VectorX r;
  landmark_residuals(lt, l, camera, fit.pose, fit.w_id, fit.expr, r, nullptr);
  return r.squaredNorm();
}

}  // namespace

ReducedCoreTensor landmark_tensor(const ReducedCoreTensor& tensor, const MeshTopology& topology) {
  topology.validate(tensor.dims().vertices);
  return tensor.select_vertices(topology.landmark_vertices);
}

SampleFit initial_fit(const Points2D& landmarks, const ReducedCoreTensor& lt, const CameraIntrinsics& camera) {
  SampleFit fit;
  fit.w_id = mean_identity(lt.dims().identities);
  fit.expr = VectorX::Zero(lt.dims().expressions - 1);
  const VertexArray model = contract(lt, fit.w_id, lt.expression_vector(fit.expr));
  const Vec3 model_center = model.rowwise().mean();
  const Vec2 image_center = landmarks.rowwise().mean();
  const double model_spread =
      std::sqrt((model.topRows<2>().colwise() - model_center.head<2>()).colwise().squaredNorm().mean());
  Points2D scaled = landmarks;
  scaled.row(0) /= camera.fx;
  scaled.row(1) /= camera.fy;
  const Vec2 scaled_center = scaled.rowwise().mean();
  const double image_spread = std::sqrt((scaled.colwise() - scaled_center).colwise().squaredNorm().mean());
  const double z = image_spread > 0.0 ? model_spread / image_spread : 1.0;
  const Vec3 center = camera.backproject(image_center.x(), image_center.y(), z);
  fit.pose.rotation.setZero();
  fit.pose.translation = Vec3(center.x() - model_center.x(), center.y() - model_center.y(), z - model_center.z());
  return fit;
}

SampleFit fit_sample(const TrainingSample& sample, const ReducedCoreTensor& lt, const CameraIntrinsics& camera,
                     const SampleFit* init, const FitOptions& options) {
  check_sample(sample.landmarks, lt);
  SampleFit fit = init ? *init : initial_fit(sample.landmarks, lt, camera);
  const int nid = lt.dims().identities;
  const int nexp = lt.dims().expressions - 1;
  require(fit.w_id.size() == nid && fit.expr.size() == nexp, ErrorCategory::dimension_mismatch,
          "initial fit has wrong dimensions");
  const int id0 = options.pin_first_identity ? 1 : 0;
  const int nfree = nid - id0;

  auto unpack = [&](const VectorX& x, RigidPose& pose, VectorX& w, VectorX& e) {
    pose.rotation = x.segment<3>(0);
    pose.translation = x.segment<3>(3);
    w = fit.w_id;
    w.tail(nfree) = x.segment(6, nfree);
    e = x.tail(nexp);
  };
  const Points2D& l = sample.landmarks;
  ResidualFunction residual = [&](const VectorX& x, VectorX& r, MatrixX* j) {
    RigidPose pose;
    VectorX w, e;
    unpack(x, pose, w, e);
    LandmarkJacobians lj;
    landmark_residuals(lt, l, camera, pose, w, e, r, j ? &lj : nullptr);
    if (j) {
      j->resize(r.size(), 6 + nfree + nexp);
      j->leftCols<6>() = lj.pose;
      j->middleCols(6, nfree) = lj.identity.rightCols(nfree);
      j->rightCols(nexp) = lj.expression;
    }
  };

  VectorX x(6 + nfree + nexp);
  x << fit.pose.rotation, fit.pose.translation, fit.w_id.tail(nfree), fit.expr;
  LeastSquaresOptions lso;
  lso.max_iterations = options.max_iterations;
  lso.check_rank = true;
  const LeastSquaresReport rep = minimize_least_squares(residual, x, lso);
  unpack(x, fit.pose, fit.w_id, fit.expr);
  fit.cost = rep.final_cost;
  fit.rmse = std::sqrt(rep.final_cost / static_cast<double>(l.cols()));
  fit.iterations = rep.iterations;
  fit.first_step = rep.first_step_norm;
  fit.converged = rep.converged;
  fit.rank_deficient = rep.rank_deficient;
  fit.out_of_bounds = outside_image(l, camera);
  return fit;
}

JointIdentityResult joint_identity_refinement(const std::vector<const TrainingSample*>& samples,
                                              const ReducedCoreTensor& lt, const CameraIntrinsics& camera,
                                              int alternations, const FitOptions& options) {
  require(!samples.empty(), ErrorCategory::invalid_input, "identity refinement needs at least one sample");
  require(alternations >= 0, ErrorCategory::invalid_input, "alternation count must be >= 0");
  for (const auto* s : samples) {
    require(s != nullptr, ErrorCategory::invalid_input, "null sample");
    require(s->subject_id == samples.front()->subject_id, ErrorCategory::invalid_input,
            "identity refinement samples must share one subject");
    check_sample(s->landmarks, lt);
  }
  const int n = static_cast<int>(samples.size());
  const int nid = lt.dims().identities;
  const int id0 = options.pin_first_identity ? 1 : 0;
  const int nfree = nid - id0;

  JointIdentityResult out;
  out.fits.resize(n);
  parallel_for(n, [&](int k) { out.fits[k] = fit_sample(*samples[k], lt, camera, nullptr, options); });
  out.w_id = VectorX::Zero(nid);
  for (const auto& f : out.fits) out.w_id += f.w_id;
  out.w_id /= n;

  auto total = [&]() {
    double sum = 0.0;
    for (int k = 0; k < n; ++k) sum += sample_cost(lt, samples[k]->landmarks, camera, out.fits[k]);
    return sum;
  };
  for (auto& f : out.fits) f.w_id = out.w_id;
  out.objective.push_back(total());

  for (int it = 0; it < alternations; ++it) {
    // Shared identity with per-sample pose and expression fixed.
    std::vector<MatrixX> a(n);
    for (int k = 0; k < n; ++k) a[k] = lt.contract_expression(lt.expression_vector(out.fits[k].expr));
    ResidualFunction residual = [&](const VectorX& x, VectorX& r, MatrixX* j) {
      VectorX w = out.w_id;
      w.tail(nfree) = x;
      const int rows = 2 * lt.dims().vertices;
      r.resize(static_cast<Eigen::Index>(rows) * n);
      if (j) j->resize(r.size(), nfree);
      for (int k = 0; k < n; ++k) {
        VectorX rk;
        LandmarkJacobians lj;
        landmark_residuals(lt, samples[k]->landmarks, camera, out.fits[k].pose, w, out.fits[k].expr, rk,
                           j ? &lj : nullptr);
        r.segment(static_cast<Eigen::Index>(k) * rows, rows) = rk;
        if (j) j->middleRows(static_cast<Eigen::Index>(k) * rows, rows) = lj.identity.rightCols(nfree);
      }
    };
    VectorX x = out.w_id.tail(nfree);
    LeastSquaresOptions lso;
    lso.max_iterations = options.max_iterations;
    minimize_least_squares(residual, x, lso);
    out.w_id.tail(nfree) = x;

    // Per-sample refits with the shared identity fixed.
    parallel_for(n, [&](int k) {
      SampleFit& f = out.fits[k];
      f.w_id = out.w_id;
      const int nexp = lt.dims().expressions - 1;
      ResidualFunction per_sample = [&](const VectorX& y, VectorX& r, MatrixX* j) {
        RigidPose pose;
        pose.rotation = y.segment<3>(0);
        pose.translation = y.segment<3>(3);
        LandmarkJacobians lj;
        landmark_residuals(lt, samples[k]->landmarks, camera, pose, out.w_id, y.tail(nexp), r, j ? &lj : nullptr);
        if (j) {
          j->resize(r.size(), 6 + nexp);
          j->leftCols<6>() = lj.pose;
          j->rightCols(nexp) = lj.expression;
        }
      };
      VectorX y(6 + nexp);
      y << f.pose.rotation, f.pose.translation, f.expr;
      LeastSquaresOptions so;
      so.max_iterations = options.max_iterations;
      so.check_rank = true;
      const LeastSquaresReport rep = minimize_least_squares(per_sample, y, so);
      f.pose.rotation = y.segment<3>(0);
      f.pose.translation = y.segment<3>(3);
      f.expr = y.tail(nexp);
      f.cost = rep.final_cost;
      f.rmse = std::sqrt(rep.final_cost / static_cast<double>(samples[k]->landmarks.cols()));
      f.iterations = rep.iterations;
      f.converged = rep.converged;
      f.rank_deficient = rep.rank_deficient;
    });
    out.objective.push_back(total());
  }
  return out;
}

DisplacementFit fit_expression_displacement(const TrainingSample& sample, const BlendshapeSet& shapes,
                                            const MeshTopology& topology, const CameraIntrinsics& camera,
                                            const ShapeParams& init, int max_iterations) {
  const ExpressionBasis basis = ExpressionBasis::from(shapes, topology.landmark_vertices);
  const int count = basis.size();
  const int nexp = basis.expression_count();
  require(sample.landmarks.cols() == count, ErrorCategory::dimension_mismatch, "landmark count mismatch");
  require(init.expr.size() == nexp, ErrorCategory::dimension_mismatch, "expression weight count mismatch");
  const Points2D& l = sample.landmarks;

  ResidualFunction residual = [&](const VectorX& x, VectorX& r, MatrixX* j) {
    const Vec3 omega = x.segment<3>(0);
    const Vec3 t = x.segment<3>(3);
    const VectorX e = x.tail(nexp);
    const Mat3 rot = rotation_from_axis_angle(omega);
    r.resize(2 * count);
    if (j) j->resize(2 * count, 6 + nexp);
    for (int i = 0; i < count; ++i) {
      const Vec3 v = basis.vertex(i, e);
      const Vec3 p = rot * v + t;
      if (p.z() <= 0.0) {
        r.segment<2>(2 * i).setConstant(kNaN);
        continue;
      }
      r.segment<2>(2 * i) = camera.project(p) - l.col(i);
      if (!j) continue;
      const Eigen::Matrix<double, 2, 3> pj = camera.projection_jacobian(p);
      j->block<2, 3>(2 * i, 0) = pj * rotate_point_jacobian(omega, v);
      j->block<2, 3>(2 * i, 3) = pj;
      j->block(2 * i, 6, 2, nexp) = pj * rot * basis.deltas.middleRows<3>(3 * i);
    }
  };

  VectorX x(6 + nexp);
  x << init.pose.rotation, init.pose.translation, init.expr.cwiseMax(0.0).cwiseMin(1.0);
  LeastSquaresOptions lso;
  lso.max_iterations = max_iterations;
  lso.lower = VectorX::Constant(6 + nexp, -std::numeric_limits<double>::infinity());
  lso.upper = VectorX::Constant(6 + nexp, std::numeric_limits<double>::infinity());
  lso.lower.tail(nexp).setZero();
  lso.upper.tail(nexp).setOnes();
  const LeastSquaresReport rep = minimize_least_squares(residual, x, lso);

  DisplacementFit out;
  out.params = ShapeParams(nexp, count);
  out.params.pose.rotation = x.segment<3>(0);
  out.params.pose.translation = x.segment<3>(3);
  out.params.expr = x.tail(nexp);
  VectorX r;
  residual(x, r, nullptr);
  out.params.displacements = Eigen::Map<const Points2D>(r.data(), 2, count);
  out.cost = rep.final_cost;
  out.converged = rep.converged;
  return out;
}

void PerturbConfig::validate() const {
  require(sigma_rotation >= 0.0 && (sigma_translation.array() >= 0.0).all() && sigma_expression >= 0.0 &&
              sigma_displacement >= 0.0,
          ErrorCategory::invalid_input, "perturbation sigmas must be >= 0");
  require(pairs_per_sample >= 1, ErrorCategory::invalid_input, "pairs_per_sample must be >= 1");
}

std::vector<GuessTruthPair> make_training_pairs(const std::vector<TruthRecord>& truths, const PerturbConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<GuessTruthPair> pairs;
  pairs.reserve(truths.size() * config.pairs_per_sample);
  for (const auto& t : truths) {
    for (int k = 0; k < config.pairs_per_sample; ++k) {
      GuessTruthPair p;
      p.image = t.image;
      p.truth = t.params;
      p.guess = t.params;
      for (int a = 0; a < 3; ++a) p.guess.pose.rotation[a] += config.sigma_rotation * normal(rng);
      for (int a = 0; a < 3; ++a) p.guess.pose.translation[a] += config.sigma_translation[a] * normal(rng);
      for (Eigen::Index j = 0; j < p.guess.expr.size(); ++j) {
        p.guess.expr[j] = std::clamp(p.guess.expr[j] + config.sigma_expression * normal(rng), 0.0, 1.0);
      }
      for (Eigen::Index i = 0; i < p.guess.displacements.size(); ++i) {
        p.guess.displacements.data()[i] += config.sigma_displacement * normal(rng);
      }
      pairs.push_back(std::move(p));
    }
  }
  return pairs;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  require(out.good(), ErrorCategory::io, "cannot open for writing: " + path.string());
  out.precision(17);
  for (const auto& e : entries) {
    out << e.image.string() << ' ' << e.subject_id;
    for (Eigen::Index i = 0; i < e.landmarks.cols(); ++i) out << ' ' << e.landmarks(0, i) << ' ' << e.landmarks(1, i);
    out << '\n';
  }
  require(out.good(), ErrorCategory::io, "write failed: " + path.string());
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCategory::io, "cannot open manifest: " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  int line_no = 0;
  Eigen::Index expected = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[line.find_first_not_of(" \t")] == '#') continue;
    std::istringstream ss(line);
    ManifestEntry e;
    std::string image;
    ss >> image >> e.subject_id;
    std::vector<double> values;
    double v;
    while (ss >> v) values.push_back(v);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    require(!e.subject_id.empty() && ss.eof(), ErrorCategory::format, where + ": malformed manifest line");
    require(!values.empty() && values.size() % 2 == 0, ErrorCategory::format,
            where + ": expected an even number of landmark coordinates");
    const auto count = static_cast<Eigen::Index>(values.size() / 2);
    require(expected < 0 || count == expected, ErrorCategory::format, where + ": landmark count differs");
    expected = count;
    e.image = image;
    if (e.image.is_relative()) e.image = path.parent_path() / e.image;
    e.landmarks = Eigen::Map<const Points2D>(values.data(), 2, count);
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_pair_store(const std::filesystem::path& path, const std::vector<std::string>& image_paths,
                      const std::vector<GuessTruthPair>& pairs) {
  io::BinaryWriter w(path);
  w.magic("BTGP");
  w.put<std::uint32_t>(1);
  const std::uint32_t nexp = pairs.empty() ? 0 : static_cast<std::uint32_t>(pairs.front().truth.expr.size());
  const std::uint32_t nl = pairs.empty() ? 0 : static_cast<std::uint32_t>(pairs.front().truth.landmark_count());
  w.put<std::uint32_t>(nexp);
  w.put<std::uint32_t>(nl);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(pairs.size()));
  for (const auto& p : pairs) {
    require(p.image < image_paths.size(), ErrorCategory::invalid_input, "pair image index out of range");
    require(p.truth.expr.size() == nexp && p.guess.expr.size() == nexp && p.truth.landmark_count() == int(nl) &&
                p.guess.landmark_count() == int(nl),
            ErrorCategory::dimension_mismatch, "pairs have inconsistent dimensions");
    w.string(image_paths[p.image]);
    const VectorX g = p.guess.to_vector(), t = p.truth.to_vector();
    w.put_array(g.data(), static_cast<std::size_t>(g.size()));
    w.put_array(t.data(), static_cast<std::size_t>(t.size()));
  }
  w.finish();
}

std::vector<GuessTruthPair> read_pair_store(const std::filesystem::path& path, std::vector<std::string>& image_paths) {
  io::BinaryReader r(path);
  r.expect_magic("BTGP");
  require(r.get<std::uint32_t>() == 1, ErrorCategory::format, path.string() + ": unsupported pair store version");
  const int nexp = static_cast<int>(r.get<std::uint32_t>());
  const int nl = static_cast<int>(r.get<std::uint32_t>());
  const std::uint32_t count = r.get<std::uint32_t>();
  image_paths.clear();
  std::map<std::string, std::size_t> index;
  std::vector<GuessTruthPair> pairs;
  pairs.reserve(count);
  const int dim = 6 + nexp + 2 * nl;
  for (std::uint32_t k = 0; k < count; ++k) {
    GuessTruthPair p;
    const std::string image = r.string();
    auto it = index.find(image);
    if (it == index.end()) {
      it = index.emplace(image, image_paths.size()).first;
      image_paths.push_back(image);
    }
    p.image = it->second;
    VectorX g(dim), t(dim);
    r.get_array(g.data(), static_cast<std::size_t>(dim));
    r.get_array(t.data(), static_cast<std::size_t>(dim));
    p.guess = ShapeParams::from_vector(g, nexp, nl);
    p.truth = ShapeParams::from_vector(t, nexp, nl);
    pairs.push_back(std::move(p));
  }
  require(r.at_end(), ErrorCategory::format, path.string() + ": trailing bytes");
  return pairs;
}

}  // namespace facetrack
