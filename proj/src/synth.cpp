#include "facetrack/synth.hpp"
#include "facetrack/raster.hpp"
#include "facetrack/rotation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace facetrack {

namespace {

constexpr double kHalfWidth = 0.075;
constexpr double kHalfHeight = 0.095;
constexpr double kDepth = 0.07;
constexpr double kIdentityModeRms = 0.004;

double gauss2(double x, double y, double cx, double cy, double sx, double sy) {
  const double dx = (x - cx) / sx, dy = (y - cy) / sy;
  return std::exp(-0.5 * (dx * dx + dy * dy));
}

std::pair<int, int> grid_shape(int vertices) {
  int best_rows = 0, best_cols = 0;
  double best = std::numeric_limits<double>::infinity();
  for (int cols = 4; cols * 4 <= vertices; ++cols) {
    if (vertices % cols != 0) continue;
    const int rows = vertices / cols;
    if (rows < 4) continue;
    const double score = std::abs(static_cast<double>(rows) / cols - 1.2);
    if (score < best) {
      best = score;
      best_rows = rows;
      best_cols = cols;
    }
  }
  require(best_rows > 0, ErrorCategory::invalid_input,
          "rig vertex count must factor into a grid with both sides >= 4");
  return {best_rows, best_cols};
}

// Named landmark sites on the undeformed face, (x, y) in meters, y down.
const std::vector<Vec2>& named_landmark_sites() {
  static const std::vector<Vec2> sites = {
      {-0.050, -0.045}, {-0.018, -0.048}, {0.018, -0.048}, {0.050, -0.045},  // brows
      {-0.045, -0.025}, {-0.018, -0.025}, {0.018, -0.025}, {0.045, -0.025},  // eye corners
      {0.000, 0.010},                                                        // nose tip
      {-0.025, 0.045},  {0.000, 0.037},   {0.025, 0.045},  {0.000, 0.055},   // mouth
      {0.000, 0.085},                                                        // chin
      {-0.065, 0.045},  {0.065, 0.045},                                      // jaw
  };
  return sites;
}

VectorX flatten(const VertexArray& v) { return Eigen::Map<const VectorX>(v.data(), v.size()); }
VertexArray unflatten(const VectorX& f) { return Eigen::Map<const VertexArray>(f.data(), 3, f.size() / 3); }

// Orthonormal basis of the six rigid motions of `mesh` (flattened).
MatrixX rigid_motion_basis(const VertexArray& mesh) {
  const Vec3 centroid = mesh.rowwise().mean();
  MatrixX basis(mesh.size(), 6);
  for (int a = 0; a < 3; ++a) {
    VertexArray t = VertexArray::Zero(3, mesh.cols());
    t.row(a).setOnes();
    basis.col(a) = flatten(t);
    VertexArray r(3, mesh.cols());
    const Vec3 axis = Vec3::Unit(a);
    for (Eigen::Index v = 0; v < mesh.cols(); ++v) r.col(v) = axis.cross(Vec3(mesh.col(v)) - centroid);
    basis.col(3 + a) = flatten(r);
  }
  for (int c = 0; c < 6; ++c) {
    for (int k = 0; k < c; ++k) basis.col(c) -= basis.col(k).dot(basis.col(c)) * basis.col(k);
    basis.col(c).normalize();
  }
  return basis;
}

}  // namespace

VectorX SyntheticRig::random_identity(std::mt19937_64& rng, double spread) const {
  std::normal_distribution<double> n(0.0, spread);
  VectorX w = mean_identity(core.dims().identities);
  for (int i = 1; i < w.size(); ++i) w[i] = n(rng);
  return w;
}

VectorX random_expression(std::mt19937_64& rng, int count, double activity, double max_weight) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  VectorX e = VectorX::Zero(count);
  for (int j = 0; j < count; ++j) {
    if (u(rng) < activity) e[j] = max_weight * u(rng);
  }
  return e;
}

SyntheticRig gen_rig(const RigDims& dims, std::uint64_t seed) {
  require(dims.identities >= 1 && dims.expressions >= 1, ErrorCategory::invalid_input, "rig dims must be >= 1");
  require(dims.landmarks >= 1 && dims.landmarks <= dims.vertices, ErrorCategory::invalid_input,
          "landmark count must be in [1, N_v]");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  SyntheticRig rig;
  const auto [rows, cols] = grid_shape(dims.vertices);
  rig.grid_rows = rows;
  rig.grid_cols = cols;
  const int nv = dims.vertices;

  // Undeformed face-like surface on a square-to-disc mapped grid.
  VertexArray base(3, nv);
  for (int a = 0; a < rows; ++a) {
    for (int b = 0; b < cols; ++b) {
      const double u = -1.0 + 2.0 * b / (cols - 1);
      const double v = -1.0 + 2.0 * a / (rows - 1);
      const double x = kHalfWidth * u * std::sqrt(1.0 - 0.5 * v * v);
      const double y = kHalfHeight * v * std::sqrt(1.0 - 0.5 * u * u);
      const double rho2 = (x / kHalfWidth) * (x / kHalfWidth) + (y / kHalfHeight) * (y / kHalfHeight);
      double z = -kDepth * std::sqrt(std::max(0.0, 1.0 - 0.85 * rho2));
      z -= 0.022 * gauss2(x, y, 0.0, 0.0, 0.011, 0.024);           // nose
      z += 0.006 * gauss2(x, y, -0.032, -0.025, 0.012, 0.010);     // eye sockets
      z += 0.006 * gauss2(x, y, 0.032, -0.025, 0.012, 0.010);
      z -= 0.004 * gauss2(x, y, 0.0, -0.043, 0.05, 0.008);         // brow ridge
      z -= 0.006 * gauss2(x, y, 0.0, 0.080, 0.016, 0.014);         // chin
      z -= 0.004 * gauss2(x, y, 0.0, 0.045, 0.020, 0.008);         // lips
      base.col(a * cols + b) = Vec3(x, y, z);
    }
  }
  const VertexArray reference = base;  // undeformed coordinates for region lookups

  for (int a = 0; a + 1 < rows; ++a) {
    for (int b = 0; b + 1 < cols; ++b) {
      const int v00 = a * cols + b, v01 = v00 + 1, v10 = v00 + cols, v11 = v10 + 1;
      // Winding gives normals pointing toward -z, i.e. out of the face.
      rig.topology.triangles.push_back({v00, v10, v01});
      rig.topology.triangles.push_back({v01, v10, v11});
    }
  }

  // Landmarks: nearest unused vertex to each named site, then a stride fill.
  std::vector<bool> used(nv, false);
  const auto& sites = named_landmark_sites();
  for (int l = 0; l < std::min<int>(dims.landmarks, static_cast<int>(sites.size())); ++l) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int v = 0; v < nv; ++v) {
      if (used[v]) continue;
      const double d = (reference.col(v).head<2>() - sites[l]).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = v;
      }
    }
    used[best] = true;
    rig.topology.landmark_vertices.push_back(best);
  }
  if (dims.landmarks > static_cast<int>(sites.size())) {
    const int remaining = dims.landmarks - static_cast<int>(sites.size());
    const int free_count = nv - static_cast<int>(sites.size());
    const double stride = static_cast<double>(free_count) / remaining;
    std::vector<int> free_vertices;
    for (int v = 0; v < nv; ++v) {
      if (!used[v]) free_vertices.push_back(v);
    }
    for (int k = 0; k < remaining; ++k) {
      rig.topology.landmark_vertices.push_back(free_vertices[static_cast<std::size_t>(k * stride)]);
    }
  }

  const Vec3 centroid = base.rowwise().mean();
  base.colwise() -= centroid;

  // Expression displacement fields, localized by region.
  const int ne = dims.expressions;
  std::vector<VertexArray> expr(ne, VertexArray::Zero(3, nv));
  for (int j = 1; j < ne; ++j) {
    VertexArray& f = expr[j];
    for (int v = 0; v < nv; ++v) {
      const double x = reference(0, v), y = reference(1, v);
      Vec3 d = Vec3::Zero();
      switch (j) {
        case 1: {  // jaw open
          const double s = 1.0 / (1.0 + std::exp(-(y - 0.047) / 0.004));
          d = s * Vec3(0.0, 0.012, 0.004) * gauss2(x, 0.0, 0.0, 0.0, 0.05, 1.0);
          break;
        }
        case 2: d = gauss2(x, y, -0.025, 0.045, 0.014, 0.014) * Vec3(-0.005, -0.006, -0.002); break;
        case 3: d = gauss2(x, y, 0.025, 0.045, 0.014, 0.014) * Vec3(0.005, -0.006, -0.002); break;
        case 4: d = gauss2(x, y, -0.035, -0.046, 0.020, 0.012) * Vec3(0.0, -0.008, 0.0); break;
        case 5: d = gauss2(x, y, 0.035, -0.046, 0.020, 0.012) * Vec3(0.0, -0.008, 0.0); break;
        case 6:
          d = gauss2(x, y, 0.0, -0.047, 0.025, 0.010) * Vec3(-x * 0.12, 0.004, -0.001);
          break;
        case 7: d = gauss2(x, y, -0.048, 0.025, 0.018, 0.020) * Vec3(-0.004, 0.0, -0.010); break;
        case 8: d = gauss2(x, y, 0.048, 0.025, 0.018, 0.020) * Vec3(0.004, 0.0, -0.010); break;
        case 9: d = gauss2(x, y, 0.0, 0.046, 0.022, 0.014) * Vec3(-x * 0.3, 0.0, -0.010); break;
        case 10: {
          const double side = x < 0.0 ? -1.0 : 1.0;
          d = gauss2(std::abs(x), y, 0.025, 0.046, 0.014, 0.012) * Vec3(0.008 * side, 0.003, 0.0);
          break;
        }
        case 11: d = gauss2(x, y, 0.0, 0.030, 0.016, 0.008) * Vec3(0.0, -0.005, -0.002); break;
        default: break;
      }
      f.col(v) = d;
    }
    if (j > 11) {
      // Additional random localized modes beyond the named set.
      const double cx = 0.05 * (2.0 * uniform(rng) - 1.0);
      const double cy = 0.07 * (2.0 * uniform(rng) - 1.0);
      const Vec3 dir(0.006 * normal(rng), 0.006 * normal(rng), 0.008 * normal(rng));
      for (int v = 0; v < nv; ++v) f.col(v) = gauss2(reference(0, v), reference(1, v), cx, cy, 0.02, 0.02) * dir;
    }
  }

  // Identity modes: smooth random fields, free of rigid motion, orthonormal.
  const int nid = dims.identities;
  const MatrixX rigid = rigid_motion_basis(base);
  std::vector<VectorX> modes;
  for (int i = 1; i < nid; ++i) {
    double coeff[3][3][3];
    for (auto& c : coeff)
      for (auto& p : c)
        for (double& q : p) q = normal(rng);
    VertexArray f(3, nv);
    for (int v = 0; v < nv; ++v) {
      const double px = (reference(0, v) / kHalfWidth + 1.0) * 0.5;
      const double py = (reference(1, v) / kHalfHeight + 1.0) * 0.5;
      for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (int p = 0; p < 3; ++p)
          for (int q = 0; q < 3; ++q)
            s += coeff[c][p][q] * std::cos(std::numbers::pi * p * px) * std::cos(std::numbers::pi * q * py) /
                 (1.0 + p + q);
        f(c, v) = (c == 2 ? 1.5 : 1.0) * s;
      }
    }
    VectorX m = flatten(f);
    m -= rigid * (rigid.transpose() * m);
    for (const auto& prev : modes) m -= prev.dot(m) * prev;
    m.normalize();
    modes.push_back(m);
  }
  std::vector<double> kappa(nid, 0.0);
  for (int i = 1; i < nid; ++i) kappa[i] = 0.3 * uniform(rng) - 0.15;

  rig.truth_meshes.resize(static_cast<std::size_t>(nid) * ne);
  for (int i = 0; i < nid; ++i) {
    for (int j = 0; j < ne; ++j) {
      VertexArray mesh;
      if (i == 0) {
        mesh = base + expr[j];
      } else {
        // Unit mode scaled so its RMS per-vertex displacement is kIdentityModeRms.
        mesh = unflatten(modes[i - 1]) * (kIdentityModeRms * std::sqrt(static_cast<double>(nv))) + kappa[i] * expr[j];
      }
      rig.truth_meshes[static_cast<std::size_t>(i) * ne + j] = std::move(mesh);
    }
  }

  std::vector<double> data(static_cast<std::size_t>(3) * nv * nid * ne);
  for (int row = 0; row < 3 * nv; ++row) {
    for (int i = 0; i < nid; ++i) {
      for (int j = 0; j < ne; ++j) {
        data[(static_cast<std::size_t>(row) * nid + i) * ne + j] =
            rig.truth_meshes[static_cast<std::size_t>(i) * ne + j](row % 3, row / 3);
      }
    }
  }
  std::vector<VectorX> basis(ne);
  for (int j = 0; j < ne; ++j) basis[j] = VectorX::Unit(ne, j);
  rig.core = ReducedCoreTensor({nv, nid, ne}, std::move(data), std::move(basis));

  // Albedo: skin with darker eyes, brows, nostrils, tinted lips, speckle.
  rig.albedo.resize(3, nv);
  for (int v = 0; v < nv; ++v) {
    const double x = reference(0, v), y = reference(1, v);
    Vec3 c(0.80, 0.62, 0.52);
    double dark = 1.0;
    dark *= 1.0 - 0.70 * (gauss2(x, y, -0.032, -0.025, 0.010, 0.006) + gauss2(x, y, 0.032, -0.025, 0.010, 0.006));
    dark *= 1.0 - 0.60 * (gauss2(x, y, -0.034, -0.046, 0.015, 0.005) + gauss2(x, y, 0.034, -0.046, 0.015, 0.005));
    dark *= 1.0 - 0.45 * (gauss2(x, y, -0.009, 0.018, 0.004, 0.004) + gauss2(x, y, 0.009, 0.018, 0.004, 0.004));
    const double lips = gauss2(x, y, 0.0, 0.046, 0.021, 0.008);
    c = (1.0 - lips) * c + lips * Vec3(0.62, 0.28, 0.28);
    c *= dark * (1.0 + 0.08 * std::sin(90.0 * x) * std::cos(70.0 * y)) * (1.0 + 0.05 * normal(rng));
    rig.albedo.col(v) = c.cwiseMax(0.0).cwiseMin(1.0);
  }
  return rig;
}

DepthMap apply_depth_noise(const DepthMap& clean, const std::vector<double>& incidence_cos, const NoiseModel& noise,
                           std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const double cos_limit = std::cos(noise.dropout_angle_deg * std::numbers::pi / 180.0);
  DepthMap out(clean.width, clean.height);
  for (int y = 0; y < clean.height; ++y) {
    for (int x = 0; x < clean.width; ++x) {
      const std::size_t idx = clean.index(x, y);
      if (!clean.valid(idx)) continue;
      int sx = x, sy = y;
      if (noise.lateral_sigma_px > 0.0) {
        sx = std::clamp(x + static_cast<int>(std::lround(noise.lateral_sigma_px * normal(rng))), 0, clean.width - 1);
        sy = std::clamp(y + static_cast<int>(std::lround(noise.lateral_sigma_px * normal(rng))), 0, clean.height - 1);
      }
      double z = clean.at(sx, sy);
      if (z <= 0.0) continue;
      z += noise.axial_sigma_m(z) * normal(rng);
      const double q = noise.quantization_step_m(z);
      if (q > 0.0) z = std::round(z / q) * q;
      if (noise.dropout_probability > 0.0 && !incidence_cos.empty() && incidence_cos[idx] < cos_limit &&
          uniform(rng) < noise.dropout_probability) {
        continue;
      }
      out.values[idx] = std::max(z, 0.0);
    }
  }
  return out;
}

RenderedFrame render_rgbd(const SyntheticRig& rig, const VectorX& w_id, const RigidPose& pose, const VectorX& e,
                          const CameraIntrinsics& camera, const Lighting& lighting, const NoiseModel* noise,
                          std::uint64_t noise_seed) {
  const BlendshapeSet shapes = build_blendshapes(rig.core, w_id);
  const VertexArray posed = transform(blend(shapes, e), pose);
  const RasterResult raster = rasterize(posed, rig.topology, camera);
  const VertexArray normals = vertex_normals(posed, rig.topology);
  const Vec3 light = lighting.direction.normalized();

  VertexArray shade(3, posed.cols());
  for (Eigen::Index v = 0; v < posed.cols(); ++v) {
    const double lambert = std::max(0.0, -normals.col(v).dot(light));
    shade.col(v) = rig.albedo.col(v) * (lighting.ambient + lighting.diffuse * lambert);
  }

  RenderedFrame frame;
  frame.color = ColorImage(camera.width, camera.height);
  frame.clean_depth = raster.depth;
  std::vector<double> incidence(raster.triangle.size(), 1.0);
  for (int y = 0; y < camera.height; ++y) {
    for (int x = 0; x < camera.width; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * camera.width + x;
      Vec3 c;
      const int t = raster.triangle[idx];
      if (t < 0) {
        c = lighting.background * (0.9 + 0.2 * y / camera.height);
      } else {
        const auto& tri = rig.topology.triangles[t];
        const auto& b = raster.barycentric[idx];
        c = b[0] * shade.col(tri[0]) + b[1] * shade.col(tri[1]) + b[2] * shade.col(tri[2]);
        const Vec3 p0 = posed.col(tri[0]);
        const Vec3 n = (Vec3(posed.col(tri[1])) - p0).cross(Vec3(posed.col(tri[2])) - p0).normalized();
        const Vec3 ray = camera.backproject(x, y, 1.0).normalized();
        incidence[idx] = std::abs(n.dot(ray));
      }
      auto* px = frame.color.pixel(x, y);
      for (int k = 0; k < 3; ++k) px[k] = static_cast<std::uint8_t>(std::clamp(std::lround(255.0 * c[k]), 0L, 255L));
    }
  }
  frame.depth = noise ? apply_depth_noise(raster.depth, incidence, *noise, noise_seed) : raster.depth;

  const auto& lm = rig.topology.landmark_vertices;
  frame.landmarks.resize(2, static_cast<Eigen::Index>(lm.size()));
  for (std::size_t i = 0; i < lm.size(); ++i) frame.landmarks.col(static_cast<Eigen::Index>(i)) = project(camera, posed.col(lm[i]));
  return frame;
}

SequenceTruth make_trajectory(const SequenceSpec& spec, const SyntheticRig& rig) {
  require(spec.frames >= 1, ErrorCategory::invalid_input, "sequence needs at least one frame");
  require(spec.distance > 0.0, ErrorCategory::invalid_input, "distance must be positive");
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  SequenceTruth truth;
  truth.identity = rig.random_identity(rng, spec.identity_spread);

  const double two_pi = 2.0 * std::numbers::pi;
  const double deg = std::numbers::pi / 180.0;
  double phase[6];
  for (double& p : phase) p = two_pi * uniform(rng);
  const int ne = rig.core.dims().expressions - 1;
  std::vector<double> period(ne), expr_phase(ne), amp(ne);
  for (int j = 0; j < ne; ++j) {
    period[j] = 40.0 + 80.0 * uniform(rng);
    expr_phase[j] = two_pi * uniform(rng);
    amp[j] = uniform(rng) < 0.6 ? spec.expression_amplitude * (0.5 + 0.5 * uniform(rng)) : 0.0;
  }

  for (int t = 0; t < spec.frames; ++t) {
    const double yaw = spec.yaw_amplitude_deg * deg * std::sin(two_pi * t / 90.0 + phase[0]);
    const double pitch = spec.pitch_amplitude_deg * deg * std::sin(two_pi * t / 70.0 + phase[1]);
    const double roll = 5.0 * deg * std::sin(two_pi * t / 110.0 + phase[2]);
    const Mat3 r = rotation_from_axis_angle(Vec3(0, yaw, 0)) * rotation_from_axis_angle(Vec3(pitch, 0, 0)) *
                   rotation_from_axis_angle(Vec3(0, 0, roll));
    RigidPose pose;
    pose.rotation = axis_angle_from_rotation(r);
    pose.translation = Vec3(spec.translation_amplitude * std::sin(two_pi * t / 80.0 + phase[3]),
                            spec.translation_amplitude * std::sin(two_pi * t / 95.0 + phase[4]),
                            spec.distance + spec.translation_amplitude * std::sin(two_pi * t / 60.0 + phase[5]));
    truth.poses.push_back(pose);
    VectorX e(ne);
    for (int j = 0; j < ne; ++j) {
      const double s = std::max(0.0, std::sin(two_pi * t / period[j] + expr_phase[j]));
      e[j] = std::clamp(amp[j] * s * s, 0.0, 1.0);
    }
    truth.expressions.push_back(e);
  }
  return truth;
}

double frame_rmse(const Points2D& predicted, const Points2D& truth) {
  require(predicted.cols() == truth.cols() && truth.cols() > 0, ErrorCategory::dimension_mismatch,
          "landmark count mismatch");
  return std::sqrt((predicted - truth).colwise().squaredNorm().mean());
}

double eval_rmse(const std::vector<Points2D>& predicted, const std::vector<Points2D>& truth) {
  require(predicted.size() == truth.size() && !truth.empty(), ErrorCategory::dimension_mismatch,
          "frame count mismatch");
  double sum = 0.0;
  for (std::size_t f = 0; f < truth.size(); ++f) sum += frame_rmse(predicted[f], truth[f]);
  return sum / static_cast<double>(truth.size());
}

double eval_lost_fraction(const std::vector<double>& rmse, const std::vector<bool>& empty, double tau) {
  require(rmse.size() == empty.size(), ErrorCategory::dimension_mismatch, "frame count mismatch");
  if (rmse.empty()) return 0.0;
  std::size_t lost = 0;
  for (std::size_t f = 0; f < rmse.size(); ++f) {
    if (empty[f] || !(rmse[f] <= tau)) ++lost;
  }
  return static_cast<double>(lost) / static_cast<double>(rmse.size());
}

double eval_mae(const DepthMap& recovered, const DepthMap& truth, const std::vector<bool>& mask) {
  require(recovered.width == truth.width && recovered.height == truth.height && mask.size() == truth.size(),
          ErrorCategory::dimension_mismatch, "depth map size mismatch");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    sum += std::abs(recovered.values[i] - truth.values[i]);
    ++count;
  }
  return count ? 1000.0 * sum / static_cast<double>(count) : 0.0;
}

}  // namespace facetrack
