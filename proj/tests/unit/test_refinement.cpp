#include "facetrack/raster.hpp"
#include "facetrack/refinement.hpp"
#include "facetrack/rotation.hpp"
#include "facetrack/synth.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace facetrack;

namespace {

const SyntheticRig& rig() {
  static const SyntheticRig r = gen_rig(RigDims{}, 7);
  return r;
}

struct Scene {
  VectorX w_id;
  RigidPose pose;
  VectorX expr;
  ObservedFrame frame;
  Points2D landmarks;
};

Scene make_scene(double distance, const NoiseModel* noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Scene s;
  s.w_id = rig().random_identity(rng);
  s.pose.rotation = Vec3(0.1, -0.25, 0.05);
  s.pose.translation = Vec3(0.01, -0.02, distance);
  s.expr = random_expression(rng, rig().core.dims().expressions - 1, 0.4, 0.6);
  const CameraIntrinsics camera;
  RenderedFrame f = render_rgbd(rig(), s.w_id, s.pose, s.expr, camera, Lighting{}, noise, seed);
  s.landmarks = f.landmarks;
  s.frame = ObservedFrame::make(std::move(f.color), std::move(f.depth), camera);
  return s;
}

ShapeParams params_of(const Scene& s) {
  ShapeParams p(static_cast<int>(s.expr.size()), rig().topology.landmark_count());
  p.pose = s.pose;
  p.expr = s.expr;
  return p;
}

// Replaces estimated cloud normals by the normals of the rasterized triangles.
void use_surface_normals(Scene& s, const TrackerState& state) {
  const CameraIntrinsics camera;
  ShapeParams p(static_cast<int>(s.expr.size()), rig().topology.landmark_count());
  p.pose = s.pose;
  p.expr = s.expr;
  const VertexArray mesh = state.posed_mesh(p.theta());
  const RasterResult r = rasterize(mesh, state.topology, camera);
  for (std::size_t i = 0; i < s.frame.cloud.size(); ++i) {
    if (r.triangle[i] < 0 || !s.frame.cloud.normal_valid[i]) continue;
    const auto& t = state.topology.triangles[r.triangle[i]];
    Vec3 n = (mesh.col(t[1]) - mesh.col(t[0])).cross(mesh.col(t[2]) - mesh.col(t[0])).normalized();
    if (n.dot(s.frame.cloud.points[i]) > 0.0) n = -n;
    s.frame.cloud.normals[i] = n;
  }
}

double relative_error(const VectorX& a, const VectorX& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-12});
}

template <typename F>
VectorX central_gradient(const F& f, const VectorX& x, const VectorX& h) {
  VectorX g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    VectorX a = x, b = x;
    a[i] += h[i];
    b[i] -= h[i];
    g[i] = (f(a) - f(b)) / (2.0 * h[i]);
  }
  return g;
}

VectorX step_sizes(int nexp) {
  VectorX h(6 + nexp);
  h.head<3>().setConstant(1e-6);
  h.segment<3>(3).setConstant(1e-7);
  h.tail(nexp).setConstant(1e-6);
  return h;
}

}  // namespace

TEST_CASE("backprojection inverts projection and recovers plane normals") {
  const CameraIntrinsics camera;
  DepthMap flat(64, 48);
  for (auto& v : flat.values) v = 1.0;
  const PointCloud c = backproject_depth(flat, camera);
  CHECK(c.valid_count() == flat.size());
  for (int y = 2; y < 46; y += 7) {
    for (int x = 2; x < 62; x += 9) {
      const std::size_t i = flat.index(x, y);
      CHECK((camera.project(c.points[i]) - Vec2(x, y)).norm() < 1e-9);
      CHECK(std::abs(c.points[i].z() - 1.0) < 1e-12);
      REQUIRE(c.normal_valid[i]);
      CHECK((c.normals[i] - Vec3(0, 0, -1)).norm() < 1e-6);
    }
  }

  DepthMap centered(640, 480);
  centered.at(320, 240) = 1.0;
  const PointCloud single = backproject_depth(centered, camera);
  CHECK(single.points[centered.index(320, 240)].x() == doctest::Approx(0.5 / 525.0));
  CHECK_FALSE(single.normal_valid[centered.index(320, 240)]);

  // Plane z = 1 + x tilted by 45 degrees about the y axis.
  DepthMap tilted(640, 480);
  for (int y = 200; y < 280; ++y) {
    for (int x = 280; x < 360; ++x) {
      const double a = (x - camera.cx) / camera.fx;
      tilted.at(x, y) = 1.0 / (1.0 - a);
    }
  }
  const PointCloud t = backproject_depth(tilted, camera);
  const Vec3 expected = Vec3(1.0, 0.0, -1.0).normalized();
  const std::size_t i = tilted.index(320, 240);
  REQUIRE(t.normal_valid[i]);
  CHECK(std::acos(std::clamp(t.normals[i].dot(expected), -1.0, 1.0)) < 1e-3);
}

TEST_CASE("sample_vertices and the correspondence gates") {
  const auto s = sample_vertices(2500, 1000);
  CHECK(s.size() <= 1000);
  CHECK(s.front() == 0);
  CHECK(s[1] - s[0] == 3);
  CHECK(sample_vertices(600, 1000).size() == 600);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<Vec3> pts, normals;
  for (int k = 0; k < 200; ++k) {
    pts.emplace_back(0.3 * n(rng), 0.3 * n(rng), 1.5 + 0.1 * n(rng));
    normals.push_back(Vec3(0.2 * n(rng), 0.2 * n(rng), -1.0).normalized());
  }
  const PointCloud cloud = PointCloud::from_points(pts, normals);
  const KdTree tree = build_cloud_tree(cloud);
  VertexArray posed(3, 200), vn(3, 200);
  std::vector<int> ids(200);
  for (int k = 0; k < 200; ++k) {
    posed.col(k) = pts[k];
    vn.col(k) = normals[k];
    ids[k] = 10 + k;
  }
  const CorrespondenceConfig cfg;
  const CorrespondenceSet same = find_correspondences(posed, vn, ids, cloud, tree, cfg);
  REQUIRE(same.pairs.size() == 200);
  for (const auto& c : same.pairs) {
    CHECK(c.point == c.sample);
    CHECK(c.vertex == 10 + c.sample);
  }

  VertexArray far = posed;
  far.row(2).array() += 1.0;
  const CorrespondenceSet none = find_correspondences(far, vn, ids, cloud, tree, cfg);
  CHECK(none.pairs.empty());
  CHECK(none.two_d_only);

  VertexArray noisy = posed;
  for (int k = 0; k < 200; ++k) noisy.col(k) += Vec3(0.02 * n(rng), 0.02 * n(rng), 0.02 * n(rng));
  std::size_t previous = 201;
  for (double gate : {0.1, 0.05, 0.03, 0.02, 0.01, 0.005}) {
    CorrespondenceConfig g = cfg;
    g.max_distance = gate;
    const std::size_t count = find_correspondences(noisy, vn, ids, cloud, tree, g).pairs.size();
    CHECK(count <= previous);
    previous = count;
  }

  VertexArray flipped = -vn;
  CHECK(find_correspondences(posed, flipped, ids, cloud, tree, cfg).pairs.empty());
}

TEST_CASE("k-d tree nearest matches brute force") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> pts(500);
  for (auto& p : pts) p = Vec3(u(rng), u(rng), u(rng));
  std::vector<int> idx;
  for (int i = 0; i < 500; i += 2) idx.push_back(i);
  const KdTree tree(pts, idx);
  for (int q = 0; q < 100; ++q) {
    const Vec3 query(u(rng), u(rng), u(rng));
    int best = -1;
    double bd = 0.3;
    for (int i : idx) {
      const double d = (pts[i] - query).norm();
      if (d < bd) {
        bd = d;
        best = i;
      }
    }
    double d = -1.0;
    CHECK(tree.nearest(query, 0.3, &d) == best);
    if (best >= 0) CHECK(d == doctest::Approx(bd));
  }
}

TEST_CASE("energy values match their definitions") {
  const Scene s = make_scene(1.5, nullptr, 21);
  const CameraIntrinsics camera;
  const RefinementConfig cfg;
  const TrackerState state = make_tracker_state(rig().core, rig().topology, s.w_id, cfg);
  const ShapeParams p = params_of(s);
  const VectorX theta = p.theta();

  CHECK(energy_e2d(theta, s.landmarks, state.landmark_basis, camera).value < 1e-18);
  Points2D shifted = s.landmarks;
  shifted.row(0).array() += 0.6;
  shifted.row(1).array() -= 0.8;
  CHECK(energy_e2d(theta, shifted, state.landmark_basis, camera).value == doctest::Approx(1.0).epsilon(1e-9));

  // Single pair displaced along the normal.
  const ExpressionBasis& b = state.sample_basis;
  const Mat3 r = rotation_from_axis_angle(s.pose.rotation);
  const Vec3 sk = r * b.vertex(4, s.expr) + s.pose.translation;
  const Vec3 nk = Vec3(0.3, -0.2, -1.0).normalized();
  const PointCloud one = PointCloud::from_points({sk - 0.004 * nk}, {nk});
  CorrespondenceSet corr;
  corr.pairs.push_back({4, b.vertices[4], 0, 1.0});
  CHECK(energy_e3d_point_plane(theta, corr, one, b).value == doctest::Approx(0.004 * 0.004).epsilon(1e-9));
  CHECK(energy_e3d_point_plane(theta, CorrespondenceSet{}, one, b).flagged);

  // Random pairs against a scalar loop.
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 0.01);
  std::vector<Vec3> pts, nrm;
  CorrespondenceSet many;
  for (int k = 0; k < 50; ++k) {
    const int v = (k * 7) % b.size();
    const Vec3 sv = r * b.vertex(v, s.expr) + s.pose.translation;
    pts.push_back(sv + Vec3(n(rng), n(rng), n(rng)));
    nrm.push_back(Vec3(n(rng), n(rng), -0.05).normalized());
    many.pairs.push_back({v, b.vertices[v], k, 1.0});
  }
  const PointCloud cloud = PointCloud::from_points(pts, nrm);
  double oracle = 0.0;
  for (int k = 0; k < 50; ++k) {
    const int v = many.pairs[k].sample;
    const Vec3 sv = r * b.vertex(v, s.expr) + s.pose.translation;
    const double d = (sv - cloud.points[k]).dot(cloud.normals[k]);
    oracle += d * d;
  }
  oracle /= 50.0;
  CHECK(std::abs(energy_e3d_point_plane(theta, many, cloud, b).value - oracle) < 1e-12 * std::max(oracle, 1e-12) + 1e-18);

  // Uniform motion at the target gives zero regularization.
  const int dim = static_cast<int>(theta.size());
  const VectorX step = VectorX::Constant(dim, 0.01);
  VectorX alpha = VectorX::Constant(dim, 3.0), beta = VectorX::Constant(dim, 5.0);
  CHECK(energy_ereg(theta, theta, theta - step, theta - 2.0 * step, alpha, beta).value == doctest::Approx(0.0));
  CHECK(energy_ereg(theta + step, theta, theta, theta, VectorX::Zero(dim), VectorX::Zero(dim)).value == 0.0);
}

TEST_CASE("energy gradients match central differences") {
  const Scene s = make_scene(1.8, nullptr, 22);
  const CameraIntrinsics camera;
  const RefinementConfig cfg;
  const TrackerState state = make_tracker_state(rig().core, rig().topology, s.w_id, cfg);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const int nexp = static_cast<int>(s.expr.size());
  const VectorX h = step_sizes(nexp);

  for (int trial = 0; trial < 5; ++trial) {
    VectorX theta = params_of(s).theta();
    for (int k = 0; k < 3; ++k) theta[k] += 0.05 * u(rng);
    for (int k = 3; k < 6; ++k) theta[k] += 0.01 * u(rng);
    for (int k = 0; k < nexp; ++k) theta[6 + k] = 0.2 + 0.6 * std::abs(u(rng));

    const auto e2 = [&](const VectorX& x) { return energy_e2d(x, s.landmarks, state.landmark_basis, camera).value; };
    CHECK(relative_error(energy_e2d(theta, s.landmarks, state.landmark_basis, camera).gradient,
                         central_gradient(e2, theta, h)) < 1e-4);

    const CorrespondenceSet corr = [&] {
      const VertexArray mesh = state.posed_mesh(theta);
      const VertexArray normals = vertex_normals(mesh, state.topology);
      const auto& vs = state.sample_basis.vertices;
      VertexArray posed(3, static_cast<Eigen::Index>(vs.size())), vn(3, static_cast<Eigen::Index>(vs.size()));
      for (std::size_t k = 0; k < vs.size(); ++k) {
        posed.col(static_cast<Eigen::Index>(k)) = mesh.col(vs[k]);
        vn.col(static_cast<Eigen::Index>(k)) = normals.col(vs[k]);
      }
      return find_correspondences(posed, vn, vs, s.frame.cloud, s.frame.tree, cfg.correspondences);
    }();
    REQUIRE(corr.pairs.size() > 100);
    const auto e3 = [&](const VectorX& x) {
      return energy_e3d_point_plane(x, corr, s.frame.cloud, state.sample_basis).value;
    };
    CHECK(relative_error(energy_e3d_point_plane(theta, corr, s.frame.cloud, state.sample_basis).gradient,
                         central_gradient(e3, theta, h)) < 1e-4);

    VectorX alpha(theta.size()), beta(theta.size());
    block_regularizer(cfg.rigid, nexp, cfg.length_scale, alpha, beta);
    const VectorX target = params_of(s).theta();
    const VectorX prev = target + 0.01 * VectorX::Ones(theta.size());
    const VectorX prev2 = target - 0.02 * VectorX::Ones(theta.size());
    const auto er = [&](const VectorX& x) { return energy_ereg(x, target, prev, prev2, alpha, beta).value; };
    CHECK(relative_error(energy_ereg(theta, target, prev, prev2, alpha, beta).gradient,
                         central_gradient(er, theta, h)) < 1e-4);
  }
}

TEST_CASE("refine keeps the truth and recovers perturbed poses on noiseless frames") {
  Scene s = make_scene(1.5, nullptr, 23);
  const CameraIntrinsics camera;
  const RefinementConfig cfg;
  const TrackerState state = make_tracker_state(rig().core, rig().topology, s.w_id, cfg);
  const ShapeParams truth = params_of(s);

  SUBCASE("estimated normals") {
    const RefineResult r = refine(truth, s.frame, state, camera, cfg);
    CHECK((r.params.pose.rotation - s.pose.rotation).norm() < 1e-3);
    CHECK((r.params.pose.translation - s.pose.translation).norm() < 2e-4);
    CHECK(r.e3d < 1e-8);
    CHECK(r.total_final <= r.total_initial);

    ShapeParams pushed = truth;
    pushed.pose.translation.z() += 0.02;
    const RefineResult slid = refine(pushed, s.frame, state, camera, cfg);
    CHECK(std::abs(slid.params.pose.translation.z() - s.pose.translation.z()) < 2e-3);
    CHECK(slid.total_final <= slid.total_initial);
  }

  SUBCASE("surface normals") {
    use_surface_normals(s, state);
    const RefineResult at_truth = refine(truth, s.frame, state, camera, cfg);
    CHECK((at_truth.params.pose.rotation - s.pose.rotation).norm() < 1e-4);
    CHECK((at_truth.params.pose.translation - s.pose.translation).norm() < 1e-4);
    CHECK((at_truth.params.expr - s.expr).lpNorm<Eigen::Infinity>() < 1e-3);
    CHECK(at_truth.e3d < 1e-8);

    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 3; ++trial) {
      VectorX start = truth.theta();
      for (int k = 0; k < 3; ++k) start[k] += 0.01 * u(rng);
      for (int k = 3; k < 6; ++k) start[k] += 0.005 * u(rng);
      const RefineResult r = refine(truth, s.frame, state, camera, cfg, start);
      const VectorX& opt = r.optimized_theta;
      CHECK((opt.head<3>() - s.pose.rotation).norm() < 1e-4);
      CHECK((opt.segment<3>(3) - s.pose.translation).norm() < 1e-4);
      CHECK((r.params.pose.rotation - s.pose.rotation).norm() < 1e-4);
      CHECK((r.params.pose.translation - s.pose.translation).norm() < 1e-4);
      CHECK((r.params.expr.array() >= 0.0).all());
      CHECK((r.params.expr.array() <= 1.0).all());
    }
  }
}

TEST_CASE("refine is equivariant to a camera translation") {
  const Scene s = make_scene(1.5, nullptr, 24);
  const CameraIntrinsics camera;
  const RefinementConfig cfg;
  const TrackerState state = make_tracker_state(rig().core, rig().topology, s.w_id, cfg);
  const ShapeParams raw = params_of(s);
  VectorX start = raw.theta();
  start.head<3>() += Vec3(0.01, -0.02, 0.01);
  start.segment<3>(3) += Vec3(0.004, -0.003, 0.01);

  auto frame_at = [&](const Vec3& g) {
    const VertexArray mesh = state.posed_mesh(raw.theta());
    const VertexArray normals = vertex_normals(mesh, state.topology);
    std::vector<Vec3> pts, nrm;
    for (Eigen::Index k = 0; k < mesh.cols(); ++k) {
      pts.push_back(mesh.col(k) + g);
      nrm.push_back(normals.col(k));
    }
    ObservedFrame f;
    f.cloud = PointCloud::from_points(pts, nrm);
    f.tree = build_cloud_tree(f.cloud);
    return f;
  };
  const Vec3 g(0.01, -0.02, 0.05);
  const RefineResult a = refine(raw, frame_at(Vec3::Zero()), state, camera, cfg, start);
  ShapeParams moved = raw;
  moved.pose.translation += g;
  VectorX moved_start = start;
  moved_start.segment<3>(3) += g;
  const RefineResult b = refine(moved, frame_at(g), state, camera, cfg, moved_start);
  CHECK((b.params.pose.translation - a.params.pose.translation - g).norm() < 1e-6);
  CHECK((b.params.pose.rotation - a.params.pose.rotation).norm() < 1e-6);
}

TEST_CASE("3D term lowers the point-to-plane residual on noisy far frames") {
  NoiseModel noise;
  const CameraIntrinsics camera;
  RefinementConfig full;
  RefinementConfig flat = full;
  flat.rigid.omega_3d = 0.0;
  flat.expression.omega_3d = 0.0;
  std::mt19937_64 rng(31);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int k = 0; k < 3; ++k) {
    const Scene s = make_scene(2.0, &noise, 40 + k);
    const TrackerState state = make_tracker_state(rig().core, rig().topology, s.w_id, full);
    ShapeParams raw = params_of(s);
    raw.pose.translation += Vec3(0.005 * n(rng), 0.005 * n(rng), 0.03 * n(rng));
    raw.pose.rotation += Vec3(0.02 * n(rng), 0.02 * n(rng), 0.01 * n(rng));
    const RefineResult a = refine(raw, s.frame, state, camera, full);
    const RefineResult b = refine(raw, s.frame, state, camera, flat);
    CHECK(a.e3d < b.e3d);
  }
}

TEST_CASE("identity update descends and locks") {
  std::mt19937_64 rng(50);
  const CameraIntrinsics camera;
  const RefinementConfig cfg;
  const VectorX w_true = rig().random_identity(rng, 1.0);
  TrackerState state = make_tracker_state(rig().core, rig().topology, mean_identity(rig().core.dims().identities), cfg);
  const int nexp = rig().core.dims().expressions - 1;

  const VectorX gamma0 = rig().core.expression_vector(VectorX::Zero(nexp));
  CHECK((gamma0 - rig().core.exp_basis()[0]).norm() == 0.0);

  auto mesh_rms = [&](const VectorX& w) {
    const VertexArray a = contract(rig().core, w, gamma0);
    const VertexArray b = contract(rig().core, w_true, gamma0);
    return std::sqrt((a - b).colwise().squaredNorm().mean());
  };
  const double initial = mesh_rms(state.w_id);
  std::vector<double> steps;
  for (int frame = 0; frame < 12 && !state.identity_locked; ++frame) {
    RigidPose pose;
    pose.rotation = Vec3(0.05 * std::sin(frame), 0.3 * std::sin(0.5 * frame), 0.0);
    pose.translation = Vec3(0.0, 0.0, 1.5);
    const VectorX e = random_expression(rng, nexp, 0.3, 0.5);
    RenderedFrame f = render_rgbd(rig(), w_true, pose, e, camera, Lighting{}, nullptr, 0);
    const ObservedFrame obs = ObservedFrame::make(std::move(f.color), std::move(f.depth), camera);
    ShapeParams p(nexp, rig().topology.landmark_count());
    p.pose = pose;
    p.expr = e;
    p.displacements = project_landmarks(state.landmark_basis, pose, e, camera) - f.landmarks;
    const RefineResult r = refine(p, obs, state, camera, cfg);
    const IdentityUpdate up = update_identity(state, rig().core, obs, r.params.theta(), r.landmarks, camera, cfg);
    CHECK(up.objective_after <= up.objective_before);
    CHECK(up.w_id[0] == 1.0);
    steps.push_back(up.step);
  }
  CHECK(state.identity_locked);
  CHECK(state.identity_frames <= 10);
  CHECK(mesh_rms(state.w_id) < 0.5 * initial);
  CHECK(steps.back() < steps.front());
  IdentityUpdate again = update_identity(state, rig().core, ObservedFrame{}, VectorX::Zero(6 + nexp), Points2D(), camera, cfg);
  CHECK(again.skipped);
}
