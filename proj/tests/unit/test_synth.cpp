#include "facetrack/depth_filter.hpp"
#include "facetrack/synth.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace facetrack;

TEST_CASE("rig tensor reproduces the stored meshes") {
  const SyntheticRig rig = gen_rig(RigDims{}, 7);
  const ModelDims d = rig.core.dims();
  CHECK(d.vertices == 600);
  CHECK(d.identities == 8);
  CHECK(d.expressions == 12);
  CHECK(rig.topology.landmark_count() == 16);
  for (int i = 0; i < d.identities; ++i) {
    const BlendshapeSet s = build_blendshapes(rig.core, VectorX::Unit(d.identities, i));
    for (int j = 0; j < d.expressions; ++j) {
      CHECK((s.shapes[j] - rig.truth_mesh(i, j)).cwiseAbs().maxCoeff() < 1e-9);
      CHECK((contract(rig.core, VectorX::Unit(d.identities, i), VectorX::Unit(d.expressions, j)) -
             rig.truth_mesh(i, j)).cwiseAbs().maxCoeff() < 1e-9);
    }
  }
}

TEST_CASE("rig generation is deterministic and well formed") {
  const SyntheticRig a = gen_rig(RigDims{}, 7), b = gen_rig(RigDims{}, 7), c = gen_rig(RigDims{}, 8);
  CHECK(std::equal(a.core.data().begin(), a.core.data().end(), b.core.data().begin()));
  CHECK(a.topology.triangles == b.topology.triangles);
  CHECK_FALSE(std::equal(a.core.data().begin(), a.core.data().end(), c.core.data().begin()));

  double smallest = 1.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const SyntheticRig rig = gen_rig(RigDims{}, seed);
    rig.topology.validate(rig.core.dims().vertices);
    // Identity slots past the mean face are displacement modes; check faces.
    std::mt19937_64 rng(seed);
    std::vector<VertexArray> faces;
    for (int s = 0; s < 4; ++s) {
      const BlendshapeSet b = build_blendshapes(rig.core, s == 0 ? mean_identity(8) : rig.random_identity(rng));
      faces.insert(faces.end(), b.shapes.begin(), b.shapes.end());
    }
    for (const VertexArray& mesh : faces) {
      for (const auto& t : rig.topology.triangles) {
        const double area = 0.5 * (mesh.col(t[1]) - mesh.col(t[0])).cross(mesh.col(t[2]) - mesh.col(t[0])).norm();
        smallest = std::min(smallest, area);
      }
    }
  }
  CHECK(smallest > 1e-10);
}

TEST_CASE("clean renders match the prior rasterizer and the truth landmarks") {
  const SyntheticRig rig = gen_rig(RigDims{}, 7);
  std::mt19937_64 rng(3);
  const VectorX w = rig.random_identity(rng);
  RigidPose pose;
  pose.rotation = Vec3(0.1, -0.3, 0.05);
  pose.translation = Vec3(0.02, -0.01, 1.6);
  const VectorX e = random_expression(rng, 11);
  const CameraIntrinsics k;
  const RenderedFrame f = render_rgbd(rig, w, pose, e, k, Lighting{}, nullptr, 1);
  const VertexArray s = transform(blend(build_blendshapes(rig.core, w), e), pose);
  const DepthMap v = render_prior_depth(s, rig.topology, k);
  CHECK(f.depth.values == v.values);
  CHECK(f.clean_depth.values == v.values);

  const BlendshapeSet shapes = build_blendshapes(rig.core, w);
  ShapeParams p(11, rig.topology.landmark_count());
  p.pose = pose;
  p.expr = e;
  CHECK(frame_rmse(landmark_positions_2d(shapes, rig.topology, p, k), f.landmarks) < 1e-9);
}

TEST_CASE("sensor noise statistics") {
  NoiseModel n;
  CHECK(n.axial_sigma_m(2.0) == doctest::Approx(4.0 * n.axial_sigma_m(1.0)).epsilon(1e-14));
  CHECK(1e3 * n.axial_sigma_m(2.0) == doctest::Approx(5.7).epsilon(1e-12));
  n.lateral_sigma_px = 0.0;
  n.dropout_probability = 0.0;
  for (double z : {1.0, 1.5, 2.0}) {
    DepthMap clean(100, 100);
    std::fill(clean.values.begin(), clean.values.end(), z);
    const DepthMap noisy = apply_depth_noise(clean, {}, n, 42);
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < clean.size(); ++i) {
      const double d = noisy.values[i] - clean.values[i];
      sum += d;
      sq += d * d;
    }
    const double m = sum / 1e4;
    const double sigma = std::sqrt(sq / 1e4 - m * m);
    CHECK(std::abs(sigma / n.axial_sigma_m(z) - 1.0) < 0.05);
  }
}

TEST_CASE("noise is reproducible per seed") {
  NoiseModel n;
  DepthMap clean(32, 32);
  std::fill(clean.values.begin(), clean.values.end(), 1.8);
  CHECK(apply_depth_noise(clean, {}, n, 5).values == apply_depth_noise(clean, {}, n, 5).values);
  CHECK(apply_depth_noise(clean, {}, n, 5).values != apply_depth_noise(clean, {}, n, 6).values);
}

TEST_CASE("landmark and lost-frame metrics") {
  Points2D t(2, 3);
  t << 0, 10, 20, 0, 5, 5;
  CHECK(frame_rmse(t, t) == 0.0);
  Points2D off = t;
  off.row(0).array() += 0.6;
  off.row(1).array() += 0.8;
  CHECK(frame_rmse(off, t) == doctest::Approx(1.0).epsilon(1e-14));

  // Frame 1 errors (3, 4), (0, 0), (0, 0): sqrt(25 / 3). Frame 2: every point off by 2.
  Points2D a = t, b = t;
  a(0, 0) += 3;
  a(1, 0) += 4;
  b.array() += std::sqrt(2.0);
  const double expect = 0.5 * (std::sqrt(25.0 / 3.0) + 2.0);
  CHECK(eval_rmse({a, b}, {t, t}) == doctest::Approx(expect).epsilon(1e-14));

  CHECK(eval_lost_fraction({1, 2, 3}, {false, false, false}) == 0.0);
  std::vector<double> r(100, 1.0);
  std::vector<bool> empty(100, false);
  empty[7] = true;
  CHECK(eval_lost_fraction(r, empty) == doctest::Approx(0.01));
  CHECK(eval_lost_fraction({0.5, 10.0, 10.5, 30.0, 2.0}, {false, false, false, false, true}, 10.0) ==
        doctest::Approx(3.0 / 5.0));
}

TEST_CASE("depth MAE") {
  DepthMap a(8, 6), b(8, 6);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(1.0, 2.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a.values[i] = u(rng);
    b.values[i] = u(rng);
  }
  std::vector<bool> mask(a.size(), true);
  CHECK(eval_mae(a, a, mask) == 0.0);
  DepthMap shifted = a;
  for (double& v : shifted.values) v += 0.002;
  CHECK(eval_mae(shifted, a, mask) == doctest::Approx(2.0).epsilon(1e-9));

  mask[3] = mask[17] = false;
  double sum = 0.0;
  int n = 0;
  for (int y = 0; y < 6; ++y) {
    for (int x = 0; x < 8; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * 8 + x;
      if (!mask[i]) continue;
      sum += std::abs(a.values[i] - b.values[i]);
      ++n;
    }
  }
  CHECK(std::abs(eval_mae(a, b, mask) - 1e3 * sum / n) < 1e-12);
}

TEST_CASE("trajectories are deterministic and keep the face in view") {
  SequenceSpec spec;
  spec.frames = 40;
  spec.distance = 2.0;
  const SyntheticRig rig = gen_rig(spec.rig, spec.rig_seed);
  const SequenceTruth a = make_trajectory(spec, rig), b = make_trajectory(spec, rig);
  CHECK(a.identity == b.identity);
  const CameraIntrinsics k;
  const BlendshapeSet shapes = build_blendshapes(rig.core, a.identity);
  for (int t = 0; t < spec.frames; ++t) {
    CHECK(a.poses[t].rotation == b.poses[t].rotation);
    CHECK(a.expressions[t] == b.expressions[t]);
    CHECK(std::abs(a.poses[t].translation.z() - 2.0) < 0.05);
    ShapeParams p(11, rig.topology.landmark_count());
    p.pose = a.poses[t];
    p.expr = a.expressions[t];
    const Points2D l = landmark_positions_2d(shapes, rig.topology, p, k);
    CHECK(l.row(0).minCoeff() > 0);
    CHECK(l.row(0).maxCoeff() < k.width);
    CHECK(l.row(1).minCoeff() > 0);
    CHECK(l.row(1).maxCoeff() < k.height);
  }
}
