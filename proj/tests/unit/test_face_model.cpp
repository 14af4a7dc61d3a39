#include "facetrack/face_model.hpp"
#include "facetrack/model_io.hpp"
#include "facetrack/rotation.hpp"
#include "facetrack/synth.hpp"

#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>

using namespace facetrack;

namespace {

ReducedCoreTensor random_tensor(int nv, int nid, int ne, std::mt19937_64& rng, bool one_hot_basis = false) {
  std::normal_distribution<double> g;
  std::vector<double> data(static_cast<std::size_t>(3 * nv * nid * ne));
  for (double& d : data) d = g(rng);
  std::vector<VectorX> basis;
  for (int j = 0; j < ne; ++j) {
    VectorX u = one_hot_basis ? VectorX(VectorX::Unit(ne, j)) : VectorX(VectorX::Random(ne));
    basis.push_back(u);
  }
  return ReducedCoreTensor({nv, nid, ne}, std::move(data), std::move(basis));
}

VectorX random_vector(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  VectorX v(n);
  for (int i = 0; i < n; ++i) v[i] = g(rng);
  return v;
}

VertexArray loop_contract(const ReducedCoreTensor& t, const VectorX& a, const VectorX& b) {
  const ModelDims d = t.dims();
  VertexArray out(3, d.vertices);
  for (int v = 0; v < d.vertices; ++v) {
    for (int c = 0; c < 3; ++c) {
      double s = 0.0;
      for (int i = 0; i < d.identities; ++i) {
        for (int j = 0; j < d.expressions; ++j) s += t(3 * v + c, i, j) * a[i] * b[j];
      }
      out(c, v) = s;
    }
  }
  return out;
}

double rel_err(const MatrixX& a, const MatrixX& b) { return (a - b).norm() / std::max(1.0, b.norm()); }

}  // namespace

TEST_CASE("contract matches a triple loop on random small tensors") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int nv = 2 + trial % 5, nid = 2 + trial % 3, ne = 2 + trial % 4;
    const ReducedCoreTensor t = random_tensor(nv, nid, ne, rng);
    const VectorX a = random_vector(nid, rng), b = random_vector(ne, rng);
    CHECK(rel_err(contract(t, a, b), loop_contract(t, a, b)) < 1e-12);

    const BlendshapeSet shapes = build_blendshapes(t, a);
    REQUIRE(shapes.expression_count() == ne);
    double worst = 0.0;
    for (int j = 0; j < ne; ++j) worst = std::max(worst, rel_err(shapes.shapes[j], loop_contract(t, a, t.exp_basis()[j])));
    CHECK(worst < 1e-10);

    VectorX e(ne - 1);
    for (int j = 0; j < ne - 1; ++j) e[j] = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    VertexArray expect = shapes.shapes[0];
    for (int j = 1; j < ne; ++j) expect += (shapes.shapes[j] - shapes.shapes[0]) * e[j - 1];
    CHECK(rel_err(blend(shapes, e), expect) < 1e-10);
  }
}

TEST_CASE("contract slices, zeros and bilinearity") {
  std::mt19937_64 rng(3);
  const ReducedCoreTensor t = random_tensor(4, 2, 3, rng);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 3; ++j) {
      const VertexArray v = contract(t, VectorX::Unit(2, i), VectorX::Unit(3, j));
      for (int r = 0; r < 12; ++r) CHECK(v(r % 3, r / 3) == t(r, i, j));
    }
  }
  CHECK(contract(t, VectorX::Zero(2), random_vector(3, rng)).isZero(0.0));

  const VectorX w1 = random_vector(2, rng), w2 = random_vector(2, rng), w3 = random_vector(3, rng);
  const VertexArray lhs = contract(t, 0.7 * w1 - 1.3 * w2, w3);
  const VertexArray rhs = 0.7 * contract(t, w1, w3) - 1.3 * contract(t, w2, w3);
  CHECK(rel_err(lhs, rhs) < 1e-10);

  CHECK_THROWS_AS(contract(t, VectorX::Ones(3), w3), Error);
}

TEST_CASE("build_blendshapes is linear in w_id and one-hot basis selects slices") {
  std::mt19937_64 rng(5);
  const ReducedCoreTensor t = random_tensor(5, 3, 4, rng, true);
  const VectorX w = random_vector(3, rng);
  const BlendshapeSet a = build_blendshapes(t, w), b = build_blendshapes(t, 2.5 * w);
  for (int j = 0; j < 4; ++j) {
    CHECK(rel_err(b.shapes[j], 2.5 * a.shapes[j]) < 1e-12);
    CHECK(rel_err(a.shapes[j], loop_contract(t, w, VectorX::Unit(4, j))) < 1e-12);
  }
}

TEST_CASE("blend interpolates the blendshapes") {
  std::mt19937_64 rng(8);
  const ReducedCoreTensor t = random_tensor(6, 2, 3, rng);
  const BlendshapeSet s = build_blendshapes(t, random_vector(2, rng));
  CHECK(blend(s, VectorX::Zero(2)) == s.shapes[0]);
  CHECK(rel_err(blend(s, VectorX::Unit(2, 0)), s.shapes[1]) < 1e-15);
  CHECK(rel_err(blend(s, VectorX::Unit(2, 1)), s.shapes[2]) < 1e-15);
  const VertexArray half = blend(s, VectorX::Constant(2, 0.5));
  for (int v = 0; v < 6; ++v) {
    const Vec3 expect = s.shapes[0].col(v) + 0.5 * (s.shapes[1].col(v) - s.shapes[0].col(v)) +
                        0.5 * (s.shapes[2].col(v) - s.shapes[0].col(v));
    CHECK((half.col(v) - expect).norm() < 1e-14);
  }
  CHECK_THROWS_AS(blend(s, VectorX::Constant(2, 1.5)), Error);
  CHECK_THROWS_AS(blend(s, VectorX::Zero(3)), Error);
}

TEST_CASE("expression vector of zero weights is the neutral basis vector") {
  std::mt19937_64 rng(2);
  const ReducedCoreTensor t = random_tensor(3, 2, 4, rng);
  CHECK(t.expression_vector(VectorX::Zero(3)) == t.exp_basis()[0]);
}

TEST_CASE("rigid transforms") {
  VertexArray v = VertexArray::Random(3, 20);
  RigidPose id;
  id.translation.setZero();
  CHECK(transform(v, id).isApprox(v, 1e-15));

  RigidPose quarter;
  quarter.rotation = Vec3(0, 0, std::numbers::pi / 2);
  quarter.translation.setZero();
  CHECK((quarter.apply(Vec3(1, 0, 0)) - Vec3(0, 1, 0)).norm() < 1e-12);

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    RigidPose a, b;
    a.rotation = Vec3(u(rng), u(rng), u(rng));
    b.rotation = Vec3(u(rng), u(rng), u(rng));
    a.translation = Vec3(u(rng), u(rng), 2 + u(rng));
    b.translation = Vec3(u(rng), u(rng), 2 + u(rng));
    const RigidPose c = compose(a, b);
    const Mat3 r = a.rotation_matrix() * b.rotation_matrix();
    CHECK((c.rotation_matrix() - r).norm() < 1e-10);
    CHECK((c.translation - (a.rotation_matrix() * b.translation + a.translation)).norm() < 1e-10);
    const VertexArray s = transform(v, a);
    for (int i = 1; i < 20; ++i) {
      CHECK(std::abs((s.col(i) - s.col(0)).norm() - (v.col(i) - v.col(0)).norm()) < 1e-9);
    }
    const Vec3 w = a.rotation;
    CHECK((axis_angle_from_rotation(rotation_from_axis_angle(w)) - w).norm() < 1e-10);
  }
}

TEST_CASE("pinhole projection") {
  CameraIntrinsics k;
  CHECK((k.project(Vec3(0, 0, 3.7)) - Vec2(k.cx, k.cy)).norm() < 1e-12);
  k.fx = 500;
  k.cx = 320;
  CHECK(k.project(Vec3(1, 0, 5)).x() == doctest::Approx(420.0).epsilon(1e-15));
  CHECK_THROWS_AS(project(k, Vec3(0, 0, -1)), Error);

  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    const double px = 640 * u(rng), py = 480 * u(rng), z = 0.3 + 3 * u(rng);
    const Vec3 p = k.backproject(px, py, z);
    CHECK((k.project(p) - Vec2(px, py)).norm() < 1e-9);
    CHECK((k.project(p * (0.5 + u(rng))) - Vec2(px, py)).norm() < 1e-9);
  }
}

TEST_CASE("landmark displacement sign") {
  const SyntheticRig rig = gen_rig(RigDims{}, 7);
  const BlendshapeSet shapes = build_blendshapes(rig.core, mean_identity(rig.core.dims().identities));
  const ExpressionBasis basis = ExpressionBasis::from(shapes, rig.topology.landmark_vertices);
  const CameraIntrinsics k;
  ShapeParams p(rig.core.dims().expressions - 1, rig.topology.landmark_count());
  p.pose.translation = Vec3(0, 0, 1.5);
  const Points2D bare = landmark_positions_2d(basis, p, k);
  for (int i = 0; i < basis.size(); ++i) {
    CHECK((bare.col(i) - k.project(p.pose.apply(shapes.shapes[0].col(basis.vertices[i])))).norm() < 1e-9);
  }
  p.displacements.row(0).setOnes();
  const Points2D shifted = landmark_positions_2d(basis, p, k);
  CHECK(((bare - shifted).row(0).array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK((bare - shifted).row(1).isZero(1e-12));
  CHECK((landmark_positions_2d(shapes, rig.topology, p, k) - shifted).norm() < 1e-9);
}

TEST_CASE("shape parameter vector layout round trips") {
  ShapeParams p(3, 2);
  p.pose.rotation = Vec3(0.1, 0.2, 0.3);
  p.pose.translation = Vec3(0.01, -0.02, 1.7);
  p.expr << 0.1, 0.5, 0.9;
  p.displacements << 1, 2, 3, 4;
  const VectorX v = p.to_vector();
  REQUIRE(v.size() == p.dimension());
  CHECK(v[6] == 0.1);
  CHECK(v[9] == 1.0);
  CHECK(v[10] == 3.0);
  const ShapeParams q = ShapeParams::from_vector(v, 3, 2);
  CHECK(q.to_vector() == v);
  CHECK(p.theta().size() == theta_dimension(3));
}

TEST_CASE("tensor, topology and intrinsics files round trip") {
  const SyntheticRig rig = gen_rig(RigDims{40, 3, 4, 6}, 2);
  const auto dir = std::filesystem::temp_directory_path() / "facetrack_face_model_io";
  std::filesystem::create_directories(dir);
  write_core_tensor(dir / "a.btct", rig.core);
  const ReducedCoreTensor back = read_core_tensor(dir / "a.btct");
  CHECK(back.dims() == rig.core.dims());
  CHECK(std::equal(back.data().begin(), back.data().end(), rig.core.data().begin()));
  write_core_tensor(dir / "b.btct", back);
  auto bytes = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(bytes(dir / "a.btct") == bytes(dir / "b.btct"));

  write_triangles(dir / "t.txt", rig.topology);
  write_landmarks(dir / "l.txt", rig.topology);
  const MeshTopology topo = read_topology(dir / "t.txt", dir / "l.txt");
  CHECK(topo.triangles == rig.topology.triangles);
  CHECK(topo.landmark_vertices == rig.topology.landmark_vertices);

  CameraIntrinsics k;
  k.fx = 610.25;
  write_intrinsics(dir / "k.cfg", k);
  CHECK(read_intrinsics(dir / "k.cfg").fx == k.fx);

  {
    std::ofstream bad(dir / "bad.btct", std::ios::binary);
    bad << "XXXX";
  }
  CHECK_THROWS_AS(read_core_tensor(dir / "bad.btct"), Error);
  std::filesystem::remove_all(dir);
}
