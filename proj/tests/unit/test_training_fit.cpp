#include "facetrack/synth.hpp"
#include "facetrack/training_fit.hpp"

#include <doctest.h>

#include <filesystem>
#include <random>

using namespace facetrack;

namespace {

struct Truth {
  RigidPose pose;
  VectorX w_id;
  VectorX expr;
};

const SyntheticRig& rig() {
  static const SyntheticRig r = gen_rig(RigDims{}, 7);
  return r;
}

Truth random_truth(std::mt19937_64& rng, const VectorX& w_id) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Truth t;
  t.w_id = w_id;
  t.pose.rotation = Vec3(0.2 * u(rng), 0.45 * u(rng), 0.1 * u(rng));
  t.pose.translation = Vec3(0.05 * u(rng), 0.05 * u(rng), 1.5 + 0.4 * u(rng));
  t.expr = random_expression(rng, rig().core.dims().expressions - 1);
  return t;
}

TrainingSample sample_of(const Truth& t, const std::string& subject = "s0") {
  const CameraIntrinsics camera;
  const VertexArray v = transform(contract(rig().core, t.w_id, rig().core.expression_vector(t.expr)), t.pose);
  TrainingSample s;
  s.subject_id = subject;
  const auto& lm = rig().topology.landmark_vertices;
  s.landmarks.resize(2, static_cast<Eigen::Index>(lm.size()));
  for (std::size_t i = 0; i < lm.size(); ++i) s.landmarks.col(static_cast<Eigen::Index>(i)) = camera.project(v.col(lm[i]));
  return s;
}

}  // namespace

TEST_CASE("fit_sample reaches sub-millipixel reprojection on synthesized landmarks") {
  std::mt19937_64 rng(11);
  const ReducedCoreTensor lt = landmark_tensor(rig().core, rig().topology);
  const CameraIntrinsics camera;
  for (int k = 0; k < 20; ++k) {
    const Truth t = random_truth(rng, rig().random_identity(rng));
    const SampleFit fit = fit_sample(sample_of(t), lt, camera);
    CHECK(fit.rmse < 1e-3);
    CHECK_FALSE(fit.rank_deficient);
  }
}

TEST_CASE("fit_sample started at the optimum stays there") {
  std::mt19937_64 rng(12);
  const ReducedCoreTensor lt = landmark_tensor(rig().core, rig().topology);
  const Truth t = random_truth(rng, rig().random_identity(rng));
  SampleFit init;
  init.pose = t.pose;
  init.w_id = t.w_id;
  init.expr = t.expr;
  const SampleFit fit = fit_sample(sample_of(t), lt, CameraIntrinsics{}, &init);
  CHECK(fit.iterations <= 2);
  CHECK(fit.first_step < 1e-9);
  CHECK(fit.rmse < 1e-9);
}

TEST_CASE("collinear landmarks are flagged rank deficient") {
  const ReducedCoreTensor lt = landmark_tensor(rig().core, rig().topology);
  TrainingSample s;
  s.subject_id = "line";
  s.landmarks.resize(2, lt.dims().vertices);
  for (Eigen::Index i = 0; i < s.landmarks.cols(); ++i) s.landmarks.col(i) = Vec2(250.0 + 8.0 * i, 240.0);
  const SampleFit fit = fit_sample(s, lt, CameraIntrinsics{});
  CHECK(fit.rank_deficient);
}

TEST_CASE("joint identity refinement recovers the subject identity") {
  std::mt19937_64 rng(13);
  const ReducedCoreTensor lt = landmark_tensor(rig().core, rig().topology);
  const VectorX w = rig().random_identity(rng);
  std::vector<TrainingSample> samples;
  for (int k = 0; k < 5; ++k) samples.push_back(sample_of(random_truth(rng, w)));
  std::vector<const TrainingSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  const JointIdentityResult res = joint_identity_refinement(ptrs, lt, CameraIntrinsics{});
  REQUIRE(res.objective.size() == 4);
  for (std::size_t i = 1; i < res.objective.size(); ++i) CHECK(res.objective[i] <= res.objective[i - 1]);
  CHECK((res.w_id - w).norm() / w.norm() < 1e-2);
}

TEST_CASE("joint identity refinement of one sample matches fit_sample") {
  std::mt19937_64 rng(14);
  const ReducedCoreTensor lt = landmark_tensor(rig().core, rig().topology);
  const TrainingSample s = sample_of(random_truth(rng, rig().random_identity(rng)));
  const SampleFit single = fit_sample(s, lt, CameraIntrinsics{});
  const JointIdentityResult res = joint_identity_refinement({&s}, lt, CameraIntrinsics{});
  CHECK(std::abs(res.objective.back() - single.cost) < 1e-8);
}

TEST_CASE("mixed subjects are rejected") {
  std::mt19937_64 rng(15);
  const ReducedCoreTensor lt = landmark_tensor(rig().core, rig().topology);
  const TrainingSample a = sample_of(random_truth(rng, rig().random_identity(rng)), "a");
  const TrainingSample b = sample_of(random_truth(rng, rig().random_identity(rng)), "b");
  CHECK_THROWS_AS(joint_identity_refinement({&a, &b}, lt, CameraIntrinsics{}), Error);
}

TEST_CASE("fit_expression_displacement") {
  std::mt19937_64 rng(16);
  const CameraIntrinsics camera;
  const VectorX w = rig().random_identity(rng);
  const BlendshapeSet shapes = build_blendshapes(rig().core, w);
  const Truth t = random_truth(rng, w);
  const TrainingSample s = sample_of(t);
  const int nexp = rig().core.dims().expressions - 1;
  const int nl = rig().topology.landmark_count();

  SUBCASE("exact blendshapes leave no displacement") {
    ShapeParams init(nexp, nl);
    init.pose = t.pose;
    init.pose.translation.z() += 0.05;
    init.pose.rotation.y() += 0.05;
    const DisplacementFit fit = fit_expression_displacement(s, shapes, rig().topology, camera, init);
    CHECK(fit.params.displacements.cwiseAbs().maxCoeff() < 1e-4);
    const Points2D l = landmark_positions_2d(shapes, rig().topology, fit.params, camera);
    CHECK((l - s.landmarks).cwiseAbs().maxCoeff() < 1e-6);
  }
  SUBCASE("another identity leaves a displacement") {
    const BlendshapeSet other = build_blendshapes(rig().core, rig().random_identity(rng));
    ShapeParams init(nexp, nl);
    init.pose = t.pose;
    const DisplacementFit fit = fit_expression_displacement(s, other, rig().topology, camera, init);
    CHECK(fit.params.displacements.norm() > 0.0);
    const Points2D l = landmark_positions_2d(other, rig().topology, fit.params, camera);
    CHECK((l - s.landmarks).cwiseAbs().maxCoeff() < 1e-6);
  }
  SUBCASE("out-of-range start is clamped") {
    ShapeParams init(nexp, nl);
    init.pose = t.pose;
    init.expr.setConstant(1.7);
    init.expr[0] = -0.4;
    const DisplacementFit fit = fit_expression_displacement(s, shapes, rig().topology, camera, init);
    CHECK(fit.params.expr.minCoeff() >= 0.0);
    CHECK(fit.params.expr.maxCoeff() <= 1.0);
  }
}

TEST_CASE("make_training_pairs") {
  const int nexp = 4, nl = 6;
  std::vector<TruthRecord> truths;
  for (int i = 0; i < 10; ++i) {
    TruthRecord t;
    t.image = static_cast<std::size_t>(i);
    t.params = ShapeParams(nexp, nl);
    t.params.pose.translation = Vec3(0.0, 0.0, 1.5);
    t.params.expr.setConstant(0.5);
    truths.push_back(t);
  }
  SUBCASE("zero sigma copies the truth") {
    PerturbConfig cfg;
    cfg.sigma_rotation = 0;
    cfg.sigma_translation.setZero();
    cfg.sigma_expression = 0;
    cfg.sigma_displacement = 0;
    for (const auto& p : make_training_pairs(truths, cfg)) CHECK(p.guess.to_vector() == p.truth.to_vector());
  }
  SUBCASE("counting and determinism") {
    PerturbConfig cfg;
    cfg.pairs_per_sample = 4;
    const auto a = make_training_pairs(truths, cfg);
    const auto b = make_training_pairs(truths, cfg);
    CHECK(a.size() == 40);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].guess.to_vector() == b[i].guess.to_vector());
    for (const auto& p : a) {
      CHECK(p.guess.expr.minCoeff() >= 0.0);
      CHECK(p.guess.expr.maxCoeff() <= 1.0);
    }
  }
  SUBCASE("pair store round trip") {
    const auto pairs = make_training_pairs(truths, PerturbConfig{});
    std::vector<std::string> paths;
    for (int i = 0; i < 10; ++i) paths.push_back("img_" + std::to_string(i) + ".ppm");
    const auto file = std::filesystem::temp_directory_path() / "facetrack_pairs.bin";
    write_pair_store(file, paths, pairs);
    std::vector<std::string> read_paths;
    const auto back = read_pair_store(file, read_paths);
    REQUIRE(back.size() == pairs.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(read_paths[back[i].image] == paths[pairs[i].image]);
      CHECK(back[i].guess.to_vector() == pairs[i].guess.to_vector());
      CHECK(back[i].truth.to_vector() == pairs[i].truth.to_vector());
    }
    std::filesystem::remove(file);
  }
  SUBCASE("invalid config") {
    PerturbConfig cfg;
    cfg.pairs_per_sample = 0;
    CHECK_THROWS_AS(make_training_pairs(truths, cfg), Error);
  }
}

TEST_CASE("manifest round trip") {
  const auto dir = std::filesystem::temp_directory_path();
  std::vector<ManifestEntry> entries(2);
  entries[0] = {dir / "a.ppm", "s1", Points2D::Random(2, 6)};
  entries[1] = {dir / "b.ppm", "s2", Points2D::Random(2, 6)};
  const auto file = dir / "facetrack_manifest.txt";
  write_manifest(file, entries);
  const auto back = read_manifest(file);
  REQUIRE(back.size() == 2);
  CHECK(back[1].subject_id == "s2");
  CHECK(back[1].image == entries[1].image);
  CHECK(back[0].landmarks == entries[0].landmarks);
  std::filesystem::remove(file);
}
