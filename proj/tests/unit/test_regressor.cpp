#include "facetrack/dataset.hpp"
#include "facetrack/regressor.hpp"
#include "facetrack/synth.hpp"

#include <doctest.h>

#include <Eigen/Dense>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <random>

using namespace facetrack;

namespace {

GrayImage two_tone(bool bright_left) {
  GrayImage g(64, 64);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      const bool left = x < 32;
      g.values[static_cast<std::size_t>(y) * 64 + x] = (left == bright_left) ? 200 : 50;
    }
  }
  return g;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct SmallSet {
  PreparedTrainingSet prep;
  CameraIntrinsics camera;
};

const SmallSet& small_set() {
  static const SmallSet set = [] {
    SmallSet s;
    const SyntheticRig rig = gen_rig(RigDims{}, 7);
    TrainingSetSpec spec;
    spec.subjects = 4;
    spec.samples_per_subject = 5;
    PerturbConfig perturb;
    perturb.pairs_per_sample = 4;
    s.prep = prepare_training_set(make_annotated_samples(rig, spec, s.camera), rig.core, rig.topology, s.camera,
                                  perturb);
    return s;
  }();
  return set;
}

RegressorConfig small_config() {
  RegressorConfig c;
  c.stages = 3;
  c.forest.trees = 3;
  c.forest.depth = 3;
  c.forest.candidates = 100;
  c.min_pairs = 50;
  return c;
}

}  // namespace

TEST_CASE("probe radius scales inversely with depth") {
  CHECK(scale_radius(12.0, 0.7) == doctest::Approx(12.0).epsilon(1e-15));
  CHECK(scale_radius(12.0, 1.4) == doctest::Approx(6.0).epsilon(1e-15));
  CHECK(scale_radius(20.0, 2.0) == doctest::Approx(7.0).epsilon(1e-15));
  CHECK_THROWS_AS(scale_radius(20.0, 0.0), Error);
}

TEST_CASE("forest training") {
  const GrayImage a = two_tone(true), b = two_tone(false);
  std::vector<LocalSample> samples;
  for (int k = 0; k < 40; ++k) {
    const bool first = k % 2 == 0;
    samples.push_back({first ? &a : &b, Vec2(32, 32), 1.0, first ? Vec2(5, 0) : Vec2(-5, 0)});
  }

  SUBCASE("zero targets give single leaves") {
    std::vector<LocalSample> flat = samples;
    for (auto& s : flat) s.target.setZero();
    const Forest f = train_forest(flat, 0, 20.0, ForestConfig{3, 4, 50, true}, 1);
    REQUIRE(f.trees.size() == 3);
    for (const auto& t : f.trees) {
      CHECK(t.nodes.size() == 1);
      CHECK(t.leaf_count == 1);
    }
    CHECK(f.leaf_count() == 3);
  }

  SUBCASE("a separable pair of clusters is split at depth one") {
    const Forest f = train_forest(samples, 0, 20.0, ForestConfig{1, 1, 500, false}, 3);
    const RegressionTree& t = f.trees.front();
    std::map<int, std::pair<Vec2, int>> leaves;
    for (const auto& s : samples) {
      auto& [sum, n] = leaves[t.route(*s.image, s.position, s.scale)];
      if (n == 0) sum.setZero();
      sum += s.target;
      ++n;
    }
    double before = 0.0, after = 0.0;
    for (const auto& s : samples) {
      const auto& [sum, n] = leaves[t.route(*s.image, s.position, s.scale)];
      before += s.target.squaredNorm();
      after += (s.target - sum / n).squaredNorm();
    }
    CHECK(1.0 - after / before >= 0.99);
  }

  SUBCASE("same seed, same forest") {
    const Forest f = train_forest(samples, 0, 20.0, ForestConfig{}, 9);
    const Forest g = train_forest(samples, 0, 20.0, ForestConfig{}, 9);
    REQUIRE(f.trees.size() == g.trees.size());
    for (std::size_t i = 0; i < f.trees.size(); ++i) {
      REQUIRE(f.trees[i].nodes.size() == g.trees[i].nodes.size());
      for (std::size_t n = 0; n < f.trees[i].nodes.size(); ++n) {
        const TreeNode &x = f.trees[i].nodes[n], &y = g.trees[i].nodes[n];
        CHECK((x.ax == y.ax && x.ay == y.ay && x.bx == y.bx && x.by == y.by && x.threshold == y.threshold &&
               x.left == y.left && x.right == y.right && x.leaf == y.leaf));
      }
    }
  }
}

TEST_CASE("ridge solve matches the dense normal equations") {
  const std::vector<std::vector<int>> active = {{0}, {1}, {0}};
  MatrixX y(3, 2);
  y << 1.0, -2.0, 3.0, 0.5, 0.25, -1.0;
  const double lambda = 0.3;
  MatrixX phi = MatrixX::Zero(2, 3);
  for (int k = 0; k < 3; ++k) phi(active[k][0], k) = 1.0;
  const MatrixX expect = y.transpose() * phi.transpose() * (phi * phi.transpose() + lambda * MatrixX::Identity(2, 2)).inverse();
  CHECK((solve_ridge(active, 2, y, lambda) - expect).cwiseAbs().maxCoeff() < 1e-8);
  CHECK(solve_ridge(active, 2, y, 1e12).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("training, prediction and model files") {
  const SmallSet& s = small_set();
  const RegressorConfig cfg = small_config();
  TrainingReport report;
  const RegressorModel model = train(s.prep.data, s.camera, cfg, &report);
  REQUIRE(report.residuals.size() == 4);
  for (std::size_t t = 1; t < report.residuals.size(); ++t) CHECK(report.residuals[t] <= report.residuals[t - 1]);
  CHECK(model.stages.size() == 3);
  for (std::size_t t = 1; t < model.radii.size(); ++t) {
    for (std::size_t i = 0; i < model.radii[t].size(); ++i) CHECK(model.radii[t][i] <= model.radii[t - 1][i]);
  }

  const auto& pair = s.prep.data.pairs.front();
  const GrayImage& image = s.prep.data.images[pair.image];
  const ExpressionBasis& basis = s.prep.data.subjects[s.prep.data.image_subject[pair.image]];
  const StageModel& stage = model.stages.front();
  REQUIRE(stage.w.rows() == model.dimension());
  int trees = 0;
  for (const Forest& f : stage.forests) trees += static_cast<int>(f.trees.size());
  CHECK(stage.w.cols() == stage.feature_count());
  const std::vector<int> phi = encode_binary(image, pair.guess, stage, basis, s.camera, model.z_ref);
  CHECK(static_cast<int>(phi.size()) == trees);
  CHECK(binary_vector(phi, stage.feature_count()).sum() == trees);
  CHECK(encode_binary(image, pair.guess, stage, basis, s.camera, model.z_ref) == phi);

  const ShapeParams out = predict(model, image, pair.truth, basis, s.camera);
  const double drift = frame_rmse(landmark_positions_2d(basis, out, s.camera),
                                  landmark_positions_2d(basis, pair.truth, s.camera));
  CHECK(drift < report.landmark_rmse.front());
  CHECK(out.to_vector() == predict(model, image, pair.truth, basis, s.camera).to_vector());

  RegressorModel empty = model;
  empty.stages.clear();
  empty.radii.clear();
  CHECK(predict(empty, image, pair.guess, basis, s.camera).to_vector() == pair.guess.to_vector());

  const auto dir = std::filesystem::temp_directory_path() / "facetrack_regressor_io";
  std::filesystem::create_directories(dir);
  save_regressor(dir / "a.btrm", model);
  save_regressor(dir / "b.btrm", load_regressor(dir / "a.btrm"));
  CHECK(file_bytes(dir / "a.btrm") == file_bytes(dir / "b.btrm"));
  save_regressor(dir / "c.btrm", train(s.prep.data, s.camera, cfg));
  CHECK(file_bytes(dir / "a.btrm") == file_bytes(dir / "c.btrm"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("training rejects small sets and singular ridge") {
  const SmallSet& s = small_set();
  RegressorConfig cfg = small_config();
  cfg.min_pairs = 100000;
  CHECK_THROWS_AS(train(s.prep.data, s.camera, cfg), Error);
  cfg = small_config();
  cfg.lambda = -1.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  MatrixX y = MatrixX::Ones(2, 1);
  CHECK_THROWS_AS(solve_ridge({{0}, {0}}, 2, y, 0.0), Error);
}
