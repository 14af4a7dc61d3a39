#pragma once

#include "facetrack/face_model.hpp"
#include "facetrack/image.hpp"
#include "facetrack/training_fit.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace facetrack {

/// Probe radius at depth T_z for a radius defined at depth z_ref.
double scale_radius(double r_ref, double t_z, double z_ref = 0.7);

/// Split node or leaf. Offsets are in reference-scale pixels; a sample goes
/// left when I(p + s a) - I(p + s b) <= threshold.
struct TreeNode {
  float ax = 0, ay = 0, bx = 0, by = 0;
  std::int32_t threshold = 0;
  std::int32_t left = -1;
  std::int32_t right = -1;
  std::int32_t leaf = -1;  // leaf index, -1 for split nodes

  bool is_leaf() const { return leaf >= 0; }
};

struct RegressionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  int leaf_count = 0;

  /// Leaf reached from a probe position p with offset scale s.
  int route(const GrayImage& image, const Vec2& p, double s) const;
};

struct Forest {
  int landmark = 0;
  std::vector<RegressionTree> trees;

  int leaf_count() const;
};

struct ForestConfig {
  int trees = 5;
  int depth = 4;
  int candidates = 500;
  bool bootstrap = true;
};

/// One landmark observation seen by a forest.
struct LocalSample {
  const GrayImage* image = nullptr;
  Vec2 position;       // current landmark estimate, pixels
  double scale = 1.0;  // z_ref / T_z
  Vec2 target;         // (truth - estimate) / scale
};

/// Greedy variance-reduction trees over random pixel-difference features
/// drawn within `radius` (reference-scale pixels).
Forest train_forest(const std::vector<LocalSample>& samples, int landmark, double radius, const ForestConfig& config,
                    std::uint64_t seed);

struct StageModel {
  std::vector<Forest> forests;  // one per landmark
  Eigen::MatrixXf w;            // dim(P) x total leaves

  int feature_count() const;
};

struct RegressorConfig {
  int stages = 5;
  ForestConfig forest;
  double reference_face_px = 120.0;
  double radius_start = 0.25;  // fraction of the reference face size
  double radius_end = 0.05;
  double lambda = 1000.0;
  double z_ref = 0.7;
  int min_pairs = 200;
  double translation_scale = 10.0;
  std::uint64_t seed = 1;

  void validate() const;
};

struct RegressorModel {
  int expression_count = 0;  // N_e - 1
  int landmark_count = 0;
  double reference_face_px = 120.0;
  double z_ref = 0.7;
  std::vector<std::vector<float>> radii;  // [stage][landmark], reference-scale pixels
  std::vector<StageModel> stages;

  int dimension() const { return 6 + expression_count + 2 * landmark_count; }
};

/// Active leaf columns of the global binary vector, one per tree, ascending.
std::vector<int> encode_binary(const GrayImage& image, const ShapeParams& params, const StageModel& stage,
                               const ExpressionBasis& landmarks, const CameraIntrinsics& camera, double z_ref);

/// Dense 0/1 form of the global binary vector.
VectorX binary_vector(const std::vector<int>& active, int length);

/// Training set: grayscale images, the landmark basis of each image's
/// subject, and guess-truth pairs referring to both.
struct RegressorTrainingData {
  std::vector<GrayImage> images;
  std::vector<int> image_subject;
  std::vector<ExpressionBasis> subjects;
  std::vector<GuessTruthPair> pairs;
};

struct TrainingReport {
  /// Mean squared normalized parameter residual before stage 1 and after each stage.
  std::vector<double> residuals;
  /// Mean landmark RMSE in pixels, same indexing.
  std::vector<double> landmark_rmse;
};

/// Per-block scaling applied to parameter updates before regression.
VectorX parameter_normalization(const RegressorConfig& config, int expression_count, int landmark_count);

RegressorModel train(const RegressorTrainingData& data, const CameraIntrinsics& camera, const RegressorConfig& config,
                     TrainingReport* report = nullptr);

/// Ridge solution of min sum_k |y_k - W phi_k|^2 + lambda |W|^2 for sparse
/// binary phi_k; returns W (rows = y dimension).
MatrixX solve_ridge(const std::vector<std::vector<int>>& active, int columns, const MatrixX& targets, double lambda);

/// Applies every stage, then clamps the expression weights into [0, 1].
ShapeParams predict(const RegressorModel& model, const GrayImage& image, const ShapeParams& p_in,
                    const ExpressionBasis& landmarks, const CameraIntrinsics& camera);

/// Model file: magic "BTRM", u32 version, dims, radii, forests as flat node
/// arrays and W as row-major float32.
void save_regressor(const std::filesystem::path& path, const RegressorModel& model);
RegressorModel load_regressor(const std::filesystem::path& path);

}  // namespace facetrack
