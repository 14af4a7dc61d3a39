#include "facetrack/regressor.hpp"
#include "facetrack/binary_io.hpp"
#include "facetrack/parallel.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>

namespace facetrack {

namespace {

constexpr int kBins = 511;  // pixel differences span [-255, 255]

int probe(const GrayImage& image, const Vec2& p, double s, float ox, float oy) {
  return image.clamped(static_cast<int>(std::lround(p.x() + s * ox)), static_cast<int>(std::lround(p.y() + s * oy)));
}

int feature_value(const GrayImage& image, const Vec2& p, double s, const TreeNode& n) {
  return probe(image, p, s, n.ax, n.ay) - probe(image, p, s, n.bx, n.by);
}

double offset_scale(const ShapeParams& params, double z_ref) {
  const double tz = params.pose.translation.z();
  require(tz > 0.0, ErrorCategory::behind_camera, "face translation is behind the camera");
  return z_ref / tz;
}

struct TreeBuilder {
  const std::vector<LocalSample>& samples;
  const std::vector<int>& rows;                 // bootstrap rows into samples
  const std::vector<std::array<float, 4>>& candidates;
  const std::vector<std::int16_t>& values;      // [feature * rows + position]
  int max_depth;
  RegressionTree tree;

  int build(std::vector<int>& members, int depth) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    Vec2 sum = Vec2::Zero();
    double sq = 0.0;
    for (int m : members) {
      const Vec2& t = samples[rows[m]].target;
      sum += t;
      sq += t.squaredNorm();
    }
    const double n = static_cast<double>(members.size());
    const double spread = sq - sum.squaredNorm() / n;
    int best_feature = -1, best_threshold = 0;
    if (depth < max_depth && members.size() >= 2 && spread > 1e-12 * (sq + 1e-300)) {
      const double base = sum.squaredNorm() / n;
      double best_gain = 1e-12 * spread;
      std::array<int, kBins> count;
      std::array<double, kBins> sx, sy;
      const std::size_t stride = rows.size();
      for (std::size_t f = 0; f < candidates.size(); ++f) {
        const std::int16_t* v = values.data() + f * stride;
        int lo = kBins, hi = -1;
        for (int m : members) {
          const int b = v[m] + 255;
          lo = std::min(lo, b);
          hi = std::max(hi, b);
        }
        if (lo == hi) continue;
        std::fill(count.begin() + lo, count.begin() + hi + 1, 0);
        std::fill(sx.begin() + lo, sx.begin() + hi + 1, 0.0);
        std::fill(sy.begin() + lo, sy.begin() + hi + 1, 0.0);
        for (int m : members) {
          const int b = v[m] + 255;
          const Vec2& t = samples[rows[m]].target;
          ++count[b];
          sx[b] += t.x();
          sy[b] += t.y();
        }
        int nl = 0;
        double lx = 0.0, ly = 0.0;
        for (int b = lo; b < hi; ++b) {
          if (count[b] == 0) continue;
          nl += count[b];
          lx += sx[b];
          ly += sy[b];
          const double nr = n - nl;
          const double rx = sum.x() - lx, ry = sum.y() - ly;
          const double gain = (lx * lx + ly * ly) / nl + (rx * rx + ry * ry) / nr - base;
          if (gain > best_gain) {
            best_gain = gain;
            best_feature = static_cast<int>(f);
            best_threshold = b - 255;
          }
        }
      }
    }
    if (best_feature < 0) {
      tree.nodes[id].leaf = tree.leaf_count++;
      return id;
    }
    std::vector<int> left, right;
    const std::int16_t* v = values.data() + static_cast<std::size_t>(best_feature) * rows.size();
    for (int m : members) (v[m] <= best_threshold ? left : right).push_back(m);
    members.clear();
    members.shrink_to_fit();
    const auto& c = candidates[best_feature];
    tree.nodes[id].ax = c[0];
    tree.nodes[id].ay = c[1];
    tree.nodes[id].bx = c[2];
    tree.nodes[id].by = c[3];
    tree.nodes[id].threshold = best_threshold;
    const int l = build(left, depth + 1);
    const int r = build(right, depth + 1);
    tree.nodes[id].left = l;
    tree.nodes[id].right = r;
    return id;
  }
};

}  // namespace

double scale_radius(double r_ref, double t_z, double z_ref) {
  require(t_z > 0.0, ErrorCategory::invalid_input, "T_z must be positive");
  return r_ref * z_ref / t_z;
}

int RegressionTree::route(const GrayImage& image, const Vec2& p, double s) const {
  int id = 0;
  while (!nodes[id].is_leaf()) {
    const TreeNode& n = nodes[id];
    id = feature_value(image, p, s, n) <= n.threshold ? n.left : n.right;
  }
  return nodes[id].leaf;
}

int Forest::leaf_count() const {
  int total = 0;
  for (const auto& t : trees) total += t.leaf_count;
  return total;
}

int StageModel::feature_count() const {
  int total = 0;
  for (const auto& f : forests) total += f.leaf_count();
  return total;
}

Forest train_forest(const std::vector<LocalSample>& samples, int landmark, double radius, const ForestConfig& config,
                    std::uint64_t seed) {
  require(samples.size() >= 2, ErrorCategory::invalid_input, "forest training needs at least 2 samples");
  require(config.trees >= 1 && config.depth >= 0 && config.candidates >= 1, ErrorCategory::invalid_input,
          "invalid forest configuration");
  require(radius > 0.0, ErrorCategory::invalid_input, "probe radius must be positive");
  for (const auto& s : samples) {
    require(s.image != nullptr && !s.image->empty(), ErrorCategory::invalid_input, "sample without image");
  }
  Forest forest;
  forest.landmark = landmark;
  const int n = static_cast<int>(samples.size());
  for (int t = 0; t < config.trees; ++t) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(t)));
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::vector<std::array<float, 4>> candidates(config.candidates);
    for (auto& c : candidates) {
      for (int k = 0; k < 2; ++k) {
        const double r = radius * std::sqrt(uniform(rng));
        const double phi = 2.0 * std::numbers::pi * uniform(rng);
        c[2 * k] = static_cast<float>(r * std::cos(phi));
        c[2 * k + 1] = static_cast<float>(r * std::sin(phi));
      }
    }
    std::vector<int> rows(n);
    if (config.bootstrap) {
      std::uniform_int_distribution<int> pick(0, n - 1);
      for (int& r : rows) r = pick(rng);
    } else {
      for (int k = 0; k < n; ++k) rows[k] = k;
    }
    std::vector<std::int16_t> values(static_cast<std::size_t>(config.candidates) * n);
    for (int f = 0; f < config.candidates; ++f) {
      const auto& c = candidates[f];
      for (int k = 0; k < n; ++k) {
        const LocalSample& s = samples[rows[k]];
        values[static_cast<std::size_t>(f) * n + k] = static_cast<std::int16_t>(
            probe(*s.image, s.position, s.scale, c[0], c[1]) - probe(*s.image, s.position, s.scale, c[2], c[3]));
      }
    }
    TreeBuilder builder{samples, rows, candidates, values, config.depth, {}};
    std::vector<int> members(n);
    for (int k = 0; k < n; ++k) members[k] = k;
    builder.build(members, 0);
    forest.trees.push_back(std::move(builder.tree));
  }
  return forest;
}

std::vector<int> encode_binary(const GrayImage& image, const ShapeParams& params, const StageModel& stage,
                               const ExpressionBasis& landmarks, const CameraIntrinsics& camera, double z_ref) {
  require(!image.empty(), ErrorCategory::invalid_input, "empty image");
  require(static_cast<int>(stage.forests.size()) == landmarks.size(), ErrorCategory::dimension_mismatch,
          "forest count != landmark count");
  const double s = offset_scale(params, z_ref);
  const Points2D l = landmark_positions_2d(landmarks, params, camera);
  std::vector<int> active;
  int offset = 0;
  for (const auto& forest : stage.forests) {
    const Vec2 p = l.col(forest.landmark);
    for (const auto& tree : forest.trees) {
      active.push_back(offset + tree.route(image, p, s));
      offset += tree.leaf_count;
    }
  }
  return active;
}

VectorX binary_vector(const std::vector<int>& active, int length) {
  VectorX phi = VectorX::Zero(length);
  for (int a : active) phi[a] = 1.0;
  return phi;
}

void RegressorConfig::validate() const {
  require(stages >= 0, ErrorCategory::invalid_input, "stage count must be >= 0");
  require(forest.trees >= 1 && forest.depth >= 0 && forest.candidates >= 1, ErrorCategory::invalid_input,
          "invalid forest configuration");
  require(reference_face_px > 0.0 && radius_start > 0.0 && radius_end > 0.0 && radius_end <= radius_start,
          ErrorCategory::invalid_input, "radii must be positive and non-increasing");
  require(lambda >= 0.0, ErrorCategory::invalid_input, "lambda must be >= 0");
  require(z_ref > 0.0 && translation_scale > 0.0, ErrorCategory::invalid_input, "scales must be positive");
}

VectorX parameter_normalization(const RegressorConfig& config, int expression_count, int landmark_count) {
  VectorX n(6 + expression_count + 2 * landmark_count);
  n.head<3>().setOnes();
  n.segment<3>(3).setConstant(config.translation_scale);
  n.segment(6, expression_count).setOnes();
  n.tail(2 * landmark_count).setConstant(1.0 / config.reference_face_px);
  return n;
}

MatrixX solve_ridge(const std::vector<std::vector<int>>& active, int columns, const MatrixX& targets, double lambda) {
  require(static_cast<Eigen::Index>(active.size()) == targets.rows(), ErrorCategory::dimension_mismatch,
          "design and target row counts differ");
  require(lambda >= 0.0, ErrorCategory::invalid_input, "lambda must be >= 0");
  MatrixX gram = MatrixX::Zero(columns, columns);
  MatrixX rhs = MatrixX::Zero(columns, targets.cols());
  for (std::size_t k = 0; k < active.size(); ++k) {
    for (int a : active[k]) {
      for (int b : active[k]) gram(a, b) += 1.0;
      rhs.row(a) += targets.row(static_cast<Eigen::Index>(k));
    }
  }
  gram.diagonal().array() += lambda;
  const Eigen::LDLT<MatrixX> ldlt(gram);
  const VectorX d = ldlt.vectorD();
  const double dmax = d.size() ? d.cwiseAbs().maxCoeff() : 0.0;
  require(ldlt.info() == Eigen::Success && d.size() > 0 && d.minCoeff() > 1e-12 * std::max(dmax, 1e-300),
          ErrorCategory::numerical, "singular normal equations; use lambda > 0");
  return ldlt.solve(rhs).transpose();
}

RegressorModel train(const RegressorTrainingData& data, const CameraIntrinsics& camera, const RegressorConfig& config,
                     TrainingReport* report) {
  config.validate();
  const int n = static_cast<int>(data.pairs.size());
  require(n >= std::max(2, config.min_pairs), ErrorCategory::invalid_input,
          "not enough training pairs: " + std::to_string(n) + " < " + std::to_string(config.min_pairs));
  require(data.image_subject.size() == data.images.size(), ErrorCategory::dimension_mismatch,
          "image_subject must have one entry per image");
  const int nexp = static_cast<int>(data.pairs.front().truth.expr.size());
  const int nl = data.pairs.front().truth.landmark_count();
  for (const auto& p : data.pairs) {
    require(p.image < data.images.size(), ErrorCategory::invalid_input, "pair image index out of range");
    require(p.truth.expr.size() == nexp && p.guess.expr.size() == nexp && p.truth.landmark_count() == nl &&
                p.guess.landmark_count() == nl,
            ErrorCategory::dimension_mismatch, "pairs have inconsistent dimensions");
  }
  for (int s : data.image_subject) {
    require(s >= 0 && s < static_cast<int>(data.subjects.size()), ErrorCategory::invalid_input,
            "image subject index out of range");
    require(data.subjects[s].size() == nl, ErrorCategory::dimension_mismatch, "subject landmark count mismatch");
  }

  RegressorModel model;
  model.expression_count = nexp;
  model.landmark_count = nl;
  model.reference_face_px = config.reference_face_px;
  model.z_ref = config.z_ref;
  const VectorX norm = parameter_normalization(config, nexp, nl);

  auto basis_of = [&](int k) -> const ExpressionBasis& {
    return data.subjects[data.image_subject[data.pairs[k].image]];
  };
  std::vector<VectorX> current(n), truth(n);
  std::vector<Points2D> truth_l(n);
  for (int k = 0; k < n; ++k) {
    current[k] = data.pairs[k].guess.to_vector();
    truth[k] = data.pairs[k].truth.to_vector();
    truth_l[k] = landmark_positions_2d(basis_of(k), data.pairs[k].truth, camera);
  }
  auto record = [&]() {
    if (!report) return;
    double res = 0.0, rmse = 0.0;
    for (int k = 0; k < n; ++k) {
      res += (truth[k] - current[k]).cwiseProduct(norm).squaredNorm();
      const ShapeParams p = ShapeParams::from_vector(current[k], nexp, nl);
      const Points2D l = landmark_positions_2d(basis_of(k), p, camera);
      rmse += std::sqrt((l - truth_l[k]).colwise().squaredNorm().mean());
    }
    report->residuals.push_back(res / n);
    report->landmark_rmse.push_back(rmse / n);
  };
  record();

  for (int t = 0; t < config.stages; ++t) {
    const double frac = config.stages > 1 ? static_cast<double>(t) / (config.stages - 1) : 0.0;
    const double radius =
        config.reference_face_px * config.radius_start * std::pow(config.radius_end / config.radius_start, frac);
    model.radii.emplace_back(nl, static_cast<float>(radius));

    std::vector<ShapeParams> params(n);
    std::vector<Points2D> cur_l(n);
    std::vector<double> scale(n);
    for (int k = 0; k < n; ++k) {
      params[k] = ShapeParams::from_vector(current[k], nexp, nl);
      scale[k] = offset_scale(params[k], config.z_ref);
      cur_l[k] = landmark_positions_2d(basis_of(k), params[k], camera);
    }

    StageModel stage;
    stage.forests.resize(nl);
    parallel_for(nl, [&](int i) {
      std::vector<LocalSample> local(n);
      for (int k = 0; k < n; ++k) {
        local[k].image = &data.images[data.pairs[k].image];
        local[k].position = cur_l[k].col(i);
        local[k].scale = scale[k];
        local[k].target = (truth_l[k].col(i) - cur_l[k].col(i)) / scale[k];
      }
      stage.forests[i] = train_forest(local, i, model.radii[t][i], config.forest,
                                      mix_seed(config.seed, static_cast<std::uint64_t>(t) * nl + i));
    });

    const int columns = stage.feature_count();
    std::vector<std::vector<int>> active(n);
    parallel_for(n, [&](int k) {
      active[k] = encode_binary(data.images[data.pairs[k].image], params[k], stage, basis_of(k), camera,
                                config.z_ref);
    });
    MatrixX targets(n, model.dimension());
    for (int k = 0; k < n; ++k) targets.row(k) = (truth[k] - current[k]).cwiseProduct(norm).transpose();
    const MatrixX w_norm = solve_ridge(active, columns, targets, config.lambda);
    stage.w = (norm.cwiseInverse().asDiagonal() * w_norm).cast<float>();

    for (int k = 0; k < n; ++k) {
      for (int a : active[k]) current[k] += stage.w.col(a).cast<double>();
    }
    model.stages.push_back(std::move(stage));
    record();
  }
  return model;
}

ShapeParams predict(const RegressorModel& model, const GrayImage& image, const ShapeParams& p_in,
                    const ExpressionBasis& landmarks, const CameraIntrinsics& camera) {
  require(p_in.expr.size() == model.expression_count && p_in.landmark_count() == model.landmark_count,
          ErrorCategory::dimension_mismatch, "parameters do not match the regressor");
  VectorX p = p_in.to_vector();
  for (const auto& stage : model.stages) {
    const ShapeParams cur = ShapeParams::from_vector(p, model.expression_count, model.landmark_count);
    for (int a : encode_binary(image, cur, stage, landmarks, camera, model.z_ref)) p += stage.w.col(a).cast<double>();
  }
  ShapeParams out = ShapeParams::from_vector(p, model.expression_count, model.landmark_count);
  out.expr = out.expr.cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

void save_regressor(const std::filesystem::path& path, const RegressorModel& model) {
  io::BinaryWriter w(path);
  w.magic("BTRM");
  w.put<std::uint32_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.expression_count));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.landmark_count));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.stages.size()));
  w.put<double>(model.reference_face_px);
  w.put<double>(model.z_ref);
  for (std::size_t t = 0; t < model.stages.size(); ++t) {
    const StageModel& stage = model.stages[t];
    require(model.radii.size() == model.stages.size() &&
                model.radii[t].size() == static_cast<std::size_t>(model.landmark_count) &&
                stage.forests.size() == static_cast<std::size_t>(model.landmark_count),
            ErrorCategory::dimension_mismatch, "inconsistent regressor model");
    w.put_array(model.radii[t].data(), model.radii[t].size());
    for (const auto& forest : stage.forests) {
      w.put<std::int32_t>(forest.landmark);
      w.put<std::uint32_t>(static_cast<std::uint32_t>(forest.trees.size()));
      for (const auto& tree : forest.trees) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(tree.nodes.size()));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(tree.leaf_count));
        for (const auto& node : tree.nodes) {
          w.put(node.ax);
          w.put(node.ay);
          w.put(node.bx);
          w.put(node.by);
          w.put(node.threshold);
          w.put(node.left);
          w.put(node.right);
          w.put(node.leaf);
        }
      }
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(stage.w.rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(stage.w.cols()));
    const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> row_major = stage.w;
    w.put_array(row_major.data(), static_cast<std::size_t>(row_major.size()));
  }
  w.finish();
}

RegressorModel load_regressor(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic("BTRM");
  require(r.get<std::uint32_t>() == 1, ErrorCategory::format, path.string() + ": unsupported regressor version");
  RegressorModel model;
  model.expression_count = static_cast<int>(r.get<std::uint32_t>());
  model.landmark_count = static_cast<int>(r.get<std::uint32_t>());
  const std::uint32_t stages = r.get<std::uint32_t>();
  model.reference_face_px = r.get<double>();
  model.z_ref = r.get<double>();
  const std::string where = path.string() + ": ";
  require(model.landmark_count > 0 && model.landmark_count < (1 << 20) && stages < (1u << 16),
          ErrorCategory::format, where + "implausible dimensions");
  for (std::uint32_t t = 0; t < stages; ++t) {
    std::vector<float> radii(model.landmark_count);
    r.get_array(radii.data(), radii.size());
    model.radii.push_back(std::move(radii));
    StageModel stage;
    int total_leaves = 0;
    for (int i = 0; i < model.landmark_count; ++i) {
      Forest forest;
      forest.landmark = r.get<std::int32_t>();
      require(forest.landmark >= 0 && forest.landmark < model.landmark_count, ErrorCategory::format,
              where + "forest landmark out of range");
      const std::uint32_t trees = r.get<std::uint32_t>();
      require(trees < (1u << 16), ErrorCategory::format, where + "implausible tree count");
      for (std::uint32_t k = 0; k < trees; ++k) {
        RegressionTree tree;
        const std::uint32_t nodes = r.get<std::uint32_t>();
        tree.leaf_count = static_cast<int>(r.get<std::uint32_t>());
        require(nodes >= 1 && nodes < (1u << 24), ErrorCategory::format, where + "implausible node count");
        tree.nodes.resize(nodes);
        for (std::uint32_t id = 0; id < nodes; ++id) {
          TreeNode& node = tree.nodes[id];
          node.ax = r.get<float>();
          node.ay = r.get<float>();
          node.bx = r.get<float>();
          node.by = r.get<float>();
          node.threshold = r.get<std::int32_t>();
          node.left = r.get<std::int32_t>();
          node.right = r.get<std::int32_t>();
          node.leaf = r.get<std::int32_t>();
          const auto n = static_cast<std::int32_t>(nodes);
          const auto self = static_cast<std::int32_t>(id);
          require(node.is_leaf() ? node.leaf < tree.leaf_count
                                 : (node.left > self && node.left < n && node.right > self && node.right < n),
                  ErrorCategory::format, where + "corrupt tree node");
        }
        total_leaves += tree.leaf_count;
        forest.trees.push_back(std::move(tree));
      }
      stage.forests.push_back(std::move(forest));
    }
    const std::uint32_t rows = r.get<std::uint32_t>();
    const std::uint32_t cols = r.get<std::uint32_t>();
    require(static_cast<int>(rows) == model.dimension() && static_cast<int>(cols) == total_leaves,
            ErrorCategory::format, where + "regression matrix has wrong shape");
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> row_major(rows, cols);
    r.get_array(row_major.data(), static_cast<std::size_t>(row_major.size()));
    stage.w = row_major;
    model.stages.push_back(std::move(stage));
  }
  require(r.at_end(), ErrorCategory::format, where + "trailing bytes");
  return model;
}

}  // namespace facetrack
