#include "facetrack/depth_filter.hpp"
#include "facetrack/parallel.hpp"
#include "facetrack/raster.hpp"

#include <cmath>

namespace facetrack {

namespace {

void check_sizes(const DepthMap& a, const DepthMap& b) {
  require(a.width == b.width && a.height == b.height, ErrorCategory::dimension_mismatch, "depth map sizes differ");
}

}  // namespace

void FilterConfig::validate() const {
  require(radius >= 0 && iterations >= 0, ErrorCategory::invalid_input, "filter radius and iterations must be >= 0");
  require(sigma_s > 0.0 && sigma_c > 0.0 && sigma_d > 0.0, ErrorCategory::invalid_input,
          "filter bandwidths must be positive");
  require(lambda_d >= 0.0 && lambda_f >= 0.0, ErrorCategory::invalid_input, "filter weights must be >= 0");
  require(lambda_d + lambda_f > 0.0 || radius >= 1, ErrorCategory::invalid_input, "filter update is undefined");
}

DepthMap render_prior_depth(const VertexArray& camera_vertices, const MeshTopology& topology,
                            const CameraIntrinsics& camera) {
  return rasterize(camera_vertices, topology, camera).depth;
}

double JtfWeights::at(int x, int y, int dx, int dy) const {
  if (std::abs(dx) > radius || std::abs(dy) > radius || x < 0 || y < 0 || x >= width || y >= height) return 0.0;
  const int s = slot[static_cast<std::size_t>(y) * width + x];
  if (s < 0) return 0.0;
  return alpha[static_cast<std::size_t>(s) * window() + (dy + radius) * (2 * radius + 1) + (dx + radius)];
}

JtfWeights jtf_weights(const GrayImage& guide, const DepthMap& raw, const DepthMap& prior, const FilterConfig& config) {
  config.validate();
  check_sizes(raw, prior);
  require(guide.width == raw.width && guide.height == raw.height, ErrorCategory::dimension_mismatch,
          "guide image size differs from the depth maps");
  JtfWeights w;
  w.width = raw.width;
  w.height = raw.height;
  w.radius = config.radius;
  w.slot.assign(raw.size(), -1);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw.valid(i) || prior.valid(i)) {
      w.slot[i] = static_cast<int>(w.pixels.size());
      w.pixels.push_back(static_cast<int>(i));
    }
  }
  const int r = config.radius;
  const int win = w.window();
  const std::size_t n = w.pixels.size();
  w.alpha.assign(n * win, 0.0);
  w.symmetric.assign(n * win, 0.0);
  const double ks = 1.0 / (2.0 * config.sigma_s * config.sigma_s);
  const double kc = 1.0 / (2.0 * config.sigma_c * config.sigma_c);
  const double kd = 1.0 / (2.0 * config.sigma_d * config.sigma_d);

  parallel_for(static_cast<int>(n), [&](int s) {
    const int i = w.pixels[s];
    const int x = i % w.width, y = i / w.width;
    double* a = &w.alpha[static_cast<std::size_t>(s) * win];
    double sum = 0.0;
    for (int dy = -r; dy <= r; ++dy) {
      for (int dx = -r; dx <= r; ++dx) {
        const int xx = x + dx, yy = y + dy;
        if (xx < 0 || yy < 0 || xx >= w.width || yy >= w.height) continue;
        const std::size_t j = static_cast<std::size_t>(yy) * w.width + xx;
        if (w.slot[j] < 0) continue;
        const double dc = static_cast<double>(guide.values[i]) - guide.values[j];
        double v = std::exp(-(dx * dx + dy * dy) * ks - dc * dc * kc);
        if (raw.valid(static_cast<std::size_t>(i)) && raw.valid(j)) {
          const double dz = raw.values[i] - raw.values[j];
          v *= std::exp(-dz * dz * kd);
        }
        a[(dy + r) * (2 * r + 1) + (dx + r)] = v;
        sum += v;
      }
    }
    for (int k = 0; k < win; ++k) a[k] /= sum;
  });

  parallel_for(static_cast<int>(n), [&](int s) {
    const int i = w.pixels[s];
    const int x = i % w.width, y = i / w.width;
    const double* a = &w.alpha[static_cast<std::size_t>(s) * win];
    double* sym = &w.symmetric[static_cast<std::size_t>(s) * win];
    for (int dy = -r; dy <= r; ++dy) {
      for (int dx = -r; dx <= r; ++dx) {
        const int k = (dy + r) * (2 * r + 1) + (dx + r);
        if (a[k] == 0.0) continue;
        sym[k] = a[k] + w.at(x + dx, y + dy, -dx, -dy);
      }
    }
  });
  return w;
}

double filter_energy(const DepthMap& x, const DepthMap& raw, const DepthMap& prior, const JtfWeights& weights,
                     const FilterConfig& config) {
  check_sizes(x, raw);
  check_sizes(x, prior);
  const int r = weights.radius;
  const int win = weights.window();
  double smooth = 0.0, data = 0.0, face = 0.0;
  for (std::size_t s = 0; s < weights.pixels.size(); ++s) {
    const int i = weights.pixels[s];
    const int px = i % weights.width, py = i / weights.width;
    const double* a = &weights.alpha[s * win];
    for (int dy = -r; dy <= r; ++dy) {
      for (int dx = -r; dx <= r; ++dx) {
        const double aw = a[(dy + r) * (2 * r + 1) + (dx + r)];
        if (aw == 0.0) continue;
        const double d = x.values[i] - x.values[static_cast<std::size_t>(py + dy) * weights.width + px + dx];
        smooth += aw * d * d;
      }
    }
    if (raw.valid(static_cast<std::size_t>(i))) data += (x.values[i] - raw.values[i]) * (x.values[i] - raw.values[i]);
    if (prior.valid(static_cast<std::size_t>(i))) {
      face += (x.values[i] - prior.values[i]) * (x.values[i] - prior.values[i]);
    }
  }
  return 0.5 * smooth + 0.5 * config.lambda_d * data + 0.5 * config.lambda_f * face;
}

int filter_step(const DepthMap& x, const DepthMap& raw, const DepthMap& prior, const JtfWeights& weights,
                const FilterConfig& config, DepthMap& next) {
  check_sizes(x, raw);
  check_sizes(x, prior);
  require(weights.width == x.width && weights.height == x.height, ErrorCategory::dimension_mismatch,
          "weights do not match the depth maps");
  next = x;
  const int r = weights.radius;
  const int win = weights.window();
  std::vector<std::uint8_t> zero(weights.pixels.size(), 0);
  parallel_for(static_cast<int>(weights.pixels.size()), [&](int s) {
    const int i = weights.pixels[s];
    const int px = i % weights.width, py = i / weights.width;
    const double* sym = &weights.symmetric[static_cast<std::size_t>(s) * win];
    double num = 0.0, den = 0.0;
    if (raw.valid(static_cast<std::size_t>(i))) {
      num += config.lambda_d * raw.values[i];
      den += config.lambda_d;
    }
    if (prior.valid(static_cast<std::size_t>(i))) {
      num += config.lambda_f * prior.values[i];
      den += config.lambda_f;
    }
    for (int dy = -r; dy <= r; ++dy) {
      for (int dx = -r; dx <= r; ++dx) {
        const double w = sym[(dy + r) * (2 * r + 1) + (dx + r)];
        if (w == 0.0) continue;
        num += w * x.values[static_cast<std::size_t>(py + dy) * weights.width + px + dx];
        den += w;
      }
    }
    if (den > 0.0) {
      next.values[i] = num / den;
    } else {
      zero[s] = 1;
    }
  });
  int flagged = 0;
  for (auto z : zero) flagged += z;
  return flagged;
}

RecoverResult recover(const DepthMap& raw, const DepthMap& prior, const GrayImage& guide, const FilterConfig& config,
                      bool track_energy) {
  config.validate();
  check_sizes(raw, prior);
  RecoverResult out;
  if (raw.valid_count() == 0 && prior.valid_count() == 0) {
    out.flagged = true;
    out.depth = DepthMap(raw.width, raw.height);
    return out;
  }
  DepthMap x(raw.width, raw.height);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x.values[i] = raw.valid(i) ? raw.values[i] : prior.valid(i) ? prior.values[i] : 0.0;
  }
  const JtfWeights weights = jtf_weights(guide, raw, prior, config);
  if (track_energy) out.energies.push_back(filter_energy(x, raw, prior, weights, config));
  DepthMap next;
  for (int t = 0; t < config.iterations; ++t) {
    out.zero_denominators = filter_step(x, raw, prior, weights, config, next);
    x.values.swap(next.values);
    if (track_energy) out.energies.push_back(filter_energy(x, raw, prior, weights, config));
  }
  out.depth = std::move(x);
  return out;
}

std::vector<bool> valid_mask(const std::vector<const DepthMap*>& maps) {
  require(!maps.empty(), ErrorCategory::invalid_input, "no depth maps");
  std::vector<bool> mask(maps.front()->size(), true);
  for (const DepthMap* m : maps) {
    check_sizes(*m, *maps.front());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = mask[i] && m->valid(i);
  }
  return mask;
}

}  // namespace facetrack
