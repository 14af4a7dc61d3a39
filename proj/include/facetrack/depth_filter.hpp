#pragma once

#include "facetrack/face_model.hpp"
#include "facetrack/image.hpp"

#include <vector>

namespace facetrack {

struct FilterConfig {
  int radius = 3;          // window half width, pixels
  double sigma_s = 3.0;    // pixels
  double sigma_c = 10.0;   // gray levels
  double sigma_d = 0.05;   // meters
  double lambda_d = 1.0;   // raw depth fidelity
  double lambda_f = 2.0;   // face prior
  int iterations = 30;

  void validate() const;
};

/// Z-buffered depth of camera-space vertices at the camera resolution; 0 where
/// no triangle covers a pixel.
DepthMap render_prior_depth(const VertexArray& camera_vertices, const MeshTopology& topology,
                            const CameraIntrinsics& camera);

/// Normalized trilateral weights over the filter domain (pixels where the raw
/// or the prior depth is valid). Window offsets are stored row-major.
struct JtfWeights {
  int width = 0;
  int height = 0;
  int radius = 0;
  std::vector<int> pixels;        // domain pixel indices
  std::vector<int> slot;          // pixel -> position in `pixels`, -1 outside
  std::vector<double> alpha;      // alpha_ij, window() entries per domain pixel
  std::vector<double> symmetric;  // alpha_ij + alpha_ji

  int window() const { return (2 * radius + 1) * (2 * radius + 1); }
  bool in_domain(std::size_t pixel) const { return slot[pixel] >= 0; }
  /// alpha_ij for j = i + (dx, dy); 0 outside the domain or window.
  double at(int x, int y, int dx, int dy) const;
};

/// Guide depth is the raw map; the depth factor is 1 when either depth is invalid.
JtfWeights jtf_weights(const GrayImage& guide, const DepthMap& raw, const DepthMap& prior, const FilterConfig& config);

/// E_r + lambda_d E_d + lambda_f E_f over the domain.
double filter_energy(const DepthMap& x, const DepthMap& raw, const DepthMap& prior, const JtfWeights& weights,
                     const FilterConfig& config);

/// One Jacobi update. Returns the number of pixels with a zero denominator,
/// which are copied unchanged.
int filter_step(const DepthMap& x, const DepthMap& raw, const DepthMap& prior, const JtfWeights& weights,
                const FilterConfig& config, DepthMap& next);

struct RecoverResult {
  DepthMap depth;
  bool flagged = false;          // no valid raw or prior depth
  int zero_denominators = 0;
  std::vector<double> energies;  // before the first and after every step, when requested
};

/// X0 = Z, holes filled from V, then `iterations` Jacobi steps.
RecoverResult recover(const DepthMap& raw, const DepthMap& prior, const GrayImage& guide, const FilterConfig& config,
                      bool track_energy = false);

/// Pixels valid in all maps.
std::vector<bool> valid_mask(const std::vector<const DepthMap*>& maps);

}  // namespace facetrack
