#pragma once

#include "facetrack/face_model.hpp"
#include "facetrack/image.hpp"

#include <vector>

namespace facetrack {

/// Per-pixel visibility from z-buffer rasterization. Pixel centers sit at
/// integer coordinates. Barycentrics are perspective-correct.
struct RasterResult {
  DepthMap depth;                 // 0 where no triangle covers the pixel
  std::vector<int> triangle;      // covering triangle, -1 if none
  std::vector<Eigen::Vector3f> barycentric;
};

/// Rasterizes camera-space vertices. Triangles facing away from the camera
/// and triangles with a vertex at z <= near are skipped.
RasterResult rasterize(const VertexArray& camera_vertices, const MeshTopology& topology,
                       const CameraIntrinsics& camera, double near = 1e-3);

}  // namespace facetrack
