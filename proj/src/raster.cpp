#include "facetrack/raster.hpp"

#include <algorithm>
#include <cmath>

namespace facetrack {

RasterResult rasterize(const VertexArray& camera_vertices, const MeshTopology& topology,
                       const CameraIntrinsics& camera, double near) {
  camera.validate();
  const int w = camera.width;
  const int h = camera.height;
  RasterResult out;
  out.depth = DepthMap(w, h);
  out.triangle.assign(static_cast<std::size_t>(w) * h, -1);
  out.barycentric.assign(static_cast<std::size_t>(w) * h, Eigen::Vector3f::Zero());

  for (int t = 0; t < static_cast<int>(topology.triangles.size()); ++t) {
    const auto& tri = topology.triangles[t];
    const Vec3 p0 = camera_vertices.col(tri[0]);
    const Vec3 p1 = camera_vertices.col(tri[1]);
    const Vec3 p2 = camera_vertices.col(tri[2]);
    if (p0.z() <= near || p1.z() <= near || p2.z() <= near) continue;
    const Vec3 normal = (p1 - p0).cross(p2 - p0);
    if (normal.dot(p0) >= 0.0) continue;  // back-facing

    const Vec2 s0 = camera.project(p0), s1 = camera.project(p1), s2 = camera.project(p2);
    const double area = (s1.x() - s0.x()) * (s2.y() - s0.y()) - (s1.y() - s0.y()) * (s2.x() - s0.x());
    if (std::abs(area) < 1e-12) continue;

    const int x_min = std::max(0, static_cast<int>(std::ceil(std::min({s0.x(), s1.x(), s2.x()}))));
    const int x_max = std::min(w - 1, static_cast<int>(std::floor(std::max({s0.x(), s1.x(), s2.x()}))));
    const int y_min = std::max(0, static_cast<int>(std::ceil(std::min({s0.y(), s1.y(), s2.y()}))));
    const int y_max = std::min(h - 1, static_cast<int>(std::floor(std::max({s0.y(), s1.y(), s2.y()}))));
    if (x_min > x_max || y_min > y_max) continue;

    const double iz0 = 1.0 / p0.z(), iz1 = 1.0 / p1.z(), iz2 = 1.0 / p2.z();
    const double inv_area = 1.0 / area;
    for (int y = y_min; y <= y_max; ++y) {
      for (int x = x_min; x <= x_max; ++x) {
        const double px = x, py = y;
        const double l0 = ((s1.x() - px) * (s2.y() - py) - (s1.y() - py) * (s2.x() - px)) * inv_area;
        const double l1 = ((s2.x() - px) * (s0.y() - py) - (s2.y() - py) * (s0.x() - px)) * inv_area;
        const double l2 = 1.0 - l0 - l1;
        if (l0 < 0.0 || l1 < 0.0 || l2 < 0.0) continue;
        const double inv_z = l0 * iz0 + l1 * iz1 + l2 * iz2;
        const double z = 1.0 / inv_z;
        const std::size_t idx = static_cast<std::size_t>(y) * w + x;
        const double current = out.depth.values[idx];
        if (current > 0.0 && current <= z) continue;
        out.depth.values[idx] = z;
        out.triangle[idx] = t;
        out.barycentric[idx] = Eigen::Vector3f(static_cast<float>(l0 * iz0 * z), static_cast<float>(l1 * iz1 * z),
                                               static_cast<float>(l2 * iz2 * z));
      }
    }
  }
  return out;
}

}  // namespace facetrack
