#include "facetrack/model_io.hpp"
#include "facetrack/binary_io.hpp"
#include "facetrack/config.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

namespace facetrack {

void write_core_tensor(const std::filesystem::path& path, const ReducedCoreTensor& tensor) {
  io::BinaryWriter w(path);
  w.magic("BTCT");
  w.put<std::uint32_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensor.dims().vertices));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensor.dims().identities));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensor.dims().expressions));
  w.put_array(tensor.data().data(), tensor.data().size());
  for (const auto& u : tensor.exp_basis()) w.put_array(u.data(), static_cast<std::size_t>(u.size()));
  w.finish();
}

ReducedCoreTensor read_core_tensor(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic("BTCT");
  const auto version = r.get<std::uint32_t>();
  require(version == 1, ErrorCategory::format, path.string() + ": unsupported tensor version");
  ModelDims dims;
  dims.vertices = static_cast<int>(r.get<std::uint32_t>());
  dims.identities = static_cast<int>(r.get<std::uint32_t>());
  dims.expressions = static_cast<int>(r.get<std::uint32_t>());
  require(dims.vertices > 0 && dims.identities > 0 && dims.expressions > 0 && dims.vertices < (1 << 24) &&
              dims.identities < 4096 && dims.expressions < 4096,
          ErrorCategory::format, path.string() + ": bad tensor dimensions");
  std::vector<double> data(static_cast<std::size_t>(3) * dims.vertices * dims.identities * dims.expressions);
  r.get_array(data.data(), data.size());
  std::vector<VectorX> basis(dims.expressions, VectorX(dims.expressions));
  for (auto& u : basis) r.get_array(u.data(), static_cast<std::size_t>(u.size()));
  return ReducedCoreTensor(dims, std::move(data), std::move(basis));
}

void write_triangles(const std::filesystem::path& path, const MeshTopology& topology) {
  std::ofstream out(path);
  require(out.good(), ErrorCategory::io, "cannot open for writing: " + path.string());
  for (const auto& t : topology.triangles) out << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
}

void write_landmarks(const std::filesystem::path& path, const MeshTopology& topology) {
  std::ofstream out(path);
  require(out.good(), ErrorCategory::io, "cannot open for writing: " + path.string());
  for (int v : topology.landmark_vertices) out << v << '\n';
}

MeshTopology read_topology(const std::filesystem::path& triangles, const std::filesystem::path& landmarks) {
  MeshTopology topo;
  std::ifstream tin(triangles);
  require(tin.good(), ErrorCategory::io, "cannot open for reading: " + triangles.string());
  std::string line;
  while (std::getline(tin, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::array<int, 3> t{};
    require(static_cast<bool>(ls >> t[0] >> t[1] >> t[2]), ErrorCategory::format,
            triangles.string() + ": expected three indices per line");
    topo.triangles.push_back(t);
  }
  std::ifstream lin(landmarks);
  require(lin.good(), ErrorCategory::io, "cannot open for reading: " + landmarks.string());
  while (std::getline(lin, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    int v = 0;
    require(static_cast<bool>(ls >> v), ErrorCategory::format, landmarks.string() + ": expected one index per line");
    topo.landmark_vertices.push_back(v);
  }
  return topo;
}

void write_intrinsics(const std::filesystem::path& path, const CameraIntrinsics& camera) {
  std::ofstream out(path);
  require(out.good(), ErrorCategory::io, "cannot open for writing: " + path.string());
  out << std::setprecision(17);
  out << "fx = " << camera.fx << "\nfy = " << camera.fy << "\ncx = " << camera.cx << "\ncy = " << camera.cy
      << "\nwidth = " << camera.width << "\nheight = " << camera.height << "\n";
}

CameraIntrinsics read_intrinsics(const std::filesystem::path& path) {
  const auto cfg = KeyValueConfig::load(path);
  CameraIntrinsics k;
  k.fx = cfg.get_double("fx", k.fx);
  k.fy = cfg.get_double("fy", k.fy);
  k.cx = cfg.get_double("cx", k.cx);
  k.cy = cfg.get_double("cy", k.cy);
  k.width = cfg.get_int("width", k.width);
  k.height = cfg.get_int("height", k.height);
  k.validate();
  return k;
}

}  // namespace facetrack
