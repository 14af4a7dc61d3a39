#pragma once

#include "facetrack/face_model.hpp"

#include <filesystem>

namespace facetrack {

/// Core tensor file: magic "BTCT", u32 version, u32 N_v, u32 N_id, u32 N_e,
/// 3*N_v*N_id*N_e float64 in vertex-major order, then N_e*N_e float64 of
/// exp_basis (vector j contiguous). Little-endian.
void write_core_tensor(const std::filesystem::path& path, const ReducedCoreTensor& tensor);
ReducedCoreTensor read_core_tensor(const std::filesystem::path& path);

/// Triangles: one "a b c" index triple per line.
void write_triangles(const std::filesystem::path& path, const MeshTopology& topology);
/// Landmarks: one vertex index per line.
void write_landmarks(const std::filesystem::path& path, const MeshTopology& topology);
MeshTopology read_topology(const std::filesystem::path& triangles, const std::filesystem::path& landmarks);

/// Key-value text with fx, fy, cx, cy, width, height.
void write_intrinsics(const std::filesystem::path& path, const CameraIntrinsics& camera);
CameraIntrinsics read_intrinsics(const std::filesystem::path& path);

}  // namespace facetrack
