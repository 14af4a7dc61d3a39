#pragma once

#include "facetrack/common.hpp"

#include <vector>

namespace facetrack {

/// Static 3D k-d tree over a point set; stores indices into the caller's array.
class KdTree {
 public:
  KdTree() = default;
  KdTree(const std::vector<Vec3>& points, const std::vector<int>& indices);

  bool empty() const { return order_.empty(); }
  std::size_t size() const { return order_.size(); }

  /// Index of the nearest point within max_distance, or -1.
  int nearest(const Vec3& query, double max_distance, double* distance = nullptr) const;

 private:
  struct Node {
    int begin, end;  // range in order_
    int axis = -1;   // -1 for a leaf
    double split = 0.0;
    int left = -1, right = -1;
  };
  int build(int begin, int end);
  void search(int node, const Vec3& q, int& best, double& best_d2) const;

  std::vector<Vec3> points_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
};

}  // namespace facetrack
