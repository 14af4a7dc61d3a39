#include "facetrack/kdtree.hpp"

#include <algorithm>
#include <cmath>

namespace facetrack {

namespace {
constexpr int kLeafSize = 8;
}

KdTree::KdTree(const std::vector<Vec3>& points, const std::vector<int>& indices) : points_(points), order_(indices) {
  for (int i : order_) require(i >= 0 && i < static_cast<int>(points_.size()), ErrorCategory::invalid_input,
                               "k-d tree index out of range");
  if (!order_.empty()) build(0, static_cast<int>(order_.size()));
}

int KdTree::build(int begin, int end) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back({begin, end});
  if (end - begin <= kLeafSize) return id;
  Vec3 lo = points_[order_[begin]], hi = lo;
  for (int k = begin + 1; k < end; ++k) {
    lo = lo.cwiseMin(points_[order_[k]]);
    hi = hi.cwiseMax(points_[order_[k]]);
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  const int mid = (begin + end) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](int a, int b) { return points_[a][axis] < points_[b][axis]; });
  nodes_[id].axis = axis;
  nodes_[id].split = points_[order_[mid]][axis];
  const int l = build(begin, mid);
  const int r = build(mid, end);
  nodes_[id].left = l;
  nodes_[id].right = r;
  return id;
}

void KdTree::search(int node, const Vec3& q, int& best, double& best_d2) const {
  const Node& n = nodes_[node];
  if (n.axis < 0) {
    for (int k = n.begin; k < n.end; ++k) {
      const int i = order_[k];
      const double d2 = (points_[i] - q).squaredNorm();
      if (d2 < best_d2 || (d2 == best_d2 && i < best)) {
        best_d2 = d2;
        best = i;
      }
    }
    return;
  }
  const double diff = q[n.axis] - n.split;
  const int near = diff < 0.0 ? n.left : n.right;
  const int far = diff < 0.0 ? n.right : n.left;
  search(near, q, best, best_d2);
  if (diff * diff <= best_d2) search(far, q, best, best_d2);
}

int KdTree::nearest(const Vec3& query, double max_distance, double* distance) const {
  int best = -1;
  double best_d2 = max_distance * max_distance;
  if (!nodes_.empty()) search(0, query, best, best_d2);
  if (best >= 0 && distance) *distance = std::sqrt(best_d2);
  return best;
}

}  // namespace facetrack
