#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "f3r/geometry.hpp"

namespace f3r {

/// Static 3-D kd-tree answering exact nearest-neighbour queries.
class KdTree {
 public:
  explicit KdTree(std::span<const Vec3> points);

  struct Neighbor {
    std::size_t index = 0;
    double squared_distance = 0.0;
  };

  /// Requires a non-empty tree.
  Neighbor nearest(const Vec3& query) const;
  std::size_t size() const { return points_.size(); }

 private:
  struct Node {
    std::size_t point = 0;  // index into points_
    int axis = 0;
    int left = -1;
    int right = -1;
  };

  int build(std::size_t begin, std::size_t end, int depth);
  void search(int node, const Vec3& q, Neighbor& best) const;

  std::vector<Vec3> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace f3r
