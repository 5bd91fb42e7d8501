// KD-tree over candidate location centers, exact top-k retrieval, and the
// Hit@k / mean-distance evaluation metrics. The built index is immutable and
// safe to query from any number of threads.
#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "nextloc/geo.hpp"

namespace nextloc::retrieve {

class RetrieveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Candidate {
  std::int64_t id = 0;
  double x = 0.0;
  double y = 0.0;
};

struct Hit {
  std::int64_t id = 0;
  double distance = 0.0;  // same units as the indexed coordinates
};

// Balanced 2-d tree, median split with alternating axes. Duplicate centers
// are allowed; ties on distance break toward the smaller id.
class LocationIndex {
 public:
  static LocationIndex build(std::span<const Candidate> locations);

  // Exact k nearest by Euclidean distance; nondecreasing distance, then
  // ascending id. Returns all candidates when k exceeds the index size.
  std::vector<Hit> query_topk(double qx, double qy, int k) const;

  std::size_t size() const { return points_.size(); }

 private:
  struct Node {
    int point = -1;   // index into points_
    int left = -1;
    int right = -1;
    int axis = 0;
  };

  std::vector<Candidate> points_;
  std::vector<Node> nodes_;
  int root_ = -1;

  int build_range(std::vector<int>& order, int lo, int hi, int depth);
};

// Fraction of cases whose true id appears within the first k entries.
double hit_at_k(const std::vector<std::vector<std::int64_t>>& predictions,
                const std::vector<std::int64_t>& truths, int k);

// Mean planar Euclidean distance in meters between predicted points and true
// centers. Suits virtual-coordinate cities.
double mean_distance_planar(std::span<const geo::MercatorPoint> predicted,
                            std::span<const geo::MercatorPoint> truth_centers);

// Mean haversine distance between inverse-projected points; for real cities.
double mean_distance_geodesic(
    std::span<const geo::MercatorPoint> predicted,
    std::span<const geo::MercatorPoint> truth_centers);

}  // namespace nextloc::retrieve
