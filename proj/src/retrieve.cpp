#include "nextloc/retrieve.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace nextloc::retrieve {

namespace {

// Ordering shared by the tree search and the test oracle: squared distance
// first, id breaks ties.
struct Ranked {
  double d2;
  std::int64_t id;
  bool operator<(const Ranked& o) const {
    if (d2 != o.d2) return d2 < o.d2;
    return id < o.id;
  }
};

}  // namespace

LocationIndex LocationIndex::build(std::span<const Candidate> locations) {
  if (locations.empty()) {
    throw RetrieveError("build_index: empty candidate set");
  }
  LocationIndex idx;
  idx.points_.assign(locations.begin(), locations.end());
  for (const auto& c : idx.points_) {
    if (!std::isfinite(c.x) || !std::isfinite(c.y)) {
      throw RetrieveError("build_index: non-finite center");
    }
  }
  idx.nodes_.reserve(idx.points_.size());
  std::vector<int> order(idx.points_.size());
  std::iota(order.begin(), order.end(), 0);
  idx.root_ = idx.build_range(order, 0, static_cast<int>(order.size()), 0);
  return idx;
}

int LocationIndex::build_range(std::vector<int>& order, int lo, int hi,
                               int depth) {
  if (lo >= hi) return -1;
  const int axis = depth % 2;
  const int mid = lo + (hi - lo) / 2;
  // nth_element with a total order (coordinate, then id) keeps the build
  // deterministic for duplicate coordinates.
  std::nth_element(order.begin() + lo, order.begin() + mid, order.begin() + hi,
                   [&](int a, int b) {
                     const double ca =
                         axis == 0 ? points_[a].x : points_[a].y;
                     const double cb =
                         axis == 0 ? points_[b].x : points_[b].y;
                     if (ca != cb) return ca < cb;
                     return points_[a].id < points_[b].id;
                   });
  Node n;
  n.point = order[mid];
  n.axis = axis;
  const int self = static_cast<int>(nodes_.size());
  nodes_.push_back(n);
  const int left = build_range(order, lo, mid, depth + 1);
  const int right = build_range(order, mid + 1, hi, depth + 1);
  nodes_[self].left = left;
  nodes_[self].right = right;
  return self;
}

std::vector<Hit> LocationIndex::query_topk(double qx, double qy, int k) const {
  if (k < 1) throw RetrieveError("query_topk: k must be >= 1");
  const std::size_t want =
      std::min<std::size_t>(static_cast<std::size_t>(k), points_.size());

  // Bounded worst-first heap of the best candidates seen so far.
  std::vector<Ranked> heap;
  heap.reserve(want + 1);
  auto worse_first = [](const Ranked& a, const Ranked& b) { return a < b; };

  auto consider = [&](int point_idx) {
    const Candidate& c = points_[static_cast<std::size_t>(point_idx)];
    const double dx = c.x - qx;
    const double dy = c.y - qy;
    Ranked r{dx * dx + dy * dy, c.id};
    if (heap.size() < want) {
      heap.push_back(r);
      std::push_heap(heap.begin(), heap.end(), worse_first);
    } else if (r < heap.front()) {
      std::pop_heap(heap.begin(), heap.end(), worse_first);
      heap.back() = r;
      std::push_heap(heap.begin(), heap.end(), worse_first);
    }
  };

  // Recursive descent, near side first; prune when the splitting plane is
  // farther than the current worst kept distance.
  auto visit = [&](auto&& self, int node_idx) -> void {
    if (node_idx < 0) return;
    const Node& n = nodes_[static_cast<std::size_t>(node_idx)];
    consider(n.point);
    const Candidate& c = points_[static_cast<std::size_t>(n.point)];
    const double delta = (n.axis == 0 ? qx - c.x : qy - c.y);
    const int near = delta < 0 ? n.left : n.right;
    const int far = delta < 0 ? n.right : n.left;
    self(self, near);
    if (heap.size() < want || delta * delta <= heap.front().d2) {
      self(self, far);
    }
  };
  visit(visit, root_);

  std::sort(heap.begin(), heap.end());
  std::vector<Hit> out;
  out.reserve(heap.size());
  for (const auto& r : heap) {
    out.push_back({r.id, std::sqrt(r.d2)});
  }
  return out;
}

double hit_at_k(const std::vector<std::vector<std::int64_t>>& predictions,
                const std::vector<std::int64_t>& truths, int k) {
  if (predictions.size() != truths.size()) {
    throw RetrieveError("hit_at_k: prediction/truth length mismatch");
  }
  if (predictions.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& ids = predictions[i];
    const std::size_t upto =
        std::min<std::size_t>(static_cast<std::size_t>(k), ids.size());
    for (std::size_t j = 0; j < upto; ++j) {
      if (ids[j] == truths[i]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

double mean_distance_planar(std::span<const geo::MercatorPoint> predicted,
                            std::span<const geo::MercatorPoint> truth_centers) {
  if (predicted.size() != truth_centers.size()) {
    throw RetrieveError("mean_distance: length mismatch");
  }
  if (predicted.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double dx = predicted[i].x - truth_centers[i].x;
    const double dy = predicted[i].y - truth_centers[i].y;
    sum += std::sqrt(dx * dx + dy * dy);
  }
  return sum / static_cast<double>(predicted.size());
}

double mean_distance_geodesic(
    std::span<const geo::MercatorPoint> predicted,
    std::span<const geo::MercatorPoint> truth_centers) {
  if (predicted.size() != truth_centers.size()) {
    throw RetrieveError("mean_distance: length mismatch");
  }
  if (predicted.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    sum += geo::geodesic_distance(geo::from_mercator(predicted[i]),
                                  geo::from_mercator(truth_centers[i]));
  }
  return sum / static_cast<double>(predicted.size());
}

}  // namespace nextloc::retrieve
