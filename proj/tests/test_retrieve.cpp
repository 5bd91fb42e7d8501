#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "nextloc/retrieve.hpp"

using namespace nextloc;

namespace {

// Exhaustive-scan oracle with the same squared-distance-then-id tie-break.
std::vector<retrieve::Hit> brute_force_topk(
    const std::vector<retrieve::Candidate>& pts, double qx, double qy, int k) {
  struct Entry {
    double d2;
    std::int64_t id;
  };
  std::vector<Entry> all;
  all.reserve(pts.size());
  for (const auto& c : pts) {
    const double dx = c.x - qx;
    const double dy = c.y - qy;
    all.push_back({dx * dx + dy * dy, c.id});
  }
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) {
    if (a.d2 != b.d2) return a.d2 < b.d2;
    return a.id < b.id;
  });
  const std::size_t want =
      std::min<std::size_t>(static_cast<std::size_t>(k), all.size());
  std::vector<retrieve::Hit> out;
  for (std::size_t i = 0; i < want; ++i) {
    out.push_back({all[i].id, std::sqrt(all[i].d2)});
  }
  return out;
}

}  // namespace

TEST_CASE("single location answers every query") {
  std::vector<retrieve::Candidate> one = {{42, 10.0, -3.0}};
  auto idx = retrieve::LocationIndex::build(one);
  auto hits = idx.query_topk(1e6, -1e6, 1);
  REQUIRE(hits.size() == 1);
  CHECK(hits[0].id == 42);
}

TEST_CASE("empty candidate set is rejected") {
  std::vector<retrieve::Candidate> none;
  CHECK_THROWS_AS(retrieve::LocationIndex::build(none),
                  retrieve::RetrieveError);
}

TEST_CASE("collinear points still answer exactly") {
  std::vector<retrieve::Candidate> pts = {{1, 0, 0}, {2, 5, 0}, {3, 10, 0}};
  auto idx = retrieve::LocationIndex::build(pts);
  for (double q : {-3.0, 0.1, 4.9, 7.4, 100.0}) {
    auto hits = idx.query_topk(q, 0.0, 3);
    auto oracle = brute_force_topk(pts, q, 0.0, 3);
    REQUIRE(hits.size() == oracle.size());
    for (std::size_t i = 0; i < hits.size(); ++i) {
      CHECK(hits[i].id == oracle[i].id);
    }
  }
}

TEST_CASE("query at a candidate center returns it first with distance 0") {
  std::vector<retrieve::Candidate> pts = {{7, 1.0, 2.0}, {8, 3.0, 4.0}};
  auto idx = retrieve::LocationIndex::build(pts);
  auto hits = idx.query_topk(3.0, 4.0, 2);
  CHECK(hits[0].id == 8);
  CHECK(hits[0].distance == 0.0);
}

TEST_CASE("equidistant pair breaks tie toward the lower id") {
  std::vector<retrieve::Candidate> pts = {{9, -1.0, 0.0}, {4, 1.0, 0.0}};
  auto idx = retrieve::LocationIndex::build(pts);
  auto hits = idx.query_topk(0.0, 0.0, 2);
  CHECK(hits[0].id == 4);
  CHECK(hits[1].id == 9);
}

TEST_CASE("k beyond the candidate count returns everything") {
  std::vector<retrieve::Candidate> pts = {{1, 0, 0}, {2, 1, 1}, {3, 2, 2}};
  auto idx = retrieve::LocationIndex::build(pts);
  auto hits = idx.query_topk(0.0, 0.0, 10);
  CHECK(hits.size() == 3);
}

TEST_CASE("random points match the exhaustive oracle") {
  std::mt19937_64 rng(123);
  std::uniform_real_distribution<double> coord(-1000.0, 1000.0);
  std::vector<retrieve::Candidate> pts;
  for (int i = 0; i < 1000; ++i) {
    pts.push_back({i, coord(rng), coord(rng)});
  }
  // A few duplicate centers with distinct ids to force ties.
  pts.push_back({5000, pts[0].x, pts[0].y});
  pts.push_back({5001, pts[1].x, pts[1].y});
  auto idx = retrieve::LocationIndex::build(pts);
  for (int q = 0; q < 300; ++q) {
    const double qx = coord(rng);
    const double qy = coord(rng);
    for (int k : {1, 5, 10}) {
      auto hits = idx.query_topk(qx, qy, k);
      auto oracle = brute_force_topk(pts, qx, qy, k);
      REQUIRE(hits.size() == oracle.size());
      for (std::size_t i = 0; i < hits.size(); ++i) {
        CHECK(hits[i].id == oracle[i].id);
        CHECK(hits[i].distance ==
              doctest::Approx(oracle[i].distance).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("grid points with exact ties match the oracle ordering") {
  std::vector<retrieve::Candidate> pts;
  int id = 0;
  for (int r = 0; r < 10; ++r) {
    for (int c = 0; c < 10; ++c) {
      pts.push_back({id++, static_cast<double>(c), static_cast<double>(r)});
    }
  }
  auto idx = retrieve::LocationIndex::build(pts);
  // Query at a lattice midpoint: four exactly equidistant neighbors.
  auto hits = idx.query_topk(4.5, 4.5, 4);
  auto oracle = brute_force_topk(pts, 4.5, 4.5, 4);
  for (std::size_t i = 0; i < hits.size(); ++i) {
    CHECK(hits[i].id == oracle[i].id);
  }
  // Ascending-id order among the tied four.
  CHECK(hits[0].id < hits[1].id);
  CHECK(hits[1].id < hits[2].id);
  CHECK(hits[2].id < hits[3].id);
}

TEST_CASE("repeated queries are bitwise stable") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> coord(-10.0, 10.0);
  std::vector<retrieve::Candidate> pts;
  for (int i = 0; i < 100; ++i) pts.push_back({i, coord(rng), coord(rng)});
  auto idx = retrieve::LocationIndex::build(pts);
  auto a = idx.query_topk(0.25, -0.75, 10);
  auto b = idx.query_topk(0.25, -0.75, 10);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].distance == b[i].distance);
  }
}

TEST_CASE("hit_at_k") {
  // Truth at rank 3 (0-based index 2).
  std::vector<std::vector<std::int64_t>> preds = {{10, 11, 12, 13, 14}};
  std::vector<std::int64_t> truths = {12};
  CHECK(retrieve::hit_at_k(preds, truths, 1) == 0.0);
  CHECK(retrieve::hit_at_k(preds, truths, 5) == 1.0);
  CHECK(retrieve::hit_at_k(preds, truths, 10) == 1.0);

  // Empty prediction list counts as a miss.
  preds.push_back({});
  truths.push_back(10);
  CHECK(retrieve::hit_at_k(preds, truths, 5) == doctest::Approx(0.5));

  std::vector<std::int64_t> mismatched = {1, 2, 3};
  CHECK_THROWS_AS(retrieve::hit_at_k(preds, mismatched, 5),
                  retrieve::RetrieveError);
}

TEST_CASE("hit_at_k random fixture matches a hand tally") {
  std::mt19937_64 rng(55);
  std::uniform_int_distribution<int> loc(0, 9);
  std::vector<std::vector<std::int64_t>> preds;
  std::vector<std::int64_t> truths;
  for (int i = 0; i < 20; ++i) {
    std::vector<std::int64_t> row;
    for (int j = 0; j < 10; ++j) row.push_back(loc(rng));
    preds.push_back(row);
    truths.push_back(loc(rng));
  }
  for (int k : {1, 5, 10}) {
    int manual = 0;
    for (int i = 0; i < 20; ++i) {
      for (int j = 0; j < k; ++j) {
        if (preds[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] ==
            truths[static_cast<std::size_t>(i)]) {
          ++manual;
          break;
        }
      }
    }
    CHECK(retrieve::hit_at_k(preds, truths, k) ==
          doctest::Approx(manual / 20.0));
  }
}

TEST_CASE("hit_at_k is nested in k") {
  std::mt19937_64 rng(56);
  std::uniform_int_distribution<int> loc(0, 30);
  std::vector<std::vector<std::int64_t>> preds;
  std::vector<std::int64_t> truths;
  for (int i = 0; i < 200; ++i) {
    std::vector<std::int64_t> row;
    for (int j = 0; j < 10; ++j) row.push_back(loc(rng));
    preds.push_back(row);
    truths.push_back(loc(rng));
  }
  const double h1 = retrieve::hit_at_k(preds, truths, 1);
  const double h5 = retrieve::hit_at_k(preds, truths, 5);
  const double h10 = retrieve::hit_at_k(preds, truths, 10);
  CHECK(h1 <= h5);
  CHECK(h5 <= h10);
}

TEST_CASE("mean distance") {
  std::vector<geo::MercatorPoint> pred = {{30.0, 40.0}};
  std::vector<geo::MercatorPoint> truth = {{0.0, 0.0}};
  CHECK(retrieve::mean_distance_planar(pred, truth) == doctest::Approx(50.0));

  pred.push_back({1.0, 1.0});
  CHECK_THROWS_AS(retrieve::mean_distance_planar(pred, truth),
                  retrieve::RetrieveError);

  // Mixed fixture vs a per-case hand-summed oracle.
  std::mt19937_64 rng(57);
  std::uniform_real_distribution<double> d(-500.0, 500.0);
  std::vector<geo::MercatorPoint> ps, ts;
  double manual = 0.0;
  for (int i = 0; i < 25; ++i) {
    geo::MercatorPoint a{d(rng), d(rng)};
    geo::MercatorPoint b{d(rng), d(rng)};
    ps.push_back(a);
    ts.push_back(b);
    manual += std::hypot(a.x - b.x, a.y - b.y);
  }
  CHECK(retrieve::mean_distance_planar(ps, ts) ==
        doctest::Approx(manual / 25.0).epsilon(1e-12));

  // Geodesic variant: zero when prediction equals the center.
  std::vector<geo::MercatorPoint> same = {geo::to_mercator({108.9, 34.2})};
  CHECK(retrieve::mean_distance_geodesic(same, same) == 0.0);
}
