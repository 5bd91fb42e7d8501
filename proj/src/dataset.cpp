#include "nextloc/dataset.hpp"

#include <algorithm>
#include <set>

#include "nextloc/digest.hpp"

namespace nextloc::ingest {

const char* norm_source_name(NormSource s) {
  switch (s) {
    case NormSource::kNone:
      return "none";
    case NormSource::kTrainSplit:
      return "train-split";
    case NormSource::kTestSplit:
      return "test-split";
    case NormSource::kAllRecords:
      return "all-records";
  }
  return "unknown";
}

void CityDataset::rebuild_index() {
  loc_index.clear();
  for (std::size_t i = 0; i < locations.size(); ++i) {
    loc_index.emplace(locations[i].id, i);
  }
}

const Location& CityDataset::location(std::int64_t id) const {
  auto it = loc_index.find(id);
  if (it == loc_index.end()) {
    throw DataError("dataset: unresolved location id " + std::to_string(id));
  }
  return locations[it->second];
}

const poi::Profile& CityDataset::profile(std::int64_t id) const {
  auto it = loc_index.find(id);
  if (it == loc_index.end()) {
    throw DataError("dataset: no profile for location id " +
                    std::to_string(id));
  }
  return profiles[it->second];
}

void CityDataset::validate() const {
  if (profiles.size() != locations.size()) {
    throw DataError("dataset: profile table misaligned with locations");
  }
  if (split.size() != pairs.size()) {
    throw DataError("dataset: split assignment misaligned with pairs");
  }
  if (!(dur_bounds.min_min <= dur_bounds.max_min)) {
    throw DataError("dataset: duration bounds inverted");
  }
  for (const auto& u : users) {
    for (const auto& r : u.records) {
      if (loc_index.find(r.location_id) == loc_index.end()) {
        throw DataError("dataset: record references unknown location " +
                        std::to_string(r.location_id));
      }
    }
  }
  for (const auto& p : pairs) {
    const auto& recs = users[static_cast<std::size_t>(p.user)].records;
    if (target_index(p) >= static_cast<std::int64_t>(recs.size())) {
      throw DataError("dataset: pair window exceeds its user sequence");
    }
  }
}

std::vector<geo::MercatorPoint> CityDataset::split_record_centers(
    NormSource source) const {
  // Record slots are deduplicated per (user, record index): overlapping
  // windows must not multiply-count the same visit.
  std::vector<std::set<int>> picked(users.size());
  auto want = [&](std::size_t pair_idx) {
    if (source == NormSource::kAllRecords) return true;
    if (source == NormSource::kTrainSplit) {
      return split[pair_idx] == Split::kTrain;
    }
    if (source == NormSource::kTestSplit) {
      return split[pair_idx] == Split::kTest;
    }
    return false;
  };
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!want(i)) continue;
    const PairRef& p = pairs[i];
    auto& bucket = picked[static_cast<std::size_t>(p.user)];
    for (int r = p.start; r <= p.start + p.m + p.n; ++r) {
      bucket.insert(r);
    }
  }
  std::vector<geo::MercatorPoint> centers;
  for (std::size_t u = 0; u < users.size(); ++u) {
    for (int r : picked[u]) {
      const auto& rec = users[u].records[static_cast<std::size_t>(r)];
      centers.push_back(location(rec.location_id).center);
    }
  }
  return centers;
}

void CityDataset::fit_normalization(NormSource source) {
  const auto centers = split_record_centers(source);
  norm_stats = geo::fit_norm_stats(centers);
  norm_source = source;

  // Duration bounds over the same record slots, clipped at the ceiling.
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  std::vector<std::set<int>> picked(users.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const bool in = source == NormSource::kAllRecords ||
                    (source == NormSource::kTrainSplit &&
                     split[i] == Split::kTrain) ||
                    (source == NormSource::kTestSplit &&
                     split[i] == Split::kTest);
    if (!in) continue;
    const PairRef& p = pairs[i];
    for (int r = p.start; r <= p.start + p.m + p.n; ++r) {
      picked[static_cast<std::size_t>(p.user)].insert(r);
    }
  }
  for (std::size_t u = 0; u < users.size(); ++u) {
    for (int r : picked[u]) {
      const double d = std::min(
          users[u].records[static_cast<std::size_t>(r)].duration_min,
          duration_ceiling_min);
      lo = std::min(lo, d);
      hi = std::max(hi, d);
    }
  }
  if (!(lo < hi)) {
    // Degenerate duration spread: widen so min-max scaling stays defined.
    hi = lo + 1.0;
  }
  dur_bounds = {lo, hi};
}

std::uint64_t CityDataset::location_digest() const {
  std::uint64_t h = kFnvOffset;
  for (const auto& loc : locations) {
    h = fnv1a_bytes(&loc.id, sizeof(loc.id), h);
    h = fnv1a_bytes(&loc.center.x, sizeof(double), h);
    h = fnv1a_bytes(&loc.center.y, sizeof(double), h);
    h = fnv1a_bytes(&loc.grid_row, sizeof(int), h);
    h = fnv1a_bytes(&loc.grid_col, sizeof(int), h);
  }
  return h;
}

std::size_t CityDataset::count_in_split(Split s) const {
  std::size_t n = 0;
  for (Split x : split) n += (x == s) ? 1 : 0;
  return n;
}

}  // namespace nextloc::ingest
