// The assembled per-city dataset: location table, POI catalog and profiles,
// per-user visit sequences, trajectory pairs with split assignment, and the
// normalization statistics the experiment designates.
#pragma once

#include <cstdint>
#include <unordered_map>

#include "nextloc/geo.hpp"
#include "nextloc/ingest.hpp"
#include "nextloc/poi.hpp"

namespace nextloc::ingest {

enum class NormSource { kNone, kTrainSplit, kTestSplit, kAllRecords };

const char* norm_source_name(NormSource s);

struct CityDataset {
  std::vector<Location> locations;  // sorted by id
  poi::Catalog catalog;
  std::vector<poi::Profile> profiles;  // aligned with locations
  std::vector<UserVisits> users;
  std::vector<PairRef> pairs;
  std::vector<Split> split;  // aligned with pairs
  geo::NormStats norm_stats;
  DurationBounds dur_bounds{0.0, 1440.0};
  NormSource norm_source = NormSource::kNone;
  bool virtual_coords = true;
  double duration_ceiling_min = 1440.0;

  std::unordered_map<std::int64_t, std::size_t> loc_index;

  void rebuild_index();
  const Location& location(std::int64_t id) const;
  const poi::Profile& profile(std::int64_t id) const;

  // Every referenced location resolves; splits are a partition; windows fit.
  void validate() const;

  // Mercator centers of every record in the chosen pairs (history, current,
  // and target), deduplicated per record slot.
  std::vector<geo::MercatorPoint> split_record_centers(NormSource source) const;

  // Fits norm_stats on the designated records and dur_bounds (clipped at
  // duration_ceiling_min) on the same records.
  void fit_normalization(NormSource source);

  // FNV over the location table (ids, centers, grid indices).
  std::uint64_t location_digest() const;

  std::size_t count_in_split(Split s) const;
};

}  // namespace nextloc::ingest
