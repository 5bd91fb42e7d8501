// Raw trace and prepared-dataset parsing, staypoint extraction, grid
// aggregation, trajectory pair assembly, and chronological splits.
//
// Text formats all start with the version line `#nextloc-format v1` followed
// by a column header:
//   pings      user_id,timestamp,lon,lat
//   visits     user_id,location_id,arrive_ts,day_of_week,hour,duration_min
//   locations  location_id,center_lon,center_lat,grid_row,grid_col
//              location_id,grid_row,grid_col        (virtual-coordinate form)
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nextloc/geo.hpp"

namespace nextloc::ingest {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RawPing {
  std::int64_t user_id = 0;
  std::int64_t timestamp = 0;  // seconds since epoch, UTC
  geo::GeoPoint position;
};

struct VisitRecord {
  std::int64_t location_id = 0;
  int day_of_week = 0;     // 0..7; real data populates 0..6 (0 = Monday)
  int hour_of_day = 0;     // 0..23
  double duration_min = 0.0;
  std::int64_t arrive_ts = 0;
};

struct Location {
  std::int64_t id = 0;
  geo::MercatorPoint center;  // grid-cell centroid
  int grid_row = 0;
  int grid_col = 0;
};

struct UserVisits {
  std::int64_t user_id = 0;
  std::vector<VisitRecord> records;  // time-ordered
};

// A history/current window into one user's record sequence. history =
// records [start, start+m), current = [start+m, start+m+n), target =
// record start+m+n.
struct PairRef {
  int user = 0;   // index into CityDataset::users
  int start = 0;
  int m = 0;
  int n = 0;
};

enum class Split : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2 };

struct DurationBounds {
  double min_min = 0.0;
  double max_min = 1.0;
};

struct Staypoint {
  geo::GeoPoint centroid;   // mean position of member pings
  std::int64_t arrive_ts = 0;
  double duration_s = 0.0;  // last member timestamp minus first
};

struct StaypointParams {
  double time_gap_max_s = 3600.0;
  double dist_max_m = 300.0;
  double min_stay_s = 1200.0;
};

struct StaypointResult {
  std::vector<Staypoint> staypoints;
  std::size_t rejected_pings = 0;  // malformed records skipped
};

// One user's pings, already time-sorted. A staypoint accumulates pings that
// stay within dist_max of the running centroid; a time gap beyond
// time_gap_max or a far ping closes it, and it is emitted when its span
// reaches min_stay.
StaypointResult extract_staypoints(std::span<const RawPing> pings,
                                   const StaypointParams& params);

struct GridCell {
  int row = 0;
  int col = 0;
  geo::MercatorPoint center;
};

// Floor-convention cell assignment in Mercator meters.
GridCell assign_grid(const geo::GeoPoint& p, const geo::MercatorPoint& origin,
                     double cell_m);
GridCell assign_grid(const geo::MercatorPoint& m,
                     const geo::MercatorPoint& origin, double cell_m);

// Sliding windows over each user's records; requires n < m. Windows advance
// by stride; users shorter than m+n+1 records yield nothing.
std::vector<PairRef> build_pairs(std::span<const UserVisits> users, int m,
                                 int n, int stride);

// Chronological split by target timestamp, train earliest. Ratios must sum
// to 1; throws if any split would be empty.
std::vector<Split> split_dataset(std::span<const UserVisits> users,
                                 std::span<const PairRef> pairs,
                                 double train_ratio = 0.7,
                                 double val_ratio = 0.1,
                                 double test_ratio = 0.2);

// Synthetic centers for datasets shipped only as grid indices: cell (r, c)
// maps to ((c - cols/2 + 0.5) * cell, (r - rows/2 + 0.5) * cell), row-major
// ids starting at 0.
std::vector<Location> virtual_coordinates(int grid_rows, int grid_cols,
                                          double cell_m);

inline std::int64_t target_index(const PairRef& p) {
  return p.start + p.m + p.n;
}

const VisitRecord& target_record(std::span<const UserVisits> users,
                                 const PairRef& p);

// Day-of-week (0 = Monday) and hour-of-day for a UTC timestamp.
int day_of_week_utc(std::int64_t ts);
int hour_of_day_utc(std::int64_t ts);

// ---- file I/O ----

std::vector<RawPing> read_pings(const std::filesystem::path& path);
void write_pings(const std::filesystem::path& path,
                 std::span<const RawPing> pings);

std::vector<UserVisits> read_visits(const std::filesystem::path& path);
void write_visits(const std::filesystem::path& path,
                  std::span<const UserVisits> users);

struct LocationFile {
  std::vector<Location> locations;  // sorted by id
  bool virtual_coords = false;      // 3-column form: centers must be derived
};

LocationFile read_locations(const std::filesystem::path& path);
void write_locations(const std::filesystem::path& path,
                     std::span<const Location> locations, bool virtual_form);

}  // namespace nextloc::ingest
