#include "nextloc/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace nextloc::ingest {

namespace {

constexpr std::string_view kFormatLine = "#nextloc-format v1";

bool valid_ping(const RawPing& p) {
  return std::isfinite(p.position.lon) && std::isfinite(p.position.lat) &&
         std::fabs(p.position.lon) <= 180.0 &&
         std::fabs(p.position.lat) <= geo::kMaxLatitude;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (pos <= line.size()) {
    const std::size_t comma = line.find(',', pos);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(pos));
      break;
    }
    out.push_back(line.substr(pos, comma - pos));
    pos = comma + 1;
  }
  return out;
}

template <typename T>
T parse_num(std::string_view s, const char* what) {
  T v{};
  const char* begin = s.data();
  const char* end = s.data() + s.size();
  auto res = std::from_chars(begin, end, v);
  if (res.ec != std::errc{} || res.ptr != end) {
    throw DataError(std::string("malformed ") + what + " field: '" +
                    std::string(s) + "'");
  }
  return v;
}

std::ifstream open_versioned(const std::filesystem::path& path,
                             std::string& header_out) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty file " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kFormatLine) {
    throw DataError(path.string() + ": missing '" + std::string(kFormatLine) +
                    "' header");
  }
  if (!std::getline(in, header_out)) {
    throw DataError(path.string() + ": missing column header");
  }
  if (!header_out.empty() && header_out.back() == '\r') header_out.pop_back();
  return in;
}

std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << kFormatLine << "\n";
  return out;
}

}  // namespace

StaypointResult extract_staypoints(std::span<const RawPing> pings,
                                   const StaypointParams& params) {
  StaypointResult result;

  struct Cluster {
    double sum_lon = 0.0, sum_lat = 0.0;
    int count = 0;
    std::int64_t first_ts = 0, last_ts = 0;
    geo::GeoPoint centroid() const {
      return {sum_lon / count, sum_lat / count};
    }
  };
  Cluster cur;
  bool open = false;

  auto close = [&]() {
    if (open && cur.last_ts - cur.first_ts >=
                    static_cast<std::int64_t>(params.min_stay_s)) {
      result.staypoints.push_back({cur.centroid(), cur.first_ts,
                                   static_cast<double>(cur.last_ts -
                                                       cur.first_ts)});
    }
    open = false;
  };
  auto start = [&](const RawPing& p) {
    cur = Cluster{p.position.lon, p.position.lat, 1, p.timestamp, p.timestamp};
    open = true;
  };

  for (const RawPing& p : pings) {
    if (!valid_ping(p)) {
      ++result.rejected_pings;
      continue;
    }
    if (!open) {
      start(p);
      continue;
    }
    if (static_cast<double>(p.timestamp - cur.last_ts) >
        params.time_gap_max_s) {
      close();
      start(p);
      continue;
    }
    if (geo::geodesic_distance(p.position, cur.centroid()) <=
        params.dist_max_m) {
      cur.sum_lon += p.position.lon;
      cur.sum_lat += p.position.lat;
      cur.count += 1;
      cur.last_ts = p.timestamp;
    } else {
      close();
      start(p);
    }
  }
  close();
  return result;
}

GridCell assign_grid(const geo::MercatorPoint& m,
                     const geo::MercatorPoint& origin, double cell_m) {
  if (!(cell_m > 0.0)) throw DataError("assign_grid: cell size must be > 0");
  GridCell g;
  g.col = static_cast<int>(std::floor((m.x - origin.x) / cell_m));
  g.row = static_cast<int>(std::floor((m.y - origin.y) / cell_m));
  g.center.x = origin.x + (g.col + 0.5) * cell_m;
  g.center.y = origin.y + (g.row + 0.5) * cell_m;
  return g;
}

GridCell assign_grid(const geo::GeoPoint& p, const geo::MercatorPoint& origin,
                     double cell_m) {
  return assign_grid(geo::to_mercator(p), origin, cell_m);
}

std::vector<PairRef> build_pairs(std::span<const UserVisits> users, int m,
                                 int n, int stride) {
  if (n >= m) throw DataError("build_pairs: requires N < M");
  if (m < 1 || n < 1) throw DataError("build_pairs: M and N must be >= 1");
  if (stride < 1) throw DataError("build_pairs: stride must be >= 1");
  std::vector<PairRef> pairs;
  for (std::size_t u = 0; u < users.size(); ++u) {
    const auto len = static_cast<int>(users[u].records.size());
    for (int start = 0; start + m + n < len; start += stride) {
      pairs.push_back({static_cast<int>(u), start, m, n});
    }
  }
  return pairs;
}

const VisitRecord& target_record(std::span<const UserVisits> users,
                                 const PairRef& p) {
  return users[static_cast<std::size_t>(p.user)]
      .records[static_cast<std::size_t>(target_index(p))];
}

std::vector<Split> split_dataset(std::span<const UserVisits> users,
                                 std::span<const PairRef> pairs,
                                 double train_ratio, double val_ratio,
                                 double test_ratio) {
  if (std::fabs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9) {
    throw DataError("split_dataset: ratios must sum to 1");
  }
  const std::size_t n = pairs.size();
  const auto n_train = static_cast<std::size_t>(
      std::floor(train_ratio * static_cast<double>(n)));
  const auto n_val =
      static_cast<std::size_t>(std::floor(val_ratio * static_cast<double>(n)));
  const std::size_t n_test = n - n_train - n_val;
  if (n_train == 0 || n_val == 0 || n_test == 0) {
    throw DataError("split_dataset: a split would be empty");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a,
                                                   std::size_t b) {
    return target_record(users, pairs[a]).arrive_ts <
           target_record(users, pairs[b]).arrive_ts;
  });

  std::vector<Split> split(n, Split::kTest);
  for (std::size_t rank = 0; rank < n; ++rank) {
    Split s = Split::kTest;
    if (rank < n_train) {
      s = Split::kTrain;
    } else if (rank < n_train + n_val) {
      s = Split::kVal;
    }
    split[order[rank]] = s;
  }
  return split;
}

std::vector<Location> virtual_coordinates(int grid_rows, int grid_cols,
                                          double cell_m) {
  if (grid_rows < 1 || grid_cols < 1 || !(cell_m > 0.0)) {
    throw DataError("virtual_coordinates: dimensions must be positive");
  }
  std::vector<Location> out;
  out.reserve(static_cast<std::size_t>(grid_rows) *
              static_cast<std::size_t>(grid_cols));
  for (int r = 0; r < grid_rows; ++r) {
    for (int c = 0; c < grid_cols; ++c) {
      Location loc;
      loc.id = static_cast<std::int64_t>(r) * grid_cols + c;
      loc.grid_row = r;
      loc.grid_col = c;
      loc.center.x = (c - grid_cols / 2.0 + 0.5) * cell_m;
      loc.center.y = (r - grid_rows / 2.0 + 0.5) * cell_m;
      out.push_back(loc);
    }
  }
  return out;
}

int day_of_week_utc(std::int64_t ts) {
  // Epoch day 0 (1970-01-01) was a Thursday; shift so Monday = 0.
  std::int64_t days = ts / 86400;
  if (ts < 0 && ts % 86400 != 0) --days;
  return static_cast<int>(((days + 3) % 7 + 7) % 7);
}

int hour_of_day_utc(std::int64_t ts) {
  std::int64_t sec = ts % 86400;
  if (sec < 0) sec += 86400;
  return static_cast<int>(sec / 3600);
}

// ---- file I/O ----

std::vector<RawPing> read_pings(const std::filesystem::path& path) {
  std::string header;
  std::ifstream in = open_versioned(path, header);
  if (header != "user_id,timestamp,lon,lat") {
    throw DataError(path.string() + ": unexpected ping header '" + header +
                    "'");
  }
  std::vector<RawPing> pings;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 4) throw DataError(path.string() + ": bad ping row");
    RawPing p;
    p.user_id = parse_num<std::int64_t>(f[0], "user_id");
    p.timestamp = parse_num<std::int64_t>(f[1], "timestamp");
    p.position.lon = parse_num<double>(f[2], "lon");
    p.position.lat = parse_num<double>(f[3], "lat");
    pings.push_back(p);
  }
  std::stable_sort(pings.begin(), pings.end(),
                   [](const RawPing& a, const RawPing& b) {
                     if (a.user_id != b.user_id) return a.user_id < b.user_id;
                     return a.timestamp < b.timestamp;
                   });
  return pings;
}

void write_pings(const std::filesystem::path& path,
                 std::span<const RawPing> pings) {
  std::ofstream out = open_for_write(path);
  out << "user_id,timestamp,lon,lat\n";
  out.precision(17);
  for (const auto& p : pings) {
    out << p.user_id << ',' << p.timestamp << ',' << p.position.lon << ','
        << p.position.lat << "\n";
  }
}

std::vector<UserVisits> read_visits(const std::filesystem::path& path) {
  std::string header;
  std::ifstream in = open_versioned(path, header);
  if (header != "user_id,location_id,arrive_ts,day_of_week,hour,duration_min") {
    throw DataError(path.string() + ": unexpected visit header '" + header +
                    "'");
  }
  std::vector<UserVisits> users;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 6) throw DataError(path.string() + ": bad visit row");
    const auto user_id = parse_num<std::int64_t>(f[0], "user_id");
    VisitRecord r;
    r.location_id = parse_num<std::int64_t>(f[1], "location_id");
    r.arrive_ts = parse_num<std::int64_t>(f[2], "arrive_ts");
    r.day_of_week = parse_num<int>(f[3], "day_of_week");
    r.hour_of_day = parse_num<int>(f[4], "hour");
    r.duration_min = parse_num<double>(f[5], "duration_min");
    if (r.day_of_week < 0 || r.day_of_week > 7 || r.hour_of_day < 0 ||
        r.hour_of_day > 23 || r.duration_min < 0) {
      throw DataError(path.string() + ": visit violates field ranges: " +
                      line);
    }
    if (users.empty() || users.back().user_id != user_id) {
      users.push_back({user_id, {}});
    }
    users.back().records.push_back(r);
  }
  for (auto& u : users) {
    std::stable_sort(u.records.begin(), u.records.end(),
                     [](const VisitRecord& a, const VisitRecord& b) {
                       return a.arrive_ts < b.arrive_ts;
                     });
  }
  std::stable_sort(users.begin(), users.end(),
                   [](const UserVisits& a, const UserVisits& b) {
                     return a.user_id < b.user_id;
                   });
  return users;
}

void write_visits(const std::filesystem::path& path,
                  std::span<const UserVisits> users) {
  std::ofstream out = open_for_write(path);
  out << "user_id,location_id,arrive_ts,day_of_week,hour,duration_min\n";
  out.precision(17);
  for (const auto& u : users) {
    for (const auto& r : u.records) {
      out << u.user_id << ',' << r.location_id << ',' << r.arrive_ts << ','
          << r.day_of_week << ',' << r.hour_of_day << ',' << r.duration_min
          << "\n";
    }
  }
}

LocationFile read_locations(const std::filesystem::path& path) {
  std::string header;
  std::ifstream in = open_versioned(path, header);
  LocationFile file;
  if (header == "location_id,center_lon,center_lat,grid_row,grid_col") {
    file.virtual_coords = false;
  } else if (header == "location_id,grid_row,grid_col") {
    file.virtual_coords = true;
  } else {
    throw DataError(path.string() + ": unexpected location header '" + header +
                    "'");
  }
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv(line);
    Location loc;
    if (file.virtual_coords) {
      if (f.size() != 3) throw DataError(path.string() + ": bad location row");
      loc.id = parse_num<std::int64_t>(f[0], "location_id");
      loc.grid_row = parse_num<int>(f[1], "grid_row");
      loc.grid_col = parse_num<int>(f[2], "grid_col");
    } else {
      if (f.size() != 5) throw DataError(path.string() + ": bad location row");
      loc.id = parse_num<std::int64_t>(f[0], "location_id");
      const double lon = parse_num<double>(f[1], "center_lon");
      const double lat = parse_num<double>(f[2], "center_lat");
      loc.center = geo::to_mercator({lon, lat});
      loc.grid_row = parse_num<int>(f[3], "grid_row");
      loc.grid_col = parse_num<int>(f[4], "grid_col");
    }
    file.locations.push_back(loc);
  }
  std::sort(file.locations.begin(), file.locations.end(),
            [](const Location& a, const Location& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < file.locations.size(); ++i) {
    if (file.locations[i].id == file.locations[i - 1].id) {
      throw DataError(path.string() + ": duplicate location id " +
                      std::to_string(file.locations[i].id));
    }
  }
  return file;
}

void write_locations(const std::filesystem::path& path,
                     std::span<const Location> locations, bool virtual_form) {
  std::ofstream out = open_for_write(path);
  out.precision(17);
  if (virtual_form) {
    out << "location_id,grid_row,grid_col\n";
    for (const auto& loc : locations) {
      out << loc.id << ',' << loc.grid_row << ',' << loc.grid_col << "\n";
    }
  } else {
    out << "location_id,center_lon,center_lat,grid_row,grid_col\n";
    for (const auto& loc : locations) {
      const geo::GeoPoint g = geo::from_mercator(loc.center);
      out << loc.id << ',' << g.lon << ',' << g.lat << ',' << loc.grid_row
          << ',' << loc.grid_col << "\n";
    }
  }
}

}  // namespace nextloc::ingest
