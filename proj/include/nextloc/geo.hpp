// Web Mercator projection, its inverse, distortion diagnostics, haversine
// distance, and per-city coordinate normalization. All functions are pure;
// callers may invoke them from any number of threads.
#pragma once

#include <span>
#include <stdexcept>

namespace nextloc::geo {

// Half the Earth's circumference in meters; the Mercator square spans
// [-kHalfCircumference, +kHalfCircumference] on both axes.
inline constexpr double kHalfCircumference = 20037508.34;

// Latitude at which |y| reaches kHalfCircumference.
inline constexpr double kMaxLatitude = 85.05113;

// Sphere radius used for geodesic (haversine) distances.
inline constexpr double kEarthRadiusM = 6371000.0;

struct GeoPoint {
  double lon = 0.0;  // degrees, [-180, 180]
  double lat = 0.0;  // degrees, within the Mercator-valid band
};

struct MercatorPoint {
  double x = 0.0;  // meters
  double y = 0.0;  // meters
};

// Coordinates after per-axis standardization; dimensionless.
struct NormPoint {
  double x = 0.0;
  double y = 0.0;
};

struct NormStats {
  double mean_x = 0.0;
  double mean_y = 0.0;
  double std_x = 1.0;  // population std, > 0
  double std_y = 1.0;
};

class GeoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

MercatorPoint to_mercator(const GeoPoint& p);
GeoPoint from_mercator(const MercatorPoint& m);

// Local Mercator length inflation 1/cos(lat); valid for |lat| < kMaxLatitude.
double mercator_scale_factor(double lat_deg);

// Haversine distance in meters on a sphere of radius kEarthRadiusM.
double geodesic_distance(const GeoPoint& a, const GeoPoint& b);

// Per-axis mean and population standard deviation over every record.
// Requires at least two records and nonzero spread on both axes.
NormStats fit_norm_stats(std::span<const MercatorPoint> records);

NormPoint normalize(const MercatorPoint& m, const NormStats& s);
MercatorPoint denormalize(const NormPoint& n, const NormStats& s);

}  // namespace nextloc::geo
