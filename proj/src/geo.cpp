#include "nextloc/geo.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace nextloc::geo {

namespace {
constexpr double kPi = std::numbers::pi;
constexpr double kDegToRad = kPi / 180.0;
}  // namespace

MercatorPoint to_mercator(const GeoPoint& p) {
  if (!std::isfinite(p.lon) || !std::isfinite(p.lat)) {
    throw GeoError("to_mercator: non-finite coordinate");
  }
  if (std::fabs(p.lat) > kMaxLatitude) {
    throw GeoError("to_mercator: latitude " + std::to_string(p.lat) +
                   " outside valid band +-" + std::to_string(kMaxLatitude));
  }
  // x scales longitude (degrees) by R over a half turn in degrees; y scales
  // the conformal latitude by R over a half turn in radians, so y = +-R at
  // the band edge. asinh(tan(lat)) = ln(tan(pi/4 + lat/2)) identically and
  // is exact at the equator.
  MercatorPoint m;
  m.x = p.lon * kHalfCircumference / 180.0;
  m.y = std::asinh(std::tan(p.lat * kDegToRad)) * kHalfCircumference / kPi;
  return m;
}

GeoPoint from_mercator(const MercatorPoint& m) {
  // atan(sinh(y')) is the same inverse as 2 atan(exp(y')) - pi/2, exact at 0.
  GeoPoint p;
  p.lon = m.x * 180.0 / kHalfCircumference;
  p.lat = std::atan(std::sinh(m.y * kPi / kHalfCircumference)) / kDegToRad;
  return p;
}

double mercator_scale_factor(double lat_deg) {
  if (!(std::fabs(lat_deg) < kMaxLatitude)) {
    throw GeoError("mercator_scale_factor: latitude outside valid band");
  }
  return 1.0 / std::cos(lat_deg * kDegToRad);
}

double geodesic_distance(const GeoPoint& a, const GeoPoint& b) {
  const double phi1 = a.lat * kDegToRad;
  const double phi2 = b.lat * kDegToRad;
  const double dphi = phi2 - phi1;
  const double dlmb = (b.lon - a.lon) * kDegToRad;
  const double s1 = std::sin(dphi / 2.0);
  const double s2 = std::sin(dlmb / 2.0);
  const double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
  return 2.0 * kEarthRadiusM * std::asin(std::sqrt(std::min(1.0, h)));
}

NormStats fit_norm_stats(std::span<const MercatorPoint> records) {
  if (records.size() < 2) {
    throw GeoError("fit_norm_stats: need at least 2 records");
  }
  const double n = static_cast<double>(records.size());
  double sx = 0.0, sy = 0.0;
  for (const auto& m : records) {
    sx += m.x;
    sy += m.y;
  }
  NormStats s;
  s.mean_x = sx / n;
  s.mean_y = sy / n;
  double vx = 0.0, vy = 0.0;
  for (const auto& m : records) {
    const double dx = m.x - s.mean_x;
    const double dy = m.y - s.mean_y;
    vx += dx * dx;
    vy += dy * dy;
  }
  s.std_x = std::sqrt(vx / n);
  s.std_y = std::sqrt(vy / n);
  if (s.std_x <= 0.0 || s.std_y <= 0.0) {
    throw GeoError("fit_norm_stats: degenerate variance on an axis");
  }
  return s;
}

NormPoint normalize(const MercatorPoint& m, const NormStats& s) {
  return {(m.x - s.mean_x) / s.std_x, (m.y - s.mean_y) / s.std_y};
}

MercatorPoint denormalize(const NormPoint& n, const NormStats& s) {
  return {n.x * s.std_x + s.mean_x, n.y * s.std_y + s.mean_y};
}

}  // namespace nextloc::geo
