#include "treemap/geo.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace treemap {

namespace {

constexpr double kScale = 0.9996;
constexpr double kFalseEasting = 500000.0;
constexpr double kFalseNorthingSouth = 10000000.0;
constexpr double kMaxUtmLatitude = 84.0;

constexpr double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
constexpr double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

const detail::KruegerSeries<double>& series() {
    static const auto s = detail::KruegerSeries<double>::wgs84();
    return s;
}

void require_zone(int zone) {
    if (zone < 1 || zone > 60) {
        throw DomainError("UTM zone " + std::to_string(zone) + " outside [1, 60]");
    }
}

void require_same_frame(const UtmPoint& p, const UtmPoint& t) {
    if (p.zone != t.zone || p.hemisphere != t.hemisphere) {
        throw DomainError("planar operation across UTM frames (zone " + std::to_string(p.zone) +
                          to_string(p.hemisphere) + " vs " + std::to_string(t.zone) +
                          to_string(t.hemisphere) + "); re-project into a common zone first");
    }
}

double normalize_degrees(double d) {
    double r = std::fmod(d, 360.0);
    if (r < 0.0) r += 360.0;
    // fmod of a tiny negative value can round up to exactly 360.
    if (r >= 360.0) r = 0.0;
    return r == 0.0 ? 0.0 : r;
}

}  // namespace

Bearing::Bearing(double degrees) : degrees_(normalize_degrees(degrees)) {
    if (!std::isfinite(degrees)) throw DomainError("bearing must be finite");
}

void validate(const GeoPoint& p) {
    if (std::isnan(p.lat) || std::isnan(p.lon)) throw DomainError("NaN coordinate");
    if (p.lat < -90.0 || p.lat > 90.0) {
        throw DomainError("latitude " + std::to_string(p.lat) + " outside [-90, 90]");
    }
    if (p.lon < -180.0 || p.lon >= 180.0) {
        throw DomainError("longitude " + std::to_string(p.lon) + " outside [-180, 180)");
    }
}

int utm_zone_for(double lon) {
    const int zone = static_cast<int>(std::floor((lon + 180.0) / 6.0)) + 1;
    return std::clamp(zone, 1, 60);
}

double central_meridian(int zone) {
    require_zone(zone);
    return 6.0 * zone - 183.0;
}

std::string to_string(Hemisphere h) { return h == Hemisphere::North ? "N" : "S"; }

UtmPoint to_utm(const GeoPoint& p) { return to_utm(p, utm_zone_for(p.lon)); }

UtmPoint to_utm(const GeoPoint& p, int zone) {
    return to_utm(p, zone, p.lat < 0.0 ? Hemisphere::South : Hemisphere::North);
}

UtmPoint to_utm(const GeoPoint& p, int zone, Hemisphere hemisphere) {
    validate(p);
    require_zone(zone);
    if (std::abs(p.lat) > kMaxUtmLatitude) {
        throw DomainError("latitude " + std::to_string(p.lat) + " outside the UTM band");
    }
    double dlon = p.lon - central_meridian(zone);
    // Keep the longitude offset continuous across the antimeridian.
    if (dlon > 180.0) dlon -= 360.0;
    if (dlon < -180.0) dlon += 360.0;
    if (std::abs(dlon) >= 90.0) {
        throw DomainError("point is a quarter turn or more from zone " + std::to_string(zone));
    }

    const Eigen::Vector2d xy =
        detail::transverse_mercator_forward(series(), deg2rad(p.lat), deg2rad(dlon));
    UtmPoint u;
    u.zone = zone;
    u.hemisphere = hemisphere;
    u.easting = kFalseEasting + kScale * xy.x();
    u.northing = kScale * xy.y() + (hemisphere == Hemisphere::South ? kFalseNorthingSouth : 0.0);
    return u;
}

GeoPoint from_utm(const UtmPoint& u) {
    require_zone(u.zone);
    if (!std::isfinite(u.easting) || !std::isfinite(u.northing)) {
        throw DomainError("non-finite UTM coordinate");
    }
    const double x = (u.easting - kFalseEasting) / kScale;
    const double y =
        (u.northing - (u.hemisphere == Hemisphere::South ? kFalseNorthingSouth : 0.0)) / kScale;
    const Eigen::Vector2d geo = detail::transverse_mercator_inverse(series(), x, y);

    GeoPoint p{rad2deg(geo.x()), central_meridian(u.zone) + rad2deg(geo.y())};
    if (p.lon >= 180.0) p.lon -= 360.0;
    if (p.lon < -180.0) p.lon += 360.0;
    return p;
}

double planar_distance(const UtmPoint& p, const UtmPoint& t) {
    require_same_frame(p, t);
    return (t.planar() - p.planar()).norm();
}

Bearing bearing(const UtmPoint& p, const UtmPoint& t) {
    require_same_frame(p, t);
    const Eigen::Vector2d d = t.planar() - p.planar();
    if (d.x() == 0.0 && d.y() == 0.0) {
        throw DegenerateGeometryError("bearing between coincident points is undefined");
    }
    // East offset first so that 0 = north and 90 = east.
    return Bearing(rad2deg(std::atan2(d.x(), d.y())));
}

}  // namespace treemap
