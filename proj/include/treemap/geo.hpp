#pragma once

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace treemap {

/// Raised for inputs outside the domain of a projection or planar operation.
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Raised when two coincident points leave a direction undefined.
class DegenerateGeometryError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

enum class Hemisphere { North, South };

/// WGS84 geodetic position in degrees.
struct GeoPoint {
    double lat = 0.0;
    double lon = 0.0;

    friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

/// Projected UTM position. Planar operations only require matching zones;
/// the conventional easting band is reported by within_easting_band().
struct UtmPoint {
    double easting = 0.0;
    double northing = 0.0;
    int zone = 1;
    Hemisphere hemisphere = Hemisphere::North;

    Eigen::Vector2d planar() const { return {easting, northing}; }
    bool within_easting_band() const { return easting >= 100000.0 && easting <= 900000.0; }

    friend bool operator==(const UtmPoint&, const UtmPoint&) = default;
};

/// Compass bearing in [0, 360), clockwise from true north.
class Bearing {
public:
    Bearing() = default;
    explicit Bearing(double degrees);

    double degrees() const { return degrees_; }

    friend bool operator==(const Bearing&, const Bearing&) = default;

private:
    double degrees_ = 0.0;
};

/// Throws DomainError for NaN or out-of-range coordinates.
void validate(const GeoPoint& p);

int utm_zone_for(double lon);
double central_meridian(int zone);

UtmPoint to_utm(const GeoPoint& p);
/// Projects into an explicit zone, e.g. to bring neighbouring points into a
/// common frame. The hemisphere still follows the point's latitude.
UtmPoint to_utm(const GeoPoint& p, int zone);
/// Projects into an explicit zone and hemisphere.
UtmPoint to_utm(const GeoPoint& p, int zone, Hemisphere hemisphere);
GeoPoint from_utm(const UtmPoint& u);

double planar_distance(const UtmPoint& p, const UtmPoint& t);
Bearing bearing(const UtmPoint& p, const UtmPoint& t);

std::string to_string(Hemisphere h);

namespace detail {

/// Krüger series coefficients for the WGS84 ellipsoid, evaluated to sixth
/// order in the third flattening.
template <typename Scalar>
struct KruegerSeries {
    Scalar a_hat;
    Scalar e;
    Eigen::Matrix<Scalar, 6, 1> alpha;
    Eigen::Matrix<Scalar, 6, 1> beta;
    Eigen::Matrix<Scalar, 6, 1> delta;

    static KruegerSeries wgs84() {
        const Scalar a = Scalar(6378137);
        const Scalar f = Scalar(1) / Scalar(298.257223563);
        const Scalar n = f / (Scalar(2) - f);
        const Scalar n2 = n * n, n3 = n2 * n, n4 = n3 * n, n5 = n4 * n, n6 = n5 * n;

        KruegerSeries s;
        s.e = std::sqrt(f * (Scalar(2) - f));
        s.a_hat = a / (Scalar(1) + n) * (Scalar(1) + n2 / 4 + n4 / 64 + n6 / 256);
        s.alpha << n / 2 - Scalar(2) * n2 / 3 + Scalar(5) * n3 / 16 + Scalar(41) * n4 / 180
                       - Scalar(127) * n5 / 288 + Scalar(7891) * n6 / 37800,
            Scalar(13) * n2 / 48 - Scalar(3) * n3 / 5 + Scalar(557) * n4 / 1440
                + Scalar(281) * n5 / 630 - Scalar(1983433) * n6 / 1935360,
            Scalar(61) * n3 / 240 - Scalar(103) * n4 / 140 + Scalar(15061) * n5 / 26880
                + Scalar(167603) * n6 / 181440,
            Scalar(49561) * n4 / 161280 - Scalar(179) * n5 / 168 + Scalar(6601661) * n6 / 7257600,
            Scalar(34729) * n5 / 80640 - Scalar(3418889) * n6 / 1995840,
            Scalar(212378941) * n6 / 319334400;
        s.beta << n / 2 - Scalar(2) * n2 / 3 + Scalar(37) * n3 / 96 - n4 / 360
                      - Scalar(81) * n5 / 512 + Scalar(96199) * n6 / 604800,
            n2 / 48 + n3 / 15 - Scalar(437) * n4 / 1440 + Scalar(46) * n5 / 105
                - Scalar(1118711) * n6 / 3870720,
            Scalar(17) * n3 / 480 - Scalar(37) * n4 / 840 - Scalar(209) * n5 / 4480
                + Scalar(5569) * n6 / 90720,
            Scalar(4397) * n4 / 161280 - Scalar(11) * n5 / 504 - Scalar(830251) * n6 / 7257600,
            Scalar(4583) * n5 / 161280 - Scalar(108847) * n6 / 3991680,
            Scalar(20648693) * n6 / 638668800;
        // Conformal latitude back to geodetic latitude.
        s.delta << Scalar(2) * n - Scalar(2) * n2 / 3 - Scalar(2) * n3 + Scalar(116) * n4 / 45
                       + Scalar(26) * n5 / 45 - Scalar(2854) * n6 / 675,
            Scalar(7) * n2 / 3 - Scalar(8) * n3 / 5 - Scalar(227) * n4 / 45 + Scalar(2704) * n5 / 315
                + Scalar(2323) * n6 / 945,
            Scalar(56) * n3 / 15 - Scalar(136) * n4 / 35 - Scalar(1262) * n5 / 105
                + Scalar(73814) * n6 / 2835,
            Scalar(4279) * n4 / 630 - Scalar(332) * n5 / 35 - Scalar(399572) * n6 / 14175,
            Scalar(4174) * n5 / 315 - Scalar(144838) * n6 / 6237,
            Scalar(601676) * n6 / 22275;
        return s;
    }
};

/// Forward Transverse Mercator: geodetic radians relative to the central
/// meridian to (x, y) on the unit-scale projection in meters.
template <typename Scalar>
Eigen::Matrix<Scalar, 2, 1> transverse_mercator_forward(
    const KruegerSeries<Scalar>& s, Scalar phi, Scalar lambda) {
    using std::atan2, std::atanh, std::cos, std::cosh, std::sin, std::sinh, std::sqrt;
    const Scalar t = sinh(atanh(sin(phi)) - s.e * atanh(s.e * sin(phi)));
    const Scalar xi_p = atan2(t, cos(lambda));
    const Scalar eta_p = atanh(sin(lambda) / sqrt(Scalar(1) + t * t));

    Scalar xi = xi_p;
    Scalar eta = eta_p;
    for (int j = 1; j <= 6; ++j) {
        const Scalar k = Scalar(2 * j);
        xi += s.alpha(j - 1) * sin(k * xi_p) * cosh(k * eta_p);
        eta += s.alpha(j - 1) * cos(k * xi_p) * sinh(k * eta_p);
    }
    return {s.a_hat * eta, s.a_hat * xi};
}

/// Inverse of transverse_mercator_forward; returns (phi, lambda) in radians.
template <typename Scalar>
Eigen::Matrix<Scalar, 2, 1> transverse_mercator_inverse(
    const KruegerSeries<Scalar>& s, Scalar x, Scalar y) {
    using std::asin, std::atan2, std::cos, std::cosh, std::sin, std::sinh;
    const Scalar xi = y / s.a_hat;
    const Scalar eta = x / s.a_hat;

    Scalar xi_p = xi;
    Scalar eta_p = eta;
    for (int j = 1; j <= 6; ++j) {
        const Scalar k = Scalar(2 * j);
        xi_p -= s.beta(j - 1) * sin(k * xi) * cosh(k * eta);
        eta_p -= s.beta(j - 1) * cos(k * xi) * sinh(k * eta);
    }
    const Scalar chi = asin(sin(xi_p) / cosh(eta_p));
    Scalar phi = chi;
    for (int j = 1; j <= 6; ++j) {
        phi += s.delta(j - 1) * sin(Scalar(2 * j) * chi);
    }
    const Scalar lambda = atan2(sinh(eta_p), cos(xi_p));
    return {phi, lambda};
}

}  // namespace detail

}  // namespace treemap
