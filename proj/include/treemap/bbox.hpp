#pragma once

#include <Eigen/Geometry>

#include <nlohmann/json.hpp>

namespace treemap {

/// Axis-aligned box in image pixels: top-left corner plus extents.
struct BBox {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    bool valid() const { return w > 0.0 && h > 0.0; }
    double area() const { return w * h; }
    bool within(double width, double height) const {
        return x >= 0.0 && y >= 0.0 && x + w <= width && y + h <= height;
    }

    Eigen::AlignedBox2d aligned() const {
        return Eigen::AlignedBox2d(Eigen::Vector2d(x, y), Eigen::Vector2d(x + w, y + h));
    }

    /// Intersection with the image rectangle; may be invalid if disjoint.
    BBox clipped(double width, double height) const;

    friend bool operator==(const BBox&, const BBox&) = default;
};

void to_json(nlohmann::json& j, const BBox& b);
void from_json(const nlohmann::json& j, BBox& b);

}  // namespace treemap
