#pragma once

#include "treemap/geo.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace treemap {

struct TreeCandidate {
    std::string id;
    GeoPoint location;
    double source_confidence = 1.0;
};

struct RoadNetwork {
    std::vector<std::vector<GeoPoint>> polylines;

    void validate() const;
    bool empty() const { return polylines.empty(); }
};

struct PanoramaMeta {
    std::string pano_id;
    GeoPoint location;
    std::optional<std::string> capture_date;
};

struct ViewRequest {
    std::string pano_id;
    Bearing heading;
    double pitch = 0.0;
    double fov = 90.0;
    int width = 640;
    int height = 640;
    std::string target_tree_id;
};

struct ViewConfig {
    double buffer_m = 20.0;
    double max_dist_m = 20.0;
    double pitch = 0.0;
    double fov = 90.0;
    int width = 640;
    int height = 640;

    void validate() const;
};

/// Source of candidate panoramas for a tree. Implementations must allow
/// concurrent queries.
class PanoramaSource {
public:
    virtual ~PanoramaSource() = default;
    virtual std::vector<PanoramaMeta> candidates(const TreeCandidate& tree) const = 0;
};

/// Panorama metadata loaded from a JSON array of {pano_id, lat, lon, date?}.
class FilePanoramaSource final : public PanoramaSource {
public:
    explicit FilePanoramaSource(std::vector<PanoramaMeta> panoramas);
    static FilePanoramaSource load(const std::filesystem::path& path);

    std::vector<PanoramaMeta> candidates(const TreeCandidate& tree) const override;
    const std::vector<PanoramaMeta>& all() const { return panoramas_; }

private:
    std::vector<PanoramaMeta> panoramas_;
};

/// Raised when a panorama source fails; carries the tree being planned.
class PanoramaSourceError : public std::runtime_error {
public:
    PanoramaSourceError(std::string tree_id, const std::string& what)
        : std::runtime_error("panorama lookup for tree '" + tree_id + "' failed: " + what),
          tree_id_(std::move(tree_id)) {}
    const std::string& tree_id() const { return tree_id_; }

private:
    std::string tree_id_;
};

/// Distance from p to the closed segment [a, b].
template <typename Derived>
typename Derived::Scalar point_segment_distance(const Eigen::MatrixBase<Derived>& p,
                                                const Eigen::MatrixBase<Derived>& a,
                                                const Eigen::MatrixBase<Derived>& b) {
    using Scalar = typename Derived::Scalar;
    const auto ab = (b - a).eval();
    const Scalar len2 = ab.squaredNorm();
    if (len2 == Scalar(0)) return (p - a).norm();
    const Scalar t = std::clamp((p - a).dot(ab) / len2, Scalar(0), Scalar(1));
    return (p - (a + t * ab)).norm();
}

/// UTM zone shared by the given points: the zone of their mean longitude.
int common_zone(std::span<const GeoPoint> points);

/// Trees whose minimum distance to any road segment is <= buffer_m, in
/// input order. Everything is projected into the zone common to trees and
/// road vertices.
std::vector<TreeCandidate> buffer_filter(std::span<const TreeCandidate> trees,
                                         const RoadNetwork& roads, double buffer_m);

/// Minimum distance in meters from each tree to the network, same projection
/// as buffer_filter.
std::vector<double> road_distances(std::span<const TreeCandidate> trees, const RoadNetwork& roads);

/// Nearest panorama (first on ties) measured in the tree's UTM frame.
/// nullopt only when `panoramas` is empty.
std::optional<std::pair<PanoramaMeta, double>> nearest_panorama(
    const TreeCandidate& tree, std::span<const PanoramaMeta> panoramas);

/// nearest_panorama, or nullopt when it is farther than max_dist_m.
std::optional<std::pair<PanoramaMeta, double>> pair_panorama(
    const TreeCandidate& tree, std::span<const PanoramaMeta> panoramas, double max_dist_m = 20.0);

/// Request facing the tree from the panorama.
ViewRequest make_view_request(const TreeCandidate& tree, const PanoramaMeta& pano,
                              const ViewConfig& config = {});

enum class SkipReason { OutsideBuffer, NoPanorama, BeyondMaxDistance, CoincidentPosition };
std::string_view to_string(SkipReason r);

struct SkippedTree {
    std::string tree_id;
    SkipReason reason;
    std::optional<double> distance_m;
};

struct ViewPlan {
    std::vector<ViewRequest> requests;  // sorted by target tree id
    std::vector<SkippedTree> skipped;   // sorted by tree id
};

ViewPlan plan_views(std::span<const TreeCandidate> trees, const RoadNetwork& roads,
                    const PanoramaSource& panoramas, const ViewConfig& config = {});

// File formats.
RoadNetwork read_roads_geojson(const std::filesystem::path& path);
RoadNetwork parse_roads_geojson(const nlohmann::json& j);
/// GeoJSON Point features (properties id, confidence) or a plain JSON array
/// of {id, lat, lon, confidence?}.
std::vector<TreeCandidate> read_trees(const std::filesystem::path& path);
std::vector<TreeCandidate> parse_trees(const nlohmann::json& j);
std::vector<PanoramaMeta> parse_panoramas(const nlohmann::json& j);

void to_json(nlohmann::json& j, const ViewRequest& r);
void to_json(nlohmann::json& j, const SkippedTree& s);
/// Writes view_requests.jsonl and skip_report.json into `dir`.
void write_plan(const std::filesystem::path& dir, const ViewPlan& plan);

}  // namespace treemap
