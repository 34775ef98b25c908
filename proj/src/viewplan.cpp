#include "treemap/viewplan.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

namespace treemap {

using nlohmann::json;

void RoadNetwork::validate() const {
    for (const auto& line : polylines) {
        if (line.size() < 2) throw std::invalid_argument("road polyline needs at least 2 vertices");
        for (const auto& v : line) treemap::validate(v);
    }
}

void ViewConfig::validate() const {
    if (!(buffer_m > 0.0)) throw std::invalid_argument("buffer_m must be positive");
    if (!(max_dist_m >= 0.0)) throw std::invalid_argument("max_dist_m must be non-negative");
    if (!(fov > 0.0 && fov <= 120.0)) throw std::invalid_argument("fov must lie in (0, 120]");
    if (width <= 0 || height <= 0) throw std::invalid_argument("image size must be positive");
}

std::string_view to_string(SkipReason r) {
    switch (r) {
        case SkipReason::OutsideBuffer: return "outside_buffer";
        case SkipReason::NoPanorama: return "no_panorama";
        case SkipReason::BeyondMaxDistance: return "beyond_max_distance";
        case SkipReason::CoincidentPosition: return "coincident_position";
    }
    return "outside_buffer";
}

FilePanoramaSource::FilePanoramaSource(std::vector<PanoramaMeta> panoramas)
    : panoramas_(std::move(panoramas)) {
    for (const auto& p : panoramas_) validate(p.location);
}

FilePanoramaSource FilePanoramaSource::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open panorama metadata " + path.string());
    return FilePanoramaSource(parse_panoramas(json::parse(in)));
}

std::vector<PanoramaMeta> FilePanoramaSource::candidates(const TreeCandidate&) const {
    return panoramas_;
}

int common_zone(std::span<const GeoPoint> points) {
    if (points.empty()) throw std::invalid_argument("no points to choose a zone from");
    // Mean of unit vectors keeps the average sane across the antimeridian.
    double s = 0.0, c = 0.0;
    for (const auto& p : points) {
        const double r = p.lon * std::numbers::pi / 180.0;
        s += std::sin(r);
        c += std::cos(r);
    }
    double lon = std::atan2(s, c) * 180.0 / std::numbers::pi;
    if (lon >= 180.0) lon -= 360.0;
    return utm_zone_for(lon);
}

namespace {

struct ProjectedNetwork {
    int zone = 1;
    Hemisphere hemisphere = Hemisphere::North;
    std::vector<std::vector<Eigen::Vector2d>> lines;
};

ProjectedNetwork project_network(std::span<const TreeCandidate> trees, const RoadNetwork& roads) {
    if (roads.empty()) throw std::invalid_argument("road network is empty; buffer filter undefined");
    roads.validate();
    std::vector<GeoPoint> all;
    double lat_sum = 0.0;
    for (const auto& t : trees) {
        all.push_back(t.location);
        lat_sum += t.location.lat;
    }
    for (const auto& line : roads.polylines) {
        for (const auto& v : line) {
            all.push_back(v);
            lat_sum += v.lat;
        }
    }
    ProjectedNetwork net;
    net.zone = common_zone(all);
    net.hemisphere = lat_sum < 0.0 ? Hemisphere::South : Hemisphere::North;
    for (const auto& line : roads.polylines) {
        auto& out = net.lines.emplace_back();
        for (const auto& v : line) out.push_back(to_utm(v, net.zone, net.hemisphere).planar());
    }
    return net;
}

double distance_to_network(const Eigen::Vector2d& p, const ProjectedNetwork& net) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& line : net.lines) {
        for (std::size_t i = 0; i + 1 < line.size(); ++i) {
            best = std::min(best, point_segment_distance(p, line[i], line[i + 1]));
        }
    }
    return best;
}

UtmPoint tree_frame(const TreeCandidate& tree) { return to_utm(tree.location); }

}  // namespace

std::vector<double> road_distances(std::span<const TreeCandidate> trees, const RoadNetwork& roads) {
    const ProjectedNetwork net = project_network(trees, roads);
    std::vector<double> out;
    out.reserve(trees.size());
    for (const auto& t : trees) {
        out.push_back(distance_to_network(to_utm(t.location, net.zone, net.hemisphere).planar(), net));
    }
    return out;
}

std::vector<TreeCandidate> buffer_filter(std::span<const TreeCandidate> trees,
                                         const RoadNetwork& roads, double buffer_m) {
    if (!(buffer_m > 0.0)) throw std::invalid_argument("buffer_m must be positive");
    const std::vector<double> d = road_distances(trees, roads);
    std::vector<TreeCandidate> kept;
    for (std::size_t i = 0; i < trees.size(); ++i) {
        if (d[i] <= buffer_m) kept.push_back(trees[i]);
    }
    return kept;
}

std::optional<std::pair<PanoramaMeta, double>> nearest_panorama(
    const TreeCandidate& tree, std::span<const PanoramaMeta> panoramas) {
    if (panoramas.empty()) return std::nullopt;
    const UtmPoint t = tree_frame(tree);
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < panoramas.size(); ++i) {
        const double d = planar_distance(to_utm(panoramas[i].location, t.zone, t.hemisphere), t);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return std::make_pair(panoramas[best], best_d);
}

std::optional<std::pair<PanoramaMeta, double>> pair_panorama(
    const TreeCandidate& tree, std::span<const PanoramaMeta> panoramas, double max_dist_m) {
    if (panoramas.empty()) throw std::invalid_argument("no panoramas to pair with");
    auto nearest = nearest_panorama(tree, panoramas);
    if (!nearest || nearest->second > max_dist_m) return std::nullopt;
    return nearest;
}

ViewRequest make_view_request(const TreeCandidate& tree, const PanoramaMeta& pano,
                              const ViewConfig& config) {
    const UtmPoint t = tree_frame(tree);
    const UtmPoint p = to_utm(pano.location, t.zone, t.hemisphere);
    ViewRequest r;
    r.pano_id = pano.pano_id;
    r.heading = bearing(p, t);
    r.pitch = config.pitch;
    r.fov = config.fov;
    r.width = config.width;
    r.height = config.height;
    r.target_tree_id = tree.id;
    return r;
}

ViewPlan plan_views(std::span<const TreeCandidate> trees, const RoadNetwork& roads,
                    const PanoramaSource& panoramas, const ViewConfig& config) {
    config.validate();
    for (const auto& t : trees) {
        validate(t.location);
        if (!(t.source_confidence >= 0.0 && t.source_confidence <= 1.0)) {
            throw std::invalid_argument("tree '" + t.id + "' has confidence outside [0, 1]");
        }
    }
    const std::vector<double> road_d = road_distances(trees, roads);

    ViewPlan plan;
    for (std::size_t i = 0; i < trees.size(); ++i) {
        const TreeCandidate& tree = trees[i];
        if (road_d[i] > config.buffer_m) {
            plan.skipped.push_back({tree.id, SkipReason::OutsideBuffer, road_d[i]});
            continue;
        }
        std::vector<PanoramaMeta> options;
        try {
            options = panoramas.candidates(tree);
        } catch (const std::exception& e) {
            throw PanoramaSourceError(tree.id, e.what());
        }
        const auto nearest = nearest_panorama(tree, options);
        if (!nearest) {
            plan.skipped.push_back({tree.id, SkipReason::NoPanorama, std::nullopt});
            continue;
        }
        if (nearest->second > config.max_dist_m) {
            plan.skipped.push_back({tree.id, SkipReason::BeyondMaxDistance, nearest->second});
            continue;
        }
        try {
            plan.requests.push_back(make_view_request(tree, nearest->first, config));
        } catch (const DegenerateGeometryError&) {
            plan.skipped.push_back({tree.id, SkipReason::CoincidentPosition, 0.0});
        }
    }
    std::stable_sort(plan.requests.begin(), plan.requests.end(),
                     [](const ViewRequest& a, const ViewRequest& b) { return a.target_tree_id < b.target_tree_id; });
    std::stable_sort(plan.skipped.begin(), plan.skipped.end(),
                     [](const SkippedTree& a, const SkippedTree& b) { return a.tree_id < b.tree_id; });
    return plan;
}

// ---------------------------------------------------------------- formats

namespace {

GeoPoint lonlat(const json& c) {
    if (!c.is_array() || c.size() < 2) throw std::invalid_argument("GeoJSON position must be [lon, lat]");
    GeoPoint p{c[1].get<double>(), c[0].get<double>()};
    validate(p);
    return p;
}

void collect_geometry(const json& g, RoadNetwork& out) {
    if (g.is_null()) return;
    const std::string type = g.at("type").get<std::string>();
    if (type == "LineString") {
        auto& line = out.polylines.emplace_back();
        for (const auto& c : g.at("coordinates")) line.push_back(lonlat(c));
    } else if (type == "MultiLineString") {
        for (const auto& part : g.at("coordinates")) {
            auto& line = out.polylines.emplace_back();
            for (const auto& c : part) line.push_back(lonlat(c));
        }
    } else if (type == "GeometryCollection") {
        for (const auto& sub : g.at("geometries")) collect_geometry(sub, out);
    }
    // Other geometry types carry no road segments.
}

}  // namespace

RoadNetwork parse_roads_geojson(const json& j) {
    RoadNetwork net;
    const std::string type = j.at("type").get<std::string>();
    if (type == "FeatureCollection") {
        for (const auto& f : j.at("features")) collect_geometry(f.at("geometry"), net);
    } else if (type == "Feature") {
        collect_geometry(j.at("geometry"), net);
    } else {
        collect_geometry(j, net);
    }
    net.validate();
    return net;
}

RoadNetwork read_roads_geojson(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open roads file " + path.string());
    return parse_roads_geojson(json::parse(in));
}

std::vector<TreeCandidate> parse_trees(const json& j) {
    std::vector<TreeCandidate> trees;
    auto id_of = [](const json& v) {
        return v.is_string() ? v.get<std::string>() : v.dump();
    };
    if (j.is_object() && j.value("type", std::string{}) == "FeatureCollection") {
        for (const auto& f : j.at("features")) {
            const auto& g = f.at("geometry");
            if (g.at("type").get<std::string>() != "Point") continue;
            const json props = f.value("properties", json::object());
            TreeCandidate t;
            t.location = lonlat(g.at("coordinates"));
            if (props.contains("id")) {
                t.id = id_of(props["id"]);
            } else if (f.contains("id")) {
                t.id = id_of(f["id"]);
            } else {
                throw std::invalid_argument("tree feature without id");
            }
            t.source_confidence = props.value("confidence", 1.0);
            trees.push_back(std::move(t));
        }
    } else if (j.is_array()) {
        for (const auto& e : j) {
            TreeCandidate t;
            t.id = id_of(e.at("id"));
            t.location = {e.at("lat").get<double>(), e.at("lon").get<double>()};
            validate(t.location);
            t.source_confidence = e.value("confidence", 1.0);
            trees.push_back(std::move(t));
        }
    } else {
        throw std::invalid_argument("trees must be a GeoJSON FeatureCollection or a JSON array");
    }
    return trees;
}

std::vector<TreeCandidate> read_trees(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open trees file " + path.string());
    return parse_trees(json::parse(in));
}

std::vector<PanoramaMeta> parse_panoramas(const json& j) {
    if (!j.is_array()) throw std::invalid_argument("panorama metadata must be a JSON array");
    std::vector<PanoramaMeta> out;
    for (const auto& e : j) {
        PanoramaMeta p;
        p.pano_id = e.at("pano_id").get<std::string>();
        p.location = {e.at("lat").get<double>(), e.at("lon").get<double>()};
        validate(p.location);
        if (e.contains("date") && !e["date"].is_null()) p.capture_date = e["date"].get<std::string>();
        out.push_back(std::move(p));
    }
    return out;
}

void to_json(json& j, const ViewRequest& r) {
    j = json{{"pano_id", r.pano_id},
             {"heading", r.heading.degrees()},
             {"pitch", r.pitch},
             {"fov", r.fov},
             {"image_size", {r.width, r.height}},
             {"target_tree_id", r.target_tree_id}};
}

void to_json(json& j, const SkippedTree& s) {
    j = json{{"tree_id", s.tree_id}, {"reason", to_string(s.reason)}};
    if (s.distance_m) j["distance_m"] = *s.distance_m;
}

void write_plan(const std::filesystem::path& dir, const ViewPlan& plan) {
    std::filesystem::create_directories(dir);
    std::ofstream req(dir / "view_requests.jsonl");
    if (!req) throw std::runtime_error("cannot write " + (dir / "view_requests.jsonl").string());
    for (const auto& r : plan.requests) req << json(r).dump() << '\n';
    std::ofstream skip(dir / "skip_report.json");
    if (!skip) throw std::runtime_error("cannot write " + (dir / "skip_report.json").string());
    skip << json{{"planned", plan.requests.size()},
                 {"skipped_count", plan.skipped.size()},
                 {"skipped", plan.skipped}}
                .dump(2)
         << '\n';
}

}  // namespace treemap
