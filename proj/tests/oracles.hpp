#pragma once

// Independent reference computations used by the unit and acceptance tests.

#include "treemap/bbox.hpp"
#include "treemap/eval.hpp"
#include "treemap/geo.hpp"
#include "treemap/viewplan.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace oracle {

// Published detection counts and the figures printed next to them.
struct CountRow {
    const char* label;
    std::size_t tp, fp, fn;
};
inline constexpr CountRow kInitial{"initial", 2836, 469, 955};
inline constexpr CountRow kSslFinal{"ssl final", 2538, 369, 1253};
inline constexpr CountRow kAlFinal{"al final", 3295, 316, 496};
inline constexpr CountRow kHybridFinal{"hybrid final", 3327, 303, 464};

struct PublishedMetric {
    const char* label;
    CountRow row;
    char which;  // 'p', 'r' or 'f'
    double value;
};
inline const std::vector<PublishedMetric>& published_metrics() {
    static const std::vector<PublishedMetric> v{
        {"initial precision", kInitial, 'p', 0.858},   {"initial recall", kInitial, 'r', 0.748},
        {"initial f1", kInitial, 'f', 0.80},           {"ssl final recall", kSslFinal, 'r', 0.67},
        {"al final precision", kAlFinal, 'p', 0.91},   {"al final recall", kAlFinal, 'r', 0.87},
        {"al final f1", kAlFinal, 'f', 0.89},          {"hybrid final precision", kHybridFinal, 'p', 0.92},
        {"hybrid final recall", kHybridFinal, 'r', 0.88}, {"hybrid final f1", kHybridFinal, 'f', 0.90},
    };
    return v;
}

struct PublishedDelta {
    const char* label;
    CountRow row;
    char which;  // 't' tp, 'p' fp, 'n' fn
    double percent;
};
inline const std::vector<PublishedDelta>& published_deltas() {
    static const std::vector<PublishedDelta> v{
        {"ssl tp", kSslFinal, 't', -10.5},   {"ssl fn", kSslFinal, 'n', 31.2},
        {"ssl fp", kSslFinal, 'p', -21.3},   {"al tp", kAlFinal, 't', 16.2},
        {"al fn", kAlFinal, 'n', -48.1},     {"al fp", kAlFinal, 'p', -32.6},
        {"hybrid tp", kHybridFinal, 't', 17.3}, {"hybrid fn", kHybridFinal, 'n', -51.4},
        {"hybrid fp", kHybridFinal, 'p', -35.4},
    };
    return v;
}

// Hand-written closed forms, kept separate from the library's metrics().
inline double precision(std::size_t tp, std::size_t fp) { return double(tp) / double(tp + fp); }
inline double recall(std::size_t tp, std::size_t fn) { return double(tp) / double(tp + fn); }
inline double f1(std::size_t tp, std::size_t fp, std::size_t fn) {
    return 2.0 * double(tp) / double(2 * tp + fp + fn);
}

// Point-to-segment distance by explicit parametrisation.
inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double vx = bx - ax, vy = by - ay;
    const double len2 = vx * vx + vy * vy;
    double t = 0.0;
    if (len2 > 0.0) t = ((px - ax) * vx + (py - ay) * vy) / len2;
    if (t < 0.0) t = 0.0;
    if (t > 1.0) t = 1.0;
    const double cx = ax + t * vx, cy = ay + t * vy;
    return std::hypot(px - cx, py - cy);
}

// Exhaustive scan over every segment of every polyline after projecting all
// geometry into the zone of the mean longitude (northern hemisphere fixtures).
inline std::vector<std::string> buffer_filter_ids(const std::vector<treemap::TreeCandidate>& trees,
                                                  const treemap::RoadNetwork& roads, double buffer_m) {
    double lon_sum = 0.0;
    std::size_t n = 0;
    for (const auto& t : trees) lon_sum += t.location.lon, ++n;
    for (const auto& line : roads.polylines)
        for (const auto& v : line) lon_sum += v.lon, ++n;
    const int zone = treemap::utm_zone_for(lon_sum / double(n));

    std::vector<std::string> kept;
    for (const auto& t : trees) {
        const auto p = treemap::to_utm(t.location, zone);
        double best = std::numeric_limits<double>::infinity();
        for (const auto& line : roads.polylines) {
            for (std::size_t i = 0; i + 1 < line.size(); ++i) {
                const auto a = treemap::to_utm(line[i], zone);
                const auto b = treemap::to_utm(line[i + 1], zone);
                best = std::min(best, segment_distance(p.easting, p.northing, a.easting, a.northing,
                                                       b.easting, b.northing));
            }
        }
        if (best <= buffer_m) kept.push_back(t.id);
    }
    return kept;
}

// Random trees and roads in a small LA-basin patch.
struct GeoFixture {
    std::vector<treemap::TreeCandidate> trees;
    treemap::RoadNetwork roads;
    std::vector<treemap::PanoramaMeta> panoramas;
};

inline GeoFixture la_fixture(std::size_t n_trees, std::size_t n_roads, std::size_t n_panos, unsigned seed) {
    std::mt19937_64 rng(seed);
    // About 1 km square; 1e-5 degrees is roughly a metre.
    std::uniform_real_distribution<double> lat(34.040, 34.049), lon(-118.255, -118.245);
    std::uniform_int_distribution<int> vertices(2, 4);
    std::uniform_real_distribution<double> conf(0.0, 1.0);
    GeoFixture f;
    for (std::size_t i = 0; i < n_roads; ++i) {
        std::vector<treemap::GeoPoint> line;
        const int nv = vertices(rng);
        for (int k = 0; k < nv; ++k) line.push_back({lat(rng), lon(rng)});
        f.roads.polylines.push_back(std::move(line));
    }
    for (std::size_t i = 0; i < n_trees; ++i) {
        char id[16];
        std::snprintf(id, sizeof id, "t%05zu", i);
        f.trees.push_back({id, {lat(rng), lon(rng)}, conf(rng)});
    }
    for (std::size_t i = 0; i < n_panos; ++i) {
        char id[16];
        std::snprintf(id, sizeof id, "p%05zu", i);
        f.panoramas.push_back({id, {lat(rng), lon(rng)}, std::nullopt});
    }
    return f;
}

// Maximum number of prediction/truth pairs with IoU >= threshold over every
// one-to-one assignment, by exhaustive search.
inline std::size_t max_matching(const std::vector<treemap::BBox>& preds,
                                const std::vector<treemap::BBox>& truths, double threshold) {
    std::vector<bool> used(truths.size(), false);
    std::function<std::size_t(std::size_t)> go = [&](std::size_t i) -> std::size_t {
        if (i == preds.size()) return 0;
        std::size_t best = go(i + 1);  // leave prediction i unmatched
        for (std::size_t t = 0; t < truths.size(); ++t) {
            if (used[t]) continue;
            const treemap::BBox& a = preds[i];
            const treemap::BBox& b = truths[t];
            const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
            const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
            const double inter = ix * iy;
            const double uni = a.w * a.h + b.w * b.h - inter;
            if (uni <= 0.0 || inter / uni < threshold) continue;
            used[t] = true;
            best = std::max(best, 1 + go(i + 1));
            used[t] = false;
        }
        return best;
    };
    return go(0);
}

// Instance with pairwise-disjoint truths: a prediction can then reach
// IoU >= 0.5 with at most one truth, which is where greedy is optimal.
struct MatchInstance {
    std::vector<treemap::Detection> predictions;
    std::vector<treemap::BBox> truths;
};

inline MatchInstance random_match_instance(std::mt19937_64& rng) {
    std::uniform_int_distribution<int> count(0, 10);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    MatchInstance m;
    const int nt = count(rng);
    // Truths live in distinct cells of a 4x4 grid of 100 px cells.
    std::vector<int> cells(16);
    for (int i = 0; i < 16; ++i) cells[i] = i;
    std::shuffle(cells.begin(), cells.end(), rng);
    for (int i = 0; i < nt; ++i) {
        const double cx = 100.0 * (cells[i] % 4), cy = 100.0 * (cells[i] / 4);
        m.truths.push_back({cx + 10.0 + 20.0 * u(rng), cy + 10.0 + 20.0 * u(rng), 40.0 + 20.0 * u(rng),
                            40.0 + 20.0 * u(rng)});
    }
    const int np = count(rng);
    for (int i = 0; i < np; ++i) {
        treemap::Detection d;
        d.image_id = "img";
        d.confidence = std::round(u(rng) * 100.0) / 100.0;
        if (!m.truths.empty() && u(rng) < 0.75) {
            const auto& t = m.truths[std::size_t(u(rng) * double(m.truths.size())) % m.truths.size()];
            const double s = 0.25 * t.w;
            d.bbox = {t.x + s * (2.0 * u(rng) - 1.0), t.y + s * (2.0 * u(rng) - 1.0), t.w * (0.8 + 0.4 * u(rng)),
                      t.h * (0.8 + 0.4 * u(rng))};
        } else {
            d.bbox = {380.0 * u(rng), 380.0 * u(rng), 20.0 + 40.0 * u(rng), 20.0 + 40.0 * u(rng)};
        }
        m.predictions.push_back(d);
    }
    return m;
}

}  // namespace oracle
