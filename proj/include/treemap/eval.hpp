#pragma once

#include "treemap/bbox.hpp"
#include "treemap/detector.hpp"

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace treemap {

/// Intersection over union; 0 when either box is degenerate.
double iou(const BBox& a, const BBox& b);

struct MatchPair {
    std::size_t prediction = 0;
    std::size_t truth = 0;
    double iou = 0.0;
};

struct MatchResult {
    std::vector<MatchPair> pairs;
    std::vector<std::size_t> unmatched_predictions;
    std::vector<std::size_t> unmatched_truths;

    std::size_t tp() const { return pairs.size(); }
    std::size_t fp() const { return unmatched_predictions.size(); }
    std::size_t fn() const { return unmatched_truths.size(); }
};

/// Greedy one-to-one matching within one image. Predictions are visited by
/// descending confidence (equal confidences ordered by box coordinates, then
/// index); each takes the unmatched truth of highest IoU >= iou_threshold,
/// lower truth index on ties. Indices refer to the caller's spans.
MatchResult match(std::span<const Detection> predictions, std::span<const BBox> truths,
                  double iou_threshold = 0.5);

struct Counts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;

    Counts& operator+=(const Counts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
    friend bool operator==(const Counts&, const Counts&) = default;
};

/// Precision/recall/F1. A zero denominator yields 0 with the matching
/// `*_defined` flag cleared.
struct Metrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool precision_defined = true;
    bool recall_defined = true;
};

Metrics metrics(const Counts& counts);
Metrics metrics(const MatchResult& match, std::size_t truth_count);

struct GroundTruth {
    std::string image_id;
    BBox bbox;
};

/// Per-image matching summed over all images present in either list.
Counts evaluate_counts(std::span<const Detection> predictions, std::span<const GroundTruth> truths,
                       double iou_threshold = 0.5);

struct MetricPoint {
    double threshold = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    Counts counts;
};

struct SweepResult {
    std::vector<MetricPoint> points;
    MetricPoint best;
};

/// 0.00, 0.01, ..., 1.00.
std::vector<double> default_threshold_grid();

/// Metrics at each confidence cutoff (predictions with confidence below the
/// cutoff are dropped before matching). `best` maximizes F1, lowest
/// threshold on ties.
SweepResult f1_sweep(std::span<const Detection> predictions, std::span<const GroundTruth> truths,
                     std::span<const double> thresholds, double iou_threshold = 0.5);

/// Area under the all-points interpolated precision-recall curve.
double average_precision(std::span<const Detection> predictions,
                         std::span<const GroundTruth> truths, double iou_threshold = 0.5);

/// Percent change from `initial` to `final`, e.g. -10.5 for 2836 -> 2538.
double relative_change_percent(double initial, double final);

}  // namespace treemap
