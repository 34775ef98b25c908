#include "treemap/eval.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <stdexcept>
#include <tuple>

namespace treemap {

double iou(const BBox& a, const BBox& b) {
    if (!a.valid() || !b.valid()) return 0.0;
    const Eigen::AlignedBox2d inter = a.aligned().intersection(b.aligned());
    if (inter.isEmpty()) return 0.0;
    const double i = inter.volume();
    const double u = a.area() + b.area() - i;
    return u > 0.0 ? i / u : 0.0;
}

namespace {

std::vector<std::size_t> confidence_order(std::span<const Detection> predictions) {
    std::vector<std::size_t> order(predictions.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto& pa = predictions[a];
        const auto& pb = predictions[b];
        if (pa.confidence != pb.confidence) return pa.confidence > pb.confidence;
        return std::tie(pa.bbox.x, pa.bbox.y, pa.bbox.w, pa.bbox.h) <
               std::tie(pb.bbox.x, pb.bbox.y, pb.bbox.w, pb.bbox.h);
    });
    return order;
}

// Index of the best unmatched truth for `box`, or npos.
std::size_t best_truth(const BBox& box, std::span<const BBox> truths, const std::vector<bool>& taken,
                       double iou_threshold, double& best_iou) {
    std::size_t best = static_cast<std::size_t>(-1);
    best_iou = -1.0;
    for (std::size_t t = 0; t < truths.size(); ++t) {
        if (taken[t]) continue;
        const double v = iou(box, truths[t]);
        if (v >= iou_threshold && v > best_iou) {
            best_iou = v;
            best = t;
        }
    }
    return best;
}

}  // namespace

MatchResult match(std::span<const Detection> predictions, std::span<const BBox> truths,
                  double iou_threshold) {
    MatchResult result;
    std::vector<bool> taken(truths.size(), false);
    for (std::size_t p : confidence_order(predictions)) {
        double v = 0.0;
        const std::size_t t = best_truth(predictions[p].bbox, truths, taken, iou_threshold, v);
        if (t == static_cast<std::size_t>(-1)) {
            result.unmatched_predictions.push_back(p);
        } else {
            taken[t] = true;
            result.pairs.push_back({p, t, v});
        }
    }
    std::sort(result.unmatched_predictions.begin(), result.unmatched_predictions.end());
    for (std::size_t t = 0; t < truths.size(); ++t) {
        if (!taken[t]) result.unmatched_truths.push_back(t);
    }
    return result;
}

Metrics metrics(const Counts& c) {
    Metrics m;
    const double tp = static_cast<double>(c.tp);
    if (c.tp + c.fp > 0) {
        m.precision = tp / static_cast<double>(c.tp + c.fp);
    } else {
        m.precision_defined = false;
    }
    if (c.tp + c.fn > 0) {
        m.recall = tp / static_cast<double>(c.tp + c.fn);
    } else {
        m.recall_defined = false;
    }
    const double s = m.precision + m.recall;
    m.f1 = s > 0.0 ? 2.0 * m.precision * m.recall / s : 0.0;
    return m;
}

Metrics metrics(const MatchResult& match, std::size_t truth_count) {
    if (truth_count < match.tp()) {
        throw std::invalid_argument("truth count smaller than the number of matched pairs");
    }
    return metrics(Counts{match.tp(), match.fp(), truth_count - match.tp()});
}

namespace {

struct ImageGroup {
    std::vector<Detection> predictions;
    std::vector<BBox> truths;
};

std::map<std::string, ImageGroup> group_by_image(std::span<const Detection> predictions,
                                                 std::span<const GroundTruth> truths) {
    std::map<std::string, ImageGroup> groups;
    for (const auto& p : predictions) groups[p.image_id].predictions.push_back(p);
    for (const auto& t : truths) groups[t.image_id].truths.push_back(t.bbox);
    return groups;
}

}  // namespace

Counts evaluate_counts(std::span<const Detection> predictions, std::span<const GroundTruth> truths,
                       double iou_threshold) {
    Counts total;
    for (const auto& [id, g] : group_by_image(predictions, truths)) {
        const MatchResult m = match(g.predictions, g.truths, iou_threshold);
        total += Counts{m.tp(), m.fp(), m.fn()};
    }
    return total;
}

std::vector<double> default_threshold_grid() {
    std::vector<double> grid;
    grid.reserve(101);
    for (int i = 0; i <= 100; ++i) grid.push_back(i / 100.0);
    return grid;
}

SweepResult f1_sweep(std::span<const Detection> predictions, std::span<const GroundTruth> truths,
                     std::span<const double> thresholds, double iou_threshold) {
    if (thresholds.empty()) throw std::invalid_argument("threshold grid must be non-empty");
    if (!std::is_sorted(thresholds.begin(), thresholds.end())) {
        throw std::invalid_argument("threshold grid must be ascending");
    }
    SweepResult result;
    std::vector<Detection> kept;
    for (double threshold : thresholds) {
        kept.clear();
        for (const auto& p : predictions) {
            if (p.confidence >= threshold) kept.push_back(p);
        }
        const Counts c = evaluate_counts(kept, truths, iou_threshold);
        const Metrics m = metrics(c);
        result.points.push_back({threshold, m.precision, m.recall, m.f1, c});
    }
    result.best = result.points.front();
    for (const auto& p : result.points) {
        if (p.f1 > result.best.f1) result.best = p;
    }
    return result;
}

double average_precision(std::span<const Detection> predictions,
                         std::span<const GroundTruth> truths, double iou_threshold) {
    if (truths.empty()) return 0.0;

    std::map<std::string, std::vector<BBox>> truth_by_image;
    for (const auto& t : truths) truth_by_image[t.image_id].push_back(t.bbox);
    std::map<std::string, std::vector<bool>> taken;
    for (const auto& [id, boxes] : truth_by_image) taken[id].assign(boxes.size(), false);

    // Global confidence order; within an image this is the order match() uses.
    std::vector<bool> is_tp;
    is_tp.reserve(predictions.size());
    for (std::size_t p : confidence_order(predictions)) {
        const auto it = truth_by_image.find(predictions[p].image_id);
        if (it == truth_by_image.end()) {
            is_tp.push_back(false);
            continue;
        }
        auto& flags = taken[it->first];
        double v = 0.0;
        const std::size_t t = best_truth(predictions[p].bbox, it->second, flags, iou_threshold, v);
        if (t == static_cast<std::size_t>(-1)) {
            is_tp.push_back(false);
        } else {
            flags[t] = true;
            is_tp.push_back(true);
        }
    }

    const double n_truth = static_cast<double>(truths.size());
    std::vector<double> precision(is_tp.size());
    std::vector<double> recall(is_tp.size());
    double tp = 0.0;
    for (std::size_t i = 0; i < is_tp.size(); ++i) {
        if (is_tp[i]) tp += 1.0;
        precision[i] = tp / static_cast<double>(i + 1);
        recall[i] = tp / n_truth;
    }
    // Precision envelope: max precision at any recall at or beyond this one.
    for (std::size_t i = precision.size(); i-- > 1;) {
        precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < is_tp.size(); ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

double relative_change_percent(double initial, double final) {
    if (initial == 0.0) throw std::invalid_argument("relative change from zero is undefined");
    return (final - initial) / initial * 100.0;
}

}  // namespace treemap
