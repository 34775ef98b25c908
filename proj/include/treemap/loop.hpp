#pragma once

#include "treemap/dataset.hpp"
#include "treemap/detector.hpp"
#include "treemap/eval.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace treemap {

enum class Strategy { Ssl, Al, Hybrid };

std::string_view to_string(Strategy s);
Strategy strategy_from_string(std::string_view s);

struct StrategyConfig {
    Strategy strategy = Strategy::Hybrid;
    double tau_accept = 0.8;  // pseudo-label when confidence > tau_accept
    double tau_flag = 0.5;    // flag image when any confidence < tau_flag
    std::size_t pool_sample_size = 100;
    int max_rounds = 10;
    double stop_delta_f1 = 0.005;  // absolute F1 difference
    double eval_iou = 0.5;
    double eval_min_confidence = 0.25;  // detections scored below are ignored
    std::uint64_t seed = 0;

    /// Throws std::invalid_argument unless 0 < tau_flag < tau_accept <= 1
    /// and max_rounds >= 1.
    void validate() const;
};

void to_json(nlohmann::json& j, const StrategyConfig& c);
void from_json(const nlohmann::json& j, StrategyConfig& c);

struct ReviewItem {
    std::string image_id;
    std::vector<Detection> proposed;
    std::string reason = "low_confidence";
    int round = 0;
};

struct ReviewVerdict {
    std::string image_id;
    std::vector<BBox> kept;
    std::size_t discarded_count = 0;
    std::string annotator_id;
    int round = 0;

    friend bool operator==(const ReviewVerdict&, const ReviewVerdict&) = default;
};

void to_json(nlohmann::json& j, const ReviewItem& r);
void from_json(const nlohmann::json& j, ReviewItem& r);
void to_json(nlohmann::json& j, const ReviewVerdict& v);
void from_json(const nlohmann::json& j, ReviewVerdict& v);

struct RoundReport {
    int round = 0;
    Strategy strategy = Strategy::Hybrid;
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t pseudo_added = 0;
    std::size_t human_added = 0;
    bool stopped = false;
    std::size_t sampled = 0;
    std::size_t flagged = 0;
    std::size_t carried_over = 0;  // review items still unanswered at round close
    std::size_t detect_errors = 0;
};

void to_json(nlohmann::json& j, const RoundReport& r);
void from_json(const nlohmann::json& j, RoundReport& r);

/// Answers review items; items left without a verdict are carried forward.
class Annotator {
public:
    virtual ~Annotator() = default;
    virtual std::vector<ReviewVerdict> review(std::span<const ReviewItem> items) = 0;
};

/// Verdicts supplied ahead of time (e.g. imported from a file).
class FileAnnotator final : public Annotator {
public:
    explicit FileAnnotator(std::vector<ReviewVerdict> verdicts) : verdicts_(std::move(verdicts)) {}
    std::vector<ReviewVerdict> review(std::span<const ReviewItem> items) override;

private:
    std::vector<ReviewVerdict> verdicts_;
};

enum class RoundPhase { Sampled, Detected, Labeled, Merged, Retrained, Evaluated };

/// Called at each phase boundary; throwing aborts the round.
using PhaseHook = std::function<void(RoundPhase)>;

class PoolExhausted : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Review items awaiting a verdict across rounds.
using ReviewBacklog = std::vector<ReviewItem>;

/// Pseudo-label only. On any failure the store, detector state and backlog
/// are left as they were.
RoundReport ssl_round(DatasetStore& store, Detector& detector, const StrategyConfig& config,
                      int round, const PhaseHook& hook = {});
RoundReport al_round(DatasetStore& store, Detector& detector, Annotator& annotator,
                     const StrategyConfig& config, int round, ReviewBacklog& backlog,
                     const PhaseHook& hook = {});
RoundReport hybrid_round(DatasetStore& store, Detector& detector, Annotator& annotator,
                         const StrategyConfig& config, int round, ReviewBacklog& backlog,
                         const PhaseHook& hook = {});

/// Images drawn for a round: the pool_sample_size images of the pool (minus
/// backlog images) with the smallest priority hash under (seed, round).
std::vector<std::string> sample_pool(const DatasetStore& store, const ReviewBacklog& backlog,
                                     const StrategyConfig& config, int round);

/// TP/FP/FN on the test split over detections scoring at least
/// min_confidence.
Counts evaluate_on_test(const DatasetStore& store, const Detector& detector, double eval_iou,
                        double min_confidence = 0.0, std::size_t* detect_errors = nullptr);

struct CampaignOptions {
    std::optional<std::filesystem::path> checkpoint_dir;
    PhaseHook hook;
    /// Called with each finished round's report once it is persisted.
    std::function<void(const RoundReport&)> on_report;
};

/// Sequence of rounds over one store with per-round checkpoints.
///
/// Checkpoint directory layout:
///   store_round_NNNN.json       extended-COCO store after round N
///   checkpoint_round_NNNN.json  {config, store_hash, detector_state, reports, ...}
///   latest.json                 copy of the newest checkpoint, replaced atomically
class Campaign {
public:
    /// Fresh campaign: trains the detector on the store's seed annotations
    /// and writes the round-0 checkpoint.
    Campaign(DatasetStore store, Detector& detector, Annotator* annotator, StrategyConfig config,
             CampaignOptions options = {});

    /// Continues from `options.checkpoint_dir`/latest.json; the detector
    /// state is restored from the checkpoint.
    static Campaign resume(Detector& detector, Annotator* annotator, CampaignOptions options);

    /// Runs one round, applies the stop rule, persists. Throws if finished.
    const RoundReport& run_round();
    /// Runs rounds until the stop rule or max_rounds is reached.
    const std::vector<RoundReport>& run();

    bool finished() const { return finished_; }
    const DatasetStore& store() const { return store_; }
    const std::vector<RoundReport>& reports() const { return reports_; }
    const ReviewBacklog& backlog() const { return backlog_; }
    const StrategyConfig& config() const { return config_; }

    /// Latest checkpoint JSON as written to disk.
    nlohmann::json checkpoint_json() const;

private:
    Campaign(Detector& detector, Annotator* annotator, CampaignOptions options);
    void persist() const;

    DatasetStore store_;
    Detector* detector_;
    Annotator* annotator_;
    StrategyConfig config_;
    CampaignOptions options_;
    std::vector<RoundReport> reports_;
    ReviewBacklog backlog_;
    bool finished_ = false;
};

/// True when the latest round differs from the previous one by less than
/// stop_delta_f1 in F1, or max_rounds rounds have been run.
bool should_stop(std::span<const RoundReport> reports, const StrategyConfig& config);

std::vector<RoundReport> run_campaign(DatasetStore& store, Detector& detector, Annotator* annotator,
                                      const StrategyConfig& config, CampaignOptions options = {});

std::string hash_hex(std::uint64_t h);

}  // namespace treemap
