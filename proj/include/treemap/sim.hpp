#pragma once

#include "treemap/dataset.hpp"
#include "treemap/detector.hpp"
#include "treemap/loop.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace treemap {

/// Uniform difficulty on [lo, hi] (a point mass when lo == hi), drawn with
/// probability proportional to weight.
struct DifficultyComponent {
    double weight = 1.0;
    double lo = 0.0;
    double hi = 1.0;
};

struct WorldSpec {
    std::size_t seed_images = 60;
    std::size_t pool_images = 1500;
    std::size_t val_images = 0;
    std::size_t test_images = 300;
    int min_boxes = 1;
    int max_boxes = 5;  // at most 16: one box per cell of a 4x4 grid
    double image_width = 640.0;
    double image_height = 640.0;
    std::vector<DifficultyComponent> difficulty{{1.0, 0.0, 1.0}};
    NoiseParams noise;
    RetrainParams retrain;
    double annotator_miss_rate = 0.0;
    std::uint64_t seed = 0;

    /// Throws std::invalid_argument for inconsistent counts or rates.
    void validate() const;
};

void to_json(nlohmann::json& j, const WorldSpec& s);
void from_json(const nlohmann::json& j, WorldSpec& s);

/// Reproducible world: identical spec (including seed) gives an identical
/// world. Image ids are seed_NNNNN, pool_NNNNN, val_NNNNN, test_NNNNN.
SyntheticWorld build_world(const WorldSpec& spec);

/// Seed images in train and test/val images carrying their truths as human
/// annotations; pool images unlabeled.
DatasetStore initial_store(const SyntheticWorld& world, double pseudo_min_confidence = 0.8);

/// Returns each flagged image's truth boxes, dropping each with probability
/// miss_rate (an annotator overlooking trees). Proposals that match no truth
/// at IoU 0.5 count as discarded. answer_rate < 1 leaves items unanswered.
class SimulatedAnnotator final : public Annotator {
public:
    SimulatedAnnotator(std::shared_ptr<const SyntheticWorld> world, double miss_rate = 0.0,
                       double answer_rate = 1.0, std::string annotator_id = "simulated");

    std::vector<ReviewVerdict> review(std::span<const ReviewItem> items) override;

private:
    std::shared_ptr<const SyntheticWorld> world_;
    double miss_rate_;
    double answer_rate_;
    std::string annotator_id_;
    std::uint64_t calls_ = 0;
};

struct StrategyRun {
    Strategy strategy = Strategy::Ssl;
    std::vector<RoundReport> reports;
    std::vector<RoundEntry> history;
};

/// Runs ssl, al and hybrid campaigns from the same initial store with the
/// same seed, concurrently on independent copies.
std::vector<StrategyRun> compare_strategies(std::shared_ptr<const SyntheticWorld> world,
                                            const StrategyConfig& base, double annotator_miss_rate = 0.0);

/// strategy,round,tp,fp,fn,precision,recall,f1,pseudo_added,human_added,stopped
std::string trajectories_csv(std::span<const StrategyRun> runs);
nlohmann::json trajectories_json(std::span<const StrategyRun> runs);
void write_trajectories(const std::filesystem::path& dir, std::span<const StrategyRun> runs);

/// World on which easy boxes are confidently detected and hard ones are not.
WorldSpec default_benchmark_world();
/// Ten rounds, stop rule disabled, so every strategy runs to completion.
StrategyConfig default_benchmark_config();

}  // namespace treemap
