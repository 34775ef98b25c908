#pragma once

#include "treemap/bbox.hpp"
#include "treemap/dataset.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace treemap {

struct Detection {
    std::string image_id;
    BBox bbox;
    double confidence = 0.0;

    friend bool operator==(const Detection&, const Detection&) = default;
};

void to_json(nlohmann::json& j, const Detection& d);
void from_json(const nlohmann::json& j, Detection& d);

/// Per-image failure inside an otherwise successful batch.
struct DetectionError {
    std::string image_id;
    std::string message;
};

struct DetectionBatch {
    std::vector<Detection> detections;
    std::vector<DetectionError> errors;
};

/// The whole batch failed (remote unreachable after retries, etc.).
class DetectorFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// What a retrain sees: the train-split images and their annotations.
struct TrainingView {
    std::vector<std::string> images;
    std::vector<Annotation> annotations;

    static TrainingView from_store(const DatasetStore& store);
};

/// detect() must be safe to call concurrently; retrain() and restore()
/// require exclusive access.
class Detector {
public:
    virtual ~Detector() = default;

    virtual DetectionBatch detect(std::span<const std::string> image_ids) const = 0;
    virtual void retrain(const DatasetStore& store) = 0;

    /// Opaque state captured in round checkpoints.
    virtual nlohmann::json state() const { return nlohmann::json::object(); }
    virtual void restore(const nlohmann::json& /*state*/) {}
};

/// Stored predictions keyed by image id. Retraining is a no-op.
class FileDetector final : public Detector {
public:
    explicit FileDetector(std::vector<Detection> detections,
                          std::span<const std::string> extra_known_images = {});

    /// JSON lines: {image_id, x, y, w, h, confidence}.
    static FileDetector load(const std::filesystem::path& path,
                             std::span<const std::string> extra_known_images = {});

    DetectionBatch detect(std::span<const std::string> image_ids) const override;
    void retrain(const DatasetStore&) override {}

private:
    std::unordered_map<std::string, std::vector<Detection>> by_image_;
    std::unordered_set<std::string> known_;
};

std::vector<Detection> read_detections_jsonl(const std::filesystem::path& path);
void write_detections_jsonl(const std::filesystem::path& path, std::span<const Detection> dets);

struct RemoteOptions {
    std::string base_url;  // e.g. http://127.0.0.1:8080
    std::chrono::milliseconds timeout{30000};
    int retries = 2;
    std::chrono::milliseconds backoff{200};

    /// Overrides from TREEMAP_DETECTOR_TIMEOUT_MS and TREEMAP_DETECTOR_RETRIES.
    static RemoteOptions from_env(std::string base_url);
};

/// Client for a model server speaking
///   POST /detect  {image_ids:[...]}       -> {detections:[...], errors?:[...]}
///   POST /retrain {dataset: extended-COCO} -> any 2xx
class RemoteDetector final : public Detector {
public:
    explicit RemoteDetector(RemoteOptions options);

    DetectionBatch detect(std::span<const std::string> image_ids) const override;
    void retrain(const DatasetStore& store) override;

private:
    nlohmann::json post(const std::string& path, const nlohmann::json& body) const;

    RemoteOptions options_;
};

// ------------------------------------------------------------- synthetic

struct TruthBox {
    BBox bbox;
    double difficulty = 0.0;
};

struct SyntheticImage {
    std::string image_id;
    double width = 640.0;
    double height = 640.0;
    std::vector<TruthBox> truths;
};

/// Detector noise. Mean confidence of a true box with difficulty d is
/// logistic(slope * ((1 - d) - offset) + learned shift), plus Gaussian noise,
/// clamped to [0, 1]. Detections scoring below emit_floor are not reported.
struct NoiseParams {
    double jitter_sigma_px = 0.0;
    double miss_base = 0.0;   // miss(d) = clamp(miss_base + miss_slope * d, 0, 1)
    double miss_slope = 0.0;
    double false_positive_rate = 0.0;  // chance of one spurious box per image
    double fp_confidence_mean = 0.4;
    double fp_confidence_sigma = 0.1;
    double confidence_slope = 10.0;
    double confidence_offset = 0.5;
    double confidence_sigma = 0.0;
    double emit_floor = 0.05;

    double miss_rate(double difficulty) const;
    double mean_logit(double difficulty) const;
};

/// How retraining moves the per-difficulty confidence shift. Difficulty is
/// cut into `bins` equal-width bins. For a bin with training evidence the
/// shift becomes
///   boost * (1 - exp(-support / saturation))
///     - negative_penalty * (neg / (pos + neg)) ^ negative_exponent
/// where pos counts truths covered by a training box, neg counts truths on
/// training images left unlabeled (implicit negatives), and support is pos
/// plus the positives of every other bin weighted by spill^distance. Bins
/// with no evidence lose `decay`.
struct RetrainParams {
    int bins = 10;
    double boost = 1.5;
    double saturation = 40.0;
    double negative_penalty = 3.0;
    double decay = 0.3;
    double spill = 0.0;
    double negative_exponent = 1.0;
};

struct SyntheticWorld {
    std::vector<SyntheticImage> images;
    NoiseParams noise;
    RetrainParams retrain;
    std::uint64_t seed = 0;

    /// Throws std::invalid_argument for rates outside [0, 1] or sigma < 0.
    void validate() const;
    const SyntheticImage* find(std::string_view image_id) const;
    void reindex();

private:
    std::unordered_map<std::string, std::size_t> index_;
};

void to_json(nlohmann::json& j, const NoiseParams& n);
void from_json(const nlohmann::json& j, NoiseParams& n);
void to_json(nlohmann::json& j, const RetrainParams& r);
void from_json(const nlohmann::json& j, RetrainParams& r);
void to_json(nlohmann::json& j, const SyntheticWorld& w);
void from_json(const nlohmann::json& j, SyntheticWorld& w);

/// Parametric stand-in for a trained model over a SyntheticWorld. All noise
/// is keyed on (seed, image, box), so detect() is a pure function of the
/// world and the current learned shifts.
class SyntheticDetector final : public Detector {
public:
    explicit SyntheticDetector(std::shared_ptr<const SyntheticWorld> world);

    DetectionBatch detect(std::span<const std::string> image_ids) const override;
    void retrain(const DatasetStore& store) override;
    /// The retrain rule applied directly to a training view.
    void synthetic_retrain(const TrainingView& training);

    /// Expected confidence of a true box at this difficulty, noise excluded.
    double mean_confidence(double difficulty) const;
    /// Raw confidence drawn for truth `index` of `image` (before the floor).
    double truth_confidence(const SyntheticImage& image, std::size_t index) const;
    const std::vector<double>& shifts() const { return shift_; }
    const SyntheticWorld& world() const { return *world_; }

    nlohmann::json state() const override;
    void restore(const nlohmann::json& state) override;

private:
    int bin_of(double difficulty) const;

    std::shared_ptr<const SyntheticWorld> world_;
    std::vector<double> shift_;
};

}  // namespace treemap
