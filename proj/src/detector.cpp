#include "treemap/detector.hpp"

#include "treemap/eval.hpp"
#include "treemap/random.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <thread>

namespace treemap {

using nlohmann::json;

void to_json(json& j, const Detection& d) {
    j = json{{"image_id", d.image_id}, {"x", d.bbox.x},  {"y", d.bbox.y},
             {"w", d.bbox.w},          {"h", d.bbox.h},  {"confidence", d.confidence}};
}

void from_json(const json& j, Detection& d) {
    d.image_id = j.at("image_id").get<std::string>();
    d.bbox = {j.at("x").get<double>(), j.at("y").get<double>(), j.at("w").get<double>(),
              j.at("h").get<double>()};
    d.confidence = j.at("confidence").get<double>();
    if (!(d.confidence >= 0.0 && d.confidence <= 1.0)) {
        throw std::invalid_argument("detection confidence outside [0, 1] for " + d.image_id);
    }
}

TrainingView TrainingView::from_store(const DatasetStore& store) {
    TrainingView view;
    view.images = store.image_ids_in(Split::Train);
    view.annotations = store.annotations_in(Split::Train);
    return view;
}

// ---------------------------------------------------------------- file

std::vector<Detection> read_detections_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open predictions file " + path.string());
    std::vector<Detection> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(json::parse(line).get<Detection>());
        } catch (const std::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

void write_detections_jsonl(const std::filesystem::path& path, std::span<const Detection> dets) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& d : dets) out << json(d).dump() << '\n';
}

FileDetector::FileDetector(std::vector<Detection> detections,
                           std::span<const std::string> extra_known_images) {
    for (auto& d : detections) {
        known_.insert(d.image_id);
        by_image_[d.image_id].push_back(std::move(d));
    }
    known_.insert(extra_known_images.begin(), extra_known_images.end());
}

FileDetector FileDetector::load(const std::filesystem::path& path,
                                std::span<const std::string> extra_known_images) {
    return FileDetector(read_detections_jsonl(path), extra_known_images);
}

DetectionBatch FileDetector::detect(std::span<const std::string> image_ids) const {
    DetectionBatch batch;
    for (const auto& id : image_ids) {
        if (!known_.contains(id)) {
            batch.errors.push_back({id, "unknown image"});
            continue;
        }
        if (auto it = by_image_.find(id); it != by_image_.end()) {
            batch.detections.insert(batch.detections.end(), it->second.begin(), it->second.end());
        }
    }
    return batch;
}

// ---------------------------------------------------------------- remote

RemoteOptions RemoteOptions::from_env(std::string base_url) {
    RemoteOptions o;
    o.base_url = std::move(base_url);
    if (const char* t = std::getenv("TREEMAP_DETECTOR_TIMEOUT_MS")) {
        o.timeout = std::chrono::milliseconds(std::stol(t));
    }
    if (const char* r = std::getenv("TREEMAP_DETECTOR_RETRIES")) o.retries = std::stoi(r);
    return o;
}

RemoteDetector::RemoteDetector(RemoteOptions options) : options_(std::move(options)) {
    if (options_.base_url.empty()) throw std::invalid_argument("remote detector needs a base URL");
    if (options_.retries < 0) throw std::invalid_argument("retry count must be non-negative");
}

json RemoteDetector::post(const std::string& path, const json& body) const {
    std::string last_error;
    for (int attempt = 0; attempt <= options_.retries; ++attempt) {
        if (attempt > 0) std::this_thread::sleep_for(options_.backoff * attempt);
        httplib::Client client(options_.base_url);
        client.set_connection_timeout(options_.timeout);
        client.set_read_timeout(options_.timeout);
        client.set_write_timeout(options_.timeout);
        auto res = client.Post(path, body.dump(), "application/json");
        if (!res) {
            last_error = httplib::to_string(res.error());
            continue;
        }
        if (res->status < 200 || res->status >= 300) {
            last_error = "HTTP " + std::to_string(res->status);
            continue;
        }
        try {
            return res->body.empty() ? json::object() : json::parse(res->body);
        } catch (const json::exception& e) {
            last_error = std::string("malformed response: ") + e.what();
        }
    }
    throw DetectorFailure("POST " + options_.base_url + path + " failed after " +
                          std::to_string(options_.retries + 1) + " attempts: " + last_error);
}

DetectionBatch RemoteDetector::detect(std::span<const std::string> image_ids) const {
    const json reply = post("/detect", json{{"image_ids", std::vector<std::string>(image_ids.begin(), image_ids.end())}});
    DetectionBatch batch;
    try {
        batch.detections = reply.value("detections", json::array()).get<std::vector<Detection>>();
        for (const auto& e : reply.value("errors", json::array())) {
            batch.errors.push_back({e.at("image_id").get<std::string>(), e.value("message", std::string{})});
        }
    } catch (const std::exception& e) {
        throw DetectorFailure(std::string("malformed /detect payload: ") + e.what());
    }
    return batch;
}

void RemoteDetector::retrain(const DatasetStore& store) {
    post("/retrain", json{{"dataset", store.to_json()}});
}

// ---------------------------------------------------------------- synthetic

double NoiseParams::miss_rate(double difficulty) const {
    return std::clamp(miss_base + miss_slope * difficulty, 0.0, 1.0);
}

double NoiseParams::mean_logit(double difficulty) const {
    return confidence_slope * ((1.0 - difficulty) - confidence_offset);
}

void to_json(json& j, const NoiseParams& n) {
    j = json{{"jitter_sigma_px", n.jitter_sigma_px},
             {"miss_base", n.miss_base},
             {"miss_slope", n.miss_slope},
             {"false_positive_rate", n.false_positive_rate},
             {"fp_confidence_mean", n.fp_confidence_mean},
             {"fp_confidence_sigma", n.fp_confidence_sigma},
             {"confidence_slope", n.confidence_slope},
             {"confidence_offset", n.confidence_offset},
             {"confidence_sigma", n.confidence_sigma},
             {"emit_floor", n.emit_floor}};
}

void from_json(const json& j, NoiseParams& n) {
    const NoiseParams d;
    n.jitter_sigma_px = j.value("jitter_sigma_px", d.jitter_sigma_px);
    n.miss_base = j.value("miss_base", d.miss_base);
    n.miss_slope = j.value("miss_slope", d.miss_slope);
    n.false_positive_rate = j.value("false_positive_rate", d.false_positive_rate);
    n.fp_confidence_mean = j.value("fp_confidence_mean", d.fp_confidence_mean);
    n.fp_confidence_sigma = j.value("fp_confidence_sigma", d.fp_confidence_sigma);
    n.confidence_slope = j.value("confidence_slope", d.confidence_slope);
    n.confidence_offset = j.value("confidence_offset", d.confidence_offset);
    n.confidence_sigma = j.value("confidence_sigma", d.confidence_sigma);
    n.emit_floor = j.value("emit_floor", d.emit_floor);
}

void to_json(json& j, const RetrainParams& r) {
    j = json{{"bins", r.bins},
             {"boost", r.boost},
             {"saturation", r.saturation},
             {"negative_penalty", r.negative_penalty},
             {"decay", r.decay},
             {"spill", r.spill},
             {"negative_exponent", r.negative_exponent}};
}

void from_json(const json& j, RetrainParams& r) {
    const RetrainParams d;
    r.bins = j.value("bins", d.bins);
    r.boost = j.value("boost", d.boost);
    r.saturation = j.value("saturation", d.saturation);
    r.negative_penalty = j.value("negative_penalty", d.negative_penalty);
    r.decay = j.value("decay", d.decay);
    r.spill = j.value("spill", d.spill);
    r.negative_exponent = j.value("negative_exponent", d.negative_exponent);
}

void to_json(json& j, const SyntheticWorld& w) {
    json images = json::array();
    for (const auto& img : w.images) {
        json truths = json::array();
        for (const auto& t : img.truths) truths.push_back({{"bbox", t.bbox}, {"difficulty", t.difficulty}});
        images.push_back({{"image_id", img.image_id},
                          {"width", img.width},
                          {"height", img.height},
                          {"truths", std::move(truths)}});
    }
    j = json{{"seed", w.seed}, {"noise", w.noise}, {"retrain", w.retrain}, {"images", std::move(images)}};
}

void from_json(const json& j, SyntheticWorld& w) {
    w.seed = j.value("seed", std::uint64_t{0});
    w.noise = j.value("noise", json::object()).get<NoiseParams>();
    w.retrain = j.value("retrain", json::object()).get<RetrainParams>();
    w.images.clear();
    for (const auto& ji : j.at("images")) {
        SyntheticImage img;
        img.image_id = ji.at("image_id").get<std::string>();
        img.width = ji.value("width", 640.0);
        img.height = ji.value("height", 640.0);
        for (const auto& jt : ji.value("truths", json::array())) {
            img.truths.push_back({jt.at("bbox").get<BBox>(), jt.at("difficulty").get<double>()});
        }
        w.images.push_back(std::move(img));
    }
    w.reindex();
    w.validate();
}

void SyntheticWorld::validate() const {
    auto unit = [](double v, const char* name) {
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string(name) + " must lie in [0, 1]");
    };
    unit(noise.miss_base, "miss_base");
    unit(noise.miss_rate(0.0), "miss rate");
    unit(noise.false_positive_rate, "false_positive_rate");
    unit(noise.emit_floor, "emit_floor");
    unit(noise.fp_confidence_mean, "fp_confidence_mean");
    if (noise.miss_base + noise.miss_slope > 1.0 + 1e-12 || noise.miss_base + noise.miss_slope < -1e-12) {
        throw std::invalid_argument("miss rate at difficulty 1 must lie in [0, 1]");
    }
    if (noise.jitter_sigma_px < 0.0 || noise.confidence_sigma < 0.0 || noise.fp_confidence_sigma < 0.0) {
        throw std::invalid_argument("noise sigmas must be non-negative");
    }
    if (retrain.bins < 1) throw std::invalid_argument("retrain bins must be >= 1");
    if (retrain.saturation <= 0.0) throw std::invalid_argument("retrain saturation must be positive");
    if (retrain.spill < 0.0 || retrain.decay < 0.0 || retrain.negative_penalty < 0.0 ||
        !(retrain.negative_exponent > 0.0)) {
        throw std::invalid_argument("retrain effect sizes must be non-negative");
    }
    if (retrain.spill > 1.0) throw std::invalid_argument("retrain spill must lie in [0, 1]");
    for (const auto& img : images) {
        for (const auto& t : img.truths) {
            unit(t.difficulty, "difficulty");
            if (!t.bbox.valid()) throw std::invalid_argument("degenerate truth box in " + img.image_id);
        }
    }
}

void SyntheticWorld::reindex() {
    index_.clear();
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (!index_.emplace(images[i].image_id, i).second) {
            throw std::invalid_argument("duplicate synthetic image " + images[i].image_id);
        }
    }
}

const SyntheticImage* SyntheticWorld::find(std::string_view image_id) const {
    auto it = index_.find(std::string(image_id));
    return it == index_.end() ? nullptr : &images[it->second];
}

namespace {

enum Stream : std::uint64_t { kMiss = 1, kConfidence, kJitter, kFalsePositive, kFpBox, kFpConf };

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

SyntheticDetector::SyntheticDetector(std::shared_ptr<const SyntheticWorld> world)
    : world_(std::move(world)) {
    if (!world_) throw std::invalid_argument("synthetic detector needs a world");
    world_->validate();
    shift_.assign(static_cast<std::size_t>(world_->retrain.bins), 0.0);
}

int SyntheticDetector::bin_of(double difficulty) const {
    const int bins = world_->retrain.bins;
    return std::clamp(static_cast<int>(difficulty * bins), 0, bins - 1);
}

double SyntheticDetector::mean_confidence(double difficulty) const {
    return logistic(world_->noise.mean_logit(difficulty) +
                    shift_[static_cast<std::size_t>(bin_of(difficulty))]);
}

double SyntheticDetector::truth_confidence(const SyntheticImage& image, std::size_t index) const {
    const auto& n = world_->noise;
    const double d = image.truths[index].difficulty;
    const std::uint64_t key = mix(world_->seed, fnv1a64(image.image_id), index, kConfidence);
    return std::clamp(mean_confidence(d) + n.confidence_sigma * standard_normal(key), 0.0, 1.0);
}

DetectionBatch SyntheticDetector::detect(std::span<const std::string> image_ids) const {
    const auto& n = world_->noise;
    DetectionBatch batch;
    for (const auto& id : image_ids) {
        const SyntheticImage* img = world_->find(id);
        if (!img) {
            batch.errors.push_back({id, "unknown image"});
            continue;
        }
        const std::uint64_t image_key = mix(world_->seed, fnv1a64(img->image_id));
        for (std::size_t i = 0; i < img->truths.size(); ++i) {
            const TruthBox& truth = img->truths[i];
            if (unit_uniform(mix(image_key, i, kMiss)) < n.miss_rate(truth.difficulty)) continue;
            const double conf = truth_confidence(*img, i);
            if (conf < n.emit_floor) continue;

            BBox box = truth.bbox;
            if (n.jitter_sigma_px > 0.0) {
                const std::uint64_t jk = mix(image_key, i, kJitter);
                box.x += n.jitter_sigma_px * standard_normal(mix(jk, 0));
                box.y += n.jitter_sigma_px * standard_normal(mix(jk, 1));
                box.w = std::max(1.0, box.w + n.jitter_sigma_px * standard_normal(mix(jk, 2)));
                box.h = std::max(1.0, box.h + n.jitter_sigma_px * standard_normal(mix(jk, 3)));
                box = box.clipped(img->width, img->height);
                if (!box.valid()) continue;
            }
            batch.detections.push_back({img->image_id, box, conf});
        }
        if (unit_uniform(mix(image_key, kFalsePositive)) < n.false_positive_rate) {
            const std::uint64_t fk = mix(image_key, kFpBox);
            const double w = img->width * (0.1 + 0.2 * unit_uniform(mix(fk, 0)));
            const double h = img->height * (0.1 + 0.2 * unit_uniform(mix(fk, 1)));
            const BBox box{(img->width - w) * unit_uniform(mix(fk, 2)),
                           (img->height - h) * unit_uniform(mix(fk, 3)), w, h};
            const double conf = std::clamp(
                n.fp_confidence_mean + n.fp_confidence_sigma * standard_normal(mix(image_key, kFpConf)),
                0.0, 1.0);
            if (conf >= n.emit_floor) batch.detections.push_back({img->image_id, box, conf});
        }
    }
    return batch;
}

void SyntheticDetector::retrain(const DatasetStore& store) {
    synthetic_retrain(TrainingView::from_store(store));
}

void SyntheticDetector::synthetic_retrain(const TrainingView& training) {
    const auto& p = world_->retrain;
    const auto bins = static_cast<std::size_t>(p.bins);

    std::unordered_map<std::string, std::vector<BBox>> labeled;
    for (const auto& a : training.annotations) labeled[a.image_id].push_back(a.bbox);

    std::vector<double> pos(bins, 0.0);
    std::vector<double> neg(bins, 0.0);
    bool any_evidence = false;
    for (const auto& id : training.images) {
        const SyntheticImage* img = world_->find(id);
        if (!img) continue;
        any_evidence = true;
        const auto it = labeled.find(id);
        for (const auto& truth : img->truths) {
            bool covered = false;
            if (it != labeled.end()) {
                covered = std::any_of(it->second.begin(), it->second.end(),
                                      [&](const BBox& b) { return iou(b, truth.bbox) >= 0.5; });
            }
            (covered ? pos : neg)[static_cast<std::size_t>(bin_of(truth.difficulty))] += 1.0;
        }
    }
    if (!any_evidence) return;

    for (std::size_t b = 0; b < bins; ++b) {
        if (pos[b] + neg[b] == 0.0) {
            shift_[b] -= p.decay;
            continue;
        }
        double support = 0.0;
        for (std::size_t k = 0; k < bins; ++k) {
            const auto dist = static_cast<double>(b > k ? b - k : k - b);
            support += (dist == 0.0 ? 1.0 : std::pow(p.spill, dist)) * pos[k];
        }
        shift_[b] = p.boost * (1.0 - std::exp(-support / p.saturation)) -
                    p.negative_penalty * std::pow(neg[b] / (pos[b] + neg[b]), p.negative_exponent);
    }
}

json SyntheticDetector::state() const { return json{{"shifts", shift_}}; }

void SyntheticDetector::restore(const json& state) {
    auto shifts = state.at("shifts").get<std::vector<double>>();
    if (shifts.size() != shift_.size()) throw std::invalid_argument("detector state has wrong bin count");
    shift_ = std::move(shifts);
}

}  // namespace treemap
