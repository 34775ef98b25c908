#include "treemap/loop.hpp"

#include "treemap/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <map>
#include <set>
#include <unordered_map>
#include <unordered_set>

namespace treemap {

using nlohmann::json;

// ---------------------------------------------------------------- config & json

std::string_view to_string(Strategy s) {
    switch (s) {
        case Strategy::Ssl: return "ssl";
        case Strategy::Al: return "al";
        case Strategy::Hybrid: return "hybrid";
    }
    return "hybrid";
}

Strategy strategy_from_string(std::string_view s) {
    if (s == "ssl") return Strategy::Ssl;
    if (s == "al") return Strategy::Al;
    if (s == "hybrid") return Strategy::Hybrid;
    throw std::invalid_argument("unknown strategy '" + std::string(s) + "' (expected ssl|al|hybrid)");
}

void StrategyConfig::validate() const {
    if (!(tau_flag > 0.0 && tau_flag < tau_accept && tau_accept <= 1.0)) {
        throw std::invalid_argument("thresholds must satisfy 0 < tau_flag < tau_accept <= 1");
    }
    if (max_rounds < 1) throw std::invalid_argument("max_rounds must be >= 1");
    if (!(stop_delta_f1 >= 0.0)) throw std::invalid_argument("stop_delta_f1 must be >= 0");
    if (!(eval_iou > 0.0 && eval_iou <= 1.0)) throw std::invalid_argument("eval_iou must lie in (0, 1]");
    if (!(eval_min_confidence >= 0.0 && eval_min_confidence <= 1.0)) {
        throw std::invalid_argument("eval_min_confidence must lie in [0, 1]");
    }
}

void to_json(json& j, const StrategyConfig& c) {
    j = json{{"strategy", to_string(c.strategy)},
             {"tau_accept", c.tau_accept},
             {"tau_flag", c.tau_flag},
             {"pool_sample_size", c.pool_sample_size},
             {"max_rounds", c.max_rounds},
             {"stop_delta_f1", c.stop_delta_f1},
             {"eval_iou", c.eval_iou},
             {"eval_min_confidence", c.eval_min_confidence},
             {"seed", c.seed}};
}

void from_json(const json& j, StrategyConfig& c) {
    const StrategyConfig d;
    c.strategy = strategy_from_string(j.value("strategy", std::string{to_string(d.strategy)}));
    c.tau_accept = j.value("tau_accept", d.tau_accept);
    c.tau_flag = j.value("tau_flag", d.tau_flag);
    c.pool_sample_size = j.value("pool_sample_size", d.pool_sample_size);
    c.max_rounds = j.value("max_rounds", d.max_rounds);
    c.stop_delta_f1 = j.value("stop_delta_f1", d.stop_delta_f1);
    c.eval_iou = j.value("eval_iou", d.eval_iou);
    c.eval_min_confidence = j.value("eval_min_confidence", d.eval_min_confidence);
    c.seed = j.value("seed", d.seed);
    c.validate();
}

void to_json(json& j, const ReviewItem& r) {
    j = json{{"image_id", r.image_id}, {"proposed", r.proposed}, {"reason", r.reason}, {"round", r.round}};
}

void from_json(const json& j, ReviewItem& r) {
    r.image_id = j.at("image_id").get<std::string>();
    r.proposed = j.value("proposed", json::array()).get<std::vector<Detection>>();
    r.reason = j.value("reason", std::string{"low_confidence"});
    r.round = j.value("round", 0);
}

void to_json(json& j, const ReviewVerdict& v) {
    j = json{{"image_id", v.image_id},
             {"kept", v.kept},
             {"discarded_count", v.discarded_count},
             {"annotator_id", v.annotator_id},
             {"round", v.round}};
}

void from_json(const json& j, ReviewVerdict& v) {
    v.image_id = j.at("image_id").get<std::string>();
    v.kept = j.value("kept", json::array()).get<std::vector<BBox>>();
    v.discarded_count = j.value("discarded_count", std::size_t{0});
    v.annotator_id = j.value("annotator_id", std::string{});
    v.round = j.value("round", 0);
}

void to_json(json& j, const RoundReport& r) {
    j = json{{"round", r.round},
             {"strategy", to_string(r.strategy)},
             {"tp", r.tp},
             {"fp", r.fp},
             {"fn", r.fn},
             {"precision", r.precision},
             {"recall", r.recall},
             {"f1", r.f1},
             {"pseudo_added", r.pseudo_added},
             {"human_added", r.human_added},
             {"stopped", r.stopped},
             {"sampled", r.sampled},
             {"flagged", r.flagged},
             {"carried_over", r.carried_over},
             {"detect_errors", r.detect_errors}};
}

void from_json(const json& j, RoundReport& r) {
    r.round = j.at("round").get<int>();
    r.strategy = strategy_from_string(j.at("strategy").get<std::string>());
    r.tp = j.at("tp").get<std::size_t>();
    r.fp = j.at("fp").get<std::size_t>();
    r.fn = j.at("fn").get<std::size_t>();
    r.precision = j.at("precision").get<double>();
    r.recall = j.at("recall").get<double>();
    r.f1 = j.at("f1").get<double>();
    r.pseudo_added = j.value("pseudo_added", std::size_t{0});
    r.human_added = j.value("human_added", std::size_t{0});
    r.stopped = j.value("stopped", false);
    r.sampled = j.value("sampled", std::size_t{0});
    r.flagged = j.value("flagged", std::size_t{0});
    r.carried_over = j.value("carried_over", std::size_t{0});
    r.detect_errors = j.value("detect_errors", std::size_t{0});
}

std::vector<ReviewVerdict> FileAnnotator::review(std::span<const ReviewItem> items) {
    std::unordered_set<std::string> wanted;
    for (const auto& item : items) wanted.insert(item.image_id);
    std::vector<ReviewVerdict> out;
    std::vector<ReviewVerdict> rest;
    for (auto& v : verdicts_) {
        (wanted.contains(v.image_id) ? out : rest).push_back(std::move(v));
    }
    verdicts_ = std::move(rest);
    return out;
}

std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------- rounds

namespace {

constexpr std::size_t kDetectChunk = 64;

void fire(const PhaseHook& hook, RoundPhase phase) {
    if (hook) hook(phase);
}

/// Detects in fixed-size chunks concurrently; output order follows input.
DetectionBatch detect_parallel(const Detector& detector, std::span<const std::string> ids) {
    if (ids.size() <= kDetectChunk) return detector.detect(ids);
    std::vector<std::future<DetectionBatch>> parts;
    for (std::size_t i = 0; i < ids.size(); i += kDetectChunk) {
        const auto chunk = ids.subspan(i, std::min(kDetectChunk, ids.size() - i));
        parts.push_back(std::async(std::launch::async, [&detector, chunk] { return detector.detect(chunk); }));
    }
    DetectionBatch all;
    for (auto& f : parts) {
        DetectionBatch b = f.get();
        all.detections.insert(all.detections.end(), b.detections.begin(), b.detections.end());
        all.errors.insert(all.errors.end(), b.errors.begin(), b.errors.end());
    }
    return all;
}

/// Copy of a box restricted to the image, or nullopt if nothing remains.
std::optional<BBox> fit_to_image(const BBox& box, const ImageRecord& img) {
    if (img.width <= 0.0 || img.height <= 0.0) {
        return box.valid() ? std::optional<BBox>(box) : std::nullopt;
    }
    const BBox c = box.clipped(img.width, img.height);
    return c.valid() ? std::optional<BBox>(c) : std::nullopt;
}

struct RoundOutcome {
    DatasetStore store;
    ReviewBacklog backlog;
    RoundReport report;
};

RoundOutcome execute_round(const DatasetStore& store, Detector& detector, Annotator* annotator,
                           const StrategyConfig& config, int round, const ReviewBacklog& backlog,
                           const PhaseHook& hook) {
    config.validate();
    if (round != store.last_round() + 1) {
        throw SequencingError("round " + std::to_string(round) + " does not follow round " +
                              std::to_string(store.last_round()));
    }
    if (config.tau_accept < store.pseudo_min_confidence()) {
        throw std::invalid_argument("tau_accept below the store's pseudo acceptance threshold");
    }
    const bool pseudo_path = config.strategy != Strategy::Al;
    const bool review_path = config.strategy != Strategy::Ssl;
    if (review_path && !annotator) throw std::invalid_argument("strategy requires an annotator");

    RoundReport report;
    report.round = round;
    report.strategy = config.strategy;

    const std::vector<std::string> sample = sample_pool(store, backlog, config, round);
    if (sample.empty() && (!review_path || backlog.empty())) {
        throw PoolExhausted("unlabeled pool is empty");
    }
    report.sampled = sample.size();
    fire(hook, RoundPhase::Sampled);

    const DetectionBatch batch = detect_parallel(detector, sample);
    report.detect_errors = batch.errors.size();
    std::map<std::string, std::vector<Detection>> by_image;
    for (const auto& d : batch.detections) by_image[d.image_id].push_back(d);
    fire(hook, RoundPhase::Detected);

    std::vector<Annotation> pseudo;
    if (pseudo_path) {
        for (const auto& id : sample) {
            const auto it = by_image.find(id);
            if (it == by_image.end()) continue;
            const ImageRecord& img = store.image(id);
            for (const auto& d : it->second) {
                if (!(d.confidence > config.tau_accept)) continue;
                if (auto box = fit_to_image(d.bbox, img)) {
                    pseudo.push_back({id, *box, Provenance::Pseudo, d.confidence, round});
                }
            }
        }
    }

    ReviewBacklog queue = backlog;
    std::vector<Annotation> human;
    std::vector<std::string> reviewed;
    if (review_path) {
        for (const auto& id : sample) {
            const auto it = by_image.find(id);
            if (it == by_image.end()) continue;
            const bool flag = std::any_of(it->second.begin(), it->second.end(),
                                          [&](const Detection& d) { return d.confidence < config.tau_flag; });
            if (flag) {
                queue.push_back({id, it->second, "low_confidence", round});
                ++report.flagged;
            }
        }
        std::vector<ReviewVerdict> verdicts = queue.empty() ? std::vector<ReviewVerdict>{}
                                                            : annotator->review(queue);
        std::unordered_map<std::string, ReviewVerdict> answer;
        for (auto& v : verdicts) answer.insert_or_assign(v.image_id, std::move(v));

        ReviewBacklog still_pending;
        for (auto& item : queue) {
            const auto it = answer.find(item.image_id);
            if (it == answer.end()) {
                still_pending.push_back(std::move(item));
                continue;
            }
            const ImageRecord& img = store.image(item.image_id);
            for (const auto& box : it->second.kept) {
                if (auto fitted = fit_to_image(box, img)) {
                    human.push_back({item.image_id, *fitted, Provenance::Human, std::nullopt, round});
                }
            }
            reviewed.push_back(item.image_id);
        }
        queue = std::move(still_pending);
        report.carried_over = queue.size();
    }
    fire(hook, RoundPhase::Labeled);

    // Human review takes precedence. A verdict that keeps no box still owns
    // its image, and images awaiting review get no pseudo labels until their
    // verdict arrives.
    std::unordered_set<std::string> human_owned(reviewed.begin(), reviewed.end());
    for (const auto& item : queue) human_owned.insert(item.image_id);
    std::vector<Annotation> added;
    for (auto& a : merge_with_precedence(human, pseudo)) {
        if (a.provenance == Provenance::Pseudo) {
            if (human_owned.contains(a.image_id)) continue;
            ++report.pseudo_added;
        } else {
            ++report.human_added;
        }
        added.push_back(std::move(a));
    }

    DatasetStore next = append_round(store, added, round, to_string(config.strategy), reviewed);
    fire(hook, RoundPhase::Merged);

    detector.retrain(next);
    fire(hook, RoundPhase::Retrained);

    const Counts c = evaluate_on_test(next, detector, config.eval_iou, config.eval_min_confidence, &report.detect_errors);
    const Metrics m = metrics(c);
    report.tp = c.tp;
    report.fp = c.fp;
    report.fn = c.fn;
    report.precision = m.precision;
    report.recall = m.recall;
    report.f1 = m.f1;
    fire(hook, RoundPhase::Evaluated);

    return {std::move(next), std::move(queue), report};
}

/// Runs a round with rollback of the detector on failure.
RoundReport guarded_round(DatasetStore& store, Detector& detector, Annotator* annotator,
                          const StrategyConfig& config, int round, ReviewBacklog& backlog,
                          const PhaseHook& hook) {
    const json saved = detector.state();
    try {
        RoundOutcome out = execute_round(store, detector, annotator, config, round, backlog, hook);
        store = std::move(out.store);
        backlog = std::move(out.backlog);
        return out.report;
    } catch (...) {
        detector.restore(saved);
        throw;
    }
}

}  // namespace

std::vector<std::string> sample_pool(const DatasetStore& store, const ReviewBacklog& backlog,
                                     const StrategyConfig& config, int round) {
    std::unordered_set<std::string> pending;
    for (const auto& item : backlog) pending.insert(item.image_id);
    // Each image draws a priority keyed on (seed, round, image id), so two
    // pools sharing an image rank it identically.
    const std::uint64_t key = mix(config.seed, static_cast<std::uint64_t>(round), 0x706f6f6cULL);
    std::vector<std::pair<std::uint64_t, std::string>> ranked;
    for (auto& id : store.image_ids_in(Split::UnlabeledPool)) {
        if (!pending.contains(id)) ranked.emplace_back(mix(key, fnv1a64(id)), std::move(id));
    }
    const std::size_t take = std::min(ranked.size(), config.pool_sample_size);
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(take), ranked.end());
    std::vector<std::string> pool;
    pool.reserve(take);
    for (std::size_t i = 0; i < take; ++i) pool.push_back(std::move(ranked[i].second));
    return pool;
}

Counts evaluate_on_test(const DatasetStore& store, const Detector& detector, double eval_iou,
                        double min_confidence, std::size_t* detect_errors) {
    const std::vector<std::string> test_ids = store.image_ids_in(Split::Test);
    std::vector<GroundTruth> truths;
    for (const auto& a : store.annotations_in(Split::Test)) truths.push_back({a.image_id, a.bbox});
    const DetectionBatch batch = detect_parallel(detector, test_ids);
    if (detect_errors) *detect_errors += batch.errors.size();
    std::vector<Detection> kept;
    for (const auto& d : batch.detections) {
        if (d.confidence >= min_confidence) kept.push_back(d);
    }
    return evaluate_counts(kept, truths, eval_iou);
}

RoundReport ssl_round(DatasetStore& store, Detector& detector, const StrategyConfig& config,
                      int round, const PhaseHook& hook) {
    StrategyConfig c = config;
    c.strategy = Strategy::Ssl;
    ReviewBacklog none;
    return guarded_round(store, detector, nullptr, c, round, none, hook);
}

RoundReport al_round(DatasetStore& store, Detector& detector, Annotator& annotator,
                     const StrategyConfig& config, int round, ReviewBacklog& backlog,
                     const PhaseHook& hook) {
    StrategyConfig c = config;
    c.strategy = Strategy::Al;
    return guarded_round(store, detector, &annotator, c, round, backlog, hook);
}

RoundReport hybrid_round(DatasetStore& store, Detector& detector, Annotator& annotator,
                         const StrategyConfig& config, int round, ReviewBacklog& backlog,
                         const PhaseHook& hook) {
    StrategyConfig c = config;
    c.strategy = Strategy::Hybrid;
    return guarded_round(store, detector, &annotator, c, round, backlog, hook);
}

bool should_stop(std::span<const RoundReport> reports, const StrategyConfig& config) {
    if (reports.empty()) return false;
    if (static_cast<int>(reports.size()) >= config.max_rounds) return true;
    if (reports.size() < 2) return false;
    const double delta = std::abs(reports.back().f1 - reports[reports.size() - 2].f1);
    return delta < config.stop_delta_f1;
}

// ---------------------------------------------------------------- campaign

namespace {

constexpr int kCheckpointSchema = 1;

std::string round_tag(int round) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "%04d", round);
    return buf;
}

void write_atomically(const std::filesystem::path& path, const std::string& content) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp);
        out << content;
        out.flush();
        if (!out) throw std::runtime_error("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

Campaign::Campaign(Detector& detector, Annotator* annotator, CampaignOptions options)
    : detector_(&detector), annotator_(annotator), options_(std::move(options)) {}

Campaign::Campaign(DatasetStore store, Detector& detector, Annotator* annotator,
                   StrategyConfig config, CampaignOptions options)
    : store_(std::move(store)),
      detector_(&detector),
      annotator_(annotator),
      config_(config),
      options_(std::move(options)) {
    config_.validate();
    if (config_.strategy != Strategy::Ssl && !annotator_) {
        throw std::invalid_argument("strategy " + std::string(to_string(config_.strategy)) +
                                    " requires an annotator");
    }
    store_.check_integrity();
    detector_->retrain(store_);
    persist();
}

Campaign Campaign::resume(Detector& detector, Annotator* annotator, CampaignOptions options) {
    if (!options.checkpoint_dir) throw std::invalid_argument("resume requires a checkpoint directory");
    const auto dir = *options.checkpoint_dir;
    const json cp = json::parse(read_file(dir / "latest.json"));
    if (cp.at("schema_version").get<int>() != kCheckpointSchema) {
        throw std::runtime_error("unsupported checkpoint schema");
    }
    Campaign c(detector, annotator, std::move(options));
    c.config_ = cp.at("config").get<StrategyConfig>();
    const std::string store_text = read_file(dir / cp.at("store_file").get<std::string>());
    if (hash_hex(fnv1a64(store_text)) != cp.at("store_hash").get<std::string>()) {
        throw std::runtime_error("store file does not match checkpoint hash");
    }
    c.store_ = DatasetStore::from_json(json::parse(store_text));
    c.reports_ = cp.at("reports").get<std::vector<RoundReport>>();
    c.backlog_ = cp.at("pending_reviews").get<ReviewBacklog>();
    c.finished_ = cp.at("finished").get<bool>();
    detector.restore(cp.at("detector_state"));
    if (c.config_.strategy != Strategy::Ssl && !annotator) {
        throw std::invalid_argument("resumed strategy requires an annotator");
    }
    return c;
}

json Campaign::checkpoint_json() const {
    const int round = store_.last_round();
    return json{{"schema_version", kCheckpointSchema},
                {"round", round},
                {"config", config_},
                {"store_file", "store_round_" + round_tag(round) + ".json"},
                {"store_hash", hash_hex(store_.content_hash())},
                {"detector_state", detector_->state()},
                {"reports", reports_},
                {"pending_reviews", backlog_},
                {"finished", finished_}};
}

void Campaign::persist() const {
    if (!options_.checkpoint_dir) return;
    const auto& dir = *options_.checkpoint_dir;
    std::filesystem::create_directories(dir);
    const json cp = checkpoint_json();
    const std::string tag = round_tag(store_.last_round());
    write_atomically(dir / cp.at("store_file").get<std::string>(), store_.serialize());
    const std::string text = cp.dump(1);
    write_atomically(dir / ("checkpoint_round_" + tag + ".json"), text);
    write_atomically(dir / "latest.json", text);
}

const RoundReport& Campaign::run_round() {
    if (finished_) throw std::logic_error("campaign already finished");
    const int round = store_.last_round() + 1;
    RoundReport report;
    try {
        report = guarded_round(store_, *detector_, annotator_, config_, round, backlog_, options_.hook);
    } catch (const PoolExhausted&) {
        finished_ = true;
        if (!reports_.empty()) reports_.back().stopped = true;
        persist();
        throw;
    }
    reports_.push_back(report);
    if (should_stop(reports_, config_)) {
        reports_.back().stopped = true;
        finished_ = true;
    }
    persist();
    if (options_.on_report) options_.on_report(reports_.back());
    return reports_.back();
}

const std::vector<RoundReport>& Campaign::run() {
    while (!finished_) {
        try {
            run_round();
        } catch (const PoolExhausted&) {
            break;
        }
    }
    return reports_;
}

std::vector<RoundReport> run_campaign(DatasetStore& store, Detector& detector, Annotator* annotator,
                                      const StrategyConfig& config, CampaignOptions options) {
    Campaign campaign(store, detector, annotator, config, std::move(options));
    campaign.run();
    store = campaign.store();
    return campaign.reports();
}

}  // namespace treemap
