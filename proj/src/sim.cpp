#include "treemap/sim.hpp"

#include "treemap/eval.hpp"
#include "treemap/random.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <future>
#include <numeric>
#include <sstream>

namespace treemap {

using nlohmann::json;

namespace {

constexpr int kGrid = 4;

enum SimStream : std::uint64_t {
    kBoxCount = 11, kCells, kComponent, kDifficulty, kBoxSize, kBoxOffset, kAnnotatorMiss, kAnswer
};

std::string image_name(const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%05zu", prefix, i);
    return buf;
}

}  // namespace

void WorldSpec::validate() const {
    if (min_boxes < 0 || max_boxes < min_boxes) throw std::invalid_argument("box count range is empty");
    if (max_boxes > kGrid * kGrid) throw std::invalid_argument("at most 16 boxes per image");
    if (!(image_width >= 64.0 && image_height >= 64.0)) throw std::invalid_argument("image too small");
    if (difficulty.empty()) throw std::invalid_argument("difficulty distribution is empty");
    double total = 0.0;
    for (const auto& c : difficulty) {
        if (!(c.weight >= 0.0)) throw std::invalid_argument("difficulty weights must be non-negative");
        if (!(c.lo >= 0.0 && c.hi <= 1.0 && c.lo <= c.hi)) {
            throw std::invalid_argument("difficulty component outside [0, 1]");
        }
        total += c.weight;
    }
    if (!(total > 0.0)) throw std::invalid_argument("difficulty weights sum to zero");
    if (!(annotator_miss_rate >= 0.0 && annotator_miss_rate <= 1.0)) {
        throw std::invalid_argument("annotator_miss_rate must lie in [0, 1]");
    }
    SyntheticWorld probe;
    probe.noise = noise;
    probe.retrain = retrain;
    probe.validate();
}

void to_json(json& j, const WorldSpec& s) {
    json comps = json::array();
    for (const auto& c : s.difficulty) comps.push_back({{"weight", c.weight}, {"lo", c.lo}, {"hi", c.hi}});
    j = json{{"seed_images", s.seed_images},
             {"pool_images", s.pool_images},
             {"val_images", s.val_images},
             {"test_images", s.test_images},
             {"min_boxes", s.min_boxes},
             {"max_boxes", s.max_boxes},
             {"image_width", s.image_width},
             {"image_height", s.image_height},
             {"difficulty", std::move(comps)},
             {"noise", s.noise},
             {"retrain", s.retrain},
             {"annotator_miss_rate", s.annotator_miss_rate},
             {"seed", s.seed}};
}

void from_json(const json& j, WorldSpec& s) {
    const WorldSpec d;
    s.seed_images = j.value("seed_images", d.seed_images);
    s.pool_images = j.value("pool_images", d.pool_images);
    s.val_images = j.value("val_images", d.val_images);
    s.test_images = j.value("test_images", d.test_images);
    s.min_boxes = j.value("min_boxes", d.min_boxes);
    s.max_boxes = j.value("max_boxes", d.max_boxes);
    s.image_width = j.value("image_width", d.image_width);
    s.image_height = j.value("image_height", d.image_height);
    if (j.contains("difficulty")) {
        s.difficulty.clear();
        for (const auto& c : j["difficulty"]) {
            s.difficulty.push_back({c.value("weight", 1.0), c.value("lo", 0.0), c.value("hi", c.value("lo", 0.0))});
        }
    } else {
        s.difficulty = d.difficulty;
    }
    s.noise = j.value("noise", json::object()).get<NoiseParams>();
    s.retrain = j.value("retrain", json::object()).get<RetrainParams>();
    s.annotator_miss_rate = j.value("annotator_miss_rate", d.annotator_miss_rate);
    s.seed = j.value("seed", d.seed);
    s.validate();
}

SyntheticWorld build_world(const WorldSpec& spec) {
    spec.validate();
    SyntheticWorld world;
    world.seed = spec.seed;
    world.noise = spec.noise;
    world.retrain = spec.retrain;

    double weight_total = 0.0;
    for (const auto& c : spec.difficulty) weight_total += c.weight;

    const double cell_w = spec.image_width / kGrid;
    const double cell_h = spec.image_height / kGrid;

    auto make_image = [&](std::string id) {
        SyntheticImage img;
        img.image_id = std::move(id);
        img.width = spec.image_width;
        img.height = spec.image_height;
        const std::uint64_t key = mix(spec.seed, fnv1a64(img.image_id));
        const int span = spec.max_boxes - spec.min_boxes + 1;
        const int n = spec.min_boxes +
                      static_cast<int>(unit_uniform(mix(key, kBoxCount)) * span);
        std::array<int, kGrid * kGrid> cells{};
        std::iota(cells.begin(), cells.end(), 0);
        keyed_shuffle(std::span<int>(cells), mix(key, kCells));
        for (int b = 0; b < std::min(n, spec.max_boxes); ++b) {
            const std::uint64_t bk = mix(key, static_cast<std::uint64_t>(b));
            double pick = unit_uniform(mix(bk, kComponent)) * weight_total;
            const DifficultyComponent* comp = &spec.difficulty.back();
            for (const auto& c : spec.difficulty) {
                if (pick < c.weight) {
                    comp = &c;
                    break;
                }
                pick -= c.weight;
            }
            const double difficulty = comp->lo + (comp->hi - comp->lo) * unit_uniform(mix(bk, kDifficulty));
            // Box fills 50-90% of its grid cell.
            const double fw = 0.5 + 0.4 * unit_uniform(mix(bk, kBoxSize, 0));
            const double fh = 0.5 + 0.4 * unit_uniform(mix(bk, kBoxSize, 1));
            const double w = cell_w * fw, h = cell_h * fh;
            const int cell = cells[static_cast<std::size_t>(b)];
            const double x = (cell % kGrid) * cell_w + (cell_w - w) * unit_uniform(mix(bk, kBoxOffset, 0));
            const double y = (cell / kGrid) * cell_h + (cell_h - h) * unit_uniform(mix(bk, kBoxOffset, 1));
            img.truths.push_back({BBox{x, y, w, h}, difficulty});
        }
        world.images.push_back(std::move(img));
    };

    for (std::size_t i = 0; i < spec.seed_images; ++i) make_image(image_name("seed", i));
    for (std::size_t i = 0; i < spec.pool_images; ++i) make_image(image_name("pool", i));
    for (std::size_t i = 0; i < spec.val_images; ++i) make_image(image_name("val", i));
    for (std::size_t i = 0; i < spec.test_images; ++i) make_image(image_name("test", i));
    world.reindex();
    world.validate();
    return world;
}

DatasetStore initial_store(const SyntheticWorld& world, double pseudo_min_confidence) {
    DatasetStore store(pseudo_min_confidence);
    for (const auto& img : world.images) {
        ImageRecord rec;
        rec.image_id = img.image_id;
        rec.uri = "synthetic://" + img.image_id;
        rec.domain = DomainTag::Target;
        rec.width = img.width;
        rec.height = img.height;
        const std::string_view id = img.image_id;
        if (id.starts_with("seed_")) {
            rec.split = Split::Train;
        } else if (id.starts_with("test_")) {
            rec.split = Split::Test;
        } else if (id.starts_with("val_")) {
            rec.split = Split::Val;
        } else {
            rec.split = Split::UnlabeledPool;
        }
        const bool labeled = rec.split != Split::UnlabeledPool;
        store.add_image(std::move(rec));
        if (labeled) {
            for (const auto& t : img.truths) store.add_seed_annotation({img.image_id, t.bbox, Provenance::Human, std::nullopt, 0});
        }
    }
    return store;
}

SimulatedAnnotator::SimulatedAnnotator(std::shared_ptr<const SyntheticWorld> world, double miss_rate,
                                       double answer_rate, std::string annotator_id)
    : world_(std::move(world)),
      miss_rate_(miss_rate),
      answer_rate_(answer_rate),
      annotator_id_(std::move(annotator_id)) {
    if (!world_) throw std::invalid_argument("simulated annotator needs a world");
    if (!(miss_rate >= 0.0 && miss_rate <= 1.0) || !(answer_rate >= 0.0 && answer_rate <= 1.0)) {
        throw std::invalid_argument("annotator rates must lie in [0, 1]");
    }
}

std::vector<ReviewVerdict> SimulatedAnnotator::review(std::span<const ReviewItem> items) {
    std::vector<ReviewVerdict> out;
    const std::uint64_t call = calls_++;
    for (const auto& item : items) {
        const SyntheticImage* img = world_->find(item.image_id);
        if (!img) continue;
        const std::uint64_t key = mix(world_->seed, fnv1a64(item.image_id));
        if (answer_rate_ < 1.0 && unit_uniform(mix(key, kAnswer, call)) >= answer_rate_) continue;

        ReviewVerdict v;
        v.image_id = item.image_id;
        v.annotator_id = annotator_id_;
        v.round = item.round;
        for (std::size_t t = 0; t < img->truths.size(); ++t) {
            if (unit_uniform(mix(key, kAnnotatorMiss, t)) < miss_rate_) continue;
            v.kept.push_back(img->truths[t].bbox);
        }
        for (const auto& d : item.proposed) {
            const bool real = std::any_of(img->truths.begin(), img->truths.end(),
                                          [&](const TruthBox& t) { return iou(d.bbox, t.bbox) >= 0.5; });
            if (!real) ++v.discarded_count;
        }
        out.push_back(std::move(v));
    }
    return out;
}

std::vector<StrategyRun> compare_strategies(std::shared_ptr<const SyntheticWorld> world,
                                            const StrategyConfig& base, double annotator_miss_rate) {
    base.validate();
    const DatasetStore start = initial_store(*world, base.tau_accept);
    constexpr std::array<Strategy, 3> kAll{Strategy::Ssl, Strategy::Al, Strategy::Hybrid};

    std::vector<std::future<StrategyRun>> jobs;
    for (Strategy s : kAll) {
        jobs.push_back(std::async(std::launch::async, [&, s] {
            StrategyConfig config = base;
            config.strategy = s;
            SyntheticDetector detector(world);
            SimulatedAnnotator annotator(world, annotator_miss_rate);
            DatasetStore store = start;
            StrategyRun run;
            run.strategy = s;
            run.reports = run_campaign(store, detector, s == Strategy::Ssl ? nullptr : &annotator, config);
            run.history = store.round_history();
            return run;
        }));
    }
    std::vector<StrategyRun> runs;
    for (auto& j : jobs) runs.push_back(j.get());
    return runs;
}

std::string trajectories_csv(std::span<const StrategyRun> runs) {
    std::ostringstream out;
    out << "strategy,round,tp,fp,fn,precision,recall,f1,pseudo_added,human_added,stopped\n";
    char buf[256];
    for (const auto& run : runs) {
        for (const auto& r : run.reports) {
            std::snprintf(buf, sizeof buf, "%s,%d,%zu,%zu,%zu,%.6f,%.6f,%.6f,%zu,%zu,%d\n",
                          std::string(to_string(run.strategy)).c_str(), r.round, r.tp, r.fp, r.fn,
                          r.precision, r.recall, r.f1, r.pseudo_added, r.human_added, r.stopped ? 1 : 0);
            out << buf;
        }
    }
    return out.str();
}

json trajectories_json(std::span<const StrategyRun> runs) {
    json j = json::object();
    for (const auto& run : runs) {
        j[std::string(to_string(run.strategy))] = {{"reports", run.reports}, {"round_history", run.history}};
    }
    return j;
}

void write_trajectories(const std::filesystem::path& dir, std::span<const StrategyRun> runs) {
    std::filesystem::create_directories(dir);
    std::ofstream csv(dir / "trajectories.csv", std::ios::binary);
    csv << trajectories_csv(runs);
    std::ofstream js(dir / "reports.json", std::ios::binary);
    js << trajectories_json(runs).dump(2) << '\n';
    if (!csv || !js) throw std::runtime_error("cannot write trajectories into " + dir.string());
}

WorldSpec default_benchmark_world() {
    WorldSpec spec;
    spec.seed_images = 2000;
    spec.pool_images = 16000;
    spec.test_images = 500;
    spec.noise.confidence_offset = 0.6;
    spec.noise.emit_floor = 0.01;
    spec.retrain.boost = 8.0;
    spec.retrain.saturation = 8000.0;
    spec.retrain.negative_penalty = 10.0;
    spec.retrain.negative_exponent = 3.0;
    spec.retrain.spill = 0.9;
    spec.seed = 20250117;
    return spec;
}

StrategyConfig default_benchmark_config() {
    StrategyConfig c;
    c.pool_sample_size = 2000;
    c.max_rounds = 10;
    c.stop_delta_f1 = 0.0;
    c.seed = 7;
    return c;
}

}  // namespace treemap
