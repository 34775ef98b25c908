// Command-line front end for the tree mapping pipeline.

#include "treemap/dataset.hpp"
#include "treemap/detector.hpp"
#include "treemap/eval.hpp"
#include "treemap/loop.hpp"
#include "treemap/service.hpp"
#include "treemap/sim.hpp"
#include "treemap/viewplan.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace treemap;

namespace {

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return json::parse(in);
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

fs::path dataset_root() {
    const char* root = std::getenv("TREEMAP_DATASET_ROOT");
    return root ? fs::path(root) : fs::current_path();
}

fs::path default_dataset() { return dataset_root() / "dataset.json"; }

DatasetStore load_store(const fs::path& path) { return DatasetStore::from_json(read_json(path)); }

void save_store(const fs::path& path, const DatasetStore& store) { write_text(path, store.serialize()); }

SplitRatios parse_ratios(const std::string& text) {
    std::vector<double> v;
    std::stringstream ss(text);
    for (std::string part; std::getline(ss, part, ',');) v.push_back(std::stod(part));
    if (v.size() != 3) throw std::invalid_argument("--ratios expects three comma-separated values");
    return {v[0], v[1], v[2]};
}

/// Detector selected by exactly one of the source options.
struct DetectorChoice {
    std::string url;
    fs::path predictions;
    fs::path world;

    std::unique_ptr<Detector> make() const {
        const int chosen = !url.empty() + !predictions.empty() + !world.empty();
        if (chosen != 1) {
            throw std::invalid_argument("choose one of --detector-url, --predictions, --world");
        }
        if (!url.empty()) return std::make_unique<RemoteDetector>(RemoteOptions::from_env(url));
        if (!predictions.empty()) return std::make_unique<FileDetector>(FileDetector::load(predictions));
        return std::make_unique<SyntheticDetector>(synthetic_world());
    }

    std::shared_ptr<const SyntheticWorld> synthetic_world() const {
        if (world.empty()) return nullptr;
        const json j = read_json(world);
        // Either a full world or a spec from which one is built.
        if (j.contains("images")) return std::make_shared<const SyntheticWorld>(j.get<SyntheticWorld>());
        return std::make_shared<const SyntheticWorld>(build_world(j.get<WorldSpec>()));
    }
};

void add_detector_options(CLI::App* cmd, DetectorChoice& d) {
    cmd->add_option("--detector-url", d.url, "Model server base URL");
    cmd->add_option("--predictions", d.predictions, "Stored detections (JSON lines)");
    cmd->add_option("--world", d.world, "Synthetic world or world spec (JSON)");
}

/// Verdicts from a file, or the simulated annotator for synthetic worlds.
std::unique_ptr<Annotator> make_annotator(const fs::path& verdicts, const DetectorChoice& d) {
    if (!verdicts.empty()) return std::make_unique<FileAnnotator>(read_verdicts(verdicts));
    if (auto world = d.synthetic_world()) return std::make_unique<SimulatedAnnotator>(world);
    return std::make_unique<FileAnnotator>(std::vector<ReviewVerdict>{});
}

std::vector<GroundTruth> read_truths(const fs::path& path, const std::string& split) {
    const json j = read_json(path);
    std::vector<GroundTruth> out;
    if (j.is_object() && j.contains("images")) {
        const DatasetStore store = DatasetStore::from_json(j);
        const Split s = split_from_string(split);
        for (const auto& a : store.annotations_in(s)) out.push_back({a.image_id, a.bbox});
        return out;
    }
    for (const auto& t : j) {
        const Detection d = t.get<Detection>();
        out.push_back({d.image_id, d.bbox});
    }
    return out;
}

json histogram_json(const std::map<std::string, int>& counts) {
    std::map<int, int> hist;
    for (const auto& [id, n] : counts) ++hist[n];
    json h = json::object();
    for (const auto& [n, images] : hist) h[std::to_string(n)] = images;
    return h;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Street-level tree detection pipeline"};
    app.require_subcommand(1);

    // plan-views
    fs::path trees_path, roads_path, panos_path, plan_out = "plan";
    ViewConfig view_config;
    auto* plan = app.add_subcommand("plan-views", "Filter trees near roads and pair them with panoramas");
    plan->add_option("--trees", trees_path, "Tree candidates")->required()->check(CLI::ExistingFile);
    plan->add_option("--roads", roads_path, "Road network (GeoJSON)")->required()->check(CLI::ExistingFile);
    plan->add_option("--panoramas", panos_path, "Panorama metadata")->required()->check(CLI::ExistingFile);
    plan->add_option("--buffer-m", view_config.buffer_m, "Road buffer in meters")->capture_default_str();
    plan->add_option("--max-dist-m", view_config.max_dist_m, "Maximum tree-panorama distance")->capture_default_str();
    plan->add_option("--fov", view_config.fov, "Horizontal field of view")->capture_default_str();
    plan->add_option("--out", plan_out, "Output directory")->capture_default_str();
    plan->callback([&] {
        const auto trees = read_trees(trees_path);
        const RoadNetwork roads = read_roads_geojson(roads_path);
        const FilePanoramaSource panos = FilePanoramaSource::load(panos_path);
        const ViewPlan result = plan_views(trees, roads, panos, view_config);
        write_plan(plan_out, result);
        std::cout << json{{"trees", trees.size()},
                          {"requests", result.requests.size()},
                          {"skipped", result.skipped.size()}}
                         .dump()
                  << '\n';
    });

    // split
    fs::path dataset = default_dataset(), dataset_out;
    std::string ratios_text = "0.8,0.1,0.1";
    std::uint64_t split_seed = 0;
    auto* split = app.add_subcommand("split", "Tree-count balanced train/val/test split of labeled images");
    split->add_option("--dataset", dataset, "Dataset store")->capture_default_str();
    split->add_option("--ratios", ratios_text, "train,val,test")->capture_default_str();
    split->add_option("--seed", split_seed, "Shuffle seed")->capture_default_str();
    split->add_option("--out", dataset_out, "Output store (default: overwrite)");
    split->callback([&] {
        DatasetStore store = load_store(dataset);
        std::vector<CountedImage> images;
        for (const Split s : {Split::Train, Split::Val, Split::Test}) {
            for (const auto& [id, n] : store.tree_counts(s)) images.push_back({id, n});
        }
        const SplitAssignment a = balanced_split(images, parse_ratios(ratios_text), split_seed);
        apply_splits(store, a);
        save_store(dataset_out.empty() ? dataset : dataset_out, store);
        json buckets = json::array();
        for (const auto& b : a.buckets) {
            buckets.push_back({{"min_count", b.min_count},
                               {"max_count", b.max_count},
                               {"images", b.image_ids.size()},
                               {"train", b.allocated[0]},
                               {"val", b.allocated[1]},
                               {"test", b.allocated[2]}});
        }
        std::cout << json{{"buckets", buckets}}.dump(2) << '\n';
    });

    // dataset stats
    auto* ds = app.add_subcommand("dataset", "Dataset store utilities");
    ds->require_subcommand(1);
    auto* stats = ds->add_subcommand("stats", "Per-split tree-count histograms");
    stats->add_option("--dataset", dataset, "Dataset store")->capture_default_str();
    stats->callback([&] {
        const DatasetStore store = load_store(dataset);
        json out = json::object();
        for (const Split s : {Split::Train, Split::Val, Split::Test, Split::UnlabeledPool}) {
            const auto counts = store.tree_counts(s);
            out[std::string(to_string(s))] = {{"images", counts.size()},
                                              {"annotations", store.annotations_in(s).size()},
                                              {"tree_count_histogram", histogram_json(counts)}};
        }
        out["rounds"] = store.round_history();
        std::cout << out.dump(2) << '\n';
    });

    // run-round
    std::string strategy_text = "hybrid";
    fs::path config_path, verdicts_path, backlog_path, backlog_out;
    DetectorChoice detector_choice;
    auto* rr = app.add_subcommand("run-round", "Run one learning round on a dataset store");
    rr->add_option("--strategy", strategy_text, "ssl | al | hybrid")
        ->check(CLI::IsMember({"ssl", "al", "hybrid"}))
        ->capture_default_str();
    rr->add_option("--dataset", dataset, "Dataset store")->capture_default_str();
    rr->add_option("--config", config_path, "Strategy config (JSON)");
    rr->add_option("--verdicts", verdicts_path, "Review verdicts to apply");
    rr->add_option("--backlog", backlog_path, "Review items still awaiting verdicts");
    rr->add_option("--backlog-out", backlog_out, "Where to write unanswered review items");
    rr->add_option("--out", dataset_out, "Output store (default: overwrite)");
    add_detector_options(rr, detector_choice);
    rr->callback([&] {
        StrategyConfig config = config_path.empty() ? StrategyConfig{} : read_json(config_path).get<StrategyConfig>();
        config.strategy = strategy_from_string(strategy_text);
        DatasetStore store = load_store(dataset);
        auto detector = detector_choice.make();
        detector->retrain(store);
        ReviewBacklog backlog = backlog_path.empty() ? ReviewBacklog{} : read_review_items(backlog_path);
        const int round = store.last_round() + 1;
        RoundReport report;
        if (config.strategy == Strategy::Ssl) {
            report = ssl_round(store, *detector, config, round);
        } else {
            auto annotator = make_annotator(verdicts_path, detector_choice);
            report = config.strategy == Strategy::Al
                         ? al_round(store, *detector, *annotator, config, round, backlog)
                         : hybrid_round(store, *detector, *annotator, config, round, backlog);
        }
        save_store(dataset_out.empty() ? dataset : dataset_out, store);
        if (!backlog_out.empty()) export_pending(backlog_out, backlog);
        std::cout << json(report).dump(2) << '\n';
    });

    // run-campaign
    fs::path resume_dir;
    auto* rc = app.add_subcommand("run-campaign", "Run rounds until the stop rule, checkpointing each round");
    auto* rc_config = rc->add_option("--config", config_path,
                                     "Campaign config: strategy config plus dataset, checkpoint_dir, detector");
    auto* rc_resume = rc->add_option("--resume", resume_dir, "Checkpoint directory to resume from");
    rc_config->excludes(rc_resume);
    rc->add_option("--verdicts", verdicts_path, "Review verdicts (file-based review)");
    add_detector_options(rc, detector_choice);
    rc->callback([&] {
        if (config_path.empty() && resume_dir.empty()) throw CLI::RequiredError("--config or --resume");
        CampaignOptions options;
        std::optional<Campaign> campaign;
        std::unique_ptr<Detector> detector;
        std::unique_ptr<Annotator> annotator;
        if (!config_path.empty()) {
            const json cfg = read_json(config_path);
            if (cfg.contains("world") && detector_choice.world.empty()) {
                detector_choice.world = cfg.at("world").get<std::string>();
            }
            if (cfg.contains("predictions") && detector_choice.predictions.empty()) {
                detector_choice.predictions = cfg.at("predictions").get<std::string>();
            }
            if (cfg.contains("detector_url") && detector_choice.url.empty()) {
                detector_choice.url = cfg.at("detector_url").get<std::string>();
            }
            detector = detector_choice.make();
            annotator = make_annotator(verdicts_path, detector_choice);
            DatasetStore store = cfg.contains("dataset")
                                     ? load_store(cfg.at("dataset").get<std::string>())
                                     : initial_store(*detector_choice.synthetic_world());
            options.checkpoint_dir = cfg.value("checkpoint_dir", std::string("checkpoints"));
            const StrategyConfig strategy = cfg.get<StrategyConfig>();
            campaign.emplace(std::move(store), *detector, annotator.get(), strategy, options);
        } else {
            options.checkpoint_dir = resume_dir;
            detector = detector_choice.make();
            annotator = make_annotator(verdicts_path, detector_choice);
            campaign.emplace(Campaign::resume(*detector, annotator.get(), options));
        }
        campaign->run();
        std::cout << json(campaign->reports()).dump(2) << '\n';
    });

    // evaluate
    fs::path preds_path, truths_path, eval_out;
    double eval_iou = 0.5;
    bool sweep = false;
    std::string truth_split = "test";
    auto* ev = app.add_subcommand("evaluate", "Precision/recall/F1 of predictions against truths");
    ev->add_option("--predictions", preds_path, "Detections (JSON lines)")->required()->check(CLI::ExistingFile);
    ev->add_option("--truths", truths_path, "Dataset store or JSON list of boxes")->required()->check(CLI::ExistingFile);
    ev->add_option("--iou", eval_iou, "IoU match threshold")->capture_default_str();
    ev->add_option("--split", truth_split, "Split whose annotations are truths (store input)")->capture_default_str();
    ev->add_flag("--sweep", sweep, "Also sweep confidence thresholds 0.00..1.00");
    ev->add_option("--out", eval_out, "Directory for report.json and sweep.csv");
    ev->callback([&] {
        const auto preds = read_detections_jsonl(preds_path);
        const auto truths = read_truths(truths_path, truth_split);
        const Counts c = evaluate_counts(preds, truths, eval_iou);
        const Metrics m = metrics(c);
        json report{{"iou", eval_iou},
                    {"tp", c.tp},
                    {"fp", c.fp},
                    {"fn", c.fn},
                    {"precision", m.precision},
                    {"recall", m.recall},
                    {"f1", m.f1},
                    {"average_precision", average_precision(preds, truths, eval_iou)}};
        std::string csv;
        if (sweep) {
            const auto grid = default_threshold_grid();
            const SweepResult s = f1_sweep(preds, truths, grid, eval_iou);
            report["best"] = {{"threshold", s.best.threshold},
                              {"precision", s.best.precision},
                              {"recall", s.best.recall},
                              {"f1", s.best.f1}};
            std::ostringstream out;
            out << "threshold,tp,fp,fn,precision,recall,f1\n";
            char buf[160];
            for (const auto& p : s.points) {
                std::snprintf(buf, sizeof buf, "%.2f,%zu,%zu,%zu,%.6f,%.6f,%.6f\n", p.threshold, p.counts.tp,
                              p.counts.fp, p.counts.fn, p.precision, p.recall, p.f1);
                out << buf;
            }
            csv = out.str();
        }
        if (!eval_out.empty()) {
            write_text(eval_out / "report.json", report.dump(2) + "\n");
            if (sweep) write_text(eval_out / "sweep.csv", csv);
        }
        std::cout << report.dump(2) << '\n';
    });

    // simulate
    fs::path world_spec_path, sim_out = "simulation";
    auto* sim = app.add_subcommand("simulate", "Run all three strategies on a synthetic world");
    sim->add_option("--world", world_spec_path, "World spec (default: benchmark world)");
    sim->add_option("--config", config_path, "Strategy config (default: benchmark config)");
    sim->add_option("--out", sim_out, "Output directory")->capture_default_str();
    sim->callback([&] {
        const WorldSpec spec = world_spec_path.empty() ? default_benchmark_world()
                                                       : read_json(world_spec_path).get<WorldSpec>();
        const StrategyConfig config = config_path.empty() ? default_benchmark_config()
                                                          : read_json(config_path).get<StrategyConfig>();
        auto world = std::make_shared<const SyntheticWorld>(build_world(spec));
        const auto runs = compare_strategies(world, config, spec.annotator_miss_rate);
        write_trajectories(sim_out, runs);
        std::cout << trajectories_csv(runs);
    });

    // serve
    int port = 8080;
    double lease_seconds = 300.0;
    std::string host = "127.0.0.1";
    auto* serve = app.add_subcommand("serve", "Review queue and campaign status over HTTP");
    serve->add_option("--port", port, "Listen port")->capture_default_str();
    serve->add_option("--host", host, "Listen address")->capture_default_str();
    serve->add_option("--lease-seconds", lease_seconds, "Review lease timeout")->capture_default_str();
    serve->callback([&] {
        const fs::path root = dataset_root();
        const fs::path pending_file = root / "review" / "pending.json";
        const fs::path verdict_file = root / "review" / "verdicts.json";
        ReviewQueue queue(std::chrono::milliseconds(static_cast<long long>(lease_seconds * 1000.0)));
        if (fs::exists(pending_file)) {
            for (auto& item : read_review_items(pending_file)) queue.enqueue(std::move(item));
        }
        CampaignStatus status;
        status.reset(CampaignStatus::load(root / "checkpoints"));
        ReviewServer server(queue, status);
        server.on_verdict([&](const ReviewVerdict&) { write_verdicts(verdict_file, queue.completed()); });
        std::cerr << "serving on " << host << ":" << port << " (dataset root " << root << ")\n";
        server.listen(host, port);
    });

    // review export / import
    auto* review = app.add_subcommand("review", "File-based review exchange");
    review->require_subcommand(1);
    fs::path checkpoint_dir = dataset_root() / "checkpoints", review_out, items_path;
    auto* rexp = review->add_subcommand("export", "Write pending review items from the latest checkpoint");
    rexp->add_option("--checkpoint", checkpoint_dir, "Checkpoint directory")->capture_default_str();
    rexp->add_option("--out", review_out, "Output file")->required();
    rexp->callback([&] {
        const json cp = read_json(checkpoint_dir / "latest.json");
        const auto items = cp.at("pending_reviews").get<std::vector<ReviewItem>>();
        export_pending(review_out, items);
        std::cout << json{{"exported", items.size()}}.dump() << '\n';
    });
    auto* rimp = review->add_subcommand("import", "Validate verdicts against exported items");
    rimp->add_option("--items", items_path, "Exported review items")->required()->check(CLI::ExistingFile);
    rimp->add_option("--verdicts", verdicts_path, "Verdicts to ingest")->required()->check(CLI::ExistingFile);
    rimp->add_option("--out", review_out, "Accepted verdicts file")->required();
    rimp->callback([&] {
        ReviewQueue queue;
        for (auto& item : read_review_items(items_path)) queue.enqueue(std::move(item));
        json rejected = json::array();
        for (const auto& v : read_verdicts(verdicts_path)) {
            try {
                queue.import_verdict(v);
            } catch (const QueueConflict& e) {
                rejected.push_back({{"image_id", v.image_id}, {"error", e.what()}});
            }
        }
        const auto accepted = queue.completed();
        write_verdicts(review_out, accepted);
        std::cout << json{{"accepted", accepted.size()}, {"rejected", rejected}}.dump(2) << '\n';
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
