#include <doctest.h>

#include "treemap/detector.hpp"
#include "treemap/loop.hpp"
#include "treemap/service.hpp"
#include "treemap/sim.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace treemap;

namespace {

struct Run {
    int status;
    std::string out;
};

Run run(const std::string& args) {
    const std::string cmd = std::string(TREEMAP_CLI) + " " + args + " 2>/dev/null";
    FILE* p = popen(cmd.c_str(), "r");
    REQUIRE(p);
    std::string out;
    char buf[4096];
    for (std::size_t n; (n = fread(buf, 1, sizeof buf, p)) > 0;) out.append(buf, n);
    const int raw = pclose(p);
    return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, out};
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& f) const { return (path / f).string(); }
};

void write(const std::string& path, const json& j) { std::ofstream(path) << j.dump(); }

json read(const std::string& path) {
    std::ifstream in(path);
    return json::parse(in);
}

}  // namespace

TEST_CASE("cli: no subcommand is an error") { CHECK(run("").status != 0); }

TEST_CASE("cli: plan-views writes requests and skips") {
    TempDir dir("treemap_cli_plan");
    write(dir / "roads.geojson",
          {{"type", "FeatureCollection"},
           {"features",
            {{{"type", "Feature"},
              {"geometry", {{"type", "LineString"}, {"coordinates", {{-118.2500, 34.0500}, {-118.2400, 34.0500}}}}}}}}});
    write(dir / "trees.json", {{{"id", "near"}, {"lat", 34.05005}, {"lon", -118.2450}, {"confidence", 0.9}},
                               {{"id", "far"}, {"lat", 34.0510}, {"lon", -118.2450}, {"confidence", 0.9}}});
    write(dir / "panos.json", {{{"pano_id", "p1"}, {"lat", 34.0500}, {"lon", -118.2451}}});
    const Run r = run("plan-views --trees " + (dir / "trees.json") + " --roads " + (dir / "roads.geojson") +
                      " --panoramas " + (dir / "panos.json") + " --out " + (dir / "plan"));
    REQUIRE(r.status == 0);
    const json summary = json::parse(r.out);
    CHECK(summary.at("requests") == 1);
    CHECK(summary.at("skipped") == 1);
    std::ifstream lines(dir / "plan/view_requests.jsonl");
    std::string line;
    REQUIRE(std::getline(lines, line));
    CHECK(json::parse(line).at("target_tree_id") == "near");
}

TEST_CASE("cli: evaluate with sweep") {
    TempDir dir("treemap_cli_eval");
    write_detections_jsonl(dir / "preds.jsonl", std::vector<Detection>{{"a", {0, 0, 10, 10}, 0.9},
                                                                       {"a", {50, 50, 10, 10}, 0.3},
                                                                       {"b", {0, 0, 10, 10}, 0.6}});
    write(dir / "truths.json", {{{"image_id", "a"}, {"x", 0}, {"y", 0}, {"w", 10}, {"h", 10}, {"confidence", 1.0}},
                                {{"image_id", "b"}, {"x", 0}, {"y", 0}, {"w", 10}, {"h", 10}, {"confidence", 1.0}},
                                {{"image_id", "c"}, {"x", 0}, {"y", 0}, {"w", 10}, {"h", 10}, {"confidence", 1.0}}});
    const Run r = run("evaluate --predictions " + (dir / "preds.jsonl") + " --truths " + (dir / "truths.json") +
                      " --sweep --out " + (dir / "eval"));
    REQUIRE(r.status == 0);
    const json rep = json::parse(r.out);
    CHECK(rep.at("tp") == 2);
    CHECK(rep.at("fp") == 1);
    CHECK(rep.at("fn") == 1);
    CHECK(rep.at("best").at("threshold").get<double>() == doctest::Approx(0.31));
    CHECK(fs::exists(dir / "eval/sweep.csv"));
    CHECK(run("evaluate --predictions " + (dir / "missing.jsonl") + " --truths " + (dir / "truths.json")).status != 0);
}

TEST_CASE("cli: split and dataset stats") {
    TempDir dir("treemap_cli_split");
    DatasetStore store;
    for (int i = 0; i < 50; ++i) {
        const std::string id = "img" + std::to_string(i);
        store.add_image({id, "", DomainTag::Target, Split::Train, 100, 100});
        for (int k = 0; k < i % 5; ++k) {
            store.add_seed_annotation({id, {double(k * 15), 0, 10, 10}, Provenance::Human, std::nullopt, 0});
        }
    }
    std::ofstream(dir / "dataset.json") << store.serialize();
    Run r = run("split --dataset " + (dir / "dataset.json") + " --ratios 0.6,0.2,0.2 --out " + (dir / "split.json"));
    REQUIRE(r.status == 0);
    const DatasetStore out = DatasetStore::from_json(read(dir / "split.json"));
    CHECK(out.image_ids_in(Split::Train).size() == 30);
    CHECK(out.image_ids_in(Split::Val).size() == 10);
    CHECK(out.image_ids_in(Split::Test).size() == 10);

    r = run("dataset stats --dataset " + (dir / "split.json"));
    REQUIRE(r.status == 0);
    CHECK(json::parse(r.out).at("val").at("images") == 10);
    CHECK(run("split --dataset " + (dir / "dataset.json") + " --ratios 0.5,0.5").status != 0);
}

TEST_CASE("cli: simulate writes trajectories") {
    TempDir dir("treemap_cli_sim");
    WorldSpec spec;
    spec.seed_images = 20;
    spec.pool_images = 100;
    spec.test_images = 30;
    write(dir / "world.json", spec);
    StrategyConfig c;
    c.pool_sample_size = 20;
    c.max_rounds = 2;
    write(dir / "config.json", c);
    const Run r = run("simulate --world " + (dir / "world.json") + " --config " + (dir / "config.json") + " --out " +
                      (dir / "sim"));
    REQUIRE(r.status == 0);
    CHECK(r.out.starts_with("strategy,round,"));
    CHECK(fs::exists(dir / "sim/trajectories.csv"));
    CHECK(read(dir / "sim/reports.json").contains("al"));
}

TEST_CASE("cli: run-round and campaign with review export and import") {
    TempDir dir("treemap_cli_campaign");
    WorldSpec spec;
    spec.seed_images = 20;
    spec.pool_images = 100;
    spec.test_images = 30;
    spec.seed = 4;
    write(dir / "world.json", spec);
    std::ofstream(dir / "dataset.json") << initial_store(build_world(spec)).serialize();

    Run r = run("run-round --strategy ssl --dataset " + (dir / "dataset.json") + " --world " + (dir / "world.json") +
                " --out " + (dir / "after.json"));
    REQUIRE(r.status == 0);
    CHECK(json::parse(r.out).at("round") == 1);
    CHECK(DatasetStore::from_json(read(dir / "after.json")).last_round() == 1);

    // Hybrid campaign whose reviews all stay pending (empty verdict file).
    std::ofstream(dir / "none.json") << "[]";
    json cfg = StrategyConfig{};
    cfg["pool_sample_size"] = 20;
    cfg["max_rounds"] = 2;
    cfg["stop_delta_f1"] = 0.0;
    cfg["dataset"] = dir / "dataset.json";
    cfg["checkpoint_dir"] = dir / "cp";
    cfg["world"] = dir / "world.json";
    write(dir / "campaign.json", cfg);
    r = run("run-campaign --config " + (dir / "campaign.json") + " --verdicts " + (dir / "none.json"));
    REQUIRE(r.status == 0);
    CHECK(json::parse(r.out).size() == 2);
    CHECK(fs::exists(dir / "cp/latest.json"));

    r = run("review export --checkpoint " + (dir / "cp") + " --out " + (dir / "pending.json"));
    REQUIRE(r.status == 0);
    const auto items = read_review_items(dir / "pending.json");
    REQUIRE_FALSE(items.empty());

    std::vector<ReviewVerdict> verdicts{{items[0].image_id, {{1, 1, 5, 5}}, 0, "x", 1},
                                        {"not_queued", {}, 0, "x", 1}};
    write_verdicts(dir / "verdicts.json", verdicts);
    r = run("review import --items " + (dir / "pending.json") + " --verdicts " + (dir / "verdicts.json") + " --out " +
            (dir / "accepted.json"));
    REQUIRE(r.status == 0);
    const json summary = json::parse(r.out);
    CHECK(summary.at("accepted") == 1);
    CHECK(summary.at("rejected").size() == 1);
    CHECK(read_verdicts(dir / "accepted.json").size() == 1);

    // A finished campaign resumes to the same reports.
    r = run("run-campaign --resume " + (dir / "cp") + " --world " + (dir / "world.json") + " --verdicts " +
            (dir / "none.json"));
    REQUIRE(r.status == 0);
    CHECK(json::parse(r.out).size() == 2);
}
