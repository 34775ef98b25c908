#include <doctest.h>

#include "treemap/detector.hpp"
#include "treemap/sim.hpp"

#include <httplib.h>

#include <atomic>
#include <filesystem>
#include <thread>

using namespace treemap;

namespace {

std::shared_ptr<const SyntheticWorld> world_of(WorldSpec spec) {
    return std::make_shared<const SyntheticWorld>(build_world(spec));
}

WorldSpec fixed_difficulty(double d, std::size_t images, int boxes) {
    WorldSpec s;
    s.seed_images = images;
    s.pool_images = 0;
    s.test_images = 0;
    s.min_boxes = s.max_boxes = boxes;
    s.difficulty = {{1.0, d, d}};
    s.seed = 42;
    return s;
}

// Training view with every truth of the listed images labeled.
TrainingView fully_labeled(const SyntheticWorld& w, const std::vector<std::string>& ids) {
    TrainingView v;
    for (const auto& id : ids) {
        v.images.push_back(id);
        for (const auto& t : w.find(id)->truths) {
            v.annotations.push_back({id, t.bbox, Provenance::Human, std::nullopt, 0});
        }
    }
    return v;
}

std::vector<std::string> all_ids(const SyntheticWorld& w) {
    std::vector<std::string> ids;
    for (const auto& img : w.images) ids.push_back(img.image_id);
    return ids;
}

struct MockServer {
    httplib::Server server;
    std::thread thread;
    int port = 0;
    std::atomic<int> detect_calls{0};
    std::atomic<int> fail_first{0};
    std::atomic<int> retrain_calls{0};

    MockServer() {
        server.Post("/detect", [this](const httplib::Request& req, httplib::Response& res) {
            if (detect_calls++ < fail_first) {
                res.status = 503;
                return;
            }
            const auto body = nlohmann::json::parse(req.body);
            nlohmann::json dets = nlohmann::json::array(), errors = nlohmann::json::array();
            for (const auto& id : body.at("image_ids")) {
                if (id == "missing") {
                    errors.push_back({{"image_id", id}, {"message", "not found"}});
                } else {
                    dets.push_back(Detection{id.get<std::string>(), {1, 2, 3, 4}, 0.75});
                }
            }
            res.set_content(nlohmann::json{{"detections", dets}, {"errors", errors}}.dump(), "application/json");
        });
        server.Post("/retrain", [this](const httplib::Request& req, httplib::Response& res) {
            ++retrain_calls;
            const auto body = nlohmann::json::parse(req.body);
            res.status = body.at("dataset").contains("images") ? 204 : 400;
        });
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~MockServer() {
        server.stop();
        thread.join();
    }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port); }
};

}  // namespace

TEST_CASE("file detector is a pure lookup") {
    const std::vector<Detection> dets{{"X", {0, 0, 5, 5}, 0.9}, {"X", {10, 0, 5, 5}, 0.4}, {"X", {20, 0, 5, 5}, 0.2},
                                      {"Y", {0, 0, 5, 5}, 0.6}};
    const std::vector<std::string> extra{"Z"};
    const FileDetector fd(dets, extra);
    const std::vector<std::string> q{"X"};
    const auto a = fd.detect(q);
    CHECK(a.detections.size() == 3);
    CHECK(a.detections == fd.detect(q).detections);
    const std::vector<std::string> q2{"Z", "W"};
    const auto b = fd.detect(q2);
    CHECK(b.detections.empty());
    REQUIRE(b.errors.size() == 1);
    CHECK(b.errors[0].image_id == "W");
}

TEST_CASE("predictions file round trip") {
    const auto path = std::filesystem::temp_directory_path() / "treemap_dets.jsonl";
    const std::vector<Detection> dets{{"a", {1, 2, 3, 4}, 0.5}, {"b", {5, 6, 7, 8}, 1.0}};
    write_detections_jsonl(path, dets);
    CHECK(read_detections_jsonl(path) == dets);
    {
        std::ofstream bad(path);
        bad << R"({"image_id":"a","x":0,"y":0,"w":1,"h":1,"confidence":1.5})" << '\n';
    }
    CHECK_THROWS(read_detections_jsonl(path));
    std::filesystem::remove(path);
}

TEST_CASE("noise-free easy box is detected at the true box") {
    auto spec = fixed_difficulty(0.0, 1, 1);
    const auto w = world_of(spec);
    const SyntheticDetector det(w);
    const auto batch = det.detect(all_ids(*w));
    REQUIRE(batch.detections.size() == 1);
    CHECK(batch.detections[0].bbox == w->images[0].truths[0].bbox);
    CHECK(batch.detections[0].confidence == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("configured miss rate is realised") {
    auto spec = fixed_difficulty(0.3, 2000, 5);
    spec.noise.miss_slope = 1.0;
    spec.noise.emit_floor = 0.0;
    const auto w = world_of(spec);
    const SyntheticDetector det(w);
    const auto batch = det.detect(all_ids(*w));
    const double miss = 1.0 - double(batch.detections.size()) / 10000.0;
    CHECK(std::abs(miss - 0.30) <= 0.02);
}

TEST_CASE("synthetic detection is reproducible and reports unknown images") {
    auto spec = fixed_difficulty(0.5, 50, 3);
    spec.noise.confidence_sigma = 0.1;
    spec.noise.jitter_sigma_px = 2.0;
    spec.noise.false_positive_rate = 0.3;
    spec.noise.miss_slope = 0.4;
    auto ids = all_ids(*world_of(spec));
    ids.push_back("nope");
    const auto a = SyntheticDetector(world_of(spec)).detect(ids);
    const auto b = SyntheticDetector(world_of(spec)).detect(ids);
    CHECK(a.detections == b.detections);
    REQUIRE(a.errors.size() == 1);
    CHECK(a.errors[0].image_id == "nope");
    for (const auto& d : a.detections) {
        CHECK(d.confidence >= 0.0);
        CHECK(d.confidence <= 1.0);
    }
}

TEST_CASE("easy-only training lowers confidence on hard boxes") {
    WorldSpec spec;
    spec.seed_images = 200;
    spec.pool_images = 0;
    spec.test_images = 0;
    spec.difficulty = {{1.0, 0.0, 0.19}};
    spec.seed = 8;
    const auto w = world_of(spec);
    SyntheticDetector det(w);
    const double before = det.mean_confidence(0.8);
    det.synthetic_retrain(fully_labeled(*w, all_ids(*w)));
    CHECK(det.mean_confidence(0.8) < before);
    CHECK(det.mean_confidence(0.1) > 0.5);
}

TEST_CASE("empty training leaves the detector unchanged") {
    const auto w = world_of(fixed_difficulty(0.4, 20, 2));
    SyntheticDetector det(w);
    det.synthetic_retrain(fully_labeled(*w, all_ids(*w)));
    const auto shifts = det.shifts();
    const auto before = det.detect(all_ids(*w)).detections;
    det.synthetic_retrain(TrainingView{});
    CHECK(det.shifts() == shifts);
    CHECK(det.detect(all_ids(*w)).detections == before);
}

TEST_CASE("balanced training does not lower any decile") {
    for (const RetrainParams& params : {RetrainParams{}, default_benchmark_world().retrain}) {
        WorldSpec spec;
        spec.seed_images = 500;
        spec.pool_images = 0;
        spec.test_images = 0;
        spec.retrain = params;
        spec.seed = 3;
        const auto w = world_of(spec);
        SyntheticDetector det(w);
        std::vector<double> before;
        for (int d = 0; d < 10; ++d) before.push_back(det.mean_confidence(0.05 + 0.1 * d));
        det.synthetic_retrain(fully_labeled(*w, all_ids(*w)));
        for (int d = 0; d < 10; ++d) CHECK(det.mean_confidence(0.05 + 0.1 * d) >= before[std::size_t(d)]);
    }
}

TEST_CASE("easy-only pseudo training never raises the confident share of hard boxes") {
    for (const RetrainParams& params : {RetrainParams{}, default_benchmark_world().retrain}) {
        WorldSpec spec;
        spec.seed_images = 1000;
        spec.pool_images = 0;
        spec.test_images = 0;
        spec.difficulty = {{0.5, 0.0, 0.3}, {0.5, 0.5, 1.0}};
        spec.noise.confidence_sigma = 0.15;
        spec.noise.confidence_offset = 0.3;
        spec.retrain = params;
        spec.seed = 4;
        const auto w = world_of(spec);
        SyntheticDetector det(w);
        auto confident_hard = [&] {
            std::size_t hard = 0, confident = 0;
            for (const auto& img : w->images) {
                for (std::size_t i = 0; i < img.truths.size(); ++i) {
                    if (img.truths[i].difficulty <= 0.5) continue;
                    ++hard;
                    if (det.truth_confidence(img, i) >= 0.8) ++confident;
                }
            }
            return double(confident) / double(hard);
        };
        double previous = confident_hard();
        TrainingView view;
        const auto ids = all_ids(*w);
        for (std::size_t step = 0; step < 10; ++step) {
            // Another slice of images with only their easy boxes labeled.
            for (std::size_t k = step * 100; k < (step + 1) * 100; ++k) {
                view.images.push_back(ids[k]);
                for (const auto& t : w->find(ids[k])->truths) {
                    if (t.difficulty < 0.3) view.annotations.push_back({ids[k], t.bbox, Provenance::Pseudo, 0.9, 1});
                }
            }
            det.synthetic_retrain(view);
            const double now = confident_hard();
            CHECK(now <= previous);
            previous = now;
        }
    }
}

TEST_CASE("detector state round trip") {
    const auto w = world_of(fixed_difficulty(0.4, 20, 2));
    SyntheticDetector a(w), b(w);
    a.synthetic_retrain(fully_labeled(*w, all_ids(*w)));
    b.restore(a.state());
    CHECK(b.shifts() == a.shifts());
    CHECK_THROWS(b.restore(nlohmann::json{{"shifts", {1.0}}}));
}

TEST_CASE("world validation") {
    WorldSpec spec = fixed_difficulty(0.2, 5, 1);
    spec.noise.miss_base = 1.5;
    CHECK_THROWS(build_world(spec));
    spec = fixed_difficulty(0.2, 5, 1);
    spec.noise.confidence_sigma = -1.0;
    CHECK_THROWS(build_world(spec));
    spec = fixed_difficulty(0.2, 5, 1);
    spec.retrain.spill = 1.5;
    CHECK_THROWS(build_world(spec));
}

TEST_CASE("remote detector speaks the detect and retrain protocol") {
    MockServer server;
    RemoteOptions opt;
    opt.base_url = server.url();
    opt.timeout = std::chrono::milliseconds(2000);
    opt.retries = 2;
    opt.backoff = std::chrono::milliseconds(5);
    RemoteDetector det(opt);

    const std::vector<std::string> ids{"a", "missing", "b"};
    server.fail_first = 2;
    const auto batch = det.detect(ids);
    CHECK(server.detect_calls == 3);
    CHECK(batch.detections.size() == 2);
    REQUIRE(batch.errors.size() == 1);
    CHECK(batch.errors[0].image_id == "missing");

    DatasetStore store;
    store.add_image({"a", "", DomainTag::Target, Split::Train, 10, 10});
    det.retrain(store);
    CHECK(server.retrain_calls == 1);

    server.detect_calls = 0;
    server.fail_first = 10;
    CHECK_THROWS_AS(det.detect(ids), DetectorFailure);
    CHECK(server.detect_calls == 3);
}

TEST_CASE("remote detector fails cleanly when unreachable") {
    RemoteOptions opt;
    opt.base_url = "http://127.0.0.1:1";
    opt.timeout = std::chrono::milliseconds(200);
    opt.retries = 1;
    opt.backoff = std::chrono::milliseconds(1);
    RemoteDetector det(opt);
    const std::vector<std::string> ids{"a"};
    CHECK_THROWS_AS(det.detect(ids), DetectorFailure);
    CHECK_THROWS(RemoteDetector(RemoteOptions{}));
}
