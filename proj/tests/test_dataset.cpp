#include <doctest.h>

#include "treemap/dataset.hpp"

#include <algorithm>
#include <random>
#include <set>

using namespace treemap;

namespace {

Annotation human(std::string id, BBox b = {1, 1, 10, 10}) {
    return Annotation{std::move(id), b, Provenance::Human, std::nullopt, 0};
}

Annotation pseudo(std::string id, double conf = 0.9, BBox b = {2, 2, 10, 10}) {
    return Annotation{std::move(id), b, Provenance::Pseudo, conf, 0};
}

DatasetStore small_store() {
    DatasetStore s;
    s.add_image({"train0", "u0", DomainTag::Source, Split::Train, 100, 100});
    s.add_image({"pool0", "u1", DomainTag::Target, Split::UnlabeledPool, 100, 100});
    s.add_image({"pool1", "u2", DomainTag::Target, Split::UnlabeledPool, 100, 100});
    s.add_image({"test0", "u3", DomainTag::Target, Split::Test, 100, 100});
    s.add_seed_annotation(human("train0"));
    s.add_seed_annotation(human("test0"));
    return s;
}

std::vector<CountedImage> counted(std::initializer_list<std::pair<int, int>> buckets) {
    std::vector<CountedImage> out;
    int n = 0;
    for (auto [count, images] : buckets) {
        for (int i = 0; i < images; ++i) out.push_back({"img" + std::to_string(n++), count});
    }
    return out;
}

std::array<std::size_t, 3> tally(const SplitAssignment& a, const std::vector<std::string>& ids) {
    std::array<std::size_t, 3> t{};
    for (const auto& id : ids) {
        switch (a.assignment.at(id)) {
            case Split::Train: ++t[0]; break;
            case Split::Val: ++t[1]; break;
            case Split::Test: ++t[2]; break;
            default: break;
        }
    }
    return t;
}

}  // namespace

TEST_CASE("store rejects invariant violations") {
    DatasetStore s = small_store();
    CHECK_THROWS_AS(s.add_image({"train0", "", DomainTag::Target, Split::Train, 0, 0}), IntegrityError);
    CHECK_THROWS_AS(s.add_seed_annotation(human("missing")), IntegrityError);
    CHECK_THROWS_AS(s.add_seed_annotation(human("train0", {95, 95, 10, 10})), IntegrityError);
    CHECK_THROWS_AS(s.add_seed_annotation(human("train0", {0, 0, 0, 10})), IntegrityError);
    CHECK_THROWS_AS(s.add_seed_annotation(pseudo("test0")), IntegrityError);
    CHECK_THROWS_AS(s.add_seed_annotation(pseudo("train0", 0.7)), IntegrityError);
    Annotation bad = human("train0");
    bad.confidence = 0.9;
    CHECK_THROWS_AS(s.add_seed_annotation(bad), IntegrityError);
    Annotation no_conf = pseudo("train0");
    no_conf.confidence.reset();
    CHECK_THROWS_AS(s.add_seed_annotation(no_conf), IntegrityError);
    s.check_integrity();
}

TEST_CASE("append round records history and moves images to train") {
    const DatasetStore s = small_store();
    std::vector<Annotation> anns;
    for (int i = 0; i < 100; ++i) anns.push_back(pseudo(i % 2 ? "pool0" : "pool1"));
    const DatasetStore r1 = append_round(s, {}, 1, "ssl");
    const DatasetStore r2 = append_round(r1, anns, 2, "ssl");
    REQUIRE(r2.round_history().size() == 2);
    const RoundEntry& e = r2.round_history().back();
    CHECK(e.round == 2);
    CHECK(e.pseudo == 100);
    CHECK(e.human == 0);
    CHECK(e.images_labeled == 2);
    CHECK(r2.image("pool0").split == Split::Train);
    for (const auto& a : r2.annotations()) {
        if (a.provenance == Provenance::Pseudo) CHECK(a.round_added == 2);
    }
    // Inputs are untouched.
    CHECK(s.round_history().empty());
    CHECK(s.image("pool0").split == Split::UnlabeledPool);
}

TEST_CASE("append round rejects evaluation images and bad sequencing") {
    const DatasetStore s = small_store();
    const std::vector<Annotation> on_test{human("test0")};
    CHECK_THROWS_AS(append_round(s, on_test, 1, "al"), IntegrityError);
    CHECK_THROWS_AS(append_round(s, {}, 2, "al"), SequencingError);
    const std::vector<std::string> reviewed{"test0"};
    CHECK_THROWS_AS(append_round(s, {}, 1, "al", reviewed), IntegrityError);
    const std::vector<Annotation> weak{pseudo("pool0", 0.5)};
    CHECK_THROWS_AS(append_round(s, weak, 1, "ssl"), IntegrityError);
}

TEST_CASE("reviewed images without kept boxes still leave the pool") {
    const DatasetStore s = small_store();
    const std::vector<std::string> reviewed{"pool1"};
    const DatasetStore r = append_round(s, {}, 1, "al", reviewed);
    CHECK(r.image("pool1").split == Split::Train);
    CHECK(r.round_history().back().images_labeled == 1);
}

TEST_CASE("serialization round trip replays cumulative counts") {
    DatasetStore s = small_store();
    s = append_round(s, std::vector<Annotation>{pseudo("pool0")}, 1, "hybrid");
    s = append_round(s, std::vector<Annotation>{human("pool1"), human("pool1", {20, 20, 5, 5})}, 2, "hybrid");
    s = append_round(s, {}, 3, "hybrid");
    const std::string bytes = s.serialize();
    const DatasetStore back = DatasetStore::from_json(nlohmann::json::parse(bytes));
    CHECK(back == s);
    CHECK(back.serialize() == bytes);
    CHECK(back.content_hash() == s.content_hash());
    std::size_t human_total = 0, pseudo_total = 0;
    for (const auto& e : back.round_history()) human_total += e.human, pseudo_total += e.pseudo;
    CHECK(human_total == 2);
    CHECK(pseudo_total == 1);

    auto j = nlohmann::json::parse(bytes);
    j["schema_version"] = 99;
    CHECK_THROWS(DatasetStore::from_json(j));
}

TEST_CASE("merge with precedence") {
    const std::vector<Annotation> h{human("A"), human("B")};
    const std::vector<Annotation> p{pseudo("A"), pseudo("C"), pseudo("C", 0.95)};
    const auto merged = merge_with_precedence(h, p);
    CHECK(merged.size() == 4);
    for (const auto& a : merged) {
        if (a.image_id == "A") CHECK(a.provenance == Provenance::Human);
    }
    CHECK(merge_with_precedence(h, {}) == h);

    const std::vector<Annotation> disjoint{pseudo("Z")};
    CHECK(merge_with_precedence(h, disjoint).size() == 3);

    // Idempotent and order-independent in the pseudo argument.
    const auto twice = merge_with_precedence(merged, p);
    CHECK(std::count_if(twice.begin(), twice.end(),
                        [](const Annotation& a) { return a.image_id == "A" && a.provenance == Provenance::Pseudo; }) == 0);
    std::vector<Annotation> reversed(p.rbegin(), p.rend());
    auto x = merge_with_precedence(h, p), y = merge_with_precedence(h, reversed);
    std::vector<std::tuple<std::string, double, double, double>> kx, ky;
    for (const auto& a : x) kx.emplace_back(a.image_id, a.bbox.x, a.bbox.y, a.confidence.value_or(-1));
    for (const auto& a : y) ky.emplace_back(a.image_id, a.bbox.x, a.bbox.y, a.confidence.value_or(-1));
    std::sort(kx.begin(), kx.end());
    std::sort(ky.begin(), ky.end());
    CHECK(kx == ky);
}

TEST_CASE("random operation sequences keep referential integrity") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        DatasetStore s;
        std::vector<std::string> ids;
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (int i = 0; i < 30; ++i) {
            const Split sp = u(rng) < 0.2 ? Split::Test : (u(rng) < 0.3 ? Split::Train : Split::UnlabeledPool);
            ids.push_back("i" + std::to_string(i));
            s.add_image({ids.back(), "", DomainTag::Target, sp, 64, 64});
        }
        int round = 0;
        for (int op = 0; op < 40; ++op) {
            std::vector<Annotation> batch;
            const int n = int(u(rng) * 5);
            for (int k = 0; k < n; ++k) {
                const std::string id = u(rng) < 0.1 ? "ghost" : ids[std::size_t(u(rng) * ids.size())];
                if (u(rng) < 0.5) {
                    batch.push_back(pseudo(id, 0.6 + 0.4 * u(rng), {1, 1, 8, 8}));
                } else {
                    batch.push_back(human(id, {1, 1, 8, 8}));
                }
            }
            try {
                s = append_round(s, batch, round + 1, "x");
                ++round;
            } catch (const IntegrityError&) {
            }
            s.check_integrity();
            for (const auto& a : s.annotations()) {
                REQUIRE(s.find_image(a.image_id));
                if (a.provenance == Provenance::Pseudo) {
                    CHECK(*a.confidence >= 0.8);
                    CHECK(s.image(a.image_id).split != Split::Test);
                }
            }
        }
    }
}

TEST_CASE("balanced split examples") {
    SUBCASE("uniform counts") {
        const auto imgs = counted({{3, 10}});
        const auto a = balanced_split(imgs, {0.8, 0.1, 0.1}, 1);
        std::vector<std::string> ids;
        for (const auto& i : imgs) ids.push_back(i.image_id);
        CHECK(tally(a, ids) == std::array<std::size_t, 3>{8, 1, 1});
    }
    SUBCASE("two buckets") {
        const auto imgs = counted({{1, 20}, {5, 10}});
        const auto a = balanced_split(imgs, {0.5, 0.25, 0.25}, 1);
        REQUIRE(a.buckets.size() == 2);
        CHECK(a.buckets[0].allocated == std::array<std::size_t, 3>{10, 5, 5});
        const auto b = a.buckets[1].allocated;
        CHECK(b[0] == 5);
        CHECK(b[1] + b[2] == 5);
        CHECK(b[1] >= 2);
        CHECK(b[1] <= 3);
    }
    SUBCASE("small buckets merge upward") {
        const auto imgs = counted({{1, 2}, {2, 10}, {9, 1}});
        const auto a = balanced_split(imgs, {0.8, 0.1, 0.1}, 1);
        REQUIRE(a.buckets.size() == 1);
        CHECK(a.buckets[0].min_count == 1);
        CHECK(a.buckets[0].max_count == 9);
        CHECK(a.assignment.size() == 13);
    }
    SUBCASE("deterministic in the seed") {
        const auto imgs = counted({{0, 40}, {2, 33}, {4, 12}});
        CHECK(balanced_split(imgs, {}, 5).assignment == balanced_split(imgs, {}, 5).assignment);
        CHECK(balanced_split(imgs, {}, 5).assignment != balanced_split(imgs, {}, 6).assignment);
    }
    SUBCASE("invalid ratios") {
        const auto imgs = counted({{1, 5}});
        CHECK_THROWS(balanced_split(imgs, {0.5, 0.5, 0.5}, 0));
        CHECK_THROWS(balanced_split(imgs, {-0.1, 0.6, 0.5}, 0));
        const std::vector<CountedImage> dup{{"a", 1}, {"a", 2}};
        CHECK_THROWS(balanced_split(dup, {}, 0));
    }
}

TEST_CASE("balanced split frequencies stay within one image of the quota") {
    std::mt19937_64 rng(500);
    std::uniform_int_distribution<int> count(0, 12);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<CountedImage> imgs;
        for (int i = 0; i < 500; ++i) imgs.push_back({"im" + std::to_string(i), count(rng)});
        const SplitRatios ratios{0.7, 0.15, 0.15};
        const auto a = balanced_split(imgs, ratios, std::uint64_t(trial));
        CHECK(a.assignment.size() == imgs.size());
        for (const auto& b : a.buckets) {
            const auto t = tally(a, b.image_ids);
            const auto r = ratios.as_array();
            for (int s = 0; s < 3; ++s) {
                CHECK(std::abs(double(t[s]) - r[s] * double(b.image_ids.size())) <= 1.0 + 1e-9);
            }
        }
    }
}

TEST_CASE("apply splits and tree counts") {
    DatasetStore s;
    for (int i = 0; i < 10; ++i) s.add_image({"x" + std::to_string(i), "", DomainTag::Target, Split::Train, 0, 0});
    for (int i = 0; i < 10; ++i) {
        for (int k = 0; k < i % 3; ++k) s.add_seed_annotation(human("x" + std::to_string(i)));
    }
    std::vector<CountedImage> imgs;
    for (const auto& [id, c] : s.tree_counts(Split::Train)) imgs.push_back({id, c});
    apply_splits(s, balanced_split(imgs, {0.6, 0.2, 0.2}, 3));
    CHECK(s.image_ids_in(Split::Train).size() + s.image_ids_in(Split::Val).size() +
              s.image_ids_in(Split::Test).size() == 10);
    s.check_integrity();
}
