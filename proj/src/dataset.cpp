#include "treemap/dataset.hpp"

#include "treemap/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <unordered_set>

namespace treemap {

using nlohmann::json;

// ---------------------------------------------------------------- strings

std::string_view to_string(Provenance p) {
    switch (p) {
        case Provenance::Human: return "human";
        case Provenance::Pseudo: return "pseudo";
        case Provenance::Verified: return "verified";
    }
    return "human";
}

std::string_view to_string(DomainTag d) {
    return d == DomainTag::Source ? "source_domain" : "target_domain";
}

std::string_view to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
        case Split::UnlabeledPool: return "unlabeled_pool";
    }
    return "unlabeled_pool";
}

Provenance provenance_from_string(std::string_view s) {
    if (s == "human") return Provenance::Human;
    if (s == "pseudo") return Provenance::Pseudo;
    if (s == "verified") return Provenance::Verified;
    throw std::invalid_argument("unknown provenance '" + std::string(s) + "'");
}

DomainTag domain_from_string(std::string_view s) {
    if (s == "source_domain" || s == "source") return DomainTag::Source;
    if (s == "target_domain" || s == "target") return DomainTag::Target;
    throw std::invalid_argument("unknown domain tag '" + std::string(s) + "'");
}

Split split_from_string(std::string_view s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    if (s == "unlabeled_pool" || s == "pool") return Split::UnlabeledPool;
    throw std::invalid_argument("unknown split '" + std::string(s) + "'");
}

// ---------------------------------------------------------------- BBox

BBox BBox::clipped(double width, double height) const {
    const double x0 = std::clamp(x, 0.0, width);
    const double y0 = std::clamp(y, 0.0, height);
    const double x1 = std::clamp(x + w, 0.0, width);
    const double y1 = std::clamp(y + h, 0.0, height);
    return {x0, y0, x1 - x0, y1 - y0};
}

void to_json(json& j, const BBox& b) { j = json::array({b.x, b.y, b.w, b.h}); }

void from_json(const json& j, BBox& b) {
    if (!j.is_array() || j.size() != 4) throw std::invalid_argument("bbox must be [x, y, w, h]");
    b = {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

void to_json(json& j, const Annotation& a) {
    j = json{{"image_id", a.image_id},
             {"bbox", a.bbox},
             {"provenance", to_string(a.provenance)},
             {"round_added", a.round_added}};
    if (a.confidence) j["confidence"] = *a.confidence;
}

void from_json(const json& j, Annotation& a) {
    a.image_id = j.at("image_id").get<std::string>();
    a.bbox = j.at("bbox").get<BBox>();
    a.provenance = provenance_from_string(j.at("provenance").get<std::string>());
    a.round_added = j.value("round_added", 0);
    a.confidence.reset();
    if (j.contains("confidence") && !j["confidence"].is_null()) {
        a.confidence = j["confidence"].get<double>();
    }
}

void to_json(json& j, const RoundEntry& r) {
    j = json{{"round", r.round},       {"strategy", r.strategy}, {"human", r.human},
             {"pseudo", r.pseudo},     {"verified", r.verified},
             {"images_labeled", r.images_labeled}};
}

void from_json(const json& j, RoundEntry& r) {
    r.round = j.at("round").get<int>();
    r.strategy = j.at("strategy").get<std::string>();
    r.human = j.at("human").get<std::size_t>();
    r.pseudo = j.at("pseudo").get<std::size_t>();
    r.verified = j.at("verified").get<std::size_t>();
    r.images_labeled = j.value("images_labeled", std::size_t{0});
}

// ---------------------------------------------------------------- store

DatasetStore::DatasetStore(double pseudo_min_confidence)
    : pseudo_min_confidence_(pseudo_min_confidence) {
    if (!(pseudo_min_confidence > 0.0 && pseudo_min_confidence <= 1.0)) {
        throw std::invalid_argument("pseudo acceptance threshold must lie in (0, 1]");
    }
}

void DatasetStore::add_image(ImageRecord image) {
    if (image.image_id.empty()) throw IntegrityError("image id must be non-empty");
    if (index_.contains(image.image_id)) {
        throw IntegrityError("duplicate image id '" + image.image_id + "'");
    }
    if (image.width < 0.0 || image.height < 0.0) {
        throw IntegrityError("negative image extent for '" + image.image_id + "'");
    }
    index_.emplace(image.image_id, images_.size());
    images_.push_back(std::move(image));
}

void DatasetStore::validate_annotation(const Annotation& a) const {
    const ImageRecord* img = find_image(a.image_id);
    if (!img) throw IntegrityError("annotation references unknown image '" + a.image_id + "'");
    if (!a.bbox.valid()) throw IntegrityError("degenerate box on image '" + a.image_id + "'");
    if (img->width > 0.0 && img->height > 0.0 && !a.bbox.within(img->width, img->height)) {
        throw IntegrityError("box outside bounds of image '" + a.image_id + "'");
    }
    if (a.provenance == Provenance::Pseudo) {
        if (!a.confidence) throw IntegrityError("pseudo annotation without confidence");
        if (*a.confidence < pseudo_min_confidence_ || *a.confidence > 1.0) {
            throw IntegrityError("pseudo annotation confidence " + std::to_string(*a.confidence) +
                                 " below acceptance threshold");
        }
        if (img->split == Split::Val || img->split == Split::Test) {
            throw IntegrityError("pseudo annotation on evaluation image '" + a.image_id + "'");
        }
    } else if (a.confidence) {
        throw IntegrityError("human/verified annotation must not carry a confidence");
    }
    if (a.round_added < 0) throw IntegrityError("negative round index");
}

void DatasetStore::add_seed_annotation(Annotation annotation) {
    annotation.round_added = 0;
    validate_annotation(annotation);
    annotations_.push_back(std::move(annotation));
}

ImageRecord& DatasetStore::mutable_image(std::string_view image_id) {
    auto it = index_.find(std::string(image_id));
    if (it == index_.end()) throw IntegrityError("unknown image '" + std::string(image_id) + "'");
    return images_[it->second];
}

void DatasetStore::set_split(std::string_view image_id, Split split) {
    ImageRecord& img = mutable_image(image_id);
    if (split == Split::Val || split == Split::Test) {
        for (const auto& a : annotations_) {
            if (a.image_id == image_id && a.provenance == Provenance::Pseudo) {
                throw IntegrityError("cannot move pseudo-labeled image '" + img.image_id +
                                     "' into an evaluation split");
            }
        }
    }
    img.split = split;
}

const ImageRecord* DatasetStore::find_image(std::string_view image_id) const {
    auto it = index_.find(std::string(image_id));
    return it == index_.end() ? nullptr : &images_[it->second];
}

const ImageRecord& DatasetStore::image(std::string_view image_id) const {
    const ImageRecord* img = find_image(image_id);
    if (!img) throw IntegrityError("unknown image '" + std::string(image_id) + "'");
    return *img;
}

std::size_t DatasetStore::seed_count() const {
    return static_cast<std::size_t>(std::count_if(
        annotations_.begin(), annotations_.end(), [](const Annotation& a) { return a.round_added == 0; }));
}

std::vector<std::string> DatasetStore::image_ids_in(Split split) const {
    std::vector<std::string> ids;
    for (const auto& img : images_) {
        if (img.split == split) ids.push_back(img.image_id);
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

std::vector<Annotation> DatasetStore::annotations_in(Split split) const {
    std::vector<Annotation> out;
    for (const auto& a : annotations_) {
        if (image(a.image_id).split == split) out.push_back(a);
    }
    return out;
}

std::vector<Annotation> DatasetStore::annotations_for(std::string_view image_id) const {
    std::vector<Annotation> out;
    for (const auto& a : annotations_) {
        if (a.image_id == image_id) out.push_back(a);
    }
    return out;
}

std::map<std::string, int> DatasetStore::tree_counts(Split split) const {
    std::map<std::string, int> counts;
    for (const auto& img : images_) {
        if (img.split == split) counts[img.image_id] = 0;
    }
    for (const auto& a : annotations_) {
        auto it = counts.find(a.image_id);
        if (it != counts.end()) ++it->second;
    }
    return counts;
}

void DatasetStore::check_integrity() const {
    if (index_.size() != images_.size()) throw IntegrityError("image index out of sync");
    for (const auto& a : annotations_) validate_annotation(a);
    int prev = 0;
    for (const auto& r : history_) {
        if (r.round != prev + 1) throw IntegrityError("round history is not contiguous");
        prev = r.round;
    }
}

json DatasetStore::to_json() const {
    json images = json::array();
    std::unordered_map<std::string, std::size_t> numeric_id;
    for (std::size_t i = 0; i < images_.size(); ++i) {
        const auto& img = images_[i];
        numeric_id[img.image_id] = i + 1;
        images.push_back({{"id", i + 1},
                          {"image_key", img.image_id},
                          {"file_name", img.uri},
                          {"width", img.width},
                          {"height", img.height},
                          {"domain", to_string(img.domain)},
                          {"split", to_string(img.split)}});
    }
    json anns = json::array();
    for (std::size_t i = 0; i < annotations_.size(); ++i) {
        const auto& a = annotations_[i];
        json j{{"id", i + 1},
               {"image_id", numeric_id.at(a.image_id)},
               {"category_id", 1},
               {"bbox", a.bbox},
               {"area", a.bbox.area()},
               {"iscrowd", 0},
               {"provenance", to_string(a.provenance)},
               {"round_added", a.round_added}};
        if (a.confidence) j["confidence"] = *a.confidence;
        anns.push_back(std::move(j));
    }
    return json{{"schema_version", kSchemaVersion},
                {"info", {{"description", "extended COCO tree annotations"},
                          {"pseudo_min_confidence", pseudo_min_confidence_}}},
                {"categories", json::array({{{"id", 1}, {"name", "tree"}}})},
                {"images", std::move(images)},
                {"annotations", std::move(anns)},
                {"round_history", history_}};
}

DatasetStore DatasetStore::from_json(const json& j) {
    const int version = j.at("schema_version").get<int>();
    if (version != kSchemaVersion) {
        throw std::runtime_error("unsupported dataset schema_version " + std::to_string(version));
    }
    DatasetStore store(j.at("info").value("pseudo_min_confidence", 0.8));
    std::unordered_map<std::int64_t, std::string> keys;
    for (const auto& ji : j.at("images")) {
        ImageRecord img;
        img.image_id = ji.at("image_key").get<std::string>();
        img.uri = ji.value("file_name", std::string{});
        img.width = ji.value("width", 0.0);
        img.height = ji.value("height", 0.0);
        img.domain = domain_from_string(ji.value("domain", std::string{"target_domain"}));
        img.split = split_from_string(ji.value("split", std::string{"unlabeled_pool"}));
        keys[ji.at("id").get<std::int64_t>()] = img.image_id;
        store.add_image(std::move(img));
    }
    for (const auto& ja : j.at("annotations")) {
        Annotation a;
        auto it = keys.find(ja.at("image_id").get<std::int64_t>());
        if (it == keys.end()) throw IntegrityError("annotation references unknown image id");
        a.image_id = it->second;
        a.bbox = ja.at("bbox").get<BBox>();
        a.provenance = provenance_from_string(ja.value("provenance", std::string{"human"}));
        a.round_added = ja.value("round_added", 0);
        if (ja.contains("confidence")) a.confidence = ja["confidence"].get<double>();
        store.annotations_.push_back(std::move(a));
    }
    store.history_ = j.value("round_history", json::array()).get<std::vector<RoundEntry>>();
    store.check_integrity();
    return store;
}

std::string DatasetStore::serialize() const { return to_json().dump(1); }

std::uint64_t DatasetStore::content_hash() const { return fnv1a64(serialize()); }

// ---------------------------------------------------------------- rounds

DatasetStore append_round(const DatasetStore& store, std::span<const Annotation> new_annotations,
                          int round_index, std::string_view strategy_tag,
                          std::span<const std::string> reviewed_images) {
    if (round_index != store.last_round() + 1) {
        throw SequencingError("round " + std::to_string(round_index) + " does not follow round " +
                              std::to_string(store.last_round()));
    }
    for (const auto& a : new_annotations) {
        const ImageRecord* img = store.find_image(a.image_id);
        if (img && (img->split == Split::Val || img->split == Split::Test)) {
            throw IntegrityError("round annotation targets evaluation image '" + a.image_id + "'");
        }
        Annotation stamped = a;
        stamped.round_added = round_index;
        store.validate_annotation(stamped);
    }
    for (const auto& id : reviewed_images) {
        const ImageRecord& img = store.image(id);
        if (img.split == Split::Val || img.split == Split::Test) {
            throw IntegrityError("review of evaluation image '" + id + "'");
        }
    }

    DatasetStore next = store;
    RoundEntry entry;
    entry.round = round_index;
    entry.strategy = std::string(strategy_tag);
    std::set<std::string> labeled(reviewed_images.begin(), reviewed_images.end());
    for (const auto& a : new_annotations) {
        Annotation stamped = a;
        stamped.round_added = round_index;
        switch (stamped.provenance) {
            case Provenance::Human: ++entry.human; break;
            case Provenance::Pseudo: ++entry.pseudo; break;
            case Provenance::Verified: ++entry.verified; break;
        }
        labeled.insert(stamped.image_id);
        next.annotations_.push_back(std::move(stamped));
    }
    for (const auto& id : labeled) {
        ImageRecord& img = next.mutable_image(id);
        if (img.split == Split::UnlabeledPool) {
            img.split = Split::Train;
            ++entry.images_labeled;
        }
    }
    next.history_.push_back(std::move(entry));
    return next;
}

std::vector<Annotation> merge_with_precedence(std::span<const Annotation> human_set,
                                              std::span<const Annotation> pseudo_set) {
    std::unordered_set<std::string> human_images;
    for (const auto& a : human_set) human_images.insert(a.image_id);

    std::vector<Annotation> out(human_set.begin(), human_set.end());
    for (const auto& a : pseudo_set) {
        if (!human_images.contains(a.image_id)) out.push_back(a);
    }
    return out;
}

// ---------------------------------------------------------------- splits

namespace {

std::array<std::size_t, 3> largest_remainder(std::size_t n, const std::array<double, 3>& ratios) {
    std::array<std::size_t, 3> alloc{};
    std::array<double, 3> frac{};
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        const double quota = ratios[i] * static_cast<double>(n);
        // Tolerate representation error such as 0.1 * 30 = 3.0000000000000004.
        const double base = std::floor(quota + 1e-9);
        alloc[i] = static_cast<std::size_t>(base);
        frac[i] = std::max(0.0, quota - base);
        assigned += alloc[i];
    }
    std::array<std::size_t, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return frac[a] > frac[b] + 1e-12; });
    for (std::size_t k = 0; assigned < n; k = (k + 1) % 3) {
        if (ratios[order[k]] > 0.0) {
            ++alloc[order[k]];
            ++assigned;
        }
    }
    return alloc;
}

}  // namespace

SplitAssignment balanced_split(std::span<const CountedImage> images, const SplitRatios& ratios,
                               std::uint64_t seed) {
    const auto r = ratios.as_array();
    for (double v : r) {
        if (!(v >= 0.0)) throw std::invalid_argument("split ratios must be non-negative");
    }
    if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-6) {
        throw std::invalid_argument("split ratios must sum to 1");
    }
    const auto positive = static_cast<std::size_t>(std::count_if(r.begin(), r.end(), [](double v) { return v > 0.0; }));
    if (positive == 0) throw std::invalid_argument("at least one split ratio must be positive");

    std::map<int, std::vector<std::string>> histogram;
    std::unordered_set<std::string> seen;
    for (const auto& img : images) {
        if (img.tree_count < 0) throw std::invalid_argument("negative tree count for " + img.image_id);
        if (!seen.insert(img.image_id).second) {
            throw std::invalid_argument("duplicate image id " + img.image_id);
        }
        histogram[img.tree_count].push_back(img.image_id);
    }

    SplitAssignment result;
    std::optional<CountBucket> carry;
    for (auto& [count, ids] : histogram) {
        CountBucket bucket{count, count, std::move(ids), {}};
        if (carry) {
            bucket.min_count = carry->min_count;
            bucket.image_ids.insert(bucket.image_ids.end(), carry->image_ids.begin(),
                                    carry->image_ids.end());
            carry.reset();
        }
        if (bucket.image_ids.size() < positive) {
            carry = std::move(bucket);
        } else {
            result.buckets.push_back(std::move(bucket));
        }
    }
    if (carry) {
        if (result.buckets.empty()) {
            result.buckets.push_back(std::move(*carry));
        } else {
            auto& last = result.buckets.back();
            last.max_count = carry->max_count;
            last.image_ids.insert(last.image_ids.end(), carry->image_ids.begin(),
                                  carry->image_ids.end());
        }
    }

    constexpr std::array<Split, 3> kOrder{Split::Train, Split::Val, Split::Test};
    for (auto& bucket : result.buckets) {
        std::sort(bucket.image_ids.begin(), bucket.image_ids.end());
        keyed_shuffle(std::span<std::string>(bucket.image_ids),
                      mix(seed, static_cast<std::uint64_t>(bucket.min_count),
                          static_cast<std::uint64_t>(bucket.max_count)));
        bucket.allocated = largest_remainder(bucket.image_ids.size(), r);
        std::size_t cursor = 0;
        for (std::size_t s = 0; s < 3; ++s) {
            for (std::size_t k = 0; k < bucket.allocated[s]; ++k) {
                result.assignment[bucket.image_ids[cursor++]] = kOrder[s];
            }
        }
    }
    return result;
}

void apply_splits(DatasetStore& store, const SplitAssignment& splits) {
    for (const auto& [id, split] : splits.assignment) store.set_split(id, split);
}

}  // namespace treemap
