#pragma once

#include "treemap/bbox.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace treemap {

enum class Provenance { Human, Pseudo, Verified };
enum class DomainTag { Source, Target };
enum class Split { Train, Val, Test, UnlabeledPool };

std::string_view to_string(Provenance p);
std::string_view to_string(DomainTag d);
std::string_view to_string(Split s);
Provenance provenance_from_string(std::string_view s);
DomainTag domain_from_string(std::string_view s);
Split split_from_string(std::string_view s);

/// Referential or provenance invariant violated by a requested mutation.
class IntegrityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Round appended out of order.
class SequencingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Annotation {
    std::string image_id;
    BBox bbox;
    Provenance provenance = Provenance::Human;
    std::optional<double> confidence;  // present iff provenance == Pseudo
    int round_added = 0;

    friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct ImageRecord {
    std::string image_id;
    std::string uri;
    DomainTag domain = DomainTag::Target;
    Split split = Split::UnlabeledPool;
    // Zero means unknown; box bounds are then not checked.
    double width = 0.0;
    double height = 0.0;

    friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

/// What one learning round contributed, for the added-samples accounting.
struct RoundEntry {
    int round = 0;
    std::string strategy;
    std::size_t human = 0;
    std::size_t pseudo = 0;
    std::size_t verified = 0;
    std::size_t images_labeled = 0;

    std::size_t total() const { return human + pseudo + verified; }
    friend bool operator==(const RoundEntry&, const RoundEntry&) = default;
};

/// Images, annotations and round history with provenance bookkeeping.
///
/// Invariants held after every public mutation:
///  - every annotation references an existing image;
///  - val/test images carry no pseudo annotations;
///  - pseudo annotations have a confidence of at least the acceptance
///    threshold the store was created with; human/verified have none.
class DatasetStore {
public:
    static constexpr int kSchemaVersion = 1;

    explicit DatasetStore(double pseudo_min_confidence = 0.8);

    void add_image(ImageRecord image);
    /// Round-0 annotation (the initial labeled set, including test truths).
    void add_seed_annotation(Annotation annotation);
    void set_split(std::string_view image_id, Split split);

    const ImageRecord* find_image(std::string_view image_id) const;
    const ImageRecord& image(std::string_view image_id) const;
    const std::vector<ImageRecord>& images() const { return images_; }
    const std::vector<Annotation>& annotations() const { return annotations_; }
    const std::vector<RoundEntry>& round_history() const { return history_; }
    double pseudo_min_confidence() const { return pseudo_min_confidence_; }

    int last_round() const { return history_.empty() ? 0 : history_.back().round; }
    std::size_t seed_count() const;

    std::vector<std::string> image_ids_in(Split split) const;
    std::vector<Annotation> annotations_in(Split split) const;
    std::vector<Annotation> annotations_for(std::string_view image_id) const;
    /// Annotation count per image for the given split, including zero counts.
    std::map<std::string, int> tree_counts(Split split) const;

    /// Throws IntegrityError describing the first violated invariant.
    void check_integrity() const;

    nlohmann::json to_json() const;
    static DatasetStore from_json(const nlohmann::json& j);
    /// Canonical serialization; identical stores produce identical bytes.
    std::string serialize() const;
    std::uint64_t content_hash() const;

    friend bool operator==(const DatasetStore& a, const DatasetStore& b) {
        return a.images_ == b.images_ && a.annotations_ == b.annotations_ &&
               a.history_ == b.history_ && a.pseudo_min_confidence_ == b.pseudo_min_confidence_;
    }

private:
    friend DatasetStore append_round(const DatasetStore&, std::span<const Annotation>, int,
                                     std::string_view, std::span<const std::string>);

    void validate_annotation(const Annotation& a) const;
    ImageRecord& mutable_image(std::string_view image_id);

    double pseudo_min_confidence_;
    std::vector<ImageRecord> images_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<Annotation> annotations_;
    std::vector<RoundEntry> history_;
};

/// Appends one learning round. Annotated (and explicitly reviewed) pool
/// images move to the train split. All checks run before any mutation, so a
/// rejected round leaves the input untouched.
DatasetStore append_round(const DatasetStore& store, std::span<const Annotation> new_annotations,
                          int round_index, std::string_view strategy_tag,
                          std::span<const std::string> reviewed_images = {});

/// For each image present in both sets, drop that image's pseudo annotations.
std::vector<Annotation> merge_with_precedence(std::span<const Annotation> human_set,
                                              std::span<const Annotation> pseudo_set);

struct SplitRatios {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;

    std::array<double, 3> as_array() const { return {train, val, test}; }
};

struct CountedImage {
    std::string image_id;
    int tree_count = 0;
};

/// One stratum of the tree-count histogram after small buckets are merged.
struct CountBucket {
    int min_count = 0;
    int max_count = 0;
    std::vector<std::string> image_ids;
    std::array<std::size_t, 3> allocated{};  // train, val, test
};

struct SplitAssignment {
    std::map<std::string, Split> assignment;
    std::vector<CountBucket> buckets;
};

/// Histogram-stratified train/val/test split. Buckets are per exact tree
/// count; a bucket with fewer images than the number of splits with a
/// positive ratio is merged into the next larger count (the last one merges
/// downward). Within a bucket, images are shuffled with the seed and
/// allocated by largest remainder.
SplitAssignment balanced_split(std::span<const CountedImage> images, const SplitRatios& ratios,
                               std::uint64_t seed);

void apply_splits(DatasetStore& store, const SplitAssignment& splits);

void to_json(nlohmann::json& j, const Annotation& a);
void from_json(const nlohmann::json& j, Annotation& a);
void to_json(nlohmann::json& j, const RoundEntry& r);
void from_json(const nlohmann::json& j, RoundEntry& r);

}  // namespace treemap
