#pragma once

#include "treemap/loop.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

namespace treemap {

/// Verdict for an image that is not leased, or whose lease has expired.
class QueueConflict : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Clock = std::function<std::chrono::steady_clock::time_point()>;

struct QueueCounts {
    std::size_t enqueued = 0;
    std::size_t pending = 0;
    std::size_t leased = 0;
    std::size_t completed = 0;
};

enum class SubmitResult { Recorded, Replaced };

/// FIFO review queue with leases. Each image id is held at most once across
/// pending and leased; enqueued == pending + leased + completed always holds.
class ReviewQueue {
public:
    explicit ReviewQueue(std::chrono::milliseconds lease_timeout = std::chrono::seconds(300),
                         Clock clock = {});

    /// Throws QueueConflict when the image is already pending or leased.
    void enqueue(ReviewItem item);
    /// Enqueues items whose image is neither pending, leased nor completed;
    /// returns how many were added.
    std::size_t enqueue_new(std::span<const ReviewItem> items);

    /// Leases the oldest pending item. Expired leases return to pending in
    /// their original order first.
    std::optional<ReviewItem> next();

    /// Records a verdict for a leased image. A repeat submission while the
    /// lease is still live replaces the earlier verdict.
    SubmitResult submit(const ReviewVerdict& verdict);

    /// Offline path: accepts a verdict for a pending or leased image without a
    /// lease; repeats replace. Throws QueueConflict for unknown images.
    SubmitResult import_verdict(const ReviewVerdict& verdict);

    std::vector<ReviewItem> pending() const;
    std::vector<ReviewVerdict> completed() const;
    std::optional<ReviewVerdict> verdict_for(const std::string& image_id) const;
    QueueCounts counts() const;
    int round() const;
    void set_round(int round);

    nlohmann::json to_json() const;

private:
    struct Entry {
        std::uint64_t seq = 0;
        ReviewItem item;
        std::optional<std::chrono::steady_clock::time_point> lease_until;
    };
    struct Done {
        ReviewVerdict verdict;
        std::optional<std::chrono::steady_clock::time_point> lease_until;
    };

    void reclaim_expired_locked(std::chrono::steady_clock::time_point now);
    SubmitResult complete_locked(std::map<std::uint64_t, Entry>::iterator it, const ReviewVerdict& v);

    mutable std::shared_mutex mutex_;
    std::chrono::milliseconds lease_timeout_;
    Clock clock_;
    std::map<std::uint64_t, Entry> open_;  // pending and leased, keyed by arrival
    std::unordered_map<std::string, std::uint64_t> open_index_;
    std::map<std::string, Done> done_;
    std::vector<std::string> done_order_;
    std::uint64_t next_seq_ = 0;
    std::size_t enqueued_ = 0;
    int round_ = 0;
};

/// Loop-side annotator backed by a ReviewQueue: new items are enqueued and
/// completed verdicts for the requested images are returned. Items without
/// a verdict are carried forward by the loop.
class QueueAnnotator final : public Annotator {
public:
    explicit QueueAnnotator(ReviewQueue& queue) : queue_(&queue) {}
    std::vector<ReviewVerdict> review(std::span<const ReviewItem> items) override;

private:
    ReviewQueue* queue_;
};

/// Round reports published by a running campaign. Readers always see a
/// prefix of the final sequence.
class CampaignStatus {
public:
    void publish(const RoundReport& report);
    void reset(std::vector<RoundReport> reports);
    std::vector<RoundReport> snapshot() const;

    /// Reports recorded in a checkpoint directory's latest.json; empty when
    /// there is none.
    static std::vector<RoundReport> load(const std::filesystem::path& checkpoint_dir);

private:
    mutable std::shared_mutex mutex_;
    std::vector<RoundReport> reports_;
};

/// JSON over HTTP:
///   GET  /queue/next       200 ReviewItem | 204
///   POST /queue/verdict    200 {"status": "recorded"|"replaced"} | 400 | 409
///   GET  /campaign/status  200 [RoundReport...]
///   GET  /queue/state      200 queue summary
class ReviewServer {
public:
    ReviewServer(ReviewQueue& queue, CampaignStatus& status);
    ~ReviewServer();
    ReviewServer(const ReviewServer&) = delete;
    ReviewServer& operator=(const ReviewServer&) = delete;

    /// Starts serving on a background thread; port 0 picks a free port.
    /// Returns the bound port.
    int start(const std::string& host = "127.0.0.1", int port = 0);
    /// Blocks serving on the calling thread.
    void listen(const std::string& host, int port);
    void stop();

    /// Called after each accepted verdict.
    void on_verdict(std::function<void(const ReviewVerdict&)> callback);

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// File-based review path.
void export_pending(const std::filesystem::path& path, std::span<const ReviewItem> items);
std::vector<ReviewItem> read_review_items(const std::filesystem::path& path);
void write_verdicts(const std::filesystem::path& path, std::span<const ReviewVerdict> verdicts);
std::vector<ReviewVerdict> read_verdicts(const std::filesystem::path& path);

}  // namespace treemap
