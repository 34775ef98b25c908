#include "treemap/service.hpp"

#include <httplib.h>

#include <fstream>

namespace treemap {

using nlohmann::json;
using steady = std::chrono::steady_clock;

// ------------------------------------------------------------ ReviewQueue

ReviewQueue::ReviewQueue(std::chrono::milliseconds lease_timeout, Clock clock)
    : lease_timeout_(lease_timeout), clock_(clock ? std::move(clock) : Clock([] { return steady::now(); })) {
    if (lease_timeout.count() <= 0) throw std::invalid_argument("lease timeout must be positive");
}

void ReviewQueue::enqueue(ReviewItem item) {
    std::unique_lock lock(mutex_);
    if (item.image_id.empty()) throw std::invalid_argument("review item without image id");
    if (open_index_.contains(item.image_id)) {
        throw QueueConflict("image '" + item.image_id + "' is already queued");
    }
    const std::uint64_t seq = next_seq_++;
    open_index_.emplace(item.image_id, seq);
    open_.emplace(seq, Entry{seq, std::move(item), std::nullopt});
    ++enqueued_;
}

std::size_t ReviewQueue::enqueue_new(std::span<const ReviewItem> items) {
    std::unique_lock lock(mutex_);
    std::size_t added = 0;
    for (const auto& item : items) {
        if (item.image_id.empty() || open_index_.contains(item.image_id) || done_.contains(item.image_id)) {
            continue;
        }
        const std::uint64_t seq = next_seq_++;
        open_index_.emplace(item.image_id, seq);
        open_.emplace(seq, Entry{seq, item, std::nullopt});
        ++enqueued_;
        ++added;
    }
    return added;
}

void ReviewQueue::reclaim_expired_locked(steady::time_point now) {
    for (auto& [seq, e] : open_) {
        if (e.lease_until && *e.lease_until <= now) e.lease_until.reset();
    }
}

std::optional<ReviewItem> ReviewQueue::next() {
    std::unique_lock lock(mutex_);
    const auto now = clock_();
    reclaim_expired_locked(now);
    for (auto& [seq, e] : open_) {
        if (e.lease_until) continue;
        e.lease_until = now + lease_timeout_;
        return e.item;
    }
    return std::nullopt;
}

SubmitResult ReviewQueue::complete_locked(std::map<std::uint64_t, Entry>::iterator it, const ReviewVerdict& v) {
    Done done{v, it->second.lease_until};
    open_index_.erase(it->second.item.image_id);
    open_.erase(it);
    done_order_.push_back(v.image_id);
    done_.insert_or_assign(v.image_id, std::move(done));
    return SubmitResult::Recorded;
}

SubmitResult ReviewQueue::submit(const ReviewVerdict& verdict) {
    std::unique_lock lock(mutex_);
    const auto now = clock_();
    if (const auto d = done_.find(verdict.image_id); d != done_.end()) {
        if (d->second.lease_until && now < *d->second.lease_until) {
            d->second.verdict = verdict;
            return SubmitResult::Replaced;
        }
        throw QueueConflict("lease for image '" + verdict.image_id + "' is no longer live");
    }
    const auto idx = open_index_.find(verdict.image_id);
    if (idx == open_index_.end()) throw QueueConflict("image '" + verdict.image_id + "' is not queued");
    const auto it = open_.find(idx->second);
    if (!it->second.lease_until) throw QueueConflict("image '" + verdict.image_id + "' is not leased");
    if (*it->second.lease_until <= now) {
        it->second.lease_until.reset();
        throw QueueConflict("lease for image '" + verdict.image_id + "' has expired");
    }
    return complete_locked(it, verdict);
}

SubmitResult ReviewQueue::import_verdict(const ReviewVerdict& verdict) {
    std::unique_lock lock(mutex_);
    if (const auto d = done_.find(verdict.image_id); d != done_.end()) {
        d->second.verdict = verdict;
        return SubmitResult::Replaced;
    }
    const auto idx = open_index_.find(verdict.image_id);
    if (idx == open_index_.end()) throw QueueConflict("image '" + verdict.image_id + "' is not queued");
    auto it = open_.find(idx->second);
    it->second.lease_until.reset();
    return complete_locked(it, verdict);
}

std::vector<ReviewItem> ReviewQueue::pending() const {
    std::shared_lock lock(mutex_);
    const auto now = clock_();
    std::vector<ReviewItem> out;
    for (const auto& [seq, e] : open_) {
        if (!e.lease_until || *e.lease_until <= now) out.push_back(e.item);
    }
    return out;
}

std::vector<ReviewVerdict> ReviewQueue::completed() const {
    std::shared_lock lock(mutex_);
    std::vector<ReviewVerdict> out;
    out.reserve(done_order_.size());
    for (const auto& id : done_order_) out.push_back(done_.at(id).verdict);
    return out;
}

std::optional<ReviewVerdict> ReviewQueue::verdict_for(const std::string& image_id) const {
    std::shared_lock lock(mutex_);
    const auto it = done_.find(image_id);
    if (it == done_.end()) return std::nullopt;
    return it->second.verdict;
}

QueueCounts ReviewQueue::counts() const {
    std::shared_lock lock(mutex_);
    const auto now = clock_();
    QueueCounts c;
    c.enqueued = enqueued_;
    c.completed = done_.size();
    for (const auto& [seq, e] : open_) {
        if (e.lease_until && now < *e.lease_until) {
            ++c.leased;
        } else {
            ++c.pending;
        }
    }
    return c;
}

int ReviewQueue::round() const {
    std::shared_lock lock(mutex_);
    return round_;
}

void ReviewQueue::set_round(int round) {
    std::unique_lock lock(mutex_);
    round_ = round;
}

json ReviewQueue::to_json() const {
    const QueueCounts c = counts();
    return json{{"round", round()},
                {"enqueued", c.enqueued},
                {"pending", c.pending},
                {"leased", c.leased},
                {"completed", c.completed},
                {"pending_items", pending()},
                {"completed_verdicts", completed()}};
}

// --------------------------------------------------------- QueueAnnotator

std::vector<ReviewVerdict> QueueAnnotator::review(std::span<const ReviewItem> items) {
    queue_->enqueue_new(items);
    std::vector<ReviewVerdict> out;
    for (const auto& item : items) {
        if (auto v = queue_->verdict_for(item.image_id)) out.push_back(std::move(*v));
    }
    return out;
}

// --------------------------------------------------------- CampaignStatus

void CampaignStatus::publish(const RoundReport& report) {
    std::unique_lock lock(mutex_);
    reports_.push_back(report);
}

void CampaignStatus::reset(std::vector<RoundReport> reports) {
    std::unique_lock lock(mutex_);
    reports_ = std::move(reports);
}

std::vector<RoundReport> CampaignStatus::snapshot() const {
    std::shared_lock lock(mutex_);
    return reports_;
}

std::vector<RoundReport> CampaignStatus::load(const std::filesystem::path& checkpoint_dir) {
    std::ifstream in(checkpoint_dir / "latest.json");
    if (!in) return {};
    return json::parse(in).at("reports").get<std::vector<RoundReport>>();
}

// ----------------------------------------------------------- ReviewServer

struct ReviewServer::Impl {
    ReviewQueue* queue;
    CampaignStatus* status;
    httplib::Server server;
    std::thread thread;
    std::mutex callback_mutex;
    std::function<void(const ReviewVerdict&)> callback;
};

namespace {

void reply(httplib::Response& res, int code, const json& body) {
    res.status = code;
    res.set_content(body.dump(), "application/json");
}

}  // namespace

ReviewServer::ReviewServer(ReviewQueue& queue, CampaignStatus& status) : impl_(std::make_unique<Impl>()) {
    impl_->queue = &queue;
    impl_->status = &status;
    Impl* impl = impl_.get();

    impl->server.Get("/queue/next", [impl](const httplib::Request&, httplib::Response& res) {
        if (auto item = impl->queue->next()) {
            reply(res, 200, *item);
        } else {
            res.status = 204;
        }
    });

    impl->server.Post("/queue/verdict", [impl](const httplib::Request& req, httplib::Response& res) {
        ReviewVerdict v;
        try {
            v = json::parse(req.body).get<ReviewVerdict>();
        } catch (const std::exception& e) {
            reply(res, 400, {{"error", std::string("malformed verdict: ") + e.what()}});
            return;
        }
        try {
            const SubmitResult r = impl->queue->submit(v);
            reply(res, 200, {{"status", r == SubmitResult::Recorded ? "recorded" : "replaced"},
                             {"image_id", v.image_id}});
        } catch (const QueueConflict& e) {
            reply(res, 409, {{"error", e.what()}});
            return;
        }
        std::lock_guard lock(impl->callback_mutex);
        if (impl->callback) impl->callback(v);
    });

    impl->server.Get("/campaign/status", [impl](const httplib::Request&, httplib::Response& res) {
        reply(res, 200, impl->status->snapshot());
    });

    impl->server.Get("/queue/state", [impl](const httplib::Request&, httplib::Response& res) {
        const QueueCounts c = impl->queue->counts();
        reply(res, 200,
              {{"round", impl->queue->round()},
               {"enqueued", c.enqueued},
               {"pending", c.pending},
               {"leased", c.leased},
               {"completed", c.completed}});
    });
}

ReviewServer::~ReviewServer() { stop(); }

int ReviewServer::start(const std::string& host, int port) {
    int bound = port;
    if (port == 0) {
        bound = impl_->server.bind_to_any_port(host);
    } else if (!impl_->server.bind_to_port(host, port)) {
        bound = -1;
    }
    if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    return bound;
}

void ReviewServer::listen(const std::string& host, int port) {
    if (!impl_->server.listen(host, port)) {
        throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
    }
}

void ReviewServer::stop() {
    if (!impl_) return;
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

void ReviewServer::on_verdict(std::function<void(const ReviewVerdict&)> callback) {
    std::lock_guard lock(impl_->callback_mutex);
    impl_->callback = std::move(callback);
}

// ------------------------------------------------------------ file review

namespace {

json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return json::parse(in);
}

void write_json(const std::filesystem::path& path, const json& j) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

void export_pending(const std::filesystem::path& path, std::span<const ReviewItem> items) {
    write_json(path, json{{"items", std::vector<ReviewItem>(items.begin(), items.end())}});
}

std::vector<ReviewItem> read_review_items(const std::filesystem::path& path) {
    const json j = read_json(path);
    return (j.is_array() ? j : j.at("items")).get<std::vector<ReviewItem>>();
}

void write_verdicts(const std::filesystem::path& path, std::span<const ReviewVerdict> verdicts) {
    write_json(path, json{{"verdicts", std::vector<ReviewVerdict>(verdicts.begin(), verdicts.end())}});
}

std::vector<ReviewVerdict> read_verdicts(const std::filesystem::path& path) {
    const json j = read_json(path);
    return (j.is_array() ? j : j.at("verdicts")).get<std::vector<ReviewVerdict>>();
}

}  // namespace treemap
