#pragma once

#include "prefflock/mission.hpp"
#include "prefflock/wire.hpp"

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>

namespace prefflock::serve {

namespace beast = boost::beast;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;
using nlohmann::json;

/// Ordered hand-off between the network thread and the mission thread.
template <class T>
class Channel {
public:
    void push(T v) {
        {
            std::lock_guard lk(m_);
            q_.push_back(std::move(v));
        }
        cv_.notify_one();
    }
    std::optional<T> try_pop() {
        std::lock_guard lk(m_);
        return take();
    }
    std::optional<T> pop_for(std::chrono::milliseconds d) {
        std::unique_lock lk(m_);
        cv_.wait_for(lk, d, [&] { return !q_.empty(); });
        return take();
    }

private:
    std::optional<T> take() {
        if (q_.empty()) return std::nullopt;
        T v = std::move(q_.front());
        q_.pop_front();
        return v;
    }
    std::mutex m_;
    std::condition_variable cv_;
    std::deque<T> q_;
};

struct ServeConfig {
    std::string host = "127.0.0.1";
    unsigned short port = 8765;  // 0 picks a free port
    double query_timeout_s = 30.0;
    double snapshot_hz = 20.0;
    double pace = 0.0;            // wall seconds per simulated second; 0 runs flat out
    double operator_wait_s = 0.0; // block the mission start until an operator joins
};

class Server;

class Session : public std::enable_shared_from_this<Session> {
public:
    Session(tcp::socket s, Server &srv) : ws_(std::move(s)), srv_(srv) {}
    void start();
    void send(std::shared_ptr<const std::string> text);
    void close();
    bool is_operator = false;

private:
    void on_accept(beast::error_code ec);
    void do_read();
    void on_read(beast::error_code ec, std::size_t);
    void do_write();
    void reply_error(const std::string &what);

    websocket::stream<beast::tcp_stream> ws_;
    beast::flat_buffer buf_;
    std::deque<std::shared_ptr<const std::string>> out_;
    Server &srv_;
    bool closing_ = false;
    bool closed_ = false;
};

/// Websocket endpoint. The first client to connect while no operator is
/// present becomes the operator; everyone else is a viewer.
class Server {
public:
    Server(ServeConfig cfg, json hello) : cfg_(std::move(cfg)), hello_(std::move(hello)), acc_(ioc_) {}
    ~Server() { stop(); }

    void start() {
        const tcp::endpoint ep(net::ip::make_address(cfg_.host), cfg_.port);
        acc_.open(ep.protocol());
        acc_.set_option(net::socket_base::reuse_address(true));
        acc_.bind(ep);
        acc_.listen();
        port_ = acc_.local_endpoint().port();
        do_accept();
        th_ = std::thread([this] { ioc_.run(); });
    }

    /// Graceful shutdown: queued messages are flushed before each close.
    void stop() {
        if (!th_.joinable()) return;
        net::post(ioc_, [this] {
            beast::error_code ec;
            acc_.close(ec);
            for (auto &w : sessions_)
                if (auto s = w.lock()) s->close();
        });
        guard_.reset();
        th_.join();
    }

    [[nodiscard]] unsigned short port() const { return port_; }
    [[nodiscard]] bool operator_connected() const { return has_operator_.load(); }
    Channel<wire::Message> &inbound() { return inbound_; }

    /// Called from the mission thread.
    void publish(wire::Type t, json payload) {
        wire::validate({t, 0, payload});
        net::post(ioc_, [this, t, payload = std::move(payload)] {
            // numbered here so every session sees increasing seq
            auto text = std::make_shared<const std::string>(wire::encode({t, seq_++, payload}));
            for (auto &w : sessions_)
                if (auto s = w.lock()) s->send(text);
        });
    }

    // io thread only
    void attach(const std::shared_ptr<Session> &s) {
        s->is_operator = !has_operator_.exchange(true);
        sessions_.push_back(s);
        json hello = hello_;
        hello["role"] = s->is_operator ? "operator" : "viewer";
        s->send(std::make_shared<const std::string>(wire::encode({wire::Type::Hello, seq_++, hello})));
    }
    void detach(Session *s) {
        if (s->is_operator) has_operator_ = false;
        std::erase_if(sessions_, [s](const auto &w) {
            auto p = w.lock();
            return !p || p.get() == s;
        });
    }
    std::shared_ptr<const std::string> error_text(const std::string &what) {
        return std::make_shared<const std::string>(wire::encode({wire::Type::Error, seq_++, {{"message", what}}}));
    }

private:
    void do_accept() {
        acc_.async_accept([this](beast::error_code ec, tcp::socket sock) {
            if (ec) return;
            std::make_shared<Session>(std::move(sock), *this)->start();
            do_accept();
        });
    }

    ServeConfig cfg_;
    json hello_;
    net::io_context ioc_;
    net::executor_work_guard<net::io_context::executor_type> guard_{ioc_.get_executor()};
    tcp::acceptor acc_;
    std::thread th_;
    unsigned short port_ = 0;
    std::vector<std::weak_ptr<Session>> sessions_;
    std::atomic<bool> has_operator_{false};
    std::atomic<std::uint64_t> seq_{0};
    Channel<wire::Message> inbound_;
};

inline void Session::start() {
    websocket::stream_base::timeout t{};
    t.handshake_timeout = std::chrono::seconds(2);
    t.idle_timeout = websocket::stream_base::none();
    t.keep_alive_pings = false;
    ws_.set_option(t);
    ws_.async_accept(beast::bind_front_handler(&Session::on_accept, shared_from_this()));
}

inline void Session::on_accept(beast::error_code ec) {
    if (ec) return;
    srv_.attach(shared_from_this());
    do_read();
}

inline void Session::do_read() {
    ws_.async_read(buf_, beast::bind_front_handler(&Session::on_read, shared_from_this()));
}

inline void Session::on_read(beast::error_code ec, std::size_t) {
    if (ec) {
        closed_ = true;
        srv_.detach(this);
        return;
    }
    const std::string text = beast::buffers_to_string(buf_.data());
    buf_.consume(buf_.size());
    try {
        wire::Message m = wire::decode(text);
        if (m.type != wire::Type::Feedback && m.type != wire::Type::Control)
            reply_error("clients may only send feedback or control");
        else if (!is_operator)
            reply_error("viewer role is read-only");
        else
            srv_.inbound().push(std::move(m));
    } catch (const wire::WireError &e) {
        reply_error(std::string("rejected: ") + e.what());
    }
    do_read();
}

inline void Session::reply_error(const std::string &what) { send(srv_.error_text(what)); }

inline void Session::send(std::shared_ptr<const std::string> text) {
    if (closing_ || closed_) return;
    out_.push_back(std::move(text));
    if (out_.size() == 1) do_write();
}

inline void Session::do_write() {
    ws_.text(true);
    ws_.async_write(net::buffer(*out_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
        if (ec) {
            self->out_.clear();
            return;
        }
        self->out_.pop_front();
        if (!self->out_.empty())
            self->do_write();
        else if (self->closing_)
            self->close();
    });
}

inline void Session::close() {
    closing_ = true;
    if (!out_.empty() || closed_) return;
    closed_ = true;
    ws_.async_close(websocket::close_code::normal, [self = shared_from_this()](beast::error_code) {});
}

// ---------------------------------------------------------------------------

inline json robots_json(const std::vector<flocking::RobotState> &robots) {
    json out = json::array();
    for (const auto &r : robots)
        out.push_back({{"id", r.id}, {"position", mission::vec_json(r.position)}, {"velocity", mission::vec_json(r.velocity)}});
    return out;
}

/// Mission-side end of the session: answers queries from operator feedback,
/// turns control messages into mission commands and publishes telemetry.
class OperatorBridge : public mission::FeedbackSource, public mission::MissionObserver {
public:
    OperatorBridge(Server &srv, const mission::MissionConfig &mcfg, const ServeConfig &scfg, Vec3 goal)
        : srv_(srv), ranges_(mcfg.ranges), dt_(mcfg.dt), scfg_(scfg), goal_(std::move(goal)),
          threshold_(mcfg.covariance_threshold), wall0_(std::chrono::steady_clock::now()) {}

    std::optional<PreferenceVector> request(const mission::QueryContext &q) override {
        ++queries_;
        if (!srv_.operator_connected()) return std::nullopt;
        srv_.publish(wire::Type::QueryRequest, {{"query_id", q.seq},
                                                {"waypoint", q.waypoint},
                                                {"env", q.env_label},
                                                {"predicted", to_json(q.predicted)},
                                                {"mean_variance", q.mean_variance},
                                                {"timeout_s", scfg_.query_timeout_s}});
        const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(scfg_.query_timeout_s);
        while (std::chrono::steady_clock::now() < deadline) {
            if (!srv_.operator_connected()) return std::nullopt;
            heartbeat();
            auto m = srv_.inbound().pop_for(std::chrono::milliseconds(20));
            if (!m) continue;
            if (m->type == wire::Type::Control) {
                stash(*m);
                continue;
            }
            if (m->payload.at("query_id").get<std::uint64_t>() != static_cast<std::uint64_t>(q.seq)) {
                stale(*m);
                continue;
            }
            try {
                const PreferenceVector h = wire::feedback_preference(*m, ranges_);
                confidences_.push_back(m->payload.at("confidence").get<double>());
                return h;
            } catch (const wire::WireError &e) {
                srv_.publish(wire::Type::Error, {{"message", std::string("feedback rejected: ") + e.what()}});
            }
        }
        return std::nullopt;
    }

    void on_record(const json &rec) override {
        const auto &type = rec.at("type");
        if (type == "region") {
            srv_.publish(wire::Type::RegionUpdate, {{"waypoint", rec.at("waypoint")},
                                                    {"polytope", rec.at("polytope")},
                                                    {"ellipsoid", rec.at("ellipsoid")},
                                                    {"dilated_empty", rec.at("dilated_empty")}});
        } else if (type == "formation") {
            srv_.publish(wire::Type::PreferenceUpdate, {{"waypoint", rec.at("waypoint")},
                                                        {"prototype", rec.at("prototype")},
                                                        {"index", rec.at("index")},
                                                        {"fallback", rec.at("fallback")},
                                                        {"center", rec.at("center")},
                                                        {"slots", rec.at("slots")},
                                                        {"realized", rec.at("realized")}});
        } else if (type == "event") {
            last_event_ = rec;
        } else if (type == "end") {
            end_reason_ = rec.at("reason").get<std::string>();
        }
    }

    void on_state(long tick, const std::vector<flocking::RobotState> &robots, const PreferenceVector &h) override {
        tick_ = tick;
        robots_ = robots;
        h_ = h;
        if (scfg_.pace > 0.0)
            std::this_thread::sleep_until(wall0_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                                       std::chrono::duration<double>(tick * dt_ * scfg_.pace)));
        heartbeat();
    }

    std::vector<mission::ControlCommand> poll_control() override {
        while (auto m = srv_.inbound().try_pop()) {
            if (m->type == wire::Type::Control)
                stash(*m);
            else
                stale(*m);
        }
        heartbeat();
        return std::exchange(pending_, {});
    }

    /// Snapshot at the configured rate; `force` ignores the rate limit.
    void heartbeat(bool force = false) {
        const auto now = std::chrono::steady_clock::now();
        if (!force && now - last_snapshot_ < std::chrono::duration<double>(1.0 / scfg_.snapshot_hz)) return;
        last_snapshot_ = now;
        json snap{{"tick", tick_},       {"paused", paused_},           {"threshold", threshold_},
                  {"queries", queries_}, {"robots", robots_json(robots_)}, {"preference", to_json(h_)},
                  {"goal", mission::vec_json(goal_)}, {"state", end_reason_.empty() ? "running" : "finished"}};
        if (!end_reason_.empty()) snap["end_reason"] = end_reason_;
        if (!last_event_.is_null()) snap["last_event"] = last_event_;
        srv_.publish(wire::Type::StateSnapshot, std::move(snap));
    }

    [[nodiscard]] const std::vector<double> &confidences() const { return confidences_; }

private:
    void stash(const wire::Message &m) {
        const auto a = m.payload.at("action").get<std::string>();
        using K = mission::ControlCommand::Kind;
        if (a == "pause") {
            paused_ = true;
            pending_.push_back({K::Pause});
        } else if (a == "resume") {
            paused_ = false;
            pending_.push_back({K::Resume});
        } else if (a == "abort") {
            pending_.push_back({K::Abort});
        } else {
            threshold_ = m.payload.at("value").get<double>();
            pending_.push_back({K::SetThreshold, threshold_});
        }
    }
    void stale(const wire::Message &m) {
        srv_.publish(wire::Type::Error,
                     {{"message", "stale feedback"}, {"query_id", m.payload.at("query_id")}});
    }

    Server &srv_;
    PreferenceRanges ranges_;
    double dt_;
    ServeConfig scfg_;
    Vec3 goal_;
    double threshold_;
    bool paused_ = false;
    long tick_ = 0;
    int queries_ = 0;
    std::vector<flocking::RobotState> robots_;
    PreferenceVector h_;
    std::string end_reason_;
    json last_event_;
    std::vector<mission::ControlCommand> pending_;
    std::vector<double> confidences_;
    std::chrono::steady_clock::time_point wall0_, last_snapshot_{};
};

inline json hello_payload(const Scenario &s, const std::vector<formation::FormationPrototype> &library,
                          const mission::MissionConfig &cfg) {
    json obstacles = json::array(), regions = json::array();
    for (const auto &o : s.obstacles)
        obstacles.push_back({{"min", mission::vec_json(o.min_corner)}, {"max", mission::vec_json(o.max_corner)}});
    for (const auto &r : s.regions)
        regions.push_back({{"label", r.label}, {"min", mission::vec_json(r.box.min_corner)}, {"max", mission::vec_json(r.box.max_corner)}});
    return {{"prototypes", formation::prototypes_to_json(library).at("prototypes")},
            {"scenario",
             {{"bounds", {{"min", mission::vec_json(s.bounds.min_corner)}, {"max", mission::vec_json(s.bounds.max_corner)}}},
              {"obstacles", obstacles},
              {"regions", regions},
              {"start", mission::vec_json(s.start)},
              {"goal", mission::vec_json(s.goal)},
              {"robot_edge", s.robot_edge}}},
            {"ranges", {{"lo", cfg.ranges.lo}, {"hi", cfg.ranges.hi}}},
            {"seed", cfg.seed}};
}

/// Runs one mission with the operator on the other end of a websocket. A
/// started server may be passed in (tests bind port 0 and read the port).
inline mission::MissionResult run_served(const Scenario &s, gp::TrainState model, const mission::MissionConfig &cfg,
                                         const ServeConfig &scfg, Server &srv,
                                         std::vector<formation::FormationPrototype> library = {}) {
    if (library.empty()) library = formation::default_prototypes(cfg.robots);
    OperatorBridge bridge(srv, cfg, scfg, s.goal);
    const auto until = std::chrono::steady_clock::now() + std::chrono::duration<double>(scfg.operator_wait_s);
    while (!srv.operator_connected() && std::chrono::steady_clock::now() < until)
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
    auto r = mission::run_mission(s, std::move(model), bridge, cfg, library, &bridge);
    bridge.heartbeat(true);
    return r;
}

}  // namespace prefflock::serve
