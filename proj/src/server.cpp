#include "mw/server.hpp"

#include <boost/asio/dispatch.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/asio/signal_set.hpp>
#include <boost/asio/strand.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <condition_variable>
#include <cstring>
#include <deque>

namespace mw {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;
using nlohmann::json;

// ---------------------------------------------------------------- wire

namespace {

template <class T>
void put_le(std::string& s, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) s.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <class T>
T get_le(std::string_view s, std::size_t at) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(s[at + i])) << (8 * i);
    return static_cast<T>(v);
}

}  // namespace

std::string encode_frame(std::uint64_t index, const Frame& f) {
    if (f.width < 0 || f.height < 0 || f.width > 0xffff || f.height > 0xffff ||
        f.rgb.size() != static_cast<std::size_t>(f.width) * f.height * 3) {
        throw ShapeError("encode_frame: malformed frame");
    }
    std::string s;
    s.reserve(kFrameHeaderBytes + f.rgb.size());
    s.append("WPLY");
    s.push_back(static_cast<char>(kWireVersion));
    put_le<std::uint64_t>(s, index);
    put_le<std::uint16_t>(s, static_cast<std::uint16_t>(f.width));
    put_le<std::uint16_t>(s, static_cast<std::uint16_t>(f.height));
    s.push_back(static_cast<char>(kFormatRgb8));
    s.append(reinterpret_cast<const char*>(f.rgb.data()), f.rgb.size());
    return s;
}

std::optional<DecodedFrame> decode_frame(std::string_view b) {
    if (b.size() < kFrameHeaderBytes || b.substr(0, 4) != "WPLY") return std::nullopt;
    if (static_cast<std::uint8_t>(b[4]) != kWireVersion || static_cast<std::uint8_t>(b[17]) != kFormatRgb8) return std::nullopt;
    DecodedFrame d;
    d.index = get_le<std::uint64_t>(b, 5);
    d.frame.width = get_le<std::uint16_t>(b, 13);
    d.frame.height = get_le<std::uint16_t>(b, 15);
    const std::size_t n = static_cast<std::size_t>(d.frame.width) * d.frame.height * 3;
    if (b.size() != kFrameHeaderBytes + n) return std::nullopt;
    d.frame.rgb.assign(b.begin() + kFrameHeaderBytes, b.end());
    return d;
}

// ---------------------------------------------------------------- session

namespace {

RolloutOptions session_rollout(const WorldModel& m, const SessionOptions& o) {
    RolloutOptions r;
    r.schedule = o.schedule;
    r.retrieval = RetrievalOptions::for_world(o.world_size, m.config().mem_L, m.config().mem_K);
    r.noise_seed = o.noise_seed;
    return r;
}

json pose_json(const CameraPose& p) { return json::array({p.position[0], p.position[1], p.yaw}); }

}  // namespace

Session::Session(std::uint64_t id, std::uint64_t seed, const WorldModel& model, SessionOptions opt,
                 std::function<void()> notify)
    : id_(id),
      seed_(seed),
      model_(model),
      opt_(std::move(opt)),
      notify_(std::move(notify)),
      world_(GridWorld::generate(seed, opt_.world_size)),
      rollout_(model, session_rollout(model, opt_)),
      inbox_(opt_.inbox),
      outbox_(opt_.outbox) {
    const auto& cfg = model.config();
    pose_ = spawn_pose(world_, seed, Intrinsics::for_size(cfg.frame_w, cfg.frame_h));
}

Session::~Session() { stop(); }

json Session::ready_message() const {
    return {{"type", "ready"}, {"session", id_}, {"w", model_.config().frame_w}, {"h", model_.config().frame_h}};
}

void Session::emit(OutMessage m) {
    const bool binary = m.binary;
    if (outbox_.push_drop_oldest(std::move(m)) > 0 && binary) {
        outbox_.push_drop_oldest({false, json{{"type", "lag"}, {"dropped", outbox_.dropped()}}.dump()});
    }
    if (notify_) notify_();
}

void Session::start(bool realtime) {
    const auto& cfg = model_.config();
    std::vector<Frame> first;
    ChunkAction act;
    for (int f = 0; f < kChunkFrames; ++f) {
        first.push_back(render(world_, pose_));
        act.poses[f] = pose_;
    }
    {
        std::lock_guard lk(mu_);
        rollout_.commit(patchify<float>(std::span<const Frame>(first), cfg.patch), act);
        started_ = std::chrono::steady_clock::now();
    }
    emit({false, ready_message().dump()});
    for (const auto& f : first) emit({true, encode_frame(next_frame_++, f)});
    if (realtime) {
        running_ = true;
        thread_ = std::thread([this] { generation_loop(); });
    }
}

void Session::stop() {
    running_ = false;
    inbox_.close();
    if (thread_.joinable()) {
        if (thread_.get_id() == std::this_thread::get_id()) {
            thread_.detach();
        } else {
            thread_.join();
        }
    }
    outbox_.close();
}

bool Session::push_action(KeyMask keys, std::uint64_t tick) {
    if (inbox_.closed()) return false;
    return inbox_.push({keys, tick});
}

void Session::run_tick() {
    std::lock_guard lk(mu_);
    while (auto a = inbox_.try_pop()) pending_.emplace(a->tick, a->keys);
    KeyMask k = 0, last = 0;
    bool any = false;
    auto end = pending_.upper_bound(tick_);
    for (auto it = pending_.begin(); it != end; ++it) {
        k |= it->second;
        last = it->second;
        any = true;
    }
    pending_.erase(pending_.begin(), end);
    if (any && !keys_consistent(k)) k = last;
    pose_ = step_pose(world_, pose_, k);
    poses_.push_back(pose_);
    keys_.push_back(k);
    ++tick_;
    if (tick_ % kTicksPerChunk != 0) return;

    ChunkAction act;
    act.keys = dominant_keys(std::span(keys_).last(kChunkFrames));
    for (int f = 0; f < kChunkFrames; ++f) act.poses[f] = poses_[poses_.size() - kChunkFrames + f];
    const ChunkResult res = rollout_.step(act);
    progressive_decode(res.latent, model_.config(), next_frame_,
                       [&](EmittedFrame f) { emit({true, encode_frame(f.index, f.frame)}); });
    next_frame_ += kChunkFrames;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    json poses = json::array();
    for (const auto& p : act.poses) poses.push_back(pose_json(p));
    json ctx = json::array();
    for (std::size_t i : res.context.ordered(rollout_.bank())) ctx.push_back(rollout_.bank()[i].capture_index);
    emit({false, json{{"type", "stats"},
                      {"chunk", res.capture_index},
                      {"tick", tick_},
                      {"fps", secs > 0 ? static_cast<double>(next_frame_) / secs : 0.0},
                      {"chunk_ms", res.ms},
                      {"retrieved", ctx},
                      {"keys", act.keys},
                      {"poses", poses},
                      {"dropped", outbox_.dropped()}}
                     .dump()});
}

void Session::generation_loop() {
    const auto period = std::chrono::milliseconds(opt_.tick_ms);
    auto next = std::chrono::steady_clock::now() + period;
    while (running_) {
        std::this_thread::sleep_until(next);
        if (!running_) break;
        run_tick();
        // Never burst to catch up after a slow chunk.
        next = std::max(next + period, std::chrono::steady_clock::now());
    }
}

std::uint64_t Session::ticks() const {
    std::lock_guard lk(mu_);
    return tick_;
}

std::vector<CameraPose> Session::pose_trace() const {
    std::lock_guard lk(mu_);
    return poses_;
}

std::vector<KeyMask> Session::key_trace() const {
    std::lock_guard lk(mu_);
    return keys_;
}

std::uint64_t Session::frames_emitted() const {
    std::lock_guard lk(mu_);
    return next_frame_;
}

// ---------------------------------------------------------------- network

namespace {

class WsConnection;

struct Shared {
    Shared(const WorldModel& m, ServerOptions o) : model(m), opt(std::move(o)) {}

    const WorldModel& model;
    ServerOptions opt;
    std::atomic<std::uint64_t> next_id{1};
    std::mutex mu;
    std::vector<std::weak_ptr<WsConnection>> connections;
};

class WsConnection : public std::enable_shared_from_this<WsConnection> {
public:
    WsConnection(tcp::socket&& s, std::shared_ptr<Shared> sh) : ws_(std::move(s)), sh_(std::move(sh)) {}

    ~WsConnection() {
        if (session_) session_->stop();
    }

    void run(http::request<http::string_body> req) {
        {
            std::lock_guard lk(sh_->mu);
            std::erase_if(sh_->connections, [](const auto& w) { return w.expired(); });
            sh_->connections.push_back(weak_from_this());
        }
        ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
        ws_.async_accept(req, beast::bind_front_handler(&WsConnection::on_accept, shared_from_this()));
    }

    // Only once the io threads have stopped.
    void stop_session() {
        if (session_) session_->stop();
    }

private:
    void on_accept(beast::error_code ec) {
        if (ec) return;
        do_read();
    }

    void do_read() { ws_.async_read(buf_, beast::bind_front_handler(&WsConnection::on_read, shared_from_this())); }

    void on_read(beast::error_code ec, std::size_t) {
        if (ec) {
            shutdown();
            return;
        }
        const std::string text = beast::buffers_to_string(buf_.data());
        buf_.consume(buf_.size());
        if (!ws_.got_text()) {
            fail("bad_message", false);
        } else {
            handle(text);
        }
        if (!closing_) do_read();
    }

    void handle(const std::string& text) {
        json m = json::parse(text, nullptr, false);
        if (m.is_discarded() || !m.is_object() || !m.contains("type") || !m["type"].is_string()) {
            fail(session_ ? "bad_message" : "bad_init", !session_);
            return;
        }
        const std::string type = m["type"];
        if (type == "init") {
            if (session_ || !m.contains("seed") || !m["seed"].is_number_unsigned()) {
                fail("bad_init", true);
                return;
            }
            std::weak_ptr<WsConnection> weak = shared_from_this();
            auto exec = ws_.get_executor();
            // The generation thread never holds a strong reference.
            auto notify = [weak, exec] {
                net::post(exec, [weak] {
                    if (auto self = weak.lock()) self->pump();
                });
            };
            session_ = std::make_unique<Session>(sh_->next_id++, m["seed"].get<std::uint64_t>(), sh_->model,
                                                 sh_->opt.session, std::move(notify));
            session_->start(true);
        } else if (type == "action") {
            if (!session_) {
                fail("unknown_session", false);
                return;
            }
            if (!m.contains("keys") || !m["keys"].is_number_unsigned() || !m.contains("tick") ||
                !m["tick"].is_number_unsigned() || !keys_consistent(static_cast<KeyMask>(m["keys"].get<std::uint64_t>() & 0xff)) ||
                m["keys"].get<std::uint64_t>() > 0xff) {
                fail("bad_action", false);
                return;
            }
            session_->push_action(static_cast<KeyMask>(m["keys"].get<std::uint64_t>()), m["tick"].get<std::uint64_t>());
        } else if (type == "close") {
            if (session_) session_->stop();
            closing_ = true;
            close_after_flush_ = true;
            pump();
        } else {
            fail("bad_message", false);
        }
    }

    void fail(const std::string& code, bool close) {
        control_.push_back({false, json{{"type", "error"}, {"code", code}}.dump()});
        if (close) {
            closing_ = true;
            close_after_flush_ = true;
        }
        pump();
    }

    void pump() {
        if (writing_) return;
        std::optional<OutMessage> m;
        if (!control_.empty()) {
            m = std::move(control_.front());
            control_.pop_front();
        } else if (session_ && !closing_) {
            m = session_->outbox().try_pop();
        }
        if (!m) {
            if (close_after_flush_ && !closed_) {
                closed_ = true;
                ws_.async_close(websocket::close_code::normal,
                                [self = shared_from_this()](beast::error_code) { self->shutdown(); });
            }
            return;
        }
        writing_ = true;
        out_ = std::move(m->data);
        ws_.binary(m->binary);
        ws_.async_write(net::buffer(out_), beast::bind_front_handler(&WsConnection::on_write, shared_from_this()));
    }

    void on_write(beast::error_code ec, std::size_t) {
        writing_ = false;
        if (ec) {
            shutdown();
            return;
        }
        pump();
    }

    void shutdown() {
        closing_ = true;
        if (session_) session_->stop();
    }

    websocket::stream<beast::tcp_stream> ws_;
    std::shared_ptr<Shared> sh_;
    beast::flat_buffer buf_;
    std::unique_ptr<Session> session_;
    std::deque<OutMessage> control_;
    std::string out_;
    bool writing_ = false;
    bool closing_ = false;
    bool close_after_flush_ = false;
    bool closed_ = false;
};

class HttpConnection : public std::enable_shared_from_this<HttpConnection> {
public:
    HttpConnection(tcp::socket&& s, std::shared_ptr<Shared> sh) : stream_(std::move(s)), sh_(std::move(sh)) {}

    void run() {
        net::dispatch(stream_.get_executor(), beast::bind_front_handler(&HttpConnection::do_read, shared_from_this()));
    }

private:
    void do_read() {
        req_ = {};
        stream_.expires_after(std::chrono::seconds(30));
        http::async_read(stream_, buf_, req_, beast::bind_front_handler(&HttpConnection::on_read, shared_from_this()));
    }

    void on_read(beast::error_code ec, std::size_t) {
        if (ec) return;
        if (websocket::is_upgrade(req_)) {
            if (req_.target() == "/session") {
                stream_.expires_never();
                if (sh_->opt.send_buffer > 0) {
                    beast::error_code ignore;
                    stream_.socket().set_option(net::socket_base::send_buffer_size(sh_->opt.send_buffer), ignore);
                }
                std::make_shared<WsConnection>(stream_.release_socket(), sh_)->run(std::move(req_));
            }
            return;
        }
        auto res = std::make_shared<http::response<http::string_body>>();
        res->version(req_.version());
        res->keep_alive(false);
        if (req_.method() == http::verb::get && (req_.target() == "/" || req_.target().starts_with("/?"))) {
            res->result(http::status::ok);
            res->set(http::field::content_type, "text/html; charset=utf-8");
            res->body() = index_html();
        } else {
            res->result(http::status::not_found);
            res->set(http::field::content_type, "text/plain");
            res->body() = "not found\n";
        }
        res->prepare_payload();
        http::async_write(stream_, *res, [self = shared_from_this(), res](beast::error_code, std::size_t) {
            beast::error_code ignore;
            self->stream_.socket().shutdown(tcp::socket::shutdown_send, ignore);
        });
    }

    beast::tcp_stream stream_;
    std::shared_ptr<Shared> sh_;
    beast::flat_buffer buf_;
    http::request<http::string_body> req_;
};

}  // namespace

struct Server::Impl {
    std::shared_ptr<Shared> sh;
    net::io_context ioc;
    tcp::acceptor acceptor{ioc};
    std::vector<std::thread> threads;
    std::mutex mu;
    std::condition_variable cv;
    bool stopped = false;

    void do_accept() {
        acceptor.async_accept(net::make_strand(ioc), [this](beast::error_code ec, tcp::socket s) {
            if (ec) return;
            std::make_shared<HttpConnection>(std::move(s), sh)->run();
            do_accept();
        });
    }
};

Server::Server(const WorldModel& model, ServerOptions opt) : impl_(std::make_unique<Impl>()) {
    impl_->sh = std::make_shared<Shared>(model, std::move(opt));
}

Server::~Server() { stop(); }

void Server::start() {
    auto& im = *impl_;
    const auto addr = net::ip::make_address(im.sh->opt.host);
    tcp::endpoint ep{addr, im.sh->opt.port};
    im.acceptor.open(ep.protocol());
    im.acceptor.set_option(net::socket_base::reuse_address(true));
    im.acceptor.bind(ep);
    im.acceptor.listen(net::socket_base::max_listen_connections);
    im.do_accept();
    for (int i = 0; i < std::max(1, im.sh->opt.io_threads); ++i) im.threads.emplace_back([&im] { im.ioc.run(); });
}

void Server::stop() {
    auto& im = *impl_;
    {
        std::lock_guard lk(im.mu);
        if (im.stopped) return;
        im.stopped = true;
    }
    beast::error_code ignore;
    im.acceptor.close(ignore);
    im.ioc.stop();
    for (auto& t : im.threads) t.join();
    im.threads.clear();
    std::vector<std::shared_ptr<WsConnection>> live;
    {
        std::lock_guard lk(im.sh->mu);
        for (auto& w : im.sh->connections) {
            if (auto c = w.lock()) live.push_back(std::move(c));
        }
    }
    for (auto& c : live) c->stop_session();
    im.cv.notify_all();
}

void Server::wait() {
    std::unique_lock lk(impl_->mu);
    impl_->cv.wait(lk, [&] { return impl_->stopped; });
}

unsigned short Server::port() const { return impl_->acceptor.local_endpoint().port(); }

std::size_t Server::sessions_created() const { return impl_->sh->next_id.load() - 1; }

const std::string& index_html() {
    static const std::string page = R"HTML(<!doctype html>
<html>
<head>
<meta charset="utf-8">
<title>world</title>
<style>
body { background: #111; color: #ccc; font: 13px monospace; margin: 0; }
canvas { width: 512px; height: 512px; image-rendering: pixelated; display: block; margin: 16px auto; background: #000; }
#hud { text-align: center; }
</style>
</head>
<body>
<canvas id="view"></canvas>
<div id="hud">--</div>
<script>
const params = new URLSearchParams(location.search);
const seed = Number(params.get("seed") || 1);
const debug = params.has("debug");
const bits = { KeyW: 1, KeyS: 2, KeyA: 4, KeyD: 8, KeyQ: 16, KeyE: 32 };
const held = new Set();
let tick = 0, last = -1, stats = null, tickMs = 80;
const canvas = document.getElementById("view");
const ctx = canvas.getContext("2d");
const hud = document.getElementById("hud");
addEventListener("keydown", e => { if (e.code in bits) held.add(e.code); });
addEventListener("keyup", e => held.delete(e.code));
const ws = new WebSocket(`ws://${location.host}/session`);
ws.binaryType = "arraybuffer";
ws.onopen = () => ws.send(JSON.stringify({ type: "init", seed }));
ws.onmessage = ev => {
  if (typeof ev.data === "string") {
    const m = JSON.parse(ev.data);
    if (m.type === "ready") {
      canvas.width = m.w; canvas.height = m.h;
      setInterval(() => {
        let keys = 0;
        for (const c of held) keys |= bits[c];
        ws.send(JSON.stringify({ type: "action", keys, tick: tick++ }));
      }, tickMs);
    } else if (m.type === "stats") {
      stats = m;
    }
    hud.textContent = stats
      ? `${stats.fps.toFixed(1)} fps  ${stats.chunk_ms.toFixed(1)} ms/chunk  tick ${tick}` + (debug ? `  mem [${stats.retrieved}]` : "")
      : "--";
    return;
  }
  const b = new DataView(ev.data);
  const magic = String.fromCharCode(b.getUint8(0), b.getUint8(1), b.getUint8(2), b.getUint8(3));
  if (magic !== "WPLY" || b.getUint8(4) !== 1 || b.byteLength < 18) return;
  const index = Number(b.getBigUint64(5, true));
  const w = b.getUint16(13, true), h = b.getUint16(15, true);
  if (index <= last || b.byteLength !== 18 + w * h * 3) return;
  last = index;
  const img = ctx.createImageData(w, h);
  const src = new Uint8Array(ev.data, 18);
  for (let i = 0; i < w * h; i++) {
    img.data[4 * i] = src[3 * i];
    img.data[4 * i + 1] = src[3 * i + 1];
    img.data[4 * i + 2] = src[3 * i + 2];
    img.data[4 * i + 3] = 255;
  }
  ctx.putImageData(img, 0, 0);
};
</script>
</body>
</html>
)HTML";
    return page;
}

}  // namespace mw
