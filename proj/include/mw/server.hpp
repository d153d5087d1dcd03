#pragma once

// Streaming sessions over WebSocket. Each session owns a world, a rollout
// (memory bank and cache) and a generation thread ticking at a fixed
// period; frames leave through a drop-oldest outbox.
//
// Wire format of a binary frame message:
//   "WPLY" | version u8 = 1 | index u64 LE | width u16 LE | height u16 LE |
//   format u8 = 0 (RGB8) | payload (width * height * 3 bytes)

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "json.hpp"
#include "mw/sampler.hpp"

namespace mw {

inline constexpr std::uint8_t kWireVersion = 1;
inline constexpr std::uint8_t kFormatRgb8 = 0;
inline constexpr std::size_t kFrameHeaderBytes = 18;
inline constexpr int kTicksPerChunk = kChunkFrames;

std::string encode_frame(std::uint64_t index, const Frame& f);

struct DecodedFrame {
    std::uint64_t index = 0;
    Frame frame;
};
// nullopt on bad magic, version, format or payload length.
std::optional<DecodedFrame> decode_frame(std::string_view bytes);

struct SessionOptions {
    int tick_ms = 80;
    int world_size = 12;
    std::vector<double> schedule = student_schedule();
    std::size_t outbox = kFrameQueueCapacity;
    std::size_t inbox = 1024;
    std::uint64_t noise_seed = 0;
};

struct OutMessage {
    bool binary = false;
    std::string data;
};

// Action for a tick: every key received for ticks <= the current one is
// OR-ed in; ticks with no input are idle.
struct TimedKeys {
    KeyMask keys = 0;
    std::uint64_t tick = 0;
};

class Session {
public:
    // notify is called (from the generation thread) after each push to the outbox.
    Session(std::uint64_t id, std::uint64_t seed, const WorldModel& model, SessionOptions opt,
            std::function<void()> notify = {});
    ~Session();
    Session(const Session&) = delete;
    Session& operator=(const Session&) = delete;

    std::uint64_t id() const { return id_; }
    std::uint64_t seed() const { return seed_; }
    nlohmann::json ready_message() const;

    // Queues the ready message and the four ground-truth frames; with
    // realtime set, also starts the generation thread.
    void start(bool realtime = true);
    void stop();

    // False once the session is stopped.
    bool push_action(KeyMask keys, std::uint64_t tick);

    // One input tick; every fourth tick generates and emits a chunk.
    void run_tick();

    BoundedQueue<OutMessage>& outbox() { return outbox_; }
    std::uint64_t ticks() const;
    std::vector<CameraPose> pose_trace() const;
    std::vector<KeyMask> key_trace() const;
    std::uint64_t frames_emitted() const;

private:
    void emit(OutMessage m);
    void generation_loop();

    const std::uint64_t id_, seed_;
    const WorldModel& model_;
    SessionOptions opt_;
    std::function<void()> notify_;
    GridWorld world_;
    Rollout rollout_;
    BoundedQueue<TimedKeys> inbox_;
    BoundedQueue<OutMessage> outbox_;

    mutable std::mutex mu_;
    std::multimap<std::uint64_t, KeyMask> pending_;
    CameraPose pose_;
    std::uint64_t tick_ = 0;
    std::uint64_t next_frame_ = 0;
    std::vector<CameraPose> poses_;
    std::vector<KeyMask> keys_;
    std::chrono::steady_clock::time_point started_;

    std::atomic<bool> running_{false};
    std::thread thread_;
};

struct ServerOptions {
    std::string host = "127.0.0.1";
    unsigned short port = 8080;  // 0 = ephemeral
    int io_threads = 1;
    int send_buffer = 0;  // SO_SNDBUF for session sockets, 0 = system default
    SessionOptions session;
};

class Server {
public:
    Server(const WorldModel& model, ServerOptions opt);
    ~Server();

    // Binds and starts the io threads; returns once listening.
    void start();
    void stop();
    // Blocks until stop() is called.
    void wait();
    unsigned short port() const;
    std::size_t sessions_created() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// The page served at /.
const std::string& index_html();

}  // namespace mw
