#pragma once

// Streaming autoregressive inference: Euler sampling of one chunk at a time
// against a reconstituted, reframed memory context with cached keys/values.

#include <chrono>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "json.hpp"
#include "mw/memory.hpp"
#include "mw/model.hpp"
#include "mw/queue.hpp"

namespace mw {

// 1 - s/steps for s = 0..steps-1.
std::vector<double> uniform_schedule(int steps);
// {1.0, 0.75, 0.5, 0.25}
std::vector<double> student_schedule();
// Throws std::invalid_argument unless non-empty, strictly decreasing, in (0, 1].
void check_schedule(std::span<const double> schedule);

// Noise path z_k = (1-k) z0 + k z1, velocity v = z0 - z1.
template <class T>
Tensor<T> noisy_latent(const Tensor<T>& z0, const Tensor<T>& z1, double k);
template <class T>
Tensor<T> flow_velocity(const Tensor<T>& z0, const Tensor<T>& z1);
// Standard normal tensor of the given shape.
Tensorf gaussian_like(const Shape& shape, Rng& r);

// x <- x + (k_s - k_{s+1}) v(x, k_s), k_end = 0.
using VelocityFn = std::function<Tensorf(const Tensorf& x, double k)>;
Tensorf euler_sample(Tensorf x, std::span<const double> schedule, const VelocityFn& velocity);

// Denoises `noise` as the single target chunk described by `target`
// (latent and k are overwritten per step) against a prebuilt cache.
Tensorf denoise_chunk(const WorldModel& model, const KVCache<float>& cache, SeqChunk<float> target,
                      Tensorf noise, std::span<const double> schedule);
// Same without a cache: every step runs the full context.
Tensorf denoise_chunk_uncached(const WorldModel& model, const std::vector<SeqChunk<float>>& context,
                               SeqChunk<float> target, Tensorf noise, std::span<const double> schedule);

struct ChunkAction {
    KeyMask keys = 0;
    std::array<CameraPose, kChunkFrames> poses{};
};

struct RolloutOptions {
    std::vector<double> schedule = student_schedule();
    RetrievalOptions retrieval;
    bool use_cache = true;
    std::uint64_t noise_seed = 0;
};

struct ChunkResult {
    std::int64_t capture_index = 0;
    Tensorf latent;
    ContextSet context;
    Reframing reframing;
    bool cache_rebuilt = false;
    double ms = 0;  // generation wall time
    nlohmann::json retrieval;
};

// Algorithm 2 as a stateful loop: memory bank, cache, capture counter.
class Rollout {
public:
    Rollout(const WorldModel& model, RolloutOptions opt);

    // Commits a clean chunk (the ground-truth first chunk) without sampling.
    void commit(const Tensorf& latent, const ChunkAction& action);
    // Reconstitute, reframe, refresh the cache if the context changed,
    // denoise and commit the next chunk.
    ChunkResult step(const ChunkAction& action);

    const MemoryBank& bank() const { return bank_; }
    std::int64_t next_capture() const { return next_capture_; }
    std::size_t cache_rebuilds() const { return rebuilds_; }
    const KVCache<float>& cache() const { return cache_; }
    const RolloutOptions& options() const { return opt_; }

private:
    const WorldModel& model_;
    RolloutOptions opt_;
    MemoryBank bank_;
    KVCache<float> cache_;
    std::int64_t next_capture_ = 0;
    std::size_t rebuilds_ = 0;
};

// Validity tag of a cache built for this context.
std::uint64_t context_tag(const MemoryBank& bank, const Reframing& r);

struct EmittedFrame {
    std::uint64_t index = 0;
    Frame frame;
    std::chrono::steady_clock::time_point at;
};

// Unpatchifies the chunk one frame at a time, handing each to `emit`
// as soon as it is ready. Indices start at first_index.
void progressive_decode(const Tensorf& latent, const ModelConfig& cfg, std::uint64_t first_index,
                        const std::function<void(EmittedFrame)>& emit);

using FrameQueue = BoundedQueue<EmittedFrame>;
inline constexpr std::size_t kFrameQueueCapacity = 16;

}  // namespace mw
