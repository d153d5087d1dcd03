#pragma once

// Reconstituted context memory: temporal (most recent) plus spatial
// (geometrically relevant) chunks, and temporal reframing of their
// positional indices.

#include <array>
#include <cstdint>
#include <vector>

#include "json.hpp"
#include "mw/model.hpp"
#include "mw/world.hpp"

namespace mw {

struct ChunkRecord {
    std::int64_t capture_index = 0;
    Tensorf latent;  // [tokens_per_chunk x C]
    std::array<CameraPose, kChunkFrames> poses{};
    KeyMask keys = 0;

    const CameraPose& center_pose() const { return poses[1]; }
};

// Append-only; capture indices strictly increase.
class MemoryBank {
public:
    void append(ChunkRecord r);
    std::size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }
    const ChunkRecord& operator[](std::size_t i) const { return records_[i]; }
    const std::vector<ChunkRecord>& records() const { return records_; }
    // Index of the record with this capture index, or -1.
    std::ptrdiff_t find(std::int64_t capture_index) const;

private:
    std::vector<ChunkRecord> records_;
};

inline constexpr int kOverlapSamples = 64;
inline constexpr std::array<double, 3> kOverlapDepths{1.0, 2.0, 4.0};

// The deterministic sample layout in a's image: (u, v) in (0,1)^2 and depth.
struct OverlapSample {
    double u, v, depth;
};
const std::array<OverlapSample, kOverlapSamples>& overlap_samples();

// Fraction of the sample points of a's frustum that b sees in front of it
// and inside its image.
double fov_overlap(const CameraPose& a, const CameraPose& b);

struct RetrievalOptions {
    int L = 3;
    int K = 1;
    double sigma = 6.0;  // distance decay; world_size / 4
    double threshold = 0.05;
    bool additive = false;  // 0.5 * (overlap + decay) instead of the product

    static RetrievalOptions for_world(int world_size, int L, int K);
};

double relevance(const ChunkRecord& candidate, const CameraPose& current, const RetrievalOptions& opt);

// Indices into the bank.
struct ContextSet {
    std::vector<std::size_t> temporal;  // ascending
    std::vector<std::size_t> spatial;   // best first
    std::vector<double> spatial_scores;

    // Temporal and spatial together, sorted by capture index.
    std::vector<std::size_t> ordered(const MemoryBank& bank) const;
    std::size_t size() const { return temporal.size() + spatial.size(); }
};

ContextSet reconstitute(const MemoryBank& bank, const CameraPose& current, const RetrievalOptions& opt);

struct Reframing {
    std::vector<std::size_t> order;      // bank indices in capture order
    std::vector<int> chunk_positions;    // one per entry of order
    int current_position = 0;
};

// Reframed mode: positions 0..n-1 in capture order, the current chunk n.
// Absolute mode: capture indices.
Reframing reframe(const ContextSet& ctx, const MemoryBank& bank, RopeMode mode, std::int64_t current_capture);

// Per-frame fine temporal indices (chunk_position * 4 + frame) of the
// context followed by the current chunk.
std::vector<int> fine_positions(const Reframing& r);

// One JSON line describing a retrieval, for the debug dump.
nlohmann::json retrieval_record(std::int64_t current_capture, const ContextSet& ctx, const MemoryBank& bank,
                                const Reframing& r);

// Context chunks in sequence order, ready for the model.
std::vector<SeqChunk<float>> context_chunks(const MemoryBank& bank, const Reframing& r);

}  // namespace mw
