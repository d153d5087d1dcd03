#include "mw/memory.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mw {

using nlohmann::json;

void MemoryBank::append(ChunkRecord r) {
    if (!records_.empty() && r.capture_index <= records_.back().capture_index) {
        throw std::invalid_argument("memory bank: capture index " + std::to_string(r.capture_index) +
                                    " does not increase");
    }
    records_.push_back(std::move(r));
}

std::ptrdiff_t MemoryBank::find(std::int64_t capture_index) const {
    auto it = std::lower_bound(records_.begin(), records_.end(), capture_index,
                               [](const ChunkRecord& r, std::int64_t c) { return r.capture_index < c; });
    if (it == records_.end() || it->capture_index != capture_index) return -1;
    return it - records_.begin();
}

namespace {

double radical_inverse2(unsigned i) {
    double f = 0.5, r = 0;
    while (i) {
        if (i & 1) r += f;
        i >>= 1;
        f *= 0.5;
    }
    return r;
}

}  // namespace

const std::array<OverlapSample, kOverlapSamples>& overlap_samples() {
    // A Hammersley set per depth; depths interleave so every depth gets 21 or 22 points.
    static const auto samples = [] {
        std::array<OverlapSample, kOverlapSamples> s{};
        constexpr int nd = static_cast<int>(kOverlapDepths.size());
        for (int i = 0; i < kOverlapSamples; ++i) {
            const int d = i % nd, j = i / nd;
            const int n = (kOverlapSamples - d + nd - 1) / nd;
            s[i].u = (j + 0.5) / n;
            s[i].v = radical_inverse2(static_cast<unsigned>(j)) + 0.5 / n;
            s[i].depth = kOverlapDepths[d];
        }
        return s;
    }();
    return samples;
}

double fov_overlap(const CameraPose& a, const CameraPose& b) {
    const Mat3 ra = a.rotation(), rb = b.rotation();
    const Intrinsics& ka = a.intrinsics;
    const Intrinsics& kb = b.intrinsics;
    int inside = 0;
    for (const auto& s : overlap_samples()) {
        const double xc = (s.u * ka.width - ka.cx) / ka.fx * s.depth;
        const double yc = (s.v * ka.height - ka.cy) / ka.fy * s.depth;
        const double zc = s.depth;
        Vec3 w;
        for (int i = 0; i < 3; ++i) w[i] = ra[i * 3] * xc + ra[i * 3 + 1] * yc + ra[i * 3 + 2] * zc + a.position[i];
        const Vec3 d{w[0] - b.position[0], w[1] - b.position[1], w[2] - b.position[2]};
        Vec3 c;
        for (int j = 0; j < 3; ++j) c[j] = rb[0 * 3 + j] * d[0] + rb[1 * 3 + j] * d[1] + rb[2 * 3 + j] * d[2];
        if (c[2] <= 0) continue;
        const double px = kb.fx * c[0] / c[2] + kb.cx;
        const double py = kb.fy * c[1] / c[2] + kb.cy;
        if (px >= 0 && px < kb.width && py >= 0 && py < kb.height) ++inside;
    }
    return static_cast<double>(inside) / kOverlapSamples;
}

RetrievalOptions RetrievalOptions::for_world(int world_size, int L, int K) {
    RetrievalOptions o;
    o.L = L;
    o.K = K;
    o.sigma = world_size / 4.0;
    return o;
}

double relevance(const ChunkRecord& candidate, const CameraPose& current, const RetrievalOptions& opt) {
    const double overlap = fov_overlap(current, candidate.center_pose());
    const double decay = std::exp(-pose_distance(current, candidate.center_pose()) / opt.sigma);
    return opt.additive ? 0.5 * (overlap + decay) : overlap * decay;
}

std::vector<std::size_t> ContextSet::ordered(const MemoryBank& bank) const {
    std::vector<std::size_t> all(temporal);
    all.insert(all.end(), spatial.begin(), spatial.end());
    std::sort(all.begin(), all.end(),
              [&](std::size_t a, std::size_t b) { return bank[a].capture_index < bank[b].capture_index; });
    return all;
}

ContextSet reconstitute(const MemoryBank& bank, const CameraPose& current, const RetrievalOptions& opt) {
    if (opt.L < 0 || opt.K < 0) throw std::invalid_argument("reconstitute: negative memory size");
    ContextSet ctx;
    const std::size_t n = bank.size();
    const std::size_t nt = std::min<std::size_t>(opt.L, n);
    for (std::size_t i = n - nt; i < n; ++i) ctx.temporal.push_back(i);
    if (opt.K == 0) return ctx;

    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t i = 0; i < n - nt; ++i) {
        const double s = relevance(bank[i], current, opt);
        if (s > opt.threshold) cand.emplace_back(s, i);
    }
    // Higher score first; equal scores prefer the more recent chunk.
    std::sort(cand.begin(), cand.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return bank[a.second].capture_index > bank[b.second].capture_index;
    });
    for (std::size_t i = 0; i < cand.size() && i < static_cast<std::size_t>(opt.K); ++i) {
        ctx.spatial.push_back(cand[i].second);
        ctx.spatial_scores.push_back(cand[i].first);
    }
    return ctx;
}

Reframing reframe(const ContextSet& ctx, const MemoryBank& bank, RopeMode mode, std::int64_t current_capture) {
    Reframing r;
    r.order = ctx.ordered(bank);
    for (std::size_t i = 0; i < r.order.size(); ++i) {
        r.chunk_positions.push_back(mode == RopeMode::reframed ? static_cast<int>(i)
                                                               : static_cast<int>(bank[r.order[i]].capture_index));
    }
    r.current_position = mode == RopeMode::reframed ? static_cast<int>(r.order.size())
                                                    : static_cast<int>(current_capture);
    return r;
}

std::vector<int> fine_positions(const Reframing& r) {
    std::vector<int> out;
    auto add = [&](int p) {
        for (int f = 0; f < kChunkFrames; ++f) out.push_back(p * kChunkFrames + f);
    };
    for (int p : r.chunk_positions) add(p);
    add(r.current_position);
    return out;
}

json retrieval_record(std::int64_t current_capture, const ContextSet& ctx, const MemoryBank& bank,
                      const Reframing& r) {
    json temporal = json::array(), spatial = json::array(), order = json::array();
    for (auto i : ctx.temporal) temporal.push_back(bank[i].capture_index);
    for (auto i : ctx.spatial) spatial.push_back(bank[i].capture_index);
    for (auto i : r.order) order.push_back(bank[i].capture_index);
    return json{{"chunk", current_capture},     {"temporal", temporal},
                {"spatial", spatial},           {"scores", ctx.spatial_scores},
                {"context_order", order},       {"positions", r.chunk_positions},
                {"current_position", r.current_position}};
}

std::vector<SeqChunk<float>> context_chunks(const MemoryBank& bank, const Reframing& r) {
    std::vector<SeqChunk<float>> out;
    for (std::size_t i = 0; i < r.order.size(); ++i) {
        const ChunkRecord& rec = bank[r.order[i]];
        SeqChunk<float> c;
        c.latent = &rec.latent;
        c.k = 0.0;
        c.keys = rec.keys;
        c.poses = rec.poses;
        c.position = r.chunk_positions[i];
        out.push_back(c);
    }
    return out;
}

}  // namespace mw
