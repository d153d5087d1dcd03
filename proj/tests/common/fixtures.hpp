#pragma once

// Small random models and sequences shared by the model, sampler and
// acceptance tests.

#include <cmath>
#include <numbers>
#include <vector>

#include "mw/model.hpp"
#include "mw/rng.hpp"

namespace mw::testing {

inline ModelConfig tiny_config(ActionMode mode = ActionMode::dual) {
    ModelConfig c;
    c.frame_w = 16;
    c.frame_h = 16;
    c.patch = 4;
    c.dim = 32;
    c.heads = 2;
    c.blocks = 2;
    c.freq_dim = 16;
    c.action = mode;
    c.init_seed = 17;
    return c;
}

inline CameraPose random_pose(Rng& r, const Intrinsics& k, double extent = 20.0) {
    CameraPose p;
    p.yaw = r.uniform(-std::numbers::pi, std::numbers::pi);
    p.position = {r.uniform(1.0, extent), r.uniform(1.0, extent), kCameraHeight};
    p.intrinsics = k;
    return p;
}

template <class T>
struct RandomSequence {
    std::vector<Tensor<T>> latents;
    std::vector<SeqChunk<T>> context;
    std::vector<SeqChunk<T>> targets;

    RandomSequence(const ModelConfig& cfg, std::size_t n_ctx, std::size_t n_tgt, Rng& r) {
        const auto k = Intrinsics::for_size(cfg.frame_w, cfg.frame_h);
        latents.reserve(n_ctx + n_tgt);
        for (std::size_t i = 0; i < n_ctx + n_tgt; ++i) {
            Tensor<T> t({static_cast<std::size_t>(cfg.tokens_per_chunk()), static_cast<std::size_t>(cfg.channels())});
            for (auto& x : t.vec()) x = static_cast<T>(r.uniform(-1, 1));
            latents.push_back(std::move(t));
        }
        for (std::size_t i = 0; i < n_ctx + n_tgt; ++i) {
            SeqChunk<T> c;
            c.latent = &latents[i];
            c.k = i < n_ctx ? 0.0 : r.uniform(0.05, 1.0);
            KeyMask km = 0;
            while (true) {
                km = static_cast<KeyMask>(r.below(64));
                if (keys_consistent(km)) break;
            }
            c.keys = km;
            for (auto& p : c.poses) p = random_pose(r, k);
            c.position = static_cast<int>(i);
            (i < n_ctx ? context : targets).push_back(c);
        }
    }
    RandomSequence(const RandomSequence&) = delete;
};

// Fills every parameter with small random values so zero-initialised
// branches are exercised.
template <class T>
void randomize(WorldModelT<T>& m, std::uint64_t seed, double scale = 0.3) {
    Rng r(seed);
    for (auto* p : m.params()) {
        for (auto& x : p->value.vec()) x = static_cast<T>(r.uniform(-scale, scale));
    }
}

}  // namespace mw::testing
