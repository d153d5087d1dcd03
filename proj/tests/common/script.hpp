#pragma once

// Scripted key timelines for session replay tests.

#include <vector>

#include "mw/rng.hpp"
#include "mw/world.hpp"

namespace mw::testing {

// Random turns plus moves that are undone on the next tick, so the camera
// never leaves a quarter cell around its spawn point (no collisions).
// Turns may be combined with nothing else.
inline std::vector<KeyMask> hover_script(std::size_t n, std::uint64_t seed) {
    static const KeyMask moves[] = {keys::forward, keys::back, keys::strafe_left, keys::strafe_right};
    static const KeyMask turns[] = {0, keys::turn_left, keys::turn_right};
    Rng r(seed, 0x736372ULL);
    std::vector<KeyMask> s;
    while (s.size() < n) {
        if (r.uniform() < 0.5 || s.size() + 2 > n) {
            s.push_back(turns[r.below(3)]);
        } else {
            const KeyMask m = moves[r.below(4)];
            s.push_back(m);
            s.push_back(invert_keys(m));
        }
    }
    return s;
}

inline std::vector<CameraPose> fold_keys(CameraPose p, const std::vector<KeyMask>& ks) {
    std::vector<CameraPose> out;
    for (KeyMask k : ks) out.push_back(p = keys_to_pose(p, k));
    return out;
}

}  // namespace mw::testing
