#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance run: rigid transforms, a Monte-Carlo frustum overlap and an
// exhaustive top-K retrieval.

#include <algorithm>
#include <cmath>
#include <vector>

#include "mw/memory.hpp"
#include "mw/rng.hpp"

namespace mw::testing {

inline Mat3 rotation_from_axis_angle(Vec3 a, double ang) {
    const double n = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
    for (auto& x : a) x /= n;
    const double c = std::cos(ang), s = std::sin(ang), t = 1 - c;
    return {t * a[0] * a[0] + c,        t * a[0] * a[1] - s * a[2], t * a[0] * a[2] + s * a[1],
            t * a[0] * a[1] + s * a[2], t * a[1] * a[1] + c,        t * a[1] * a[2] - s * a[0],
            t * a[0] * a[2] - s * a[1], t * a[1] * a[2] + s * a[0], t * a[2] * a[2] + c};
}

inline Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
    Mat3 o{};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            for (int k = 0; k < 3; ++k) o[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
        }
    }
    return o;
}

inline Vec3 mat3_apply(const Mat3& a, const Vec3& v) {
    return {a[0] * v[0] + a[1] * v[1] + a[2] * v[2], a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
            a[6] * v[0] + a[7] * v[1] + a[8] * v[2]};
}

inline double max_abs(const Mat4<double>& a, const Mat4<double>& b) {
    double m = 0;
    for (int i = 0; i < 16; ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Dense Monte-Carlo estimate of the same quantity, written against the
// pose's forward/right vectors instead of rotation().
inline double overlap_monte_carlo(const CameraPose& a, const CameraPose& b, int n, Rng& r) {
    const Vec3 fa = a.forward(), ra = a.right(), fb = b.forward(), rb = b.right();
    const Intrinsics& ka = a.intrinsics;
    const Intrinsics& kb = b.intrinsics;
    int hit = 0;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform(0, 1), v = r.uniform(0, 1);
        const double depth = kOverlapDepths[r.below(3)];
        const double x = (u * ka.width - ka.cx) / ka.fx * depth;
        const double y = (v * ka.height - ka.cy) / ka.fy * depth;
        Vec3 p;
        for (int j = 0; j < 3; ++j) p[j] = a.position[j] + ra[j] * x + fa[j] * depth;
        p[2] -= y;  // camera y points down
        const Vec3 d{p[0] - b.position[0], p[1] - b.position[1], p[2] - b.position[2]};
        const double zc = d[0] * fb[0] + d[1] * fb[1] + d[2] * fb[2];
        const double xc = d[0] * rb[0] + d[1] * rb[1] + d[2] * rb[2];
        const double yc = -d[2];
        if (zc <= 0) continue;
        const double px = kb.fx * xc / zc + kb.cx, py = kb.fy * yc / zc + kb.cy;
        if (px >= 0 && px < kb.width && py >= 0 && py < kb.height) ++hit;
    }
    return static_cast<double>(hit) / n;
}

inline ChunkRecord make_record(std::int64_t capture, const CameraPose& centre, const ModelConfig& cfg, Rng& r) {
    ChunkRecord rec;
    rec.capture_index = capture;
    rec.latent = Tensorf({static_cast<std::size_t>(cfg.tokens_per_chunk()), static_cast<std::size_t>(cfg.channels())});
    for (auto& x : rec.latent.vec()) x = static_cast<float>(r.uniform(-1, 1));
    for (auto& p : rec.poses) p = centre;
    rec.keys = 0;
    return rec;
}

// Exhaustive top-K: repeated linear scans for the best remaining candidate.
inline std::vector<std::size_t> brute_force_spatial(const MemoryBank& bank, const CameraPose& cur,
                                             const RetrievalOptions& opt) {
    const std::size_t n = bank.size();
    const std::size_t nt = std::min<std::size_t>(opt.L, n);
    std::vector<double> score(n - nt);
    for (std::size_t i = 0; i < n - nt; ++i) {
        const CameraPose& c = bank[i].center_pose();
        const double dx = c.position[0] - cur.position[0], dy = c.position[1] - cur.position[1],
                     dz = c.position[2] - cur.position[2];
        score[i] = fov_overlap(cur, c) * std::exp(-std::sqrt(dx * dx + dy * dy + dz * dz) / opt.sigma);
    }
    std::vector<bool> used(n - nt, false);
    std::vector<std::size_t> out;
    for (int k = 0; k < opt.K; ++k) {
        std::ptrdiff_t best = -1;
        for (std::size_t i = 0; i < n - nt; ++i) {
            if (used[i] || !(score[i] > opt.threshold)) continue;
            if (best < 0 || score[i] > score[best] ||
                (score[i] == score[best] && bank[i].capture_index > bank[best].capture_index)) {
                best = static_cast<std::ptrdiff_t>(i);
            }
        }
        if (best < 0) break;
        used[best] = true;
        out.push_back(static_cast<std::size_t>(best));
    }
    return out;
}

}  // namespace mw::testing
