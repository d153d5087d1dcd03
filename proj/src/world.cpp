#include "mw/world.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "json.hpp"

namespace mw {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double deg(double d) { return d * kPi / 180.0; }

}  // namespace

bool keys_consistent(KeyMask k) {
    const bool fb = (k & keys::forward) && (k & keys::back);
    const bool lr = (k & keys::strafe_left) && (k & keys::strafe_right);
    const bool tt = (k & keys::turn_left) && (k & keys::turn_right);
    return !fb && !lr && !tt && (k & ~keys::all) == 0;
}

KeyMask invert_keys(KeyMask k) {
    KeyMask out = 0;
    if (k & keys::forward) out |= keys::back;
    if (k & keys::back) out |= keys::forward;
    if (k & keys::strafe_left) out |= keys::strafe_right;
    if (k & keys::strafe_right) out |= keys::strafe_left;
    if (k & keys::turn_left) out |= keys::turn_right;
    if (k & keys::turn_right) out |= keys::turn_left;
    return out;
}

std::string keys_to_string(KeyMask k) {
    if (k == 0) return "idle";
    std::string s;
    const char* names[] = {"forward", "back", "strafe_left", "strafe_right", "turn_left", "turn_right"};
    for (int b = 0; b < 6; ++b) {
        if (k & (1 << b)) {
            if (!s.empty()) s += "|";
            s += names[b];
        }
    }
    return s;
}

Intrinsics Intrinsics::for_size(int w, int h) {
    Intrinsics k;
    k.width = w;
    k.height = h;
    k.fx = k.fy = w / 2.0;
    k.cx = w / 2.0;
    k.cy = h / 2.0;
    return k;
}

Vec3 CameraPose::forward() const { return {std::cos(yaw), std::sin(yaw), 0.0}; }
Vec3 CameraPose::right() const { return {std::sin(yaw), -std::cos(yaw), 0.0}; }

Mat3 CameraPose::rotation() const {
    const Vec3 r = right(), f = forward();
    // Columns: right, down, forward.
    return {r[0], 0.0, f[0], r[1], 0.0, f[1], r[2], -1.0, f[2]};
}

std::array<double, 12> CameraPose::as_rt() const {
    const Mat3 r = rotation();
    return {r[0], r[1], r[2], position[0], r[3], r[4], r[5], position[1], r[6], r[7], r[8], position[2]};
}

CameraPose CameraPose::from_rt(const std::array<double, 12>& rt, const Intrinsics& k) {
    CameraPose p;
    p.yaw = std::atan2(rt[6], rt[2]);
    p.position = {rt[3], rt[7], rt[11]};
    p.intrinsics = k;
    return p;
}

double wrap_angle(double a) {
    a = std::fmod(a + kPi, 2 * kPi);
    if (a < 0) a += 2 * kPi;
    return a - kPi;
}

double pose_distance(const CameraPose& a, const CameraPose& b) {
    const double dx = a.position[0] - b.position[0], dy = a.position[1] - b.position[1],
                 dz = a.position[2] - b.position[2];
    return std::sqrt(dx * dx + dy * dy + dz * dz);
}

double yaw_gap(const CameraPose& a, const CameraPose& b) { return std::abs(wrap_angle(a.yaw - b.yaw)); }

// ---------------------------------------------------------------- world

namespace {

bool connected(int n, const std::vector<std::uint8_t>& occ) {
    int total = 0, start = -1;
    for (int c = 0; c < n * n; ++c) {
        if (!occ[c]) {
            ++total;
            if (start < 0) start = c;
        }
    }
    if (total == 0) return false;
    std::vector<std::uint8_t> seen(occ.size(), 0);
    std::vector<int> stack{start};
    seen[start] = 1;
    int count = 0;
    while (!stack.empty()) {
        const int c = stack.back();
        stack.pop_back();
        ++count;
        const int i = c % n, j = c / n;
        const int nb[4][2] = {{i + 1, j}, {i - 1, j}, {i, j + 1}, {i, j - 1}};
        for (auto& q : nb) {
            if (q[0] < 0 || q[1] < 0 || q[0] >= n || q[1] >= n) continue;
            const int d = q[1] * n + q[0];
            if (!occ[d] && !seen[d]) {
                seen[d] = 1;
                stack.push_back(d);
            }
        }
    }
    return count == total;
}

}  // namespace

GridWorld GridWorld::from_occupancy(std::uint64_t seed, int size, std::vector<std::uint8_t> occ) {
    if (size < 3) throw std::invalid_argument("world size must be at least 3");
    if (occ.size() != static_cast<std::size_t>(size) * size) throw std::invalid_argument("occupancy size mismatch");
    GridWorld w;
    w.seed_ = seed;
    w.size_ = size;
    w.occ_ = std::move(occ);
    for (int k = 0; k < size; ++k) {
        w.occ_[k] = w.occ_[(size - 1) * size + k] = 1;
        w.occ_[k * size] = w.occ_[k * size + size - 1] = 1;
    }
    for (auto& c : w.occ_) c = c ? 1 : 0;
    return w;
}

GridWorld GridWorld::generate(std::uint64_t seed, int size) {
    if (size < 4) throw std::invalid_argument("world size must be at least 4");
    Rng rng(seed, 0x574f524cULL);
    std::vector<std::uint8_t> occ(static_cast<std::size_t>(size) * size, 0);
    GridWorld w = from_occupancy(seed, size, occ);
    const int interior = (size - 2) * (size - 2);
    const int target = static_cast<int>(interior * 0.24);
    int walls = 0;
    // Short wall segments; a cell is kept only if the free region stays connected.
    for (int attempt = 0; attempt < interior * 8 && walls < target; ++attempt) {
        int i = 1 + static_cast<int>(rng.below(size - 2));
        int j = 1 + static_cast<int>(rng.below(size - 2));
        const int dir = static_cast<int>(rng.below(4));
        const int len = 1 + static_cast<int>(rng.below(4));
        const int di[4] = {1, -1, 0, 0}, dj[4] = {0, 0, 1, -1};
        for (int s = 0; s < len && walls < target; ++s, i += di[dir], j += dj[dir]) {
            if (i < 1 || j < 1 || i > size - 2 || j > size - 2) break;
            auto& c = w.occ_[j * size + i];
            if (c) continue;
            c = 1;
            if (connected(size, w.occ_)) {
                ++walls;
            } else {
                c = 0;
                break;
            }
        }
    }
    return w;
}

bool GridWorld::wall(int i, int j) const {
    if (i < 0 || j < 0 || i >= size_ || j >= size_) return true;
    return occ_[static_cast<std::size_t>(j) * size_ + i] != 0;
}

bool GridWorld::free_at(double x, double y) const {
    return !wall(static_cast<int>(std::floor(x)), static_cast<int>(std::floor(y)));
}

Rgb GridWorld::palette(int i, int j) const {
    const std::uint64_t h =
        splitmix64(seed_ ^ splitmix64(0x50414cULL + static_cast<std::uint64_t>(i) * 0x1F1F1F1FULL +
                                      static_cast<std::uint64_t>(j) * 0x9E3779B1ULL));
    auto chan = [&](int shift) { return static_cast<std::uint8_t>(64 + ((h >> shift) & 0xFF) * 191 / 255); };
    return {chan(0), chan(8), chan(16)};
}

double GridWorld::free_fraction_interior() const {
    int free = 0;
    for (int j = 1; j < size_ - 1; ++j) {
        for (int i = 1; i < size_ - 1; ++i) free += wall(i, j) ? 0 : 1;
    }
    return static_cast<double>(free) / ((size_ - 2) * (size_ - 2));
}

bool GridWorld::free_connected() const { return connected(size_, occ_); }

std::vector<std::array<int, 2>> GridWorld::free_cells() const {
    std::vector<std::array<int, 2>> out;
    for (int j = 0; j < size_; ++j) {
        for (int i = 0; i < size_; ++i) {
            if (!wall(i, j)) out.push_back({i, j});
        }
    }
    return out;
}

// ---------------------------------------------------------------- render

double wall_shade(double euclid_dist, bool x_side) {
    return (x_side ? 1.0 : 0.78) / (1.0 + 0.08 * euclid_dist * euclid_dist);
}

ColumnHit cast_column(const GridWorld& w, const CameraPose& pose, int column) {
    const Intrinsics& k = pose.intrinsics;
    const double a = (column + 0.5 - k.cx) / k.fx;
    const Vec3 f = pose.forward(), r = pose.right();
    const double dx = f[0] + a * r[0], dy = f[1] + a * r[1];
    const double px = pose.position[0], py = pose.position[1];
    int mx = static_cast<int>(std::floor(px)), my = static_cast<int>(std::floor(py));
    const double inf = std::numeric_limits<double>::infinity();
    const double ddx = dx == 0 ? inf : std::abs(1.0 / dx);
    const double ddy = dy == 0 ? inf : std::abs(1.0 / dy);
    const int sx = dx < 0 ? -1 : 1, sy = dy < 0 ? -1 : 1;
    double side_x = dx < 0 ? (px - mx) * ddx : (mx + 1.0 - px) * ddx;
    double side_y = dy < 0 ? (py - my) * ddy : (my + 1.0 - py) * ddy;
    ColumnHit hit;
    for (int guard = 0; guard < 4 * w.size() + 4; ++guard) {
        if (side_x < side_y) {
            side_x += ddx;
            mx += sx;
            hit.x_side = true;
        } else {
            side_y += ddy;
            my += sy;
            hit.x_side = false;
        }
        if (w.wall(mx, my)) break;
    }
    hit.cell_i = mx;
    hit.cell_j = my;
    hit.perp_dist = hit.x_side ? side_x - ddx : side_y - ddy;
    hit.euclid_dist = hit.perp_dist * std::sqrt(1.0 + a * a);
    return hit;
}

Frame render(const GridWorld& w, const CameraPose& pose) {
    if (!w.free_at(pose.position[0], pose.position[1])) {
        throw std::invalid_argument("render: camera centre is inside a wall");
    }
    const Intrinsics& k = pose.intrinsics;
    Frame fr;
    fr.width = k.width;
    fr.height = k.height;
    fr.rgb.assign(static_cast<std::size_t>(k.width) * k.height * 3, 0);
    const double eye = pose.position[2];
    for (int u = 0; u < k.width; ++u) {
        const ColumnHit hit = cast_column(w, pose, u);
        const Rgb base = w.palette(hit.cell_i, hit.cell_j);
        const double s = wall_shade(hit.euclid_dist, hit.x_side);
        const Rgb wc{static_cast<std::uint8_t>(std::lround(base.r * s)),
                     static_cast<std::uint8_t>(std::lround(base.g * s)),
                     static_cast<std::uint8_t>(std::lround(base.b * s))};
        for (int v = 0; v < k.height; ++v) {
            const double slope = (v + 0.5 - k.cy) / k.fy;  // camera y (down) per unit depth
            const double z = eye - slope * hit.perp_dist;
            Rgb c;
            if (z >= 0.0 && z <= 1.0) {
                c = wc;
            } else {
                c = slope < 0 ? kCeilingColor : kFloorColor;
            }
            const std::size_t o = (static_cast<std::size_t>(v) * k.width + u) * 3;
            fr.rgb[o] = c.r;
            fr.rgb[o + 1] = c.g;
            fr.rgb[o + 2] = c.b;
        }
    }
    return fr;
}

// ---------------------------------------------------------------- motion

CameraPose keys_to_pose(const CameraPose& pose, KeyMask k) {
    const double turn = ((k & keys::turn_left) ? 1.0 : 0.0) - ((k & keys::turn_right) ? 1.0 : 0.0);
    const double fwd = ((k & keys::forward) ? 1.0 : 0.0) - ((k & keys::back) ? 1.0 : 0.0);
    const double side = ((k & keys::strafe_right) ? 1.0 : 0.0) - ((k & keys::strafe_left) ? 1.0 : 0.0);
    const double dyaw = turn * deg(kTurnStepDeg);
    // Translation follows the mid-step heading so that an action and its
    // inverse cancel exactly.
    const double mid = pose.yaw + 0.5 * dyaw;
    CameraPose out = pose;
    if (fwd != 0.0 || side != 0.0) {
        const double c = std::cos(mid), s = std::sin(mid);
        out.position[0] += kMoveStep * (fwd * c + side * s);
        out.position[1] += kMoveStep * (fwd * s - side * c);
    }
    out.yaw = pose.yaw + dyaw;
    return out;
}

bool position_clear(const GridWorld& w, double x, double y) {
    const int i0 = static_cast<int>(std::floor(x - kCollisionMargin));
    const int i1 = static_cast<int>(std::floor(x + kCollisionMargin));
    const int j0 = static_cast<int>(std::floor(y - kCollisionMargin));
    const int j1 = static_cast<int>(std::floor(y + kCollisionMargin));
    for (int j = j0; j <= j1; ++j) {
        for (int i = i0; i <= i1; ++i) {
            if (w.wall(i, j)) return false;
        }
    }
    return true;
}

CameraPose step_pose(const GridWorld& w, const CameraPose& pose, KeyMask k) {
    CameraPose want = keys_to_pose(pose, k);
    const double x0 = pose.position[0], y0 = pose.position[1];
    const double x1 = want.position[0], y1 = want.position[1];
    if (position_clear(w, x1, y1)) return want;
    // Blocked: keep whichever single-axis component is clear, else stay.
    if (x1 != x0 && position_clear(w, x1, y0)) {
        want.position[1] = y0;
    } else if (y1 != y0 && position_clear(w, x0, y1)) {
        want.position[0] = x0;
    } else {
        want.position[0] = x0;
        want.position[1] = y0;
    }
    return want;
}

KeyMask pose_to_keys(const CameraPose& prev, const CameraPose& next) {
    const double dyaw = wrap_angle(next.yaw - prev.yaw);
    const double mid = prev.yaw + 0.5 * dyaw;
    const double dx = next.position[0] - prev.position[0], dy = next.position[1] - prev.position[1];
    const double fwd = dx * std::cos(mid) + dy * std::sin(mid);
    const double side = dx * std::sin(mid) - dy * std::cos(mid);
    KeyMask k = 0;
    if (fwd > kMoveThreshold) k |= keys::forward;
    if (fwd < -kMoveThreshold) k |= keys::back;
    if (side > kMoveThreshold) k |= keys::strafe_right;
    if (side < -kMoveThreshold) k |= keys::strafe_left;
    if (dyaw > deg(kTurnThresholdDeg)) k |= keys::turn_left;
    if (dyaw < -deg(kTurnThresholdDeg)) k |= keys::turn_right;
    return k;
}

// ---------------------------------------------------------------- trajectories

std::string to_string(TrajectoryKind k) {
    switch (k) {
        case TrajectoryKind::random_walk: return "random_walk";
        case TrajectoryKind::loop: return "loop";
        case TrajectoryKind::out_and_back: return "out_and_back";
    }
    return "?";
}

TrajectoryKind trajectory_kind_from_string(const std::string& s) {
    if (s == "random_walk") return TrajectoryKind::random_walk;
    if (s == "loop") return TrajectoryKind::loop;
    if (s == "out_and_back") return TrajectoryKind::out_and_back;
    throw std::invalid_argument("unknown trajectory kind '" + s + "'");
}

namespace {

CameraPose spawn(const GridWorld& w, Rng& rng, const Intrinsics& k) {
    const auto cells = w.free_cells();
    const auto& c = cells[rng.below(cells.size())];
    CameraPose p;
    p.position = {c[0] + 0.5, c[1] + 0.5, kCameraHeight};
    p.yaw = deg(90.0) * static_cast<double>(rng.below(4));
    p.intrinsics = k;
    return p;
}

}  // namespace

CameraPose spawn_pose(const GridWorld& w, std::uint64_t seed, const Intrinsics& k) {
    Rng r(seed, 0x737061776eULL);
    return spawn(w, r, k);
}

namespace {

KeyMask sample_action(Rng& rng, bool forward_bias) {
    static const KeyMask table[] = {
        keys::forward, keys::forward, keys::forward, keys::forward | keys::turn_left,
        keys::forward | keys::turn_right, keys::turn_left, keys::turn_right, keys::back,
        keys::strafe_left, keys::strafe_right, keys::forward | keys::strafe_left,
        keys::forward | keys::strafe_right, 0};
    const std::size_t n = sizeof(table) / sizeof(table[0]);
    if (forward_bias && rng.uniform() < 0.35) return keys::forward;
    return table[rng.below(n)];
}

// Random per-frame actions with persistence; colliding actions are resampled.
void random_actions(const GridWorld& w, Episode& ep, int from, int to, Rng& rng, bool forward_bias) {
    KeyMask prev = keys::forward;
    for (int t = from; t < to; ++t) {
        const CameraPose& p = ep.poses.back();
        KeyMask a = rng.uniform() < 0.6 ? prev : sample_action(rng, forward_bias);
        CameraPose next;
        int tries = 0;
        while (true) {
            next = keys_to_pose(p, a);
            if (position_clear(w, next.position[0], next.position[1])) break;
            a = ++tries < 16 ? sample_action(rng, forward_bias) : keys::turn_left;
        }
        ep.poses.push_back(next);
        ep.actions.push_back(a);
        prev = a;
    }
}

// Cell-level walk made of 4-frame advances and 6-frame quarter turns,
// followed by a shortest path back to the start cell and heading.
bool loop_actions(const GridWorld& w, const CameraPose& start, int frames, Rng& rng, int outgoing,
                  std::vector<KeyMask>& out) {
    out.clear();
    const int n = w.size();
    int ci = static_cast<int>(std::floor(start.position[0]));
    int cj = static_cast<int>(std::floor(start.position[1]));
    const int si = ci, sj = cj;
    const int start_dir = static_cast<int>(std::lround(wrap_angle(start.yaw) / deg(90.0)) + 4) % 4;
    int dir = start_dir;
    const int di[4] = {1, 0, -1, 0}, dj[4] = {0, 1, 0, -1};  // yaw 0, 90, 180, 270
    auto turn_to = [&](int target) {
        const int diff = (target - dir + 4) % 4;
        if (diff == 1) out.insert(out.end(), 6, keys::turn_left);
        if (diff == 3) out.insert(out.end(), 6, keys::turn_right);
        if (diff == 2) out.insert(out.end(), 12, keys::turn_left);
        dir = target;
    };
    auto advance = [&]() {
        out.insert(out.end(), 4, keys::forward);
        ci += di[dir];
        cj += dj[dir];
    };
    for (int m = 0; m < outgoing; ++m) {
        const double u = rng.uniform();
        const bool ahead_free = !w.wall(ci + di[dir], cj + dj[dir]);
        if (u < 0.65 && ahead_free) {
            advance();
        } else {
            turn_to((dir + (rng.uniform() < 0.5 ? 1 : 3)) % 4);
        }
    }
    // BFS back to the start cell.
    std::vector<int> parent(static_cast<std::size_t>(n) * n, -1);
    std::deque<int> q{sj * n + si};
    parent[sj * n + si] = sj * n + si;
    while (!q.empty()) {
        const int c = q.front();
        q.pop_front();
        for (int d = 0; d < 4; ++d) {
            const int ni = c % n + di[d], nj = c / n + dj[d];
            if (w.wall(ni, nj)) continue;
            const int nc = nj * n + ni;
            if (parent[nc] < 0) {
                parent[nc] = c;
                q.push_back(nc);
            }
        }
    }
    int c = cj * n + ci;
    while (c != sj * n + si) {
        const int p = parent[c];
        const int pi = p % n - c % n, pj = p / n - c / n;
        int d = 0;
        while (di[d] != pi || dj[d] != pj) ++d;
        turn_to(d);
        advance();
        c = p;
    }
    turn_to(start_dir);
    return static_cast<int>(out.size()) <= frames;
}

}  // namespace

Episode make_trajectory(const GridWorld& w, TrajectoryKind kind, int length, std::uint64_t seed,
                        const Intrinsics& k) {
    if (length <= 0 || length % kChunkFrames != 0) {
        throw std::invalid_argument("trajectory length must be a positive multiple of 4");
    }
    Rng rng(seed, 0x5452414aULL);
    Episode ep;
    ep.kind = kind;
    ep.world_seed = w.seed();
    ep.world_size = w.size();
    ep.traj_seed = seed;
    ep.poses.push_back(spawn(w, rng, k));
    ep.actions.push_back(0);
    switch (kind) {
        case TrajectoryKind::random_walk:
            random_actions(w, ep, 1, length, rng, false);
            break;
        case TrajectoryKind::out_and_back: {
            const int mid = length / 2;
            random_actions(w, ep, 1, mid, rng, true);
            ep.poses.push_back(ep.poses.back());
            ep.actions.push_back(0);
            for (int i = 1; i < length - mid; ++i) {
                const KeyMask a = invert_keys(ep.actions[mid - i]);
                const CameraPose stepped = keys_to_pose(ep.poses.back(), a);
                // Store the mirrored outgoing pose itself so revisit frames are bit-identical.
                const CameraPose& mirror = ep.poses[mid - 1 - i];
                if (pose_distance(stepped, mirror) > 1e-9 || yaw_gap(stepped, mirror) > 1e-9) {
                    throw std::logic_error("inverse action did not retrace the outgoing path");
                }
                ep.poses.push_back(mirror);
                ep.actions.push_back(a);
            }
            break;
        }
        case TrajectoryKind::loop: {
            std::vector<KeyMask> plan;
            int outgoing = std::max(1, (length - 1) / 10);
            Rng attempt = rng.fork(1);
            while (!loop_actions(w, ep.poses[0], length - 1, attempt, outgoing, plan)) {
                if (--outgoing < 0) break;
                attempt = rng.fork(100 + static_cast<std::uint64_t>(outgoing));
            }
            if (static_cast<int>(plan.size()) > length - 1) plan.clear();
            plan.resize(static_cast<std::size_t>(length - 1), 0);
            for (KeyMask a : plan) {
                ep.poses.push_back(keys_to_pose(ep.poses.back(), a));
                ep.actions.push_back(a);
            }
            break;
        }
    }
    for (const auto& p : ep.poses) {
        if (!position_clear(w, p.position[0], p.position[1])) {
            throw std::logic_error("trajectory generator produced a colliding pose");
        }
    }
    return ep;
}

void render_episode(const GridWorld& w, Episode& ep) {
    ep.frames.clear();
    ep.frames.reserve(ep.poses.size());
    for (const auto& p : ep.poses) ep.frames.push_back(render(w, p));
}

// ---------------------------------------------------------------- IO

void write_episode(const fs::path& dir, const Episode& ep) {
    fs::create_directories(dir);
    if (ep.frames.size() != ep.poses.size()) throw std::invalid_argument("episode frames not rendered");
    const Intrinsics& k = ep.poses.front().intrinsics;
    {
        std::ofstream f(dir / "frames.bin", std::ios::binary);
        for (const auto& fr : ep.frames) f.write(reinterpret_cast<const char*>(fr.rgb.data()), static_cast<std::streamsize>(fr.rgb.size()));
        if (!f) throw std::runtime_error("cannot write frames in " + dir.string());
    }
    {
        std::ofstream f(dir / "meta.jsonl");
        for (std::size_t t = 0; t < ep.poses.size(); ++t) {
            const auto& p = ep.poses[t];
            json j{{"frame", t},
                   {"pose", p.as_rt()},
                   {"yaw", p.yaw},
                   {"intrinsics", {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}}},
                   {"action", ep.actions[t]},
                   {"kind", to_string(ep.kind)}};
            f << j.dump() << "\n";
        }
    }
    json e{{"kind", to_string(ep.kind)}, {"world_seed", ep.world_seed}, {"world_size", ep.world_size},
           {"traj_seed", ep.traj_seed}, {"length", ep.poses.size()}, {"width", k.width}, {"height", k.height}};
    std::ofstream f(dir / "episode.json");
    f << e.dump(2) << "\n";
}

Episode read_episode(const fs::path& dir) {
    std::ifstream ef(dir / "episode.json");
    if (!ef) throw std::runtime_error("missing episode.json in " + dir.string());
    const json e = json::parse(ef);
    Episode ep;
    ep.kind = trajectory_kind_from_string(e.at("kind"));
    ep.world_seed = e.at("world_seed");
    ep.world_size = e.at("world_size");
    ep.traj_seed = e.at("traj_seed");
    const std::size_t n = e.at("length");
    std::ifstream mf(dir / "meta.jsonl");
    std::string line;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        const auto& ij = j.at("intrinsics");
        Intrinsics k;
        k.fx = ij.at("fx");
        k.fy = ij.at("fy");
        k.cx = ij.at("cx");
        k.cy = ij.at("cy");
        k.width = ij.at("width");
        k.height = ij.at("height");
        CameraPose p = CameraPose::from_rt(j.at("pose").get<std::array<double, 12>>(), k);
        p.yaw = j.at("yaw");
        ep.poses.push_back(p);
        ep.actions.push_back(j.at("action").get<int>());
    }
    if (ep.poses.size() != n) throw std::runtime_error("meta.jsonl length mismatch in " + dir.string());
    const int w = e.at("width"), h = e.at("height");
    const std::size_t fb = static_cast<std::size_t>(w) * h * 3;
    std::ifstream ff(dir / "frames.bin", std::ios::binary);
    for (std::size_t t = 0; t < n; ++t) {
        Frame fr{w, h, std::vector<std::uint8_t>(fb)};
        ff.read(reinterpret_cast<char*>(fr.rgb.data()), static_cast<std::streamsize>(fb));
        if (!ff) throw std::runtime_error("frames.bin truncated in " + dir.string());
        ep.frames.push_back(std::move(fr));
    }
    return ep;
}

void write_dataset_manifest(const fs::path& root, const std::vector<DatasetEntry>& entries,
                            const std::string& config_hash) {
    json eps = json::array();
    for (const auto& e : entries) eps.push_back({{"dir", e.dir}, {"split", e.split}});
    json m{{"episodes", eps}, {"config_hash", config_hash}};
    fs::create_directories(root);
    std::ofstream f(root / "dataset.json");
    f << m.dump(2) << "\n";
}

std::vector<DatasetEntry> read_dataset_manifest(const fs::path& root) {
    std::ifstream f(root / "dataset.json");
    if (!f) throw std::runtime_error("missing dataset.json in " + root.string());
    const json m = json::parse(f);
    std::vector<DatasetEntry> out;
    for (const auto& e : m.at("episodes")) out.push_back({e.at("dir"), e.at("split")});
    return out;
}

}  // namespace mw
