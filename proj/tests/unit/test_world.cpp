#include <cmath>
#include <filesystem>
#include <numbers>

#include "doctest.h"
#include "mw/world.hpp"

using namespace mw;

namespace {

constexpr double kPi = std::numbers::pi;

GridWorld open_world(int n) {
    return GridWorld::from_occupancy(3, n, std::vector<std::uint8_t>(static_cast<std::size_t>(n) * n, 0));
}

CameraPose at(double x, double y, double yaw, int w = 64) {
    CameraPose p;
    p.position = {x, y, kCameraHeight};
    p.yaw = yaw;
    p.intrinsics = Intrinsics::for_size(w, w);
    return p;
}

bool boundary_walled(const GridWorld& w) {
    for (int k = 0; k < w.size(); ++k) {
        if (!w.wall(k, 0) || !w.wall(k, w.size() - 1) || !w.wall(0, k) || !w.wall(w.size() - 1, k)) return false;
    }
    return true;
}

// Independent flood fill over free cells.
bool flood_connected(const GridWorld& w) {
    const auto cells = w.free_cells();
    if (cells.empty()) return false;
    std::vector<int> seen(static_cast<std::size_t>(w.size()) * w.size(), 0);
    std::vector<std::array<int, 2>> todo{cells[0]};
    seen[cells[0][1] * w.size() + cells[0][0]] = 1;
    std::size_t reached = 0;
    while (!todo.empty()) {
        auto c = todo.back();
        todo.pop_back();
        ++reached;
        for (auto d : {std::array<int, 2>{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
            const int i = c[0] + d[0], j = c[1] + d[1];
            if (!w.wall(i, j) && !seen[j * w.size() + i]) {
                seen[j * w.size() + i] = 1;
                todo.push_back({i, j});
            }
        }
    }
    return reached == cells.size();
}

}  // namespace

TEST_CASE("world generation: determinism and invariants") {
    CHECK(GridWorld::generate(42).occupancy() == GridWorld::generate(42).occupancy());
    CHECK(GridWorld::generate(42).occupancy() != GridWorld::generate(43).occupancy());
    for (std::uint64_t s = 0; s < 100; ++s) {
        auto w = GridWorld::generate(s);
        REQUIRE(boundary_walled(w));
        REQUIRE(flood_connected(w));
        REQUIRE(w.free_fraction_interior() >= 0.6);
    }
    auto small = GridWorld::generate(5, 8);
    CHECK(small.free_fraction_interior() >= 0.6);
    CHECK(flood_connected(small));
}

TEST_CASE("render: wall one cell ahead matches analytic ray-wall intersection") {
    std::vector<std::uint8_t> occ(64, 0);
    for (int j = 0; j < 8; ++j) occ[j * 8 + 4] = 1;
    auto w = GridWorld::from_occupancy(9, 8, occ);
    const auto pose = at(3.0, 3.5, 0.0);
    const Frame f = render(w, pose);
    const auto& k = pose.intrinsics;
    const int mid_row = k.height / 2;
    std::vector<int> bright(k.width);
    for (int u = 0; u < k.width; ++u) {
        const double a = (u + 0.5 - k.cx) / k.fx;
        const double y = 3.5 - a;  // right vector is -y at yaw 0
        const Rgb base = w.palette(4, static_cast<int>(std::floor(y)));
        const double s = wall_shade(std::sqrt(1 + a * a), true);
        const Rgb px = f.pixel(u, mid_row);
        CHECK(px.r == std::lround(base.r * s));
        CHECK(px.g == std::lround(base.g * s));
        CHECK(px.b == std::lround(base.b * s));
        bright[u] = px.r + px.g + px.b;
        // Wall spans rows with |slope| * depth <= 0.5.
        int wall_rows = 0;
        for (int v = 0; v < k.height; ++v) wall_rows += (f.pixel(u, v) == px) ? 1 : 0;
        CHECK(wall_rows == 32);
    }
    // Shading falls off with distance from the centre columns (per palette cell).
    const double s_center = wall_shade(std::sqrt(1 + std::pow(0.5 / k.fx, 2)), true);
    for (int u = 0; u < k.width; ++u) {
        const double a = (u + 0.5 - k.cx) / k.fx;
        CHECK(wall_shade(std::sqrt(1 + a * a), true) <= s_center);
    }
    CHECK(render(w, pose) == f);
    CHECK_THROWS_AS(render(w, at(4.5, 3.5, 0.0)), std::invalid_argument);
}

TEST_CASE("render: turning around in an x-symmetric corridor mirrors the columns") {
    const int n = 9;
    std::vector<std::uint8_t> occ(n * n, 1);
    for (int i = 1; i < n - 1; ++i) occ[4 * n + i] = 0;
    occ[3 * n + 2] = occ[3 * n + 6] = 0;  // side openings, symmetric about x = 4.5, only on one side
    auto w = GridWorld::from_occupancy(1, n, occ);
    const Frame a = render(w, at(4.5, 4.5, 0.0));
    const Frame b = render(w, at(4.5, 4.5, kPi));
    auto heights = [](const Frame& f, const GridWorld& world, const CameraPose& p) {
        std::vector<double> h;
        for (int u = 0; u < f.width; ++u) h.push_back(cast_column(world, p, u).perp_dist);
        return h;
    };
    const auto ha = heights(a, w, at(4.5, 4.5, 0.0));
    const auto hb = heights(b, w, at(4.5, 4.5, kPi));
    bool differs_unmirrored = false;
    for (int u = 0; u < a.width; ++u) {
        CHECK(std::abs(ha[u] - hb[a.width - 1 - u]) < 1e-9);
        differs_unmirrored = differs_unmirrored || std::abs(ha[u] - hb[u]) > 1e-6;
    }
    CHECK(differs_unmirrored);
}

TEST_CASE("step_pose: idle, inverse, collision") {
    auto w = open_world(8);
    const auto p = at(3.5, 3.5, 0.3);
    const auto idle = step_pose(w, p, 0);
    CHECK(idle.position == p.position);
    CHECK(idle.yaw == p.yaw);
    const auto back = step_pose(w, step_pose(w, p, keys::forward), keys::back);
    CHECK(pose_distance(back, p) < 1e-9);
    const auto moved = step_pose(w, p, keys::forward);
    CHECK(std::abs(pose_distance(moved, p) - 0.25) < 1e-12);

    std::vector<std::uint8_t> occ(64, 0);
    occ[3 * 8 + 4] = 1;
    auto wall = GridWorld::from_occupancy(2, 8, occ);
    const auto near = at(3.8, 3.5, 0.0);
    const auto blocked = step_pose(wall, near, keys::forward);
    CHECK(blocked.position == near.position);
    CHECK(blocked.yaw == near.yaw);
    CHECK(position_clear(wall, blocked.position[0], blocked.position[1]));
    // keys_to_pose ignores walls.
    CHECK(keys_to_pose(near, keys::forward).position[0] == doctest::Approx(4.05));
}

TEST_CASE("keys_to_pose mirrors step_pose without collision") {
    const auto p = at(5.2, 6.1, -1.1);
    CHECK(keys_to_pose(p, 0).position == p.position);
    for (KeyMask k = 0; k < 64; ++k) {
        if (!keys_consistent(k)) continue;
        const auto q = keys_to_pose(keys_to_pose(p, k), invert_keys(k));
        CHECK(pose_distance(q, p) < 1e-9);
        CHECK(yaw_gap(q, p) < 1e-12);
    }
}

TEST_CASE("pose_to_keys thresholds and lattice round trip") {
    const auto p = at(3.5, 3.5, 0.7);
    CHECK(pose_to_keys(p, p) == 0);
    CHECK(pose_to_keys(p, keys_to_pose(p, keys::forward)) == keys::forward);
    Rng rng(77);
    auto w = GridWorld::generate(11);
    auto cells = w.free_cells();
    CameraPose cur = at(cells[0][0] + 0.5, cells[0][1] + 0.5, 0.0);
    int checked = 0;
    while (checked < 500) {
        KeyMask k = static_cast<KeyMask>(rng.below(64));
        if (!keys_consistent(k)) continue;
        const auto next = step_pose(w, cur, k);
        if (next.position != keys_to_pose(cur, k).position) continue;  // collided; not a lattice step
        REQUIRE(pose_to_keys(cur, next) == k);
        cur = next;
        ++checked;
    }
}

TEST_CASE("trajectories: out_and_back, random_walk, loop") {
    auto w = GridWorld::generate(8);
    const auto k = Intrinsics::for_size(32, 32);
    for (std::uint64_t s = 0; s < 20; ++s) {
        auto ob = make_trajectory(w, TrajectoryKind::out_and_back, 64, s, k);
        REQUIRE(ob.length() == 64);
        for (int t = 32; t < 64; ++t) {
            CHECK(pose_distance(ob.poses[t], ob.poses[63 - t]) < 1e-9);
            CHECK(yaw_gap(ob.poses[t], ob.poses[63 - t]) < 1e-9);
        }
        for (std::size_t t = 1; t < ob.length(); ++t) {
            CHECK(pose_to_keys(ob.poses[t - 1], ob.poses[t]) == ob.actions[t]);
        }
        auto rw = make_trajectory(w, TrajectoryKind::random_walk, 64, s, k);
        for (const auto& p : rw.poses) CHECK(w.free_at(p.position[0], p.position[1]));
        for (std::size_t t = 1; t < rw.length(); ++t) {
            CHECK(pose_distance(step_pose(w, rw.poses[t - 1], rw.actions[t]), rw.poses[t]) < 1e-12);
        }
        auto lp = make_trajectory(w, TrajectoryKind::loop, 64, s, k);
        CHECK(pose_distance(lp.poses.front(), lp.poses.back()) <= kMoveStep + 1e-9);
        CHECK(yaw_gap(lp.poses.front(), lp.poses.back()) <= kTurnStepDeg * kPi / 180 + 1e-9);
    }
    CHECK_THROWS_AS(make_trajectory(w, TrajectoryKind::loop, 30, 1, k), std::invalid_argument);
}

TEST_CASE("out_and_back revisit frames are bit-identical") {
    auto w = GridWorld::generate(21);
    auto ep = make_trajectory(w, TrajectoryKind::out_and_back, 48, 5, Intrinsics::for_size(32, 32));
    render_episode(w, ep);
    for (std::size_t t = 24; t < 48; ++t) CHECK(ep.frames[t] == ep.frames[47 - t]);
}

TEST_CASE("episode and dataset IO round trip") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "mw_episode_test";
    fs::remove_all(dir);
    auto w = GridWorld::generate(4);
    auto ep = make_trajectory(w, TrajectoryKind::loop, 16, 9, Intrinsics::for_size(16, 16));
    render_episode(w, ep);
    write_episode(dir / "ep0", ep);
    auto back = read_episode(dir / "ep0");
    CHECK(back.kind == ep.kind);
    CHECK(back.world_seed == ep.world_seed);
    CHECK(back.actions == ep.actions);
    CHECK(back.frames == ep.frames);
    for (std::size_t t = 0; t < ep.length(); ++t) {
        CHECK(back.poses[t].position == ep.poses[t].position);
        CHECK(back.poses[t].yaw == ep.poses[t].yaw);
        CHECK(back.poses[t].intrinsics == ep.poses[t].intrinsics);
    }
    write_dataset_manifest(dir, {{"ep0", "train"}}, "h");
    auto m = read_dataset_manifest(dir);
    REQUIRE(m.size() == 1);
    CHECK(m[0].split == "train");
    fs::remove_all(dir);
}

TEST_CASE("camera rotation is proper orthonormal") {
    for (double yaw : {0.0, 0.4, -2.0, 3.1}) {
        const Mat3 r = at(1, 1, yaw).rotation();
        for (int a = 0; a < 3; ++a) {
            for (int b = 0; b < 3; ++b) {
                double d = 0;
                for (int i = 0; i < 3; ++i) d += r[i * 3 + a] * r[i * 3 + b];
                CHECK(std::abs(d - (a == b ? 1.0 : 0.0)) < 1e-12);
            }
        }
        const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
                           r[2] * (r[3] * r[7] - r[4] * r[6]);
        CHECK(std::abs(det - 1.0) < 1e-12);
    }
}
