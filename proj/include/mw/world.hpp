#pragma once

// Procedural grid world, raycast renderer, pose stepping and trajectory
// generation. World units: one cell = 1.0; x/y on the ground plane, z up.
// Cell (i, j) covers [i, i+1) x [j, j+1).

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mw/rng.hpp"

namespace mw {

namespace keys {
inline constexpr std::uint8_t forward = 1;
inline constexpr std::uint8_t back = 2;
inline constexpr std::uint8_t strafe_left = 4;
inline constexpr std::uint8_t strafe_right = 8;
inline constexpr std::uint8_t turn_left = 16;
inline constexpr std::uint8_t turn_right = 32;
inline constexpr std::uint8_t all = 63;
}  // namespace keys

using KeyMask = std::uint8_t;

// True when no opposing pair is set.
bool keys_consistent(KeyMask k);
// Swaps forward/back, strafe and turn directions.
KeyMask invert_keys(KeyMask k);
std::string keys_to_string(KeyMask k);

inline constexpr double kMoveStep = 0.25;          // cells per move bit
inline constexpr double kTurnStepDeg = 15.0;       // degrees per turn bit
inline constexpr double kMoveThreshold = 0.125;    // pose_to_keys translation threshold
inline constexpr double kTurnThresholdDeg = 7.5;   // pose_to_keys rotation threshold
inline constexpr double kCameraHeight = 0.5;
inline constexpr double kCollisionMargin = 0.15;

struct Intrinsics {
    double fx = 32, fy = 32, cx = 32, cy = 32;
    int width = 64;
    int height = 64;

    // 90 degree horizontal field of view, principal point at the centre.
    static Intrinsics for_size(int w, int h);
    bool operator==(const Intrinsics&) const = default;
};

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major

// Yaw-only camera. Camera axes follow the x-right, y-down, z-forward
// convention; rotation() maps camera to world.
struct CameraPose {
    double yaw = 0.0;  // radians; heading (cos yaw, sin yaw, 0)
    Vec3 position{0.0, 0.0, kCameraHeight};
    Intrinsics intrinsics;

    Mat3 rotation() const;
    Vec3 forward() const;
    Vec3 right() const;
    // 12 numbers, row-major [R | T].
    std::array<double, 12> as_rt() const;
    static CameraPose from_rt(const std::array<double, 12>& rt, const Intrinsics& k);
};

double pose_distance(const CameraPose& a, const CameraPose& b);
// Absolute yaw difference wrapped to [0, pi].
double yaw_gap(const CameraPose& a, const CameraPose& b);
double wrap_angle(double a);

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
    bool operator==(const Rgb&) const = default;
};

class GridWorld {
public:
    // Generates a connected world with a walled boundary. size >= 4.
    static GridWorld generate(std::uint64_t seed, int size = 24);
    // Explicit layout (row j, column i -> occ[j * size + i]); boundary is forced to walls.
    static GridWorld from_occupancy(std::uint64_t seed, int size, std::vector<std::uint8_t> occ);

    std::uint64_t seed() const { return seed_; }
    int size() const { return size_; }
    bool wall(int i, int j) const;
    bool free_at(double x, double y) const;
    const std::vector<std::uint8_t>& occupancy() const { return occ_; }
    Rgb palette(int i, int j) const;

    double free_fraction_interior() const;
    bool free_connected() const;
    // Centres of all free cells, row-major order.
    std::vector<std::array<int, 2>> free_cells() const;

private:
    std::uint64_t seed_ = 0;
    int size_ = 0;
    std::vector<std::uint8_t> occ_;
};

struct Frame {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

    Rgb pixel(int x, int y) const {
        const std::size_t o = (static_cast<std::size_t>(y) * width + x) * 3;
        return {rgb[o], rgb[o + 1], rgb[o + 2]};
    }
    bool operator==(const Frame&) const = default;
};

inline constexpr Rgb kFloorColor{72, 66, 58};
inline constexpr Rgb kCeilingColor{150, 176, 204};

// Per-column hit information from the raycaster.
struct ColumnHit {
    int cell_i = -1, cell_j = -1;
    bool x_side = false;  // hit a face perpendicular to the x axis
    double perp_dist = 0;
    double euclid_dist = 0;
};

ColumnHit cast_column(const GridWorld& w, const CameraPose& pose, int column);
// Throws std::invalid_argument if the camera is inside a wall.
Frame render(const GridWorld& w, const CameraPose& pose);
double wall_shade(double euclid_dist, bool x_side);

// Applies keys with collision against walls.
CameraPose step_pose(const GridWorld& w, const CameraPose& pose, KeyMask k);
// Same step without collision.
CameraPose keys_to_pose(const CameraPose& pose, KeyMask k);
KeyMask pose_to_keys(const CameraPose& prev, const CameraPose& next);
bool position_clear(const GridWorld& w, double x, double y);
// Centre of a seeded random free cell, heading along a grid axis.
CameraPose spawn_pose(const GridWorld& w, std::uint64_t seed, const Intrinsics& k);

enum class TrajectoryKind : std::uint8_t { random_walk, loop, out_and_back };
std::string to_string(TrajectoryKind k);
TrajectoryKind trajectory_kind_from_string(const std::string& s);

inline constexpr int kChunkFrames = 4;

struct Episode {
    TrajectoryKind kind = TrajectoryKind::random_walk;
    std::uint64_t world_seed = 0;
    int world_size = 0;
    std::uint64_t traj_seed = 0;
    std::vector<CameraPose> poses;
    std::vector<KeyMask> actions;  // actions[t] moved poses[t-1] to poses[t]; actions[0] = idle
    std::vector<Frame> frames;

    std::size_t length() const { return poses.size(); }
    std::size_t chunks() const { return poses.size() / kChunkFrames; }
};

// Pose/action trajectory only (no frames). length % 4 == 0.
Episode make_trajectory(const GridWorld& w, TrajectoryKind kind, int length, std::uint64_t seed,
                        const Intrinsics& k);
void render_episode(const GridWorld& w, Episode& ep);

// On-disk episode: frames.bin + meta.jsonl + episode.json.
void write_episode(const std::filesystem::path& dir, const Episode& ep);
Episode read_episode(const std::filesystem::path& dir);

struct DatasetEntry {
    std::string dir;
    std::string split;
};
void write_dataset_manifest(const std::filesystem::path& root, const std::vector<DatasetEntry>& entries,
                            const std::string& config_hash);
std::vector<DatasetEntry> read_dataset_manifest(const std::filesystem::path& root);

}  // namespace mw
