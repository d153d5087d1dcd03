#pragma once

// Frame metrics and evaluation protocols: revisit consistency on
// out-and-back paths, pose following via oracle-render lattice search, and
// the ablation grid.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mw/sampler.hpp"
#include "mw/train.hpp"

namespace mw {

inline constexpr double kPsnrCap = 99.0;

// Throws ShapeError on a size mismatch.
double mse(const Frame& a, const Frame& b);
double psnr(const Frame& a, const Frame& b);
// Mean SSIM over RGB channels with a 7x7 uniform window (valid positions).
double ssim(const Frame& a, const Frame& b);

// Frames for every pose of the episode; the first chunk is the episode's
// own (ground-truth condition).
struct GeneratedEpisode {
    std::vector<Frame> frames;
    std::vector<double> chunk_ms;
    std::vector<nlohmann::json> retrievals;
};
using EpisodeGenerator = std::function<GeneratedEpisode(const Episode&)>;

GeneratedEpisode generate_episode(const WorldModel& model, const Episode& ep, const RolloutOptions& opt);
EpisodeGenerator model_generator(const WorldModel& model, RolloutOptions opt);
// The simulator itself as the model: returns the episode's frames.
EpisodeGenerator oracle_generator();

struct RevisitResult {
    double psnr = 0;
    double ssim = 0;
    std::size_t frames = 0;
    std::vector<double> episode_psnr;
    std::vector<double> chunk_ms;
};

// Return-half frame t is compared with the same run's frame 2*mid-1-t.
RevisitResult revisit_protocol(const EpisodeGenerator& gen, const std::vector<Episode>& episodes);

struct PoseLattice {
    double step = 0.25;     // cells
    int radius = 4;         // steps each way
    double yaw_step_deg = 7.5;
    int yaw_radius = 6;
};

struct PoseErrorResult {
    double r_err_deg = 0;
    double t_err = 0;
    std::size_t frames = 0;
};

// Best lattice pose around `commanded` for one frame; ties go to the
// candidate nearest the commanded pose.
CameraPose best_matching_pose(const GridWorld& world, const Frame& frame, const CameraPose& commanded,
                              const PoseLattice& lattice);
// Mean rotation/translation gap between commanded and best-matching poses
// over the last frame of every generated chunk.
PoseErrorResult pose_error(const EpisodeGenerator& gen, const std::vector<Episode>& episodes,
                           const PoseLattice& lattice = {});

struct LatencyStats {
    double mean = 0, p50 = 0, p95 = 0, max = 0;
    static LatencyStats of(std::vector<double> ms);
    nlohmann::json to_json() const;
};

struct EvalSpec {
    int episodes = 20;
    int length = 128;
    int world_size = 12;
    std::uint64_t seed = 900;
    int pose_episodes = 8;
    int pose_length = 64;
};

// Out-and-back episodes for the revisit protocol, random walks for pose error.
std::vector<Episode> revisit_episodes(const EvalSpec& spec, const ModelConfig& cfg);
std::vector<Episode> pose_episodes(const EvalSpec& spec, const ModelConfig& cfg);

struct EvalReport {
    std::string label;
    RevisitResult revisit;
    PoseErrorResult pose;
    LatencyStats latency;
    std::string checkpoint_hash;
    std::uint64_t seed = 0;
    nlohmann::json to_json() const;
};

EvalReport evaluate(const WorldModel& model, const RolloutOptions& opt, const EvalSpec& spec,
                    const std::string& label = "");

// Staged training budget for one student (1a -> 1b -> 2).
struct Budget {
    int s1a = 2000, s1b = 2000, s2 = 3000, teacher = 3000, distill = 2000;
    int batch = 4;
    double lr = 1e-3;
    static Budget from_config(const Config& c);
};

// Trains a fresh model through stages 1a, 1b and 2; logs go to log if set.
void train_student(WorldModel& model, const std::vector<EpisodeData>& data, const Budget& b, std::uint64_t seed,
                   const RetrievalOptions& retrieval, std::ostream* log = nullptr);

struct AblationCell {
    ActionMode action;
    RopeMode rope;
    int L, K;
    std::string name() const;
};
// {discrete, continuous, dual} x {absolute, reframed} x {(3,1), (1,3)}.
std::vector<AblationCell> ablation_grid();

struct AblationResult {
    AblationCell cell;
    EvalReport report;
};
std::vector<AblationResult> ablate(const ModelConfig& base, const std::vector<EpisodeData>& data, const Budget& budget,
                                   const EvalSpec& spec, std::uint64_t seed,
                                   const std::vector<AblationCell>& cells = ablation_grid());
std::string ablation_table(const std::vector<AblationResult>& rs);
nlohmann::json ablation_json(const std::vector<AblationResult>& rs);

}  // namespace mw
