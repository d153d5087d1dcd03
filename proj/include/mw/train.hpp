#pragma once

// Datasets of patchified episodes and the flow-matching training stages:
// 1a bidirectional windows, 1b block-causal windows with per-chunk noise,
// 2 single chunks against reconstituted memory, and the memory-augmented
// bidirectional teacher.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mw/memory.hpp"
#include "mw/model.hpp"
#include "mw/optim.hpp"

namespace mw {

struct DataSpec {
    int episodes = 200;
    int world_size = 16;
    int length = 64;  // frames per episode, multiple of 4
    int frame_w = 32;
    int frame_h = 32;
    std::uint64_t seed = 0;
    int worlds = 0;  // distinct worlds; 0 = one per episode
    std::vector<TrajectoryKind> kinds{TrajectoryKind::random_walk, TrajectoryKind::loop,
                                      TrajectoryKind::out_and_back};

    static DataSpec from_config(const Config& c);
    nlohmann::json to_json() const;
};

// Rendered episodes; episode i uses world seed spec.seed * 1000 + i % worlds.
std::vector<Episode> generate_episodes(const DataSpec& spec);

// One episode in model space.
struct EpisodeData {
    std::uint64_t world_seed = 0;
    int world_size = 0;
    TrajectoryKind kind = TrajectoryKind::random_walk;
    std::vector<Tensorf> chunks;
    std::vector<KeyMask> chunk_keys;
    std::vector<std::array<CameraPose, kChunkFrames>> chunk_poses;
    MemoryBank bank;  // every chunk, capture index = chunk index

    std::size_t size() const { return chunks.size(); }
    // Bank of the first n chunks.
    MemoryBank prefix(std::size_t n) const;
    SeqChunk<float> chunk(std::size_t i, int position, double k = 0.0) const;
};

EpisodeData prepare_episode(const Episode& ep, const ModelConfig& cfg);
std::vector<EpisodeData> prepare_episodes(const std::vector<Episode>& eps, const ModelConfig& cfg);
// Reads every episode of a dataset directory with the given split ("" = all).
std::vector<EpisodeData> load_dataset(const std::filesystem::path& root, const std::string& split,
                                      const ModelConfig& cfg);

enum class Stage : std::uint8_t { s1a, s1b, s2, teacher };
std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

// Teacher context: union of the per-chunk contexts minus the window, by
// capture index, ascending.
std::vector<std::int64_t> align_context(const std::vector<std::vector<std::int64_t>>& contexts,
                                        const std::vector<std::int64_t>& window);

// Owned latents plus the chunk descriptors pointing at them.
struct TrainSample {
    std::vector<Tensorf> store;
    std::vector<SeqChunk<float>> context;
    std::vector<SeqChunk<float>> targets;
    std::vector<Tensorf> clean;  // one per target
    std::vector<Tensorf> noise;  // one per target
    TargetAttention mode = TargetAttention::causal;
    std::vector<std::int64_t> context_captures;
    std::int64_t first_target = 0;
};

struct TrainOptions {
    Stage stage = Stage::s1a;
    int steps = 1000;
    int batch = 4;
    double lr = 1e-3;
    int warmup = 50;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    int window = 4;  // target chunks in stages 1a/1b/teacher
    RetrievalOptions retrieval;
};

// Draws one training sample for the stage; noise levels are assigned to
// the targets, whose latents already hold z_k.
TrainSample make_sample(const EpisodeData& ep, Stage stage, const ModelConfig& cfg, const TrainOptions& opt, Rng& r);

// Flow-matching loss of one sample, recorded on tape.
Var<float> fm_loss(Tape<float>& tape, const WorldModel& model, const TrainSample& s);

class Trainer {
public:
    Trainer(WorldModel& model, const std::vector<EpisodeData>& data, TrainOptions opt);

    // One optimiser step over opt.batch samples; returns the mean loss.
    double step();
    std::int64_t steps_done() const { return step_; }
    double current_lr() const;
    const TrainOptions& options() const { return opt_; }
    nlohmann::json log_line(double loss) const;

private:
    WorldModel& model_;
    const std::vector<EpisodeData>& data_;
    TrainOptions opt_;
    std::vector<Param<float>*> params_;
    Adam<float> adam_;
    Rng rng_;
    std::int64_t step_ = 0;
    std::vector<std::size_t> eligible_;
};

// Runs opt.steps steps, writing one JSON line per step to log (if open).
// Returns the per-step losses.
std::vector<double> train(WorldModel& model, const std::vector<EpisodeData>& data, const TrainOptions& opt,
                          std::ostream* log = nullptr);

// Minimum number of chunks an episode needs for the stage.
std::size_t min_chunks(Stage s, int window);

}  // namespace mw
