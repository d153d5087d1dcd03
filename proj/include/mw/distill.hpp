#pragma once

// Context forcing: the causal few-step student rolls out a window of chunks
// against its own reconstituted memory; a frozen memory-augmented
// bidirectional teacher and a trainable fake-score model score the window
// under the aligned context, and the score difference drives the student.

#include <cstdint>
#include <ostream>
#include <vector>

#include "json.hpp"
#include "mw/optim.hpp"
#include "mw/sampler.hpp"
#include "mw/train.hpp"

namespace mw {

struct DistillOptions {
    int steps = 2000;
    double lr_student = 1e-4;
    double lr_fake = 2e-5;
    int window = 4;
    std::vector<double> schedule = student_schedule();
    std::vector<double> phase_fractions{0.0, 0.4, 0.7};
    std::vector<int> phase_max_chunks{4, 8, 16};
    double grad_clip = 1.0;
    double k_min = 0.02;
    double k_max = 0.98;
    bool per_chunk_k = false;  // independent DMD noise levels per chunk
    std::uint64_t seed = 0;
    RetrievalOptions retrieval;
};

// Maximum history length m at a given step of a run of `total` steps.
int progressive_max_chunks(int step, int total, const DistillOptions& opt);

// Number of real history chunks beyond the first: uniform on 0..min(m, limit)
// where limit keeps the window inside an episode of `chunks` chunks.
std::size_t sample_history(int m, std::size_t chunks, int window, Rng& r);

struct RolloutWindow {
    std::size_t history = 0;  // chunks 0..history-1 are real
    MemoryBank bank;          // history followed by the rolled-out chunks
    std::vector<std::int64_t> window;                 // capture indices of the rolled-out chunks
    std::vector<std::vector<std::int64_t>> contexts;  // per rolled-out chunk, capture order
    std::vector<int> steps;                           // s_i
    std::vector<Var<float>> samples;                  // final estimate of each chunk, on the tape
    std::vector<Tensorf> noise;                       // initial noise of each chunk
    std::vector<ChunkAction> actions;
};

// Generates `opt.window` chunks after `history` real chunks of the
// episode. Chunk i is denoised for s_i steps; only the last step is
// recorded on the tape (its clean estimate is the sample). Earlier chunks
// enter later contexts detached. If steps is non-empty it fixes s_i.
RolloutWindow self_rollout(Tape<float>& tape, const WorldModel& student, const EpisodeData& ep,
                           std::size_t history, const DistillOptions& opt, Rng& r,
                           const std::vector<int>& steps = {});

// Teacher-side sequence: aligned context chunks plus the rolled-out window
// as targets at noise level(s) k.
struct TeacherInput {
    std::vector<std::int64_t> context_captures;
    std::vector<SeqChunk<float>> context;
    std::vector<SeqChunk<float>> targets;
    std::vector<Tensorf> store;
};
TeacherInput teacher_input(const RolloutWindow& w, const std::vector<Tensorf>& noisy, const std::vector<double>& k,
                           const ModelConfig& cfg);

struct DmdStats {
    int m = 0;
    std::size_t j = 0;
    std::vector<int> steps;
    double k = 0;
    double grad_norm = 0;   // norm of the normalised score difference
    double param_grad_norm = 0;
    double fake_loss = 0;
    std::size_t context_size = 0;
};

// Per-element DMD direction (z0_fake - z0_real) / mean|x - z0_real|.
Tensorf dmd_direction(const Tensorf& x, const Tensorf& z0_real, const Tensorf& z0_fake);

class Distiller {
public:
    // student is trained, fake starts as a copy of the teacher weights.
    Distiller(WorldModel& student, const WorldModel& teacher, WorldModel& fake,
              const std::vector<EpisodeData>& data, DistillOptions opt);

    DmdStats step();
    std::int64_t steps_done() const { return step_; }
    nlohmann::json log_line(const DmdStats& s) const;

private:
    WorldModel& student_;
    const WorldModel& teacher_;
    WorldModel& fake_;
    const std::vector<EpisodeData>& data_;
    DistillOptions opt_;
    std::vector<Param<float>*> sp_, fp_;
    Adam<float> s_adam_, f_adam_;
    Rng rng_;
    std::int64_t step_ = 0;
};

std::vector<DmdStats> distill(WorldModel& student, const WorldModel& teacher, WorldModel& fake,
                              const std::vector<EpisodeData>& data, const DistillOptions& opt,
                              std::ostream* log = nullptr);

}  // namespace mw
