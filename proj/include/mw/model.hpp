#pragma once

// Chunk-wise autoregressive flow-matching transformer. A sequence is a list
// of clean context chunks followed by target chunks; every chunk holds
// kChunkFrames latent frames of tokens_per_frame() patch tokens each, in
// frame-major order. Conditioning per chunk comes from its noise level and
// discrete keys (adaLN), per token from 3-axis RoPE and, in the continuous
// and dual modes, a projective attention branch driven by camera frustums.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mw/config.hpp"
#include "mw/ops.hpp"
#include "mw/world.hpp"

namespace mw {

enum class ActionMode : std::uint8_t { none, discrete, continuous, dual };
enum class RopeMode : std::uint8_t { reframed, absolute };

std::string to_string(ActionMode m);
std::string to_string(RopeMode m);
ActionMode action_mode_from_string(const std::string& s);
RopeMode rope_mode_from_string(const std::string& s);

struct ModelConfig {
    int frame_w = 64;
    int frame_h = 64;
    int patch = 8;
    int dim = 128;
    int heads = 4;
    int blocks = 6;
    int mlp_ratio = 4;
    int freq_dim = 64;
    double rope_base = 10000.0;
    ActionMode action = ActionMode::dual;
    RopeMode rope = RopeMode::reframed;
    double pose_scale = 0.25;  // world units -> frustum translation units
    int steps_teacher = 20;
    int steps_student = 4;
    int mem_L = 3;
    int mem_K = 1;
    std::uint64_t init_seed = 0;

    int tokens_x() const { return frame_w / patch; }
    int tokens_y() const { return frame_h / patch; }
    int tokens_per_frame() const { return tokens_x() * tokens_y(); }
    int tokens_per_chunk() const { return tokens_per_frame() * kChunkFrames; }
    int channels() const { return 3 * patch * patch; }
    int head_dim() const { return dim / heads; }
    bool uses_keys() const { return action == ActionMode::discrete || action == ActionMode::dual; }
    bool uses_frustums() const { return action == ActionMode::continuous || action == ActionMode::dual; }

    // Throws std::invalid_argument on an inconsistent configuration.
    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    // Reads "model.*" keys, falling back to the defaults above.
    static ModelConfig from_config(const Config& c);
    std::string hash() const;
};

// ---------------------------------------------------------------- latents

// Frames -> [frames * tokens_per_frame, 3 * patch^2], values b / 127.5 - 1.
// Channel order inside a token is (py, px, rgb).
template <class T>
Tensor<T> patchify(std::span<const Frame> frames, int patch);
// Inverse of patchify; values are clamped to [0, 255] and rounded.
template <class T>
std::vector<Frame> unpatchify(const Tensor<T>& latent, int width, int height, int patch);
// One frame out of a multi-frame latent.
template <class T>
Frame unpatchify_frame(const Tensor<T>& latent, std::size_t frame, int width, int height, int patch);

// Dominant key mask of a chunk: the most frequent mask among its frames,
// ties going to the earliest.
KeyMask dominant_keys(std::span<const KeyMask> frame_keys);

// ---------------------------------------------------------------- frustums

// NDC projection of pinhole intrinsics, lifted to 4x4.
Mat4<double> ndc_projection(const Intrinsics& k);
// P * [R^T, -R^T T s; 0 1] for a camera-to-world rotation R (row-major) and
// centre T; s = translation scale. Throws std::invalid_argument for
// singular intrinsics.
Mat4<double> build_dproj(const Mat3& r, const Vec3& t, const Intrinsics& k, double translation_scale);
Mat4<double> build_dproj(const CameraPose& pose, double translation_scale);

// Sinusoidal features of k * 1000, [cos | sin], length freq_dim.
std::vector<double> timestep_features(double k, int freq_dim);

// ---------------------------------------------------------------- sequence

// One chunk of the input sequence. latent is [tokens_per_chunk x C].
template <class T>
struct SeqChunk {
    const Tensor<T>* latent = nullptr;
    double k = 0.0;  // noise level; context chunks are clean (0)
    KeyMask keys = 0;
    std::array<CameraPose, kChunkFrames> poses{};
    int position = 0;  // chunk-level temporal index; fine index = position * 4 + frame
};

enum class TargetAttention : std::uint8_t { causal, bidirectional };

// Keys/values of the context rows for every layer. Context rows never
// attend to targets, so these are independent of the target chunks and of
// their noise levels.
template <class T>
struct KVCache {
    struct Layer {
        Tensor<T> k_rope, v, k_proj, v_proj;
    };
    std::vector<Layer> layers;
    std::size_t rows = 0;
    std::uint64_t tag = 0;
    bool valid = false;

    void reset() {
        layers.clear();
        rows = 0;
        tag = 0;
        valid = false;
    }
};

// Attention mask over [context rows | target rows]. Context rows see the
// context only; target rows see the context plus targets under `mode`.
// Without context rows the mask has target rows only (cached evaluation).
Mask sequence_mask(std::size_t ctx_chunks, std::size_t target_chunks, std::size_t tokens_per_chunk,
                   TargetAttention mode, bool include_context_rows = true);

template <class T>
class WorldModelT {
public:
    explicit WorldModelT(ModelConfig cfg);
    WorldModelT(const WorldModelT&) = delete;
    WorldModelT& operator=(const WorldModelT&) = delete;
    WorldModelT(WorldModelT&&) = default;

    const ModelConfig& config() const { return cfg_; }

    // Velocity prediction for the target rows, [targets * tokens_per_chunk x C].
    // When inputs is non-null the stacked latents become a gradient-tracking
    // leaf returned through it.
    Var<T> forward(Tape<T>& tape, const std::vector<SeqChunk<T>>& context,
                   const std::vector<SeqChunk<T>>& targets, TargetAttention mode,
                   Var<T>* inputs = nullptr) const;
    // Same result using keys/values cached from build_cache(context).
    Var<T> forward_cached(Tape<T>& tape, const KVCache<T>& cache, const std::vector<SeqChunk<T>>& targets,
                          TargetAttention mode) const;
    void build_cache(const std::vector<SeqChunk<T>>& context, KVCache<T>& cache) const;

    // Per-chunk conditioning vector c = temb(k) + keys(keys), [n x dim].
    Var<T> conditioning(Tape<T>& tape, const std::vector<SeqChunk<T>>& chunks, bool zero_keys = false) const;

    // Attention of one block in isolation (used by invariance tests):
    // rows carry their frame's frustum via frame_of_row.
    Var<T> dual_attention(Tape<T>& tape, Var<T> q, Var<T> k, Var<T> v, const RopeTable<T>& rope,
                          const std::vector<Mat4<double>>& frustums, std::span<const int> frame_of_row,
                          const Mask& mask, std::size_t block) const;

    std::vector<Param<T>*> params();
    std::vector<const Param<T>*> params() const;
    Param<T>* find(const std::string& name);
    const Param<T>* find(const std::string& name) const;
    std::size_t parameter_count() const;
    // Hash of all parameter bytes.
    std::uint64_t parameter_hash() const;
    // Copies every parameter whose name and shape match; returns the count.
    std::size_t copy_matching(const WorldModelT& other);

    // Debug switch: when set, the conditioning vector drops the key branch
    // and the timestep branch (used by the non-degeneracy check).
    bool ablate_conditioning = false;

private:
    struct Block {
        Param<T>*ada_w, *ada_b, *qkv_w, *qkv_b, *o_w, *o_b, *mlp_w1, *mlp_b1, *mlp_w2, *mlp_b2;
        Param<T>* gate = nullptr;  // projective branch gate (continuous/dual)
    };

    struct Rows;
    Rows layout(const std::vector<SeqChunk<T>>& chunks, std::size_t group_offset) const;
    Var<T> run(Tape<T>& tape, const std::vector<SeqChunk<T>>& context, const std::vector<SeqChunk<T>>& targets,
               TargetAttention mode, const KVCache<T>* use, KVCache<T>* build, Var<T>* inputs = nullptr) const;
    Param<T>* add_param(const std::string& name, Shape shape, double stddev, double fill = 0.0);

    ModelConfig cfg_;
    std::vector<std::unique_ptr<Param<T>>> params_;
    Param<T>*in_w_, *in_b_;
    Param<T>*t_w1_, *t_b1_, *t_w2_, *t_b2_;
    Param<T>*key_table_ = nullptr, *k_w1_ = nullptr, *k_b1_ = nullptr, *k_w2_ = nullptr, *k_b2_ = nullptr;
    std::vector<Block> blocks_;
    Param<T>*f_ada_w_, *f_ada_b_, *out_w_, *out_b_;
};

using WorldModel = WorldModelT<float>;

// Checkpoint directory: parameter files + manifest with the model config.
void save_model(const std::filesystem::path& dir, const WorldModel& m, const nlohmann::json& meta = {});
WorldModel load_model(const std::filesystem::path& dir);

}  // namespace mw
