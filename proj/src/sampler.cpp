#include "mw/sampler.hpp"

#include <stdexcept>

#include "mw/hash.hpp"

namespace mw {

std::vector<double> uniform_schedule(int steps) {
    if (steps < 1) throw std::invalid_argument("schedule: steps must be >= 1");
    std::vector<double> s(steps);
    for (int i = 0; i < steps; ++i) s[i] = 1.0 - static_cast<double>(i) / steps;
    return s;
}

std::vector<double> student_schedule() { return {1.0, 0.75, 0.5, 0.25}; }

void check_schedule(std::span<const double> schedule) {
    if (schedule.empty()) throw std::invalid_argument("schedule: empty");
    for (std::size_t i = 0; i < schedule.size(); ++i) {
        if (!(schedule[i] > 0.0 && schedule[i] <= 1.0)) throw std::invalid_argument("schedule: knot outside (0, 1]");
        if (i > 0 && !(schedule[i] < schedule[i - 1])) throw std::invalid_argument("schedule: not decreasing");
    }
}

template <class T>
Tensor<T> noisy_latent(const Tensor<T>& z0, const Tensor<T>& z1, double k) {
    if (z0.shape() != z1.shape()) throw ShapeError("noisy_latent: shape mismatch");
    Tensor<T> out(z0.shape());
    const T a = static_cast<T>(1.0 - k), b = static_cast<T>(k);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * z1[i];
    return out;
}

template <class T>
Tensor<T> flow_velocity(const Tensor<T>& z0, const Tensor<T>& z1) {
    if (z0.shape() != z1.shape()) throw ShapeError("flow_velocity: shape mismatch");
    Tensor<T> out(z0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = z0[i] - z1[i];
    return out;
}

template Tensor<float> noisy_latent(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> noisy_latent(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> flow_velocity(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> flow_velocity(const Tensor<double>&, const Tensor<double>&);

Tensorf gaussian_like(const Shape& shape, Rng& r) {
    Tensorf t(shape);
    for (auto& x : t.vec()) x = static_cast<float>(r.normal());
    return t;
}

Tensorf euler_sample(Tensorf x, std::span<const double> schedule, const VelocityFn& velocity) {
    check_schedule(schedule);
    for (std::size_t s = 0; s < schedule.size(); ++s) {
        const double k = schedule[s];
        const double next = s + 1 < schedule.size() ? schedule[s + 1] : 0.0;
        const Tensorf v = velocity(x, k);
        if (v.shape() != x.shape()) throw ShapeError("euler_sample: velocity shape mismatch");
        const float dk = static_cast<float>(k - next);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += dk * v[i];
    }
    return x;
}

Tensorf denoise_chunk(const WorldModel& model, const KVCache<float>& cache, SeqChunk<float> target, Tensorf noise,
                      std::span<const double> schedule) {
    return euler_sample(std::move(noise), schedule, [&](const Tensorf& x, double k) {
        target.latent = &x;
        target.k = k;
        Tape<float> tape(false);
        return model.forward_cached(tape, cache, {target}, TargetAttention::causal).value();
    });
}

Tensorf denoise_chunk_uncached(const WorldModel& model, const std::vector<SeqChunk<float>>& context,
                               SeqChunk<float> target, Tensorf noise, std::span<const double> schedule) {
    return euler_sample(std::move(noise), schedule, [&](const Tensorf& x, double k) {
        target.latent = &x;
        target.k = k;
        Tape<float> tape(false);
        return model.forward(tape, context, {target}, TargetAttention::causal).value();
    });
}

std::uint64_t context_tag(const MemoryBank& bank, const Reframing& r) {
    Fnv1a h;
    for (std::size_t i = 0; i < r.order.size(); ++i) {
        h.update_value(bank[r.order[i]].capture_index);
        h.update_value(r.chunk_positions[i]);
    }
    h.update_value(r.order.size());
    return h.digest();
}

Rollout::Rollout(const WorldModel& model, RolloutOptions opt) : model_(model), opt_(std::move(opt)) {
    check_schedule(opt_.schedule);
}

void Rollout::commit(const Tensorf& latent, const ChunkAction& action) {
    const auto& cfg = model_.config();
    if (latent.rank() != 2 || latent.dim(0) != static_cast<std::size_t>(cfg.tokens_per_chunk()) ||
        latent.dim(1) != static_cast<std::size_t>(cfg.channels())) {
        throw ShapeError("rollout: committed latent has shape " + shape_str(latent.shape()));
    }
    ChunkRecord rec;
    rec.capture_index = next_capture_++;
    rec.latent = latent;
    rec.poses = action.poses;
    rec.keys = action.keys;
    bank_.append(std::move(rec));
}

ChunkResult Rollout::step(const ChunkAction& action) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto& cfg = model_.config();
    ChunkResult res;
    res.capture_index = next_capture_;
    res.context = reconstitute(bank_, action.poses[1], opt_.retrieval);
    res.reframing = reframe(res.context, bank_, cfg.rope, res.capture_index);
    const auto ctx = context_chunks(bank_, res.reframing);

    SeqChunk<float> target;
    target.keys = action.keys;
    target.poses = action.poses;
    target.position = res.reframing.current_position;

    Rng noise_rng(opt_.noise_seed, static_cast<std::uint64_t>(res.capture_index));
    Tensorf noise = gaussian_like({static_cast<std::size_t>(cfg.tokens_per_chunk()),
                                   static_cast<std::size_t>(cfg.channels())},
                                  noise_rng);
    if (opt_.use_cache) {
        const std::uint64_t tag = context_tag(bank_, res.reframing);
        if (!cache_.valid || cache_.tag != tag) {
            model_.build_cache(ctx, cache_);
            cache_.tag = tag;
            res.cache_rebuilt = true;
            ++rebuilds_;
        }
        res.latent = denoise_chunk(model_, cache_, target, std::move(noise), opt_.schedule);
    } else {
        res.latent = denoise_chunk_uncached(model_, ctx, target, std::move(noise), opt_.schedule);
    }
    res.retrieval = retrieval_record(res.capture_index, res.context, bank_, res.reframing);
    commit(res.latent, action);
    res.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

void progressive_decode(const Tensorf& latent, const ModelConfig& cfg, std::uint64_t first_index,
                        const std::function<void(EmittedFrame)>& emit) {
    for (int f = 0; f < kChunkFrames; ++f) {
        EmittedFrame e;
        e.index = first_index + f;
        e.frame = unpatchify_frame(latent, f, cfg.frame_w, cfg.frame_h, cfg.patch);
        e.at = std::chrono::steady_clock::now();
        emit(std::move(e));
    }
}

}  // namespace mw
