#include "mw/train.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace mw {

namespace fs = std::filesystem;
using nlohmann::json;

DataSpec DataSpec::from_config(const Config& c) {
    DataSpec d;
    d.episodes = static_cast<int>(c.get_int("data.episodes", d.episodes));
    d.world_size = static_cast<int>(c.get_int("data.world_size", d.world_size));
    d.length = static_cast<int>(c.get_int("data.length", d.length));
    d.frame_w = static_cast<int>(c.get_int("model.frame_w", d.frame_w));
    d.frame_h = static_cast<int>(c.get_int("model.frame_h", d.frame_h));
    d.seed = static_cast<std::uint64_t>(c.get_int("data.seed", static_cast<std::int64_t>(d.seed)));
    d.worlds = static_cast<int>(c.get_int("data.worlds", d.worlds));
    if (c.has("data.kinds")) {
        d.kinds.clear();
        std::string s = c.get("data.kinds", "");
        std::size_t pos = 0;
        while (pos <= s.size()) {
            const std::size_t comma = s.find(',', pos);
            const std::string item = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
            if (!item.empty()) d.kinds.push_back(trajectory_kind_from_string(item));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (d.kinds.empty()) throw std::invalid_argument("data.kinds: empty list");
    }
    return d;
}

json DataSpec::to_json() const {
    json k = json::array();
    for (auto x : kinds) k.push_back(to_string(x));
    return {{"episodes", episodes}, {"world_size", world_size}, {"length", length}, {"frame_w", frame_w},
            {"frame_h", frame_h},   {"seed", seed},             {"worlds", worlds}, {"kinds", k}};
}

std::vector<Episode> generate_episodes(const DataSpec& spec) {
    if (spec.kinds.empty()) throw std::invalid_argument("generate_episodes: no trajectory kinds");
    const Intrinsics k = Intrinsics::for_size(spec.frame_w, spec.frame_h);
    const int worlds = spec.worlds > 0 ? spec.worlds : spec.episodes;
    std::vector<Episode> out;
    out.reserve(spec.episodes);
    for (int i = 0; i < spec.episodes; ++i) {
        const std::uint64_t wseed = spec.seed * 1000 + static_cast<std::uint64_t>(i % worlds);
        const GridWorld w = GridWorld::generate(wseed, spec.world_size);
        const TrajectoryKind kind = spec.kinds[i % spec.kinds.size()];
        Episode ep = make_trajectory(w, kind, spec.length, spec.seed * 7919 + static_cast<std::uint64_t>(i), k);
        render_episode(w, ep);
        out.push_back(std::move(ep));
    }
    return out;
}

MemoryBank EpisodeData::prefix(std::size_t n) const {
    MemoryBank b;
    for (std::size_t i = 0; i < n && i < bank.size(); ++i) b.append(bank[i]);
    return b;
}

SeqChunk<float> EpisodeData::chunk(std::size_t i, int position, double k) const {
    SeqChunk<float> c;
    c.latent = &chunks.at(i);
    c.k = k;
    c.keys = chunk_keys[i];
    c.poses = chunk_poses[i];
    c.position = position;
    return c;
}

EpisodeData prepare_episode(const Episode& ep, const ModelConfig& cfg) {
    if (ep.frames.size() != ep.poses.size()) throw std::invalid_argument("prepare_episode: episode not rendered");
    if (!ep.frames.empty() && (ep.frames[0].width != cfg.frame_w || ep.frames[0].height != cfg.frame_h)) {
        throw ShapeError("prepare_episode: frame size does not match the model");
    }
    EpisodeData d;
    d.world_seed = ep.world_seed;
    d.world_size = ep.world_size;
    d.kind = ep.kind;
    for (std::size_t c = 0; c < ep.chunks(); ++c) {
        const std::size_t f0 = c * kChunkFrames;
        d.chunks.push_back(patchify<float>(std::span(ep.frames).subspan(f0, kChunkFrames), cfg.patch));
        d.chunk_keys.push_back(dominant_keys(std::span(ep.actions).subspan(f0, kChunkFrames)));
        std::array<CameraPose, kChunkFrames> poses;
        for (int f = 0; f < kChunkFrames; ++f) poses[f] = ep.poses[f0 + f];
        d.chunk_poses.push_back(poses);
        ChunkRecord rec;
        rec.capture_index = static_cast<std::int64_t>(c);
        rec.latent = d.chunks.back();
        rec.poses = poses;
        rec.keys = d.chunk_keys.back();
        d.bank.append(std::move(rec));
    }
    return d;
}

std::vector<EpisodeData> prepare_episodes(const std::vector<Episode>& eps, const ModelConfig& cfg) {
    std::vector<EpisodeData> out;
    out.reserve(eps.size());
    for (const auto& e : eps) out.push_back(prepare_episode(e, cfg));
    return out;
}

std::vector<EpisodeData> load_dataset(const fs::path& root, const std::string& split, const ModelConfig& cfg) {
    std::vector<EpisodeData> out;
    for (const auto& e : read_dataset_manifest(root)) {
        if (!split.empty() && e.split != split) continue;
        out.push_back(prepare_episode(read_episode(root / e.dir), cfg));
    }
    if (out.empty()) throw std::runtime_error("dataset " + root.string() + " has no episodes in split '" + split + "'");
    return out;
}

std::string to_string(Stage s) {
    switch (s) {
        case Stage::s1a: return "1a";
        case Stage::s1b: return "1b";
        case Stage::s2: return "2";
        case Stage::teacher: return "3-teacher";
    }
    return "?";
}

Stage stage_from_string(const std::string& s) {
    if (s == "1a") return Stage::s1a;
    if (s == "1b") return Stage::s1b;
    if (s == "2") return Stage::s2;
    if (s == "3-teacher" || s == "teacher") return Stage::teacher;
    throw std::invalid_argument("unknown stage '" + s + "'");
}

std::vector<std::int64_t> align_context(const std::vector<std::vector<std::int64_t>>& contexts,
                                        const std::vector<std::int64_t>& window) {
    std::set<std::int64_t> u;
    for (const auto& c : contexts) u.insert(c.begin(), c.end());
    for (auto w : window) u.erase(w);
    return {u.begin(), u.end()};
}

std::size_t min_chunks(Stage s, int window) {
    switch (s) {
        case Stage::s1a:
        case Stage::s1b:
        case Stage::teacher: return static_cast<std::size_t>(window) + 1;
        case Stage::s2: return 2;
    }
    return 2;
}

namespace {

// Adds a clean context chunk copied from the episode.
void push_context(TrainSample& s, const EpisodeData& ep, std::size_t idx, int position) {
    SeqChunk<float> c = ep.chunk(idx, position);
    c.latent = nullptr;
    s.context.push_back(c);
    s.store.push_back(ep.chunks[idx]);
    s.context_captures.push_back(static_cast<std::int64_t>(idx));
}

void push_target(TrainSample& s, const EpisodeData& ep, std::size_t idx, int position, double k, Rng& r) {
    SeqChunk<float> c = ep.chunk(idx, position, k);
    c.latent = nullptr;
    const Tensorf& z0 = ep.chunks[idx];
    Tensorf z1(z0.shape());
    for (auto& x : z1.vec()) x = static_cast<float>(r.normal());
    Tensorf zk(z0.shape());
    const float a = static_cast<float>(1.0 - k), b = static_cast<float>(k);
    for (std::size_t i = 0; i < zk.size(); ++i) zk[i] = a * z0[i] + b * z1[i];
    s.targets.push_back(c);
    s.store.push_back(std::move(zk));
    s.clean.push_back(z0);
    s.noise.push_back(std::move(z1));
}

// Pointers into store are wired once the vector stops growing.
void wire(TrainSample& s) {
    std::size_t i = 0;
    for (auto& c : s.context) c.latent = &s.store[i++];
    for (auto& c : s.targets) c.latent = &s.store[i++];
}

}  // namespace

TrainSample make_sample(const EpisodeData& ep, Stage stage, const ModelConfig& cfg, const TrainOptions& opt,
                        Rng& r) {
    const std::size_t n = ep.size();
    if (n < min_chunks(stage, opt.window)) throw std::invalid_argument("make_sample: episode too short");
    const bool reframed = cfg.rope == RopeMode::reframed;
    TrainSample s;
    switch (stage) {
        case Stage::s1a:
        case Stage::s1b: {
            const std::size_t w = static_cast<std::size_t>(opt.window);
            const std::size_t j = 1 + r.below(n - w);
            push_context(s, ep, j - 1, reframed ? 0 : static_cast<int>(j - 1));
            const double shared = r.uniform();
            for (std::size_t i = 0; i < w; ++i) {
                const double k = stage == Stage::s1a ? shared : r.uniform();
                push_target(s, ep, j + i, reframed ? static_cast<int>(1 + i) : static_cast<int>(j + i), k, r);
            }
            s.mode = stage == Stage::s1a ? TargetAttention::bidirectional : TargetAttention::causal;
            s.first_target = static_cast<std::int64_t>(j);
            break;
        }
        case Stage::s2: {
            const std::size_t j = 1 + r.below(n - 1);
            const MemoryBank bank = ep.prefix(j);
            const ContextSet ctx = reconstitute(bank, ep.chunk_poses[j][1], opt.retrieval);
            const Reframing rf = reframe(ctx, bank, cfg.rope, static_cast<std::int64_t>(j));
            for (std::size_t i = 0; i < rf.order.size(); ++i) push_context(s, ep, rf.order[i], rf.chunk_positions[i]);
            push_target(s, ep, j, rf.current_position, r.uniform(), r);
            s.mode = TargetAttention::causal;
            s.first_target = static_cast<std::int64_t>(j);
            break;
        }
        case Stage::teacher: {
            const std::size_t w = static_cast<std::size_t>(opt.window);
            const std::size_t j = 1 + r.below(n - w);
            std::vector<std::vector<std::int64_t>> per_chunk;
            std::vector<std::int64_t> window;
            for (std::size_t i = j; i < j + w; ++i) {
                const MemoryBank bank = ep.prefix(i);
                const ContextSet ctx = reconstitute(bank, ep.chunk_poses[i][1], opt.retrieval);
                std::vector<std::int64_t> caps;
                for (auto idx : ctx.ordered(bank)) caps.push_back(bank[idx].capture_index);
                per_chunk.push_back(std::move(caps));
                window.push_back(static_cast<std::int64_t>(i));
            }
            const auto tea = align_context(per_chunk, window);
            for (std::size_t i = 0; i < tea.size(); ++i) {
                push_context(s, ep, static_cast<std::size_t>(tea[i]), reframed ? static_cast<int>(i) : static_cast<int>(tea[i]));
            }
            const double k = r.uniform();
            for (std::size_t i = 0; i < w; ++i) {
                const int pos = reframed ? static_cast<int>(tea.size() + i) : static_cast<int>(j + i);
                push_target(s, ep, j + i, pos, k, r);
            }
            s.mode = TargetAttention::bidirectional;
            s.first_target = static_cast<std::int64_t>(j);
            break;
        }
    }
    wire(s);
    return s;
}

Var<float> fm_loss(Tape<float>& tape, const WorldModel& model, const TrainSample& s) {
    const Var<float> pred = model.forward(tape, s.context, s.targets, s.mode);
    const std::size_t rows = s.clean.empty() ? 0 : s.clean[0].dim(0);
    Tensorf v({rows * s.clean.size(), s.clean.empty() ? 0 : s.clean[0].dim(1)});
    std::size_t o = 0;
    for (std::size_t t = 0; t < s.clean.size(); ++t) {
        for (std::size_t i = 0; i < s.clean[t].size(); ++i) v[o++] = s.clean[t][i] - s.noise[t][i];
    }
    return mse(pred, tape.constant(std::move(v)));
}

Trainer::Trainer(WorldModel& model, const std::vector<EpisodeData>& data, TrainOptions opt)
    : model_(model),
      data_(data),
      opt_(std::move(opt)),
      params_(model.params()),
      adam_(params_, AdamConfig{.lr = opt_.lr}),
      rng_(opt_.seed, 0x7472616eULL) {
    for (std::size_t i = 0; i < data_.size(); ++i) {
        if (data_[i].size() >= min_chunks(opt_.stage, opt_.window)) eligible_.push_back(i);
    }
    if (eligible_.empty()) throw std::invalid_argument("trainer: no episode is long enough for stage " + to_string(opt_.stage));
    if (opt_.batch < 1) throw std::invalid_argument("trainer: batch must be >= 1");
}

double Trainer::current_lr() const {
    if (opt_.warmup > 0 && step_ < opt_.warmup) return opt_.lr * static_cast<double>(step_ + 1) / opt_.warmup;
    return opt_.lr;
}

double Trainer::step() {
    adam_.zero_grad();
    double total = 0;
    for (int b = 0; b < opt_.batch; ++b) {
        const EpisodeData& ep = data_[eligible_[rng_.below(eligible_.size())]];
        const TrainSample s = make_sample(ep, opt_.stage, model_.config(), opt_, rng_);
        Tape<float> tape;
        Var<float> loss = fm_loss(tape, model_, s);
        const double lv = loss.value()[0];
        if (!std::isfinite(lv)) throw NumericError("training loss is not finite at step " + std::to_string(step_));
        total += lv;
        tape.backward(scale(loss, 1.0f / static_cast<float>(opt_.batch)));
    }
    if (opt_.grad_clip > 0) clip_grad_norm(params_, opt_.grad_clip);
    adam_.set_lr(current_lr());
    adam_.step();
    ++step_;
    return total / opt_.batch;
}

json Trainer::log_line(double loss) const {
    return {{"step", step_}, {"stage", to_string(opt_.stage)}, {"loss", loss}, {"lr", current_lr()},
            {"seed", opt_.seed}};
}

std::vector<double> train(WorldModel& model, const std::vector<EpisodeData>& data, const TrainOptions& opt,
                          std::ostream* log) {
    Trainer t(model, data, opt);
    std::vector<double> losses;
    losses.reserve(opt.steps);
    for (int i = 0; i < opt.steps; ++i) {
        const double l = t.step();
        losses.push_back(l);
        if (log) {
            json line = t.log_line(l);
            line["step"] = i;
            *log << line.dump() << "\n";
        }
    }
    if (log) log->flush();
    return losses;
}

}  // namespace mw
