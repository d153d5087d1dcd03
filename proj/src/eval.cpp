#include "mw/eval.hpp"

#include "mw/hash.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace mw {

using nlohmann::json;

namespace {

void check_same(const Frame& a, const Frame& b, const char* what) {
    if (a.width != b.width || a.height != b.height || a.rgb.size() != b.rgb.size()) {
        throw ShapeError(std::string(what) + ": frame sizes differ");
    }
    if (a.rgb.size() != static_cast<std::size_t>(a.width) * a.height * 3) {
        throw ShapeError(std::string(what) + ": malformed frame");
    }
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double mse(const Frame& a, const Frame& b) {
    check_same(a, b, "mse");
    double s = 0;
    for (std::size_t i = 0; i < a.rgb.size(); ++i) {
        const double d = static_cast<double>(a.rgb[i]) - static_cast<double>(b.rgb[i]);
        s += d * d;
    }
    return a.rgb.empty() ? 0.0 : s / static_cast<double>(a.rgb.size());
}

double psnr(const Frame& a, const Frame& b) {
    const double m = mse(a, b);
    if (m <= 0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / m));
}

double ssim(const Frame& a, const Frame& b) {
    check_same(a, b, "ssim");
    constexpr int win = 7;
    constexpr double c1 = (0.01 * 255) * (0.01 * 255);
    constexpr double c2 = (0.03 * 255) * (0.03 * 255);
    if (a.width < win || a.height < win) throw ShapeError("ssim: frame smaller than the 7x7 window");
    const double n = win * win;
    double total = 0;
    std::size_t count = 0;
    for (int ch = 0; ch < 3; ++ch) {
        for (int y0 = 0; y0 + win <= a.height; ++y0) {
            for (int x0 = 0; x0 + win <= a.width; ++x0) {
                double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                for (int y = y0; y < y0 + win; ++y) {
                    for (int x = x0; x < x0 + win; ++x) {
                        const std::size_t o = (static_cast<std::size_t>(y) * a.width + x) * 3 + ch;
                        const double va = a.rgb[o], vb = b.rgb[o];
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                const double ma = sa / n, mb = sb / n;
                const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
        }
    }
    return total / static_cast<double>(count);
}

namespace {

ChunkAction episode_action(const Episode& ep, std::size_t c) {
    ChunkAction a;
    const std::size_t f0 = c * kChunkFrames;
    a.keys = dominant_keys(std::span(ep.actions).subspan(f0, kChunkFrames));
    for (int f = 0; f < kChunkFrames; ++f) a.poses[f] = ep.poses[f0 + f];
    return a;
}

}  // namespace

GeneratedEpisode generate_episode(const WorldModel& model, const Episode& ep, const RolloutOptions& opt) {
    const auto& cfg = model.config();
    if (ep.frames.size() < static_cast<std::size_t>(kChunkFrames)) {
        throw std::invalid_argument("generate_episode: episode needs its first chunk rendered");
    }
    GeneratedEpisode g;
    Rollout ro(model, opt);
    const Tensorf first = patchify<float>(std::span(ep.frames).subspan(0, kChunkFrames), cfg.patch);
    ro.commit(first, episode_action(ep, 0));
    g.frames.insert(g.frames.end(), ep.frames.begin(), ep.frames.begin() + kChunkFrames);
    for (std::size_t c = 1; c < ep.chunks(); ++c) {
        const ChunkResult r = ro.step(episode_action(ep, c));
        auto frames = unpatchify(r.latent, cfg.frame_w, cfg.frame_h, cfg.patch);
        g.frames.insert(g.frames.end(), std::make_move_iterator(frames.begin()), std::make_move_iterator(frames.end()));
        g.chunk_ms.push_back(r.ms);
        g.retrievals.push_back(r.retrieval);
    }
    return g;
}

EpisodeGenerator model_generator(const WorldModel& model, RolloutOptions opt) {
    return [&model, opt](const Episode& ep) { return generate_episode(model, ep, opt); };
}

EpisodeGenerator oracle_generator() {
    return [](const Episode& ep) {
        GeneratedEpisode g;
        if (ep.frames.size() == ep.poses.size()) {
            g.frames = ep.frames;
        } else {
            const GridWorld w = GridWorld::generate(ep.world_seed, ep.world_size);
            for (const auto& p : ep.poses) g.frames.push_back(render(w, p));
        }
        return g;
    };
}

RevisitResult revisit_protocol(const EpisodeGenerator& gen, const std::vector<Episode>& episodes) {
    RevisitResult res;
    std::vector<double> ps, ss;
    for (const auto& ep : episodes) {
        if (ep.kind != TrajectoryKind::out_and_back) throw std::invalid_argument("revisit_protocol: needs out_and_back episodes");
        const GeneratedEpisode g = gen(ep);
        const std::size_t n = g.frames.size();
        if (n != ep.length()) throw ShapeError("revisit_protocol: generator returned the wrong number of frames");
        const std::size_t mid = n / 2;
        std::vector<double> ep_ps;
        for (std::size_t t = mid; t < n; ++t) {
            const std::size_t mirror = 2 * mid - 1 - t;
            ep_ps.push_back(psnr(g.frames[t], g.frames[mirror]));
            ss.push_back(ssim(g.frames[t], g.frames[mirror]));
        }
        ps.insert(ps.end(), ep_ps.begin(), ep_ps.end());
        res.episode_psnr.push_back(mean_of(ep_ps));
        res.chunk_ms.insert(res.chunk_ms.end(), g.chunk_ms.begin(), g.chunk_ms.end());
    }
    res.psnr = mean_of(ps);
    res.ssim = mean_of(ss);
    res.frames = ps.size();
    return res;
}

CameraPose best_matching_pose(const GridWorld& world, const Frame& frame, const CameraPose& commanded,
                              const PoseLattice& lat) {
    const double yaw_step = lat.yaw_step_deg * std::numbers::pi / 180.0;
    CameraPose best = commanded;
    double best_psnr = -1;
    double best_gap = std::numeric_limits<double>::infinity();
    for (int dy = -lat.yaw_radius; dy <= lat.yaw_radius; ++dy) {
        for (int ix = -lat.radius; ix <= lat.radius; ++ix) {
            for (int iy = -lat.radius; iy <= lat.radius; ++iy) {
                CameraPose p = commanded;
                if (dy != 0) p.yaw = wrap_angle(commanded.yaw + dy * yaw_step);
                p.position[0] += ix * lat.step;
                p.position[1] += iy * lat.step;
                if (!position_clear(world, p.position[0], p.position[1])) continue;
                const double q = psnr(render(world, p), frame);
                // Nearness in lattice units breaks ties.
                const double gap = std::hypot(ix, iy) + std::abs(dy);
                if (q > best_psnr || (q == best_psnr && gap < best_gap)) {
                    best_psnr = q;
                    best_gap = gap;
                    best = p;
                }
            }
        }
    }
    return best;
}

PoseErrorResult pose_error(const EpisodeGenerator& gen, const std::vector<Episode>& episodes, const PoseLattice& lat) {
    PoseErrorResult res;
    double r_sum = 0, t_sum = 0;
    for (const auto& ep : episodes) {
        const GeneratedEpisode g = gen(ep);
        if (g.frames.size() != ep.length()) throw ShapeError("pose_error: generator returned the wrong number of frames");
        const GridWorld w = GridWorld::generate(ep.world_seed, ep.world_size);
        for (std::size_t c = 1; c < ep.chunks(); ++c) {
            const std::size_t t = c * kChunkFrames + kChunkFrames - 1;
            const CameraPose& cmd = ep.poses[t];
            const CameraPose found = best_matching_pose(w, g.frames[t], cmd, lat);
            r_sum += std::abs(yaw_gap(cmd, found)) * 180.0 / std::numbers::pi;
            t_sum += std::hypot(found.position[0] - cmd.position[0], found.position[1] - cmd.position[1]);
            ++res.frames;
        }
    }
    if (res.frames > 0) {
        res.r_err_deg = r_sum / static_cast<double>(res.frames);
        res.t_err = t_sum / static_cast<double>(res.frames);
    }
    return res;
}

LatencyStats LatencyStats::of(std::vector<double> ms) {
    LatencyStats s;
    if (ms.empty()) return s;
    std::sort(ms.begin(), ms.end());
    auto q = [&](double p) { return ms[std::min(ms.size() - 1, static_cast<std::size_t>(p * static_cast<double>(ms.size())))]; };
    s.mean = mean_of(ms);
    s.p50 = q(0.5);
    s.p95 = q(0.95);
    s.max = ms.back();
    return s;
}

json LatencyStats::to_json() const { return {{"mean_ms", mean}, {"p50_ms", p50}, {"p95_ms", p95}, {"max_ms", max}}; }

std::vector<Episode> revisit_episodes(const EvalSpec& spec, const ModelConfig& cfg) {
    const Intrinsics k = Intrinsics::for_size(cfg.frame_w, cfg.frame_h);
    std::vector<Episode> out;
    for (int i = 0; i < spec.episodes; ++i) {
        const GridWorld w = GridWorld::generate(spec.seed * 1000 + static_cast<std::uint64_t>(i), spec.world_size);
        Episode ep = make_trajectory(w, TrajectoryKind::out_and_back, spec.length, spec.seed * 7919 + static_cast<std::uint64_t>(i), k);
        render_episode(w, ep);
        out.push_back(std::move(ep));
    }
    return out;
}

std::vector<Episode> pose_episodes(const EvalSpec& spec, const ModelConfig& cfg) {
    const Intrinsics k = Intrinsics::for_size(cfg.frame_w, cfg.frame_h);
    std::vector<Episode> out;
    for (int i = 0; i < spec.pose_episodes; ++i) {
        const std::uint64_t s = spec.seed + 500 + static_cast<std::uint64_t>(i);
        const GridWorld w = GridWorld::generate(s * 1000, spec.world_size);
        Episode ep = make_trajectory(w, TrajectoryKind::random_walk, spec.pose_length, s * 7919, k);
        render_episode(w, ep);
        out.push_back(std::move(ep));
    }
    return out;
}

json EvalReport::to_json() const {
    return {{"label", label},
            {"checkpoint_hash", checkpoint_hash},
            {"seed", seed},
            {"revisit", {{"psnr", revisit.psnr}, {"ssim", revisit.ssim}, {"frames", revisit.frames},
                         {"episode_psnr", revisit.episode_psnr}}},
            {"pose", {{"r_err_deg", pose.r_err_deg}, {"t_err", pose.t_err}, {"frames", pose.frames}}},
            {"latency", latency.to_json()}};
}

EvalReport evaluate(const WorldModel& model, const RolloutOptions& opt, const EvalSpec& spec, const std::string& label) {
    EvalReport r;
    r.label = label;
    r.seed = spec.seed;
    r.checkpoint_hash = hex64(model.parameter_hash());
    const auto gen = model_generator(model, opt);
    r.revisit = revisit_protocol(gen, revisit_episodes(spec, model.config()));
    if (spec.pose_episodes > 0) r.pose = pose_error(gen, pose_episodes(spec, model.config()));
    r.latency = LatencyStats::of(r.revisit.chunk_ms);
    return r;
}

Budget Budget::from_config(const Config& c) {
    Budget b;
    b.s1a = static_cast<int>(c.get_int("budget.s1a", b.s1a));
    b.s1b = static_cast<int>(c.get_int("budget.s1b", b.s1b));
    b.s2 = static_cast<int>(c.get_int("budget.s2", b.s2));
    b.teacher = static_cast<int>(c.get_int("budget.teacher", b.teacher));
    b.distill = static_cast<int>(c.get_int("budget.distill", b.distill));
    b.batch = static_cast<int>(c.get_int("train.batch", b.batch));
    b.lr = c.get_double("train.lr", b.lr);
    return b;
}

void train_student(WorldModel& model, const std::vector<EpisodeData>& data, const Budget& b, std::uint64_t seed,
                   const RetrievalOptions& retrieval, std::ostream* log) {
    const std::pair<Stage, int> stages[] = {{Stage::s1a, b.s1a}, {Stage::s1b, b.s1b}, {Stage::s2, b.s2}};
    std::uint64_t n = 0;
    for (const auto& [stage, steps] : stages) {
        ++n;
        if (steps <= 0) continue;
        TrainOptions o;
        o.stage = stage;
        o.steps = steps;
        o.batch = b.batch;
        o.lr = b.lr;
        o.seed = seed * 10 + n;
        o.retrieval = retrieval;
        train(model, data, o, log);
    }
}

std::string AblationCell::name() const {
    return to_string(action) + "/" + to_string(rope) + "/L" + std::to_string(L) + "K" + std::to_string(K);
}

std::vector<AblationCell> ablation_grid() {
    std::vector<AblationCell> g;
    for (auto a : {ActionMode::discrete, ActionMode::continuous, ActionMode::dual}) {
        for (auto r : {RopeMode::absolute, RopeMode::reframed}) {
            for (auto lk : {std::pair{3, 1}, std::pair{1, 3}}) g.push_back({a, r, lk.first, lk.second});
        }
    }
    return g;
}

std::vector<AblationResult> ablate(const ModelConfig& base, const std::vector<EpisodeData>& data, const Budget& budget,
                                   const EvalSpec& spec, std::uint64_t seed, const std::vector<AblationCell>& cells) {
    std::vector<AblationResult> out;
    for (const auto& cell : cells) {
        ModelConfig cfg = base;
        cfg.action = cell.action;
        cfg.rope = cell.rope;
        cfg.mem_L = cell.L;
        cfg.mem_K = cell.K;
        WorldModel m(cfg);
        const int ws = data.empty() ? spec.world_size : data.front().world_size;
        train_student(m, data, budget, seed, RetrievalOptions::for_world(ws, cell.L, cell.K));
        RolloutOptions ro;
        ro.retrieval = RetrievalOptions::for_world(spec.world_size, cell.L, cell.K);
        ro.noise_seed = seed;
        out.push_back({cell, evaluate(m, ro, spec, cell.name())});
    }
    return out;
}

std::string ablation_table(const std::vector<AblationResult>& rs) {
    std::ostringstream os;
    os << std::left << std::setw(28) << "cell" << std::right << std::setw(10) << "psnr" << std::setw(8) << "ssim"
       << std::setw(9) << "R_err" << std::setw(8) << "T_err" << std::setw(10) << "ms/chunk" << "\n";
    os << std::fixed;
    for (const auto& r : rs) {
        os << std::left << std::setw(28) << r.cell.name() << std::right << std::setprecision(2) << std::setw(10)
           << r.report.revisit.psnr << std::setprecision(3) << std::setw(8) << r.report.revisit.ssim
           << std::setprecision(2) << std::setw(9) << r.report.pose.r_err_deg << std::setprecision(3) << std::setw(8)
           << r.report.pose.t_err << std::setprecision(1) << std::setw(10) << r.report.latency.mean << "\n";
    }
    return os.str();
}

json ablation_json(const std::vector<AblationResult>& rs) {
    json a = json::array();
    for (const auto& r : rs) {
        json j = r.report.to_json();
        j["action"] = to_string(r.cell.action);
        j["rope"] = to_string(r.cell.rope);
        j["L"] = r.cell.L;
        j["K"] = r.cell.K;
        a.push_back(std::move(j));
    }
    return a;
}

}  // namespace mw
