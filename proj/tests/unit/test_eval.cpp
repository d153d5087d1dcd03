#include <cmath>
#include <numbers>
#include <set>

#include "../common/fixtures.hpp"
#include "doctest.h"
#include "mw/eval.hpp"
#include "mw/hash.hpp"

using namespace mw;
using namespace mw::testing;

namespace {

Frame random_frame(int w, int h, Rng& r) {
    Frame f{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * 3)};
    for (auto& b : f.rgb) b = static_cast<std::uint8_t>(r.below(256));
    return f;
}

// Two-pass SSIM, one channel at a time.
double ssim_oracle(const Frame& a, const Frame& b) {
    const double c1 = std::pow(0.01 * 255, 2), c2 = std::pow(0.03 * 255, 2);
    double total = 0;
    int count = 0;
    for (int ch = 0; ch < 3; ++ch) {
        for (int y0 = 0; y0 <= a.height - 7; ++y0) {
            for (int x0 = 0; x0 <= a.width - 7; ++x0) {
                std::vector<double> xa, xb;
                for (int y = 0; y < 7; ++y) {
                    for (int x = 0; x < 7; ++x) {
                        const std::size_t o = (static_cast<std::size_t>(y0 + y) * a.width + x0 + x) * 3 + ch;
                        xa.push_back(a.rgb[o]);
                        xb.push_back(b.rgb[o]);
                    }
                }
                double ma = 0, mb = 0;
                for (int i = 0; i < 49; ++i) ma += xa[i] / 49, mb += xb[i] / 49;
                double va = 0, vb = 0, cv = 0;
                for (int i = 0; i < 49; ++i) {
                    va += (xa[i] - ma) * (xa[i] - ma) / 49;
                    vb += (xb[i] - mb) * (xb[i] - mb) / 49;
                    cv += (xa[i] - ma) * (xb[i] - mb) / 49;
                }
                total += (2 * ma * mb + c1) * (2 * cv + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
        }
    }
    return total / count;
}

EvalSpec small_spec() {
    EvalSpec s;
    s.episodes = 20;
    s.length = 32;
    s.world_size = 10;
    s.seed = 31;
    s.pose_episodes = 2;
    s.pose_length = 16;
    return s;
}

}  // namespace

TEST_CASE("psnr and ssim on identical frames") {
    Rng r(1);
    const Frame a = random_frame(16, 16, r);
    CHECK(psnr(a, a) == kPsnrCap);
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(mse(a, a) == 0.0);
}

TEST_CASE("psnr matches the closed form for small perturbations") {
    Rng r(2);
    for (int trial = 0; trial < 20; ++trial) {
        const Frame a = random_frame(24, 16, r);
        Frame b = a;
        double sq = 0;
        for (std::size_t i = 0; i < b.rgb.size(); ++i) {
            const int v = std::clamp(static_cast<int>(a.rgb[i]) + static_cast<int>(std::lround(r.uniform(-1, 1))), 0, 255);
            b.rgb[i] = static_cast<std::uint8_t>(v);
            sq += std::pow(v - a.rgb[i], 2);
        }
        const double m = sq / static_cast<double>(a.rgb.size());
        if (m == 0) continue;
        CHECK(std::abs(psnr(a, b) - 10 * std::log10(255.0 * 255.0 / m)) < 0.01);
    }
}

TEST_CASE("ssim is symmetric and matches a two-pass reference") {
    Rng r(3);
    for (int trial = 0; trial < 50; ++trial) {
        const Frame a = random_frame(12, 10, r);
        Frame b = trial % 2 ? random_frame(12, 10, r) : a;
        if (trial % 2 == 0) {
            for (auto& v : b.rgb) v = static_cast<std::uint8_t>(std::clamp(v + static_cast<int>(r.below(41)) - 20, 0, 255));
        }
        const double ab = ssim(a, b), ba = ssim(b, a);
        CHECK(ab == ba);
        CHECK(ab <= 1.0 + 1e-12);
        CHECK(ab >= -1.0 - 1e-12);
        CHECK(std::abs(ab - ssim_oracle(a, b)) < 1e-9);
    }
}

TEST_CASE("metrics reject mismatched shapes") {
    Rng r(4);
    const Frame a = random_frame(16, 16, r), b = random_frame(16, 8, r);
    CHECK_THROWS_AS(psnr(a, b), ShapeError);
    CHECK_THROWS_AS(ssim(a, b), ShapeError);
    const Frame small = random_frame(6, 6, r);
    CHECK_THROWS_AS(ssim(small, small), ShapeError);
}

TEST_CASE("revisit protocol: the simulator is revisit-exact") {
    const auto cfg = tiny_config();
    const auto eps = revisit_episodes(small_spec(), cfg);
    REQUIRE(eps.size() == 20);
    const auto res = revisit_protocol(oracle_generator(), eps);
    CHECK(res.psnr == kPsnrCap);
    CHECK(res.ssim == doctest::Approx(1.0));
    CHECK(res.frames == 20 * 16);
    CHECK(res.episode_psnr.size() == 20);

    // Corrupting the return half lowers the score.
    const EpisodeGenerator noisy = [](const Episode& ep) {
        GeneratedEpisode g;
        g.frames = ep.frames;
        Rng r(ep.traj_seed);
        for (std::size_t t = ep.length() / 2; t < ep.length(); ++t) {
            for (auto& v : g.frames[t].rgb) v = static_cast<std::uint8_t>(std::clamp(v + static_cast<int>(r.below(21)) - 10, 0, 255));
        }
        return g;
    };
    const auto bad = revisit_protocol(noisy, eps);
    CHECK(bad.psnr < 40);
    CHECK(bad.ssim < 1.0);

    auto walks = pose_episodes(small_spec(), cfg);
    CHECK_THROWS_AS(revisit_protocol(oracle_generator(), walks), std::invalid_argument);
}

TEST_CASE("pose error: oracle frames are exact, a yaw offset is recovered") {
    const auto cfg = tiny_config();
    const auto eps = pose_episodes(small_spec(), cfg);
    const auto exact = pose_error(oracle_generator(), eps);
    CHECK(exact.frames == 2 * 3);
    CHECK(exact.r_err_deg == 0.0);
    CHECK(exact.t_err == 0.0);

    const EpisodeGenerator turned = [](const Episode& ep) {
        const GridWorld w = GridWorld::generate(ep.world_seed, ep.world_size);
        GeneratedEpisode g;
        for (auto p : ep.poses) {
            p.yaw = wrap_angle(p.yaw + 15.0 * std::numbers::pi / 180.0);
            g.frames.push_back(render(w, p));
        }
        return g;
    };
    const auto off = pose_error(turned, eps);
    CHECK(off.r_err_deg == doctest::Approx(15.0).epsilon(1e-9));
    CHECK(off.t_err == 0.0);
}

TEST_CASE("generated episodes start from the ground-truth chunk") {
    const auto cfg = tiny_config();
    WorldModel model(cfg);
    randomize(model, 21, 0.2);
    auto spec = small_spec();
    spec.episodes = 2;
    const auto eps = revisit_episodes(spec, cfg);
    RolloutOptions opt;
    opt.retrieval = RetrievalOptions::for_world(spec.world_size, 3, 1);
    opt.noise_seed = 5;
    const auto g = generate_episode(model, eps[0], opt);
    REQUIRE(g.frames.size() == eps[0].length());
    for (int f = 0; f < kChunkFrames; ++f) CHECK(g.frames[f] == eps[0].frames[f]);
    CHECK(g.chunk_ms.size() == eps[0].chunks() - 1);
    CHECK(g.retrievals.size() == eps[0].chunks() - 1);
    const auto again = generate_episode(model, eps[0], opt);
    CHECK(again.frames == g.frames);

    const auto a = evaluate(model, opt, spec, "x");
    const auto b = evaluate(model, opt, spec, "x");
    CHECK(a.revisit.psnr == b.revisit.psnr);
    CHECK(a.pose.t_err == b.pose.t_err);
    CHECK(a.checkpoint_hash == hex64(model.parameter_hash()));
    const auto j = a.to_json();
    CHECK(j.contains("revisit"));
    CHECK(j["latency"].contains("p95_ms"));
}

TEST_CASE("latency stats") {
    const auto s = LatencyStats::of({5, 1, 3, 2, 4});
    CHECK(s.mean == 3.0);
    CHECK(s.p50 == 3.0);
    CHECK(s.max == 5.0);
    CHECK(LatencyStats::of({}).mean == 0.0);
}

TEST_CASE("ablation grid has twelve cells and reports for each") {
    const auto grid = ablation_grid();
    CHECK(grid.size() == 12);
    std::set<std::string> names;
    for (const auto& c : grid) names.insert(c.name());
    CHECK(names.size() == 12);

    const auto cfg = tiny_config();
    DataSpec ds;
    ds.episodes = 3;
    ds.world_size = 10;
    ds.length = 32;
    ds.frame_w = cfg.frame_w;
    ds.frame_h = cfg.frame_h;
    const auto data = prepare_episodes(generate_episodes(ds), cfg);
    Budget b;
    b.s1a = b.s1b = b.s2 = 1;
    b.batch = 1;
    auto spec = small_spec();
    spec.episodes = 1;
    spec.length = 16;
    spec.pose_episodes = 0;
    const auto rs = ablate(cfg, data, b, spec, 3);
    REQUIRE(rs.size() == 12);
    const auto table = ablation_table(rs);
    CHECK(std::count(table.begin(), table.end(), '\n') == 13);
    const auto j = ablation_json(rs);
    CHECK(j.size() == 12);
    CHECK(j[11]["action"] == "dual");
}
