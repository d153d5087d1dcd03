#include "mw/distill.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mw {

using nlohmann::json;

int progressive_max_chunks(int step, int total, const DistillOptions& opt) {
    if (opt.phase_fractions.size() != opt.phase_max_chunks.size() || opt.phase_max_chunks.empty()) {
        throw std::invalid_argument("distill: phase lists differ in length");
    }
    const double frac = total > 0 ? static_cast<double>(step) / total : 0.0;
    int m = opt.phase_max_chunks.front();
    for (std::size_t i = 0; i < opt.phase_fractions.size(); ++i) {
        if (frac >= opt.phase_fractions[i]) m = std::max(m, opt.phase_max_chunks[i]);
    }
    return m;
}

std::size_t sample_history(int m, std::size_t chunks, int window, Rng& r) {
    if (chunks < static_cast<std::size_t>(window) + 1) throw std::invalid_argument("sample_history: episode too short");
    const std::size_t jmax = std::min<std::size_t>(static_cast<std::size_t>(std::max(m, 0)), chunks - window - 1);
    return r.below(jmax + 1);
}

RolloutWindow self_rollout(Tape<float>& tape, const WorldModel& student, const EpisodeData& ep, std::size_t history,
                           const DistillOptions& opt, Rng& r, const std::vector<int>& steps) {
    const auto& cfg = student.config();
    const std::size_t n = static_cast<std::size_t>(opt.window);
    if (history < 1 || history + n > ep.size()) throw std::invalid_argument("self_rollout: window exceeds episode");
    if (!steps.empty() && steps.size() != n) throw std::invalid_argument("self_rollout: steps size mismatch");
    check_schedule(opt.schedule);
    const int d = static_cast<int>(opt.schedule.size());

    RolloutWindow w;
    w.history = history;
    w.bank = ep.prefix(history);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t cap = history + i;
        ChunkAction a{ep.chunk_keys[cap], ep.chunk_poses[cap]};
        const ContextSet ctx = reconstitute(w.bank, a.poses[1], opt.retrieval);
        const Reframing rf = reframe(ctx, w.bank, cfg.rope, static_cast<std::int64_t>(cap));
        std::vector<std::int64_t> caps;
        for (auto idx : rf.order) caps.push_back(w.bank[idx].capture_index);
        const auto cchunks = context_chunks(w.bank, rf);

        const int s = steps.empty() ? 1 + static_cast<int>(r.below(static_cast<std::uint64_t>(d))) : steps[i];
        if (s < 1 || s > d) throw std::invalid_argument("self_rollout: step count outside 1..d");
        Tensorf x = gaussian_like(ep.chunks[cap].shape(), r);
        w.noise.push_back(x);

        SeqChunk<float> target;
        target.keys = a.keys;
        target.poses = a.poses;
        target.position = rf.current_position;
        if (s > 1) {
            KVCache<float> cache;
            student.build_cache(cchunks, cache);
            // Euler over the first s-1 knots, stopping at k_{s-1}.
            for (int t = 0; t < s - 1; ++t) {
                target.latent = &x;
                target.k = opt.schedule[t];
                Tape<float> nt(false);
                const Tensorf v = student.forward_cached(nt, cache, {target}, TargetAttention::causal).value();
                const float dk = static_cast<float>(opt.schedule[t] - opt.schedule[t + 1]);
                for (std::size_t e = 0; e < x.size(); ++e) x[e] += dk * v[e];
            }
        }
        const double kl = opt.schedule[s - 1];
        target.latent = &x;
        target.k = kl;
        const Var<float> v = student.forward(tape, cchunks, {target}, TargetAttention::causal);
        const Var<float> sample = add(tape.constant(x), scale(v, static_cast<float>(kl)));

        ChunkRecord rec;
        rec.capture_index = static_cast<std::int64_t>(cap);
        rec.latent = sample.value();
        rec.poses = a.poses;
        rec.keys = a.keys;
        w.bank.append(std::move(rec));

        w.window.push_back(static_cast<std::int64_t>(cap));
        w.contexts.push_back(std::move(caps));
        w.steps.push_back(s);
        w.samples.push_back(sample);
        w.actions.push_back(a);
    }
    return w;
}

TeacherInput teacher_input(const RolloutWindow& w, const std::vector<Tensorf>& noisy, const std::vector<double>& k,
                           const ModelConfig& cfg) {
    if (noisy.size() != w.window.size() || k.size() != w.window.size()) {
        throw std::invalid_argument("teacher_input: one noisy latent and level per window chunk");
    }
    const bool reframed = cfg.rope == RopeMode::reframed;
    TeacherInput t;
    t.context_captures = align_context(w.contexts, w.window);
    t.store.reserve(t.context_captures.size() + noisy.size());
    for (std::size_t i = 0; i < t.context_captures.size(); ++i) {
        const std::ptrdiff_t idx = w.bank.find(t.context_captures[i]);
        if (idx < 0) throw std::logic_error("teacher_input: context chunk missing from the bank");
        const ChunkRecord& rec = w.bank[static_cast<std::size_t>(idx)];
        t.store.push_back(rec.latent);
        SeqChunk<float> c;
        c.keys = rec.keys;
        c.poses = rec.poses;
        c.position = reframed ? static_cast<int>(i) : static_cast<int>(rec.capture_index);
        t.context.push_back(c);
    }
    for (std::size_t i = 0; i < noisy.size(); ++i) {
        t.store.push_back(noisy[i]);
        SeqChunk<float> c;
        c.k = k[i];
        c.keys = w.actions[i].keys;
        c.poses = w.actions[i].poses;
        c.position = reframed ? static_cast<int>(t.context_captures.size() + i) : static_cast<int>(w.window[i]);
        t.targets.push_back(c);
    }
    std::size_t s = 0;
    for (auto& c : t.context) c.latent = &t.store[s++];
    for (auto& c : t.targets) c.latent = &t.store[s++];
    return t;
}

Tensorf dmd_direction(const Tensorf& x, const Tensorf& z0_real, const Tensorf& z0_fake) {
    if (x.shape() != z0_real.shape() || x.shape() != z0_fake.shape()) throw ShapeError("dmd_direction: shape mismatch");
    double norm = 0;
    for (std::size_t i = 0; i < x.size(); ++i) norm += std::abs(static_cast<double>(x[i]) - z0_real[i]);
    norm = std::max(norm / static_cast<double>(x.size()), 1e-8);
    Tensorf g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        g[i] = static_cast<float>((static_cast<double>(z0_fake[i]) - z0_real[i]) / norm);
    }
    return g;
}

Distiller::Distiller(WorldModel& student, const WorldModel& teacher, WorldModel& fake,
                     const std::vector<EpisodeData>& data, DistillOptions opt)
    : student_(student),
      teacher_(teacher),
      fake_(fake),
      data_(data),
      opt_(std::move(opt)),
      sp_(student.params()),
      fp_(fake.params()),
      s_adam_(sp_, AdamConfig{.lr = opt_.lr_student}),
      f_adam_(fp_, AdamConfig{.lr = opt_.lr_fake}),
      rng_(opt_.seed, 0x646d64ULL) {
    bool any = false;
    for (const auto& e : data_) any = any || e.size() >= static_cast<std::size_t>(opt_.window) + 1;
    if (!any) throw std::invalid_argument("distill: no episode is long enough");
}

namespace {

// Stacks per-chunk tensors into one [n*rows x C] tensor.
Tensorf stack(const std::vector<Tensorf>& xs) {
    Tensorf out({xs.size() * xs[0].dim(0), xs[0].dim(1)});
    std::size_t o = 0;
    for (const auto& x : xs) {
        std::copy(x.vec().begin(), x.vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(o));
        o += x.size();
    }
    return out;
}

}  // namespace

DmdStats Distiller::step() {
    DmdStats st;
    st.m = progressive_max_chunks(static_cast<int>(step_), opt_.steps, opt_);
    const EpisodeData* ep = nullptr;
    while (!ep) {
        const auto& e = data_[rng_.below(data_.size())];
        if (e.size() >= static_cast<std::size_t>(opt_.window) + 1) ep = &e;
    }
    st.j = sample_history(st.m, ep->size(), opt_.window, rng_);

    // Student rollout and DMD update.
    Tape<float> tape;
    RolloutWindow w = self_rollout(tape, student_, *ep, st.j + 1, opt_, rng_);
    st.steps = w.steps;
    const std::size_t n = w.window.size();
    std::vector<Tensorf> xs, noisy, z1s;
    std::vector<double> ks(n);
    const double shared = rng_.uniform(opt_.k_min, opt_.k_max);
    for (std::size_t i = 0; i < n; ++i) {
        ks[i] = opt_.per_chunk_k ? rng_.uniform(opt_.k_min, opt_.k_max) : shared;
        xs.push_back(w.samples[i].value());
        Tensorf z1 = gaussian_like(xs.back().shape(), rng_);
        noisy.push_back(noisy_latent(xs.back(), z1, ks[i]));
        z1s.push_back(std::move(z1));
    }
    st.k = shared;
    const TeacherInput ti = teacher_input(w, noisy, ks, student_.config());
    st.context_size = ti.context.size();
    Tensorf v_real, v_fake;
    {
        Tape<float> t1(false), t2(false);
        v_real = teacher_.forward(t1, ti.context, ti.targets, TargetAttention::bidirectional).value();
        v_fake = fake_.forward(t2, ti.context, ti.targets, TargetAttention::bidirectional).value();
    }
    const Tensorf x = stack(xs);
    const Tensorf zk = stack(noisy);
    const std::size_t rows = xs[0].dim(0), cols = xs[0].dim(1);
    Tensorf z0_real(x.shape()), z0_fake(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double k = ks[i / (rows * cols)];
        z0_real[i] = static_cast<float>(zk[i] + k * v_real[i]);
        z0_fake[i] = static_cast<float>(zk[i] + k * v_fake[i]);
    }
    const Tensorf g = dmd_direction(x, z0_real, z0_fake);
    double gn = 0;
    for (float v : g.vec()) gn += static_cast<double>(v) * v;
    st.grad_norm = std::sqrt(gn);
    Tensorf tgt(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) tgt[i] = x[i] - g[i];
    const Var<float> loss = scale(mse(concat_rows(w.samples), tape.constant(std::move(tgt))), 0.5f);
    s_adam_.zero_grad();
    tape.backward(loss);
    st.param_grad_norm = opt_.grad_clip > 0 ? clip_grad_norm(sp_, opt_.grad_clip) : grad_norm(sp_);
    s_adam_.step();

    // Fake-score flow matching on the student's own (detached) samples.
    std::vector<Tensorf> noisy2;
    std::vector<double> ks2(n);
    Tensorf vt(x.shape());
    const double shared2 = rng_.uniform();
    for (std::size_t i = 0; i < n; ++i) {
        ks2[i] = opt_.per_chunk_k ? rng_.uniform() : shared2;
        const Tensorf z1 = gaussian_like(xs[i].shape(), rng_);
        noisy2.push_back(noisy_latent(xs[i], z1, ks2[i]));
        const Tensorf v = flow_velocity(xs[i], z1);
        std::copy(v.vec().begin(), v.vec().end(), vt.vec().begin() + static_cast<std::ptrdiff_t>(i * v.size()));
    }
    const TeacherInput fi = teacher_input(w, noisy2, ks2, fake_.config());
    Tape<float> ft;
    const Var<float> fl = mse(fake_.forward(ft, fi.context, fi.targets, TargetAttention::bidirectional),
                              ft.constant(std::move(vt)));
    st.fake_loss = fl.value()[0];
    if (!std::isfinite(st.fake_loss)) throw NumericError("distill: fake-score loss is not finite");
    f_adam_.zero_grad();
    ft.backward(fl);
    if (opt_.grad_clip > 0) clip_grad_norm(fp_, opt_.grad_clip);
    f_adam_.step();
    ++step_;
    return st;
}

json Distiller::log_line(const DmdStats& s) const {
    return {{"step", step_ - 1},       {"m", s.m},
            {"j", s.j},                {"s", s.steps},
            {"k", s.k},                {"dmd_grad_norm", s.grad_norm},
            {"param_grad_norm", s.param_grad_norm}, {"beta_loss", s.fake_loss},
            {"context", s.context_size}, {"seed", opt_.seed}};
}

std::vector<DmdStats> distill(WorldModel& student, const WorldModel& teacher, WorldModel& fake,
                              const std::vector<EpisodeData>& data, const DistillOptions& opt, std::ostream* log) {
    Distiller d(student, teacher, fake, data, opt);
    std::vector<DmdStats> out;
    for (int i = 0; i < opt.steps; ++i) {
        out.push_back(d.step());
        if (log) *log << d.log_line(out.back()).dump() << "\n";
    }
    if (log) log->flush();
    return out;
}

}  // namespace mw
