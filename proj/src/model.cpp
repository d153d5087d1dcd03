#include "mw/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mw/checkpoint.hpp"
#include "mw/hash.hpp"
#include "mw/rng.hpp"

namespace mw {

using nlohmann::json;

std::string to_string(ActionMode m) {
    switch (m) {
        case ActionMode::none: return "none";
        case ActionMode::discrete: return "discrete";
        case ActionMode::continuous: return "continuous";
        case ActionMode::dual: return "dual";
    }
    return "?";
}

std::string to_string(RopeMode m) { return m == RopeMode::reframed ? "reframed" : "absolute"; }

ActionMode action_mode_from_string(const std::string& s) {
    if (s == "none") return ActionMode::none;
    if (s == "discrete") return ActionMode::discrete;
    if (s == "continuous") return ActionMode::continuous;
    if (s == "dual") return ActionMode::dual;
    throw std::invalid_argument("unknown action mode '" + s + "'");
}

RopeMode rope_mode_from_string(const std::string& s) {
    if (s == "reframed") return RopeMode::reframed;
    if (s == "absolute") return RopeMode::absolute;
    throw std::invalid_argument("unknown rope mode '" + s + "'");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (frame_w <= 0 || frame_h <= 0 || patch <= 0) fail("frame and patch sizes must be positive");
    if (frame_w % patch || frame_h % patch) fail("frame size must be divisible by patch");
    if (dim <= 0 || heads <= 0 || dim % heads) fail("dim must be divisible by heads");
    if (head_dim() % 4) fail("head dim must be divisible by 4");
    if (head_dim() % 8) fail("head dim must be divisible by 8 for 3-axis rope");
    if (blocks <= 0 || mlp_ratio <= 0) fail("blocks and mlp_ratio must be positive");
    if (freq_dim <= 0 || freq_dim % 2) fail("freq_dim must be positive and even");
    if (steps_teacher <= 0 || steps_student <= 0) fail("step counts must be positive");
    if (mem_L < 0 || mem_K < 0) fail("memory sizes must be non-negative");
    if (!(pose_scale > 0)) fail("pose_scale must be positive");
}

json ModelConfig::to_json() const {
    return json{{"frame_w", frame_w},     {"frame_h", frame_h},     {"patch", patch},
                {"dim", dim},             {"heads", heads},         {"blocks", blocks},
                {"mlp_ratio", mlp_ratio}, {"freq_dim", freq_dim},   {"rope_base", rope_base},
                {"action", to_string(action)}, {"rope", to_string(rope)}, {"pose_scale", pose_scale},
                {"steps_teacher", steps_teacher}, {"steps_student", steps_student},
                {"mem_L", mem_L},         {"mem_K", mem_K},         {"init_seed", init_seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
    ModelConfig c;
    c.frame_w = j.value("frame_w", c.frame_w);
    c.frame_h = j.value("frame_h", c.frame_h);
    c.patch = j.value("patch", c.patch);
    c.dim = j.value("dim", c.dim);
    c.heads = j.value("heads", c.heads);
    c.blocks = j.value("blocks", c.blocks);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.freq_dim = j.value("freq_dim", c.freq_dim);
    c.rope_base = j.value("rope_base", c.rope_base);
    c.action = action_mode_from_string(j.value("action", to_string(c.action)));
    c.rope = rope_mode_from_string(j.value("rope", to_string(c.rope)));
    c.pose_scale = j.value("pose_scale", c.pose_scale);
    c.steps_teacher = j.value("steps_teacher", c.steps_teacher);
    c.steps_student = j.value("steps_student", c.steps_student);
    c.mem_L = j.value("mem_L", c.mem_L);
    c.mem_K = j.value("mem_K", c.mem_K);
    c.init_seed = j.value("init_seed", c.init_seed);
    c.validate();
    return c;
}

ModelConfig ModelConfig::from_config(const Config& cf) {
    ModelConfig c;
    c.frame_w = static_cast<int>(cf.get_int("model.frame_w", c.frame_w));
    c.frame_h = static_cast<int>(cf.get_int("model.frame_h", c.frame_h));
    c.patch = static_cast<int>(cf.get_int("model.patch", c.patch));
    c.dim = static_cast<int>(cf.get_int("model.dim", c.dim));
    c.heads = static_cast<int>(cf.get_int("model.heads", c.heads));
    c.blocks = static_cast<int>(cf.get_int("model.blocks", c.blocks));
    c.mlp_ratio = static_cast<int>(cf.get_int("model.mlp_ratio", c.mlp_ratio));
    c.freq_dim = static_cast<int>(cf.get_int("model.freq_dim", c.freq_dim));
    c.rope_base = cf.get_double("model.rope_base", c.rope_base);
    c.action = action_mode_from_string(cf.get("model.action", to_string(c.action)));
    c.rope = rope_mode_from_string(cf.get("model.rope", to_string(c.rope)));
    c.pose_scale = cf.get_double("model.pose_scale", c.pose_scale);
    c.steps_teacher = static_cast<int>(cf.get_int("model.steps_teacher", c.steps_teacher));
    c.steps_student = static_cast<int>(cf.get_int("model.steps_student", c.steps_student));
    c.mem_L = static_cast<int>(cf.get_int("memory.L", c.mem_L));
    c.mem_K = static_cast<int>(cf.get_int("memory.K", c.mem_K));
    c.init_seed = static_cast<std::uint64_t>(cf.get_int("model.init_seed", static_cast<std::int64_t>(c.init_seed)));
    c.validate();
    return c;
}

std::string ModelConfig::hash() const {
    Fnv1a h;
    h.update(to_json().dump());
    return hex64(h.digest());
}

// ---------------------------------------------------------------- latents

template <class T>
Tensor<T> patchify(std::span<const Frame> frames, int patch) {
    if (frames.empty()) throw ShapeError("patchify: no frames");
    const int w = frames[0].width, h = frames[0].height;
    if (patch <= 0 || w % patch || h % patch) throw ShapeError("patchify: frame size not divisible by patch");
    const std::size_t tx = w / patch, ty = h / patch, c = 3 * patch * patch;
    Tensor<T> out({frames.size() * tx * ty, c});
    for (std::size_t f = 0; f < frames.size(); ++f) {
        const Frame& fr = frames[f];
        if (fr.width != w || fr.height != h) throw ShapeError("patchify: mixed frame sizes");
        for (std::size_t by = 0; by < ty; ++by) {
            for (std::size_t bx = 0; bx < tx; ++bx) {
                T* row = out.data() + ((f * ty + by) * tx + bx) * c;
                std::size_t o = 0;
                for (int py = 0; py < patch; ++py) {
                    const std::size_t src = ((by * patch + py) * w + bx * patch) * 3;
                    for (int q = 0; q < patch * 3; ++q) {
                        row[o++] = static_cast<T>(fr.rgb[src + q]) / T(127.5) - T(1);
                    }
                }
            }
        }
    }
    return out;
}

template <class T>
Frame unpatchify_frame(const Tensor<T>& latent, std::size_t frame, int width, int height, int patch) {
    if (patch <= 0 || width % patch || height % patch) throw ShapeError("unpatchify: bad frame size");
    const std::size_t tx = width / patch, ty = height / patch, c = 3 * patch * patch;
    if (latent.cols() != c || latent.rows() < (frame + 1) * tx * ty) {
        throw ShapeError("unpatchify: latent " + shape_str(latent.shape()) + " does not hold frame " +
                         std::to_string(frame));
    }
    Frame fr;
    fr.width = width;
    fr.height = height;
    fr.rgb.resize(static_cast<std::size_t>(width) * height * 3);
    for (std::size_t by = 0; by < ty; ++by) {
        for (std::size_t bx = 0; bx < tx; ++bx) {
            const T* row = latent.data() + ((frame * ty + by) * tx + bx) * c;
            std::size_t o = 0;
            for (int py = 0; py < patch; ++py) {
                const std::size_t dst = ((by * patch + py) * width + bx * patch) * 3;
                for (int q = 0; q < patch * 3; ++q) {
                    const double v = std::round((static_cast<double>(row[o++]) + 1.0) * 127.5);
                    fr.rgb[dst + q] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
                }
            }
        }
    }
    return fr;
}

template <class T>
std::vector<Frame> unpatchify(const Tensor<T>& latent, int width, int height, int patch) {
    if (patch <= 0 || width % patch || height % patch) throw ShapeError("unpatchify: bad frame size");
    const std::size_t per = static_cast<std::size_t>(width / patch) * (height / patch);
    if (latent.rows() % per) throw ShapeError("unpatchify: row count is not a whole number of frames");
    std::vector<Frame> out;
    for (std::size_t f = 0; f < latent.rows() / per; ++f) out.push_back(unpatchify_frame(latent, f, width, height, patch));
    return out;
}

KeyMask dominant_keys(std::span<const KeyMask> frame_keys) {
    KeyMask best = 0;
    int best_n = 0;
    for (std::size_t i = 0; i < frame_keys.size(); ++i) {
        const int n = static_cast<int>(std::count(frame_keys.begin(), frame_keys.end(), frame_keys[i]));
        if (n > best_n) {
            best_n = n;
            best = frame_keys[i];
        }
    }
    return best;
}

// ---------------------------------------------------------------- frustums

Mat4<double> ndc_projection(const Intrinsics& k) {
    if (k.width <= 0 || k.height <= 0 || !(std::abs(k.fx) > 0) || !(std::abs(k.fy) > 0)) {
        throw std::invalid_argument("singular intrinsics");
    }
    const double w = k.width, h = k.height;
    return {2 * k.fx / w, 0, 2 * k.cx / w - 1, 0,  //
            0, 2 * k.fy / h, 2 * k.cy / h - 1, 0,  //
            0, 0, 0, 1,                            //
            0, 0, 1, 0};
}

Mat4<double> build_dproj(const Mat3& r, const Vec3& t, const Intrinsics& k, double s) {
    Mat4<double> e{};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) e[i * 4 + j] = r[j * 3 + i];
        e[i * 4 + 3] = -(r[0 * 3 + i] * t[0] + r[1 * 3 + i] * t[1] + r[2 * 3 + i] * t[2]) * s;
    }
    e[15] = 1;
    return mat4_mul(ndc_projection(k), e);
}

Mat4<double> build_dproj(const CameraPose& pose, double s) {
    return build_dproj(pose.rotation(), pose.position, pose.intrinsics, s);
}

std::vector<double> timestep_features(double k, int freq_dim) {
    const int half = freq_dim / 2;
    std::vector<double> f(freq_dim);
    const double t = k * 1000.0;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        f[i] = std::cos(t * freq);
        f[half + i] = std::sin(t * freq);
    }
    return f;
}

Mask sequence_mask(std::size_t nc, std::size_t nt, std::size_t tpc, TargetAttention mode, bool include_ctx_rows) {
    const std::size_t cols = (nc + nt) * tpc;
    const std::size_t first = include_ctx_rows ? 0 : nc * tpc;
    Mask m(cols - first, cols);
    for (std::size_t r = first; r < cols; ++r) {
        const std::size_t rc = r / tpc;
        for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t cc = c / tpc;
            bool allow;
            if (rc < nc) {
                allow = cc < nc;
            } else if (cc < nc) {
                allow = true;
            } else {
                allow = mode == TargetAttention::bidirectional || cc <= rc;
            }
            m.set(r - first, c, allow);
        }
    }
    return m;
}

// ---------------------------------------------------------------- model

namespace {

template <class T>
Mat4<T> cast4(const Mat4<double>& m) {
    Mat4<T> o;
    for (int i = 0; i < 16; ++i) o[i] = static_cast<T>(m[i]);
    return o;
}

std::uint64_t name_tag(const std::string& s) {
    Fnv1a h;
    h.update(s);
    return h.digest();
}

}  // namespace

template <class T>
struct WorldModelT<T>::Rows {
    std::vector<int> group;
    std::vector<int> frame;
    std::vector<TokenPos> pos;
    std::vector<Mat4<double>> frustums;  // one per frame
};

template <class T>
Param<T>* WorldModelT<T>::add_param(const std::string& name, Shape shape, double stddev, double fill) {
    Tensor<T> v(std::move(shape), static_cast<T>(fill));
    if (stddev > 0) {
        Rng r(cfg_.init_seed, name_tag(name));
        for (auto& x : v.vec()) x = static_cast<T>(r.normal() * stddev);
    }
    params_.push_back(std::make_unique<Param<T>>(name, std::move(v)));
    return params_.back().get();
}

template <class T>
WorldModelT<T>::WorldModelT(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t d = cfg_.dim, c = cfg_.channels(), fd = cfg_.freq_dim, hid = d * cfg_.mlp_ratio;
    auto fan = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
    in_w_ = add_param("in.w", {c, d}, fan(c));
    in_b_ = add_param("in.b", {d}, 0);
    t_w1_ = add_param("temb.w1", {fd, d}, fan(fd));
    t_b1_ = add_param("temb.b1", {d}, 0);
    t_w2_ = add_param("temb.w2", {d, d}, fan(d));
    t_b2_ = add_param("temb.b2", {d}, 0);
    if (cfg_.uses_keys()) {
        key_table_ = add_param("keys.table", {6, d}, 1.0);
        k_w1_ = add_param("keys.w1", {d, d}, fan(d));
        k_b1_ = add_param("keys.b1", {d}, 0);
        k_w2_ = add_param("keys.w2", {d, d}, 0);  // zero-init output layer
        k_b2_ = add_param("keys.b2", {d}, 0);
    }
    for (int b = 0; b < cfg_.blocks; ++b) {
        const std::string p = "block" + std::to_string(b) + ".";
        Block bl{};
        bl.ada_w = add_param(p + "ada.w", {d, 6 * d}, 0.02);
        bl.ada_b = add_param(p + "ada.b", {6 * d}, 0);
        bl.qkv_w = add_param(p + "qkv.w", {d, 3 * d}, fan(d));
        bl.qkv_b = add_param(p + "qkv.b", {3 * d}, 0);
        bl.o_w = add_param(p + "o.w", {d, d}, fan(d));
        bl.o_b = add_param(p + "o.b", {d}, 0);
        bl.mlp_w1 = add_param(p + "mlp.w1", {d, hid}, fan(d));
        bl.mlp_b1 = add_param(p + "mlp.b1", {hid}, 0);
        bl.mlp_w2 = add_param(p + "mlp.w2", {hid, d}, fan(hid));
        bl.mlp_b2 = add_param(p + "mlp.b2", {d}, 0);
        if (cfg_.uses_frustums()) bl.gate = add_param(p + "proj.gate", {1}, 0);  // zero-init branch gate
        blocks_.push_back(bl);
    }
    f_ada_w_ = add_param("final.ada.w", {d, 2 * d}, 0.02);
    f_ada_b_ = add_param("final.ada.b", {2 * d}, 0);
    out_w_ = add_param("final.out.w", {d, c}, 0.02);
    out_b_ = add_param("final.out.b", {c}, 0);
}

template <class T>
typename WorldModelT<T>::Rows WorldModelT<T>::layout(const std::vector<SeqChunk<T>>& chunks,
                                                     std::size_t group_offset) const {
    Rows r;
    const int tpf = cfg_.tokens_per_frame(), tx = cfg_.tokens_x();
    const std::size_t n = chunks.size() * cfg_.tokens_per_chunk();
    r.group.reserve(n);
    r.frame.reserve(n);
    r.pos.reserve(n);
    for (std::size_t ci = 0; ci < chunks.size(); ++ci) {
        const auto& ch = chunks[ci];
        if (!ch.latent) throw ShapeError("model: chunk without latent");
        if (ch.latent->rows() != static_cast<std::size_t>(cfg_.tokens_per_chunk()) ||
            ch.latent->cols() != static_cast<std::size_t>(cfg_.channels())) {
            throw ShapeError("model: chunk latent " + shape_str(ch.latent->shape()) + ", expected [" +
                             std::to_string(cfg_.tokens_per_chunk()) + "x" + std::to_string(cfg_.channels()) + "]");
        }
        if (!(ch.k >= 0.0 && ch.k <= 1.0)) throw std::invalid_argument("model: noise level outside [0,1]");
        for (int f = 0; f < kChunkFrames; ++f) {
            const int frame_id = static_cast<int>(ci) * kChunkFrames + f;
            if (cfg_.uses_frustums()) r.frustums.push_back(build_dproj(ch.poses[f], cfg_.pose_scale));
            for (int t = 0; t < tpf; ++t) {
                r.group.push_back(static_cast<int>(ci + group_offset));
                r.frame.push_back(frame_id);
                r.pos.push_back({ch.position * kChunkFrames + f, t % tx, t / tx});
            }
        }
    }
    return r;
}

template <class T>
Var<T> WorldModelT<T>::conditioning(Tape<T>& tape, const std::vector<SeqChunk<T>>& chunks, bool zero_keys) const {
    const std::size_t g = chunks.size(), fd = cfg_.freq_dim;
    Tensor<T> feats({g, fd});
    for (std::size_t i = 0; i < g; ++i) {
        const auto f = timestep_features(chunks[i].k, cfg_.freq_dim);
        for (std::size_t j = 0; j < fd; ++j) feats[i * fd + j] = static_cast<T>(f[j]);
    }
    Var<T> c = linear(silu(linear(tape.constant(std::move(feats)), tape.param(*t_w1_), tape.param(*t_b1_))),
                      tape.param(*t_w2_), tape.param(*t_b2_));
    if (ablate_conditioning) c = scale(c, T(0));
    if (cfg_.uses_keys()) {
        Tensor<T> hot({g, 6});
        if (!zero_keys && !ablate_conditioning) {
            for (std::size_t i = 0; i < g; ++i) {
                for (int b = 0; b < 6; ++b) hot[i * 6 + b] = (chunks[i].keys >> b) & 1 ? T(1) : T(0);
            }
        }
        Var<T> e = matmul(tape.constant(std::move(hot)), tape.param(*key_table_));
        Var<T> kv = linear(silu(linear(e, tape.param(*k_w1_), tape.param(*k_b1_))), tape.param(*k_w2_),
                           tape.param(*k_b2_));
        c = add(c, kv);
    }
    return c;
}

template <class T>
Var<T> WorldModelT<T>::dual_attention(Tape<T>& tape, Var<T> q, Var<T> k, Var<T> v, const RopeTable<T>& rope,
                                      const std::vector<Mat4<double>>& frustums, std::span<const int> frame_of_row,
                                      const Mask& mask, std::size_t block) const {
    const std::size_t h = cfg_.heads;
    Var<T> a1 = multihead_attention(rope_rotate(q, rope), rope_rotate(k, rope), v, h, mask);
    if (!cfg_.uses_frustums()) return a1;
    std::vector<Mat4<T>> dm, dinv;
    for (const auto& m : frustums) {
        dm.push_back(cast4<T>(m));
        dinv.push_back(cast4<T>(mat4_inverse(m)));
    }
    Var<T> qp = group_transform(q, dm, frame_of_row, true);
    Var<T> kp = group_transform(k, dinv, frame_of_row);
    Var<T> vp = group_transform(v, dinv, frame_of_row);
    Var<T> a2 = group_transform(multihead_attention(qp, kp, vp, h, mask), dm, frame_of_row);
    return add(a1, scale_by(a2, tape.param(*blocks_.at(block).gate)));
}

template <class T>
Var<T> WorldModelT<T>::run(Tape<T>& tape, const std::vector<SeqChunk<T>>& context,
                           const std::vector<SeqChunk<T>>& targets, TargetAttention mode, const KVCache<T>* use,
                           KVCache<T>* build, Var<T>* inputs) const {
    const std::size_t tpc = cfg_.tokens_per_chunk(), d = cfg_.dim, heads = cfg_.heads;
    const bool frust = cfg_.uses_frustums();

    // Rows actually computed in this pass.
    std::vector<SeqChunk<T>> seq;
    if (!use) seq.insert(seq.end(), context.begin(), context.end());
    seq.insert(seq.end(), targets.begin(), targets.end());
    if (seq.empty()) throw ShapeError("model: empty sequence");
    const std::size_t n_ctx = use ? use->rows / tpc : context.size();
    const Rows rows = layout(seq, 0);
    const std::size_t n = rows.group.size();

    const Mask mask = sequence_mask(n_ctx, targets.size(), tpc, mode, use == nullptr);
    const auto rope = RopeTable<T>::spatiotemporal(rows.pos, cfg_.head_dim(), cfg_.rope_base);
    std::vector<Mat4<T>> dm, dinv;
    if (frust) {
        for (const auto& m : rows.frustums) {
            dm.push_back(cast4<T>(m));
            dinv.push_back(cast4<T>(mat4_inverse(m)));
        }
    }

    Tensor<T> x({n, static_cast<std::size_t>(cfg_.channels())});
    for (std::size_t i = 0; i < seq.size(); ++i) {
        std::copy(seq[i].latent->data(), seq[i].latent->data() + seq[i].latent->size(), x.data() + i * seq[i].latent->size());
    }
    Var<T> xin = inputs ? tape.input(std::move(x)) : tape.constant(std::move(x));
    if (inputs) *inputs = xin;
    Var<T> h = linear(xin, tape.param(*in_w_), tape.param(*in_b_));
    Var<T> sc = silu(conditioning(tape, seq));

    if (build) {
        build->reset();
        build->rows = n;
    }
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const Block& bl = blocks_[b];
        Var<T> mod = linear(sc, tape.param(*bl.ada_w), tape.param(*bl.ada_b));
        auto part = [&](int i) { return slice_cols(mod, i * d, (i + 1) * d); };
        Var<T> xm = modulate(layer_norm(h), part(0), part(1), rows.group);
        Var<T> qkv = linear(xm, tape.param(*bl.qkv_w), tape.param(*bl.qkv_b));
        Var<T> q = slice_cols(qkv, 0, d), k = slice_cols(qkv, d, 2 * d), v = slice_cols(qkv, 2 * d, 3 * d);

        Var<T> qr = rope_rotate(q, rope), kr = rope_rotate(k, rope);
        Var<T> qp, kp, vp;
        if (frust) {
            qp = group_transform(q, dm, rows.frame, true);
            kp = group_transform(k, dinv, rows.frame);
            vp = group_transform(v, dinv, rows.frame);
        }
        if (build) {
            typename KVCache<T>::Layer L;
            L.k_rope = kr.value();
            L.v = v.value();
            if (frust) {
                L.k_proj = kp.value();
                L.v_proj = vp.value();
            }
            build->layers.push_back(std::move(L));
        }
        Var<T> k_all = kr, v_all = v, kp_all = kp, vp_all = vp;
        if (use) {
            const auto& L = use->layers.at(b);
            k_all = concat_rows<T>({tape.constant(L.k_rope), kr});
            v_all = concat_rows<T>({tape.constant(L.v), v});
            if (frust) {
                kp_all = concat_rows<T>({tape.constant(L.k_proj), kp});
                vp_all = concat_rows<T>({tape.constant(L.v_proj), vp});
            }
        }
        Var<T> att = multihead_attention(qr, k_all, v_all, heads, mask);
        if (frust) {
            Var<T> a2 = group_transform(multihead_attention(qp, kp_all, vp_all, heads, mask), dm, rows.frame);
            att = add(att, scale_by(a2, tape.param(*bl.gate)));
        }
        Var<T> o = linear(att, tape.param(*bl.o_w), tape.param(*bl.o_b));
        h = add(h, group_mul(o, part(2), rows.group));
        if (build && b + 1 == blocks_.size()) break;
        Var<T> xm2 = modulate(layer_norm(h), part(3), part(4), rows.group);
        Var<T> m = linear(gelu(linear(xm2, tape.param(*bl.mlp_w1), tape.param(*bl.mlp_b1))), tape.param(*bl.mlp_w2),
                          tape.param(*bl.mlp_b2));
        h = add(h, group_mul(m, part(5), rows.group));
    }
    if (build) {
        build->valid = true;
        return {};
    }
    const std::size_t first = use ? 0 : n_ctx * tpc;
    Var<T> ht = first == 0 ? h : slice_rows(h, first, n);
    std::vector<int> tgroup(rows.group.begin() + static_cast<std::ptrdiff_t>(first), rows.group.end());
    Var<T> fm = linear(sc, tape.param(*f_ada_w_), tape.param(*f_ada_b_));
    Var<T> y = modulate(layer_norm(ht), slice_cols(fm, 0, d), slice_cols(fm, d, 2 * d), tgroup);
    return linear(y, tape.param(*out_w_), tape.param(*out_b_));
}

template <class T>
Var<T> WorldModelT<T>::forward(Tape<T>& tape, const std::vector<SeqChunk<T>>& context,
                               const std::vector<SeqChunk<T>>& targets, TargetAttention mode,
                               Var<T>* inputs) const {
    if (targets.empty()) throw ShapeError("model: no target chunks");
    return run(tape, context, targets, mode, nullptr, nullptr, inputs);
}

template <class T>
Var<T> WorldModelT<T>::forward_cached(Tape<T>& tape, const KVCache<T>& cache, const std::vector<SeqChunk<T>>& targets,
                                      TargetAttention mode) const {
    if (targets.empty()) throw ShapeError("model: no target chunks");
    if (!cache.valid) throw std::logic_error("model: forward_cached with an invalid cache");
    if (cache.rows == 0) return run(tape, {}, targets, mode, nullptr, nullptr);
    return run(tape, {}, targets, mode, &cache, nullptr);
}

template <class T>
void WorldModelT<T>::build_cache(const std::vector<SeqChunk<T>>& context, KVCache<T>& cache) const {
    if (context.empty()) {
        cache.reset();
        cache.valid = true;
        return;
    }
    Tape<T> tape(false);
    run(tape, context, {}, TargetAttention::causal, nullptr, &cache);
}

template <class T>
std::vector<Param<T>*> WorldModelT<T>::params() {
    std::vector<Param<T>*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

template <class T>
std::vector<const Param<T>*> WorldModelT<T>::params() const {
    std::vector<const Param<T>*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
}

template <class T>
Param<T>* WorldModelT<T>::find(const std::string& name) {
    for (auto& p : params_) {
        if (p->name == name) return p.get();
    }
    return nullptr;
}

template <class T>
const Param<T>* WorldModelT<T>::find(const std::string& name) const {
    for (const auto& p : params_) {
        if (p->name == name) return p.get();
    }
    return nullptr;
}

template <class T>
std::size_t WorldModelT<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
}

template <class T>
std::uint64_t WorldModelT<T>::parameter_hash() const {
    Fnv1a h;
    for (const auto& p : params_) {
        h.update(p->name);
        h.update(p->value.data(), p->value.size() * sizeof(T));
    }
    return h.digest();
}

template <class T>
std::size_t WorldModelT<T>::copy_matching(const WorldModelT& other) {
    std::size_t n = 0;
    for (auto& p : params_) {
        const Param<T>* o = other.find(p->name);
        if (o && o->value.shape() == p->value.shape()) {
            p->value = o->value;
            ++n;
        }
    }
    return n;
}

void save_model(const std::filesystem::path& dir, const WorldModel& m, const json& meta) {
    json full = meta.is_object() ? meta : json::object();
    full["model"] = m.config().to_json();
    full["param_hash"] = hex64(m.parameter_hash());
    save_checkpoint(dir, m.params(), m.config().hash(), full);
}

WorldModel load_model(const std::filesystem::path& dir) {
    const json man = read_manifest(dir);
    if (!man.contains("meta") || !man["meta"].contains("model")) {
        throw std::runtime_error("checkpoint " + dir.string() + " has no model config");
    }
    WorldModel m(ModelConfig::from_json(man["meta"]["model"]));
    load_checkpoint(dir, m.params());
    return m;
}

#define MW_INSTANTIATE_MODEL(T)                                                                       \
    template class WorldModelT<T>;                                                                    \
    template Tensor<T> patchify<T>(std::span<const Frame>, int);                                      \
    template std::vector<Frame> unpatchify<T>(const Tensor<T>&, int, int, int);                       \
    template Frame unpatchify_frame<T>(const Tensor<T>&, std::size_t, int, int, int);

MW_INSTANTIATE_MODEL(float)
MW_INSTANTIATE_MODEL(double)

}  // namespace mw
