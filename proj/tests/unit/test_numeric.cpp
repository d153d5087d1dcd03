#include <cmath>
#include <filesystem>

#include "../common/gradcheck.hpp"
#include "doctest.h"
#include "mw/checkpoint.hpp"
#include "mw/optim.hpp"

using namespace mw;
using mw::testing::grad_check;
using mw::testing::random_tensor;

namespace {

Tensorf tf(Shape s, std::vector<float> v) { return Tensorf(std::move(s), std::move(v)); }

}  // namespace

TEST_CASE("tensor shape contract") {
    CHECK_THROWS_AS(Tensorf({2, 3}, std::vector<float>(5)), ShapeError);
    Tensorf t({2, 3, 4});
    CHECK(t.rows() == 6);
    CHECK(t.cols() == 4);
    CHECK_THROWS_AS(t.reshaped({5, 5}), ShapeError);
    CHECK(shape_str(t.shape()) == "[2x3x4]");
}

TEST_CASE("op matmul: identity and hand product") {
    Tape<float> tape(false);
    auto a = tape.constant(tf({2, 2}, {1, 2, 3, 4}));
    auto i2 = tape.constant(tf({2, 2}, {1, 0, 0, 1}));
    CHECK(matmul(i2, a).value() == a.value());
    auto sw = tape.constant(tf({2, 2}, {0, 1, 1, 0}));
    CHECK(matmul(a, sw).value() == tf({2, 2}, {2, 1, 4, 3}));
    CHECK_THROWS_AS(matmul(a, tape.constant(Tensorf({3, 2}))), ShapeError);
}

TEST_CASE("op matmul matches triple-loop oracle in fp64") {
    Rng r(11);
    auto a = random_tensor({5, 7}, r), b = random_tensor({7, 3}, r);
    Tape<double> tape(false);
    auto c = matmul(tape.constant(a), tape.constant(b)).value();
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            double s = 0;
            for (std::size_t p = 0; p < 7; ++p) s += a.at(i, p) * b.at(p, j);
            CHECK(std::abs(c.at(i, j) - s) < 1e-12);
        }
    }
}

TEST_CASE("op masked_attention trivial cases") {
    Tape<float> tape(false);
    auto v1 = tape.constant(tf({1, 1, 2}, {3, -4}));
    auto out = masked_attention(tape.constant(tf({1, 1, 2}, {0.5f, 1})), tape.constant(tf({1, 1, 2}, {1, 2})), v1,
                                Mask(1, 1, true));
    CHECK(out.value() == v1.value());

    Rng r(3);
    Tensorf q({2, 5, 4}), k({2, 5, 4}), v({2, 5, 4});
    for (auto* t : {&q, &k, &v}) {
        for (auto& x : t->vec()) x = static_cast<float>(r.uniform(-1, 1));
    }
    auto o = masked_attention(tape.constant(q), tape.constant(k), tape.constant(v), Mask::identity(5));
    CHECK(o.value() == v);
    Mask bad(5, 5, true);
    for (std::size_t c = 0; c < 5; ++c) bad.set(2, c, false);
    CHECK_THROWS(masked_attention(tape.constant(q), tape.constant(k), tape.constant(v), bad));
}

TEST_CASE("op masked_attention matches explicit softmax oracle") {
    Rng r(5);
    const std::size_t H = 2, N = 8, D = 4;
    Tensorf q({H, N, D}), k({H, N, D}), v({H, N, D});
    for (auto* t : {&q, &k, &v}) {
        for (auto& x : t->vec()) x = static_cast<float>(r.uniform(-2, 2));
    }
    Mask m(N, N);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j < N; ++j) m.set(i, j, j <= i || (i + j) % 3 == 0);
    }
    Tape<float> tape(false);
    auto out = masked_attention(tape.constant(q), tape.constant(k), tape.constant(v), m).value();
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t i = 0; i < N; ++i) {
            std::vector<double> w(N, 0.0);
            double mx = -1e300, s = 0;
            for (std::size_t j = 0; j < N; ++j) {
                if (!m(i, j)) continue;
                double d = 0;
                for (std::size_t c = 0; c < D; ++c) d += double(q[(h * N + i) * D + c]) * k[(h * N + j) * D + c];
                w[j] = d / std::sqrt(double(D));
                mx = std::max(mx, w[j]);
            }
            for (std::size_t j = 0; j < N; ++j) {
                w[j] = m(i, j) ? std::exp(w[j] - mx) : 0.0;
                s += w[j];
            }
            for (std::size_t c = 0; c < D; ++c) {
                double o = 0;
                for (std::size_t j = 0; j < N; ++j) o += w[j] / s * v[(h * N + j) * D + c];
                const double got = out[(h * N + i) * D + c];
                CHECK(std::abs(got - o) <= 1e-6 * std::max(1.0, std::abs(o)));
            }
        }
    }
}

TEST_CASE("attention weights sum to one and vanish where masked") {
    Rng r(9);
    const std::size_t N = 12, H = 3, D = 24;
    Tensorf q({N, D}), k({N, D});
    for (auto* t : {&q, &k}) {
        for (auto& x : t->vec()) x = static_cast<float>(r.uniform(-3, 3));
    }
    Mask m(N, N);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j < N; ++j) m.set(i, j, j / 4 <= i / 4);
    }
    for (const auto& w : attention_weights(q, k, H, m)) {
        for (std::size_t i = 0; i < N; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < N; ++j) {
                if (!m(i, j)) CHECK(w.at(i, j) == 0.0f);
                s += w.at(i, j);
            }
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("op rope_rotate: zero angle, isometry, relative positions") {
    Rng r(4);
    const std::size_t D = 16;
    std::vector<int> zero{0};
    Tape<double> tape(false);
    auto x = random_tensor({1, D}, r);
    CHECK(rope_rotate(tape.constant(x), RopeTable<double>::temporal(zero, D, 10000.0)).value() == x);

    auto a = random_tensor({1, D}, r), b = random_tensor({1, D}, r);
    auto rot = [&](const Tensor<double>& t, int p) {
        std::vector<int> pos{p};
        Tape<double> tp(false);
        return rope_rotate(tp.constant(t), RopeTable<double>::temporal(pos, D, 10000.0)).value();
    };
    auto norm = [](const Tensor<double>& t) {
        double s = 0;
        for (double v : t.vec()) s += v * v;
        return std::sqrt(s);
    };
    auto dotp = [](const Tensor<double>& u, const Tensor<double>& v) {
        double s = 0;
        for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
        return s;
    };
    for (int p = 0; p < 32; ++p) CHECK(std::abs(norm(rot(a, p)) - norm(a)) < 1e-6);
    // <R_p a, R_q b> depends only on q - p: compare every pair to the (0, q-p) pair.
    for (int p = 0; p < 32; ++p) {
        for (int q = 0; q < 32; ++q) {
            const double ref = q >= p ? dotp(rot(a, 0), rot(b, q - p)) : dotp(rot(a, p - q), rot(b, 0));
            CHECK(std::abs(dotp(rot(a, p), rot(b, q)) - ref) < 1e-9);
        }
    }
    CHECK_THROWS_AS(RopeTable<double>::temporal(zero, 7, 10000.0), ShapeError);
}

TEST_CASE("op spatiotemporal rope splits pairs half/quarter/quarter") {
    std::vector<TokenPos> pos{{3, 0, 0}, {0, 2, 0}, {0, 0, 5}};
    auto t = RopeTable<double>::spatiotemporal(pos, 16, 10000.0);
    // 8 pairs: 0..3 temporal, 4..5 x, 6..7 y.
    for (std::size_t p = 0; p < 8; ++p) {
        CHECK((t.sin[0 * 8 + p] != 0.0) == (p < 4));
        CHECK((t.sin[1 * 8 + p] != 0.0) == (p >= 4 && p < 6));
        CHECK((t.sin[2 * 8 + p] != 0.0) == (p >= 6));
    }
}

TEST_CASE("backward: closed-form examples and errors") {
    Param<double> w("w", Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
    {
        Tape<double> tape;
        tape.backward(sum(tape.param(w)));
        for (double g : w.grad.vec()) CHECK(g == 1.0);
    }
    w.zero_grad();
    Tensor<double> x({3, 1}, {0.5, -1, 2});
    {
        Tape<double> tape;
        auto y = matmul(tape.param(w), tape.constant(x));
        tape.backward(sum(mul(y, y)));
        auto yv = tape.value(y);
        for (std::size_t i = 0; i < 2; ++i) {
            for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(w.grad.at(i, j) - 2 * yv[i] * x[j]) < 1e-12);
        }
    }
    Tape<double> tape;
    auto c = tape.constant(Tensor<double>({1}, 1.0));
    CHECK_THROWS(tape.backward(c));
    CHECK_THROWS_AS(tape.backward(tape.param(w)), ShapeError);
    Tape<double> inference(false);
    CHECK_THROWS(inference.backward(inference.constant(Tensor<double>({1}, 1.0))));
}

TEST_CASE("backward accumulates gradients of shared inputs") {
    Param<double> a("a", Tensor<double>({3}, {1, 2, 3}));
    Tape<double> tape;
    auto va = tape.param(a);
    tape.backward(sum(add(mul(va, va), va)));
    for (std::size_t i = 0; i < 3; ++i) CHECK(a.grad[i] == 2 * a.value[i] + 1);
}

TEST_CASE("non-finite values raise") {
    Tape<float> tape(false);
    auto x = tape.constant(tf({1}, {1e30f}));
    CHECK_THROWS_AS(mul(x, x), NumericError);
}

TEST_CASE("grad check: elementwise, normalisation and structural ops") {
    Rng r(21);
    Param<double> x("x", random_tensor({6, 8}, r)), y("y", random_tensor({6, 8}, r));
    Param<double> w("w", random_tensor({8, 5}, r)), b("b", random_tensor({5}, r));
    Param<double> sh("shift", random_tensor({2, 8}, r)), sc("scale", random_tensor({2, 8}, r));
    Param<double> s("s", random_tensor({1}, r));
    const std::vector<int> grp{0, 0, 0, 1, 1, 1};
    using T = Tape<double>;
    auto check = [](const char* name, double rel) {
        INFO(name);
        CHECK(rel < 1e-4);
    };
    check("matmul", grad_check({&x, &w}, [&](T& t) { return matmul(t.param(x), t.param(w)); }).max_rel);
    check("linear", grad_check({&x, &w, &b}, [&](T& t) { return linear(t.param(x), t.param(w), t.param(b)); }).max_rel);
    check("linear_nobias", grad_check({&x, &w}, [&](T& t) { return linear(t.param(x), t.param(w), Var<double>{}); }).max_rel);
    check("add", grad_check({&x, &y}, [&](T& t) { return add(t.param(x), t.param(y)); }).max_rel);
    check("sub", grad_check({&x, &y}, [&](T& t) { return sub(t.param(x), t.param(y)); }).max_rel);
    check("mul", grad_check({&x, &y}, [&](T& t) { return mul(t.param(x), t.param(y)); }).max_rel);
    check("scale", grad_check({&x}, [&](T& t) { return scale(t.param(x), 0.3); }).max_rel);
    check("scale_by", grad_check({&x, &s}, [&](T& t) { return scale_by(t.param(x), t.param(s)); }).max_rel);
    check("silu", grad_check({&x}, [&](T& t) { return silu(t.param(x)); }).max_rel);
    check("gelu", grad_check({&x}, [&](T& t) { return gelu(t.param(x)); }).max_rel);
    check("layer_norm", grad_check({&x}, [&](T& t) { return layer_norm(t.param(x)); }).max_rel);
    check("modulate", grad_check({&x, &sh, &sc}, [&](T& t) {
              return modulate(t.param(x), t.param(sh), t.param(sc), std::span<const int>(grp));
          }).max_rel);
    check("group_mul", grad_check({&x, &sc}, [&](T& t) {
              return group_mul(t.param(x), t.param(sc), std::span<const int>(grp));
          }).max_rel);
    check("concat_rows", grad_check({&x, &y}, [&](T& t) { return concat_rows<double>({t.param(x), t.param(y), t.param(x)}); }).max_rel);
    check("slice_rows", grad_check({&x}, [&](T& t) { return slice_rows(t.param(x), 1, 4); }).max_rel);
    check("slice_cols", grad_check({&x}, [&](T& t) { return slice_cols(t.param(x), 2, 7); }).max_rel);
    check("mean", grad_check({&x}, [&](T& t) { return mean(t.param(x)); }).max_rel);
    check("mse", grad_check({&x, &y}, [&](T& t) { return mse(t.param(x), t.param(y)); }).max_rel);
}

TEST_CASE("grad check: rope, group transform, attention") {
    Rng r(22);
    const std::size_t N = 6, H = 2, D = 16;
    Param<double> q("q", random_tensor({N, H * D}, r)), k("k", random_tensor({N, H * D}, r)),
        v("v", random_tensor({N, H * D}, r));
    Param<double> q3("q3", random_tensor({H, N, D}, r)), k3("k3", random_tensor({H, N, D}, r));
    std::vector<TokenPos> pos;
    for (std::size_t i = 0; i < N; ++i) pos.push_back({int(i), int(i % 2), int(i / 3)});
    auto rope = RopeTable<double>::spatiotemporal(pos, D, 10000.0);
    std::vector<Mat4<double>> mats;
    for (int m = 0; m < 2; ++m) {
        Mat4<double> mt;
        for (auto& e : mt) e = r.uniform(-1, 1);
        mats.push_back(mt);
    }
    const std::vector<int> which{0, 1, 1, 0, 1, 0};
    Mask mask(N, N);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j < N; ++j) mask.set(i, j, j / 2 <= i / 2);
    }
    using T = Tape<double>;
    CHECK(grad_check({&q}, [&](T& t) { return rope_rotate(t.param(q), rope); }).max_rel < 1e-4);
    for (bool tr : {false, true}) {
        CHECK(grad_check({&q}, [&](T& t) {
                  return group_transform(t.param(q), mats, std::span<const int>(which), tr);
              }).max_rel < 1e-4);
    }
    CHECK(grad_check({&q, &k, &v}, [&](T& t) {
              return multihead_attention(t.param(q), t.param(k), t.param(v), H, mask);
          }).max_rel < 1e-4);
    // Rectangular case: more keys than queries.
    Param<double> kr("kr", random_tensor({N + 3, H * D}, r)), vr("vr", random_tensor({N + 3, H * D}, r));
    Mask rect(N, N + 3, true);
    rect.set(0, 1, false);
    CHECK(grad_check({&q, &kr, &vr}, [&](T& t) {
              return multihead_attention(t.param(q), t.param(kr), t.param(vr), H, rect);
          }).max_rel < 1e-4);
    Param<double> v3b("v3b", random_tensor({H, N, D}, r));
    CHECK(grad_check({&q3, &k3, &v3b}, [&](T& t) {
              return masked_attention(t.param(q3), t.param(k3), t.param(v3b), mask);
          }).max_rel < 1e-4);
}

TEST_CASE("adam: zero grads, closed-form first step, bowl descent") {
    Param<double> p("p", Tensor<double>({3}, {1, -2, 0.5}));
    const auto before = p.value;
    AdamConfig c;
    c.lr = 0.1;
    {
        Adam<double> opt({&p}, c);
        opt.step();
        CHECK(p.value == before);
    }
    for (double eps : {0.0, 1e-8}) {
        Param<double> q("q", Tensor<double>({1}, 0.0));
        AdamConfig ce = c;
        ce.eps = eps;
        Adam<double> opt({&q}, ce);
        q.grad[0] = 1.0;
        opt.step();
        CHECK(std::abs(q.value[0] - (-0.1 / (1.0 + eps))) < 1e-12);
    }
    // Quadratic bowl 0.5 * sum(a_i x_i^2).
    Param<double> x("x", Tensor<double>({4}, {3, -2, 1, 4}));
    const std::vector<double> a{1, 2, 0.5, 3};
    AdamConfig cb;
    cb.lr = 0.02;
    Adam<double> opt({&x}, cb);
    std::vector<double> losses;
    for (int s = 0; s < 100; ++s) {
        double l = 0;
        for (std::size_t i = 0; i < 4; ++i) {
            l += 0.5 * a[i] * x.value[i] * x.value[i];
            x.grad[i] = a[i] * x.value[i];
        }
        losses.push_back(l);
        opt.step();
    }
    for (std::size_t s = 10; s < losses.size(); ++s) CHECK(losses[s] < losses[s - 1]);
    Param<double> bad("bad", Tensor<double>({1}, 0.0));
    bad.grad[0] = std::nan("");
    Adam<double> ob({&bad}, c);
    CHECK_THROWS_AS(ob.step(), NumericError);
}

TEST_CASE("sgd step and gradient clipping") {
    Param<double> p("p", Tensor<double>({2}, {1, 1}));
    p.grad = Tensor<double>({2}, {3, 4});
    CHECK(clip_grad_norm<double>({&p}, 1.0) == doctest::Approx(5.0));
    CHECK(grad_norm<double>({&p}) == doctest::Approx(1.0));
    Sgd<double> opt({&p}, 0.5);
    opt.step();
    CHECK(p.value[0] == doctest::Approx(1 - 0.5 * 0.6));
}

TEST_CASE("checkpoint round trip") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "mw_ckpt_test";
    fs::remove_all(dir);
    Param<float> a("blocks.0.w", Tensorf({2, 3}, {1, 2, 3, 4, 5, 6}));
    Param<float> b("bias", Tensorf({4}, 0.25f));
    save_checkpoint(dir, {&a, &b}, "abc123", {{"stage", "1a"}});
    Param<float> a2("blocks.0.w", Tensorf({2, 3})), b2("bias", Tensorf({4}));
    auto man = load_checkpoint(dir, {&a2, &b2});
    CHECK(a2.value == a.value);
    CHECK(b2.value == b.value);
    CHECK(man["config_hash"] == "abc123");
    CHECK(man["meta"]["stage"] == "1a");
    Param<float> wrong("bias", Tensorf({5}));
    CHECK_THROWS_AS(load_checkpoint(dir, {&wrong}), ShapeError);
    Param<float> missing("nope", Tensorf({1}));
    CHECK_THROWS(load_checkpoint(dir, {&missing}));
    fs::remove_all(dir);
}
