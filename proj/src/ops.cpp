#include "mw/ops.hpp"

#include <cmath>
#include <memory>
#include <numbers>

#include "mw/kernels.hpp"

namespace mw {

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace {

template <class T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

template <class T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
          const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc, T alpha = T(1)) {
    kern::GemmArgs<T> g;
    g.trans_a = ta;
    g.trans_b = tb;
    g.m = m;
    g.n = n;
    g.k = k;
    g.alpha = alpha;
    g.a = a;
    g.lda = lda;
    g.b = b;
    g.ldb = ldb;
    g.beta = beta;
    g.c = c;
    g.ldc = ldc;
    kern::kernels<T>().gemm(g);
}

template <class T>
void fill_rope(RopeTable<T>& t, std::size_t row, std::size_t first_pair, std::size_t n_pairs, int pos,
               double base) {
    const std::size_t half = t.head_dim / 2;
    for (std::size_t p = 0; p < n_pairs; ++p) {
        const double inv_freq = std::pow(base, -static_cast<double>(p) / static_cast<double>(n_pairs));
        const double ang = static_cast<double>(pos) * inv_freq;
        t.cos[row * half + first_pair + p] = static_cast<T>(std::cos(ang));
        t.sin[row * half + first_pair + p] = static_cast<T>(std::sin(ang));
    }
}

}  // namespace

template <class T>
RopeTable<T> RopeTable<T>::temporal(std::span<const int> positions, std::size_t head_dim, double base) {
    if (head_dim % 2 != 0) throw ShapeError("rope: head dim must be even");
    RopeTable t;
    t.rows = positions.size();
    t.head_dim = head_dim;
    t.cos.assign(t.rows * head_dim / 2, T(1));
    t.sin.assign(t.rows * head_dim / 2, T(0));
    for (std::size_t r = 0; r < t.rows; ++r) fill_rope(t, r, 0, head_dim / 2, positions[r], base);
    return t;
}

template <class T>
RopeTable<T> RopeTable<T>::spatiotemporal(std::span<const TokenPos> positions, std::size_t head_dim,
                                          double base) {
    if (head_dim % 8 != 0) throw ShapeError("3-axis rope needs head dim divisible by 8");
    RopeTable t;
    t.rows = positions.size();
    t.head_dim = head_dim;
    const std::size_t pairs = head_dim / 2;
    t.cos.assign(t.rows * pairs, T(1));
    t.sin.assign(t.rows * pairs, T(0));
    const std::size_t tp = pairs / 2;
    const std::size_t xp = pairs / 4;
    for (std::size_t r = 0; r < t.rows; ++r) {
        fill_rope(t, r, 0, tp, positions[r].t, base);
        fill_rope(t, r, tp, xp, positions[r].x, base);
        fill_rope(t, r, tp + xp, pairs - tp - xp, positions[r].y, base);
    }
    return t;
}

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    if (av.rank() < 2 || bv.rank() != 2 || av.cols() != bv.dim(0)) {
        throw ShapeError("matmul: inner dims disagree " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
    }
    const std::size_t m = av.rows(), k = av.cols(), n = bv.dim(1);
    Shape os = av.shape();
    os.back() = n;
    Tensor<T> out(os);
    gemm<T>(false, false, m, n, k, av.data(), k, bv.data(), n, T(0), out.data(), n);
    return a.tape->push(
        std::move(out), {a, b},
        [a, b, m, n, k](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            if (Tensor<T>* ga = tp.accum(a)) {
                gemm<T>(false, true, m, k, n, g.data(), n, tp.value(b).data(), n, T(1), ga->data(), k);
            }
            if (Tensor<T>* gb = tp.accum(b)) {
                gemm<T>(true, false, k, n, m, tp.value(a).data(), k, g.data(), n, T(1), gb->data(), n);
            }
        },
        "matmul");
}

template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = w.value();
    if (xv.rank() < 1 || wv.rank() != 2 || xv.cols() != wv.dim(0)) {
        throw ShapeError("linear: " + shape_str(xv.shape()) + " x " + shape_str(wv.shape()));
    }
    const std::size_t m = xv.rows(), k = xv.cols(), n = wv.dim(1);
    Shape os = xv.shape();
    os.back() = n;
    Tensor<T> out(os);
    if (bias.valid()) {
        const Tensor<T>& bv = bias.value();
        if (bv.size() != n) throw ShapeError("linear: bias length mismatch");
        for (std::size_t i = 0; i < m; ++i) std::copy(bv.data(), bv.data() + n, out.data() + i * n);
        gemm<T>(false, false, m, n, k, xv.data(), k, wv.data(), n, T(1), out.data(), n);
    } else {
        gemm<T>(false, false, m, n, k, xv.data(), k, wv.data(), n, T(0), out.data(), n);
    }
    std::vector<Var<T>> ins{x, w};
    if (bias.valid()) ins.push_back(bias);
    return x.tape->push_n(
        std::move(out), ins,
        [x, w, bias, m, n, k](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            if (Tensor<T>* gx = tp.accum(x)) {
                gemm<T>(false, true, m, k, n, g.data(), n, tp.value(w).data(), n, T(1), gx->data(), k);
            }
            if (Tensor<T>* gw = tp.accum(w)) {
                gemm<T>(true, false, k, n, m, tp.value(x).data(), k, g.data(), n, T(1), gw->data(), n);
            }
            if (bias.valid()) {
                if (Tensor<T>* gb = tp.accum(bias)) {
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
                    }
                }
            }
        },
        "linear");
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same(a.value(), b.value(), "add");
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return a.tape->push(
        std::move(out), {a, b},
        [a, b](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            for (Var<T> v : {a, b}) {
                if (Tensor<T>* gv = tp.accum(v)) {
                    for (std::size_t i = 0; i < g.size(); ++i) (*gv)[i] += g[i];
                }
            }
        },
        "add");
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    require_same(a.value(), b.value(), "sub");
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return a.tape->push(
        std::move(out), {a, b},
        [a, b](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            if (Tensor<T>* ga = tp.accum(a)) {
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
            }
            if (Tensor<T>* gb = tp.accum(b)) {
                for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
            }
        },
        "sub");
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    require_same(a.value(), b.value(), "mul");
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return a.tape->push(
        std::move(out), {a, b},
        [a, b](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            if (Tensor<T>* ga = tp.accum(a)) {
                const Tensor<T>& bv = tp.value(b);
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
            }
            if (Tensor<T>* gb = tp.accum(b)) {
                const Tensor<T>& av = tp.value(a);
                for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
            }
        },
        "mul");
}

template <class T>
Var<T> scale(Var<T> a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.vec()) v *= s;
    return a.tape->push(
        std::move(out), {a},
        [a, s](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            if (Tensor<T>* ga = tp.accum(a)) {
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
            }
        },
        "scale");
}

template <class T>
Var<T> scale_by(Var<T> a, Var<T> s) {
    if (s.value().size() != 1) throw ShapeError("scale_by: scale must have one element");
    const T sv = s.value()[0];
    Tensor<T> out = a.value();
    for (auto& v : out.vec()) v *= sv;
    return a.tape->push(
        std::move(out), {a, s},
        [a, s](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            const T sv = tp.value(s)[0];
            if (Tensor<T>* ga = tp.accum(a)) {
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += sv * g[i];
            }
            if (Tensor<T>* gs = tp.accum(s)) {
                const Tensor<T>& av = tp.value(a);
                T acc = T(0);
                for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
                (*gs)[0] += acc;
            }
        },
        "scale_by");
}

template <class T>
Var<T> silu(Var<T> x) {
    Tensor<T> out = x.value();
    for (auto& v : out.vec()) v = v / (T(1) + std::exp(-v));
    return x.tape->push(
        std::move(out), {x},
        [x](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            if (Tensor<T>* gx = tp.accum(x)) {
                const Tensor<T>& xv = tp.value(x);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const T sg = T(1) / (T(1) + std::exp(-xv[i]));
                    (*gx)[i] += g[i] * sg * (T(1) + xv[i] * (T(1) - sg));
                }
            }
        },
        "silu");
}

template <class T>
Var<T> gelu(Var<T> x) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T a3 = T(0.044715);
    Tensor<T> out = x.value();
    for (auto& v : out.vec()) v = T(0.5) * v * (T(1) + std::tanh(c * (v + a3 * v * v * v)));
    return x.tape->push(
        std::move(out), {x},
        [x](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            if (Tensor<T>* gx = tp.accum(x)) {
                const Tensor<T>& xv = tp.value(x);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const T v = xv[i];
                    const T th = std::tanh(c * (v + a3 * v * v * v));
                    const T d = T(0.5) * (T(1) + th) +
                                T(0.5) * v * (T(1) - th * th) * c * (T(1) + T(3) * a3 * v * v);
                    (*gx)[i] += g[i] * d;
                }
            }
        },
        "gelu");
}

template <class T>
Var<T> layer_norm(Var<T> x, T eps) {
    const Tensor<T>& xv = x.value();
    const std::size_t rows = xv.rows(), d = xv.cols();
    Tensor<T> out(xv.shape());
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * d;
        T mu = T(0);
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        T* o = out.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) o[j] = (xr[j] - mu) * is;
    }
    auto y = std::make_shared<Tensor<T>>(out);
    return x.tape->push(
        std::move(out), {x},
        [x, y, inv_std, rows, d](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            Tensor<T>* gx = tp.accum(x);
            if (!gx) return;
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gr = g.data() + r * d;
                const T* yr = y->data() + r * d;
                T mg = T(0), mgy = T(0);
                for (std::size_t j = 0; j < d; ++j) {
                    mg += gr[j];
                    mgy += gr[j] * yr[j];
                }
                mg /= static_cast<T>(d);
                mgy /= static_cast<T>(d);
                T* o = gx->data() + r * d;
                for (std::size_t j = 0; j < d; ++j) o[j] += (*inv_std)[r] * (gr[j] - mg - yr[j] * mgy);
            }
        },
        "layer_norm");
}

template <class T>
Var<T> modulate(Var<T> x, Var<T> shift, Var<T> scale, std::span<const int> row_group) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& sh = shift.value();
    const Tensor<T>& sc = scale.value();
    const std::size_t rows = xv.rows(), d = xv.cols();
    if (row_group.size() != rows || sh.cols() != d || sc.shape() != sh.shape()) {
        throw ShapeError("modulate: shape mismatch");
    }
    Tensor<T> out(xv.shape());
    std::vector<int> groups(row_group.begin(), row_group.end());
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t gi = static_cast<std::size_t>(groups[r]);
        if (gi >= sh.rows()) throw ShapeError("modulate: group index out of range");
        for (std::size_t j = 0; j < d; ++j) {
            out[r * d + j] = xv[r * d + j] * (T(1) + sc[gi * d + j]) + sh[gi * d + j];
        }
    }
    return x.tape->push(
        std::move(out), {x, shift, scale},
        [x, shift, scale, groups, rows, d](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            const Tensor<T>& xv = tp.value(x);
            const Tensor<T>& sc = tp.value(scale);
            Tensor<T>* gx = tp.accum(x);
            Tensor<T>* gsh = tp.accum(shift);
            Tensor<T>* gsc = tp.accum(scale);
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t gi = static_cast<std::size_t>(groups[r]);
                for (std::size_t j = 0; j < d; ++j) {
                    const T gv = g[r * d + j];
                    if (gx) (*gx)[r * d + j] += gv * (T(1) + sc[gi * d + j]);
                    if (gsh) (*gsh)[gi * d + j] += gv;
                    if (gsc) (*gsc)[gi * d + j] += gv * xv[r * d + j];
                }
            }
        },
        "modulate");
}

template <class T>
Var<T> group_mul(Var<T> x, Var<T> gate, std::span<const int> row_group) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& gt = gate.value();
    const std::size_t rows = xv.rows(), d = xv.cols();
    if (row_group.size() != rows || gt.cols() != d) throw ShapeError("group_mul: shape mismatch");
    Tensor<T> out(xv.shape());
    std::vector<int> groups(row_group.begin(), row_group.end());
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t gi = static_cast<std::size_t>(groups[r]);
        if (gi >= gt.rows()) throw ShapeError("group_mul: group index out of range");
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] * gt[gi * d + j];
    }
    return x.tape->push(
        std::move(out), {x, gate},
        [x, gate, groups, rows, d](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            const Tensor<T>& xv = tp.value(x);
            const Tensor<T>& gt = tp.value(gate);
            Tensor<T>* gx = tp.accum(x);
            Tensor<T>* gg = tp.accum(gate);
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t gi = static_cast<std::size_t>(groups[r]);
                for (std::size_t j = 0; j < d; ++j) {
                    if (gx) (*gx)[r * d + j] += g[r * d + j] * gt[gi * d + j];
                    if (gg) (*gg)[gi * d + j] += g[r * d + j] * xv[r * d + j];
                }
            }
        },
        "group_mul");
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t d = xs[0].value().cols();
    std::size_t rows = 0;
    for (const auto& v : xs) {
        if (v.value().cols() != d) throw ShapeError("concat_rows: column mismatch");
        rows += v.value().rows();
    }
    Tensor<T> out(Shape{rows, d});
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& v : xs) {
        offsets.push_back(off);
        std::copy(v.value().data(), v.value().data() + v.value().size(), out.data() + off * d);
        off += v.value().rows();
    }
    return xs[0].tape->push_n(
        std::move(out), xs,
        [xs, offsets, d](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            for (std::size_t i = 0; i < xs.size(); ++i) {
                if (Tensor<T>* gv = tp.accum(xs[i])) {
                    const T* src = g.data() + offsets[i] * d;
                    for (std::size_t j = 0; j < gv->size(); ++j) (*gv)[j] += src[j];
                }
            }
        },
        "concat_rows");
}

template <class T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end) {
    const Tensor<T>& xv = x.value();
    const std::size_t d = xv.cols();
    if (begin > end || end > xv.rows()) throw ShapeError("slice_rows: range out of bounds");
    Tensor<T> out(Shape{end - begin, d});
    std::copy(xv.data() + begin * d, xv.data() + end * d, out.data());
    return x.tape->push(
        std::move(out), {x},
        [x, begin, d](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            if (Tensor<T>* gx = tp.accum(x)) {
                for (std::size_t j = 0; j < g.size(); ++j) (*gx)[begin * d + j] += g[j];
            }
        },
        "slice_rows");
}

template <class T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end) {
    const Tensor<T>& xv = x.value();
    const std::size_t rows = xv.rows(), d = xv.cols(), w = end - begin;
    if (begin > end || end > d) throw ShapeError("slice_cols: range out of bounds");
    Tensor<T> out(Shape{rows, w});
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy(xv.data() + r * d + begin, xv.data() + r * d + end, out.data() + r * w);
    }
    return x.tape->push(
        std::move(out), {x},
        [x, begin, rows, d, w](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            if (Tensor<T>* gx = tp.accum(x)) {
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < w; ++j) (*gx)[r * d + begin + j] += g[r * w + j];
                }
            }
        },
        "slice_cols");
}

template <class T>
Var<T> sum(Var<T> x) {
    T s = T(0);
    for (T v : x.value().vec()) s += v;
    return x.tape->push(
        Tensor<T>(Shape{1}, std::vector<T>{s}), {x},
        [x](Tape<T>& tp, int self) {
            const T g = tp.grad(self)[0];
            if (Tensor<T>* gx = tp.accum(x)) {
                for (auto& v : gx->vec()) v += g;
            }
        },
        "sum");
}

template <class T>
Var<T> mean(Var<T> x) {
    const std::size_t n = x.value().size();
    return scale(sum(x), T(1) / static_cast<T>(n));
}

template <class T>
Var<T> mse(Var<T> pred, Var<T> target) {
    require_same(pred.value(), target.value(), "mse");
    const Tensor<T>& p = pred.value();
    const Tensor<T>& t = target.value();
    T s = T(0);
    for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - t[i]) * (p[i] - t[i]);
    const T inv_n = T(1) / static_cast<T>(p.size());
    return pred.tape->push(
        Tensor<T>(Shape{1}, std::vector<T>{s * inv_n}), {pred, target},
        [pred, target, inv_n](Tape<T>& tp, int self) {
            const T g = tp.grad(self)[0];
            const Tensor<T>& p = tp.value(pred);
            const Tensor<T>& t = tp.value(target);
            if (Tensor<T>* gp = tp.accum(pred)) {
                for (std::size_t i = 0; i < p.size(); ++i) (*gp)[i] += g * T(2) * inv_n * (p[i] - t[i]);
            }
            if (Tensor<T>* gt = tp.accum(target)) {
                for (std::size_t i = 0; i < p.size(); ++i) (*gt)[i] -= g * T(2) * inv_n * (p[i] - t[i]);
            }
        },
        "mse");
}

namespace {

template <class T>
void rotate(const Tensor<T>& x, const RopeTable<T>& t, Tensor<T>& out, T sign) {
    const std::size_t rows = x.rows(), d = x.cols(), half = t.head_dim / 2;
    const std::size_t heads = d / t.head_dim;
    for (std::size_t r = 0; r < rows; ++r) {
        const T* cs = t.cos.data() + r * half;
        const T* sn = t.sin.data() + r * half;
        for (std::size_t h = 0; h < heads; ++h) {
            const T* xi = x.data() + r * d + h * t.head_dim;
            T* o = out.data() + r * d + h * t.head_dim;
            for (std::size_t p = 0; p < half; ++p) {
                const T a = xi[2 * p], b = xi[2 * p + 1];
                const T s = sign * sn[p];
                o[2 * p] = a * cs[p] - b * s;
                o[2 * p + 1] = a * s + b * cs[p];
            }
        }
    }
}

}  // namespace

template <class T>
Var<T> rope_rotate(Var<T> x, const RopeTable<T>& table) {
    const Tensor<T>& xv = x.value();
    if (table.head_dim % 2 != 0) throw ShapeError("rope: odd pair dimension");
    if (xv.rows() != table.rows || xv.cols() % table.head_dim != 0) {
        throw ShapeError("rope: table does not match input " + shape_str(xv.shape()));
    }
    Tensor<T> out(xv.shape());
    rotate(xv, table, out, T(1));
    auto tbl = std::make_shared<RopeTable<T>>(table);
    return x.tape->push(
        std::move(out), {x},
        [x, tbl](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            if (Tensor<T>* gx = tp.accum(x)) {
                Tensor<T> back(g.shape());
                rotate(g, *tbl, back, T(-1));
                for (std::size_t i = 0; i < back.size(); ++i) (*gx)[i] += back[i];
            }
        },
        "rope_rotate");
}

namespace {

template <class T>
void apply_groups(const Tensor<T>& x, const std::vector<Mat4<T>>& mats, const std::vector<int>& which,
                  bool transpose, Tensor<T>& out) {
    const std::size_t rows = x.rows(), d = x.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        const Mat4<T>& m = mats[static_cast<std::size_t>(which[r])];
        for (std::size_t g = 0; g < d; g += 4) {
            const T* xi = x.data() + r * d + g;
            T* o = out.data() + r * d + g;
            for (int i = 0; i < 4; ++i) {
                T acc = T(0);
                for (int j = 0; j < 4; ++j) acc += (transpose ? m[j * 4 + i] : m[i * 4 + j]) * xi[j];
                o[i] = acc;
            }
        }
    }
}

}  // namespace

template <class T>
Var<T> group_transform(Var<T> x, const std::vector<Mat4<T>>& mats, std::span<const int> mat_of_row,
                       bool transpose) {
    const Tensor<T>& xv = x.value();
    if (xv.cols() % 4 != 0) throw ShapeError("group_transform: feature dim not divisible by 4");
    if (mat_of_row.size() != xv.rows()) throw ShapeError("group_transform: row map size mismatch");
    std::vector<int> which(mat_of_row.begin(), mat_of_row.end());
    for (int w : which) {
        if (w < 0 || static_cast<std::size_t>(w) >= mats.size()) {
            throw ShapeError("group_transform: matrix index out of range");
        }
    }
    Tensor<T> out(xv.shape());
    apply_groups(xv, mats, which, transpose, out);
    auto ms = std::make_shared<std::vector<Mat4<T>>>(mats);
    return x.tape->push(
        std::move(out), {x},
        [x, ms, which, transpose](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            if (Tensor<T>* gx = tp.accum(x)) {
                Tensor<T> back(g.shape());
                apply_groups(g, *ms, which, !transpose, back);
                for (std::size_t i = 0; i < back.size(); ++i) (*gx)[i] += back[i];
            }
        },
        "group_transform");
}

namespace {

// One head: out = softmax(alpha q k^T, mask) v, probabilities kept in probs.
template <class T>
void attn_head_forward(const T* q, std::size_t ldq, const T* k, std::size_t ldk, const T* v,
                       std::size_t ldv, T* out, std::size_t ldo, std::size_t n, std::size_t m,
                       std::size_t dh, const Mask& mask, T* probs) {
    const T alpha = T(1) / std::sqrt(static_cast<T>(dh));
    gemm<T>(false, true, n, m, dh, q, ldq, k, ldk, T(0), probs, m, alpha);
    const auto& kt = kern::kernels<T>();
    for (std::size_t r = 0; r < n; ++r) {
        if (!kt.softmax_row(probs + r * m, mask.row(r), m)) {
            throw std::invalid_argument("attention: query row " + std::to_string(r) + " is fully masked");
        }
    }
    gemm<T>(false, false, n, dh, m, probs, m, v, ldv, T(0), out, ldo);
}

template <class T>
void attn_head_backward(const T* q, std::size_t ldq, const T* k, std::size_t ldk, const T* v,
                        std::size_t ldv, const T* dout, std::size_t ldd, const T* probs, std::size_t n,
                        std::size_t m, std::size_t dh, T* dq, T* dk, T* dv, std::size_t ldg_q,
                        std::size_t ldg_k, std::size_t ldg_v) {
    const T alpha = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<T> ds(n * m);
    gemm<T>(false, true, n, m, dh, dout, ldd, v, ldv, T(0), ds.data(), m);  // dP
    if (dv) gemm<T>(true, false, m, dh, n, probs, m, dout, ldd, T(1), dv, ldg_v);
    for (std::size_t r = 0; r < n; ++r) {
        T* dr = ds.data() + r * m;
        const T* pr = probs + r * m;
        T rd = T(0);
        for (std::size_t c = 0; c < m; ++c) rd += dr[c] * pr[c];
        for (std::size_t c = 0; c < m; ++c) dr[c] = pr[c] * (dr[c] - rd) * alpha;
    }
    if (dq) gemm<T>(false, false, n, dh, m, ds.data(), m, k, ldk, T(1), dq, ldg_q);
    if (dk) gemm<T>(true, false, m, dh, n, ds.data(), m, q, ldq, T(1), dk, ldg_k);
}

// Shared driver for both layouts. head_off(h, rows) gives the offset of
// head h in a buffer with the given row count; ld is the row stride.
template <class T, class Off>
Var<T> attention_impl(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, std::size_t n, std::size_t m,
                      std::size_t dh, std::size_t ld, Off head_off, const Mask& mask,
                      const char* name) {
    if (mask.rows != n || mask.cols != m) {
        throw ShapeError(std::string(name) + ": mask is " + std::to_string(mask.rows) + "x" +
                         std::to_string(mask.cols) + ", expected " + std::to_string(n) + "x" +
                         std::to_string(m));
    }
    Tensor<T> out(q.value().shape());
    auto probs = std::make_shared<std::vector<T>>(heads * n * m);
    const T* qd = q.value().data();
    const T* kd = k.value().data();
    const T* vd = v.value().data();
    for (std::size_t h = 0; h < heads; ++h) {
        attn_head_forward(qd + head_off(h, n), ld, kd + head_off(h, m), ld, vd + head_off(h, m), ld,
                          out.data() + head_off(h, n), ld, n, m, dh, mask, probs->data() + h * n * m);
    }
    return q.tape->push(
        std::move(out), {q, k, v},
        [q, k, v, heads, n, m, dh, ld, head_off, probs](Tape<T>& tp, int self) {
            const Tensor<T>& g = tp.grad(self);
            Tensor<T>* gq = tp.accum(q);
            Tensor<T>* gk = tp.accum(k);
            Tensor<T>* gv = tp.accum(v);
            const T* qd = tp.value(q).data();
            const T* kd = tp.value(k).data();
            const T* vd = tp.value(v).data();
            for (std::size_t h = 0; h < heads; ++h) {
                attn_head_backward(qd + head_off(h, n), ld, kd + head_off(h, m), ld, vd + head_off(h, m),
                                   ld, g.data() + head_off(h, n), ld, probs->data() + h * n * m, n, m,
                                   dh, gq ? gq->data() + head_off(h, n) : nullptr,
                                   gk ? gk->data() + head_off(h, m) : nullptr,
                                   gv ? gv->data() + head_off(h, m) : nullptr, ld, ld, ld);
            }
        },
        name);
}

}  // namespace

template <class T>
Var<T> masked_attention(Var<T> q, Var<T> k, Var<T> v, const Mask& mask) {
    const Shape& qs = q.value().shape();
    const Shape& ks = k.value().shape();
    if (qs.size() != 3 || ks.size() != 3 || ks != v.value().shape() || qs[0] != ks[0] || qs[2] != ks[2]) {
        throw ShapeError("masked_attention: expected [heads x tokens x dim] inputs");
    }
    const std::size_t heads = qs[0], n = qs[1], m = ks[1], dh = qs[2];
    auto off = [dh](std::size_t h, std::size_t rows) { return h * rows * dh; };
    return attention_impl(q, k, v, heads, n, m, dh, dh, off, mask, "masked_attention");
}

template <class T>
Var<T> multihead_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, const Mask& mask) {
    const Tensor<T>& qv = q.value();
    const Tensor<T>& kv = k.value();
    if (qv.rank() != 2 || kv.rank() != 2 || kv.shape() != v.value().shape() || qv.cols() != kv.cols() ||
        heads == 0 || qv.cols() % heads != 0) {
        throw ShapeError("multihead_attention: bad shapes");
    }
    const std::size_t n = qv.rows(), m = kv.rows(), d = qv.cols(), dh = d / heads;
    auto off = [dh](std::size_t h, std::size_t) { return h * dh; };
    return attention_impl(q, k, v, heads, n, m, dh, d, off, mask, "multihead_attention");
}

template <class T>
std::vector<Tensor<T>> attention_logits(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads) {
    const std::size_t n = q.rows(), m = k.rows(), d = q.cols(), dh = d / heads;
    const T alpha = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Tensor<T>> out;
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor<T> s(Shape{n, m});
        gemm<T>(false, true, n, m, dh, q.data() + h * dh, d, k.data() + h * dh, d, T(0), s.data(), m,
                alpha);
        out.push_back(std::move(s));
    }
    return out;
}

template <class T>
std::vector<Tensor<T>> attention_weights(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads,
                                         const Mask& mask) {
    auto out = attention_logits(q, k, heads);
    for (auto& s : out) {
        for (std::size_t r = 0; r < s.rows(); ++r) {
            if (!kern::kernels<T>().softmax_row(s.data() + r * s.cols(), mask.row(r), s.cols())) {
                throw std::invalid_argument("attention: fully masked row");
            }
        }
    }
    return out;
}

Mat4<double> mat4_identity() {
    return {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
}

Mat4<double> mat4_mul(const Mat4<double>& a, const Mat4<double>& b) {
    Mat4<double> c{};
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
            double s = 0;
            for (int p = 0; p < 4; ++p) s += a[i * 4 + p] * b[p * 4 + j];
            c[i * 4 + j] = s;
        }
    }
    return c;
}

Mat4<double> mat4_transpose(const Mat4<double>& m) {
    Mat4<double> t{};
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) t[i * 4 + j] = m[j * 4 + i];
    }
    return t;
}

Mat4<double> mat4_inverse(const Mat4<double>& m) {
    // Gauss-Jordan with partial pivoting.
    std::array<double, 32> a{};
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) a[i * 8 + j] = m[i * 4 + j];
        a[i * 8 + 4 + i] = 1.0;
    }
    for (int c = 0; c < 4; ++c) {
        int piv = c;
        for (int r = c + 1; r < 4; ++r) {
            if (std::abs(a[r * 8 + c]) > std::abs(a[piv * 8 + c])) piv = r;
        }
        if (std::abs(a[piv * 8 + c]) < 1e-12) throw NumericError("mat4_inverse: singular matrix");
        if (piv != c) {
            for (int j = 0; j < 8; ++j) std::swap(a[c * 8 + j], a[piv * 8 + j]);
        }
        const double inv = 1.0 / a[c * 8 + c];
        for (int j = 0; j < 8; ++j) a[c * 8 + j] *= inv;
        for (int r = 0; r < 4; ++r) {
            if (r == c) continue;
            const double f = a[r * 8 + c];
            if (f == 0.0) continue;
            for (int j = 0; j < 8; ++j) a[r * 8 + j] -= f * a[c * 8 + j];
        }
    }
    Mat4<double> out{};
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) out[i * 4 + j] = a[i * 8 + 4 + j];
    }
    return out;
}

#define MW_INSTANTIATE_OPS(T)                                                                        \
    template struct RopeTable<T>;                                                                    \
    template Var<T> matmul(Var<T>, Var<T>);                                                          \
    template Var<T> linear(Var<T>, Var<T>, Var<T>);                                                  \
    template Var<T> add(Var<T>, Var<T>);                                                             \
    template Var<T> sub(Var<T>, Var<T>);                                                             \
    template Var<T> mul(Var<T>, Var<T>);                                                             \
    template Var<T> scale(Var<T>, T);                                                                \
    template Var<T> scale_by(Var<T>, Var<T>);                                                        \
    template Var<T> silu(Var<T>);                                                                    \
    template Var<T> gelu(Var<T>);                                                                    \
    template Var<T> layer_norm(Var<T>, T);                                                           \
    template Var<T> modulate(Var<T>, Var<T>, Var<T>, std::span<const int>);                          \
    template Var<T> group_mul(Var<T>, Var<T>, std::span<const int>);                                 \
    template Var<T> concat_rows(const std::vector<Var<T>>&);                                         \
    template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                                    \
    template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                                    \
    template Var<T> sum(Var<T>);                                                                     \
    template Var<T> mean(Var<T>);                                                                    \
    template Var<T> mse(Var<T>, Var<T>);                                                             \
    template Var<T> rope_rotate(Var<T>, const RopeTable<T>&);                                        \
    template Var<T> group_transform(Var<T>, const std::vector<Mat4<T>>&, std::span<const int>, bool); \
    template Var<T> masked_attention(Var<T>, Var<T>, Var<T>, const Mask&);                           \
    template Var<T> multihead_attention(Var<T>, Var<T>, Var<T>, std::size_t, const Mask&);           \
    template std::vector<Tensor<T>> attention_weights(const Tensor<T>&, const Tensor<T>&,            \
                                                      std::size_t, const Mask&);                     \
    template std::vector<Tensor<T>> attention_logits(const Tensor<T>&, const Tensor<T>&, std::size_t);

MW_INSTANTIATE_OPS(float)
MW_INSTANTIATE_OPS(double)

}  // namespace mw
