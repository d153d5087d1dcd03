#pragma once

// Differentiable tensor ops recorded on a Tape. Rank-2 ops treat leading
// dimensions as rows; there is no broadcasting beyond that.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "mw/autograd.hpp"

namespace mw {

// Boolean attention mask, rows = queries, cols = keys.
struct Mask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> allow;

    Mask() = default;
    Mask(std::size_t r, std::size_t c, bool v = false) : rows(r), cols(c), allow(r * c, v ? 1 : 0) {}
    static Mask identity(std::size_t n) {
        Mask m(n, n);
        for (std::size_t i = 0; i < n; ++i) m.set(i, i, true);
        return m;
    }
    bool operator()(std::size_t r, std::size_t c) const { return allow[r * cols + c] != 0; }
    void set(std::size_t r, std::size_t c, bool v) { allow[r * cols + c] = v ? 1 : 0; }
    const std::uint8_t* row(std::size_t r) const { return allow.data() + r * cols; }
};

template <class T>
using Mat4 = std::array<T, 16>;  // row-major

// Per-token 3D position for rotary encoding: fine temporal index and the
// token's column/row inside its frame.
struct TokenPos {
    int t = 0;
    int x = 0;
    int y = 0;
};

// Precomputed rotation angles for each (row, pair) of one head; the same
// rotation is applied to every head.
template <class T>
struct RopeTable {
    std::size_t rows = 0;
    std::size_t head_dim = 0;
    std::vector<T> cos;  // rows x head_dim/2
    std::vector<T> sin;

    // All pairs rotate with the temporal index only.
    static RopeTable temporal(std::span<const int> positions, std::size_t head_dim, double base);
    // Half of the pairs temporal, a quarter each for x and y.
    static RopeTable spatiotemporal(std::span<const TokenPos> positions, std::size_t head_dim,
                                    double base);
};

template <class T>
Var<T> matmul(Var<T> a, Var<T> b);
// x[N x in] * w[in x out] + bias[out]; bias may be an invalid Var.
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias);
template <class T>
Var<T> add(Var<T> a, Var<T> b);
template <class T>
Var<T> sub(Var<T> a, Var<T> b);
template <class T>
Var<T> mul(Var<T> a, Var<T> b);
template <class T>
Var<T> scale(Var<T> a, T s);
// a * s where s is a one-element Var.
template <class T>
Var<T> scale_by(Var<T> a, Var<T> s);
template <class T>
Var<T> silu(Var<T> x);
template <class T>
Var<T> gelu(Var<T> x);
// Normalises each row to zero mean / unit variance (no affine).
template <class T>
Var<T> layer_norm(Var<T> x, T eps = T(1e-6));
// Row r uses group g = row_group[r]: x * (1 + scale[g]) + shift[g].
template <class T>
Var<T> modulate(Var<T> x, Var<T> shift, Var<T> scale, std::span<const int> row_group);
// Row r: x[r] * gate[row_group[r]].
template <class T>
Var<T> group_mul(Var<T> x, Var<T> gate, std::span<const int> row_group);
template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& xs);
template <class T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end);
template <class T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end);
template <class T>
Var<T> sum(Var<T> x);
template <class T>
Var<T> mean(Var<T> x);
// mean((pred - target)^2)
template <class T>
Var<T> mse(Var<T> pred, Var<T> target);
// Rotates each (even, odd) feature pair of every head by the table angles.
template <class T>
Var<T> rope_rotate(Var<T> x, const RopeTable<T>& table);
// Multiplies every consecutive 4-vector of row r by mats[mat_of_row[r]]
// (or its transpose).
template <class T>
Var<T> group_transform(Var<T> x, const std::vector<Mat4<T>>& mats,
                       std::span<const int> mat_of_row, bool transpose = false);
// softmax(q k^T / sqrt(dim)) v per head on [heads x tokens x dim] inputs;
// masked positions get exactly zero weight. Throws on an all-masked row.
template <class T>
Var<T> masked_attention(Var<T> q, Var<T> k, Var<T> v, const Mask& mask);
// Same computation on the packed [tokens x heads*dim] layout.
template <class T>
Var<T> multihead_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, const Mask& mask);

// Attention probabilities of the packed layout without recording; used by
// tests that inspect logits/weights directly.
template <class T>
std::vector<Tensor<T>> attention_weights(const Tensor<T>& q, const Tensor<T>& k,
                                         std::size_t heads, const Mask& mask);
template <class T>
std::vector<Tensor<T>> attention_logits(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads);

Mat4<double> mat4_mul(const Mat4<double>& a, const Mat4<double>& b);
Mat4<double> mat4_inverse(const Mat4<double>& m);
Mat4<double> mat4_transpose(const Mat4<double>& m);
Mat4<double> mat4_identity();

}  // namespace mw
