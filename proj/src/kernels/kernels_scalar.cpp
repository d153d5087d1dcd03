#include "mw/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace mw::kern {
namespace {

template <class T>
inline T at(const T* p, std::size_t ld, bool trans, std::size_t r, std::size_t c) {
    return trans ? p[c * ld + r] : p[r * ld + c];
}

// Reference GEMM: each C element is a sequential sum over k.
template <class T>
void gemm_scalar(const GemmArgs<T>& g) {
    for (std::size_t i = 0; i < g.m; ++i) {
        for (std::size_t j = 0; j < g.n; ++j) {
            T acc = T(0);
            for (std::size_t p = 0; p < g.k; ++p) {
                acc += at(g.a, g.lda, g.trans_a, i, p) * at(g.b, g.ldb, g.trans_b, p, j);
            }
            T& c = g.c[i * g.ldc + j];
            c = g.beta == T(0) ? g.alpha * acc : g.alpha * acc + g.beta * c;
        }
    }
}

template <class T>
T dot_scalar(const T* a, const T* b, std::size_t n) {
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

template <class T>
void axpy_scalar(T alpha, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
void exp_scalar(T* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] = std::exp(x[i]);
}

template <class T>
bool softmax_scalar(T* row, const std::uint8_t* allow, std::size_t n) {
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
        if (allow && !allow[j]) continue;
        any = true;
        mx = std::max(mx, row[j]);
    }
    if (!any) return false;
    T sum = T(0);
    for (std::size_t j = 0; j < n; ++j) {
        if (allow && !allow[j]) {
            row[j] = T(0);
            continue;
        }
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
    return true;
}

}  // namespace

const KernelTable<float>& scalar_table_f32() {
    static const KernelTable<float> t{&gemm_scalar<float>, &dot_scalar<float>, &axpy_scalar<float>,
                                      &softmax_scalar<float>, &exp_scalar<float>, Backend::scalar};
    return t;
}

const KernelTable<double>& scalar_table_f64() {
    static const KernelTable<double> t{&gemm_scalar<double>, &dot_scalar<double>,
                                       &axpy_scalar<double>, &softmax_scalar<double>,
                                       &exp_scalar<double>, Backend::scalar};
    return t;
}

}  // namespace mw::kern
