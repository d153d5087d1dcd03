// Compiled with -mavx2 -mfma; only reached when the CPU reports both.
#include "mw/kernels.hpp"

#include <immintrin.h>

#include <cmath>
#include <limits>
#include <vector>

namespace mw::kern {
namespace {

constexpr std::size_t kMr = 4;
constexpr std::size_t kNr = 16;

inline float hsum(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 sh = _mm_movehdup_ps(lo);
    __m128 s = _mm_add_ps(lo, sh);
    sh = _mm_movehl_ps(sh, s);
    s = _mm_add_ss(s, sh);
    return _mm_cvtss_f32(s);
}

// Cephes-style expf, ~2 ulp over the clamped range.
inline __m256 exp256(__m256 x) {
    const __m256 hi = _mm256_set1_ps(88.3762626647949f);
    const __m256 lo = _mm256_set1_ps(-88.3762626647949f);
    x = _mm256_min_ps(_mm256_max_ps(x, lo), hi);
    __m256 fx = _mm256_fmadd_ps(x, _mm256_set1_ps(1.44269504088896341f), _mm256_set1_ps(0.5f));
    fx = _mm256_floor_ps(fx);
    x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(0.693359375f), x);
    x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(-2.12194440e-4f), x);
    const __m256 z = _mm256_mul_ps(x, x);
    __m256 y = _mm256_set1_ps(1.9875691500e-4f);
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.3981999507e-3f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(8.3334519073e-3f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(4.1665795894e-2f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.6666665459e-1f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(5.0000001201e-1f));
    y = _mm256_fmadd_ps(y, z, x);
    y = _mm256_add_ps(y, _mm256_set1_ps(1.0f));
    __m256i n = _mm256_cvttps_epi32(fx);
    n = _mm256_add_epi32(n, _mm256_set1_epi32(127));
    n = _mm256_slli_epi32(n, 23);
    return _mm256_mul_ps(y, _mm256_castsi256_ps(n));
}

inline float exp1(float x) {
    alignas(32) float buf[8] = {x, 0, 0, 0, 0, 0, 0, 0};
    _mm256_store_ps(buf, exp256(_mm256_load_ps(buf)));
    return buf[0];
}

inline float finish(float acc, float alpha, float beta, float c) {
    return beta == 0.0f ? alpha * acc : std::fma(beta, c, alpha * acc);
}

inline __m256 finish(__m256 acc, __m256 alpha, float beta, const float* c) {
    const __m256 t = _mm256_mul_ps(alpha, acc);
    return beta == 0.0f ? t : _mm256_fmadd_ps(_mm256_set1_ps(beta), _mm256_loadu_ps(c), t);
}

// Rows [i0, i0+rows) x cols [j0, j0+16) with rows <= 4. Every lane is a
// sequential fma chain over p, the same arithmetic as the scalar tails below.
template <std::size_t Rows>
inline void micro(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
                  std::size_t ldc, std::size_t k, float alpha, float beta) {
    __m256 acc[Rows][2];
    for (std::size_t r = 0; r < Rows; ++r) {
        acc[r][0] = _mm256_setzero_ps();
        acc[r][1] = _mm256_setzero_ps();
    }
    for (std::size_t p = 0; p < k; ++p) {
        const __m256 b0 = _mm256_loadu_ps(b + p * ldb);
        const __m256 b1 = _mm256_loadu_ps(b + p * ldb + 8);
        for (std::size_t r = 0; r < Rows; ++r) {
            const __m256 av = _mm256_broadcast_ss(a + r * lda + p);
            acc[r][0] = _mm256_fmadd_ps(av, b0, acc[r][0]);
            acc[r][1] = _mm256_fmadd_ps(av, b1, acc[r][1]);
        }
    }
    const __m256 al = _mm256_set1_ps(alpha);
    for (std::size_t r = 0; r < Rows; ++r) {
        float* cr = c + r * ldc;
        _mm256_storeu_ps(cr, finish(acc[r][0], al, beta, cr));
        _mm256_storeu_ps(cr + 8, finish(acc[r][1], al, beta, cr + 8));
    }
}

template <std::size_t Rows>
inline void micro8(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
                   std::size_t ldc, std::size_t k, float alpha, float beta) {
    __m256 acc[Rows];
    for (std::size_t r = 0; r < Rows; ++r) acc[r] = _mm256_setzero_ps();
    for (std::size_t p = 0; p < k; ++p) {
        const __m256 b0 = _mm256_loadu_ps(b + p * ldb);
        for (std::size_t r = 0; r < Rows; ++r) {
            acc[r] = _mm256_fmadd_ps(_mm256_broadcast_ss(a + r * lda + p), b0, acc[r]);
        }
    }
    const __m256 al = _mm256_set1_ps(alpha);
    for (std::size_t r = 0; r < Rows; ++r) {
        float* cr = c + r * ldc;
        _mm256_storeu_ps(cr, finish(acc[r], al, beta, cr));
    }
}

template <std::size_t Rows>
void row_block(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
               std::size_t ldc, std::size_t n, std::size_t k, float alpha, float beta) {
    std::size_t j = 0;
    for (; j + kNr <= n; j += kNr) micro<Rows>(a, lda, b + j, ldb, c + j, ldc, k, alpha, beta);
    for (; j + 8 <= n; j += 8) micro8<Rows>(a, lda, b + j, ldb, c + j, ldc, k, alpha, beta);
    for (; j < n; ++j) {
        for (std::size_t r = 0; r < Rows; ++r) {
            float acc = 0.0f;
            for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[r * lda + p], b[p * ldb + j], acc);
            float& cv = c[r * ldc + j];
            cv = finish(acc, alpha, beta, cv);
        }
    }
}

thread_local std::vector<float> pack_a;
thread_local std::vector<float> pack_b;

void gemm_avx2(const GemmArgs<float>& g) {
    if (g.m == 0 || g.n == 0) return;
    const float* a = g.a;
    std::size_t lda = g.lda;
    if (g.trans_a) {
        pack_a.resize(g.m * g.k);
        for (std::size_t p = 0; p < g.k; ++p) {
            for (std::size_t i = 0; i < g.m; ++i) pack_a[i * g.k + p] = g.a[p * g.lda + i];
        }
        a = pack_a.data();
        lda = g.k;
    }
    const float* b = g.b;
    std::size_t ldb = g.ldb;
    if (g.trans_b) {
        pack_b.resize(g.k * g.n);
        for (std::size_t j = 0; j < g.n; ++j) {
            for (std::size_t p = 0; p < g.k; ++p) pack_b[p * g.n + j] = g.b[j * g.ldb + p];
        }
        b = pack_b.data();
        ldb = g.n;
    }
    std::size_t i = 0;
    for (; i + kMr <= g.m; i += kMr) {
        row_block<kMr>(a + i * lda, lda, b, ldb, g.c + i * g.ldc, g.ldc, g.n, g.k, g.alpha, g.beta);
    }
    for (; i < g.m; ++i) {
        row_block<1>(a + i * lda, lda, b, ldb, g.c + i * g.ldc, g.ldc, g.n, g.k, g.alpha, g.beta);
    }
}

float dot_avx2(const float* a, const float* b, std::size_t n) {
    __m256 acc0 = _mm256_setzero_ps();
    __m256 acc1 = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
        acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
    }
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    }
    float s = hsum(_mm256_add_ps(acc0, acc1));
    for (; i < n; ++i) s = std::fma(a[i], b[i], s);
    return s;
}

void axpy_avx2(float alpha, const float* x, float* y, std::size_t n) {
    const __m256 al = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(y + i, _mm256_fmadd_ps(al, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    }
    for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

void exp_avx2(float* x, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) _mm256_storeu_ps(x + i, exp256(_mm256_loadu_ps(x + i)));
    for (; i < n; ++i) x[i] = exp1(x[i]);
}

bool softmax_avx2(float* row, const std::uint8_t* allow, std::size_t n) {
    float mx = -std::numeric_limits<float>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
        if (allow && !allow[j]) continue;
        any = true;
        mx = row[j] > mx ? row[j] : mx;
    }
    if (!any) return false;
    const __m256 vmx = _mm256_set1_ps(mx);
    __m256 vsum = _mm256_setzero_ps();
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
        __m256 e = exp256(_mm256_sub_ps(_mm256_loadu_ps(row + j), vmx));
        if (allow) {
            const __m128i m8 = _mm_loadl_epi64(reinterpret_cast<const __m128i*>(allow + j));
            const __m256i m32 = _mm256_cvtepu8_epi32(m8);
            const __m256 keep = _mm256_castsi256_ps(_mm256_cmpgt_epi32(m32, _mm256_setzero_si256()));
            e = _mm256_and_ps(e, keep);
        }
        _mm256_storeu_ps(row + j, e);
        vsum = _mm256_add_ps(vsum, e);
    }
    float sum = hsum(vsum);
    for (; j < n; ++j) {
        if (allow && !allow[j]) {
            row[j] = 0.0f;
            continue;
        }
        row[j] = exp1(row[j] - mx);
        sum += row[j];
    }
    const __m256 inv = _mm256_set1_ps(1.0f / sum);
    j = 0;
    for (; j + 8 <= n; j += 8) _mm256_storeu_ps(row + j, _mm256_mul_ps(_mm256_loadu_ps(row + j), inv));
    const float invs = 1.0f / sum;
    for (; j < n; ++j) row[j] *= invs;
    return true;
}

}  // namespace

const KernelTable<float>* avx2_table_f32_impl() {
    static const KernelTable<float> t{&gemm_avx2, &dot_avx2, &axpy_avx2, &softmax_avx2, &exp_avx2,
                                      Backend::avx2};
    return &t;
}

}  // namespace mw::kern
