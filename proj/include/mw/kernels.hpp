#pragma once

// Dense inner-loop kernels with a scalar reference backend and an AVX2/FMA
// backend chosen once at runtime. Every backend computes each output element
// with a fixed reduction order that does not depend on the number of rows
// processed, so results for a row are identical whether it is computed alone
// or as part of a larger matrix.

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace mw::kern {

enum class Backend : std::uint8_t { scalar, avx2 };

// C[m x n] = alpha * op(A) * op(B) + beta * C, all row-major.
// op(A) is m x k, op(B) is k x n; trans flags select the transposed layout.
template <class T>
struct GemmArgs {
    bool trans_a = false;
    bool trans_b = false;
    std::size_t m = 0, n = 0, k = 0;
    T alpha = T(1);
    const T* a = nullptr;
    std::size_t lda = 0;
    const T* b = nullptr;
    std::size_t ldb = 0;
    T beta = T(0);
    T* c = nullptr;
    std::size_t ldc = 0;
};

template <class T>
struct KernelTable {
    void (*gemm)(const GemmArgs<T>&);
    T (*dot)(const T* a, const T* b, std::size_t n);
    void (*axpy)(T alpha, const T* x, T* y, std::size_t n);
    // In-place softmax over row[0..n); entries with allow[j] == 0 get weight
    // exactly zero. allow may be null (all allowed). Returns false if the row
    // has no allowed entry.
    bool (*softmax_row)(T* row, const std::uint8_t* allow, std::size_t n);
    void (*exp_inplace)(T* x, std::size_t n);
    Backend backend;
};

// Active table for float; chosen on first use from CPU features unless
// MW_KERNELS=scalar is set in the environment or set_backend() was called.
const KernelTable<float>& kernels_f32();
// fp64 always runs the scalar reference.
const KernelTable<double>& kernels_f64();

template <class T>
const KernelTable<T>& kernels() {
    if constexpr (sizeof(T) == sizeof(float)) {
        return kernels_f32();
    } else {
        return kernels_f64();
    }
}

// Explicit access for equivalence tests and benchmarks.
const KernelTable<float>& scalar_table_f32();
const KernelTable<double>& scalar_table_f64();
// Null when the CPU (or build) lacks AVX2/FMA.
const KernelTable<float>* avx2_table_f32();

bool cpu_has_avx2();
void set_backend(Backend b);
Backend active_backend();
std::string_view backend_name(Backend b);

}  // namespace mw::kern
