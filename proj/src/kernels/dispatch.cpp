#include <atomic>
#include <cstdlib>
#include <string>

#include "mw/kernels.hpp"

namespace mw::kern {

#if defined(MW_HAVE_AVX2_TU)
const KernelTable<float>* avx2_table_f32_impl();
#endif

namespace {

std::atomic<const KernelTable<float>*> active{nullptr};

const KernelTable<float>* choose() {
    const char* env = std::getenv("MW_KERNELS");
    if (env && std::string(env) == "scalar") return &scalar_table_f32();
    if (const auto* t = avx2_table_f32()) return t;
    return &scalar_table_f32();
}

}  // namespace

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

const KernelTable<float>* avx2_table_f32() {
#if defined(MW_HAVE_AVX2_TU)
    static const bool ok = cpu_has_avx2();
    return ok ? avx2_table_f32_impl() : nullptr;
#else
    return nullptr;
#endif
}

const KernelTable<float>& kernels_f32() {
    const KernelTable<float>* t = active.load(std::memory_order_acquire);
    if (!t) {
        t = choose();
        active.store(t, std::memory_order_release);
    }
    return *t;
}

const KernelTable<double>& kernels_f64() { return scalar_table_f64(); }

void set_backend(Backend b) {
    if (b == Backend::avx2 && avx2_table_f32()) {
        active.store(avx2_table_f32(), std::memory_order_release);
    } else {
        active.store(&scalar_table_f32(), std::memory_order_release);
    }
}

Backend active_backend() { return kernels_f32().backend; }

std::string_view backend_name(Backend b) { return b == Backend::avx2 ? "avx2" : "scalar"; }

}  // namespace mw::kern
