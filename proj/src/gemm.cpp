#include "scale/tensor.hpp"

#include <atomic>
#include <cstdlib>

#ifdef SCALE_USE_OPENBLAS
#include <dlfcn.h>
#include <malloc.h>
#endif

namespace scale {

namespace detail {

// Fallback kernel. Each output row is produced by one fixed serial loop, so
// the result is identical for any thread count.
template <class T>
void gemm_fallback(bool trans_a, bool trans_b, i64 m, i64 n, i64 k, const T* a, const T* b,
                   T* c, bool accumulate) {
  auto a_at = [&](i64 i, i64 p) { return trans_a ? a[p * m + i] : a[i * k + p]; };
  for (i64 i = 0; i < m; ++i) {
    T* crow = c + i * n;
    if (!accumulate)
      for (i64 j = 0; j < n; ++j) crow[j] = T(0);
    if (!trans_b) {
      for (i64 p = 0; p < k; ++p) {
        T av = a_at(i, p);
        const T* brow = b + p * n;
        for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    } else {
      for (i64 j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T acc = T(0);
        for (i64 p = 0; p < k; ++p) acc += a_at(i, p) * brow[p];
        crow[j] += acc;
      }
    }
  }
}

#ifdef SCALE_USE_OPENBLAS

// OpenBLAS is loaded at runtime rather than link time so the kernel
// selection can be steered first: the CPU in some VMs reports an unknown
// model and OpenBLAS 0.3.x then falls back to its slowest generic kernel
// even when AVX-512 is available. OPENBLAS_CORETYPE is only honored if it
// is set before the library initializes, which rules out normal linking.
struct BlasRuntime {
  // cblas enums are plain C ints: 101 = RowMajor, 111 = NoTrans, 112 = Trans.
  using sgemm_fn = void (*)(int, int, int, int, int, int, float, const float*, int,
                            const float*, int, float, float*, int);
  using dgemm_fn = void (*)(int, int, int, int, int, int, double, const double*, int,
                            const double*, int, double, double*, int);
  using set_threads_fn = void (*)(int);

  sgemm_fn sgemm = nullptr;
  dgemm_fn dgemm = nullptr;
  set_threads_fn set_threads = nullptr;

  BlasRuntime() {
    // Large tensors are allocated and freed every training step; keep them
    // on the heap instead of per-allocation mmap/munmap round trips.
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);

    if (!std::getenv("OPENBLAS_CORETYPE")) {
      if (__builtin_cpu_supports("avx512f"))
        setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 1);
      else if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma"))
        setenv("OPENBLAS_CORETYPE", "HASWELL", 1);
    }
    void* handle = dlopen("libopenblas.so.0", RTLD_NOW | RTLD_LOCAL);
    if (!handle) handle = dlopen("libopenblas.so", RTLD_NOW | RTLD_LOCAL);
    if (!handle) return;
    sgemm = reinterpret_cast<sgemm_fn>(dlsym(handle, "cblas_sgemm"));
    dgemm = reinterpret_cast<dgemm_fn>(dlsym(handle, "cblas_dgemm"));
    set_threads = reinterpret_cast<set_threads_fn>(dlsym(handle, "openblas_set_num_threads"));
    if (!sgemm || !dgemm) {
      sgemm = nullptr;
      dgemm = nullptr;
      set_threads = nullptr;
    }
    if (set_threads) set_threads(1);
  }
};

BlasRuntime& blas() {
  static BlasRuntime rt;
  return rt;
}

#endif  // SCALE_USE_OPENBLAS

void gemm(bool trans_a, bool trans_b, i64 m, i64 n, i64 k, const float* a, const float* b,
          float* c, bool accumulate) {
#ifdef SCALE_USE_OPENBLAS
  if (auto* fn = blas().sgemm) {
    fn(101, trans_a ? 112 : 111, trans_b ? 112 : 111, static_cast<int>(m), static_cast<int>(n),
       static_cast<int>(k), 1.0f, a, static_cast<int>(trans_a ? m : k), b,
       static_cast<int>(trans_b ? k : n), accumulate ? 1.0f : 0.0f, c, static_cast<int>(n));
    return;
  }
#endif
  gemm_fallback(trans_a, trans_b, m, n, k, a, b, c, accumulate);
}

void gemm(bool trans_a, bool trans_b, i64 m, i64 n, i64 k, const double* a, const double* b,
          double* c, bool accumulate) {
#ifdef SCALE_USE_OPENBLAS
  if (auto* fn = blas().dgemm) {
    fn(101, trans_a ? 112 : 111, trans_b ? 112 : 111, static_cast<int>(m), static_cast<int>(n),
       static_cast<int>(k), 1.0, a, static_cast<int>(trans_a ? m : k), b,
       static_cast<int>(trans_b ? k : n), accumulate ? 1.0 : 0.0, c, static_cast<int>(n));
    return;
  }
#endif
  gemm_fallback(trans_a, trans_b, m, n, k, a, b, c, accumulate);
}

}  // namespace detail

namespace {
std::atomic<int> g_threads{1};
}

void set_num_threads(int n) {
  if (n < 1) n = 1;
  g_threads.store(n);
#ifdef SCALE_USE_OPENBLAS
  if (auto* fn = detail::blas().set_threads) fn(n);
#endif
}

int num_threads() { return g_threads.load(); }

}  // namespace scale
