#pragma once

#include <cblas.h>

#include <cstdlib>
#if defined(__x86_64__)
#include <cpuid.h>
#endif
#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace prfnet {
namespace detail {

inline bool cpu_has_avx512f() {
#if defined(__x86_64__)
    unsigned a = 0, b = 0, c = 0, d = 0;
    if (__get_cpuid_count(7, 0, &a, &b, &c, &d) == 0) return false;
    return (b & (1u << 16)) != 0;
#else
    return false;
#endif
}

// OpenBLAS picks its kernel from CPUID at library init and falls back to a
// slow generic kernel on cloud CPUs with masked model strings. Selecting the
// kernel by ISA instead costs nothing on correctly detected hosts and is
// worth ~6x here. Runs before OpenBLAS's own (unprioritized) constructor;
// an explicit OPENBLAS_CORETYPE in the environment always wins.
__attribute__((constructor(101))) inline void select_blas_kernel() {
    if (cpu_has_avx512f()) setenv("OPENBLAS_CORETYPE", "SKYLAKEX", /*overwrite=*/0);
#if defined(__GLIBC__)
    // Activation and im2col buffers are tens of MB and turn over every op;
    // keep them on the heap instead of mmap/munmap round trips.
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
}

// C(m x n) = alpha * op(A) * op(B) + beta * C, row-major.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
                 int lda, const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
                 int lda, const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace detail
}  // namespace prfnet
