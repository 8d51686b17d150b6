#pragma once

// Data-parallel inner loops used by the network layers and optimizers.
//
// Every kernel has a scalar reference implementation and, on x86-64, an
// AVX2+FMA variant. The active table is chosen once at first use from the
// CPU's reported features; KOHSCAN_ISA=scalar in the environment forces the
// reference path. All matrices are row-major.

#include <cstddef>
#include <string_view>

namespace kohscan::simd {

enum class Isa { scalar, avx2 };

enum class Trans { no, yes };

struct KernelTable {
    Isa isa;

    // C = alpha * op(A) * op(B) + beta * C, op(A) is m x k, op(B) is k x n.
    // beta == 0 overwrites C without reading it.
    void (*gemm)(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
                 const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
                 double* c, std::size_t ldc);

    // y += alpha * x
    void (*axpy)(std::size_t n, double alpha, const double* x, double* y);

    // y = max(x, 0); x and y may alias.
    void (*relu)(std::size_t n, const double* x, double* y);

    // dx = x > 0 ? dy : 0, where x is the relu output (or input; same sign pattern).
    void (*relu_backward)(std::size_t n, const double* x, const double* dy, double* dx);

    // In-place bias broadcast: rows x cols matrix, bias of length cols added to every row.
    void (*add_bias)(std::size_t rows, std::size_t cols, const double* bias, double* y);

    // Column sums accumulated into out (length cols).
    void (*column_sums)(std::size_t rows, std::size_t cols, const double* x, double* out);

    // One Adam step over n parameters. step_size already includes bias correction.
    void (*adam)(std::size_t n, double* w, const double* g, double* m, double* v,
                 double step_size, double beta1, double beta2, double eps);
};

/// Kernel table selected for this process.
const KernelTable& kernels();

/// Table for a specific ISA; throws std::runtime_error if the CPU lacks it.
const KernelTable& kernels_for(Isa isa);

bool isa_supported(Isa isa);

/// Overrides the process-wide selection (benchmarks and equivalence tests).
void select_isa(Isa isa);

std::string_view isa_name(Isa isa);

namespace scalar {
extern const KernelTable table;
}

#if defined(__x86_64__) || defined(_M_X64)
namespace avx2 {
extern const KernelTable table;
}
#endif

}  // namespace kohscan::simd
