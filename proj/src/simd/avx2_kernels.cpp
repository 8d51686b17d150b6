#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "kohscan/simd/kernels.hpp"

#define KOHSCAN_AVX2 __attribute__((target("avx2,fma")))

namespace kohscan::simd::avx2 {
namespace {

// Register tile: 6 rows x 8 columns = 12 ymm accumulators.
constexpr std::size_t kMr = 6;
constexpr std::size_t kNr = 8;
constexpr std::size_t kKc = 256;
constexpr std::size_t kMc = 96;
constexpr std::size_t kNc = 1024;

struct PackBuffers {
    std::vector<double> a;
    std::vector<double> b;
};

PackBuffers& buffers() {
    thread_local PackBuffers buf;
    return buf;
}

// op(A) rows [i0, i0+mc), depth [p0, p0+kc) into kMr-row panels, scaled by alpha.
void pack_a(Trans ta, const double* a, std::size_t lda, std::size_t i0, std::size_t mc,
            std::size_t p0, std::size_t kc, double alpha, double* out) {
    for (std::size_t ir = 0; ir < mc; ir += kMr) {
        const std::size_t rows = std::min(kMr, mc - ir);
        for (std::size_t p = 0; p < kc; ++p) {
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t i = i0 + ir + r;
                const std::size_t pp = p0 + p;
                out[r] = alpha * (ta == Trans::no ? a[i * lda + pp] : a[pp * lda + i]);
            }
            for (std::size_t r = rows; r < kMr; ++r) out[r] = 0.0;
            out += kMr;
        }
    }
}

// op(B) depth [p0, p0+kc), columns [j0, j0+nc) into kNr-column panels.
void pack_b(Trans tb, const double* b, std::size_t ldb, std::size_t p0, std::size_t kc,
            std::size_t j0, std::size_t nc, double* out) {
    for (std::size_t jr = 0; jr < nc; jr += kNr) {
        const std::size_t cols = std::min(kNr, nc - jr);
        for (std::size_t p = 0; p < kc; ++p) {
            const std::size_t pp = p0 + p;
            if (tb == Trans::no) {
                const double* src = b + pp * ldb + j0 + jr;
                std::size_t c = 0;
                for (; c < cols; ++c) out[c] = src[c];
                for (; c < kNr; ++c) out[c] = 0.0;
            } else {
                std::size_t c = 0;
                for (; c < cols; ++c) out[c] = b[(j0 + jr + c) * ldb + pp];
                for (; c < kNr; ++c) out[c] = 0.0;
            }
            out += kNr;
        }
    }
}

KOHSCAN_AVX2 inline void acc(double* row, __m256d lo, __m256d hi) {
    _mm256_storeu_pd(row, _mm256_add_pd(_mm256_loadu_pd(row), lo));
    _mm256_storeu_pd(row + 4, _mm256_add_pd(_mm256_loadu_pd(row + 4), hi));
}

KOHSCAN_AVX2 void micro_kernel(std::size_t kc, const double* pa, const double* pb, double* c,
                               std::size_t ldc, std::size_t rows, std::size_t cols) {
    __m256d c00 = _mm256_setzero_pd(), c01 = _mm256_setzero_pd();
    __m256d c10 = _mm256_setzero_pd(), c11 = _mm256_setzero_pd();
    __m256d c20 = _mm256_setzero_pd(), c21 = _mm256_setzero_pd();
    __m256d c30 = _mm256_setzero_pd(), c31 = _mm256_setzero_pd();
    __m256d c40 = _mm256_setzero_pd(), c41 = _mm256_setzero_pd();
    __m256d c50 = _mm256_setzero_pd(), c51 = _mm256_setzero_pd();

    for (std::size_t p = 0; p < kc; ++p) {
        const __m256d b0 = _mm256_loadu_pd(pb);
        const __m256d b1 = _mm256_loadu_pd(pb + 4);
        __m256d a = _mm256_broadcast_sd(pa + 0);
        c00 = _mm256_fmadd_pd(a, b0, c00);
        c01 = _mm256_fmadd_pd(a, b1, c01);
        a = _mm256_broadcast_sd(pa + 1);
        c10 = _mm256_fmadd_pd(a, b0, c10);
        c11 = _mm256_fmadd_pd(a, b1, c11);
        a = _mm256_broadcast_sd(pa + 2);
        c20 = _mm256_fmadd_pd(a, b0, c20);
        c21 = _mm256_fmadd_pd(a, b1, c21);
        a = _mm256_broadcast_sd(pa + 3);
        c30 = _mm256_fmadd_pd(a, b0, c30);
        c31 = _mm256_fmadd_pd(a, b1, c31);
        a = _mm256_broadcast_sd(pa + 4);
        c40 = _mm256_fmadd_pd(a, b0, c40);
        c41 = _mm256_fmadd_pd(a, b1, c41);
        a = _mm256_broadcast_sd(pa + 5);
        c50 = _mm256_fmadd_pd(a, b0, c50);
        c51 = _mm256_fmadd_pd(a, b1, c51);
        pa += kMr;
        pb += kNr;
    }

    if (rows == kMr && cols == kNr) {
        acc(c + 0 * ldc, c00, c01);
        acc(c + 1 * ldc, c10, c11);
        acc(c + 2 * ldc, c20, c21);
        acc(c + 3 * ldc, c30, c31);
        acc(c + 4 * ldc, c40, c41);
        acc(c + 5 * ldc, c50, c51);
        return;
    }

    alignas(32) double tile[kMr * kNr];
    _mm256_store_pd(tile + 0, c00);
    _mm256_store_pd(tile + 4, c01);
    _mm256_store_pd(tile + 8, c10);
    _mm256_store_pd(tile + 12, c11);
    _mm256_store_pd(tile + 16, c20);
    _mm256_store_pd(tile + 20, c21);
    _mm256_store_pd(tile + 24, c30);
    _mm256_store_pd(tile + 28, c31);
    _mm256_store_pd(tile + 32, c40);
    _mm256_store_pd(tile + 36, c41);
    _mm256_store_pd(tile + 40, c50);
    _mm256_store_pd(tile + 44, c51);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < cols; ++j) c[r * ldc + j] += tile[r * kNr + j];
    }
}

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
          double* c, std::size_t ldc) {
    if (m == 0 || n == 0) return;
    for (std::size_t i = 0; i < m; ++i) {
        double* row = c + i * ldc;
        if (beta == 0.0) {
            std::memset(row, 0, n * sizeof(double));
        } else if (beta != 1.0) {
            for (std::size_t j = 0; j < n; ++j) row[j] *= beta;
        }
    }
    if (k == 0 || alpha == 0.0) return;

    auto& buf = buffers();
    const std::size_t kc_max = std::min(k, kKc);
    const std::size_t mc_max = (std::min(m, kMc) + kMr - 1) / kMr * kMr;
    const std::size_t nc_max = (std::min(n, kNc) + kNr - 1) / kNr * kNr;
    if (buf.a.size() < mc_max * kc_max) buf.a.resize(mc_max * kc_max);
    if (buf.b.size() < nc_max * kc_max) buf.b.resize(nc_max * kc_max);

    for (std::size_t jc = 0; jc < n; jc += kNc) {
        const std::size_t nc = std::min(kNc, n - jc);
        for (std::size_t pc = 0; pc < k; pc += kKc) {
            const std::size_t kc = std::min(kKc, k - pc);
            pack_b(tb, b, ldb, pc, kc, jc, nc, buf.b.data());
            for (std::size_t ic = 0; ic < m; ic += kMc) {
                const std::size_t mc = std::min(kMc, m - ic);
                pack_a(ta, a, lda, ic, mc, pc, kc, alpha, buf.a.data());
                for (std::size_t jr = 0; jr < nc; jr += kNr) {
                    const std::size_t cols = std::min(kNr, nc - jr);
                    const double* pb = buf.b.data() + (jr / kNr) * kc * kNr;
                    for (std::size_t ir = 0; ir < mc; ir += kMr) {
                        const std::size_t rows = std::min(kMr, mc - ir);
                        const double* pa = buf.a.data() + (ir / kMr) * kc * kMr;
                        micro_kernel(kc, pa, pb, c + (ic + ir) * ldc + jc + jr, ldc, rows, cols);
                    }
                }
            }
        }
    }
}

KOHSCAN_AVX2 void axpy(std::size_t n, double alpha, const double* x, double* y) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

KOHSCAN_AVX2 void relu(std::size_t n, const double* x, double* y) {
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        // max(x, 0) with x in the first operand keeps NaN-free inputs exact.
        _mm256_storeu_pd(y + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
    }
    for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

KOHSCAN_AVX2 void relu_backward(std::size_t n, const double* x, const double* dy, double* dx) {
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
        _mm256_storeu_pd(dx + i, _mm256_and_pd(mask, _mm256_loadu_pd(dy + i)));
    }
    for (; i < n; ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
}

KOHSCAN_AVX2 void add_bias(std::size_t rows, std::size_t cols, const double* bias, double* y) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = y + r * cols;
        std::size_t j = 0;
        for (; j + 4 <= cols; j += 4) {
            _mm256_storeu_pd(row + j, _mm256_add_pd(_mm256_loadu_pd(row + j), _mm256_loadu_pd(bias + j)));
        }
        for (; j < cols; ++j) row[j] += bias[j];
    }
}

KOHSCAN_AVX2 void column_sums(std::size_t rows, std::size_t cols, const double* x, double* out) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = x + r * cols;
        std::size_t j = 0;
        for (; j + 4 <= cols; j += 4) {
            _mm256_storeu_pd(out + j, _mm256_add_pd(_mm256_loadu_pd(out + j), _mm256_loadu_pd(row + j)));
        }
        for (; j < cols; ++j) out[j] += row[j];
    }
}

KOHSCAN_AVX2 void adam(std::size_t n, double* w, const double* g, double* m, double* v,
                       double step_size, double beta1, double beta2, double eps) {
    const __m256d b1 = _mm256_set1_pd(beta1), nb1 = _mm256_set1_pd(1.0 - beta1);
    const __m256d b2 = _mm256_set1_pd(beta2), nb2 = _mm256_set1_pd(1.0 - beta2);
    const __m256d lr = _mm256_set1_pd(step_size), ve = _mm256_set1_pd(eps);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d gi = _mm256_loadu_pd(g + i);
        const __m256d mi = _mm256_add_pd(_mm256_mul_pd(b1, _mm256_loadu_pd(m + i)), _mm256_mul_pd(nb1, gi));
        const __m256d vi = _mm256_add_pd(_mm256_mul_pd(b2, _mm256_loadu_pd(v + i)),
                                         _mm256_mul_pd(nb2, _mm256_mul_pd(gi, gi)));
        const __m256d upd = _mm256_div_pd(_mm256_mul_pd(lr, mi), _mm256_add_pd(_mm256_sqrt_pd(vi), ve));
        _mm256_storeu_pd(m + i, mi);
        _mm256_storeu_pd(v + i, vi);
        _mm256_storeu_pd(w + i, _mm256_sub_pd(_mm256_loadu_pd(w + i), upd));
    }
    for (; i < n; ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        w[i] -= step_size * m[i] / (std::sqrt(v[i]) + eps);
    }
}

}  // namespace

const KernelTable table{Isa::avx2, gemm, axpy, relu, relu_backward, add_bias, column_sums, adam};

}  // namespace kohscan::simd::avx2

#endif
