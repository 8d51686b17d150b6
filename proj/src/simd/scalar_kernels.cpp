#include <cmath>
#include <cstring>

#include "kohscan/simd/kernels.hpp"

namespace kohscan::simd::scalar {
namespace {

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
          double* c, std::size_t ldc) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * ldc;
        if (beta == 0.0) {
            std::memset(crow, 0, n * sizeof(double));
        } else if (beta != 1.0) {
            for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
        }
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = alpha * (ta == Trans::no ? a[i * lda + p] : a[p * lda + i]);
            if (tb == Trans::no) {
                const double* brow = b + p * ldb;
                for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
            } else {
                for (std::size_t j = 0; j < n; ++j) crow[j] += aip * b[j * ldb + p];
            }
        }
    }
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void relu(std::size_t n, const double* x, double* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(std::size_t n, const double* x, const double* dy, double* dx) {
    for (std::size_t i = 0; i < n; ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
}

void add_bias(std::size_t rows, std::size_t cols, const double* bias, double* y) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = y + r * cols;
        for (std::size_t j = 0; j < cols; ++j) row[j] += bias[j];
    }
}

void column_sums(std::size_t rows, std::size_t cols, const double* x, double* out) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = x + r * cols;
        for (std::size_t j = 0; j < cols; ++j) out[j] += row[j];
    }
}

void adam(std::size_t n, double* w, const double* g, double* m, double* v, double step_size,
          double beta1, double beta2, double eps) {
    for (std::size_t i = 0; i < n; ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        w[i] -= step_size * m[i] / (std::sqrt(v[i]) + eps);
    }
}

}  // namespace

const KernelTable table{Isa::scalar, gemm, axpy, relu, relu_backward, add_bias, column_sums, adam};

}  // namespace kohscan::simd::scalar
