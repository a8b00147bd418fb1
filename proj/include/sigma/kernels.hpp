#pragma once

#include <cstdint>
#include <vector>

// Data-parallel kernels. Every kernel comes in two flavours: the OpenMP
// version in sigma:: and a serial driver in sigma::ref::. Both run the same
// per-row worker, so outputs are bit-identical regardless of thread count;
// tests compare them and tools/sigma_bench times them.

namespace sigma {

void set_threads(int n);
int max_threads();

// C = A(m x k) * B(k x n), row-major. accumulate=true adds into C.
void matmul(double* c, const double* a, const double* b, std::int64_t m,
            std::int64_t k, std::int64_t n, bool accumulate = false);

// C = A(m x k) * B(n x k)^T
void matmul_nt(double* c, const double* a, const double* b, std::int64_t m,
               std::int64_t k, std::int64_t n, bool accumulate = false);

// C = A(k x m)^T * B(k x n)
void matmul_tn(double* c, const double* a, const double* b, std::int64_t m,
               std::int64_t k, std::int64_t n, bool accumulate = false);

// Row-wise max-shifted softmax with temperature, out-of-place is allowed
// (out == x is fine).
void softmax_rows(double* out, const double* x, std::int64_t rows,
                  std::int64_t cols, double temperature);

// out[i] = dot(q, m[i]) for n rows of dimension d.
void dot_scan(double* out, const double* q, const double* m, std::int64_t n,
              std::int64_t d);

// Per point: index of the codeword minimizing squared distance, ties broken
// by lowest index. dist may be nullptr.
void nearest_codeword(std::int32_t* idx, double* dist, const double* x,
                      std::int64_t n, const double* codewords, std::int64_t k,
                      std::int64_t d);

namespace ref {
void matmul(double* c, const double* a, const double* b, std::int64_t m,
            std::int64_t k, std::int64_t n, bool accumulate = false);
void matmul_nt(double* c, const double* a, const double* b, std::int64_t m,
               std::int64_t k, std::int64_t n, bool accumulate = false);
void matmul_tn(double* c, const double* a, const double* b, std::int64_t m,
               std::int64_t k, std::int64_t n, bool accumulate = false);
void softmax_rows(double* out, const double* x, std::int64_t rows,
                  std::int64_t cols, double temperature);
void dot_scan(double* out, const double* q, const double* m, std::int64_t n,
              std::int64_t d);
void nearest_codeword(std::int32_t* idx, double* dist, const double* x,
                      std::int64_t n, const double* codewords, std::int64_t k,
                      std::int64_t d);
}  // namespace ref

// Single-vector helpers built on the row kernels.
std::vector<double> softmax(const std::vector<double>& scores,
                            double temperature);
double log_sum_exp(const double* x, std::int64_t n);
double cosine(const std::vector<double>& u, const std::vector<double>& v);
double dot(const double* a, const double* b, std::int64_t n);
double norm2(const double* a, std::int64_t n);

}  // namespace sigma
