#include "sigma/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace sigma {

void set_threads(int n) { omp_set_num_threads(n < 1 ? 1 : n); }
int max_threads() { return omp_get_max_threads(); }

namespace {

// The per-row workers are shared by the OpenMP and the serial drivers so the
// two paths produce identical bits.

__attribute__((noinline)) void matmul_row(double* c, const double* a,
                                          const double* b, std::int64_t k,
                                          std::int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + n, 0.0);
  for (std::int64_t p = 0; p < k; ++p) {
    const double av = a[p];
    const double* brow = b + p * n;
    for (std::int64_t j = 0; j < n; ++j) c[j] += av * brow[j];
  }
}

__attribute__((noinline)) void matmul_nt_row(double* c, const double* a,
                                             const double* b, std::int64_t k,
                                             std::int64_t n, bool accumulate) {
  for (std::int64_t j = 0; j < n; ++j) {
    double s = accumulate ? c[j] : 0.0;
    const double* brow = b + j * k;
    for (std::int64_t p = 0; p < k; ++p) s += a[p] * brow[p];
    c[j] = s;
  }
}

// Column block of C = A^T * B; row i of C gathers column i of A.
__attribute__((noinline)) void matmul_tn_row(double* c, const double* a,
                                             const double* b, std::int64_t i,
                                             std::int64_t m, std::int64_t k,
                                             std::int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + n, 0.0);
  for (std::int64_t p = 0; p < k; ++p) {
    const double av = a[p * m + i];
    const double* brow = b + p * n;
    for (std::int64_t j = 0; j < n; ++j) c[j] += av * brow[j];
  }
}

__attribute__((noinline)) void softmax_row(double* out, const double* x,
                                           std::int64_t cols, double inv_t) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::int64_t j = 0; j < cols; ++j) mx = std::max(mx, x[j] * inv_t);
  double sum = 0.0;
  for (std::int64_t j = 0; j < cols; ++j) {
    out[j] = std::exp(x[j] * inv_t - mx);
    sum += out[j];
  }
  const double inv = 1.0 / sum;
  for (std::int64_t j = 0; j < cols; ++j) out[j] *= inv;
}

__attribute__((noinline)) double dot_n(const double* a, const double* b,
                                       std::int64_t n) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

__attribute__((noinline)) void nearest_one(std::int32_t* idx, double* dist,
                                           const double* x,
                                           const double* codewords,
                                           std::int64_t k, std::int64_t d) {
  std::int32_t best = 0;
  double bestd = std::numeric_limits<double>::infinity();
  for (std::int64_t c = 0; c < k; ++c) {
    const double* cw = codewords + c * d;
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double diff = x[j] - cw[j];
      s += diff * diff;
    }
    if (s < bestd) {
      bestd = s;
      best = static_cast<std::int32_t>(c);
    }
  }
  *idx = best;
  if (dist) *dist = bestd;
}

}  // namespace

void matmul(double* c, const double* a, const double* b, std::int64_t m,
            std::int64_t k, std::int64_t n, bool accumulate) {
#pragma omp parallel for schedule(static) if (m > 1)
  for (std::int64_t i = 0; i < m; ++i)
    matmul_row(c + i * n, a + i * k, b, k, n, accumulate);
}

void matmul_nt(double* c, const double* a, const double* b, std::int64_t m,
               std::int64_t k, std::int64_t n, bool accumulate) {
#pragma omp parallel for schedule(static) if (m > 1)
  for (std::int64_t i = 0; i < m; ++i)
    matmul_nt_row(c + i * n, a + i * k, b, k, n, accumulate);
}

void matmul_tn(double* c, const double* a, const double* b, std::int64_t m,
               std::int64_t k, std::int64_t n, bool accumulate) {
#pragma omp parallel for schedule(static) if (m > 1)
  for (std::int64_t i = 0; i < m; ++i)
    matmul_tn_row(c + i * n, a, b, i, m, k, n, accumulate);
}

void softmax_rows(double* out, const double* x, std::int64_t rows,
                  std::int64_t cols, double temperature) {
  if (temperature <= 0.0) throw std::invalid_argument("softmax: temperature must be > 0");
  const double inv_t = 1.0 / temperature;
#pragma omp parallel for schedule(static) if (rows > 1)
  for (std::int64_t i = 0; i < rows; ++i)
    softmax_row(out + i * cols, x + i * cols, cols, inv_t);
}

void dot_scan(double* out, const double* q, const double* m, std::int64_t n,
              std::int64_t d) {
#pragma omp parallel for schedule(static) if (n > 256)
  for (std::int64_t i = 0; i < n; ++i) out[i] = dot_n(q, m + i * d, d);
}

void nearest_codeword(std::int32_t* idx, double* dist, const double* x,
                      std::int64_t n, const double* codewords, std::int64_t k,
                      std::int64_t d) {
#pragma omp parallel for schedule(static) if (n > 64)
  for (std::int64_t i = 0; i < n; ++i)
    nearest_one(idx + i, dist ? dist + i : nullptr, x + i * d, codewords, k, d);
}

namespace ref {

void matmul(double* c, const double* a, const double* b, std::int64_t m,
            std::int64_t k, std::int64_t n, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i)
    matmul_row(c + i * n, a + i * k, b, k, n, accumulate);
}

void matmul_nt(double* c, const double* a, const double* b, std::int64_t m,
               std::int64_t k, std::int64_t n, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i)
    matmul_nt_row(c + i * n, a + i * k, b, k, n, accumulate);
}

void matmul_tn(double* c, const double* a, const double* b, std::int64_t m,
               std::int64_t k, std::int64_t n, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i)
    matmul_tn_row(c + i * n, a, b, i, m, k, n, accumulate);
}

void softmax_rows(double* out, const double* x, std::int64_t rows,
                  std::int64_t cols, double temperature) {
  if (temperature <= 0.0) throw std::invalid_argument("softmax: temperature must be > 0");
  const double inv_t = 1.0 / temperature;
  for (std::int64_t i = 0; i < rows; ++i)
    softmax_row(out + i * cols, x + i * cols, cols, inv_t);
}

void dot_scan(double* out, const double* q, const double* m, std::int64_t n,
              std::int64_t d) {
  for (std::int64_t i = 0; i < n; ++i) out[i] = dot_n(q, m + i * d, d);
}

void nearest_codeword(std::int32_t* idx, double* dist, const double* x,
                      std::int64_t n, const double* codewords, std::int64_t k,
                      std::int64_t d) {
  for (std::int64_t i = 0; i < n; ++i)
    nearest_one(idx + i, dist ? dist + i : nullptr, x + i * d, codewords, k, d);
}

}  // namespace ref

std::vector<double> softmax(const std::vector<double>& scores,
                            double temperature) {
  if (temperature <= 0.0) throw std::invalid_argument("softmax: temperature must be > 0");
  for (double s : scores)
    if (!std::isfinite(s)) throw std::invalid_argument("softmax: non-finite score");
  std::vector<double> out(scores.size());
  ref::softmax_rows(out.data(), scores.data(), 1,
                    static_cast<std::int64_t>(scores.size()), temperature);
  return out;
}

double log_sum_exp(const double* x, std::int64_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::int64_t i = 0; i < n; ++i) mx = std::max(mx, x[i]);
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += std::exp(x[i] - mx);
  return mx + std::log(s);
}

double dot(const double* a, const double* b, std::int64_t n) {
  return dot_n(a, b, n);
}

double norm2(const double* a, std::int64_t n) {
  return std::sqrt(dot_n(a, a, n));
}

double cosine(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size())
    throw std::invalid_argument("cosine: dimension mismatch");
  const auto n = static_cast<std::int64_t>(u.size());
  const double nu = norm2(u.data(), n);
  const double nv = norm2(v.data(), n);
  if (nu == 0.0 || nv == 0.0)
    throw std::invalid_argument("cosine: zero vector");
  return dot_n(u.data(), v.data(), n) / (nu * nv);
}

}  // namespace sigma
