#include "sigma/cluster.hpp"

#include <algorithm>
#include <numeric>

#include "sigma/kernels.hpp"

namespace sigma {

Mat kmeans(const Mat& data, std::int64_t k, std::int64_t iters, Rng& rng) {
  const std::int64_t n = data.rows, d = data.cols;
  Mat centroids(k, d);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j) centroids.at(0, j) += data.at(i, j);
  for (std::int64_t j = 0; j < d; ++j)
    centroids.at(0, j) /= static_cast<double>(n);

  // distances to the nearest centroid chosen so far
  std::vector<double> best_d2(n);
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double diff = data.at(i, j) - centroids.at(0, j);
      s += diff * diff;
    }
    best_d2[i] = s;
  }
  for (std::int64_t c = 1; c < k; ++c) {
    const double total = std::accumulate(best_d2.begin(), best_d2.end(), 0.0);
    std::int64_t pick = 0;
    if (total > 0.0) {
      const double x = rng.next_double() * total;
      double acc = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        acc += best_d2[i];
        if (x < acc) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<std::int64_t>(rng.uniform_int(n));
    }
    std::copy_n(data.row(pick), d, centroids.row(c));
    for (std::int64_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        const double diff = data.at(i, j) - centroids.at(c, j);
        s += diff * diff;
      }
      best_d2[i] = std::min(best_d2[i], s);
    }
  }

  std::vector<std::int32_t> assign(n);
  std::vector<double> dist(n);
  for (std::int64_t it = 0; it < iters; ++it) {
    nearest_codeword(assign.data(), dist.data(), data.d.data(), n,
                     centroids.d.data(), k, d);
    Mat sums(k, d);
    std::vector<std::int64_t> counts(k, 0);
    for (std::int64_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      const double* row = data.row(i);
      double* srow = sums.row(assign[i]);
      for (std::int64_t j = 0; j < d; ++j) srow[j] += row[j];
    }
    for (std::int64_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        for (std::int64_t j = 0; j < d; ++j)
          centroids.at(c, j) = sums.at(c, j) / static_cast<double>(counts[c]);
      } else {
        std::int64_t far = 0;
        for (std::int64_t i = 1; i < n; ++i)
          if (dist[i] > dist[far]) far = i;
        std::copy_n(data.row(far), d, centroids.row(c));
        dist[far] = 0.0;
      }
    }
  }
  return centroids;
}

}  // namespace sigma
