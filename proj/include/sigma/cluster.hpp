#pragma once

#include "sigma/rng.hpp"
#include "sigma/tensor.hpp"

namespace sigma {

// Lloyd k-means with the first centroid pinned to the data mean, k-means++
// seeding for the rest and farthest-point reseeding of empty clusters.
Mat kmeans(const Mat& data, std::int64_t k, std::int64_t iters, Rng& rng);

}  // namespace sigma
