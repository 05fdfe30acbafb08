#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "univa/common.h"

namespace univa {

struct KMeansResult {
  std::vector<Vec> centroids;
  std::vector<int> assignment;
  double inertia = 0.0;
  int iterations = 0;
};

/// Lloyd's k-means with k-means++ seeding. Requires at least `k` distinct points;
/// empty clusters are re-seeded from the point farthest from its centroid.
KMeansResult kmeans(std::span<const Vec> points, int k, uint64_t seed, int max_iter = 50);

/// Index of the closest centroid; ties resolve to the lowest index.
int nearest_centroid(std::span<const double> x, std::span<const Vec> centroids);

size_t count_distinct(std::span<const Vec> points);

}  // namespace univa
