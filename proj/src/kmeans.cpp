#include "univa/kmeans.h"

#include <algorithm>
#include <limits>
#include <set>

namespace univa {

int nearest_centroid(std::span<const double> x, std::span<const Vec> centroids) {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (size_t c = 0; c < centroids.size(); ++c) {
    const double d = squared_distance(x, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

size_t count_distinct(std::span<const Vec> points) {
  std::set<Vec> s(points.begin(), points.end());
  return s.size();
}

KMeansResult kmeans(std::span<const Vec> points, int k, uint64_t seed, int max_iter) {
  if (k < 1) throw Error("kmeans: k must be >= 1");
  if (points.empty()) throw Error("kmeans: no points");
  const size_t n = points.size();
  const size_t dim = points.front().size();
  for (const auto& p : points) {
    if (p.size() != dim) throw Error("kmeans: inconsistent dimensions");
  }
  if (count_distinct(points) < static_cast<size_t>(k)) {
    throw Error("kmeans: fewer distinct points than k=" + std::to_string(k));
  }

  Rng rng(seed);
  KMeansResult res;
  res.centroids.reserve(k);

  // k-means++ seeding
  std::uniform_int_distribution<size_t> pick(0, n - 1);
  res.centroids.push_back(points[pick(rng)]);
  std::vector<double> d2(n);
  for (size_t i = 0; i < n; ++i) d2[i] = squared_distance(points[i], res.centroids[0]);
  while (res.centroids.size() < static_cast<size_t>(k)) {
    double total = 0.0;
    for (double v : d2) total += v;
    size_t chosen = 0;
    std::uniform_real_distribution<double> u(0.0, total);
    double r = u(rng);
    for (size_t i = 0; i < n; ++i) {
      if (d2[i] <= 0.0) continue;
      chosen = i;
      r -= d2[i];
      if (r <= 0.0) break;
    }
    res.centroids.push_back(points[chosen]);
    for (size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(points[i], res.centroids.back()));
    }
  }

  res.assignment.assign(n, -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (size_t i = 0; i < n; ++i) {
      const int c = nearest_centroid(points[i], res.centroids);
      if (c != res.assignment[i]) {
        res.assignment[i] = c;
        changed = true;
      }
    }
    res.iterations = it + 1;
    if (!changed && it > 0) break;

    std::vector<Vec> sums(k, Vec(dim, 0.0));
    std::vector<size_t> counts(k, 0);
    for (size_t i = 0; i < n; ++i) {
      const int c = res.assignment[i];
      ++counts[c];
      for (size_t j = 0; j < dim; ++j) sums[c][j] += points[i][j];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        size_t far = 0;
        double far_d = -1.0;
        for (size_t i = 0; i < n; ++i) {
          const double d = squared_distance(points[i], res.centroids[res.assignment[i]]);
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        res.centroids[c] = points[far];
        res.assignment[far] = c;
        changed = true;
        continue;
      }
      for (size_t j = 0; j < dim; ++j) res.centroids[c][j] = sums[c][j] / static_cast<double>(counts[c]);
    }
  }

  for (size_t i = 0; i < n; ++i) res.assignment[i] = nearest_centroid(points[i], res.centroids);
  res.inertia = 0.0;
  for (size_t i = 0; i < n; ++i) res.inertia += squared_distance(points[i], res.centroids[res.assignment[i]]);
  return res;
}

}  // namespace univa
