#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "flowxpert/error.hpp"
#include "flowxpert/types.hpp"

namespace flowxpert {

inline constexpr int kNoise = -1;

struct DbscanParams {
  double eps = 0.3;
  std::size_t min_pts = 10;
};

// Cluster ids are 0..clusters-1 in discovery order; kNoise marks outliers.
struct PseudoLabels {
  std::vector<int> ids;
  int clusters = 0;

  std::size_t noise_count() const { return static_cast<std::size_t>(std::count(ids.begin(), ids.end(), kNoise)); }
};

namespace detail {

template <typename Point>
double squared_distance(const Point& a, const Point& b) {
  double s = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    const double diff = static_cast<double>(a[d]) - static_cast<double>(b[d]);
    s += diff * diff;
  }
  return s;
}

template <typename Point>
void region_query(std::span<const Point> pts, std::size_t i, double eps2, std::vector<std::size_t>& out) {
  out.clear();
  for (std::size_t j = 0; j < pts.size(); ++j) {
    if (squared_distance(pts[i], pts[j]) <= eps2) out.push_back(j);
  }
}

}  // namespace detail

// Exact O(n^2) DBSCAN. A point is core when at least min_pts points (itself
// included) lie within eps. Border points join the first cluster that reaches
// them in scan order.
template <typename Point>
PseudoLabels dbscan(std::span<const Point> pts, double eps, std::size_t min_pts) {
  if (!(eps > 0.0)) throw UsageError("dbscan eps must be positive");
  if (min_pts < 1) throw UsageError("dbscan min_pts must be at least 1");
  constexpr int unvisited = -2;
  PseudoLabels out;
  out.ids.assign(pts.size(), unvisited);
  const double eps2 = eps * eps;
  std::vector<std::size_t> neighbours;
  std::vector<std::size_t> seeds;

  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (out.ids[i] != unvisited) continue;
    detail::region_query(pts, i, eps2, neighbours);
    if (neighbours.size() < min_pts) {
      out.ids[i] = kNoise;
      continue;
    }
    const int c = out.clusters++;
    out.ids[i] = c;
    seeds.assign(neighbours.begin(), neighbours.end());
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const std::size_t q = seeds[s];
      if (out.ids[q] == kNoise) out.ids[q] = c;
      if (out.ids[q] != unvisited) continue;
      out.ids[q] = c;
      detail::region_query(pts, q, eps2, neighbours);
      if (neighbours.size() >= min_pts) seeds.insert(seeds.end(), neighbours.begin(), neighbours.end());
    }
  }
  return out;
}

template <typename Point>
PseudoLabels dbscan(const std::vector<Point>& pts, const DbscanParams& params) {
  return dbscan(std::span<const Point>(pts), params.eps, params.min_pts);
}

inline PairLabel pair_label(int a, int b) {
  if (a == kNoise || b == kNoise) throw NoisePairRejected("noise samples never form contrastive pairs");
  return a == b ? PairLabel::same : PairLabel::different;
}

// Distance from every point to its k-th nearest other point, sorted
// descending; the elbow of this curve is the usual manual eps pick.
template <typename Point>
std::vector<double> k_distances(std::span<const Point> pts, std::size_t k) {
  std::vector<double> out;
  if (k == 0 || pts.size() <= k) return out;
  std::vector<double> d;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    d.clear();
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (j != i) d.push_back(detail::squared_distance(pts[i], pts[j]));
    }
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k - 1), d.end());
    out.push_back(std::sqrt(d[k - 1]));
  }
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

inline void write_pseudo_labels(std::ostream& out, const PseudoLabels& labels,
                                std::span<const std::size_t> record_index = {}) {
  out << "index,cluster\n";
  for (std::size_t i = 0; i < labels.ids.size(); ++i) {
    out << (record_index.empty() ? i : record_index[i]) << ',' << labels.ids[i] << '\n';
  }
}

}  // namespace flowxpert
