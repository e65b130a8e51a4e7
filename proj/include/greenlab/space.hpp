#pragma once

#include "greenlab/core.hpp"

#include <array>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace greenlab {

/// Analytic volume growth V(s) = coefficient * s^exponent used beyond the
/// sampled radius.
struct TailModel {
  double coefficient = 1.0;
  double exponent = 3.0;

  double operator()(double s) const { return coefficient * std::pow(s, exponent); }
  /// Integral of V over [a, b].
  double integral(double a, double b) const {
    double p1 = exponent + 1.0;
    return coefficient * (std::pow(b, p1) - std::pow(a, p1)) / p1;
  }
};

struct GridInfo {
  int dim = 0;
  int side = 0;
  double spacing = 0.0;
  double density = 1.0;
  double lower = 0.0;  // coordinate of index 0 along every axis

  double half_width() const { return 0.5 * (side - 1) * spacing; }
  double cell_mass() const { return density * std::pow(spacing, dim); }
};

struct Edge {
  std::size_t a = 0;
  std::size_t b = 0;
  double length = 1.0;
  double weight = 1.0;  // conductance multiplier for the Laplacian
};

struct Neighbor {
  std::size_t id;
  double length;
  double weight;
};

enum class GraphMetric { ShortestPath, HopCount };

/// Measure law for grid spaces. A spatially varying profile disables the
/// default tail model unless one is given explicitly.
struct MeasureLaw {
  double density = 1.0;
  std::function<double(const Coord&)> profile;
  std::optional<TailModel> tail;
};

struct SpaceLimits {
  std::size_t max_points = 5'000'000;
  std::size_t dense_distance_limit = 2500;
};

class MmSpace {
 public:
  std::size_t size() const { return weights_.size(); }
  int ambient_dim() const { return dim_; }
  bool has_coords() const { return dim_ > 0; }
  bool is_grid() const { return grid_.has_value(); }
  const GridInfo& grid() const {
    require(grid_.has_value(), ErrorKind::Precondition, "space is not a grid");
    return *grid_;
  }
  const std::optional<TailModel>& tail() const { return tail_; }
  double weight(std::size_t i) const { return weights_[i]; }
  const std::vector<double>& weights() const { return weights_; }
  bool interior(std::size_t i) const { return interior_[i] != 0; }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<std::vector<Neighbor>>& adjacency() const { return adjacency_; }
  std::vector<std::string> labels;

  Coord coord(std::size_t i) const {
    Coord c(dim_);
    for (int d = 0; d < dim_; ++d) c[d] = coords_[i * dim_ + d];
    return c;
  }
  const double* coord_data(std::size_t i) const { return coords_.data() + i * dim_; }

  // ---- grid indexing ----
  void multi_index(std::size_t i, int* k) const {
    const auto& g = grid();
    for (int d = 0; d < g.dim; ++d) {
      k[d] = static_cast<int>(i % g.side);
      i /= g.side;
    }
  }
  std::size_t flat_index(const int* k) const {
    const auto& g = grid();
    std::size_t i = 0;
    for (int d = g.dim - 1; d >= 0; --d) i = i * g.side + static_cast<std::size_t>(k[d]);
    return i;
  }
  bool in_grid(const int* k) const {
    const auto& g = grid();
    for (int d = 0; d < g.dim; ++d)
      if (k[d] < 0 || k[d] >= g.side) return false;
    return true;
  }
  /// Nearest grid node to an ambient point, clamped to the box.
  std::size_t nearest_node(const Coord& x) const {
    const auto& g = grid();
    std::array<int, 12> k{};
    for (int d = 0; d < g.dim; ++d) {
      int v = static_cast<int>(std::lround((x[d] - g.lower) / g.spacing));
      k[d] = std::clamp(v, 0, g.side - 1);
    }
    return flat_index(k.data());
  }

  double dist(std::size_t i, std::size_t j) const {
    if (i == j) return 0.0;
    if (grid_) {
      // integer offsets keep lattice distances exact and symmetric
      const auto& g = *grid_;
      long q = 0;
      for (int d = 0; d < g.dim; ++d) {
        long a = static_cast<long>(i % g.side), b = static_cast<long>(j % g.side);
        q += (a - b) * (a - b);
        i /= g.side;
        j /= g.side;
      }
      return std::sqrt(static_cast<double>(q)) * g.spacing;
    }
    if (metric_from_coords_) {
      double s = 0.0;
      const double* a = coord_data(i);
      const double* b = coord_data(j);
      for (int d = 0; d < dim_; ++d) s += (a[d] - b[d]) * (a[d] - b[d]);
      return std::sqrt(s);
    }
    if (!dense_.empty()) return dense_[i * size() + j];
    return dijkstra(i)[j];
  }

  /// Distances from x to every point.
  std::vector<double> distances_from(std::size_t x) const {
    std::size_t n = size();
    if (metric_from_coords_) {
      std::vector<double> out(n);
      for (std::size_t j = 0; j < n; ++j) out[j] = dist(x, j);
      return out;
    }
    if (!dense_.empty()) return {dense_.begin() + x * n, dense_.begin() + (x + 1) * n};
    return dijkstra(x);
  }

  /// Points with dist(x, .) < rmax as (distance, id) pairs sorted by distance
  /// then id.
  std::vector<std::pair<double, std::size_t>> sorted_ball(std::size_t x, double rmax) const {
    std::vector<std::pair<double, std::size_t>> out;
    if (is_grid() && metric_from_coords_) {
      const auto& g = *grid_;
      std::array<int, 12> k{}, lo{}, hi{}, cur{};
      multi_index(x, k.data());
      int reach = std::isfinite(rmax) ? static_cast<int>(std::ceil(rmax / g.spacing)) : g.side;
      for (int d = 0; d < g.dim; ++d) {
        lo[d] = std::max(0, k[d] - reach);
        hi[d] = std::min(g.side - 1, k[d] + reach);
        cur[d] = lo[d];
      }
      for (;;) {
        std::size_t j = flat_index(cur.data());
        double dj = dist(x, j);
        if (dj < rmax) out.emplace_back(dj, j);
        int d = 0;
        while (d < g.dim) {
          if (++cur[d] <= hi[d]) break;
          cur[d] = lo[d];
          ++d;
        }
        if (d == g.dim) break;
      }
    } else {
      auto row = distances_from(x);
      for (std::size_t j = 0; j < row.size(); ++j)
        if (row[j] < rmax) out.emplace_back(row[j], j);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  /// Distance from i to the boundary layer (grid: outer shell; graph: nearest
  /// non-interior node, +inf if there is none).
  double boundary_distance(std::size_t i) const { return boundary_dist_[i]; }
  /// Half-width of the sampled box (grid) or the largest boundary distance.
  double half_width() const { return half_width_; }
  bool in_core(std::size_t i, double fraction) const {
    if (!std::isfinite(boundary_dist_[i])) return true;
    return boundary_dist_[i] > fraction * half_width_;
  }
  std::vector<std::size_t> core_points(double fraction) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (interior(i) && in_core(i, fraction)) out.push_back(i);
    return out;
  }
  /// Radius up to which balls around x are fully sampled.
  double sampled_radius(std::size_t x) const { return boundary_dist_[x]; }

  MmSpace with_scaled_weights(double a) const {
    require(a > 0, ErrorKind::InvalidArgument, "weight scale must be positive");
    MmSpace s = *this;
    for (auto& w : s.weights_) w *= a;
    if (s.grid_) s.grid_->density *= a;
    if (s.tail_) s.tail_->coefficient *= a;
    return s;
  }

  MmSpace with_scaled_distances(double a) const {
    require(a > 0, ErrorKind::InvalidArgument, "distance scale must be positive");
    MmSpace s = *this;
    for (auto& c : s.coords_) c *= a;
    if (s.grid_) {
      s.grid_->spacing *= a;
      s.grid_->lower *= a;
      s.grid_->density /= std::pow(a, s.grid_->dim);
    }
    for (auto& e : s.edges_) e.length *= a;
    for (auto& row : s.adjacency_)
      for (auto& nb : row) nb.length *= a;
    for (auto& d : s.dense_) d *= a;
    for (auto& d : s.boundary_dist_) d *= a;
    s.half_width_ *= a;
    if (s.tail_) s.tail_->coefficient /= std::pow(a, s.tail_->exponent);
    return s;
  }

  friend MmSpace build_grid_space(int, int, double, const MeasureLaw&, const SpaceLimits&);
  friend MmSpace build_graph_space(std::size_t, const std::vector<Edge>&, const std::vector<double>&,
                                   GraphMetric, const std::vector<char>&, const SpaceLimits&);
  friend MmSpace join_graph_spaces(const std::vector<const MmSpace*>&, const std::vector<Edge>&);

 private:
  std::vector<double> dijkstra(std::size_t src) const {
    std::vector<double> d(size(), kInf);
    using Item = std::pair<double, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    d[src] = 0.0;
    pq.emplace(0.0, src);
    while (!pq.empty()) {
      auto [du, u] = pq.top();
      pq.pop();
      if (du > d[u]) continue;
      for (const auto& nb : adjacency_[u]) {
        double nd = du + nb.length;
        if (nd < d[nb.id]) {
          d[nb.id] = nd;
          pq.emplace(nd, nb.id);
        }
      }
    }
    return d;
  }

  void finish_graph(const SpaceLimits& limits) {
    std::size_t n = size();
    auto d0 = dijkstra(0);
    for (double v : d0)
      require(std::isfinite(v), ErrorKind::Disconnected, "graph is disconnected");
    if (n <= limits.dense_distance_limit) {
      dense_.assign(n * n, 0.0);
      std::vector<std::vector<double>> rows(n);
      parallel_for(n, [&](std::size_t i) { rows[i] = dijkstra(i); });
      for (std::size_t i = 0; i < n; ++i)
        std::copy(rows[i].begin(), rows[i].end(), dense_.begin() + i * n);
    }
    // multi-source distance to the non-interior set
    boundary_dist_.assign(n, kInf);
    using Item = std::pair<double, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    for (std::size_t i = 0; i < n; ++i)
      if (!interior_[i]) {
        boundary_dist_[i] = 0.0;
        pq.emplace(0.0, i);
      }
    while (!pq.empty()) {
      auto [du, u] = pq.top();
      pq.pop();
      if (du > boundary_dist_[u]) continue;
      for (const auto& nb : adjacency_[u])
        if (du + nb.length < boundary_dist_[nb.id]) {
          boundary_dist_[nb.id] = du + nb.length;
          pq.emplace(boundary_dist_[nb.id], nb.id);
        }
    }
    half_width_ = 0.0;
    for (double v : boundary_dist_)
      if (std::isfinite(v)) half_width_ = std::max(half_width_, v);
  }

  int dim_ = 0;
  std::vector<double> coords_;
  std::vector<double> weights_;
  std::vector<char> interior_;
  std::vector<Edge> edges_;
  std::vector<std::vector<Neighbor>> adjacency_;
  std::optional<TailModel> tail_;
  std::optional<GridInfo> grid_;
  bool metric_from_coords_ = false;
  std::vector<double> dense_;
  std::vector<double> boundary_dist_;
  double half_width_ = 0.0;
};

/// Regular grid of side^n nodes centred at the origin.
inline MmSpace build_grid_space(int n, int side, double h, const MeasureLaw& law = {},
                                const SpaceLimits& limits = {}) {
  require(n >= 1 && n <= 6, ErrorKind::InvalidArgument, "grid dimension must lie in 1..6");
  require(side >= 5, ErrorKind::InvalidArgument, "grid side count must be at least 5");
  require(h > 0 && std::isfinite(h), ErrorKind::InvalidArgument, "grid spacing must be positive");
  require(law.density > 0, ErrorKind::InvalidArgument, "density must be positive");
  double total = std::pow(static_cast<double>(side), n);
  require(total <= static_cast<double>(limits.max_points), ErrorKind::InvalidArgument,
          "grid point count exceeds the memory budget");

  MmSpace s;
  std::size_t N = static_cast<std::size_t>(total);
  GridInfo g{n, side, h, law.density, -0.5 * (side - 1) * h};
  s.grid_ = g;
  s.dim_ = n;
  s.metric_from_coords_ = true;
  s.coords_.resize(N * n);
  s.weights_.resize(N);
  s.interior_.resize(N);
  s.boundary_dist_.resize(N);
  s.half_width_ = g.half_width();
  double cell = std::pow(h, n);
  std::array<int, 12> k{};
  for (std::size_t i = 0; i < N; ++i) {
    std::size_t r = i;
    int edge = side;
    for (int d = 0; d < n; ++d) {
      k[d] = static_cast<int>(r % side);
      r /= side;
      s.coords_[i * n + d] = g.lower + k[d] * h;
      edge = std::min({edge, k[d], side - 1 - k[d]});
    }
    s.interior_[i] = edge > 0;
    s.boundary_dist_[i] = edge * h;
    double rho = law.density;
    if (law.profile) {
      rho = law.profile(s.coord(i));
      require(rho > 0, ErrorKind::InvalidArgument, "density profile must be positive");
    }
    s.weights_[i] = rho * cell;
  }
  if (law.tail)
    s.tail_ = law.tail;
  else if (!law.profile)
    s.tail_ = TailModel{law.density * unit_ball_volume(n), static_cast<double>(n)};
  return s;
}

/// Weighted graph with the shortest-path (or hop-count) metric. `interior`
/// may be empty, meaning every node is interior.
inline MmSpace build_graph_space(std::size_t n_nodes, const std::vector<Edge>& edges,
                                 const std::vector<double>& weights,
                                 GraphMetric metric = GraphMetric::ShortestPath,
                                 const std::vector<char>& interior = {},
                                 const SpaceLimits& limits = {}) {
  require(n_nodes > 0, ErrorKind::InvalidArgument, "graph must have nodes");
  require(weights.size() == n_nodes, ErrorKind::InvalidArgument, "one weight per node required");
  require(n_nodes <= limits.max_points, ErrorKind::InvalidArgument, "graph exceeds the memory budget");
  for (double w : weights) require(w > 0, ErrorKind::InvalidArgument, "node weights must be positive");
  MmSpace s;
  s.weights_ = weights;
  s.interior_ = interior.empty() ? std::vector<char>(n_nodes, 1) : interior;
  require(s.interior_.size() == n_nodes, ErrorKind::InvalidArgument, "interior mask size mismatch");
  s.adjacency_.assign(n_nodes, {});
  for (auto e : edges) {
    require(e.a < n_nodes && e.b < n_nodes && e.a != e.b, ErrorKind::InvalidArgument, "bad edge endpoint");
    require(e.length > 0, ErrorKind::InvalidArgument, "edge lengths must be positive");
    require(e.weight > 0, ErrorKind::InvalidArgument, "edge weights must be positive");
    if (metric == GraphMetric::HopCount) e.length = 1.0;
    s.edges_.push_back(e);
    s.adjacency_[e.a].push_back({e.b, e.length, e.weight});
    s.adjacency_[e.b].push_back({e.a, e.length, e.weight});
  }
  s.finish_graph(limits);
  return s;
}

/// Disjoint union of graph spaces (grids are converted to their lattice
/// graphs) joined by the given bridge edges (indices into the concatenation).
inline MmSpace join_graph_spaces(const std::vector<const MmSpace*>& parts, const std::vector<Edge>& bridges) {
  std::vector<Edge> edges;
  std::vector<double> weights;
  std::vector<char> interior;
  std::size_t offset = 0;
  for (const MmSpace* p : parts) {
    if (p->is_grid()) {
      const auto& g = p->grid();
      std::array<int, 12> k{};
      for (std::size_t i = 0; i < p->size(); ++i) {
        p->multi_index(i, k.data());
        for (int d = 0; d < g.dim; ++d) {
          if (k[d] + 1 >= g.side) continue;
          ++k[d];
          std::size_t j = p->flat_index(k.data());
          --k[d];
          edges.push_back({offset + i, offset + j, g.spacing, 1.0});
        }
      }
    } else {
      for (auto e : p->edges()) edges.push_back({offset + e.a, offset + e.b, e.length, e.weight});
    }
    for (std::size_t i = 0; i < p->size(); ++i) {
      weights.push_back(p->weight(i));
      interior.push_back(p->interior(i) ? 1 : 0);
    }
    offset += p->size();
  }
  for (const auto& e : bridges) edges.push_back(e);
  return build_graph_space(offset, edges, weights, GraphMetric::ShortestPath, interior);
}

// ---------------------------------------------------------------------------
// balls and volumes

inline std::vector<std::size_t> ball(const MmSpace& s, std::size_t x, double r) {
  require(r >= 0, ErrorKind::InvalidArgument, "radius must be nonnegative");
  std::vector<std::size_t> out;
  if (r == 0) return out;
  for (const auto& [d, j] : s.sorted_ball(x, r)) out.push_back(j);
  std::sort(out.begin(), out.end());
  return out;
}

inline double volume(const MmSpace& s, std::size_t x, double r) {
  require(r >= 0, ErrorKind::InvalidArgument, "radius must be nonnegative");
  if (r == 0) return 0.0;
  if (s.tail() && r > s.sampled_radius(x)) return (*s.tail())(r);
  CompensatedSum acc;
  for (const auto& [d, j] : s.sorted_ball(x, r)) acc.add(s.weight(j));
  return acc.value();
}

struct VolumeProfile {
  std::size_t center = 0;
  std::vector<double> radii;
  std::vector<double> volumes;
};

/// Empirical step profile of m(B(x, s)): breakpoints d_k (distinct distances)
/// and cumulative masses W_k of the closed ball {d <= d_k}; V(s) = W_k for
/// s in (d_k, d_{k+1}].
struct StepProfile {
  std::vector<double> breaks;
  std::vector<double> cumulative;

  double at(double s) const {
    if (s <= 0 || breaks.empty()) return 0.0;
    auto it = std::lower_bound(breaks.begin(), breaks.end(), s);
    std::size_t k = static_cast<std::size_t>(it - breaks.begin());
    return k == 0 ? 0.0 : cumulative[k - 1];
  }
};

inline StepProfile step_profile(const MmSpace& s, std::size_t x, double rmax) {
  StepProfile p;
  CompensatedSum acc;
  for (const auto& [d, j] : s.sorted_ball(x, rmax)) {
    acc.add(s.weight(j));
    if (!p.breaks.empty() && p.breaks.back() == d)
      p.cumulative.back() = acc.value();
    else {
      p.breaks.push_back(d);
      p.cumulative.push_back(acc.value());
    }
  }
  return p;
}

inline VolumeProfile volume_profile(const MmSpace& s, std::size_t x, const std::vector<double>& radii) {
  VolumeProfile vp{x, radii, {}};
  double rmax = radii.empty() ? 0.0 : *std::max_element(radii.begin(), radii.end());
  double sampled = s.sampled_radius(x);
  auto prof = step_profile(s, x, std::nextafter(std::min(rmax, s.tail() ? sampled : kInf), kInf));
  for (double r : radii) {
    require(r >= 0, ErrorKind::InvalidArgument, "radius must be nonnegative");
    if (s.tail() && r > sampled)
      vp.volumes.push_back((*s.tail())(r));
    else
      vp.volumes.push_back(prof.at(r));
  }
  return vp;
}

// ---------------------------------------------------------------------------
// doubling

struct DoublingReport {
  double max_ratio = 0.0;
  double min_ratio = kInf;
  std::vector<double> ratios;  // per (point, radius), row-major
  double bishop_gromov_worst_increase = 0.0;  // relative rise of V(r)/r^N
  std::size_t bishop_gromov_violations = 0;
  std::optional<double> reverse_margin;  // min over R > r of lhs/rhs; >= 1 means the bound holds
};

/// Doubling ratios m(B(x,2r))/m(B(x,r)); Bishop-Gromov monotonicity of
/// V(r)/r^N with relative tolerance `bg_tol`; for product spaces with an
/// Euclidean factor R^k (euclidean_k > 0), the reverse bound
/// V(R)/V(r) >= (R/r)^k / (C sqrt(2)^k) with C the fitted doubling constant.
inline DoublingReport doubling_profile(const MmSpace& s, const std::vector<double>& radii,
                                       const std::vector<std::size_t>& points, double N,
                                       int euclidean_k = 0, double bg_tol = 0.05) {
  DoublingReport rep;
  for (double r : radii)
    for (std::size_t x : points)
      require(s.tail() || 2 * r <= s.sampled_radius(x), ErrorKind::Precondition,
              "radius beyond sampled range with no tail model");
  std::vector<std::vector<double>> vols(points.size());
  std::vector<double> all;
  for (double r : radii) {
    all.push_back(r);
    all.push_back(2 * r);
  }
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  parallel_for(points.size(), [&](std::size_t i) { vols[i] = volume_profile(s, points[i], all).volumes; });
  auto idx = [&](double r) { return static_cast<std::size_t>(std::lower_bound(all.begin(), all.end(), r) - all.begin()); };
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (double r : radii) {
      double q = vols[i][idx(2 * r)] / vols[i][idx(r)];
      rep.ratios.push_back(q);
      rep.max_ratio = std::max(rep.max_ratio, q);
      rep.min_ratio = std::min(rep.min_ratio, q);
    }
    for (std::size_t a = 0; a + 1 < all.size(); ++a) {
      double va = vols[i][a] / std::pow(all[a], N);
      double vb = vols[i][a + 1] / std::pow(all[a + 1], N);
      double rise = vb / va - 1.0;
      rep.bishop_gromov_worst_increase = std::max(rep.bishop_gromov_worst_increase, rise);
      if (rise > bg_tol) ++rep.bishop_gromov_violations;
    }
  }
  if (euclidean_k > 0) {
    double C = rep.max_ratio;
    double margin = kInf;
    for (std::size_t i = 0; i < points.size(); ++i)
      for (std::size_t a = 0; a < all.size(); ++a)
        for (std::size_t b = a + 1; b < all.size(); ++b) {
          double lhs = vols[i][b] / vols[i][a];
          double rhs = std::pow(all[b] / all[a], euclidean_k) / (C * std::pow(std::sqrt(2.0), euclidean_k));
          margin = std::min(margin, lhs / rhs);
        }
    rep.reverse_margin = margin;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// distortion coefficients

struct Distortion {
  double sigma;
  double tau;
};

/// sigma^{(t)}_{K,N}(theta); +inf on the branch K theta^2 >= N pi^2.
inline double distortion_sigma(double K, double N, double t, double theta) {
  double kt = K * theta * theta;
  if (kt >= N * kPi * kPi) return kInf;
  if (kt == 0.0) return t;
  double a = theta * std::sqrt(std::abs(K) / N);
  if (kt > 0) return std::sin(t * a) / std::sin(a);
  return std::sinh(t * a) / std::sinh(a);
}

inline Distortion distortion_coefficients(double K, double N, double t, double theta) {
  require(t >= 0 && t <= 1, ErrorKind::InvalidArgument, "t must lie in [0,1]");
  require(theta >= 0, ErrorKind::InvalidArgument, "theta must be nonnegative");
  require(N > 1, ErrorKind::InvalidArgument, "N must exceed 1");
  double sigma = distortion_sigma(K, N, t, theta);
  double s1 = distortion_sigma(K, N - 1, t, theta);
  double tau = std::isinf(s1) ? kInf : std::pow(t, 1.0 / N) * std::pow(s1, 1.0 - 1.0 / N);
  return {sigma, tau};
}

// ---------------------------------------------------------------------------
// F and H tail integrals

struct TailProfiles {
  std::vector<double> radii;
  std::vector<double> F;
  std::vector<double> H;
  double stitch_radius = 0.0;
  double stitch_mismatch = 0.0;
};

struct TailOptions {
  double stitch_fraction = 0.8;
  double mismatch_tolerance = 0.05;
};

/// Exact integration of s/V(s) and 1/V(s) against the stitched volume
/// profile: empirical steps up to the stitching radius, analytic tail beyond.
class TailIntegrator {
 public:
  TailIntegrator(const MmSpace& s, std::size_t x, const TailOptions& opt = {}) {
    require(s.tail().has_value(), ErrorKind::Precondition, "F and H need a tail model");
    tail_ = *s.tail();
    if (tail_.exponent <= 2.0)
      throw Error(ErrorKind::NonParabolic, "non-parabolic assumption violated");
    rs_ = opt.stitch_fraction * s.sampled_radius(x);
    require(rs_ > 0, ErrorKind::Precondition, "centre must be interior");
    prof_ = step_profile(s, x, rs_);
    // shell-averaged mismatch over [rs/2, rs]
    double a = 0.5 * rs_, b = rs_;
    double emp = 0.0;
    std::vector<double> cuts{a};
    for (double d : prof_.breaks)
      if (d > a && d < b) cuts.push_back(d);
    cuts.push_back(b);
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) emp += prof_.at(cuts[i + 1]) * (cuts[i + 1] - cuts[i]);
    mismatch_ = std::abs(emp / tail_.integral(a, b) - 1.0);
    if (mismatch_ > opt.mismatch_tolerance)
      throw Error(ErrorKind::Numerical, "tail model does not match the empirical volume at the stitching radius");
    // precompute suffix integrals from each break to rs
    std::size_t m = prof_.breaks.size();
    sufF_.assign(m + 1, 0.0);
    sufH_.assign(m + 1, 0.0);
    for (std::size_t k = m; k-- > 0;) {
      double lo = prof_.breaks[k];
      double hi = k + 1 < m ? prof_.breaks[k + 1] : rs_;
      double W = prof_.cumulative[k];
      sufF_[k] = sufF_[k + 1] + 0.5 * (hi * hi - lo * lo) / W;
      sufH_[k] = sufH_[k + 1] + (hi - lo) / W;
    }
  }

  double F(double r) const { return eval(r, true); }
  double H(double r) const { return eval(r, false); }
  double stitch_radius() const { return rs_; }
  double mismatch() const { return mismatch_; }
  /// Stitched volume profile.
  double V(double s) const { return s <= rs_ ? prof_.at(s) : tail_(s); }

 private:
  double tailF(double r) const {
    return std::pow(r, 2.0 - tail_.exponent) / (tail_.coefficient * (tail_.exponent - 2.0));
  }
  double tailH(double r) const {
    return std::pow(r, 1.0 - tail_.exponent) / (tail_.coefficient * (tail_.exponent - 1.0));
  }
  double eval(double r, bool isF) const {
    require(r >= 0, ErrorKind::InvalidArgument, "radius must be nonnegative");
    if (r >= rs_) return isF ? tailF(r) : tailH(r);
    // V = W_k on (d_k, d_{k+1}] with d_k the last break <= r
    auto it = std::upper_bound(prof_.breaks.begin(), prof_.breaks.end(), r);
    std::size_t j = static_cast<std::size_t>(it - prof_.breaks.begin());  // first break > r
    require(j > 0, ErrorKind::Precondition, "radius below the first sample");
    std::size_t k = j - 1;
    double hi = j < prof_.breaks.size() ? prof_.breaks[j] : rs_;
    double W = prof_.cumulative[k];
    double part = isF ? 0.5 * (hi * hi - r * r) / W : (hi - r) / W;
    double rest = j < prof_.breaks.size() ? (isF ? sufF_[j] : sufH_[j]) : 0.0;
    return part + rest + (isF ? tailF(rs_) : tailH(rs_));
  }

  TailModel tail_;
  double rs_ = 0.0;
  double mismatch_ = 0.0;
  StepProfile prof_;
  std::vector<double> sufF_, sufH_;
};

inline TailProfiles f_h_profiles(const MmSpace& s, std::size_t x, const std::vector<double>& radii,
                                 const TailOptions& opt = {}) {
  require(s.interior(x), ErrorKind::Precondition, "centre must be interior");
  TailIntegrator ti(s, x, opt);
  TailProfiles out;
  out.radii = radii;
  out.stitch_radius = ti.stitch_radius();
  out.stitch_mismatch = ti.mismatch();
  for (double r : radii) {
    out.F.push_back(ti.F(r));
    out.H.push_back(ti.H(r));
  }
  return out;
}

struct IdentityResiduals {
  double lhs_F = 0, rhs_F = 0, residual_F = 0;
  double lhs_H = 0, rhs_H = 0, residual_H = 0;
};

/// Integral identities over B(x,R):
///   sum_{y in B} F(x, d(x,y)) m_y = R^2/2 + F(x,R) m(B(x,R)),
///   sum_{y in B} H(x, d(x,y)) m_y = R     + H(x,R) m(B(x,R)).
inline IdentityResiduals verify_integral_identities(const MmSpace& s, std::size_t x, double R,
                                                    const TailOptions& opt = {}) {
  require(s.interior(x), ErrorKind::Precondition, "centre must be interior");
  require(R >= 0, ErrorKind::InvalidArgument, "radius must be nonnegative");
  TailIntegrator ti(s, x, opt);
  IdentityResiduals res;
  if (R == 0) return res;
  require(R <= ti.stitch_radius(), ErrorKind::Precondition, "identity radius exceeds the stitching radius");
  CompensatedSum lf, lh, vol;
  for (const auto& [d, j] : s.sorted_ball(x, R)) {
    lf.add(ti.F(d) * s.weight(j));
    lh.add(ti.H(d) * s.weight(j));
    vol.add(s.weight(j));
  }
  res.lhs_F = lf.value();
  res.lhs_H = lh.value();
  res.rhs_F = 0.5 * R * R + ti.F(R) * vol.value();
  res.rhs_H = R + ti.H(R) * vol.value();
  res.residual_F = std::abs(res.lhs_F - res.rhs_F) / res.rhs_F;
  res.residual_H = std::abs(res.lhs_H - res.rhs_H) / res.rhs_H;
  return res;
}

}  // namespace greenlab
