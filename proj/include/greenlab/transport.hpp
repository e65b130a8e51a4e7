#pragma once

#include "greenlab/space.hpp"

#include <numeric>
#include <queue>

namespace greenlab {

/// Atoms as columns of `points` with nonnegative masses.
struct PointMeasure {
  Eigen::MatrixXd points;
  std::vector<double> mass;

  std::size_t size() const { return mass.size(); }
  int dim() const { return static_cast<int>(points.rows()); }
  double total() const { return std::accumulate(mass.begin(), mass.end(), 0.0); }
};

/// Support of a node function as a point measure; `nodes` receives the ids.
inline PointMeasure measure_on(const MmSpace& s, const Vec& mu, std::vector<std::size_t>* nodes = nullptr) {
  require(s.has_coords(), ErrorKind::Precondition, "transport needs coordinates");
  require(static_cast<std::size_t>(mu.size()) == s.size(), ErrorKind::InvalidArgument, "measure size does not match the space");
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < s.size(); ++i) {
    require(mu[i] >= 0, ErrorKind::InvalidArgument, "measures must be nonnegative");
    if (mu[i] > 0) ids.push_back(i);
  }
  PointMeasure m;
  m.points.resize(s.ambient_dim(), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t k = 0; k < ids.size(); ++k) {
    m.points.col(k) = s.coord(ids[k]);
    m.mass.push_back(mu[ids[k]]);
  }
  if (nodes) *nodes = std::move(ids);
  return m;
}

struct PlanEntry {
  std::size_t i, j;
  double mass;
};

struct TransportPlan {
  PointMeasure source, target;
  std::vector<PlanEntry> support;
  Vec u, v;                        // dual potentials, u_i + v_j <= c_ij
  double cost = 0.0;               // sum pi c = W2^2
  double dual_value = 0.0;
  double duality_gap = 0.0;
  double marginal_error = 0.0;     // max row/column sum deviation
  std::size_t augmentations = 0;

  double w2() const { return std::sqrt(std::max(cost, 0.0)); }
  Coord from(const PlanEntry& e) const { return source.points.col(e.i); }
  Coord to(const PlanEntry& e) const { return target.points.col(e.j); }
};

namespace detail {

// Successive shortest paths on the complete bipartite network with reduced
// costs kept nonnegative by node potentials (dense Dijkstra, real masses).
inline void shortest_path_transport(const Eigen::MatrixXd& C, const std::vector<double>& a, const std::vector<double>& b, Eigen::MatrixXd& F,
                                    Vec& u, Vec& v, std::size_t& augmentations) {
  const auto m = static_cast<std::size_t>(C.rows()), n = static_cast<std::size_t>(C.cols());
  double total = std::accumulate(a.begin(), a.end(), 0.0);
  double eps = 1e-15 * total;
  F = Eigen::MatrixXd::Zero(C.rows(), C.cols());
  const Eigen::MatrixXd Ct = C.transpose();
  std::vector<double> ra = a, rb = b;
  std::vector<double> ps(m, 0.0), pt(n);
  for (std::size_t j = 0; j < n; ++j) pt[j] = C.col(j).minCoeff();
  std::vector<double> ds(m), dt(n);
  std::vector<char> done_s(m), done_t(n);
  std::vector<long> pred_t(n), pred_s(m);
  augmentations = 0;
  auto left = [&](const std::vector<double>& r) {
    for (double x : r)
      if (x > eps) return true;
    return false;
  };
  double tol = 1e-13 * std::max(1.0, C.maxCoeff());
  // push the bottleneck along sink <- source <- sink ... <- origin
  auto augment = [&](std::size_t j) {
    double theta = rb[j];
    for (std::size_t jj = j;;) {
      auto i = static_cast<std::size_t>(pred_t[jj]);
      if (pred_s[i] < 0) {
        theta = std::min(theta, ra[i]);
        break;
      }
      jj = static_cast<std::size_t>(pred_s[i]);
      theta = std::min(theta, F(i, jj));
    }
    rb[j] -= theta;
    for (std::size_t jj = j;;) {
      auto i = static_cast<std::size_t>(pred_t[jj]);
      F(i, jj) += theta;
      if (pred_s[i] < 0) {
        ra[i] -= theta;
        break;
      }
      jj = static_cast<std::size_t>(pred_s[i]);
      F(i, jj) -= theta;
      if (F(i, jj) <= eps) F(i, jj) = 0.0;
    }
    ++augmentations;
  };
  // both sides are checked since rounding can leave dust on one of them
  while (left(ra) && left(rb)) {
    std::fill(ds.begin(), ds.end(), kInf);
    std::fill(dt.begin(), dt.end(), kInf);
    std::fill(done_s.begin(), done_s.end(), 0);
    std::fill(done_t.begin(), done_t.end(), 0);
    for (std::size_t i = 0; i < m; ++i) {
      pred_s[i] = -1;
      if (ra[i] > eps) ds[i] = 0.0;
    }
    long sink = -1;
    double D = kInf;
    // heap entries (distance, node); sinks are offset by m
    using Item = std::pair<double, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
    for (std::size_t i = 0; i < m; ++i)
      if (ds[i] == 0.0) heap.emplace(0.0, i);
    while (true) {
      require(!heap.empty(), ErrorKind::Numerical, "transport network disconnected");
      auto [best, node] = heap.top();
      heap.pop();
      if (node >= m) {
        std::size_t j = node - m;
        if (done_t[j] || best > dt[j]) continue;
        done_t[j] = 1;
        if (rb[j] > eps) {
          sink = static_cast<long>(j);
          D = best;
          break;
        }
        for (std::size_t i = 0; i < m; ++i) {
          if (done_s[i] || F(i, j) <= 0) continue;
          double nd = best + std::max(0.0, pt[j] - C(i, j) - ps[i]);
          if (nd < ds[i]) ds[i] = nd, pred_s[i] = static_cast<long>(j), heap.emplace(nd, i);
        }
      } else {
        std::size_t i = node;
        if (done_s[i] || best > ds[i]) continue;
        done_s[i] = 1;
        const double* row = Ct.col(static_cast<Eigen::Index>(i)).data();
        for (std::size_t j = 0; j < n; ++j) {
          if (done_t[j]) continue;
          double nd = best + std::max(0.0, row[j] + ps[i] - pt[j]);
          if (nd < dt[j]) dt[j] = nd, pred_t[j] = static_cast<long>(i), heap.emplace(nd, m + j);
        }
      }
    }
    for (std::size_t i = 0; i < m; ++i) ps[i] += std::min(ds[i], D);
    for (std::size_t j = 0; j < n; ++j) pt[j] += std::min(dt[j], D);
    augment(static_cast<std::size_t>(sink));
    // further paths of zero reduced cost need no new potentials
    while (true) {
      std::fill(done_s.begin(), done_s.end(), 0);
      std::fill(done_t.begin(), done_t.end(), 0);
      std::vector<std::size_t> stack;
      for (std::size_t i = 0; i < m; ++i)
        if (ra[i] > eps) stack.push_back(i), done_s[i] = 1, pred_s[i] = -1;
      long found = -1;
      while (!stack.empty() && found < 0) {
        std::size_t node = stack.back();
        stack.pop_back();
        if (node < m) {
          const double* row = Ct.col(static_cast<Eigen::Index>(node)).data();
          for (std::size_t j = 0; j < n; ++j) {
            if (done_t[j] || row[j] + ps[node] - pt[j] > tol) continue;
            done_t[j] = 1;
            pred_t[j] = static_cast<long>(node);
            if (rb[j] > eps) {
              found = static_cast<long>(j);
              break;
            }
            stack.push_back(m + j);
          }
        } else {
          std::size_t j = node - m;
          for (std::size_t i = 0; i < m; ++i) {
            if (done_s[i] || F(i, j) <= 0) continue;
            done_s[i] = 1;
            pred_s[i] = static_cast<long>(j);
            stack.push_back(i);
          }
        }
      }
      if (found < 0) break;
      augment(static_cast<std::size_t>(found));
    }
  }
  u.resize(static_cast<Eigen::Index>(m));
  v.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < m; ++i) u[i] = -ps[i];
  // c-transform makes the dual exactly feasible
  for (std::size_t j = 0; j < n; ++j) v[j] = (C.col(j) - u).minCoeff();
}

// Cancels cycles of the support graph until it is a forest. Support arcs
// have zero reduced cost, so the cost is unchanged up to rounding; each
// cycle is pushed in the non-increasing direction.
inline void make_basic(const Eigen::MatrixXd& C, Eigen::MatrixXd& F) {
  const auto m = static_cast<std::size_t>(F.rows()), n = static_cast<std::size_t>(F.cols());
  // forest over m + n nodes: sources 0..m-1, sinks m..m+n-1
  std::vector<std::vector<std::size_t>> adj(m + n);
  auto unlink = [&](std::size_t a, std::size_t b) {
    adj[a].erase(std::find(adj[a].begin(), adj[a].end(), b));
    adj[b].erase(std::find(adj[b].begin(), adj[b].end(), a));
  };
  auto path = [&](std::size_t from, std::size_t to) {
    std::vector<long> prev(m + n, -1);
    std::vector<std::size_t> queue{from};
    prev[from] = static_cast<long>(from);
    for (std::size_t q = 0; q < queue.size() && prev[to] < 0; ++q)
      for (std::size_t w : adj[queue[q]])
        if (prev[w] < 0) prev[w] = static_cast<long>(queue[q]), queue.push_back(w);
    std::vector<std::size_t> out;
    if (prev[to] < 0) return out;
    for (std::size_t w = to; w != from; w = static_cast<std::size_t>(prev[w])) out.push_back(w);
    out.push_back(from);
    return out;  // to ... from
  };
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (F(i, j) <= 0) continue;
      auto p = path(m + j, i);  // i ... m + j
      if (p.empty()) {
        adj[i].push_back(m + j);
        adj[m + j].push_back(i);
        continue;
      }
      // cycle: (i,j) is +, path edges alternate -, +, ..., -
      struct Arc {
        std::size_t i, j;
        int sign;
      };
      std::vector<Arc> cyc{{i, j, +1}};
      int sign = -1;
      for (std::size_t k = 0; k + 1 < p.size(); ++k) {
        std::size_t a = p[k], b = p[k + 1];
        std::size_t si = a < m ? a : b, sj = (a < m ? b : a) - m;
        cyc.push_back({si, sj, sign});
        sign = -sign;
      }
      double delta = 0.0;
      for (const auto& e : cyc) delta += e.sign * C(e.i, e.j);
      int dir = delta <= 0 ? 1 : -1;
      double theta = kInf;
      for (const auto& e : cyc)
        if (e.sign * dir < 0) theta = std::min(theta, F(e.i, e.j));
      for (const auto& e : cyc) F(e.i, e.j) += dir * e.sign * theta;
      // drop exactly one arc that reached zero
      bool dropped = false;
      for (const auto& e : cyc) {
        if (!dropped && e.sign * dir < 0 && F(e.i, e.j) <= theta * 1e-14) {
          F(e.i, e.j) = 0.0;
          if (!(e.i == i && e.j == j)) unlink(e.i, m + e.j);
          dropped = true;
        }
      }
      if (F(i, j) > 0) {
        adj[i].push_back(m + j);
        adj[m + j].push_back(i);
      }
    }
}

inline void check_marginals(const std::vector<double>& a, const std::vector<double>& b) {
  double sa = 0, sb = 0;
  for (double x : a) {
    require(x >= 0 && std::isfinite(x), ErrorKind::InvalidArgument, "measures must be nonnegative");
    sa += x;
  }
  for (double x : b) {
    require(x >= 0 && std::isfinite(x), ErrorKind::InvalidArgument, "measures must be nonnegative");
    sb += x;
  }
  require(sa > 0, ErrorKind::InvalidArgument, "measures must have positive mass");
  require(std::abs(sa - sb) <= 1e-12 * std::max(sa, sb), ErrorKind::InvalidArgument,
          "mass mismatch: marginals must have equal total mass");
}

}  // namespace detail

/// Exact W2 plan for a given cost matrix (rows: source atoms).
inline TransportPlan solve_transport(const PointMeasure& mu0, const PointMeasure& mu1, const Eigen::MatrixXd& C,
                                     std::size_t max_atoms = 500) {
  detail::check_marginals(mu0.mass, mu1.mass);
  require(mu0.size() <= max_atoms && mu1.size() <= max_atoms, ErrorKind::Precondition,
          "exact transport is limited to " + std::to_string(max_atoms) + " atoms per marginal");
  require(static_cast<std::size_t>(C.rows()) == mu0.size() && static_cast<std::size_t>(C.cols()) == mu1.size(),
          ErrorKind::InvalidArgument, "cost matrix does not match the marginals");
  TransportPlan p;
  p.source = mu0;
  p.target = mu1;
  Eigen::MatrixXd F;
  detail::shortest_path_transport(C, mu0.mass, mu1.mass, F, p.u, p.v, p.augmentations);
  detail::make_basic(C, F);
  CompensatedSum cost, dual;
  std::vector<double> rows(mu0.size(), 0.0), cols(mu1.size(), 0.0);
  for (std::size_t i = 0; i < mu0.size(); ++i)
    for (std::size_t j = 0; j < mu1.size(); ++j) {
      double f = F(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (f <= 0) continue;
      p.support.push_back({i, j, f});
      cost.add(f * C(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
      rows[i] += f;
      cols[j] += f;
    }
  for (std::size_t i = 0; i < mu0.size(); ++i) {
    dual.add(mu0.mass[i] * p.u[static_cast<Eigen::Index>(i)]);
    p.marginal_error = std::max(p.marginal_error, std::abs(rows[i] - mu0.mass[i]));
  }
  for (std::size_t j = 0; j < mu1.size(); ++j) {
    dual.add(mu1.mass[j] * p.v[static_cast<Eigen::Index>(j)]);
    p.marginal_error = std::max(p.marginal_error, std::abs(cols[j] - mu1.mass[j]));
  }
  p.cost = cost.value();
  p.dual_value = dual.value();
  p.duality_gap = p.cost - p.dual_value;
  return p;
}

inline Eigen::MatrixXd squared_distances(const PointMeasure& a, const PointMeasure& b) {
  require(a.dim() == b.dim(), ErrorKind::InvalidArgument, "measures live in different dimensions");
  Eigen::MatrixXd C(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(b.size()));
  for (Eigen::Index i = 0; i < C.rows(); ++i)
    for (Eigen::Index j = 0; j < C.cols(); ++j) C(i, j) = (a.points.col(i) - b.points.col(j)).squaredNorm();
  return C;
}

/// Quadratic-cost plan between point measures in R^n.
inline TransportPlan solve_w2(const PointMeasure& mu0, const PointMeasure& mu1, std::size_t max_atoms = 500) {
  return solve_transport(mu0, mu1, squared_distances(mu0, mu1), max_atoms);
}

/// Quadratic-cost plan between node measures, cost d(i,j)^2 in the space metric.
inline TransportPlan solve_w2(const MmSpace& s, const Vec& mu0, const Vec& mu1, std::size_t max_atoms = 500) {
  std::vector<std::size_t> n0, n1;
  PointMeasure a = measure_on(s, mu0, &n0), b = measure_on(s, mu1, &n1);
  require(a.size() <= max_atoms && b.size() <= max_atoms, ErrorKind::Precondition,
          "exact transport is limited to " + std::to_string(max_atoms) + " atoms per marginal");
  Eigen::MatrixXd C(static_cast<Eigen::Index>(n0.size()), static_cast<Eigen::Index>(n1.size()));
  for (std::size_t i = 0; i < n0.size(); ++i)
    for (std::size_t j = 0; j < n1.size(); ++j) {
      double d = s.dist(n0[i], n1[j]);
      C(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d * d;
    }
  return solve_transport(a, b, C, max_atoms);
}

// ---------------------------------------------------------------------------
// displacement interpolation

struct Interpolant {
  PointMeasure mu;             // one atom per plan entry
  double max_density_ratio;    // max cell mass / (reference density * cell volume)
};

inline PointMeasure interpolate_atoms(const TransportPlan& p, double t) {
  require(t >= 0 && t <= 1, ErrorKind::InvalidArgument, "t must lie in [0,1]");
  PointMeasure m;
  m.points.resize(p.source.dim(), static_cast<Eigen::Index>(p.support.size()));
  for (std::size_t k = 0; k < p.support.size(); ++k) {
    const auto& e = p.support[k];
    m.points.col(k) = t == 0 ? p.from(e) : t == 1 ? p.to(e) : Coord((1 - t) * p.from(e) + t * p.to(e));
    m.mass.push_back(e.mass);
  }
  return m;
}

/// Cell mass densities of a point measure on the lattice h Z^n (nearest cell).
inline std::vector<double> cell_densities(const PointMeasure& m, double cell, double reference_density = 1.0) {
  require(cell > 0, ErrorKind::InvalidArgument, "cell width must be positive");
  std::vector<std::pair<std::vector<long>, double>> cells;
  for (std::size_t k = 0; k < m.size(); ++k) {
    std::vector<long> key(static_cast<std::size_t>(m.dim()));
    for (int d = 0; d < m.dim(); ++d) key[d] = std::lround(m.points(d, static_cast<Eigen::Index>(k)) / cell);
    cells.emplace_back(std::move(key), m.mass[k]);
  }
  std::sort(cells.begin(), cells.end());
  std::vector<double> out;
  double vol = std::pow(cell, m.dim()) * reference_density;
  for (std::size_t k = 0; k < cells.size();) {
    double acc = 0.0;
    std::size_t e = k;
    for (; e < cells.size() && cells[e].first == cells[k].first; ++e) acc += cells[e].second;
    out.push_back(acc / vol);
    k = e;
  }
  return out;
}

/// mu_t = sum pi_ij delta_{(1-t) x_i + t y_j}; `box` (lower, upper), if
/// given, must contain every interpolant.
inline Interpolant mccann_interpolate(const TransportPlan& p, double t, double cell, double reference_density = 1.0,
                                      const std::pair<Coord, Coord>* box = nullptr) {
  Interpolant r{interpolate_atoms(p, t), 0.0};
  if (box) {
    for (Eigen::Index k = 0; k < r.mu.points.cols(); ++k) {
      Coord z = r.mu.points.col(k);
      require(((z - box->first).array() >= -1e-12).all() && ((box->second - z).array() >= -1e-12).all(),
              ErrorKind::Numerical, "interpolant left a convex domain");
    }
  }
  for (double d : cell_densities(r.mu, cell, reference_density)) r.max_density_ratio = std::max(r.max_density_ratio, d);
  return r;
}

struct SpeedReport {
  double w2 = 0.0;
  double max_relative_deviation = 0.0;  // |W2(mu_s, mu_t) / (|t - s| W2) - 1|
  std::size_t checks = 0;
};

/// Constant speed along the interpolation, re-solving W2 between sampled times.
inline SpeedReport geodesic_speed(const TransportPlan& p, const std::vector<double>& times, std::size_t max_atoms = 1000) {
  SpeedReport r;
  r.w2 = p.w2();
  require(r.w2 > 0, ErrorKind::Precondition, "geodesic speed needs distinct marginals");
  std::vector<PointMeasure> mus;
  for (double t : times) mus.push_back(interpolate_atoms(p, t));
  for (std::size_t a = 0; a < times.size(); ++a)
    for (std::size_t b = a + 1; b < times.size(); ++b) {
      double gap = std::abs(times[b] - times[a]);
      if (gap == 0) continue;
      double w = solve_w2(mus[a], mus[b], max_atoms).w2();
      r.max_relative_deviation = std::max(r.max_relative_deviation, std::abs(w / (gap * r.w2) - 1.0));
      ++r.checks;
    }
  return r;
}

// ---------------------------------------------------------------------------
// geodesic drift

/// Velocity field of the interpolation: the pair velocities y_j - x_i placed
/// at the interpolants z_ij(s) and smoothed by Gaussian kernel regression.
class GeodesicDrift {
 public:
  GeodesicDrift(const TransportPlan& p, double bandwidth) : plan_(p), bw_(bandwidth) {
    require(bandwidth > 0, ErrorKind::InvalidArgument, "bandwidth must be positive");
    for (const auto& e : p.support) vel_.push_back(p.to(e) - p.from(e));
  }
  int dim() const { return plan_.source.dim(); }
  double bandwidth() const { return bw_; }

  Coord velocity(double s, const Coord& z) const {
    const auto& sup = plan_.support;
    std::vector<double> d2(sup.size());
    double lo = kInf;
    for (std::size_t k = 0; k < sup.size(); ++k) {
      d2[k] = (z - ((1 - s) * plan_.from(sup[k]) + s * plan_.to(sup[k]))).squaredNorm();
      lo = std::min(lo, d2[k]);
    }
    Coord num = Coord::Zero(dim());
    double den = 0.0;
    for (std::size_t k = 0; k < sup.size(); ++k) {
      double w = sup[k].mass * std::exp(-(d2[k] - lo) / (2 * bw_ * bw_));
      num += w * vel_[k];
      den += w;
    }
    return num / den;
  }

  /// Pairs of atoms that coincide at time s with different velocities.
  std::size_t conflicts(double s, double tol = 1e-9) const {
    auto z = interpolate_atoms(plan_, s);
    std::size_t c = 0;
    for (Eigen::Index a = 0; a < z.points.cols(); ++a)
      for (Eigen::Index b = a + 1; b < z.points.cols(); ++b)
        if ((z.points.col(a) - z.points.col(b)).norm() <= tol && (vel_[a] - vel_[b]).norm() > tol) ++c;
    return c;
  }

  /// RK4 transport of the atoms of mu from time s to t.
  PointMeasure push(const PointMeasure& mu, double s, double t, std::size_t steps) const {
    PointMeasure out = mu;
    if (s == t) return out;
    require(steps >= 1, ErrorKind::InvalidArgument, "need at least one step");
    double dt = (t - s) / static_cast<double>(steps);
    parallel_for(mu.size(), [&](std::size_t k) {
      Coord x = mu.points.col(static_cast<Eigen::Index>(k));
      for (std::size_t q = 0; q < steps; ++q) {
        double tq = s + dt * static_cast<double>(q);
        Coord k1 = velocity(tq, x);
        Coord k2 = velocity(tq + 0.5 * dt, x + 0.5 * dt * k1);
        Coord k3 = velocity(tq + 0.5 * dt, x + 0.5 * dt * k2);
        Coord k4 = velocity(tq + dt, x + dt * k3);
        x += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      }
      out.points.col(static_cast<Eigen::Index>(k)) = x;
    });
    return out;
  }

 private:
  TransportPlan plan_;
  double bw_;
  std::vector<Coord> vel_;
};

struct PushforwardReport {
  double w2_error = 0.0;           // W2((X_s^t)_# mu_s, mu_t)
  double composition_error = 0.0;  // W2(X_t^u X_s^t mu_s, X_s^u mu_s), when u is given
  std::size_t conflicts = 0;
};

inline PushforwardReport verify_geodesic_pushforward(const GeodesicDrift& drift, const TransportPlan& p, double s,
                                                     double t, std::size_t steps = 40, double u = -1.0) {
  require(s >= 0 && s <= 1 && t >= 0 && t <= 1, ErrorKind::InvalidArgument, "times must lie in [0,1]");
  PushforwardReport r;
  auto mus = interpolate_atoms(p, s), mut = interpolate_atoms(p, t);
  auto pushed = drift.push(mus, s, t, steps);
  r.w2_error = solve_w2(pushed, mut, 1000).w2();
  r.conflicts = drift.conflicts(s);
  if (u >= 0) {
    require(u <= 1, ErrorKind::InvalidArgument, "times must lie in [0,1]");
    auto twice = drift.push(pushed, t, u, steps);
    auto once = drift.push(mus, s, u, steps);
    r.composition_error = solve_w2(twice, once, 1000).w2();
  }
  return r;
}

// ---------------------------------------------------------------------------
// entropy convexity

/// Gaussian kernel density of mu at each of the query points, relative to a
/// reference density of the ambient measure.
inline std::vector<double> kernel_density(const PointMeasure& mu, const Eigen::MatrixXd& at, double bandwidth,
                                          double reference_density = 1.0) {
  int n = mu.dim();
  double norm = std::pow(2 * kPi * bandwidth * bandwidth, 0.5 * n) * reference_density;
  std::vector<double> out(static_cast<std::size_t>(at.cols()));
  parallel_for(out.size(), [&](std::size_t q) {
    CompensatedSum acc;
    for (std::size_t k = 0; k < mu.size(); ++k)
      acc.add(mu.mass[k] *
              std::exp(-(at.col(static_cast<Eigen::Index>(q)) - mu.points.col(static_cast<Eigen::Index>(k))).squaredNorm() /
                       (2 * bandwidth * bandwidth)));
    out[q] = acc.value() / norm;
  });
  return out;
}

struct CdReport {
  std::vector<double> times, lhs, rhs, slack;  // slack = rhs - lhs >= 0 when the inequality holds
  double worst_slack = kInf;
  double worst_relative_slack = kInf;
  double refinement_change = 0.0;  // median relative density change, bandwidth vs bandwidth / sqrt 2
  bool refine_advised = false;
};

/// -int rho_t^{1-1/N} dm <= -sum pi [tau^{(1-t)}(d) rho_0^{-1/N} + tau^{(t)}(d) rho_1^{-1/N}].
/// Densities are kernel estimates at the atoms, and int rho_t^{1-1/N} dm is
/// evaluated as int rho_t^{-1/N} d mu_t over the interpolant atoms.
inline CdReport verify_cd_entropy(const TransportPlan& p, double N, const std::vector<double>& times, double bandwidth,
                                  double K = 0.0, double reference_density = 1.0) {
  require(N > 1, ErrorKind::InvalidArgument, "N must exceed 1");
  require(bandwidth > 0, ErrorKind::InvalidArgument, "bandwidth must be positive");
  CdReport r;
  auto rho0 = kernel_density(p.source, p.source.points, bandwidth, reference_density);
  auto rho1 = kernel_density(p.target, p.target.points, bandwidth, reference_density);
  {
    auto fine = kernel_density(p.source, p.source.points, bandwidth / std::sqrt(2.0), reference_density);
    std::vector<double> ch;
    for (std::size_t i = 0; i < fine.size(); ++i) ch.push_back(std::abs(fine[i] / rho0[i] - 1.0));
    r.refinement_change = median(ch);
    r.refine_advised = r.refinement_change > 0.05;
  }
  double e = -1.0 / N;
  for (double t : times) {
    auto mut = interpolate_atoms(p, t);
    auto rhot = kernel_density(mut, mut.points, bandwidth, reference_density);
    CompensatedSum L, R;
    for (std::size_t k = 0; k < p.support.size(); ++k) {
      const auto& pe = p.support[k];
      double d = (p.to(pe) - p.from(pe)).norm();
      double a = distortion_coefficients(K, N, 1 - t, d).tau, b = distortion_coefficients(K, N, t, d).tau;
      L.add(-pe.mass * std::pow(rhot[k], e));
      R.add(-pe.mass * (a * std::pow(rho0[pe.i], e) + b * std::pow(rho1[pe.j], e)));
    }
    r.times.push_back(t);
    r.lhs.push_back(L.value());
    r.rhs.push_back(R.value());
    double sl = R.value() - L.value();
    r.slack.push_back(sl);
    r.worst_slack = std::min(r.worst_slack, sl);
    r.worst_relative_slack = std::min(r.worst_relative_slack, sl / std::abs(R.value()));
  }
  return r;
}

}  // namespace greenlab
