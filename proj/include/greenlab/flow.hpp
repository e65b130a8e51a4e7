#pragma once

#include "greenlab/field.hpp"
#include "greenlab/maximal.hpp"

#include <unordered_set>

namespace greenlab {

// ---------------------------------------------------------------------------
// trajectories

struct Domain {
  Coord lower, upper;
  bool contains(const Coord& x) const {
    for (Eigen::Index d = 0; d < x.size(); ++d)
      if (x[d] < lower[d] || x[d] > upper[d]) return false;
    return true;
  }
  static Domain unbounded(int n) {
    return {Coord::Constant(n, -kInf), Coord::Constant(n, kInf)};
  }
  static Domain of(const MmSpace& s) {
    const auto& g = s.grid();
    double hi = g.lower + (g.side - 1) * g.spacing;
    return {Coord::Constant(g.dim, g.lower), Coord::Constant(g.dim, hi)};
  }
};

struct FlowResult {
  std::vector<std::size_t> seeds;           // point ids (empty for free particles)
  std::vector<double> times;                // recorded times
  std::vector<Eigen::MatrixXd> positions;   // positions[k].col(i) = X_{t_k}(x_i)
  std::vector<char> exited;
  std::vector<char> singular;
  double dt = 0.0;
  std::size_t steps = 0;

  std::size_t size() const { return exited.size(); }
  bool valid(std::size_t i) const { return !exited[i] && !singular[i]; }
  Coord at(std::size_t k, std::size_t i) const { return positions[k].col(i); }
};

inline Coord rk4_step(const VectorFieldSpec& f, double t, const Coord& x, double dt) {
  Coord k1 = f.velocity(t, x);
  Coord k2 = f.velocity(t + 0.5 * dt, x + 0.5 * dt * k1);
  Coord k3 = f.velocity(t + 0.5 * dt, x + 0.5 * dt * k2);
  Coord k4 = f.velocity(t + dt, x + dt * k3);
  return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// Classical RK4 from t0 over `steps` steps of signed size dt, recording
/// every `record_every` steps. Seeds leaving the domain are flagged and
/// frozen; shear seeds coming within |dt| |b|_inf of the singular plane are
/// flagged.
inline FlowResult integrate_points(const VectorFieldSpec& f, const std::vector<Coord>& starts, double dt,
                                   std::size_t steps, std::size_t record_every = 1, const Domain* domain = nullptr,
                                   double t0 = 0.0) {
  require(dt != 0.0 && std::isfinite(dt), ErrorKind::InvalidArgument, "time step must be finite and nonzero");
  require(record_every >= 1, ErrorKind::InvalidArgument, "record interval must be positive");
  int n = f.dim();
  std::size_t m = starts.size();
  FlowResult r;
  r.dt = dt;
  r.steps = steps;
  r.exited.assign(m, 0);
  r.singular.assign(m, 0);
  for (std::size_t k = 0; k <= steps; k += record_every) r.times.push_back(t0 + dt * static_cast<double>(k));
  if (steps % record_every != 0) r.times.push_back(t0 + dt * static_cast<double>(steps));
  for (std::size_t k = 0; k < r.times.size(); ++k) r.positions.emplace_back(n, m);
  double guard = std::abs(dt) * f.sup_norm();
  parallel_for(m, [&](std::size_t i) {
    Coord x = starts[i];
    require(x.size() == n, ErrorKind::InvalidArgument, "seed has wrong dimension");
    if (domain && !domain->contains(x)) r.exited[i] = 1;
    if (f.singular_coordinate(x) < guard) r.singular[i] = 1;
    std::size_t slot = 0;
    r.positions[slot++].col(i) = x;
    for (std::size_t k = 1; k <= steps; ++k) {
      if (!r.exited[i]) {
        Coord y = rk4_step(f, t0 + dt * static_cast<double>(k - 1), x, dt);
        if (domain && !domain->contains(y))
          r.exited[i] = 1;
        else
          x = y;
        if (f.singular_coordinate(x) < guard) r.singular[i] = 1;
      }
      if (k % record_every == 0 || k == steps) r.positions[slot++].col(i) = x;
    }
  });
  return r;
}

/// Flow of lattice seeds over [0, T] with step dt (dt <= 0 picks the
/// largest admissible step).
inline FlowResult integrate_rlf(const MmSpace& s, const VectorFieldSpec& f, const std::vector<std::size_t>& seeds,
                                double T, double dt = 0.0, std::size_t record_every = 1) {
  require(s.is_grid(), ErrorKind::Precondition, "flows need a grid space");
  require(s.grid().dim == f.dim(), ErrorKind::InvalidArgument, "field and space dimensions differ");
  require(T > 0, ErrorKind::InvalidArgument, "time horizon must be positive");
  double h = s.grid().spacing;
  double limit = f.max_step(h);
  if (dt <= 0) dt = limit;
  require(dt <= limit * (1 + 1e-12), ErrorKind::Precondition, "time step violates the step-control rule");
  auto steps = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(T / dt - 1e-9)));
  dt = T / static_cast<double>(steps);
  std::vector<Coord> starts;
  for (std::size_t i : seeds) {
    require(s.interior(i), ErrorKind::Precondition, "flow seeds must be interior");
    starts.push_back(s.coord(i));
  }
  Domain dom = Domain::of(s);
  FlowResult r = integrate_points(f, starts, dt, steps, record_every, &dom);
  r.seeds = seeds;
  return r;
}

/// Observed convergence order of endpoints under step halving.
inline double step_halving_order(const VectorFieldSpec& f, const std::vector<Coord>& starts, double T, double dt) {
  std::vector<Eigen::MatrixXd> ends;
  for (int level = 0; level < 3; ++level) {
    double d = dt / std::pow(2.0, level);
    auto steps = static_cast<std::size_t>(std::llround(T / d));
    ends.push_back(integrate_points(f, starts, T / static_cast<double>(steps), steps, steps).positions.back());
  }
  double e1 = (ends[0] - ends[1]).cwiseAbs().maxCoeff();
  double e2 = (ends[1] - ends[2]).cwiseAbs().maxCoeff();
  return std::log2(e1 / e2);
}

/// max |X_{T->0}(X_{0->T}(x)) - x| for an autonomous field.
inline double reversibility_error(const VectorFieldSpec& f, const std::vector<Coord>& starts, double T,
                                  std::size_t steps) {
  require(f.autonomous(), ErrorKind::Precondition, "reversibility check needs an autonomous field");
  double dt = T / static_cast<double>(steps);
  auto fwd = integrate_points(f, starts, dt, steps, steps);
  std::vector<Coord> mid;
  for (std::size_t i = 0; i < starts.size(); ++i) mid.push_back(fwd.positions.back().col(i));
  auto back = integrate_points(f, mid, -dt, steps, steps, nullptr, T);
  double worst = 0.0;
  for (std::size_t i = 0; i < starts.size(); ++i)
    worst = std::max(worst, (Coord(back.positions.back().col(i)) - starts[i]).norm());
  return worst;
}

// ---------------------------------------------------------------------------
// regular Lagrangian flow axioms

struct TestFunction {
  std::function<double(const Coord&)> f;
  std::function<Coord(const Coord&)> grad;
};

/// Coordinate functions plus Gaussian bumps at the given centers.
inline std::vector<TestFunction> default_test_functions(int n, const std::vector<Coord>& bump_centers, double width) {
  std::vector<TestFunction> out;
  for (int d = 0; d < n; ++d)
    out.push_back({[d](const Coord& x) { return x[d]; },
                   [d, n](const Coord&) {
                     Coord g = Coord::Zero(n);
                     g[d] = 1.0;
                     return g;
                   }});
  for (const Coord& c : bump_centers)
    out.push_back({[c, width](const Coord& x) { return std::exp(-(x - c).squaredNorm() / (width * width)); },
                   [c, width](const Coord& x) {
                     double e = std::exp(-(x - c).squaredNorm() / (width * width));
                     return Coord(-2.0 * e / (width * width) * (x - c));
                   }});
  return out;
}

struct RlfReport {
  double condition3_residual = 0.0;  // max |d/dt f(X_t) - b . grad f(X_t)|
  double speed_violation = 0.0;      // max of |X_t - X_s| - |b|_inf |t - s| over consecutive records
  std::size_t checks = 0;
  std::size_t excluded_seeds = 0;
};

inline RlfReport verify_rlf_axioms(const FlowResult& r, const VectorFieldSpec& f,
                                   const std::vector<TestFunction>& tests) {
  RlfReport rep;
  double B = f.sup_norm();
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (!r.valid(i)) {
      ++rep.excluded_seeds;
      continue;
    }
    for (std::size_t k = 0; k + 1 < r.times.size(); ++k) {
      double step = (r.at(k + 1, i) - r.at(k, i)).norm();
      if (std::isfinite(B)) rep.speed_violation = std::max(rep.speed_violation, step - B * std::abs(r.times[k + 1] - r.times[k]));
      if (k == 0) continue;
      Coord x = r.at(k, i), xm = r.at(k - 1, i), xp = r.at(k + 1, i);
      Coord b = f.velocity(r.times[k], x);
      double span = r.times[k + 1] - r.times[k - 1];
      for (const auto& tf : tests) {
        double lhs = (tf.f(xp) - tf.f(xm)) / span;
        double rhs = b.dot(tf.grad(x));
        rep.condition3_residual = std::max(rep.condition3_residual, std::abs(lhs - rhs));
        ++rep.checks;
      }
    }
  }
  return rep;
}

struct CompressibilityOptions {
  double radius = 0.75;      // particles fill the ball B(center, radius)
  int cells = 8;             // cells per axis over [center - radius, center + radius]
  int per_cell = 16;         // particles per cell per axis, one jittered particle per subcell
  std::uint64_t seed = 1;
  std::size_t min_samples = 0;  // 0: half the full-cell count
  double T = 1.0;
  double dt = 0.0;           // 0: step-control rule with h = cell width
  std::size_t checkpoints = 4;
  double center_radius = 0.2;  // cells within this distance of the center enter the center density
};

struct CompressibilityReport {
  double L = 0.0;            // max density ratio of (X_t)_# m to m over used cells and times
  double min_ratio = kInf;   // over cells whose reference region lies inside the particle ball
  std::vector<double> times;
  std::vector<double> center_density;
  std::size_t cells_used = 0;
  std::size_t coarsened = 0;  // times the binning was halved for starvation
};

/// Cell-histogram estimate of the compressibility constant. The reference
/// measure is represented by stratified particles, one uniformly jittered
/// particle per subcell, so every cell carries per_cell^n reference particles.
/// An unjittered subgrid aliases: no particle crosses a cell face until the
/// displacement exceeds half the particle spacing.
inline CompressibilityReport estimate_compressibility(const VectorFieldSpec& f, const CompressibilityOptions& o) {
  int n = f.dim();
  const Coord& c = f.params().center;
  int cells = o.cells;
  double width = 2.0 * o.radius / cells;
  int q = o.per_cell;
  // particles on the subgrid, inside the ball
  std::vector<Coord> starts;
  long side = static_cast<long>(cells) * q;
  std::size_t total = 1;
  for (int d = 0; d < n; ++d) total *= static_cast<std::size_t>(side);
  Rng rng(o.seed);
  for (std::size_t m = 0; m < total; ++m) {
    std::size_t r = m;
    Coord x(n);
    for (int d = 0; d < n; ++d) {
      x[d] = c[d] - o.radius + (static_cast<double>(r % side) + rng.uniform()) * width / q;
      r /= side;
    }
    if ((x - c).norm() <= o.radius) starts.push_back(x);
  }
  double dt = o.dt > 0 ? o.dt : f.max_step(width);
  auto steps = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(o.T / dt - 1e-9)));
  dt = o.T / static_cast<double>(steps);
  std::size_t every = std::max<std::size_t>(1, steps / std::max<std::size_t>(1, o.checkpoints));
  auto flow = integrate_points(f, starts, dt, steps, every);
  CompressibilityReport rep;
  rep.times = flow.times;
  for (int level = 0;; ++level) {
    int cl = cells >> level;
    require(cl >= 1, ErrorKind::Numerical, "compressibility binning starved at every resolution");
    double w = 2.0 * o.radius / cl;
    double full = std::pow(static_cast<double>(q) * (1 << level), n);
    std::size_t min_samples = o.min_samples ? o.min_samples : static_cast<std::size_t>(0.5 * full);
    if (full < static_cast<double>(min_samples)) {
      ++rep.coarsened;
      continue;
    }
    auto cell_of = [&](const Coord& x, std::size_t& idx) {
      idx = 0;
      for (int d = n - 1; d >= 0; --d) {
        double u = (x[d] - (c[d] - o.radius)) / w;
        if (u < 0 || u >= cl) return false;
        idx = idx * cl + static_cast<std::size_t>(u);
      }
      return true;
    };
    // reference cells lying inside the particle ball
    std::size_t ncell = 1;
    for (int d = 0; d < n; ++d) ncell *= static_cast<std::size_t>(cl);
    std::vector<char> inside(ncell, 0);
    std::vector<char> near_center(ncell, 0);
    for (std::size_t m = 0; m < ncell; ++m) {
      std::size_t r = m;
      double far = 0.0, mid = 0.0;
      for (int d = 0; d < n; ++d) {
        double lo = -o.radius + static_cast<double>(r % cl) * w;
        r /= cl;
        double e = std::max(std::abs(lo), std::abs(lo + w));
        far += e * e;
        mid += (lo + 0.5 * w) * (lo + 0.5 * w);
      }
      inside[m] = std::sqrt(far) <= o.radius;
      near_center[m] = std::sqrt(mid) <= o.center_radius;
    }
    rep.center_density.clear();
    for (std::size_t k = 0; k < flow.times.size(); ++k) {
      std::vector<std::size_t> count(ncell, 0);
      for (std::size_t i = 0; i < flow.size(); ++i) {
        std::size_t idx;
        if (cell_of(flow.at(k, i), idx)) ++count[idx];
      }
      double center_mass = 0.0, center_ref = 0.0;
      std::size_t used = 0;
      for (std::size_t m = 0; m < ncell; ++m) {
        double ratio = static_cast<double>(count[m]) / full;
        rep.L = std::max(rep.L, ratio);
        if (inside[m]) {
          rep.min_ratio = std::min(rep.min_ratio, ratio);
          ++used;
        }
        if (near_center[m]) {
          center_mass += static_cast<double>(count[m]);
          center_ref += full;
        }
      }
      rep.cells_used = used;
      rep.center_density.push_back(center_ref > 0 ? center_mass / center_ref : 0.0);
    }
    break;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Green function along trajectories

struct PairIndex {
  std::size_t a, b;  // seed indices into a FlowResult
};

/// Seed-index pairs with lattice distance in [dmin, dmax], sampled uniformly.
inline std::vector<PairIndex> sample_seed_pairs(const MmSpace& s, const FlowResult& r, std::size_t count, double dmin,
                                                double dmax, Rng& rng, const std::vector<std::size_t>* subset = nullptr) {
  std::vector<std::size_t> pool;
  if (subset)
    pool = *subset;
  else
    for (std::size_t i = 0; i < r.size(); ++i) pool.push_back(i);
  std::vector<std::size_t> valid;
  for (std::size_t i : pool)
    if (r.valid(i)) valid.push_back(i);
  require(valid.size() >= 2, ErrorKind::Precondition, "not enough valid seeds for pair sampling");
  std::vector<PairIndex> out;
  std::size_t attempts = 0;
  while (out.size() < count && attempts < 200 * count) {
    ++attempts;
    std::size_t a = valid[rng.index(valid.size())], b = valid[rng.index(valid.size())];
    if (a == b) continue;
    double d = s.dist(r.seeds[a], r.seeds[b]);
    if (d < dmin || d > dmax) continue;
    out.push_back({a, b});
  }
  return out;
}

struct GreenDerivativeReport {
  double max_abs_residual = 0.0;
  double max_relative_residual = 0.0;  // against G (Mg(x) + Mg(y)) where that scale is positive
  double max_abs_derivative = 0.0;
  std::size_t checks = 0;
  std::size_t excluded = 0;
};

/// Centered differences of t -> G(X_t x, X_t y) against
/// b(X_t y) . grad Gamma(X_t y - X_t x) + b(X_t x) . grad Gamma(X_t x - X_t y).
/// Mg is indexed by space point and read at the nearest node.
inline GreenDerivativeReport verify_green_derivative(const MmSpace& s, const FlowResult& r, const VectorFieldSpec& f,
                                                     const GreenInterpolant& gi, const std::vector<PairIndex>& pairs,
                                                     const Vec& Mg) {
  GreenDerivativeReport rep;
  for (const auto& p : pairs) {
    if (!r.valid(p.a) || !r.valid(p.b)) {
      ++rep.excluded;
      continue;
    }
    for (std::size_t k = 1; k + 1 < r.times.size(); ++k) {
      Coord x = r.at(k, p.a), y = r.at(k, p.b);
      double fd = (gi.value(r.at(k + 1, p.b) - r.at(k + 1, p.a)) - gi.value(r.at(k - 1, p.b) - r.at(k - 1, p.a))) /
                  (r.times[k + 1] - r.times[k - 1]);
      Coord gxy, gyx;
      double G = gi.value(y - x, &gxy);
      gi.value(x - y, &gyx);
      double formula = f.velocity(r.times[k], y).dot(gxy) + f.velocity(r.times[k], x).dot(gyx);
      double res = std::abs(fd - formula);
      rep.max_abs_residual = std::max(rep.max_abs_residual, res);
      rep.max_abs_derivative = std::max(rep.max_abs_derivative, std::abs(formula));
      double scale = G * (Mg[s.nearest_node(x)] + Mg[s.nearest_node(y)]);
      if (scale > 0) rep.max_relative_residual = std::max(rep.max_relative_residual, res / scale);
      ++rep.checks;
    }
  }
  return rep;
}

struct VectorMaximalRow {
  std::size_t x, y;
  double lhs, rhs, ratio;
};

struct VectorMaximalReport {
  double C_M = 0.0;
  double rigid_residual = 0.0;  // max lhs / (|grad Gamma| |b(y) - b(x)|) where rhs vanishes
  std::vector<VectorMaximalRow> rows;
  std::size_t zero_rhs = 0;
};

/// Fit of |b(y) . grad G_x(y) + b(x) . grad G_y(x)| <= C G(x,y) (Mg(x) + Mg(y))
/// over lattice pairs at time t. g and Mg are indexed by space point.
inline VectorMaximalReport verify_vector_maximal(const GreenInterpolant& gi, const MmSpace& s,
                                                 const VectorFieldSpec& f, double t, const PairList& pairs,
                                                 const Vec& Mg) {
  VectorMaximalReport rep;
  for (auto [x, y] : pairs) {
    Coord px = s.coord(x), py = s.coord(y);
    Coord gxy, gyx;
    double G = gi.value(py - px, &gxy);
    gi.value(px - py, &gyx);
    Coord bx = f.velocity(t, px), by = f.velocity(t, py);
    double lhs = std::abs(by.dot(gxy) + bx.dot(gyx));
    double rhs = G * (Mg[x] + Mg[y]);
    if (rhs <= 0) {
      ++rep.zero_rhs;
      double scale = gxy.norm() * (by - bx).norm();
      if (scale > 0) rep.rigid_residual = std::max(rep.rigid_residual, lhs / scale);
      continue;
    }
    rep.rows.push_back({x, y, lhs, rhs, lhs / rhs});
    rep.C_M = std::max(rep.C_M, lhs / rhs);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Crippa-De Lellis functional

struct PhiTable {
  std::vector<std::size_t> region;   // seed indices of P
  std::vector<double> radii;         // admissible d_G radii
  std::vector<std::size_t> time_slots;
  std::vector<double> phi_star;      // per region point
  std::vector<double> phi_zero;      // max_r Phi_{0,r} per region point
  double l2 = 0.0;                   // sqrt(mean over P of Phi*^2) with measure weights
  double radius_cap = kInf;          // largest radius whose G-balls stay inside the seed set
  std::size_t skipped_radii = 0;
  std::size_t empty_balls = 0;
};

/// Phi_{t,r}(x) = average over y in B^G(x, r) of log(1 + d_G(X_t x, X_t y) / r),
/// maximised over the (time slot, radius) grid into Phi*(x) for x in P.
/// `region` holds seed indices; G-balls use lattice d_G at time 0 and must
/// stay within the seed set of trajectories that never left the domain,
/// which caps the radius grid.
inline PhiTable phi_star(const MmSpace& s, const GreenField& field, const GreenInterpolant& gi, const FlowResult& r,
                         const std::vector<std::size_t>& region, const std::vector<double>& radii,
                         const std::vector<std::size_t>& time_slots) {
  PhiTable tab;
  tab.region = region;
  tab.time_slots = time_slots;
  std::unordered_map<std::size_t, std::size_t> slot_of;
  for (std::size_t i = 0; i < r.size(); ++i) slot_of[r.seeds[i]] = i;
  std::vector<double> cap(region.size(), kInf);
  std::vector<std::vector<std::pair<double, std::size_t>>> balls(region.size());
  double rmax = radii.empty() ? 0.0 : *std::max_element(radii.begin(), radii.end());
  parallel_for(region.size(), [&](std::size_t a) {
    std::size_t x = r.seeds[region[a]];
    // ball members among the seeds; any non-seed point caps the radius
    for (auto [d, y] : s.sorted_ball(x, s.sampled_radius(x))) {
      if (y == x) {
        balls[a].emplace_back(0.0, region[a]);
        continue;
      }
      double G = field.value(x, y);
      double dg = G > 0 ? 1.0 / G : kInf;
      auto it = slot_of.find(y);
      if (it == slot_of.end() || r.exited[it->second])
        cap[a] = std::min(cap[a], dg);
      else if (dg < rmax)
        balls[a].emplace_back(dg, it->second);
    }
    std::sort(balls[a].begin(), balls[a].end());
  });
  tab.radius_cap = *std::min_element(cap.begin(), cap.end());
  for (double rad : radii) {
    if (rad < tab.radius_cap)
      tab.radii.push_back(rad);
    else
      ++tab.skipped_radii;
  }
  std::sort(tab.radii.begin(), tab.radii.end());
  tab.phi_star.assign(region.size(), 0.0);
  tab.phi_zero.assign(region.size(), 0.0);
  std::vector<std::size_t> empties(region.size(), 0);
  parallel_for(region.size(), [&](std::size_t a) {
    const auto& ball_a = balls[a];
    std::size_t xi = region[a];
    for (std::size_t slot : time_slots) {
      Coord px = r.at(slot, xi);
      // d_G at time t for every ball member, reused across radii
      std::vector<double> dgt(ball_a.size());
      for (std::size_t b = 0; b < ball_a.size(); ++b)
        dgt[b] = ball_a[b].second == xi ? 0.0 : gi.d_g(px, r.at(slot, ball_a[b].second));
      for (double rad : tab.radii) {
        double num = 0.0, den = 0.0;
        for (std::size_t b = 0; b < ball_a.size() && ball_a[b].first < rad; ++b) {
          double w = s.weight(r.seeds[ball_a[b].second]);
          num += w * std::log1p(dgt[b] / rad);
          den += w;
        }
        if (den == 0.0) {
          ++empties[a];
          continue;
        }
        double v = num / den;
        tab.phi_star[a] = std::max(tab.phi_star[a], v);
        if (r.times[slot] == 0.0) tab.phi_zero[a] = std::max(tab.phi_zero[a], v);
      }
    }
  });
  double num = 0.0, den = 0.0;
  for (std::size_t a = 0; a < region.size(); ++a) {
    double w = s.weight(r.seeds[region[a]]);
    num += w * tab.phi_star[a] * tab.phi_star[a];
    den += w;
    tab.empty_balls += empties[a];
  }
  tab.l2 = den > 0 ? std::sqrt(num / den) : 0.0;
  return tab;
}

struct LusinReport {
  double eps = 0.0;
  double threshold = 0.0;       // ||Phi*|| / sqrt(eps)
  double deficit = 0.0;         // m(P \ E) / m(P)
  double lipschitz = 0.0;       // max d_G(X_t x, X_t y) / d_G(x, y) over sampled pairs in E
  double pointwise_C = 1.0;     // smallest C >= 1 with ratio <= C exp(C (Phi*(x) + Phi*(y)))
  double envelope = 0.0;        // C exp(2 C threshold)
  std::size_t pairs = 0;
};

/// Lusin set E = {Phi* <= ||Phi*|| / sqrt(eps)} and the d_G-Lipschitz constant
/// of X_t on E over all recorded times. Pairs closer than `floor` in d are skipped.
inline LusinReport verify_lusin_lipschitz(const MmSpace& s, const FlowResult& r, const GreenInterpolant& gi,
                                          const PhiTable& tab, double eps, std::size_t pair_count, double floor,
                                          Rng& rng) {
  require(eps > 0 && eps < 1, ErrorKind::InvalidArgument, "eps must lie in (0, 1)");
  LusinReport rep;
  rep.eps = eps;
  rep.threshold = tab.l2 / std::sqrt(eps);
  std::vector<std::size_t> E;
  double out = 0.0, all = 0.0;
  for (std::size_t a = 0; a < tab.region.size(); ++a) {
    double w = s.weight(r.seeds[tab.region[a]]);
    all += w;
    if (tab.phi_star[a] <= rep.threshold)
      E.push_back(a);
    else
      out += w;
  }
  rep.deficit = all > 0 ? out / all : 0.0;
  if (E.size() < 2) return rep;
  std::size_t attempts = 0;
  while (rep.pairs < pair_count && attempts < 100 * pair_count) {
    ++attempts;
    std::size_t a = E[rng.index(E.size())], b = E[rng.index(E.size())];
    std::size_t xi = tab.region[a], yi = tab.region[b];
    if (xi == yi || s.dist(r.seeds[xi], r.seeds[yi]) < floor) continue;
    double base = gi.d_g(r.at(0, xi), r.at(0, yi));
    double worst = 0.0;
    for (std::size_t k = 0; k < r.times.size(); ++k) worst = std::max(worst, gi.d_g(r.at(k, xi), r.at(k, yi)) / base);
    rep.lipschitz = std::max(rep.lipschitz, worst);
    // smallest C with worst <= C e^{C s}: monotone in C
    double sum = tab.phi_star[a] + tab.phi_star[b];
    auto ok = [&](double C) { return worst <= C * std::exp(C * sum); };
    if (!ok(rep.pointwise_C)) {
      double lo = rep.pointwise_C, hi = 2 * lo;
      while (!ok(hi)) hi *= 2;
      for (int it = 0; it < 60; ++it) {
        double mid = 0.5 * (lo + hi);
        (ok(mid) ? hi : lo) = mid;
      }
      rep.pointwise_C = hi;
    }
    ++rep.pairs;
  }
  rep.envelope = rep.pointwise_C * std::exp(2 * rep.pointwise_C * rep.threshold);
  return rep;
}

// ---------------------------------------------------------------------------
// product flows

struct ProductFlowReport {
  double deviation = 0.0;     // max |X^Z_t - (X^X_t, X^Y_t)|
  double pythagoras = 0.0;    // max | |b^Z|^2 - |b^X|^2 - |b^Y|^2 |
  std::size_t samples = 0;
};

/// Integrates b^Z(x, y) = (b^X(x), b^Y(y)) on the product and each factor
/// separately, pairing starts[i] of X with starts[i] of Y.
inline ProductFlowReport product_flow_check(const VectorFieldSpec& fx, const VectorFieldSpec& fy,
                                            const std::vector<Coord>& sx, const std::vector<Coord>& sy, double T,
                                            std::size_t steps) {
  require(sx.size() == sy.size(), ErrorKind::InvalidArgument, "factor seed lists differ in length");
  int nx = fx.dim(), ny = fy.dim(), nz = nx + ny;
  require(nz <= 12, ErrorKind::InvalidArgument, "product dimension exceeds 12");
  double dt = T / static_cast<double>(steps);
  auto bz = [&](double t, const Coord& z) {
    Coord out(nz);
    out.head(nx) = fx.velocity(t, z.head(nx));
    out.tail(ny) = fy.velocity(t, z.tail(ny));
    return out;
  };
  ProductFlowReport rep;
  for (std::size_t i = 0; i < sx.size(); ++i) {
    Coord z(nz);
    z.head(nx) = sx[i];
    z.tail(ny) = sy[i];
    Coord x = sx[i], y = sy[i];
    for (std::size_t k = 0; k < steps; ++k) {
      double t = dt * static_cast<double>(k);
      Coord k1 = bz(t, z);
      Coord k2 = bz(t + 0.5 * dt, z + 0.5 * dt * k1);
      Coord k3 = bz(t + 0.5 * dt, z + 0.5 * dt * k2);
      Coord k4 = bz(t + dt, z + dt * k3);
      double p = k1.squaredNorm() - fx.velocity(t, z.head(nx)).squaredNorm() - fy.velocity(t, z.tail(ny)).squaredNorm();
      rep.pythagoras = std::max(rep.pythagoras, std::abs(p));
      z = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      x = rk4_step(fx, t, x, dt);
      y = rk4_step(fy, t, y, dt);
      Coord joined(nz);
      joined.head(nx) = x;
      joined.tail(ny) = y;
      rep.deviation = std::max(rep.deviation, (z - joined).norm());
      ++rep.samples;
    }
  }
  return rep;
}

}  // namespace greenlab
