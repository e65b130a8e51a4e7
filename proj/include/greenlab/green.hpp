#pragma once

#include "greenlab/heat.hpp"

#include <Eigen/IterativeLinearSolvers>
#include <boost/math/quadrature/exp_sinh.hpp>

#include <mutex>
#include <unordered_map>

namespace greenlab {

struct GreenColumn {
  Vec g;       // G_x on every point (zero off the active set)
  Vec grad;    // |grad G_x| on every point
  double residual = 0.0;  // max |(L + c) G_x - delta_x / m_x| * m_x on the active set (eps = 0)
};

struct GreenOptions {
  double c = 0.0;
  double eps = 0.0;
  std::size_t direct_limit = 40000;  // sparse LDLT up to this many unknowns, CG above
  double cg_tolerance = 1e-12;
};

/// G, G^eps, and their shifted analogues with weight e^{-ct}, realised as
///   eps = 0: (L + c) G_x = delta_x / m_x,
///   eps > 0: G^eps_x = e^{-c eps} (L + c)^{-1} p_eps(x, .).
class GreenField {
 public:
  GreenField(const LaplaceOperator& op, const GreenOptions& opt, const HeatKernel* heat = nullptr)
      : op_(&op), opt_(opt), heat_(heat) {
    require(opt.c >= 0 && opt.eps >= 0, ErrorKind::InvalidArgument, "c and eps must be nonnegative");
    const MmSpace& s = op.space();
    if (opt.c == 0.0 && op.boundary() == Boundary::Free)
      throw Error(ErrorKind::GreenUndefined, "Green function undefined on parabolic/compact backend");
    if (op.boundary() == Boundary::Lattice) {
      const auto& g = s.grid();
      double h2 = g.spacing * g.spacing;
      lattice_ = std::make_shared<LatticeGreen>(g.dim, opt.c * h2, opt.eps / h2, g.side + 3);
      scale_ = std::pow(g.spacing, 2 - g.dim) / g.density;
    } else if (opt.eps > 0 && heat_ == nullptr) {
      own_heat_ = std::make_shared<HeatKernel>(op);
      heat_ = own_heat_.get();
    }
  }

  double c() const { return opt_.c; }
  double eps() const { return opt_.eps; }
  const LaplaceOperator& op() const { return *op_; }
  const MmSpace& space() const { return op_->space(); }
  bool lattice_mode() const { return static_cast<bool>(lattice_); }
  const LatticeGreen* lattice() const { return lattice_.get(); }
  /// Physical factor h^{2-n}/rho in lattice mode.
  double lattice_scale() const { return scale_; }

  /// Lattice mode: G at an integer displacement (may leave the window).
  double lattice_value(const int* dk) const { return scale_ * (*lattice_)(dk); }

  double value(std::size_t x, std::size_t y) const {
    if (lattice_) {
      const MmSpace& s = space();
      std::array<int, 12> a{}, b{};
      s.multi_index(x, a.data());
      s.multi_index(y, b.data());
      for (int d = 0; d < s.grid().dim; ++d) b[d] -= a[d];
      return lattice_value(b.data());
    }
    return column(x).g[y];
  }

  double grad(std::size_t x, std::size_t y) const {
    if (lattice_) {
      const MmSpace& s = space();
      std::array<int, 12> kx{};
      s.multi_index(x, kx.data());
      int n = s.grid().dim;
      auto f = [&](std::size_t j) { return value(x, j); };
      auto ext = [&](const int* k) {
        std::array<int, 12> dk{};
        for (int d = 0; d < n; ++d) dk[d] = k[d] - kx[d];
        return lattice_value(dk.data());
      };
      return gradient_norm_at(s, f, y, ext);
    }
    return column(x).grad[y];
  }

  const GreenColumn& column(std::size_t x) const {
    {
      std::lock_guard<std::mutex> lock(*mutex_);
      auto it = cache_.find(x);
      if (it != cache_.end()) return *it->second;
    }
    auto col = std::make_shared<GreenColumn>(compute(x));
    std::lock_guard<std::mutex> lock(*mutex_);
    auto [it, inserted] = cache_.emplace(x, col);
    return *it->second;
  }

  void prepare(const std::vector<std::size_t>& sources) const {
    if (!lattice_) factor();
    parallel_for(sources.size(), [&](std::size_t i) { column(sources[i]); });
  }

 private:
  void factor() const {
    std::lock_guard<std::mutex> lock(*mutex_);
    if (factored_) return;
    std::size_t na = op_->active_size();
    SpMat I(na, na);
    I.setIdentity();
    A_ = op_->symmetric() + opt_.c * I;
    if (na <= opt_.direct_limit) {
      ldlt_ = std::make_shared<Eigen::SimplicialLDLT<SpMat>>(A_);
      require(ldlt_->info() == Eigen::Success, ErrorKind::Numerical, "Green solver factorisation failed");
    }
    factored_ = true;
  }

  Vec solve(const Vec& rhs) const {
    factor();
    if (ldlt_) return ldlt_->solve(rhs);
    Eigen::ConjugateGradient<SpMat, Eigen::Lower | Eigen::Upper> cg;
    cg.setTolerance(opt_.cg_tolerance);
    cg.setMaxIterations(100000);
    cg.compute(A_);
    Vec v = cg.solve(rhs);
    require(cg.info() == Eigen::Success, ErrorKind::Numerical, "Green solver did not converge");
    return v;
  }

  GreenColumn compute(std::size_t x) const {
    const MmSpace& s = space();
    require(s.interior(x), ErrorKind::Precondition, "Green source must be interior");
    GreenColumn col;
    col.g = Vec::Zero(s.size());
    if (lattice_) {
      for (std::size_t j = 0; j < s.size(); ++j) col.g[j] = value(x, j);
      col.grad.resize(s.size());
      for (std::size_t j = 0; j < s.size(); ++j) col.grad[j] = grad(x, j);
      if (opt_.eps == 0.0) {
        // lattice equation at the window points, exterior values from the table
        const auto& g = s.grid();
        double h2 = g.spacing * g.spacing;
        std::array<int, 12> kx{}, ky{};
        s.multi_index(x, kx.data());
        double worst = 0.0;
        for (std::size_t j = 0; j < s.size(); ++j) {
          s.multi_index(j, ky.data());
          for (int d = 0; d < g.dim; ++d) ky[d] -= kx[d];
          double lap = 2.0 * g.dim * lattice_value(ky.data());
          for (int d = 0; d < g.dim; ++d) {
            ++ky[d];
            lap -= lattice_value(ky.data());
            ky[d] -= 2;
            lap -= lattice_value(ky.data());
            ++ky[d];
          }
          double r = lap / h2 + opt_.c * col.g[j] - (j == x ? 1.0 / s.weight(x) : 0.0);
          worst = std::max(worst, std::abs(r) * s.weight(x));
        }
        col.residual = worst;
      }
      return col;
    }
    std::size_t na = op_->active_size();
    auto sx = op_->slot(x);
    require(sx >= 0, ErrorKind::Precondition, "Green source must be active");
    Vec rhs = Vec::Zero(na);
    if (opt_.eps == 0.0) {
      rhs[sx] = 1.0 / op_->sqrt_mass()[sx];
    } else {
      Vec p = heat_->column(opt_.eps, x);
      for (std::size_t a = 0; a < na; ++a) rhs[a] = p[op_->active()[a]] * op_->sqrt_mass()[a];
      rhs *= std::exp(-opt_.c * opt_.eps);
    }
    Vec v = solve(rhs);
    for (std::size_t a = 0; a < na; ++a) col.g[op_->active()[a]] = v[a] / op_->sqrt_mass()[a];
    if (opt_.eps == 0.0) {
      Vec r = A_ * v - rhs;
      double worst = 0.0;
      for (std::size_t a = 0; a < na; ++a) worst = std::max(worst, std::abs(r[a] / op_->sqrt_mass()[a]));
      col.residual = worst * s.weight(x);
    }
    col.grad = gradient_norms(s, col.g);
    return col;
  }

  const LaplaceOperator* op_;
  GreenOptions opt_;
  const HeatKernel* heat_;
  std::shared_ptr<HeatKernel> own_heat_;
  std::shared_ptr<LatticeGreen> lattice_;
  double scale_ = 1.0;
  std::shared_ptr<std::mutex> mutex_ = std::make_shared<std::mutex>();
  mutable std::unordered_map<std::size_t, std::shared_ptr<GreenColumn>> cache_;
  mutable bool factored_ = false;
  mutable SpMat A_;
  mutable std::shared_ptr<Eigen::SimplicialLDLT<SpMat>> ldlt_;
};

// ---------------------------------------------------------------------------
// pair sampling

using PairList = std::vector<std::pair<std::size_t, std::size_t>>;

struct PairSampling {
  std::size_t count = 200;
  double dmin = 0.0;
  double dmax = kInf;
  double core_fraction = 0.25;
  std::size_t max_sources = 16;
  int strata = 4;  // log-distance bins with equal quotas
};

/// Core pairs stratified by log distance. Sources come from a pool of at most
/// `max_sources` core points so that column solves stay bounded.
inline PairList sample_core_pairs(const MmSpace& s, const PairSampling& ps, Rng& rng) {
  auto core = s.core_points(ps.core_fraction);
  require(!core.empty(), ErrorKind::Precondition, "core region is empty");
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < ps.max_sources; ++i) pool.push_back(core[rng.index(core.size())]);
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  // candidates per stratum
  double lo = std::max(ps.dmin, 1e-300);
  double hi = ps.dmax;
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> bins(ps.strata);
  std::vector<char> is_core(s.size(), 0);
  for (std::size_t i : core) is_core[i] = 1;
  for (std::size_t x : pool) {
    auto row = s.sorted_ball(x, std::nextafter(hi, kInf));
    for (auto [d, y] : row) {
      if (y == x || d < lo || d > hi || !is_core[y]) continue;
      int b = std::isfinite(hi) ? static_cast<int>(ps.strata * std::log(d / lo) / std::log(hi / lo)) : 0;
      b = std::clamp(b, 0, ps.strata - 1);
      bins[b].emplace_back(x, y);
    }
  }
  PairList out;
  std::size_t quota = (ps.count + ps.strata - 1) / ps.strata;
  for (auto& bin : bins) {
    if (bin.empty()) continue;
    for (std::size_t k = 0; k < quota && out.size() < ps.count; ++k) out.push_back(bin[rng.index(bin.size())]);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// comparison with F and H

struct GreenEstimateRow {
  std::size_t x, y;
  double d, F, G, ratio, H, grad, grad_ratio;
};

struct GreenEstimateReport {
  std::vector<GreenEstimateRow> rows;
  double C2 = 1.0;
  double ratio_min = kInf, ratio_max = 0.0, ratio_median = 0.0;
  double grad_ratio_min = kInf, grad_ratio_max = 0.0, grad_ratio_median = 0.0;
  bool capped = false;
  std::vector<std::pair<std::size_t, std::size_t>> offending;
};

/// Smallest C2 with F/C2 <= G <= C2 F and |grad G| <= C2 H over the sample.
inline GreenEstimateReport verify_green_estimates(const GreenField& field, const PairList& pairs,
                                                  double cap = 1e6, const TailOptions& topt = {}) {
  const MmSpace& s = field.space();
  require(s.tail().has_value(), ErrorKind::Precondition, "F and H need a tail model");
  GreenEstimateReport rep;
  std::map<std::size_t, std::shared_ptr<TailIntegrator>> tails;
  for (auto [x, y] : pairs)
    if (!tails.count(x)) tails[x] = std::make_shared<TailIntegrator>(s, x, topt);
  std::vector<double> rs, gs;
  for (auto [x, y] : pairs) {
    double d = s.dist(x, y);
    const auto& ti = *tails[x];
    GreenEstimateRow row{x, y, d, ti.F(d), field.value(x, y), 0, ti.H(d), field.grad(x, y), 0};
    row.ratio = row.G / row.F;
    row.grad_ratio = row.grad / row.H;
    rep.rows.push_back(row);
    rs.push_back(row.ratio);
    gs.push_back(row.grad_ratio);
    rep.ratio_min = std::min(rep.ratio_min, row.ratio);
    rep.ratio_max = std::max(rep.ratio_max, row.ratio);
    rep.grad_ratio_min = std::min(rep.grad_ratio_min, row.grad_ratio);
    rep.grad_ratio_max = std::max(rep.grad_ratio_max, row.grad_ratio);
    double c2 = std::max({row.ratio, row.ratio > 0 ? 1.0 / row.ratio : kInf, row.grad_ratio});
    if (c2 > cap) rep.offending.emplace_back(x, y);
    rep.C2 = std::max(rep.C2, c2);
  }
  rep.ratio_median = median(rs);
  rep.grad_ratio_median = median(gs);
  rep.capped = !rep.offending.empty();
  return rep;
}

/// Relative deviation from the Euclidean Newtonian kernel
/// 1/((n-2) n omega_n rho d^{n-2}) per pair.
inline std::vector<double> newtonian_errors(const GreenField& field, const PairList& pairs) {
  const MmSpace& s = field.space();
  const auto& g = s.grid();
  int n = g.dim;
  require(n >= 3, ErrorKind::Precondition, "Newtonian kernel needs n >= 3");
  double area = n * unit_ball_volume(n);
  std::vector<double> out;
  for (auto [x, y] : pairs) {
    double d = s.dist(x, y);
    double ref = 1.0 / ((n - 2) * area * g.density * std::pow(d, n - 2));
    out.push_back(std::abs(field.value(x, y) / ref - 1.0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// psi comparison

struct PsiComparison {
  std::vector<double> radii;
  std::vector<double> ratios;
  double min_ratio = kInf;
  double max_ratio = 0.0;
};

/// psi(r) = int_0^inf e^{-r^2/t} / phi(sqrt t) dt against int_r^inf s/phi(s) ds.
inline PsiComparison psi_tail_comparison(const std::function<double(double)>& phi, const std::vector<double>& radii) {
  require(!radii.empty(), ErrorKind::InvalidArgument, "radius grid is empty");
  double rmax = *std::max_element(radii.begin(), radii.end());
  // tail growth exponent far out decides convergence of both integrals
  double S = 1e6 * rmax;
  double p = std::log2(phi(2 * S) / phi(S));
  if (!(p > 2.0 + 1e-9)) throw Error(ErrorKind::NonParabolic, "divergent psi integral: volume law grows too slowly");
  boost::math::quadrature::exp_sinh<double> q;
  PsiComparison out;
  for (double r : radii) {
    require(r > 0, ErrorKind::InvalidArgument, "radii must be positive");
    // t = r^2 u, and s = r + v
    double psi = r * r * q.integrate([&](double u) {
      if (u <= 0) return 0.0;
      double e = std::exp(-1.0 / u);
      return e == 0.0 ? 0.0 : e / phi(r * std::sqrt(u));
    });
    double F = q.integrate([&](double v) { return (r + v) / phi(r + v); });
    double ratio = psi / F;
    out.radii.push_back(r);
    out.ratios.push_back(ratio);
    out.min_ratio = std::min(out.min_ratio, ratio);
    out.max_ratio = std::max(out.max_ratio, ratio);
  }
  return out;
}

// ---------------------------------------------------------------------------
// quasi-metric

struct QuasiMetricTable {
  std::vector<std::size_t> points;
  Eigen::MatrixXd dG;  // +inf marks excluded pairs (nonpositive G)
  Eigen::MatrixXd d;
  std::size_t excluded = 0;
  double exponent = 0.0;   // least-squares fit d_G ~ prefactor * d^exponent
  double prefactor = 0.0;
  double prefactor_at_exponent = 0.0;  // geometric-mean prefactor with the exponent fixed by the caller
  std::vector<std::pair<double, double>> continuity;  // (d, d_G) along a nearest-neighbour sequence
};

/// d_G = 1/G off the diagonal, 0 on it. The fit uses pairs with d >= floor.
inline QuasiMetricTable quasi_metric(const GreenField& field, const std::vector<std::size_t>& points,
                                     double floor = 0.0, double fixed_exponent = 0.0) {
  const MmSpace& s = field.space();
  QuasiMetricTable t;
  t.points = points;
  std::size_t n = points.size();
  t.dG = Eigen::MatrixXd::Zero(n, n);
  t.d = Eigen::MatrixXd::Zero(n, n);
  if (!field.lattice_mode()) field.prepare(points);
  parallel_for(n, [&](std::size_t i) {
    for (std::size_t j = 0; j < n; ++j) {
      t.d(i, j) = s.dist(points[i], points[j]);
      if (i == j) continue;
      double G = field.value(points[i], points[j]);
      t.dG(i, j) = G > 0 ? 1.0 / G : kInf;
    }
  });
  double sx = 0, sy = 0, sxx = 0, sxy = 0, m = 0, lsum = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      if (!std::isfinite(t.dG(i, j))) {
        ++t.excluded;
        continue;
      }
      if (t.d(i, j) < floor) continue;
      double lx = std::log(t.d(i, j)), ly = std::log(t.dG(i, j));
      sx += lx;
      sy += ly;
      sxx += lx * lx;
      sxy += lx * ly;
      lsum += ly - fixed_exponent * lx;
      m += 1;
    }
  if (m >= 2) {
    t.exponent = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    t.prefactor = std::exp((sy - t.exponent * sx) / m);
    t.prefactor_at_exponent = std::exp(lsum / m);
  }
  // continuity: d_G against d from the first point outwards
  if (n > 0) {
    std::vector<std::pair<double, double>> seq;
    for (std::size_t j = 1; j < n; ++j) seq.emplace_back(t.d(0, j), t.dG(0, j));
    std::sort(seq.begin(), seq.end());
    t.continuity.assign(seq.begin(), seq.begin() + std::min<std::size_t>(seq.size(), 8));
  }
  return t;
}

/// Smallest distance d* such that every point y with d* <= d(x,y) < rmax has
/// |d_G(x,y) / (prefactor d^exponent) - 1| <= tol. Below d* the discretised
/// quasi-metric is not resolved.
inline double resolution_floor(const GreenField& field, std::size_t x, double exponent, double prefactor,
                               double tol, double rmax) {
  const MmSpace& s = field.space();
  auto ball_pts = s.sorted_ball(x, rmax);
  double floor = 0.0;
  for (auto [d, y] : ball_pts) {
    if (y == x) continue;
    double G = field.value(x, y);
    double dev = G > 0 ? std::abs(1.0 / (G * prefactor * std::pow(d, exponent)) - 1.0) : kInf;
    if (dev > tol) floor = d;
  }
  // first sampled distance beyond the last violation
  for (auto [d, y] : ball_pts)
    if (d > floor) return d;
  return rmax;
}

struct TriangleFit {
  double C_T = 1.0;
  std::size_t triples = 0;
  std::size_t skipped = 0;
};

/// C_T = sup d_G(x,y) / (d_G(x,z) + d_G(z,y)) over sampled triples whose
/// pairwise distances are at least `floor`. Half of the triples put z at the
/// table point nearest to the midpoint of x and y.
inline TriangleFit fit_quasi_triangle(const QuasiMetricTable& t, std::size_t triples, Rng& rng, double floor = 0.0) {
  TriangleFit fit;
  std::size_t n = t.points.size();
  require(n >= 3, ErrorKind::Precondition, "need at least three points");
  for (std::size_t k = 0; k < triples; ++k) {
    std::size_t x = rng.index(n), y = rng.index(n), z;
    if (k % 2 == 0) {
      z = rng.index(n);
    } else {
      // z minimising max(d(x,z), d(z,y))
      double best = kInf;
      z = x;
      for (std::size_t c = 0; c < n; ++c) {
        double v = std::max(t.d(x, c), t.d(c, y));
        if (v < best) {
          best = v;
          z = c;
        }
      }
    }
    if (x == y) {
      ++fit.skipped;
      continue;
    }
    if (x == z || y == z) {
      ++fit.triples;  // ratio exactly 1
      continue;
    }
    if (t.d(x, y) < floor || t.d(x, z) < floor || t.d(z, y) < floor) {
      ++fit.skipped;
      continue;
    }
    double den = t.dG(x, z) + t.dG(z, y);
    if (!std::isfinite(den) || !std::isfinite(t.dG(x, y))) {
      ++fit.skipped;
      continue;
    }
    fit.C_T = std::max(fit.C_T, t.dG(x, y) / den);
    ++fit.triples;
  }
  return fit;
}

/// B^G(x, r) = {y : d_G(x, y) < r}.
inline std::vector<std::size_t> g_ball(const GreenField& field, std::size_t x, double r) {
  const MmSpace& s = field.space();
  std::vector<std::size_t> out;
  for (std::size_t y = 0; y < s.size(); ++y) {
    if (y == x) {
      if (r > 0) out.push_back(y);
      continue;
    }
    double G = field.value(x, y);
    if (G > 0 && 1.0 / G < r) out.push_back(y);
  }
  return out;
}

struct GDoublingFit {
  double C_G = 0.0;
  double min_ratio = kInf;
  double median_ratio = 0.0;
  std::size_t used = 0;
  std::size_t escaped = 0;       // radius excluded: B^G(x,2r) leaves the core
  std::size_t below_floor = 0;   // radius excluded: below the resolution floor in d_G units
};

/// C^G = max m(B^G(x, 2r)) / m(B^G(x, r)) over the sample. Radii at or below
/// max(dg_floor, d_G to the nearest neighbour) are skipped.
inline GDoublingFit fit_g_doubling(const GreenField& field, const std::vector<std::size_t>& sources,
                                   const std::vector<double>& radii, double core_fraction = 0.25,
                                   double dg_floor = 0.0) {
  const MmSpace& s = field.space();
  GDoublingFit fit;
  std::vector<double> ratios;
  for (std::size_t x : sources) {
    // (d_G, mass, in_core) for every point, sorted by d_G
    std::vector<std::tuple<double, double, bool>> pts;
    double floor = kInf;
    pts.reserve(s.size());
    for (std::size_t y = 0; y < s.size(); ++y) {
      double dg = 0.0;
      if (y != x) {
        double G = field.value(x, y);
        dg = G > 0 ? 1.0 / G : kInf;
        if (s.dist(x, y) <= (s.is_grid() ? s.grid().spacing * 1.000001 : 0.0)) floor = std::min(floor, dg);
      }
      pts.emplace_back(dg, s.weight(y), s.in_core(y, core_fraction));
    }
    std::sort(pts.begin(), pts.end());
    floor = std::isfinite(floor) ? std::max(floor, dg_floor) : dg_floor;
    auto mass_below = [&](double r, bool& escaped) {
      double m = 0.0;
      escaped = false;
      for (const auto& [dg, w, core] : pts) {
        if (dg >= r) break;
        m += w;
        if (!core) escaped = true;
      }
      return m;
    };
    for (double r : radii) {
      if (r <= floor) {
        ++fit.below_floor;
        continue;
      }
      bool e1, e2;
      double m1 = mass_below(r, e1), m2 = mass_below(2 * r, e2);
      if (e1 || e2) {
        ++fit.escaped;
        continue;
      }
      double q = m2 / m1;
      ratios.push_back(q);
      fit.C_G = std::max(fit.C_G, q);
      fit.min_ratio = std::min(fit.min_ratio, q);
      ++fit.used;
    }
  }
  fit.median_ratio = median(ratios);
  return fit;
}

}  // namespace greenlab
