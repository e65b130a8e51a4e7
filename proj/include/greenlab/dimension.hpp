#pragma once

#include "greenlab/flow.hpp"

#include <functional>
#include <map>
#include <queue>
#include <unordered_map>

namespace greenlab {

inline constexpr int kMaxDimension = 6;

struct RadiusWindow {
  double lo = 0.0, hi = 0.0;
  int samples = 24;
};

/// [4h, core_radius / 2], widened to 13h when that is narrower than half a
/// decade. Graphs use unit spacing.
inline RadiusWindow default_window(const MmSpace& s, double core_radius = -1.0) {
  double h = s.is_grid() ? s.grid().spacing : 1.0;
  if (core_radius <= 0) core_radius = s.is_grid() ? s.grid().half_width() : 26.0;
  return {4 * h, std::max(0.5 * core_radius, 13 * h), 24};
}

inline std::vector<double> window_radii(const RadiusWindow& w) {
  require(w.lo > 0 && w.hi > w.lo, ErrorKind::InvalidArgument, "window needs 0 < lo < hi");
  require(w.hi >= std::sqrt(10.0) * w.lo * (1 - 1e-12), ErrorKind::InvalidArgument,
          "window too narrow: it must span at least half a decade");
  require(w.samples >= 4, ErrorKind::InvalidArgument, "window needs at least 4 radii");
  return log_space(w.lo, w.hi, w.samples);
}

namespace detail {

// Open-ball volumes m(B(x, r)) at increasing radii.
class BallVolumes {
 public:
  BallVolumes(const MmSpace& s, double rmax) : s_(s), rmax_(rmax) {
    if (!s.is_grid()) return;
    const auto& g = s.grid();
    int reach = static_cast<int>(std::ceil(rmax / g.spacing));
    double lim = rmax / g.spacing;
    std::vector<int> k(static_cast<std::size_t>(g.dim), -reach);
    for (;;) {
      long q = 0;
      for (int v : k) q += static_cast<long>(v) * v;
      if (std::sqrt(static_cast<double>(q)) < lim) offsets_.emplace_back(q, k);
      int d = 0;
      while (d < g.dim) {
        if (++k[d] <= reach) break;
        k[d] = -reach;
        ++d;
      }
      if (d == g.dim) break;
    }
    std::sort(offsets_.begin(), offsets_.end());
  }

  std::vector<double> at(std::size_t x, const std::vector<double>& radii) const {
    require(std::is_sorted(radii.begin(), radii.end()), ErrorKind::InvalidArgument, "radii must be increasing");
    require(radii.back() <= rmax_, ErrorKind::InvalidArgument, "radius beyond the prepared range");
    std::vector<double> out;
    out.reserve(radii.size());
    std::size_t r = 0;
    CompensatedSum acc;
    if (s_.is_grid()) {
      const auto& g = s_.grid();
      std::array<int, 12> base{}, cur{};
      s_.multi_index(x, base.data());
      for (const auto& [q, off] : offsets_) {
        double d = std::sqrt(static_cast<double>(q)) * g.spacing;
        while (r < radii.size() && radii[r] <= d) out.push_back(acc.value()), ++r;
        for (int i = 0; i < g.dim; ++i) cur[i] = base[i] + off[i];
        require(s_.in_grid(cur.data()), ErrorKind::Precondition, "ball leaves the sampled grid");
        acc.add(s_.weight(s_.flat_index(cur.data())));
      }
    } else {
      for (const auto& [d, j] : bounded_ball(x)) {
        while (r < radii.size() && radii[r] <= d) out.push_back(acc.value()), ++r;
        acc.add(s_.weight(j));
      }
    }
    while (r < radii.size()) out.push_back(acc.value()), ++r;
    return out;
  }

 private:
  // Dijkstra stopped at rmax
  std::vector<std::pair<double, std::size_t>> bounded_ball(std::size_t x) const {
    if (s_.has_coords()) return s_.sorted_ball(x, rmax_);
    std::unordered_map<std::size_t, double> dist{{x, 0.0}};
    std::vector<std::pair<double, std::size_t>> out;
    using Item = std::pair<double, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    pq.emplace(0.0, x);
    while (!pq.empty()) {
      auto [du, u] = pq.top();
      pq.pop();
      if (du > dist[u]) continue;
      out.emplace_back(du, u);
      for (const auto& nb : s_.adjacency()[u]) {
        double nd = du + nb.length;
        if (nd >= rmax_) continue;
        auto it = dist.find(nb.id);
        if (it == dist.end() || nd < it->second) {
          dist[nb.id] = nd;
          pq.emplace(nd, nb.id);
        }
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  const MmSpace& s_;
  double rmax_;
  std::vector<std::pair<long, std::vector<int>>> offsets_;
};

}  // namespace detail

struct DimensionEstimate {
  std::size_t point = 0;
  int k = 0;             // argmin over 1..6
  double theta = 0.0;    // geometric mean of m(B(x,r)) / (omega_k r^k)
  double residual = 0.0; // rms log-log residual at k
};

struct DimensionReport {
  RadiusWindow window;
  std::vector<DimensionEstimate> points;
  std::array<std::size_t, kMaxDimension + 1> histogram{};  // index k

  double fraction(int k) const {
    return points.empty() ? 0.0 : static_cast<double>(histogram[k]) / static_cast<double>(points.size());
  }
};

inline DimensionEstimate fit_dimension(const std::vector<double>& radii, const std::vector<double>& volumes) {
  DimensionEstimate e;
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    require(volumes[i] > 0, ErrorKind::Numerical, "empty ball inside the window");
    require(i == 0 || volumes[i] >= volumes[i - 1], ErrorKind::Numerical, "non-monotone volume profile");
  }
  double best = kInf;
  for (int k = 1; k <= kMaxDimension; ++k) {
    std::vector<double> y;
    double mean = 0;
    for (std::size_t i = 0; i < radii.size(); ++i) {
      y.push_back(std::log(volumes[i] / (unit_ball_volume(k) * std::pow(radii[i], k))));
      mean += y.back();
    }
    mean /= static_cast<double>(y.size());
    double rss = 0;
    for (double v : y) rss += (v - mean) * (v - mean);
    double rms = std::sqrt(rss / static_cast<double>(y.size()));
    if (rms < best) {
      best = rms;
      e.k = k;
      e.theta = std::exp(mean);
      e.residual = rms;
    }
  }
  return e;
}

/// Points whose sampled radius covers the window.
inline std::vector<std::size_t> window_core(const MmSpace& s, const RadiusWindow& w) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s.interior(i) && s.sampled_radius(i) >= w.hi) out.push_back(i);
  return out;
}

inline DimensionReport dimension_scan(const MmSpace& s, const std::vector<std::size_t>& points, const RadiusWindow& w) {
  auto radii = window_radii(w);
  DimensionReport rep;
  rep.window = w;
  detail::BallVolumes vols(s, w.hi);
  rep.points.resize(points.size());
  parallel_for(points.size(), [&](std::size_t i) {
    std::size_t x = points[i];
    require(s.sampled_radius(x) >= w.hi, ErrorKind::Precondition, "window exceeds the sampled radius at the point");
    rep.points[i] = fit_dimension(radii, vols.at(x, radii));
    rep.points[i].point = x;
  });
  for (const auto& e : rep.points) ++rep.histogram[e.k];
  return rep;
}

inline DimensionEstimate estimate_dimension(const MmSpace& s, std::size_t x, const RadiusWindow& w) {
  return dimension_scan(s, {x}, w).points.front();
}

// ---------------------------------------------------------------------------
// Green asymptotics

struct AsymptoticsReport {
  int k = 0;
  double theta = 0.0;
  double plateau = 0.0;    // median of F(x,r) r^{k-2} over the window
  double expected = 0.0;   // 1 / ((k - 2) omega_k theta)
  double relative_deviation = 0.0;  // |plateau / expected - 1|
  double max_deviation = 0.0;       // worst radius in the window
  std::vector<double> radii, values;
};

/// F(x,r) r^{k-2} against its small-scale limit 1/((k-2) omega_k theta_k(x)).
inline AsymptoticsReport verify_green_asymptotics(const MmSpace& s, std::size_t x, const RadiusWindow& w,
                                                  const TailOptions& opt = {}) {
  auto est = estimate_dimension(s, x, w);
  require(est.k >= 3, ErrorKind::Precondition, "below Green dimension range");
  AsymptoticsReport r;
  r.k = est.k;
  r.theta = est.theta;
  r.expected = 1.0 / ((est.k - 2) * unit_ball_volume(est.k) * est.theta);
  r.radii = window_radii(w);
  TailIntegrator ti(s, x, opt);
  for (double rad : r.radii) {
    r.values.push_back(ti.F(rad) * std::pow(rad, est.k - 2));
    r.max_deviation = std::max(r.max_deviation, std::abs(r.values.back() / r.expected - 1.0));
  }
  r.plateau = median(r.values);
  r.relative_deviation = std::abs(r.plateau / r.expected - 1.0);
  return r;
}

// ---------------------------------------------------------------------------
// Sard-type covering

using PointMap = std::function<Coord(const Coord&)>;

struct SardOptions {
  std::optional<double> modulus;     // supplied eps; fitted when empty
  std::optional<double> lipschitz;   // for the naive bound; fitted from the probes when empty
  int probes = 64;                   // ambient probes per selected ball
  std::uint64_t seed = 1;
};

struct SardReport {
  double delta = 0.0;
  double radius = 0.0;          // ball radius r = delta / 10, so 5r-balls have diameter delta
  std::size_t balls = 0;
  double eps = 0.0;             // modulus used in the bound
  double fitted_eps = 0.0;      // max |Phi(y) - Phi(x)| / |y - x|^{n/k} over probes
  std::size_t violations = 0;   // probes above a supplied modulus
  double bound = 0.0;           // sum omega_k 5^n eps^k r^n
  double naive_bound = 0.0;     // sum omega_k (Lip 5 r)^k
  std::size_t boxes = 0;        // delta-boxes meeting Phi(A)
  double box_estimate = 0.0;    // omega_k rho^k N_rho / 2^k at the image radius rho
};

/// Greedy Vitali selection of disjoint r-balls centred on the sample A (an
/// n x N matrix) and the covering bound for H^k_delta(Phi(A)).
inline SardReport sard_covering_estimate(const Eigen::MatrixXd& A, const PointMap& phi, int k, double delta,
                                         const SardOptions& opt = {}) {
  int n = static_cast<int>(A.rows());
  require(k >= 1 && k < n, ErrorKind::Precondition, "Sard covering needs 1 <= k < n");
  require(delta > 0, ErrorKind::InvalidArgument, "delta must be positive");
  require(A.cols() > 0, ErrorKind::InvalidArgument, "empty sample");
  SardReport rep;
  rep.delta = delta;
  rep.radius = delta / 10.0;
  double r = rep.radius;
  // maximal family of centres at mutual distance >= 2r; the 5r-balls cover A
  std::vector<Eigen::Index> centres;
  std::map<std::vector<long>, std::vector<Eigen::Index>> buckets;
  auto key = [&](const Coord& x) {
    std::vector<long> kk(static_cast<std::size_t>(n));
    for (int d = 0; d < n; ++d) kk[d] = static_cast<long>(std::floor(x[d] / (2 * r)));
    return kk;
  };
  for (Eigen::Index i = 0; i < A.cols(); ++i) {
    Coord x = A.col(i);
    auto kk = key(x);
    bool free = true;
    // neighbouring buckets in every direction
    std::vector<long> cur(kk);
    std::function<void(int)> scan = [&](int d) {
      if (!free) return;
      if (d == n) {
        auto it = buckets.find(cur);
        if (it == buckets.end()) return;
        for (Eigen::Index c : it->second)
          if ((A.col(c) - x).norm() < 2 * r) free = false;
        return;
      }
      for (long o = -1; o <= 1; ++o) {
        cur[d] = kk[d] + o;
        scan(d + 1);
      }
      cur[d] = kk[d];
    };
    scan(0);
    if (free) {
      centres.push_back(i);
      buckets[kk].push_back(i);
    }
  }
  rep.balls = centres.size();
  // modulus and Lipschitz probes in the enlarged balls
  Rng rng(opt.seed);
  double expo = static_cast<double>(n) / k, lip = 0.0;
  for (Eigen::Index c : centres) {
    Coord x = A.col(c), fx = phi(x);
    for (int p = 0; p < opt.probes; ++p) {
      Coord dir(n);
      for (int d = 0; d < n; ++d) dir[d] = rng.normal();
      double len = 5 * r * std::pow(rng.uniform(), 1.0 / n);
      Coord y = x + dir.normalized() * len;
      double diff = (phi(y) - fx).norm();
      double q = diff / std::pow(len, expo);
      rep.fitted_eps = std::max(rep.fitted_eps, q);
      lip = std::max(lip, diff / len);
      if (opt.modulus && q > *opt.modulus) ++rep.violations;
    }
  }
  rep.eps = opt.modulus ? *opt.modulus : rep.fitted_eps;
  double L = opt.lipschitz ? *opt.lipschitz : lip;
  double wk = unit_ball_volume(k);
  rep.bound = static_cast<double>(rep.balls) * wk * std::pow(5.0, n) * std::pow(rep.eps, k) * std::pow(r, n);
  rep.naive_bound = static_cast<double>(rep.balls) * wk * std::pow(L * 5 * r, k);
  // box counts of the image
  auto count_boxes = [&](double side) {
    std::vector<std::vector<long>> keys;
    for (Eigen::Index i = 0; i < A.cols(); ++i) {
      Coord y = phi(A.col(i));
      std::vector<long> kk(static_cast<std::size_t>(y.size()));
      for (Eigen::Index d = 0; d < y.size(); ++d) kk[d] = static_cast<long>(std::floor(y[d] / side));
      keys.push_back(std::move(kk));
    }
    std::sort(keys.begin(), keys.end());
    return static_cast<std::size_t>(std::unique(keys.begin(), keys.end()) - keys.begin());
  };
  rep.boxes = count_boxes(delta);
  double rho = rep.eps * std::pow(5 * r, expo);
  if (rho > 0) rep.box_estimate = wk * std::pow(rho, k) * static_cast<double>(count_boxes(2 * rho)) / std::pow(2.0, k);
  return rep;
}

// ---------------------------------------------------------------------------
// constancy of dimension

struct ConstancyReport {
  std::array<double, kMaxDimension + 1> before{}, after{};  // normalised histograms
  double tv_distance = 0.0;
  int dominant = 0;            // k with the largest mass before
  double lost_mass = 0.0;      // rise of mass below the dominant dimension
  bool violation = false;
  std::size_t samples = 0;
};

/// k-hat histograms of a sample before and after a pushforward, given as
/// node ids.
inline ConstancyReport constancy_diagnostic(const MmSpace& s, const std::vector<std::size_t>& before,
                                            const std::vector<std::size_t>& moved, const RadiusWindow& w,
                                            double tolerance = 0.05, std::size_t min_samples = 100,
                                            double compressibility = 1.0) {
  require(std::isfinite(compressibility) && compressibility > 0, ErrorKind::Precondition,
          "pushforward needs a finite compressibility constant");
  require(before.size() == moved.size(), ErrorKind::InvalidArgument, "before and after samples differ in size");
  require(before.size() >= min_samples, ErrorKind::Precondition, "insufficient pushforward samples per bin");
  std::vector<std::size_t> all(before);
  all.insert(all.end(), moved.begin(), moved.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  auto scan = dimension_scan(s, all, w);
  std::map<std::size_t, int> khat;
  for (const auto& e : scan.points) khat[e.point] = e.k;
  ConstancyReport r;
  r.samples = before.size();
  std::array<std::size_t, kMaxDimension + 1> nb{}, na{};
  for (std::size_t i = 0; i < before.size(); ++i) {
    ++nb[khat[before[i]]];
    ++na[khat[moved[i]]];
  }
  for (int k = 0; k <= kMaxDimension; ++k) {
    r.before[k] = static_cast<double>(nb[k]) / static_cast<double>(before.size());
    r.after[k] = static_cast<double>(na[k]) / static_cast<double>(before.size());
  }
  for (int k = 0; k <= kMaxDimension; ++k) {
    r.tv_distance += 0.5 * std::abs(r.before[k] - r.after[k]);
    if (r.before[k] > r.before[r.dominant]) r.dominant = k;
  }
  double below_before = 0, below_after = 0;
  for (int k = 0; k < r.dominant; ++k) below_before += r.before[k], below_after += r.after[k];
  r.lost_mass = std::max(0.0, below_after - below_before);
  r.violation = r.lost_mass > tolerance;
  return r;
}

/// Positions after the pushforward are read at their nearest grid node.
inline ConstancyReport constancy_diagnostic(const MmSpace& s, const std::vector<std::size_t>& before,
                                            const std::vector<Coord>& after, const RadiusWindow& w,
                                            double tolerance = 0.05, std::size_t min_samples = 100,
                                            double compressibility = 1.0) {
  std::vector<std::size_t> moved;
  for (const auto& y : after) moved.push_back(s.nearest_node(y));
  return constancy_diagnostic(s, before, moved, w, tolerance, min_samples, compressibility);
}

/// Seeds of a flow against their positions at the last recorded time.
/// Seeds that exited or hit a singular set are dropped.
inline ConstancyReport constancy_diagnostic(const MmSpace& s, const FlowResult& fr, const RadiusWindow& w,
                                            double compressibility, double tolerance = 0.05,
                                            std::size_t min_samples = 100) {
  require(!fr.seeds.empty(), ErrorKind::InvalidArgument, "flow has no lattice seeds");
  std::vector<std::size_t> before;
  std::vector<Coord> after;
  for (std::size_t i = 0; i < fr.size(); ++i) {
    if (!fr.valid(i)) continue;
    before.push_back(fr.seeds[i]);
    after.push_back(fr.at(fr.times.size() - 1, i));
  }
  return constancy_diagnostic(s, before, after, w, tolerance, min_samples, compressibility);
}

}  // namespace greenlab
