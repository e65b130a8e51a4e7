#pragma once

#include "greenlab/green.hpp"

namespace greenlab {

// Maximal functions are exact sups over every ball radius in (0, rmax): the
// average over an open ball only changes at the distances of sampled points,
// so the sup is attained on the closed balls {d <= d_k}. The singleton
// ball {x} is included, hence Mf >= f.

namespace detail {

/// Sup over k of sum_{j<=k} f m / sum_{j<=k} m along a list sorted by key,
/// grouping equal keys.
inline double sup_of_averages(const std::vector<std::pair<double, std::size_t>>& sorted, const MmSpace& s,
                              const Vec& f) {
  double best = 0.0, num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    std::size_t j = sorted[i].second;
    num += f[j] * s.weight(j);
    den += s.weight(j);
    if (i + 1 < sorted.size() && sorted[i + 1].first == sorted[i].first) continue;
    if (i == 0) best = f[j];  // singleton, avoids f m / m rounding
    else if (den > 0) best = std::max(best, num / den);
  }
  return best;
}

inline double effective_radius(const MmSpace& s, std::size_t x, double rmax) {
  double r = std::min(rmax, s.sampled_radius(x));
  require(r > 0, ErrorKind::Precondition, "empty ball: evaluation point lies on the boundary layer");
  return r;
}

}  // namespace detail

inline void require_nonnegative(const Vec& f, std::size_t n) {
  require(static_cast<std::size_t>(f.size()) == n, ErrorKind::InvalidArgument, "function size does not match the space");
  require((f.array() >= 0).all(), ErrorKind::InvalidArgument, "maximal functions need f >= 0");
}

/// Mf(x) = sup_{0 < r < rmax} average of f over B(x, r), at each evaluation
/// point. rmax is capped by the sampled radius of x.
inline std::vector<double> hardy_littlewood(const MmSpace& s, const Vec& f, const std::vector<std::size_t>& points,
                                            double rmax = kInf) {
  require_nonnegative(f, s.size());
  std::vector<double> out(points.size());
  parallel_for(points.size(), [&](std::size_t i) {
    std::size_t x = points[i];
    out[i] = detail::sup_of_averages(s.sorted_ball(x, detail::effective_radius(s, x, rmax)), s, f);
  });
  return out;
}

/// M^Gf(x) over G-balls {d_G(x, .) < r}. Admissible radii are those whose
/// G-ball stays inside B(x, rmax): r <= min{d_G(x,y) : d(x,y) >= rmax}.
inline std::vector<double> g_maximal(const GreenField& field, const Vec& f, const std::vector<std::size_t>& points,
                                     double rmax = kInf) {
  const MmSpace& s = field.space();
  require_nonnegative(f, s.size());
  if (!field.lattice_mode()) field.prepare(points);
  std::vector<double> out(points.size());
  parallel_for(points.size(), [&](std::size_t i) {
    std::size_t x = points[i];
    double r = detail::effective_radius(s, x, rmax);
    auto dist = s.distances_from(x);
    double cap = kInf;
    std::vector<std::pair<double, std::size_t>> keyed;
    for (std::size_t y = 0; y < s.size(); ++y) {
      double dg = 0.0;
      if (y != x) {
        double G = field.value(x, y);
        dg = G > 0 ? 1.0 / G : kInf;
      }
      if (dist[y] >= r)
        cap = std::min(cap, dg);
      else
        keyed.emplace_back(dg, y);
    }
    std::sort(keyed.begin(), keyed.end());
    // closed G-balls {d_G <= k} with k < cap are open balls of some radius <= cap
    while (!keyed.empty() && keyed.back().first >= cap) keyed.pop_back();
    out[i] = detail::sup_of_averages(keyed, s, f);
  });
  return out;
}

struct DominationFit {
  double C = 0.0;          // max M^Gf / Mf
  double min_ratio = kInf;
  std::size_t evaluations = 0;
  std::size_t skipped = 0;  // Mf = 0
};

/// C = max over points and functions of M^Gf(x) / Mf(x).
inline DominationFit verify_mg_domination(const GreenField& field, const std::vector<Vec>& functions,
                                          const std::vector<std::size_t>& points, double rmax = kInf) {
  const MmSpace& s = field.space();
  DominationFit fit;
  for (const Vec& f : functions) {
    auto m = hardy_littlewood(s, f, points, rmax);
    auto mg = g_maximal(field, f, points, rmax);
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (m[i] <= 0) {
        ++fit.skipped;
        continue;
      }
      double q = mg[i] / m[i];
      fit.C = std::max(fit.C, q);
      fit.min_ratio = std::min(fit.min_ratio, q);
      ++fit.evaluations;
    }
  }
  return fit;
}

struct MaximalRow {
  std::size_t x, y;
  double lhs, rhs, ratio;
};

struct ScalarMaximalFit {
  double C_M = 0.0;
  std::vector<MaximalRow> rows;
  std::size_t skipped = 0;  // zero right-hand side
};

/// C_M = max over pairs of
///   sum_w f(w) |grad G_x|(w) |grad G_y|(w) m_w / (G(x,y) (Mf(x) + Mf(y))).
inline ScalarMaximalFit verify_scalar_green_maximal(const GreenField& field, const Vec& f, const PairList& pairs,
                                                    double rmax = kInf) {
  const MmSpace& s = field.space();
  require_nonnegative(f, s.size());
  std::vector<std::size_t> pts;
  for (auto [x, y] : pairs) {
    pts.push_back(x);
    pts.push_back(y);
  }
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  field.prepare(pts);
  auto mf = hardy_littlewood(s, f, pts, rmax);
  auto mf_at = [&](std::size_t p) { return mf[std::lower_bound(pts.begin(), pts.end(), p) - pts.begin()]; };
  ScalarMaximalFit fit;
  std::vector<MaximalRow> rows(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t k) {
    auto [x, y] = pairs[k];
    const Vec& gx = field.column(x).grad;
    const Vec& gy = field.column(y).grad;
    CompensatedSum acc;
    for (std::size_t w = 0; w < s.size(); ++w)
      if (f[w] != 0.0) acc.add(f[w] * gx[w] * gy[w] * s.weight(w));
    double rhs = field.value(x, y) * (mf_at(x) + mf_at(y));
    rows[k] = {x, y, acc.value(), rhs, rhs > 0 ? acc.value() / rhs : 0.0};
  });
  for (const auto& r : rows) {
    if (r.rhs <= 0) {
      ++fit.skipped;
      continue;
    }
    fit.C_M = std::max(fit.C_M, r.ratio);
    fit.rows.push_back(r);
  }
  return fit;
}

}  // namespace greenlab
