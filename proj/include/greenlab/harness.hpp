#pragma once

#include "greenlab/config.hpp"
#include "greenlab/dimension.hpp"
#include "greenlab/transport.hpp"

#include <json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <memory>

namespace greenlab {

enum class Stage { Space, Heat, Green, Maximal, Flow, Transport, Dimension };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::Space: return "space";
    case Stage::Heat: return "heat";
    case Stage::Green: return "green";
    case Stage::Maximal: return "maximal";
    case Stage::Flow: return "flow";
    case Stage::Transport: return "transport";
    case Stage::Dimension: return "dimension";
  }
  return "?";
}

/// Statement each check verifies; every report row carries one of these.
namespace anchor {
inline constexpr const char* kDoubling = "volume doubling and Bishop-Gromov monotonicity";
inline constexpr const char* kIdentities = "integral identities for F and H";
inline constexpr const char* kSemigroup = "heat semigroup law";
inline constexpr const char* kGaussian = "two-sided Gaussian heat kernel bounds";
inline constexpr const char* kComparison = "comparison of G with F and of |grad G| with H";
inline constexpr const char* kNewtonian = "Newtonian potential in R^n";
inline constexpr const char* kPsi = "psi-integral comparison with F";
inline constexpr const char* kTriangle = "quasi-triangle inequality for d_G";
inline constexpr const char* kGDoubling = "doubling of d_G balls";
inline constexpr const char* kDomination = "domination of M^G by M";
inline constexpr const char* kScalarMaximal = "scalar maximal estimate for G";
inline constexpr const char* kRlf = "regular Lagrangian flow axioms";
inline constexpr const char* kCompressibility = "compressibility constant";
inline constexpr const char* kDerivative = "derivative of G along coupled flows";
inline constexpr const char* kPhi = "Crippa-De Lellis functional";
inline constexpr const char* kLusin = "Lusin-Lipschitz regularity on Chebyshev sets";
inline constexpr const char* kDuality = "Kantorovich duality";
inline constexpr const char* kSpeed = "constant-speed W2 geodesics";
inline constexpr const char* kDrift = "geodesic drift pushforward";
inline constexpr const char* kEntropy = "entropy convexity with distortion coefficients";
inline constexpr const char* kDimension = "volume-density dimension";
inline constexpr const char* kAsymptotics = "small-scale asymptotics of F";
inline constexpr const char* kConstancy = "constancy of dimension under flows";
}  // namespace anchor

struct Check {
  std::string stage, id, anchor;
  double value = 0.0;
  double lo = -kInf, hi = kInf;  // pass iff lo <= value <= hi
  bool pass = false;
};

struct Failure {
  std::string stage, kind, message, anchor;
};

struct Ledger {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

struct PlotSeries {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
};

struct ReportBundle {
  ExperimentConfig config;
  nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
  std::vector<Check> checks;
  std::vector<Failure> failures;
  std::map<std::string, Ledger> ledgers;
  std::map<std::string, PlotSeries> series;

  bool passed() const {
    if (!failures.empty()) return false;
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }
};

/// Shortest round-trip decimal form; inf and nan spelled out.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline nlohmann::ordered_json json_number(double v) {
  if (std::isfinite(v)) return v;
  return format_number(v);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline std::string str(double v) { return format_number(v); }
inline std::string str(std::size_t v) { return std::to_string(v); }

// Objects the stages share. Operators keep pointers to the space, fields to
// operators, so everything lives behind stable pointers.
struct Pipeline {
  const ExperimentConfig& cfg;
  ReportBundle& out;
  Rng rng;
  std::unique_ptr<MmSpace> space;
  std::unique_ptr<LaplaceOperator> op;
  std::unique_ptr<GreenField> green;
  std::unique_ptr<GreenInterpolant> interp;
  std::string stage;

  Pipeline(const ExperimentConfig& c, ReportBundle& o) : cfg(c), out(o), rng(c.seed) {}

  nlohmann::ordered_json& metrics() { return out.metrics[stage]; }

  void check(const std::string& id, const char* anc, double value, double lo, double hi) {
    Check c{stage, id, anc, value, lo, hi, value >= lo && value <= hi};
    out.checks.push_back(c);
  }
  void check_le(const std::string& id, const char* anc, double value, double hi) { check(id, anc, value, -kInf, hi); }
  void check_ge(const std::string& id, const char* anc, double value, double lo) { check(id, anc, value, lo, kInf); }

  bool euclidean() const { return cfg.space.profile == "uniform" && cfg.space.tail != "power"; }
  int dim() const { return cfg.space.dim; }
  double h() const { return cfg.space.spacing; }
  double half_width() const { return space->grid().half_width(); }
  std::size_t center() const { return space->nearest_node(Coord::Zero(dim())); }

  void require_tail() const {
    if (!space->tail())
      throw Error(ErrorKind::NonParabolic, "non-parabolic assumption violated: no volume tail model for F and H");
    if (space->tail()->exponent <= 2.0) throw Error(ErrorKind::NonParabolic, "non-parabolic assumption violated");
  }

  std::vector<std::size_t> core_sample(std::size_t count) {
    auto core = space->core_points(0.25);
    require(!core.empty(), ErrorKind::Precondition, "core region is empty");
    std::vector<std::size_t> pts;
    for (std::size_t i = 0; i < count; ++i) pts.push_back(core[rng.index(core.size())]);
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    return pts;
  }

  Boundary boundary() const { return cfg.space.boundary == "dirichlet" ? Boundary::Dirichlet : Boundary::Lattice; }

  const GreenField& green_field() {
    if (!green) {
      require_tail();
      op = std::make_unique<LaplaceOperator>(assemble_laplacian(*space, boundary()));
      GreenOptions o;
      o.c = cfg.grounding.c;
      o.eps = cfg.grounding.eps;
      green = std::make_unique<GreenField>(*op, o);
    }
    return *green;
  }

  const GreenInterpolant& green_interpolant() {
    if (!interp) interp = std::make_unique<GreenInterpolant>(green_field());
    return *interp;
  }

  // kappa with d_G ~ kappa d^{p-2} for the power tail a s^p
  double newtonian_prefactor() const {
    const auto& t = *space->tail();
    return (t.exponent - 2.0) * t.exponent * t.coefficient;
  }
};

inline MmSpace build_space(const SpaceConfig& c, const Budgets& b) {
  MeasureLaw law;
  law.density = c.density;
  if (c.profile == "bump") {
    double rho = c.density, a = c.bump_height, w = c.bump_width;
    law.profile = [=](const Coord& x) { return rho * (1.0 + a * std::exp(-x.squaredNorm() / (w * w))); };
  } else if (c.tail == "none") {
    // a profile switches the default tail model off
    double rho = c.density;
    law.profile = [=](const Coord&) { return rho; };
  }
  if (c.tail == "power") law.tail = TailModel{c.tail_coefficient, c.tail_exponent};
  SpaceLimits lim;
  lim.max_points = b.max_points;
  return build_grid_space(c.dim, c.side, c.spacing, law, lim);
}

inline std::size_t offset_node(const MmSpace& s, std::size_t x, int axis, int cells) {
  std::array<int, 12> k{};
  s.multi_index(x, k.data());
  k[axis] += cells;
  require(s.in_grid(k.data()), ErrorKind::Precondition, "offset leaves the grid");
  return s.flat_index(k.data());
}

// ---------------------------------------------------------------------------
// stages

inline void stage_space(Pipeline& p, bool identities) {
  const auto& s = *p.space;
  auto& m = p.metrics();
  m["points"] = s.size();
  m["dimension"] = p.dim();
  m["spacing"] = p.h();
  m["half_width"] = p.half_width();
  m["core_points"] = s.core_points(0.25).size();
  m["tail_model"] = static_cast<bool>(s.tail());
  std::size_t c = p.center();
  double rs = s.sampled_radius(c);
  // doubling at the centre over radii inside the sampled ball
  std::vector<double> radii = log_space(2.5 * p.h(), 0.45 * rs, 6);
  auto dbl = doubling_profile(s, radii, {c}, p.dim());
  m["doubling_max_ratio"] = dbl.max_ratio;
  m["doubling_min_ratio"] = dbl.min_ratio;
  m["bishop_gromov_violations"] = dbl.bishop_gromov_violations;
  p.check_le("doubling_constant", anchor::kDoubling, dbl.max_ratio, std::pow(2.0, p.dim()) * 1.5);
  auto& led = p.out.ledgers["volume_profile"];
  led.header = {"r", "volume", "ratio", "anchor"};
  std::vector<double> rr = log_space(p.h(), rs, 16);
  auto vp = volume_profile(s, c, rr);
  for (std::size_t i = 0; i < rr.size(); ++i) {
    double v = vp.volumes[i];
    led.rows.push_back({str(rr[i]), str(v), str(v / (unit_ball_volume(p.dim()) * std::pow(rr[i], p.dim()))),
                        anchor::kDoubling});
  }
  if (identities) {
    p.require_tail();
    double R = 0.6 * p.half_width();
    auto id = verify_integral_identities(s, c, R);
    m["identity_radius"] = R;
    m["identity_residual_F"] = id.residual_F;
    m["identity_residual_H"] = id.residual_H;
    p.check_le("identity_F", anchor::kIdentities, id.residual_F, p.cfg.tolerances.fubini);
    p.check_le("identity_H", anchor::kIdentities, id.residual_H, p.cfg.tolerances.fubini);
  }
}

inline void stage_heat(Pipeline& p) {
  const auto& s = *p.space;
  const auto& hc = p.cfg.heat;
  auto& m = p.metrics();
  std::size_t c = p.center();
  int reach = std::min(hc.pair_cells, s.grid().side / 2 - 1);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (int k = 0; k <= reach; ++k) pairs.emplace_back(c, offset_node(s, c, 0, k));
  auto dir = assemble_laplacian(s, Boundary::Dirichlet);
  HeatKernel hk(dir);
  m["backend"] = to_string(hk.backend());
  auto rep = verify_heat_properties(hk, hc.times, pairs);
  m["semigroup_residual"] = rep.semigroup_residual;
  m["symmetry_residual"] = rep.symmetry_residual;
  m["max_mass"] = rep.max_mass;
  m["positivity_violation"] = rep.positivity_violation;
  p.check_le("semigroup_residual", anchor::kSemigroup, rep.semigroup_residual, p.cfg.tolerances.semigroup);
  p.check_le("symmetry_residual", anchor::kSemigroup, rep.symmetry_residual, 1e-10);
  p.check_le("mass", anchor::kSemigroup, rep.max_mass, 1.0 + 1e-10);
  auto& led = p.out.ledgers["heat_pairs"];
  led.header = {"x", "y", "t", "spectral", "stepping", "relative_difference", "anchor"};
  if (hc.stepping) {
    HeatOptions so;
    so.backend = HeatBackend::Stepping;
    HeatKernel hs(dir, so);
    double t = hc.times.front(), worst = 0.0;
    Vec a = hk.column(t, c), b = hs.column(t, c);
    for (auto [x, y] : pairs) {
      double rel = std::abs(b[y] / a[y] - 1.0);
      worst = std::max(worst, rel);
      led.rows.push_back({str(x), str(y), str(t), str(a[y]), str(b[y]), str(rel), anchor::kSemigroup});
    }
    m["stepping_difference"] = worst;
    p.check_le("stepping_difference", anchor::kSemigroup, worst, p.cfg.tolerances.stepping);
  }
  if (p.cfg.space.profile == "uniform") {
    auto lat = assemble_laplacian(s, Boundary::Lattice);
    HeatKernel hl(lat);
    auto fit = fit_gaussian_bounds(hl, hc.gaussian_times, pairs);
    m["gaussian_C1"] = detail::json_number(fit.C1);
    m["gaussian_c"] = fit.c;
    m["gaussian_used"] = fit.used;
    m["gaussian_excluded"] = fit.excluded;
    p.check("gaussian_bounds_hold", anchor::kGaussian, fit.violated ? 0.0 : 1.0, 1.0, 1.0);
    p.check_le("gaussian_C1", anchor::kGaussian, fit.C1, 1e6);
    p.check_le("gaussian_c", anchor::kGaussian, fit.c, 0.0);
  }
}

inline void stage_green(Pipeline& p) {
  const auto& gc = p.cfg.green;
  const auto& field = p.green_field();
  const auto& s = *p.space;
  auto& m = p.metrics();
  int n = p.dim();
  m["boundary"] = to_string(p.boundary());
  m["c"] = field.c();
  m["eps"] = field.eps();
  PairSampling ps;
  ps.count = gc.pairs;
  ps.dmin = gc.dmin;
  ps.dmax = gc.dmax;
  auto pairs = sample_core_pairs(s, ps, p.rng);
  auto est = verify_green_estimates(field, pairs);
  m["pairs"] = est.rows.size();
  m["C2"] = est.C2;
  m["ratio_min"] = est.ratio_min;
  m["ratio_median"] = est.ratio_median;
  m["ratio_max"] = est.ratio_max;
  m["grad_ratio_min"] = est.grad_ratio_min;
  m["grad_ratio_median"] = est.grad_ratio_median;
  m["grad_ratio_max"] = est.grad_ratio_max;
  p.check_le("C2", anchor::kComparison, est.C2, 1e6);
  auto& led = p.out.ledgers["green_pairs"];
  led.header = {"x", "y", "d", "F", "G", "ratio", "H", "grad", "grad_ratio", "anchor"};
  auto rows = est.rows;
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return std::tie(a.d, a.x, a.y) < std::tie(b.d, b.x, b.y);
  });
  auto& ser = p.out.series["green_ratio"];
  ser.columns = {"d", "G_over_F", "grad_over_H"};
  for (const auto& r : rows) {
    led.rows.push_back({str(r.x), str(r.y), str(r.d), str(r.F), str(r.G), str(r.ratio), str(r.H), str(r.grad),
                        str(r.grad_ratio), anchor::kComparison});
    ser.rows.push_back({r.d, r.ratio, r.grad_ratio});
  }
  bool newtonian = p.euclidean() && n >= 3 && field.c() == 0.0 && field.eps() == 0.0;
  if (newtonian) {
    // analytic ratios 1/n and (n-1)/n
    double a = 1.0 / n, b = (n - 1.0) / n;
    p.check("ratio_min", anchor::kComparison, est.ratio_min, 0.75 * a, 1.35 * a);
    p.check("ratio_max", anchor::kComparison, est.ratio_max, 0.75 * a, 1.35 * a);
    p.check("grad_ratio_min", anchor::kComparison, est.grad_ratio_min, 0.75 * b, 1.275 * b);
    p.check("grad_ratio_max", anchor::kComparison, est.grad_ratio_max, 0.75 * b, 1.275 * b);
    auto err = newtonian_errors(field, pairs);
    double worst = *std::max_element(err.begin(), err.end());
    m["newtonian_max_error"] = worst;
    m["newtonian_median_error"] = median(err);
    p.check_le("newtonian_max_error", anchor::kNewtonian, worst, p.cfg.tolerances.newtonian);
  }
  // psi against F for the tail law
  const auto tail = *s.tail();
  auto psi = psi_tail_comparison([&](double r) { return tail(r); }, log_space(0.1, 10.0, 25));
  m["psi_ratio_min"] = psi.min_ratio;
  m["psi_ratio_max"] = psi.max_ratio;
  p.check_le("psi_ratio_spread", anchor::kPsi, psi.max_ratio / psi.min_ratio - 1.0, 1e-4);
  // quasi-metric
  std::size_t c = p.center();
  double kappa = p.newtonian_prefactor(), beta = tail.exponent - 2.0;
  double fl = 0.0;
  if (p.euclidean()) fl = resolution_floor(field, c, beta, kappa, 0.05, 0.75 * p.half_width());
  auto pts = p.core_sample(gc.points);
  auto tab = quasi_metric(field, pts, fl);
  m["quasi_metric_points"] = pts.size();
  m["resolution_floor"] = fl;
  m["dG_exponent"] = tab.exponent;
  m["dG_prefactor"] = tab.prefactor;
  m["excluded_pairs"] = tab.excluded;
  auto tf = fit_quasi_triangle(tab, gc.triples, p.rng, fl);
  m["C_T"] = tf.C_T;
  m["triples"] = tf.triples;
  p.check("C_T", anchor::kTriangle, tf.C_T, 1.0, 1e6);
  // G-doubling at the centre, radii from the tail law
  std::vector<double> radii;
  for (double rE = p.h(); rE <= 0.37 * p.half_width(); rE *= 1.1) radii.push_back(kappa * std::pow(rE, beta));
  if (radii.size() >= 2) {
    auto gd = fit_g_doubling(field, {c}, radii, 0.25, kappa * std::pow(fl, beta));
    m["C_G"] = gd.C_G;
    m["G_doubling_median"] = gd.median_ratio;
    m["G_doubling_used"] = gd.used;
    p.check_ge("G_doubling_used", anchor::kGDoubling, static_cast<double>(gd.used), 1.0);
    if (p.euclidean())
      p.check("C_G", anchor::kGDoubling, gd.C_G, 0.9 * std::pow(2.0, n / beta), 1.1 * std::pow(2.0, n / beta));
  }
}

inline void stage_maximal(Pipeline& p) {
  const auto& mc = p.cfg.maximal;
  const auto& field = p.green_field();
  const auto& s = *p.space;
  auto& m = p.metrics();
  auto pts = p.core_sample(mc.points);
  std::vector<Vec> fs;
  for (std::size_t k = 0; k < mc.functions; ++k) {
    Vec f(s.size());
    for (Eigen::Index i = 0; i < f.size(); ++i) f[i] = p.rng.uniform() < 0.3 ? p.rng.uniform(0.0, 5.0) : 0.0;
    fs.push_back(std::move(f));
  }
  auto dom = verify_mg_domination(field, fs, pts);
  m["domination_C"] = dom.C;
  m["domination_evaluations"] = dom.evaluations;
  p.check_le("domination_C", anchor::kDomination, dom.C, p.cfg.tolerances.mg_domination);
  // scalar estimate with f the indicator of the core
  Vec f = Vec::Zero(s.size());
  for (std::size_t j : s.core_points(0.25)) f[j] = 1.0;
  PairSampling ps;
  ps.count = 12;
  ps.dmin = 2 * p.h();
  ps.dmax = 0.5 * p.half_width();
  ps.max_sources = 3;
  auto pairs = sample_core_pairs(s, ps, p.rng);
  auto fit = verify_scalar_green_maximal(field, f, pairs);
  m["C_M"] = fit.C_M;
  m["scalar_pairs"] = fit.rows.size();
  p.check("C_M", anchor::kScalarMaximal, fit.C_M, 1e-12, 1e6);
  auto& led = p.out.ledgers["scalar_maximal"];
  led.header = {"x", "y", "lhs", "rhs", "ratio", "anchor"};
  for (const auto& r : fit.rows)
    led.rows.push_back({str(r.x), str(r.y), str(r.lhs), str(r.rhs), str(r.ratio), anchor::kScalarMaximal});
}

inline VectorFieldSpec make_field(const std::string& kind, int n, double amplitude, double alpha,
                                  const std::vector<double>& vec, double plateau, double support, double domain) {
  FieldParams fp;
  fp.dim = n;
  fp.amplitude = amplitude;
  fp.alpha = alpha;
  fp.plateau = plateau;
  fp.support = support;
  fp.domain_radius = domain;
  FieldKind k = field_kind_from_string(kind);
  if (k == FieldKind::Constant || k == FieldKind::OtDrift) {
    require(static_cast<int>(vec.size()) == n, ErrorKind::Config, "config: flow.vector must have space.dim entries");
    fp.vector = Coord::Map(vec.data(), n);
  }
  return VectorFieldSpec(k, fp);
}

inline std::vector<std::size_t> ball_nodes(const MmSpace& s, std::size_t c, double r) {
  std::vector<std::size_t> out;
  for (auto [d, j] : s.sorted_ball(c, std::nextafter(r, kInf))) out.push_back(j);
  std::sort(out.begin(), out.end());
  return out;
}

inline void stage_flow(Pipeline& p) {
  const auto& fc = p.cfg.flow;
  const auto& s = *p.space;
  const auto& field = p.green_field();
  const auto& gi = p.green_interpolant();
  auto& m = p.metrics();
  int n = p.dim();
  double hw = p.half_width();
  auto f = make_field(fc.field, n, fc.amplitude, fc.alpha, fc.vector, fc.plateau, fc.support, hw);
  m["field"] = fc.field;
  m["sup_norm"] = f.sup_norm();
  std::size_t c = p.center();
  auto seeds = ball_nodes(s, c, fc.seed_radius);
  auto fr = integrate_rlf(s, f, seeds, fc.T, fc.dt, 1);
  m["seeds"] = seeds.size();
  m["dt"] = fr.dt;
  m["steps"] = fr.steps;
  std::size_t invalid = 0;
  for (std::size_t i = 0; i < fr.size(); ++i) invalid += fr.valid(i) ? 0 : 1;
  m["invalid_seeds"] = invalid;
  // condition 3 with coordinate functions and one bump
  Coord bump = Coord::Zero(n);
  bump[0] = 0.2;
  auto rlf = verify_rlf_axioms(fr, f, default_test_functions(n, {bump}, 0.3));
  m["condition3_residual"] = rlf.condition3_residual;
  m["speed_violation"] = rlf.speed_violation;
  p.check_le("condition3_residual", anchor::kRlf, rlf.condition3_residual, p.cfg.tolerances.condition3);
  p.check_le("speed_violation", anchor::kRlf, rlf.speed_violation, 1e-12);
  // compressibility over the field's support
  CompressibilityOptions co;
  co.radius = f.cutoff_applies() ? fc.support : std::min(fc.seed_radius, hw);
  co.cells = fc.compressibility_cells;
  co.T = fc.T;
  co.seed = p.cfg.seed;
  auto cr = estimate_compressibility(f, co);
  m["compressibility_L"] = cr.L;
  m["compressibility_min_ratio"] = cr.min_ratio;
  bool div_free = f.rigid() || f.kind() == FieldKind::Shear;
  if (div_free) p.check("compressibility_L", anchor::kCompressibility, cr.L, 1.0 - p.cfg.tolerances.compressibility,
                        1.0 + p.cfg.tolerances.compressibility);
  // derivative of G along pairs of trajectories
  Vec g = field_density(s, f);
  auto core = s.core_points(0.25);
  auto mg = hardy_littlewood(s, g, core);
  Vec Mg = Vec::Zero(s.size());
  for (std::size_t i = 0; i < core.size(); ++i) Mg[core[i]] = mg[i];
  auto pp = sample_seed_pairs(s, fr, fc.pairs, 0.3 * hw, hw, p.rng);
  auto dr = verify_green_derivative(s, fr, f, gi, pp, Mg);
  double residual = f.rigid() ? (dr.max_abs_derivative > 0 ? dr.max_abs_residual / dr.max_abs_derivative
                                                            : (dr.max_abs_residual <= 1e-12 ? 0.0 : kInf))
                              : dr.max_relative_residual;
  m["derivative_pairs"] = pp.size();
  m["derivative_max_abs_residual"] = dr.max_abs_residual;
  m["derivative_max_abs"] = dr.max_abs_derivative;
  m["derivative_relative_residual"] = residual;
  p.check_le("derivative_relative_residual", anchor::kDerivative, residual, p.cfg.tolerances.green_derivative);
  // Phi* on the region and the Lusin set
  std::vector<std::size_t> region;
  for (std::size_t i = 0; i < seeds.size(); ++i)
    if (s.dist(c, seeds[i]) < fc.region_radius) region.push_back(i);
  double kappa = p.newtonian_prefactor(), beta = s.tail()->exponent - 2.0;
  auto radii = log_space(kappa * std::pow(0.2 * hw, beta), kappa * std::pow(0.45 * hw, beta), 8);
  std::vector<std::size_t> slots;
  std::size_t K = fr.times.size() - 1;
  for (std::size_t q = 0; q <= 5; ++q) slots.push_back(K * q / 5);
  auto tab = phi_star(s, field, gi, fr, region, radii, slots);
  double phi0 = 0.0, phimax = 0.0;
  for (double v : tab.phi_zero) phi0 = std::max(phi0, v);
  for (double v : tab.phi_star) phimax = std::max(phimax, v);
  m["phi_region"] = region.size();
  m["phi_radii"] = tab.radii.size();
  m["phi_zero_max"] = phi0;
  m["phi_star_max"] = phimax;
  m["phi_star_l2"] = tab.l2;
  p.check_ge("phi_radii", anchor::kPhi, static_cast<double>(tab.radii.size()), 1.0);
  p.check_le("phi_zero_max", anchor::kPhi, phi0, std::log(2.0));
  auto lr = verify_lusin_lipschitz(s, fr, gi, tab, fc.lusin_eps, 5000, 0.2 * hw, p.rng);
  m["lusin_eps"] = lr.eps;
  m["lusin_threshold"] = lr.threshold;
  m["lusin_deficit"] = lr.deficit;
  m["lusin_lipschitz"] = lr.lipschitz;
  m["lusin_pointwise_C"] = lr.pointwise_C;
  m["lusin_envelope"] = detail::json_number(lr.envelope);
  m["lusin_pairs"] = lr.pairs;
  p.check_le("lusin_deficit", anchor::kLusin, lr.deficit, lr.eps);
  p.check_le("lusin_lipschitz", anchor::kLusin, lr.lipschitz, lr.envelope);
  auto& led = p.out.ledgers["phi_star"];
  led.header = {"x", "phi_star", "phi_zero", "in_lusin_set", "anchor"};
  for (std::size_t a = 0; a < region.size(); ++a)
    led.rows.push_back({str(seeds[region[a]]), str(tab.phi_star[a]), str(tab.phi_zero[a]),
                        tab.phi_star[a] <= lr.threshold ? "1" : "0", anchor::kLusin});
  // histogram of Phi*
  auto& ser = p.out.series["phi_star_histogram"];
  ser.columns = {"bin_lo", "bin_hi", "count"};
  int bins = 12;
  double top = phimax > 0 ? phimax : 1.0;
  std::vector<double> counts(bins, 0.0);
  for (double v : tab.phi_star) counts[std::min(bins - 1, static_cast<int>(v / top * bins))] += 1;
  for (int b = 0; b < bins; ++b) ser.rows.push_back({top * b / bins, top * (b + 1) / bins, counts[b]});
}

// uniform measure on the selected nodes of a plane
inline Vec uniform_on(const MmSpace& s, const std::function<bool(const Coord&)>& keep) {
  Vec mu = Vec::Zero(s.size());
  double count = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (keep(s.coord(i))) mu[i] = 1.0, ++count;
  require(count > 0, ErrorKind::Precondition, "transport instance selects no nodes");
  return mu / count;
}

inline bool on_sublattice(const Coord& x, double step) {
  for (Eigen::Index d = 0; d < x.size(); ++d)
    if (std::abs(x[d] / step - std::round(x[d] / step)) > 1e-9) return false;
  return true;
}

inline void stage_transport(Pipeline& p) {
  const auto& tc = p.cfg.transport;
  auto& m = p.metrics();
  auto plane = build_grid_space(2, tc.side, tc.spacing);
  double h = tc.spacing;
  require(plane.grid().half_width() >= 1.2 - 1e-9, ErrorKind::Config, "config: transport plane must cover [-1.2, 1.2]^2");
  auto block = [&](double x0, double y0) {
    return uniform_on(plane, [&](const Coord& x) {
      return x[0] >= x0 - 1e-9 && x[0] <= x0 + 0.5 + 1e-9 && x[1] >= y0 - 1e-9 && x[1] <= y0 + 0.4 + 1e-9;
    });
  };
  std::vector<double> times{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  auto& led = p.out.ledgers["transport_plans"];
  led.header = {"instance", "i", "j", "mass", "cost", "anchor"};
  for (const auto& inst : tc.instances) {
    auto& mi = m[inst];
    bool rigid = inst == "translation";
    TransportPlan plan = rigid ? solve_w2(plane, block(-0.8, -0.6), block(-0.2, -0.4))
                               : solve_w2(plane, uniform_on(plane, [](const Coord& x) { return x.norm() <= 0.5 + 1e-9; }),
                                          uniform_on(plane, [&](const Coord& x) {
                                            return x.norm() <= 1.0 + 1e-9 && on_sublattice(x, 2 * h);
                                          }));
    mi["atoms"] = {plan.source.mass.size(), plan.target.mass.size()};
    mi["w2"] = plan.w2();
    mi["duality_gap"] = plan.duality_gap;
    mi["marginal_error"] = plan.marginal_error;
    mi["support"] = plan.support.size();
    p.check_le(inst + ".duality_gap", anchor::kDuality, std::abs(plan.duality_gap), p.cfg.tolerances.duality_gap);
    p.check_le(inst + ".marginal_error", anchor::kDuality, plan.marginal_error, 1e-10);
    for (const auto& e : plan.support)
      led.rows.push_back({inst, str(e.i), str(e.j), str(e.mass), str((plan.to(e) - plan.from(e)).squaredNorm()),
                          anchor::kDuality});
    auto sp = geodesic_speed(plan, {0.0, 0.25, 0.5, 0.75, 1.0});
    mi["speed_deviation"] = sp.max_relative_deviation;
    p.check_le(inst + ".speed_deviation", anchor::kSpeed, sp.max_relative_deviation, p.cfg.tolerances.speed);
    GeodesicDrift drift(plan, 2 * h);
    auto pf = verify_geodesic_pushforward(drift, plan, 0.0, 1.0, 40, 0.5);
    mi["pushforward_w2_error"] = pf.w2_error;
    mi["composition_error"] = pf.composition_error;
    mi["drift_conflicts"] = pf.conflicts;
    p.check_le(inst + ".pushforward_w2_error", anchor::kDrift, pf.w2_error, p.cfg.tolerances.pushforward_cells * h);
    auto cd = verify_cd_entropy(plan, tc.entropy_dimension, times, h);
    mi["entropy_worst_slack"] = cd.worst_slack;
    mi["entropy_worst_relative_slack"] = cd.worst_relative_slack;
    mi["entropy_refinement_change"] = cd.refinement_change;
    mi["entropy_refine_advised"] = cd.refine_advised;
    p.check_ge(inst + ".entropy_worst_slack", anchor::kEntropy, cd.worst_slack, -1e-12);
    if (rigid) {
      double eq = 0.0;
      for (double sl : cd.slack) eq = std::max(eq, std::abs(sl));
      p.check_le(inst + ".entropy_equality", anchor::kEntropy, eq, 1e-9);
    }
  }
}

inline void stage_dimension(Pipeline& p) {
  const auto& dc = p.cfg.dimension;
  const auto& s = *p.space;
  auto& m = p.metrics();
  int n = p.dim();
  RadiusWindow w = dc.window_lo > 0 ? RadiusWindow{dc.window_lo, dc.window_hi, dc.window_samples} : default_window(s);
  w.samples = dc.window_samples;
  m["window"] = {w.lo, w.hi, w.samples};
  auto core = window_core(s, w);
  require(!core.empty(), ErrorKind::Precondition, "no point has the dimension window inside its sampled ball");
  std::vector<std::size_t> pts = core;
  if (pts.size() > dc.points) {
    pts.clear();
    for (std::size_t i = 0; i < dc.points; ++i) pts.push_back(core[p.rng.index(core.size())]);
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  }
  auto rep = dimension_scan(s, pts, w);
  m["window_core"] = core.size();
  m["points"] = rep.points.size();
  nlohmann::ordered_json hist = nlohmann::ordered_json::object();
  for (int k = 1; k <= kMaxDimension; ++k) hist[std::to_string(k)] = rep.histogram[k];
  m["histogram"] = hist;
  double tlo = kInf, thi = 0.0;
  for (const auto& e : rep.points) tlo = std::min(tlo, e.theta), thi = std::max(thi, e.theta);
  m["theta_min"] = tlo;
  m["theta_max"] = thi;
  auto& led = p.out.ledgers["dimension_points"];
  led.header = {"x", "k", "theta", "residual", "anchor"};
  for (const auto& e : rep.points)
    led.rows.push_back({str(e.point), std::to_string(e.k), str(e.theta), str(e.residual), anchor::kDimension});
  if (p.euclidean()) {
    p.check("fraction_k_equals_n", anchor::kDimension, rep.fraction(n), 1.0, 1.0);
    p.check("theta_min", anchor::kDimension, tlo, 0.85 * p.cfg.space.density, 1.15 * p.cfg.space.density);
    p.check("theta_max", anchor::kDimension, thi, 0.85 * p.cfg.space.density, 1.15 * p.cfg.space.density);
  }
  // asymptotics of F at the centre
  std::size_t c = p.center();
  if (s.sampled_radius(c) >= w.hi && s.tail() && s.tail()->exponent > 2.0) {
    auto est = estimate_dimension(s, c, w);
    if (est.k >= 3) {
      auto a = verify_green_asymptotics(s, c, w);
      m["asymptotics_k"] = a.k;
      m["asymptotics_plateau"] = a.plateau;
      m["asymptotics_expected"] = a.expected;
      m["asymptotics_deviation"] = a.relative_deviation;
      p.check_le("asymptotics_deviation", anchor::kAsymptotics, a.relative_deviation, p.cfg.tolerances.asymptotics);
    } else {
      m["asymptotics_skipped"] = "below Green dimension range";
    }
  }
  // histograms before and after a flow
  auto& ser = p.out.series["dimension_histogram"];
  ser.columns = {"k", "before", "after"};
  if (dc.flow == "none") {
    for (int k = 1; k <= kMaxDimension; ++k) ser.rows.push_back({double(k), rep.fraction(k), rep.fraction(k)});
    return;
  }
  double reach = p.half_width() - w.hi - 0.5 * p.h();
  require(reach > 2 * p.h(), ErrorKind::Precondition, "window core too small for the constancy flow");
  auto f = make_field(dc.flow, n, 1.0, 0.7, {}, 0.6 * reach, reach, reach);
  auto seeds = ball_nodes(s, c, reach);
  auto fr = integrate_rlf(s, f, seeds, dc.flow_T, dc.flow == "rotation" ? 0.01 : 0.0, 100000);
  CompressibilityOptions co;
  co.radius = reach;
  co.cells = 4;
  co.T = dc.flow_T;
  co.seed = p.cfg.seed;
  double L = estimate_compressibility(f, co).L;
  auto cd = constancy_diagnostic(s, fr, w, L, p.cfg.tolerances.constancy_tv);
  m["constancy_flow"] = dc.flow;
  m["constancy_samples"] = cd.samples;
  m["constancy_L"] = L;
  m["constancy_tv"] = cd.tv_distance;
  m["constancy_lost_mass"] = cd.lost_mass;
  m["constancy_violation"] = cd.violation;
  p.check_le("constancy_tv", anchor::kConstancy, cd.tv_distance, p.cfg.tolerances.constancy_tv);
  p.check("constancy_violation", anchor::kConstancy, cd.violation ? 1.0 : 0.0, 0.0, 0.0);
  for (int k = 1; k <= kMaxDimension; ++k) ser.rows.push_back({double(k), cd.before[k], cd.after[k]});
}

inline const char* stage_anchor(Stage s) {
  switch (s) {
    case Stage::Space: return anchor::kDoubling;
    case Stage::Heat: return anchor::kSemigroup;
    case Stage::Green: return anchor::kComparison;
    case Stage::Maximal: return anchor::kDomination;
    case Stage::Flow: return anchor::kRlf;
    case Stage::Transport: return anchor::kDuality;
    case Stage::Dimension: return anchor::kDimension;
  }
  return "";
}

}  // namespace detail

/// Stages enabled in the config, in pipeline order.
inline std::vector<Stage> enabled_stages(const ExperimentConfig& c) {
  std::vector<Stage> out{Stage::Space};
  if (c.heat.enabled) out.push_back(Stage::Heat);
  if (c.green.enabled) out.push_back(Stage::Green);
  if (c.maximal.enabled) out.push_back(Stage::Maximal);
  if (c.flow.enabled) out.push_back(Stage::Flow);
  if (c.transport.enabled) out.push_back(Stage::Transport);
  if (c.dimension.enabled) out.push_back(Stage::Dimension);
  return out;
}

/// Runs the enabled stages in order. A module error becomes a failure record
/// and stops the run; checks recorded before it are kept.
inline ReportBundle run_experiment(const ExperimentConfig& cfg) {
  validate(cfg);
  ReportBundle out;
  out.config = cfg;
  set_thread_count(cfg.threads);
  detail::Pipeline p(cfg, out);
  auto fail = [&](Stage st, const std::string& kind, const std::string& msg) {
    out.failures.push_back({to_string(st), kind, msg, detail::stage_anchor(st)});
  };
  auto stages = enabled_stages(cfg);
  bool identities = cfg.space.identities;
  for (Stage st : stages) {
    p.stage = to_string(st);
    out.metrics[p.stage] = nlohmann::ordered_json::object();
    try {
      switch (st) {
        case Stage::Space:
          p.space = std::make_unique<MmSpace>(detail::build_space(cfg.space, cfg.budgets));
          detail::stage_space(p, identities);
          break;
        case Stage::Heat: detail::stage_heat(p); break;
        case Stage::Green: detail::stage_green(p); break;
        case Stage::Maximal: detail::stage_maximal(p); break;
        case Stage::Flow: detail::stage_flow(p); break;
        case Stage::Transport: detail::stage_transport(p); break;
        case Stage::Dimension: detail::stage_dimension(p); break;
      }
    } catch (const Error& e) {
      fail(st, to_string(e.kind()), e.what());
      break;
    } catch (const std::exception& e) {
      fail(st, "internal", e.what());
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// emission

inline nlohmann::ordered_json summary_json(const ReportBundle& b) {
  nlohmann::ordered_json j;
  j["schema_version"] = b.config.schema_version;
  j["name"] = b.config.name;
  j["seed"] = b.config.seed;
  j["passed"] = b.passed();
  j["metrics"] = b.metrics;
  auto& checks = j["checks"] = nlohmann::ordered_json::array();
  for (const auto& c : b.checks) {
    nlohmann::ordered_json r;
    r["stage"] = c.stage;
    r["id"] = c.id;
    r["anchor"] = c.anchor;
    r["value"] = detail::json_number(c.value);
    r["lo"] = detail::json_number(c.lo);
    r["hi"] = detail::json_number(c.hi);
    r["pass"] = c.pass;
    checks.push_back(r);
  }
  auto& fails = j["failures"] = nlohmann::ordered_json::array();
  for (const auto& f : b.failures) fails.push_back({{"stage", f.stage}, {"kind", f.kind}, {"message", f.message}, {"anchor", f.anchor}});
  return j;
}

inline std::string to_csv(const Ledger& l) {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += detail::csv_field(cells[i]);
    }
    out += '\n';
  };
  line(l.header);
  for (const auto& r : l.rows) line(r);
  return out;
}

inline Ledger checks_ledger(const ReportBundle& b) {
  Ledger l;
  l.header = {"stage", "id", "value", "lo", "hi", "pass", "anchor"};
  for (const auto& c : b.checks)
    l.rows.push_back({c.stage, c.id, format_number(c.value), format_number(c.lo), format_number(c.hi), c.pass ? "1" : "0",
                      c.anchor});
  return l;
}

inline std::vector<std::string> series_names(const ReportBundle& b) {
  std::vector<std::string> out;
  for (const auto& [k, v] : b.series) out.push_back(k);
  return out;
}

/// Whitespace-separated columns with a '#' header line, rows in the stored
/// order (sorted by the first column where it is an abscissa).
inline std::string emit_plot_data(const ReportBundle& b, const std::string& name) {
  auto it = b.series.find(name);
  if (it == b.series.end()) throw Error(ErrorKind::InvalidArgument, "unknown series '" + name + "'");
  const auto& s = it->second;
  std::string out = "#";
  for (const auto& c : s.columns) out += " " + c;
  out += '\n';
  for (const auto& r : s.rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i) out += ' ';
      out += format_number(r[i]);
    }
    out += '\n';
  }
  return out;
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
  f << text;
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
}

/// summary.json, checks.csv, one CSV per ledger and one .dat per plot series.
/// Returns the written file names in sorted order.
inline std::vector<std::string> write_bundle(const ReportBundle& b, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::string> names;
  auto put = [&](const std::string& name, const std::string& text) {
    write_file(dir / name, text);
    names.push_back(name);
  };
  put("summary.json", summary_json(b).dump(2) + "\n");
  put("checks.csv", to_csv(checks_ledger(b)));
  for (const auto& [name, led] : b.ledgers) put(name + ".csv", to_csv(led));
  for (const auto& [name, ser] : b.series) put(name + ".dat", emit_plot_data(b, name));
  std::sort(names.begin(), names.end());
  return names;
}

}  // namespace greenlab
