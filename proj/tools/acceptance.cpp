// One line per acceptance criterion; exit status 0 iff every criterion passes.
#include "greenlab/harness.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <sstream>

using namespace greenlab;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  // records a named value and whether it satisfied its bound
  void note(const std::string& name, double v, bool ok) {
    if (detail.tellp() > 0) detail << "; ";
    detail << name << "=" << format_number(v) << (ok ? "" : " (FAIL)");
    pass = pass && ok;
  }
};

std::string config_path(const std::string& name) { return std::string(GREENLAB_CONFIG_DIR) + "/" + name + ".toml"; }

std::size_t centre(const MmSpace& s) { return s.nearest_node(Coord::Zero(s.grid().dim)); }

std::size_t shifted(const MmSpace& s, std::size_t x, std::vector<int> dk) {
  std::array<int, 12> k{};
  s.multi_index(x, k.data());
  for (std::size_t d = 0; d < dk.size(); ++d) k[d] += dk[d];
  return s.flat_index(k.data());
}

std::vector<std::size_t> core_sample(const MmSpace& s, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  auto core = s.core_points(0.25);
  std::vector<std::size_t> pts;
  for (std::size_t i = 0; i < count; ++i) pts.push_back(core[rng.index(core.size())]);
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  return pts;
}

double newtonian_dg(int n, double d) { return (n - 2) * n * unit_ball_volume(n) * std::pow(d, n - 2); }

MmSpace unit_grid(int n, double h) { return build_grid_space(n, static_cast<int>(std::lround(2.0 / h)) + 1, h); }

// space, free-lattice operator, Green function and its interpolant
struct Lab {
  MmSpace s;
  LaplaceOperator op;
  GreenField field;
  std::unique_ptr<GreenInterpolant> gi;
  Lab(int n, int side, double h)
      : s(build_grid_space(n, side, h)), op(assemble_laplacian(s, Boundary::Lattice)), field(op, {}) {}
  const GreenInterpolant& interp() {
    if (!gi) gi = std::make_unique<GreenInterpolant>(field);
    return *gi;
  }
  std::vector<std::size_t> ball(double r) const {
    std::vector<std::size_t> out;
    for (auto [d, j] : s.sorted_ball(centre(s), r)) out.push_back(j);
    std::sort(out.begin(), out.end());
    return out;
  }
  Vec maximal_density(const VectorFieldSpec& f) const {
    Vec g = field_density(s, f);
    auto core = s.core_points(0.25);
    auto m = hardy_littlewood(s, g, core);
    Vec Mg = Vec::Zero(s.size());
    for (std::size_t i = 0; i < core.size(); ++i) Mg[core[i]] = m[i];
    return Mg;
  }
};

Lab& r3_fine() {
  static Lab lab(3, 41, 0.05);
  return lab;
}

Lab& r3_coarse() {
  static Lab lab(3, 21, 0.1);
  return lab;
}

Lab& r4() {
  static Lab lab(4, 29, 0.1);
  return lab;
}

VectorFieldSpec field3(FieldKind k, double amplitude = 1.0, double domain = 0.75) {
  FieldParams p;
  p.dim = 3;
  p.amplitude = amplitude;
  p.domain_radius = domain;
  if (k == FieldKind::Constant) p.vector = Coord::Map(std::array<double, 3>{0.3, -0.1, 0.2}.data(), 3);
  return VectorFieldSpec(k, p);
}

PairList core_pairs(const MmSpace& s, std::size_t count, double dmin, double dmax, std::uint64_t seed) {
  Rng rng(seed);
  PairSampling ps;
  ps.count = count;
  ps.dmin = dmin;
  ps.dmax = dmax;
  return sample_core_pairs(s, ps, rng);
}

// ---------------------------------------------------------------------------

void newtonian(Outcome& o) {
  std::vector<double> med;
  for (int side : {21, 41}) {
    double h = 2.0 / (side - 1);
    const auto& f = side == 21 ? r3_coarse().field : r3_fine().field;
    auto pairs = core_pairs(f.space(), 240, 0.3, 0.75, 17);
    auto err = newtonian_errors(f, pairs);
    double worst = *std::max_element(err.begin(), err.end());
    med.push_back(median(err));
    if (side == 21) {
      o.note("pairs", static_cast<double>(pairs.size()), pairs.size() >= 200);
      o.note("min_d/h", 0.3 / h, 0.3 >= 3 * h - 1e-12);
    }
    o.note("max_err_h" + format_number(h), worst, worst <= 0.10);
  }
  o.note("median_ratio_fine/coarse", med[1] / med[0], med[1] <= 0.5 * med[0]);
}

void green_vs_f(Outcome& o) {
  auto pairs = core_pairs(r3_fine().s, 200, 0.3, 0.75, 4);
  auto rep = verify_green_estimates(r3_fine().field, pairs);
  o.note("pairs", static_cast<double>(rep.rows.size()), rep.rows.size() >= 100);
  o.note("G/F_min", rep.ratio_min, rep.ratio_min >= 0.25);
  o.note("G/F_max", rep.ratio_max, rep.ratio_max <= 0.45);
  o.note("gradG/H_min", rep.grad_ratio_min, rep.grad_ratio_min >= 0.5);
  o.note("gradG/H_max", rep.grad_ratio_max, rep.grad_ratio_max <= 0.85);
}

void fubini(Outcome& o) {
  auto s3 = build_grid_space(3, 21, 0.1);
  auto a = verify_integral_identities(s3, centre(s3), 0.6);
  auto s4 = build_grid_space(4, 15, 0.1);
  auto b = verify_integral_identities(s4, centre(s4), 0.5);
  o.note("R3_F", a.residual_F, a.residual_F <= 0.02);
  o.note("R3_H", a.residual_H, a.residual_H <= 0.02);
  o.note("R4_F", b.residual_F, b.residual_F <= 0.02);
  o.note("R4_H", b.residual_H, b.residual_H <= 0.02);
}

void psi(Outcome& o) {
  double w3 = unit_ball_volume(3);
  auto r = psi_tail_comparison([&](double s) { return w3 * s * s * s; }, log_space(0.1, 10.0, 41));
  double dev = std::max(std::abs(r.min_ratio - std::sqrt(kPi)), std::abs(r.max_ratio - std::sqrt(kPi)));
  o.note("max|ratio-sqrt(pi)|", dev, dev <= 1e-4);
}

void quasi_metric_structure(Outcome& o) {
  {
    auto& lab = r3_fine();
    std::size_t c = centre(lab.s);
    double fl = resolution_floor(lab.field, c, 1.0, 4 * kPi, 0.05, 0.75);
    auto t = quasi_metric(lab.field, core_sample(lab.s, 300, 5), 0.15, 1.0);
    Rng rng(6);
    auto tf = fit_quasi_triangle(t, 4000, rng, fl);
    o.note("R3_C_T", tf.C_T, tf.C_T <= 1.05);
    std::vector<double> radii;
    for (double rE = 0.05; rE <= 0.37; rE *= 1.1) radii.push_back(newtonian_dg(3, rE));
    auto gd = fit_g_doubling(lab.field, {c}, radii, 0.25, newtonian_dg(3, fl));
    o.note("R3_C_G", gd.C_G, std::abs(gd.C_G / 8.0 - 1.0) <= 0.10);
  }
  {
    auto& lab = r4();
    std::size_t c = centre(lab.s);
    double fl = resolution_floor(lab.field, c, 2.0, newtonian_dg(4, 1.0), 0.05, 0.74);
    auto t = quasi_metric(lab.field, core_sample(lab.s, 300, 7), 0.3);
    Rng rng(8);
    auto tf = fit_quasi_triangle(t, 4000, rng, fl);
    o.note("R4_C_T", tf.C_T, tf.C_T >= 1.8 && tf.C_T <= 2.05);
    std::vector<double> radii;
    for (double rE = 0.2; rE <= 0.74 / std::sqrt(2.0); rE *= 1.08) radii.push_back(newtonian_dg(4, rE));
    auto gd = fit_g_doubling(lab.field, {c}, radii, 0.25, newtonian_dg(4, fl));
    o.note("R4_C_G", gd.C_G, std::abs(gd.C_G / 4.0 - 1.0) <= 0.10);
  }
  for (int n : {3, 4}) {
    auto s = n == 3 ? build_grid_space(3, 21, 0.1) : build_grid_space(4, 11, 0.2);
    auto op = assemble_laplacian(s, Boundary::Lattice);
    GreenField g(op, {});
    Rng rng(7);
    std::vector<Vec> fs;
    for (int k = 0; k < 20; ++k) {
      Vec f(s.size());
      for (Eigen::Index i = 0; i < f.size(); ++i) f[i] = rng.uniform() < 0.3 ? rng.uniform(0.0, 5.0) : 0.0;
      fs.push_back(std::move(f));
    }
    auto dom = verify_mg_domination(g, fs, core_sample(s, 40, 6));
    o.note("R" + std::to_string(n) + "_MG/M", dom.C, dom.evaluations > 0 && dom.C <= 1.2);
  }
}

void maximal_estimates(Outcome& o) {
  auto scalar = [](double h) {
    auto s = unit_grid(3, h);
    auto op = assemble_laplacian(s, Boundary::Lattice);
    GreenField g(op, {});
    auto at = [&](std::vector<double> p) { return s.nearest_node(Coord::Map(p.data(), 3)); };
    std::vector<std::vector<double>> xs = {{0, 0, 0}, {0.2, -0.2, 0}, {-0.4, 0, 0.2}};
    std::vector<std::vector<double>> ys = {{0.4, 0, 0}, {0, 0.4, 0.4}, {-0.2, 0.2, -0.4}, {0.6, 0.2, 0}};
    PairList pairs;
    for (const auto& x : xs)
      for (const auto& y : ys) pairs.emplace_back(at(x), at(y));
    Vec f = Vec::Zero(s.size());
    for (std::size_t j : s.core_points(0.25)) f[j] = 1.0;
    return verify_scalar_green_maximal(g, f, pairs).C_M;
  };
  double c2 = scalar(0.2), c1 = scalar(0.1);
  o.note("scalar_C_M_h0.1", c1, std::isfinite(c1) && c1 > 0);
  o.note("scalar_C_M_change", std::abs(c2 / c1 - 1.0), std::abs(c2 / c1 - 1.0) <= 0.25);
  auto vector = [](double h, FieldKind k) {
    Lab lab(3, static_cast<int>(std::lround(2.0 / h)) + 1, h);
    auto coarse = unit_grid(3, 0.2);
    std::vector<Coord> pts;
    for (auto [d, j] : coarse.sorted_ball(centre(coarse), 0.61)) pts.push_back(coarse.coord(j));
    PairList pairs;
    for (std::size_t a = 0; a < pts.size(); ++a)
      for (std::size_t b = a + 1; b < pts.size(); ++b)
        if ((pts[a] - pts[b]).norm() >= 0.39) pairs.emplace_back(lab.s.nearest_node(pts[a]), lab.s.nearest_node(pts[b]));
    auto f = field3(k);
    return verify_vector_maximal(lab.interp(), lab.s, f, 0.0, pairs, lab.maximal_density(f));
  };
  auto sc = vector(0.2, FieldKind::Shear), sf = vector(0.1, FieldKind::Shear);
  o.note("vector_C_M_h0.1", sf.C_M, std::isfinite(sf.C_M) && sf.C_M > 0);
  o.note("vector_C_M_change", std::abs(sc.C_M / sf.C_M - 1.0), std::abs(sc.C_M / sf.C_M - 1.0) <= 0.25);
  auto rot = vector(0.2, FieldKind::Rotation), cst = vector(0.2, FieldKind::Constant);
  o.note("rotation_lhs", rot.rigid_residual, rot.rigid_residual <= 1e-12);
  o.note("constant_lhs", cst.rigid_residual, cst.rigid_residual <= 1e-12);
}

void heat(Outcome& o) {
  {
    auto s = build_grid_space(3, 13, 0.1);
    auto op = assemble_laplacian(s, Boundary::Dirichlet);
    std::size_t c = centre(s);
    std::vector<std::pair<std::size_t, std::size_t>> pairs{{c, shifted(s, c, {2, 0, 0})}, {c, shifted(s, c, {1, 1, 1})}};
    double worst = 0;
    for (HeatBackend b : {HeatBackend::SpectralDense, HeatBackend::SpectralTensor}) {
      HeatOptions ho;
      ho.backend = b;
      HeatKernel hk(op, ho);
      worst = std::max(worst, verify_heat_properties(hk, {0.1, 0.1}, pairs).semigroup_residual);
    }
    o.note("semigroup", worst, worst <= 1e-8);
  }
  {
    auto s = build_grid_space(3, 11, 0.1);
    auto op = assemble_laplacian(s, Boundary::Dirichlet);
    HeatOptions d, st;
    d.backend = HeatBackend::SpectralDense;
    st.backend = HeatBackend::Stepping;
    HeatKernel hd(op, d), hs(op, st);
    double worst = 0;
    for (std::size_t x : s.core_points(0.25)) {
      Vec pd = hd.column(0.02, x), ps = hs.column(0.02, x);
      for (std::size_t y : s.core_points(0.25)) worst = std::max(worst, std::abs(ps[y] / pd[y] - 1.0));
    }
    o.note("stepping_vs_spectral", worst, worst <= 0.01);
  }
  for (int n : {3, 4}) {
    auto s = n == 3 ? build_grid_space(3, 21, 0.1) : build_grid_space(4, 11, 0.2);
    auto op = assemble_laplacian(s, Boundary::Lattice);
    HeatKernel hk(op);
    std::size_t c = centre(s);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (int k = 0; k <= 3; ++k) {
      std::vector<int> dk(n, 0);
      dk[0] = k;
      pairs.emplace_back(c, shifted(s, c, dk));
      dk[1] = k / 2;
      pairs.emplace_back(c, shifted(s, c, dk));
    }
    auto fit = fit_gaussian_bounds(hk, {0.001, 0.05, 0.1, 0.2, 0.4}, pairs);
    std::string tag = "R" + std::to_string(n);
    o.note(tag + "_C1", fit.C1, !fit.violated && std::isfinite(fit.C1));
    o.note(tag + "_c", fit.c, fit.c == 0.0);
  }
}

void rlf_axioms(Outcome& o) {
  auto& lab = r3_coarse();
  auto seeds = lab.ball(0.4);
  auto c = field3(FieldKind::Constant, 1.0, 0.9);
  auto fr = integrate_rlf(lab.s, c, seeds, 1.0, 0.0, 1);
  Coord bump = Coord::Zero(3);
  bump << 0.1, 0.1, 0.0;
  auto tests = default_test_functions(3, {bump}, 0.3);
  // the coordinate functions have exact difference quotients; the bump carries O(dt^2)
  auto ax = verify_rlf_axioms(fr, c, {tests.begin(), tests.begin() + 3});
  o.note("constant_condition3", ax.condition3_residual, ax.condition3_residual <= 1e-10);
  auto bx = verify_rlf_axioms(fr, c, {tests.back()});
  o.detail << "; bump_condition3_dt" << format_number(fr.dt) << "=" << format_number(bx.condition3_residual);
  // d_G between rotated trajectories
  const auto& gi = lab.interp();
  auto rseeds = lab.ball(0.6);
  auto rot = field3(FieldKind::Rotation, 1.0, 0.9);
  auto fr2 = integrate_rlf(lab.s, rot, rseeds, 1.0, 0.01, 10);
  double worst = 0;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < fr2.size(); i += 7)
    for (std::size_t j = i + 1; j < fr2.size(); j += 5) {
      if ((fr2.at(0, i) - fr2.at(0, j)).norm() < 0.3) continue;
      double d0 = 1.0 / gi.value(fr2.at(0, i) - fr2.at(0, j));
      for (std::size_t k = 1; k < fr2.times.size(); ++k)
        worst = std::max(worst, std::abs(1.0 / gi.value(fr2.at(k, i) - fr2.at(k, j)) / d0 - 1.0));
      ++checked;
    }
  o.note("rotation_pairs", static_cast<double>(checked), checked >= 100);
  o.note("rotation_dG_change", worst, worst <= 0.05);
  CompressibilityOptions orot;
  double Lr = estimate_compressibility(field3(FieldKind::Rotation, 1.0, 0.9), orot).L;
  CompressibilityOptions osh;
  osh.cells = 4;
  osh.T = 0.25;
  double Ls = estimate_compressibility(field3(FieldKind::Shear), osh).L;
  o.note("rotation_L", Lr, Lr >= 0.9 && Lr <= 1.1);
  o.note("shear_L", Ls, Ls >= 0.9 && Ls <= 1.1);
}

void coupled_derivative(Outcome& o) {
  auto& lab = r3_coarse();
  auto f = field3(FieldKind::Shear);
  auto fr = integrate_rlf(lab.s, f, lab.ball(0.6), 0.5, 0.0, 1);
  Rng rng(5);
  auto pairs = sample_seed_pairs(lab.s, fr, 100, 0.3, 1.0, rng);
  auto rep = verify_green_derivative(lab.s, fr, f, lab.interp(), pairs, lab.maximal_density(f));
  o.note("pairs", static_cast<double>(pairs.size()), pairs.size() == 100);
  o.note("relative_residual", rep.max_relative_residual, rep.max_relative_residual <= 0.05);
}

void phi_lusin(Outcome& o) {
  auto& lab = r3_coarse();
  auto seeds = lab.ball(0.85);
  std::size_t c = centre(lab.s);
  std::vector<std::size_t> region;
  for (std::size_t i = 0; i < seeds.size(); ++i)
    if (lab.s.dist(c, seeds[i]) < 0.5) region.push_back(i);
  auto radii = log_space(4 * kPi * 0.2, 4 * kPi * 0.45, 8);
  auto sh = field3(FieldKind::Shear);
  auto fs = integrate_rlf(lab.s, sh, seeds, 1.0, 0.0, 10);
  std::vector<std::size_t> slots;
  std::size_t K = fs.times.size() - 1;
  for (std::size_t q = 0; q <= 5; ++q) slots.push_back(K * q / 5);
  auto tab = phi_star(lab.s, lab.field, lab.interp(), fs, region, radii, slots);
  double phi0 = *std::max_element(tab.phi_zero.begin(), tab.phi_zero.end());
  o.note("max_Phi0", phi0, phi0 <= std::log(2.0));
  std::vector<double> lips;
  double deficit = 0;
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    Rng rng(seed);
    auto l = verify_lusin_lipschitz(lab.s, fs, lab.interp(), tab, 0.1, 5000, 0.2, rng);
    deficit = std::max(deficit, l.deficit);
    lips.push_back(l.lipschitz);
  }
  auto [lo, hi] = std::minmax_element(lips.begin(), lips.end());
  o.note("deficit", deficit, deficit < 0.1);
  o.note("lipschitz", *hi, std::isfinite(*hi));
  o.note("lipschitz_spread", *hi / *lo - 1.0, *hi <= 1.2 * *lo);
}

void transport(Outcome& o) {
  auto cfg = load_config(config_path("transport"));
  auto b = run_experiment(cfg);
  for (const auto& f : b.failures) o.note("error:" + f.message, 0, false);
  for (const auto& c : b.checks)
    if (c.stage == "transport") o.note(c.id, c.value, c.pass);
}

void dimension(Outcome& o) {
  for (int n : {3, 4}) {
    auto s = n == 3 ? build_grid_space(3, 41, 0.1) : build_grid_space(4, 29, 0.1);
    auto w = default_window(s);
    auto core = window_core(s, w);
    auto rep = dimension_scan(s, core, w);
    o.note("R" + std::to_string(n) + "_fraction_k" + std::to_string(n), rep.fraction(n), rep.fraction(n) == 1.0);
    if (n == 3) {
      auto a = verify_green_asymptotics(s, centre(s), w);
      double dev = std::abs(a.plateau / (3.0 / (4.0 * kPi)) - 1.0);
      o.note("R3_plateau_dev", dev, dev <= 0.05);
      FieldParams p;
      p.dim = 3;
      p.plateau = 0.4;
      p.support = 0.65;
      p.domain_radius = 0.65;
      VectorFieldSpec sh(FieldKind::Shear, p);
      std::vector<std::size_t> seeds;
      for (std::size_t i = 0; i < s.size(); ++i)
        if (s.coord(i).norm() <= 0.6 + 1e-9) seeds.push_back(i);
      CompressibilityOptions co;
      co.radius = 0.65;
      co.cells = 4;
      co.T = 0.5;
      double L = estimate_compressibility(sh, co).L;
      auto cd = constancy_diagnostic(s, integrate_rlf(s, sh, seeds, 0.5), w, L);
      o.note("shear_TV", cd.tv_distance, cd.tv_distance <= 0.05);
    }
  }
}

void product_flow(Outcome& o) {
  FieldParams px;
  px.dim = 2;
  px.domain_radius = 1.0;
  VectorFieldSpec rot(FieldKind::Rotation, px);
  FieldParams py;
  py.dim = 1;
  py.vector = Coord::Constant(1, 0.7);
  VectorFieldSpec cst(FieldKind::Constant, py);
  std::vector<Coord> sx, sy;
  Rng rng(3);
  for (int i = 0; i < 6; ++i) {
    Coord a(2);
    a << rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6);
    sx.push_back(a);
    sy.push_back(Coord::Constant(1, rng.uniform(-0.5, 0.5)));
  }
  auto rep = product_flow_check(rot, cst, sx, sy, 1.0, 50);
  o.note("deviation", rep.deviation, rep.deviation <= 1e-8);
}

void determinism(Outcome& o) {
  auto cfg = load_config(config_path("r3_pipeline"));
  auto base = std::filesystem::temp_directory_path() / "greenlab_acceptance";
  std::filesystem::remove_all(base);
  auto a = write_bundle(run_experiment(cfg), base / "a");
  auto b = write_bundle(run_experiment(cfg), base / "b");
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
  };
  std::size_t differ = a == b ? 0 : 1;
  for (const auto& name : a) differ += slurp(base / "a" / name) == slurp(base / "b" / name) ? 0 : 1;
  o.note("files", static_cast<double>(a.size()), a.size() >= 5);
  o.note("differing_files", static_cast<double>(differ), differ == 0);
  std::filesystem::remove_all(base);
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<void(Outcome&)>>> criteria{
      {"Newtonian oracle", newtonian},
      {"Green-F comparison", green_vs_f},
      {"Fubini identities", fubini},
      {"psi comparison", psi},
      {"quasi-metric structure", quasi_metric_structure},
      {"scalar and vector maximal estimates", maximal_estimates},
      {"heat properties", heat},
      {"RLF axioms", rlf_axioms},
      {"coupled derivative", coupled_derivative},
      {"Phi and Lusin", phi_lusin},
      {"transport", transport},
      {"dimension", dimension},
      {"product flows", product_flow},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    auto t0 = std::chrono::steady_clock::now();
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.note(std::string("exception: ") + e.what(), 0, false);
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += o.pass ? 0 : 1;
    std::printf("%s %2zu %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.str().c_str(),
                secs);
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
