#include <catch2/catch_amalgamated.hpp>

#include "greenlab/flow.hpp"

using namespace greenlab;
using Catch::Approx;

namespace {

Coord pt(std::initializer_list<double> v) {
  Coord x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double a : v) x[i++] = a;
  return x;
}

VectorFieldSpec make(FieldKind k, double amplitude = 1.0, double domain = 0.9) {
  FieldParams p;
  p.dim = 3;
  p.amplitude = amplitude;
  p.domain_radius = domain;
  if (k == FieldKind::Constant || k == FieldKind::OtDrift) p.vector = pt({0.3, -0.1, 0.2});
  return VectorFieldSpec(k, p);
}

struct Lab {
  MmSpace s;
  LaplaceOperator op;
  GreenField field;
  GreenInterpolant gi;
  explicit Lab(double h)
      : s(build_grid_space(3, static_cast<int>(std::lround(2.0 / h)) + 1, h)),
        op(assemble_laplacian(s, Boundary::Lattice)),
        field(op, {}),
        gi(field) {}
  Lab(const Lab&) = delete;
  std::size_t center() const { return s.nearest_node(Coord::Zero(3)); }
  std::vector<std::size_t> ball(double r) const {
    std::vector<std::size_t> out;
    for (auto [d, j] : s.sorted_ball(center(), r)) out.push_back(j);
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

}  // namespace

TEST_CASE("catalogue derivatives") {
  auto rot = make(FieldKind::Rotation);
  auto d = field_derivatives(rot, 0, pt({0.2, -0.4, 0.1}));
  REQUIRE(std::abs(d.divergence) < 1e-15);
  REQUIRE(d.sym_norm < 1e-15);
  auto rad = make(FieldKind::Radial);
  d = field_derivatives(rad, 0, pt({0.1, 0.2, -0.3}));
  REQUIRE(d.divergence == Approx(3.0).epsilon(1e-14));
  REQUIRE(d.sym_norm == Approx(std::sqrt(3.0)).epsilon(1e-14));
  auto sh = make(FieldKind::Shear, 1.0, 0.75);
  d = field_derivatives(sh, 0, pt({0.0, 0.5, 0.0}));
  REQUIRE(d.sym_norm == Approx(0.7 * std::pow(0.5, -0.3) / std::sqrt(2.0)).epsilon(1e-12));
  REQUIRE(std::abs(d.divergence) < 1e-14);
  // analytic Jacobians against finite differences, including the cutoff shells
  Rng rng(1);
  for (FieldKind k : {FieldKind::Rotation, FieldKind::Radial, FieldKind::Shear, FieldKind::OtDrift}) {
    FieldParams p;
    p.dim = 3;
    p.domain_radius = 0.9;
    p.dilation = 1.5;
    p.vector = pt({0.1, 0.0, -0.2});
    VectorFieldSpec f(k, p);
    for (int i = 0; i < 200; ++i) {
      Coord x = pt({rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)});
      if (std::abs(x[1]) < 0.02) continue;
      double t = rng.uniform(0.0, 1.0);
      Mat diff = f.jacobian(t, x) - finite_difference_jacobian(f, t, x);
      REQUIRE(diff.cwiseAbs().maxCoeff() < 1e-6);
      // the shear stream function keeps the field divergence free everywhere
      if (k == FieldKind::Shear) REQUIRE(std::abs(field_derivatives(f, t, x).divergence) < 1e-12);
    }
  }
}

TEST_CASE("catalogue parameter checks") {
  FieldParams p;
  p.dim = 3;
  p.alpha = 0.4;
  REQUIRE_THROWS_AS(VectorFieldSpec(FieldKind::Shear, p), Error);
  p.alpha = 0.7;
  p.domain_radius = 0.6;
  REQUIRE_THROWS_AS(VectorFieldSpec(FieldKind::Shear, p), Error);
  p.domain_radius = 0.9;
  p.plane_j = 0;
  REQUIRE_THROWS_AS(VectorFieldSpec(FieldKind::Rotation, p), Error);
  REQUIRE_THROWS_AS(field_kind_from_string("vortex"), Error);
  REQUIRE(field_kind_from_string("ot_drift") == FieldKind::OtDrift);
}

TEST_CASE("constant and rigid flows") {
  Lab lab(0.1);
  auto seeds = lab.ball(0.4);
  auto c = make(FieldKind::Constant);
  auto fr = integrate_rlf(lab.s, c, seeds, 1.0, 0.0, 1);
  for (std::size_t i = 0; i < fr.size(); ++i) {
    Coord expect = lab.s.coord(seeds[i]) + 1.0 * c.velocity(0, Coord::Zero(3));
    REQUIRE((fr.at(fr.times.size() - 1, i) - expect).norm() < 1e-12);
  }
  auto tests = default_test_functions(3, {pt({0.1, 0.1, 0.0})}, 0.3);
  auto ax = verify_rlf_axioms(fr, c, {tests[0]});
  REQUIRE(ax.condition3_residual <= 1e-10);
  auto rot = make(FieldKind::Rotation);
  auto fr2 = integrate_rlf(lab.s, rot, seeds, 1.0, 0.01, 1);
  double worst = 0;
  std::size_t last = fr2.times.size() - 1;
  for (std::size_t i = 0; i < fr2.size(); i += 7)
    for (std::size_t j = i + 1; j < fr2.size(); j += 5)
      worst = std::max(worst, std::abs((fr2.at(last, i) - fr2.at(last, j)).norm() - (fr2.at(0, i) - fr2.at(0, j)).norm()));
  REQUIRE(worst <= 1e-6);
  auto ax2 = verify_rlf_axioms(fr2, rot, tests);
  REQUIRE(ax2.condition3_residual < 1e-4);
}

TEST_CASE("shear trajectories respect the speed bound") {
  Lab lab(0.1);
  auto sh = make(FieldKind::Shear, 1.0, 0.75);
  auto fr = integrate_rlf(lab.s, sh, lab.ball(0.8), 1.0);
  auto ax = verify_rlf_axioms(fr, sh, default_test_functions(3, {}, 0.3));
  REQUIRE(ax.speed_violation <= 1e-12);
  REQUIRE(ax.excluded_seeds > 0);  // the plane x_2 = 0 is flagged
  REQUIRE(std::isfinite(ax.condition3_residual));
  REQUIRE_THROWS_AS(integrate_rlf(lab.s, sh, lab.ball(0.3), 1.0, 0.5), Error);
}

TEST_CASE("RK4 order and reversibility") {
  std::vector<Coord> starts = {pt({0.1, 0.2, 0.3}), pt({-0.4, 0.1, 0.0}), pt({0.3, -0.5, 0.2})};
  for (FieldKind k : {FieldKind::Rotation, FieldKind::Radial}) {
    auto f = make(k);
    REQUIRE(step_halving_order(f, starts, 1.0, 0.1) >= 3.5);
    REQUIRE(reversibility_error(f, starts, 1.0, 100) <= 1e-6);
  }
}

TEST_CASE("compressibility from cell histograms") {
  CompressibilityOptions o;
  auto rot = estimate_compressibility(make(FieldKind::Rotation), o);
  REQUIRE(rot.L >= 0.9);
  REQUIRE(rot.L <= 1.1);
  REQUIRE(rot.min_ratio >= 0.9);
  CompressibilityOptions os;
  os.cells = 4;
  os.T = 0.25;
  auto sh = estimate_compressibility(make(FieldKind::Shear, 1.0, 0.75), os);
  REQUIRE(sh.L >= 0.9);
  REQUIRE(sh.L <= 1.1);
  CompressibilityOptions od;
  od.T = 0.1;
  auto rad = estimate_compressibility(make(FieldKind::Radial), od);
  for (std::size_t k = 0; k < rad.times.size(); ++k)
    REQUIRE(rad.center_density[k] == Approx(std::exp(-3 * rad.times[k])).epsilon(0.15));
}

TEST_CASE("Green function along trajectories") {
  Lab lab(0.1);
  auto seeds = lab.ball(0.6);
  Rng rng(5);
  for (FieldKind k : {FieldKind::Constant, FieldKind::Rotation, FieldKind::Shear}) {
    auto f = make(k, 1.0, 0.75);
    auto fr = integrate_rlf(lab.s, f, seeds, k == FieldKind::Constant ? 0.3 : 0.5, k == FieldKind::Rotation ? 0.01 : 0.0, 1);
    auto pairs = sample_seed_pairs(lab.s, fr, 100, 0.3, 1.0, rng);
    REQUIRE(pairs.size() == 100);
    Vec Mg = lab.maximal_density(f);
    auto rep = verify_green_derivative(lab.s, fr, f, lab.gi, pairs, Mg);
    REQUIRE(rep.checks > 0);
    if (k == FieldKind::Constant) {
      REQUIRE(rep.max_abs_derivative < 1e-12);
      REQUIRE(rep.max_abs_residual < 1e-9);
    } else if (k == FieldKind::Rotation) {
      // the C1 interpolant leaves a first order curvature term in the difference quotient
      REQUIRE(rep.max_abs_residual <= 0.05 * rep.max_abs_derivative);
    } else {
      REQUIRE(rep.max_relative_residual <= 0.05);
    }
  }
}

TEST_CASE("vector maximal estimate") {
  // pairs on the coarse lattice, shared by both resolutions
  auto run = [](double h, FieldKind k) {
    Lab lab(h);
    Lab coarse(0.2);
    PairList pairs;
    std::vector<Coord> pts;
    for (auto [d, j] : coarse.s.sorted_ball(coarse.center(), 0.61)) pts.push_back(coarse.s.coord(j));
    for (std::size_t a = 0; a < pts.size(); ++a)
      for (std::size_t b = a + 1; b < pts.size(); ++b)
        if ((pts[a] - pts[b]).norm() >= 0.39) pairs.emplace_back(lab.s.nearest_node(pts[a]), lab.s.nearest_node(pts[b]));
    auto f = make(k, 1.0, 0.75);
    return verify_vector_maximal(lab.gi, lab.s, f, 0.0, pairs, lab.maximal_density(f));
  };
  auto c = run(0.2, FieldKind::Constant);
  REQUIRE(c.rows.empty());
  REQUIRE(c.rigid_residual == 0.0);
  auto r = run(0.2, FieldKind::Rotation);
  REQUIRE(r.rows.empty());
  REQUIRE(r.rigid_residual <= 1e-12);
  auto coarse = run(0.2, FieldKind::Shear), fine = run(0.1, FieldKind::Shear);
  REQUIRE(std::isfinite(fine.C_M));
  REQUIRE(fine.C_M > 0);
  REQUIRE(coarse.C_M == Approx(fine.C_M).epsilon(0.25));
}

TEST_CASE("Crippa-De Lellis functional and Lusin sets") {
  Lab lab(0.1);
  auto seeds = lab.ball(0.85);
  std::vector<std::size_t> region;
  for (std::size_t i = 0; i < seeds.size(); ++i)
    if (lab.s.dist(lab.center(), seeds[i]) < 0.5) region.push_back(i);
  std::vector<double> radii = log_space(4 * kPi * 0.2, 4 * kPi * 0.45, 8);
  auto slots_of = [](const FlowResult& fr) {
    std::vector<std::size_t> out;
    std::size_t K = fr.times.size() - 1;
    for (std::size_t q = 0; q <= 5; ++q) out.push_back(K * q / 5);
    return out;
  };
  // rigid rotation keeps Phi near its initial value
  auto rot = make(FieldKind::Rotation);
  auto fr = integrate_rlf(lab.s, rot, seeds, 1.0, 0.0, 1);
  auto tr = phi_star(lab.s, lab.field, lab.gi, fr, region, radii, slots_of(fr));
  REQUIRE(tr.radii.size() >= 4);
  for (double v : tr.phi_zero) REQUIRE(v <= std::log(2.0));
  for (double v : tr.phi_star) REQUIRE(v <= std::log(2.0) + 0.05);
  Rng rr(1);
  auto lr = verify_lusin_lipschitz(lab.s, fr, lab.gi, tr, 0.1, 5000, 0.3, rr);
  REQUIRE(lr.lipschitz <= 1.05);
  // shear amplitude sweep
  std::vector<double> norms, integrals;
  std::vector<double> lips;
  for (double A : {0.25, 0.5, 1.0}) {
    auto sh = make(FieldKind::Shear, A, 0.75);
    auto fs = integrate_rlf(lab.s, sh, seeds, 1.0, 0.0, 10);
    auto tab = phi_star(lab.s, lab.field, lab.gi, fs, region, radii, slots_of(fs));
    for (double v : tab.phi_zero) REQUIRE(v <= std::log(2.0));
    Vec g = field_density(lab.s, sh);
    double gi2 = 0;
    for (std::size_t j = 0; j < lab.s.size(); ++j) gi2 += g[j] * g[j] * lab.s.weight(j);
    norms.push_back(tab.l2);
    integrals.push_back(1.0 * std::sqrt(gi2));
    if (A == 1.0) {
      for (std::uint64_t seed : {11u, 12u, 13u}) {
        Rng rng(seed);
        auto l = verify_lusin_lipschitz(lab.s, fs, lab.gi, tab, 0.1, 5000, 0.2, rng);
        REQUIRE(l.deficit < 0.1);
        REQUIRE(std::isfinite(l.lipschitz));
        REQUIRE(l.lipschitz <= l.envelope);
        lips.push_back(l.lipschitz);
      }
    }
  }
  // bound shape ||Phi*|| <= C (1 + int ||g||): the ratio does not grow
  for (std::size_t k = 1; k < norms.size(); ++k)
    REQUIRE(norms[k] / (1 + integrals[k]) <= 1.05 * norms[k - 1] / (1 + integrals[k - 1]));
  auto [lo, hi] = std::minmax_element(lips.begin(), lips.end());
  REQUIRE(*hi <= 1.2 * *lo);
}

TEST_CASE("product flows") {
  FieldParams px;
  px.dim = 2;
  px.domain_radius = 1.0;
  VectorFieldSpec rot(FieldKind::Rotation, px);
  FieldParams py;
  py.dim = 1;
  py.vector = pt({0.7});
  VectorFieldSpec cst(FieldKind::Constant, py);
  std::vector<Coord> sx = {pt({0.3, 0.1}), pt({-0.2, 0.5})}, sy = {pt({0.0}), pt({0.4})};
  auto rep = product_flow_check(rot, cst, sx, sy, 1.0, 50);
  REQUIRE(rep.deviation <= 1e-8);
  REQUIRE(rep.pythagoras <= 1e-14);
  auto two = product_flow_check(cst, cst, sy, sy, 1.0, 10);
  REQUIRE(two.deviation == 0.0);
}
