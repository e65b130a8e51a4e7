#include <catch2/catch_amalgamated.hpp>

#include "greenlab/green.hpp"

using namespace greenlab;
using Catch::Approx;

namespace {

std::size_t center_of(const MmSpace& s) {
  const auto& g = s.grid();
  std::vector<int> k(g.dim, g.side / 2);
  return s.flat_index(k.data());
}

std::size_t offset(const MmSpace& s, std::size_t x, std::vector<int> dk) {
  std::array<int, 12> k{};
  s.multi_index(x, k.data());
  for (std::size_t d = 0; d < dk.size(); ++d) k[d] += dk[d];
  return s.flat_index(k.data());
}

MmSpace random_graph(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Edge> edges;
  for (std::size_t i = 1; i < n; ++i) edges.push_back({rng.index(i), i, rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)});
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t a = rng.index(n), b = rng.index(n);
    if (a != b) edges.push_back({a, b, rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)});
  }
  std::vector<double> w(n);
  for (auto& v : w) v = rng.uniform(0.2, 3.0);
  return build_graph_space(n, edges, w);
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

// kappa d^beta for the Euclidean Newtonian kernel with unit density
double newtonian_dg(int n, double d) { return (n - 2) * n * unit_ball_volume(n) * std::pow(d, n - 2); }

}  // namespace

TEST_CASE("Newtonian potential at a core pair") {
  auto s = build_grid_space(3, 21, 0.1);
  auto op = assemble_laplacian(s, Boundary::Lattice);
  GreenField f(op, {});
  std::size_t c = center_of(s);
  REQUIRE(f.value(c, offset(s, c, {4, 0, 0})) == Approx(1.0 / (4 * kPi * 0.4)).epsilon(0.10));
  REQUIRE(f.value(c, offset(s, c, {0, 4, 0})) == f.value(offset(s, c, {0, 4, 0}), c));
  REQUIRE(f.column(c).residual < 1e-8);
}

TEST_CASE("Newtonian error shrinks under refinement") {
  std::vector<double> med;
  for (int side : {21, 41}) {
    double h = 2.0 / (side - 1);
    auto s = build_grid_space(3, side, h);
    auto op = assemble_laplacian(s, Boundary::Lattice);
    GreenField f(op, {});
    Rng rng(17);
    PairSampling ps;
    ps.dmin = 0.3;
    ps.dmax = 0.75;
    auto pairs = sample_core_pairs(s, ps, rng);
    REQUIRE(pairs.size() >= 180);
    auto err = newtonian_errors(f, pairs);
    REQUIRE(*std::max_element(err.begin(), err.end()) < 0.10);
    med.push_back(median(err));
  }
  REQUIRE(med[1] <= 0.5 * med[0]);
}

TEST_CASE("Dirichlet solve is symmetric with small residual") {
  auto s = build_grid_space(3, 15, 0.1);
  auto op = assemble_laplacian(s, Boundary::Dirichlet);
  GreenField f(op, {});
  std::size_t c = center_of(s), y = offset(s, c, {2, 1, 0});
  REQUIRE(f.value(c, y) == Approx(f.value(y, c)).epsilon(1e-10));
  REQUIRE(f.column(c).residual < 1e-10);
  REQUIRE(f.value(c, y) > 0);
  // Dirichlet values vanish on the boundary shell
  REQUIRE(f.value(c, 0) == 0.0);
}

TEST_CASE("Green function needs a shift or a boundary") {
  auto g = random_graph(30, 2);
  auto op = assemble_laplacian(g, Boundary::Free);
  REQUIRE_THROWS_AS(GreenField(op, {}), Error);
  try {
    GreenField bad(op, {});
  } catch (const Error& e) {
    REQUIRE(e.kind() == ErrorKind::GreenUndefined);
  }
  GreenOptions o;
  o.c = 0.5;
  GreenField ok(op, o);
  REQUIRE(ok.value(3, 4) > 0);
}

TEST_CASE("cutoff Green functions decrease in eps") {
  auto s = build_grid_space(3, 21, 0.1);
  auto op = assemble_laplacian(s, Boundary::Lattice);
  std::size_t c = center_of(s);
  double prev = kInf;
  for (double eps : {0.0, 0.005, 0.02, 0.08}) {
    GreenOptions o;
    o.eps = eps;
    GreenField f(op, o);
    double v = f.value(c, offset(s, c, {2, 0, 0}));
    REQUIRE(v <= prev);
    prev = v;
  }
}

TEST_CASE("cutoff removes the mass of the heat flow up to eps") {
  // int (G_c - G_c^eps)(x, y) dm(y) = int_0^eps e^{-cs} ds on a conservative graph
  auto g = random_graph(60, 8);
  auto op = assemble_laplacian(g, Boundary::Free);
  double c = 0.5, eps = 0.3;
  GreenOptions a, b;
  a.c = b.c = c;
  b.eps = eps;
  GreenField f0(op, a), fe(op, b);
  for (std::size_t x : {0u, 17u, 42u}) {
    double m = 0;
    for (std::size_t y = 0; y < 60; ++y) m += (f0.value(x, y) - fe.value(x, y)) * g.weight(y);
    REQUIRE(m == Approx((1 - std::exp(-c * eps)) / c).epsilon(1e-8));
  }
}

TEST_CASE("cutoff Green function follows the heat semigroup") {
  auto s = build_grid_space(3, 13, 0.1);
  auto op = assemble_laplacian(s, Boundary::Dirichlet);
  HeatKernel hk(op);
  double alpha = 0.01, t = 0.02;
  GreenOptions oa, ob;
  oa.eps = alpha;
  ob.eps = alpha + t;
  GreenField fa(op, oa, &hk), fb(op, ob, &hk);
  std::size_t c = offset(s, center_of(s), {1, -1, 0});
  Vec shifted = hk.apply(t, fa.column(c).g);
  const Vec& direct = fb.column(c).g;
  REQUIRE((shifted - direct).cwiseAbs().maxCoeff() <= 1e-6 * direct.cwiseAbs().maxCoeff());
}

TEST_CASE("Green function against the F and H profiles in R3") {
  auto s = build_grid_space(3, 41, 0.05);
  auto op = assemble_laplacian(s, Boundary::Lattice);
  GreenField f(op, {});
  Rng rng(4);
  PairSampling ps;
  ps.dmin = 0.3;
  ps.dmax = 0.75;
  auto pairs = sample_core_pairs(s, ps, rng);
  auto rep = verify_green_estimates(f, pairs);
  REQUIRE_FALSE(rep.capped);
  REQUIRE(rep.ratio_median == Approx(1.0 / 3.0).epsilon(0.03));
  REQUIRE(rep.grad_ratio_median == Approx(2.0 / 3.0).epsilon(0.05));
  REQUIRE(rep.grad_ratio_max < 1.0);
  REQUIRE(rep.C2 == Approx(3.0).epsilon(0.05));
}

TEST_CASE("psi against the F profile") {
  std::vector<double> radii = log_space(0.1, 10.0, 25);
  double w3 = unit_ball_volume(3), w4 = unit_ball_volume(4);
  auto r3 = psi_tail_comparison([&](double s) { return w3 * s * s * s; }, radii);
  REQUIRE(std::abs(r3.min_ratio - std::sqrt(kPi)) < 1e-4);
  REQUIRE(std::abs(r3.max_ratio - std::sqrt(kPi)) < 1e-4);
  auto r4 = psi_tail_comparison([&](double s) { return w4 * s * s * s * s; }, radii);
  REQUIRE(r4.max_ratio - r4.min_ratio < 1e-6);
  REQUIRE(r4.min_ratio == Approx(2.0).epsilon(1e-6));
  REQUIRE_THROWS_AS(psi_tail_comparison([](double) { return 1.0; }, radii), Error);
}

TEST_CASE("quasi-metric in R3") {
  auto s = build_grid_space(3, 41, 0.05);
  auto op = assemble_laplacian(s, Boundary::Lattice);
  GreenField f(op, {});
  auto pts = core_sample(s, 300, 5);
  auto t = quasi_metric(f, pts, 0.15, 1.0);
  REQUIRE(t.excluded == 0);
  REQUIRE(t.prefactor_at_exponent == Approx(4 * kPi).epsilon(0.05));
  REQUIRE(t.exponent == Approx(1.0).epsilon(0.05));
  for (Eigen::Index i = 0; i < t.dG.rows(); ++i) REQUIRE(t.dG(i, i) == 0.0);
  Rng rng(6);
  double fl = resolution_floor(f, center_of(s), 1.0, 4 * kPi, 0.05, 0.75);
  REQUIRE(fl >= 0.05);
  REQUIRE(fl <= 0.2);
  auto tf = fit_quasi_triangle(t, 4000, rng, fl);
  REQUIRE(tf.C_T <= 1.05);
  REQUIRE(tf.triples > 1000);
}

TEST_CASE("quasi-metric and Green doubling in R4") {
  const int n = 4;
  auto s = build_grid_space(n, 29, 0.1);
  auto op = assemble_laplacian(s, Boundary::Lattice);
  GreenField f(op, {});
  auto pts = core_sample(s, 300, 7);
  auto t = quasi_metric(f, pts, 0.3);
  REQUIRE(t.exponent == Approx(2.0).margin(0.1));
  std::size_t c = center_of(s);
  double kappa = newtonian_dg(n, 1.0);
  double fl = resolution_floor(f, c, 2.0, kappa, 0.05, 0.74);
  REQUIRE(fl <= 0.6);
  Rng rng(8);
  auto tf = fit_quasi_triangle(t, 4000, rng, fl);
  REQUIRE(tf.C_T >= 1.8);
  REQUIRE(tf.C_T <= 2.05);
  std::vector<double> radii;
  for (double rE = 0.2; rE <= 0.74 / std::sqrt(2.0); rE *= 1.08) radii.push_back(newtonian_dg(n, rE));
  auto gd = fit_g_doubling(f, {c}, radii, 0.25, newtonian_dg(n, fl));
  REQUIRE(gd.used >= 3);
  REQUIRE(gd.below_floor > 0);
  REQUIRE(gd.C_G == Approx(4.0).epsilon(0.10));
  REQUIRE(gd.median_ratio == Approx(4.0).epsilon(0.05));
}

TEST_CASE("Green doubling in R3") {
  auto s = build_grid_space(3, 41, 0.05);
  auto op = assemble_laplacian(s, Boundary::Lattice);
  GreenField f(op, {});
  std::size_t c = center_of(s);
  double fl = resolution_floor(f, c, 1.0, 4 * kPi, 0.05, 0.75);
  std::vector<double> radii;
  for (double rE = 0.05; rE <= 0.37; rE *= 1.1) radii.push_back(newtonian_dg(3, rE));
  auto gd = fit_g_doubling(f, {c}, radii, 0.25, newtonian_dg(3, fl));
  REQUIRE(gd.used >= 5);
  REQUIRE(gd.C_G == Approx(8.0).epsilon(0.10));
  REQUIRE(gd.median_ratio == Approx(8.0).epsilon(0.05));
}

TEST_CASE("structural constants are invariant under rescaling") {
  auto s = build_grid_space(3, 21, 0.1);
  double a = 3.7;
  auto sw = s.with_scaled_weights(a);
  auto sd = s.with_scaled_distances(a);
  auto pts = core_sample(s, 150, 9);
  std::size_t c = center_of(s);
  struct Fit {
    double C_T, C_G, C2;
  };
  auto run = [&](const MmSpace& sp, double dist_scale, double weight_scale) {
    auto op = assemble_laplacian(sp, Boundary::Lattice);
    GreenField f(op, {});
    auto t = quasi_metric(f, pts);
    Rng rng(10);
    double dscale = weight_scale / (dist_scale * dist_scale);  // G ~ d^2 / m(B(d))
    auto tf = fit_quasi_triangle(t, 2000, rng, 0.3 * dist_scale);
    std::vector<double> radii;
    for (double rE = 0.25; rE <= 0.36; rE *= 1.1) radii.push_back(dscale * newtonian_dg(3, rE));
    auto gd = fit_g_doubling(f, {c}, radii);
    Rng prng(11);
    PairSampling ps;
    ps.dmin = 0.3 * dist_scale;
    ps.dmax = 0.5 * dist_scale;
    ps.count = 60;
    auto rep = verify_green_estimates(f, sample_core_pairs(sp, ps, prng));
    return Fit{tf.C_T, gd.C_G, rep.C2};
  };
  Fit base = run(s, 1.0, 1.0), w = run(sw, 1.0, a), d = run(sd, a, 1.0);
  for (const Fit& o : {w, d}) {
    REQUIRE(o.C_T == Approx(base.C_T).epsilon(0.02));
    REQUIRE(o.C_G == Approx(base.C_G).epsilon(0.02));
    REQUIRE(o.C2 == Approx(base.C2).epsilon(0.02));
  }
}
