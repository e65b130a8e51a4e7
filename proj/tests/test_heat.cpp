#include <catch2/catch_amalgamated.hpp>

#include "greenlab/heat.hpp"

#include <filesystem>

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

double gaussian(int n, double t, double d) { return std::pow(4 * kPi * t, -0.5 * n) * std::exp(-d * d / (4 * t)); }

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

}  // namespace

TEST_CASE("one dimensional stencil") {
  auto s = build_grid_space(1, 5, 1.0);
  auto op = assemble_laplacian(s, Boundary::Dirichlet);
  Eigen::MatrixXd L = Eigen::MatrixXd(op.generator());
  REQUIRE(L.rows() == 3);
  REQUIRE(L(1, 0) == -1.0);
  REQUIRE(L(1, 1) == 2.0);
  REQUIRE(L(1, 2) == -1.0);
}

TEST_CASE("Laplacian is positive and self-adjoint") {
  auto s = build_grid_space(3, 9, 0.1);
  auto op = assemble_laplacian(s, Boundary::Dirichlet);
  Rng rng(3);
  for (int it = 0; it < 100; ++it) {
    Vec f(s.size());
    for (Eigen::Index i = 0; i < f.size(); ++i) f[i] = s.interior(i) ? rng.normal() : 0.0;
    Vec Lf = op.apply(f);
    double q = 0;
    for (std::size_t i = 0; i < s.size(); ++i) q += Lf[i] * f[i] * s.weight(i);
    REQUIRE(q >= 0);
  }
  auto g = random_graph(40, 11);
  auto og = assemble_laplacian(g, Boundary::Free);
  Vec f(40), h(40);
  for (int i = 0; i < 40; ++i) {
    f[i] = rng.normal();
    h[i] = rng.normal();
  }
  Vec Lf = og.apply(f), Lh = og.apply(h);
  double a = 0, b = 0;
  for (int i = 0; i < 40; ++i) {
    a += Lf[i] * h[i] * g.weight(i);
    b += f[i] * Lh[i] * g.weight(i);
  }
  REQUIRE(a == Approx(b).epsilon(1e-12));
}

TEST_CASE("conservative graph Laplacian kills constants") {
  auto g = build_graph_space(3, {{0, 1, 1}, {1, 2, 1}, {0, 2, 1}}, {1, 1, 1});
  auto op = assemble_laplacian(g, Boundary::Free);
  Vec one = Vec::Ones(3);
  REQUIRE(op.apply(one).cwiseAbs().maxCoeff() < 1e-15);
  auto lone = build_graph_space(1, {}, {1.0});
  REQUIRE_THROWS_AS(assemble_laplacian(lone, Boundary::Free), Error);
}

TEST_CASE("heat column against the Gaussian") {
  auto s = build_grid_space(3, 21, 0.1);
  std::size_t c = center_of(s), y = offset(s, c, {3, 0, 0});
  for (Boundary b : {Boundary::Dirichlet, Boundary::Lattice}) {
    auto op = assemble_laplacian(s, b);
    HeatKernel hk(op);
    double p = hk.column(0.05, c)[y];
    REQUIRE(p == Approx(gaussian(3, 0.05, 0.3)).epsilon(0.10));
  }
}

TEST_CASE("heat kernel convergence order under refinement") {
  std::vector<double> err;
  for (double h : {0.2, 0.1, 0.05}) {
    int side = static_cast<int>(std::lround(2.0 / h)) + 1;
    auto s = build_grid_space(3, side, h);
    auto op = assemble_laplacian(s, Boundary::Dirichlet);
    HeatKernel hk(op);
    std::size_t c = center_of(s);
    int k = static_cast<int>(std::lround(0.4 / h));
    double p = hk.column(0.05, c)[offset(s, c, {k, 0, 0})];
    err.push_back(std::abs(p / gaussian(3, 0.05, 0.4) - 1));
  }
  double order = std::log2(err[1] / err[2]);
  REQUIRE(err[2] < err[1]);
  REQUIRE(order >= 1.5);
}

TEST_CASE("spectral kernel identities on a weighted graph") {
  auto g = random_graph(60, 5);
  auto op = assemble_laplacian(g, Boundary::Free);
  HeatKernel hk(op);
  REQUIRE(hk.backend() == HeatBackend::SpectralDense);
  // symmetry and conservation
  for (std::size_t x : {0u, 7u, 33u}) {
    Vec p = hk.column(1.0, x);
    double mass = 0;
    for (std::size_t z = 0; z < 60; ++z) mass += p[z] * g.weight(z);
    REQUIRE(mass == Approx(1.0).epsilon(1e-8));
    for (std::size_t y : {2u, 19u, 59u}) REQUIRE(std::abs(p[y] - hk.column(1.0, y)[x]) < 1e-10);
  }
  // <p_t(x,.), phi_j>_m = e^{-lambda_j t} phi_j(x)
  const auto& e = hk.eigendata();
  Vec p = hk.column(0.3, 4);
  for (int j : {0, 5, 30}) {
    double ip = 0;
    for (std::size_t z = 0; z < 60; ++z) ip += p[z] * e.phi(z, j) * g.weight(z);
    REQUIRE(std::abs(ip - std::exp(-e.lambda[j] * 0.3) * e.phi(4, j)) < 1e-8);
  }
  HeatOptions too_many;
  too_many.backend = HeatBackend::SpectralDense;
  too_many.modes = 61;
  REQUIRE_THROWS_AS(HeatKernel(op, too_many), Error);
  REQUIRE_THROWS_AS(hk.column(0.0, 1), Error);
}

TEST_CASE("heat property report") {
  auto s = build_grid_space(3, 13, 0.1);
  auto op = assemble_laplacian(s, Boundary::Dirichlet);
  std::size_t c = center_of(s);
  std::vector<std::pair<std::size_t, std::size_t>> pairs{{c, offset(s, c, {2, 0, 0})}, {c, offset(s, c, {1, 1, 1})}};
  for (HeatBackend b : {HeatBackend::SpectralDense, HeatBackend::SpectralTensor}) {
    HeatOptions o;
    o.backend = b;
    HeatKernel hk(op, o);
    auto rep = verify_heat_properties(hk, {0.1, 0.1}, pairs);
    REQUIRE(rep.semigroup_residual <= 1e-8);
    REQUIRE(rep.symmetry_residual <= 1e-10);
    REQUIRE(rep.max_mass <= 1.0 + 1e-10);
  }
}

TEST_CASE("tensor, dense and stepping backends agree") {
  auto s = build_grid_space(3, 11, 0.1);
  auto op = assemble_laplacian(s, Boundary::Dirichlet);
  HeatOptions d, t, st;
  d.backend = HeatBackend::SpectralDense;
  t.backend = HeatBackend::SpectralTensor;
  st.backend = HeatBackend::Stepping;
  HeatKernel hd(op, d), ht(op, t), hs(op, st);
  std::size_t c = center_of(s);
  Vec pd = hd.column(0.02, c), pt = ht.column(0.02, c), ps = hs.column(0.02, c);
  REQUIRE((pd - pt).cwiseAbs().maxCoeff() < 1e-10 * pd.maxCoeff());
  for (std::size_t y : {offset(s, c, {1, 0, 0}), offset(s, c, {2, 1, 0})})
    REQUIRE(ps[y] == Approx(pd[y]).epsilon(0.01));
  // semigroup action agrees with the dense spectral form
  Vec f = Vec::Zero(s.size());
  f[c] = 1.0;
  f[offset(s, c, {1, 2, 0})] = 2.0;
  REQUIRE((hd.apply(0.03, f) - ht.apply(0.03, f)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("Gaussian bounds on R3 and R4") {
  for (int n : {3, 4}) {
    int side = n == 3 ? 21 : 11;
    double h = n == 3 ? 0.1 : 0.2;
    auto s = build_grid_space(n, side, h);
    auto op = assemble_laplacian(s, Boundary::Lattice);
    HeatKernel hk(op);
    std::size_t c = center_of(s);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (int k = 0; k <= 3; ++k) {
      std::vector<int> dk(n, 0);
      dk[0] = k;
      pairs.emplace_back(c, offset(s, c, dk));
      dk[1] = k / 2;
      pairs.emplace_back(c, offset(s, c, dk));
    }
    auto fit = fit_gaussian_bounds(hk, {0.001, 0.05, 0.1, 0.2, 0.4}, pairs);
    REQUIRE_FALSE(fit.violated);
    REQUIRE(std::isfinite(fit.C1));
    REQUIRE(fit.c == 0.0);
    REQUIRE(fit.excluded > 0);  // t = 0.001 lies below 4 h^2
  }
}

TEST_CASE("eigendata cache round trip") {
  auto g = random_graph(25, 9);
  auto op = assemble_laplacian(g, Boundary::Free);
  HeatKernel hk(op);
  auto path = (std::filesystem::temp_directory_path() / "greenlab_eig_test.bin").string();
  save_eigendata(hk.eigendata(), path);
  auto e = load_eigendata(path);
  HeatKernel again(op, e);
  REQUIRE((again.column(0.5, 3) - hk.column(0.5, 3)).cwiseAbs().maxCoeff() == 0.0);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    f.put('\x7f');
  }
  REQUIRE_THROWS_AS(load_eigendata(path), Error);
  std::filesystem::remove(path);
}
