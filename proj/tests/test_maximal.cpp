#include <catch2/catch_amalgamated.hpp>

#include "greenlab/maximal.hpp"

using namespace greenlab;
using Catch::Approx;

namespace {

std::size_t at(const MmSpace& s, std::vector<double> p) {
  const auto& g = s.grid();
  std::array<int, 12> k{};
  for (int d = 0; d < g.dim; ++d) k[d] = static_cast<int>(std::lround(p[d] / g.spacing)) + g.side / 2;
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

Vec random_function(const MmSpace& s, Rng& rng) {
  Vec f(s.size());
  for (Eigen::Index i = 0; i < f.size(); ++i) f[i] = rng.uniform() < 0.3 ? rng.uniform(0.0, 5.0) : 0.0;
  return f;
}

double l2_norm_on(const MmSpace& s, const std::vector<std::size_t>& set, const std::vector<double>& v) {
  double a = 0;
  for (std::size_t i = 0; i < set.size(); ++i) a += v[i] * v[i] * s.weight(set[i]);
  return std::sqrt(a);
}

}  // namespace

TEST_CASE("maximal functions of a constant") {
  auto s = build_grid_space(3, 15, 0.1);
  auto op = assemble_laplacian(s, Boundary::Lattice);
  GreenField g(op, {});
  auto pts = core_sample(s, 20, 1);
  Vec one = Vec::Ones(s.size());
  for (double v : hardy_littlewood(s, one, pts)) REQUIRE(v == Approx(1.0).epsilon(1e-14));
  for (double v : g_maximal(g, one, pts)) REQUIRE(v == Approx(1.0).epsilon(1e-14));
  auto dom = verify_mg_domination(g, {one}, pts);
  REQUIRE(dom.C == Approx(1.0).epsilon(1e-14));
}

TEST_CASE("maximal function of a point mass") {
  auto s = build_grid_space(3, 21, 0.1);
  std::size_t x = at(s, {0, 0, 0});
  for (std::vector<double> p : {std::vector<double>{0.3, 0, 0}, {0.2, 0.2, 0.1}, {0.4, -0.3, 0}}) {
    std::size_t y = at(s, p);
    Vec f = Vec::Zero(s.size());
    f[y] = 1.0;
    double d = s.dist(x, y);
    // brute-force closed ball mass
    double mass = 0;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (s.dist(x, j) <= d) mass += s.weight(j);
    double m0 = s.weight(y);
    REQUIRE(hardy_littlewood(s, f, {x})[0] == Approx(m0 / mass).epsilon(1e-12));
  }
  // the singleton ball is admissible: Mf >= f
  Rng rng(2);
  Vec f = random_function(s, rng);
  auto pts = core_sample(s, 30, 3);
  auto m = hardy_littlewood(s, f, pts);
  for (std::size_t i = 0; i < pts.size(); ++i) REQUIRE(m[i] >= f[pts[i]]);
}

TEST_CASE("maximal function is homogeneous and monotone") {
  auto s = build_grid_space(3, 15, 0.1);
  Rng rng(4);
  auto pts = core_sample(s, 25, 5);
  Vec f = random_function(s, rng);
  Vec g = f;
  for (Eigen::Index i = 0; i < g.size(); ++i) g[i] += rng.uniform() < 0.5 ? rng.uniform() : 0.0;
  auto mf = hardy_littlewood(s, f, pts);
  auto mf2 = hardy_littlewood(s, Vec(2.5 * f), pts);
  auto mg = hardy_littlewood(s, g, pts);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    REQUIRE(mf2[i] == Approx(2.5 * mf[i]).epsilon(1e-14));
    REQUIRE(mf[i] <= mg[i]);
  }
  Vec neg = f;
  neg[0] = -1.0;
  REQUIRE_THROWS_AS(hardy_littlewood(s, neg, pts), Error);
  // a boundary point has no admissible ball
  REQUIRE_THROWS_AS(hardy_littlewood(s, f, {0}), Error);
}

TEST_CASE("Green maximal function is dominated by the metric one") {
  for (int n : {3, 4}) {
    auto s = n == 3 ? build_grid_space(3, 21, 0.1) : build_grid_space(4, 11, 0.2);
    auto op = assemble_laplacian(s, Boundary::Lattice);
    GreenField g(op, {});
    auto pts = core_sample(s, 40, 6);
    Rng rng(7);
    std::vector<Vec> fs;
    for (int k = 0; k < 20; ++k) fs.push_back(random_function(s, rng));
    auto dom = verify_mg_domination(g, fs, pts);
    REQUIRE(dom.evaluations > 0);
    REQUIRE(dom.C <= 1.2);
  }
}

TEST_CASE("local L2 bound of the maximal function") {
  auto s = build_grid_space(3, 21, 0.1);
  std::size_t c = at(s, {0, 0, 0});
  std::vector<std::size_t> P;
  for (auto [d, j] : s.sorted_ball(c, 0.35)) P.push_back(j);
  std::sort(P.begin(), P.end());
  Rng rng(9);
  std::vector<double> ratios;
  for (int k = 0; k < 20; ++k) {
    Vec f = Vec::Zero(s.size());
    for (std::size_t j : P) f[j] = rng.uniform() < 0.4 ? rng.uniform(0.0, 3.0) : 0.0;
    auto m = hardy_littlewood(s, f, P, 0.5);
    std::vector<double> fv;
    for (std::size_t j : P) fv.push_back(f[j]);
    ratios.push_back(l2_norm_on(s, P, m) / l2_norm_on(s, P, fv));
  }
  auto [lo, hi] = std::minmax_element(ratios.begin(), ratios.end());
  REQUIRE(*lo >= 1.0);
  REQUIRE(*hi <= 1.25 * *lo);
}

TEST_CASE("scalar Green maximal estimate") {
  auto run = [](double h, const std::function<Vec(const MmSpace&)>& make_f) {
    int side = static_cast<int>(std::lround(2.0 / h)) + 1;
    auto s = build_grid_space(3, side, h);
    auto op = assemble_laplacian(s, Boundary::Lattice);
    GreenField g(op, {});
    PairList pairs;
    std::vector<std::vector<double>> xs = {{0, 0, 0}, {0.2, -0.2, 0}, {-0.4, 0, 0.2}};
    std::vector<std::vector<double>> ys = {{0.4, 0, 0}, {0, 0.4, 0.4}, {-0.2, 0.2, -0.4}, {0.6, 0.2, 0}};
    for (const auto& x : xs)
      for (const auto& y : ys)
        if (at(s, x) != at(s, y)) pairs.emplace_back(at(s, x), at(s, y));
    return verify_scalar_green_maximal(g, make_f(s), pairs);
  };
  auto core_one = [](const MmSpace& s) {
    Vec f = Vec::Zero(s.size());
    for (std::size_t j : s.core_points(0.25)) f[j] = 1.0;
    return f;
  };
  auto coarse = run(0.2, core_one), fine = run(0.1, core_one);
  REQUIRE(std::isfinite(fine.C_M));
  REQUIRE(fine.C_M > 0);
  REQUIRE(fine.skipped == 0);
  REQUIRE(coarse.C_M == Approx(fine.C_M).epsilon(0.25));
  // small bump next to the first source
  auto bump = run(0.1, [](const MmSpace& s) {
    Vec f = Vec::Zero(s.size());
    for (auto [d, j] : s.sorted_ball(at(s, {0.1, 0, 0}), 0.15)) f[j] = 1.0;
    return f;
  });
  REQUIRE(bump.C_M <= 2.0 * fine.C_M);
  // homogeneity in f
  auto scaled = run(0.1, [&](const MmSpace& s) { return Vec(3.0 * core_one(s)); });
  REQUIRE(scaled.C_M == Approx(fine.C_M).epsilon(1e-12));
  auto zero = run(0.2, [](const MmSpace& s) { return Vec(Vec::Zero(s.size())); });
  REQUIRE(zero.rows.empty());
  REQUIRE(zero.skipped == 12);
}
