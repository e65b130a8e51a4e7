#include <catch2/catch_amalgamated.hpp>

#include "greenlab/space.hpp"

using namespace greenlab;
using Catch::Approx;

namespace {

// Independent lattice count of {k in Z^n : |k|^2 < q}.
std::size_t lattice_count(int n, double q) {
  int reach = static_cast<int>(std::ceil(std::sqrt(q)));
  std::vector<int> k(n, -reach);
  std::size_t count = 0;
  for (;;) {
    double s = 0;
    for (int v : k) s += double(v) * v;
    if (s < q) ++count;
    int d = 0;
    while (d < n && ++k[d] > reach) k[d++] = -reach;
    if (d == n) break;
  }
  return count;
}

std::size_t center_of(const MmSpace& s) {
  const auto& g = s.grid();
  std::vector<int> k(g.dim, g.side / 2);
  return s.flat_index(k.data());
}

}  // namespace

TEST_CASE("one dimensional grid basics") {
  auto s = build_grid_space(1, 5, 1.0);
  REQUIRE(s.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) REQUIRE(s.weight(i) == 1.0);
  REQUIRE(s.dist(0, 4) == 4.0);
}

TEST_CASE("grid construction errors") {
  REQUIRE_THROWS_AS(build_grid_space(3, 21, 0.0), Error);
  REQUIRE_THROWS_AS(build_grid_space(3, 21, -0.1), Error);
  REQUIRE_THROWS_AS(build_grid_space(3, 4, 0.1), Error);
  SpaceLimits tight;
  tight.max_points = 1000;
  REQUIRE_THROWS_AS(build_grid_space(3, 21, 0.1, {}, tight), Error);
}

TEST_CASE("R3 grid counts and balls") {
  auto s = build_grid_space(3, 21, 0.1);
  REQUIRE(s.size() == 9261);
  std::size_t boundary = 0;
  for (std::size_t i = 0; i < s.size(); ++i) boundary += s.interior(i) ? 0 : 1;
  REQUIRE(boundary == 21 * 21 * 21 - 19 * 19 * 19);

  std::size_t c = center_of(s);
  double cell = 1e-3;
  // strict ball B(c, 0.3) holds the lattice points with |k|^2 < 9
  REQUIRE(volume(s, c, 0.3) == Approx(lattice_count(3, 9.0) * cell).epsilon(1e-12));
  REQUIRE(ball(s, c, 0.3).size() == lattice_count(3, 9.0));
  // r = 0.5 sits on the shell |k| = 5, which the open ball excludes
  REQUIRE(volume(s, c, 0.5) == Approx(lattice_count(3, 25.0) * cell).epsilon(1e-12));
  REQUIRE(volume(s, c, 0.53) == Approx(unit_ball_volume(3) * std::pow(0.53, 3)).epsilon(0.05));
  REQUIRE(volume(s, c, 0.0) == 0.0);
  REQUIRE(ball(s, c, 0.0).empty());
}

TEST_CASE("volume monotone and tail substitution") {
  auto s = build_grid_space(3, 11, 0.1);
  std::size_t c = center_of(s);
  double prev = 0;
  for (double r = 0.05; r < 0.5; r += 0.05) {
    double v = volume(s, c, r);
    REQUIRE(v >= prev);
    prev = v;
  }
  // beyond the sampled radius the analytic law takes over
  REQUIRE(volume(s, c, 2.0) == Approx(unit_ball_volume(3) * 8.0));
}

TEST_CASE("graph metrics") {
  SECTION("path") {
    auto g = build_graph_space(3, {{0, 1, 1.0}, {1, 2, 1.0}}, {1.0, 2.0, 3.0});
    REQUIRE(g.dist(0, 2) == 2.0);
    auto b = ball(g, 1, 1.5);
    REQUIRE(b == std::vector<std::size_t>{0, 1, 2});
    REQUIRE(volume(g, 1, 1.5) == 6.0);
    REQUIRE_FALSE(g.tail().has_value());
  }
  SECTION("triangle") {
    auto g = build_graph_space(3, {{0, 1, 1.0}, {1, 2, 1.0}, {0, 2, 1.0}}, {1, 1, 1});
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) REQUIRE(g.dist(i, j) == (i == j ? 0.0 : 1.0));
  }
  SECTION("four cycle") {
    auto g = build_graph_space(4, {{0, 1, 1}, {1, 2, 1}, {2, 3, 1}, {3, 0, 1}}, {1, 1, 1, 1});
    REQUIRE(g.dist(0, 2) == 2.0);
    REQUIRE(g.dist(1, 3) == 2.0);
  }
  SECTION("errors") {
    REQUIRE_THROWS_AS(build_graph_space(3, {{0, 1, 1.0}}, {1, 1, 1}), Error);
    REQUIRE_THROWS_AS(build_graph_space(2, {{0, 1, 0.0}}, {1, 1}), Error);
  }
  SECTION("hop count") {
    auto g = build_graph_space(3, {{0, 1, 0.5}, {1, 2, 0.25}}, {1, 1, 1}, GraphMetric::HopCount);
    REQUIRE(g.dist(0, 2) == 2.0);
  }
}

TEST_CASE("triangle inequality on sampled triples") {
  auto s = build_grid_space(2, 9, 0.3);
  Rng rng(7);
  for (int it = 0; it < 2000; ++it) {
    std::size_t x = rng.index(s.size()), y = rng.index(s.size()), z = rng.index(s.size());
    REQUIRE(s.dist(x, z) <= s.dist(x, y) + s.dist(y, z) + 1e-15);
    REQUIRE(s.dist(x, y) == s.dist(y, x));
  }
}

TEST_CASE("doubling profiles") {
  SECTION("R3") {
    auto s = build_grid_space(3, 31, 0.1);
    auto rep = doubling_profile(s, {0.33, 0.43, 0.53, 0.63}, {center_of(s)}, 3.0);
    REQUIRE(rep.max_ratio == Approx(8.0).epsilon(0.12));
    REQUIRE(rep.min_ratio == Approx(8.0).epsilon(0.12));
  }
  SECTION("R1") {
    auto s = build_grid_space(1, 201, 0.01);
    auto rep = doubling_profile(s, {0.1, 0.2, 0.3}, {center_of(s)}, 1.0);
    REQUIRE(rep.max_ratio == Approx(2.0).epsilon(0.05));
    REQUIRE(rep.bishop_gromov_violations == 0);
  }
  SECTION("R4 as product with an R factor") {
    auto s = build_grid_space(4, 17, 0.1);
    auto rep = doubling_profile(s, {0.2, 0.3, 0.4}, {center_of(s)}, 4.0, 1);
    REQUIRE(rep.reverse_margin.has_value());
    REQUIRE(*rep.reverse_margin >= 1.0);
  }
}

TEST_CASE("distortion coefficients") {
  REQUIRE(distortion_coefficients(0, 3, 0.3, 2).sigma == Approx(0.3));
  REQUIRE(std::isinf(distortion_sigma(1, 1, 0.5, 4)));
  REQUIRE(distortion_coefficients(0, 5, 0.3, 2).tau == Approx(0.3).epsilon(1e-14));
  // positive curvature branch against the closed form
  double a = 1.0 * std::sqrt(1.0 / 3.0);
  REQUIRE(distortion_sigma(1, 3, 0.4, 1.0) == Approx(std::sin(0.4 * a) / std::sin(a)));
  REQUIRE(distortion_sigma(-1, 3, 0.4, 1.0) == Approx(std::sinh(0.4 * a) / std::sinh(a)));
  REQUIRE_THROWS_AS(distortion_coefficients(0, 1, 0.5, 1), Error);
}

TEST_CASE("F and H on R3") {
  auto s = build_grid_space(3, 21, 0.1);
  std::size_t c = center_of(s);
  auto p = f_h_profiles(s, c, {0.5});
  REQUIRE(p.F[0] == Approx(3.0 / (4 * kPi * 0.5)).epsilon(0.02));
  REQUIRE(p.H[0] == Approx(3.0 / (8 * kPi * 0.25)).epsilon(0.02));
  auto q = f_h_profiles(s, c, log_space(0.2, 0.7, 20));
  for (std::size_t i = 1; i < q.F.size(); ++i) {
    REQUIRE(q.F[i] < q.F[i - 1]);
    REQUIRE(q.H[i] < q.H[i - 1]);
  }
  for (std::size_t i = 0; i < q.F.size(); ++i)
    REQUIRE(q.F[i] * q.radii[i] == Approx(3.0 / (4 * kPi)).epsilon(0.03));
}

TEST_CASE("non-parabolic tail is rejected") {
  auto s = build_grid_space(2, 21, 0.1);
  try {
    f_h_profiles(s, center_of(s), {0.5});
    FAIL("expected an error");
  } catch (const Error& e) {
    REQUIRE(e.kind() == ErrorKind::NonParabolic);
    REQUIRE(std::string(e.what()) == "non-parabolic assumption violated");
  }
  auto g = build_graph_space(2, {{0, 1, 1.0}}, {1, 1});
  REQUIRE_THROWS_AS(f_h_profiles(g, 0, {0.5}), Error);
}

TEST_CASE("integral identities") {
  SECTION("R3") {
    auto s = build_grid_space(3, 21, 0.1);
    double R = 0.6;
    auto r = verify_integral_identities(s, center_of(s), R);
    REQUIRE(r.residual_F <= 0.02);
    REQUIRE(r.residual_H <= 0.02);
    // continuum values: 3R^2/2 and 3R/2
    REQUIRE(r.lhs_F == Approx(1.5 * R * R).epsilon(0.02));
    REQUIRE(r.lhs_H == Approx(1.5 * R).epsilon(0.02));
  }
  SECTION("R4") {
    auto s = build_grid_space(4, 15, 0.1);
    double R = 0.5;
    auto r = verify_integral_identities(s, center_of(s), R);
    REQUIRE(r.residual_F <= 0.02);
    REQUIRE(r.residual_H <= 0.02);
    // continuum values R^2 and 4R/3; the ball spans only five cells here
    REQUIRE(r.lhs_F == Approx(R * R).epsilon(0.05));
    REQUIRE(r.lhs_H == Approx(4.0 * R / 3.0).epsilon(0.05));
  }
  SECTION("vanishing ball") {
    auto s = build_grid_space(3, 11, 0.1);
    auto r = verify_integral_identities(s, center_of(s), 0.0);
    REQUIRE(r.lhs_F == 0.0);
    REQUIRE(r.rhs_F == 0.0);
    auto small = verify_integral_identities(s, center_of(s), 0.05);
    REQUIRE(small.residual_F < 1e-12);
  }
}

TEST_CASE("rescaling") {
  auto s = build_grid_space(3, 11, 0.1);
  auto w = s.with_scaled_weights(2.0);
  std::size_t c = center_of(s);
  REQUIRE(volume(w, c, 0.3) == Approx(2 * volume(s, c, 0.3)));
  auto d = s.with_scaled_distances(3.0);
  REQUIRE(d.dist(0, 1) == Approx(3 * s.dist(0, 1)));
  REQUIRE(volume(d, c, 0.9) == Approx(volume(s, c, 0.3)));
}
