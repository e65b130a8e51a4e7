#include <catch2/catch_amalgamated.hpp>

#include "greenlab/harness.hpp"

#include <sstream>

using namespace greenlab;
using Catch::Matchers::ContainsSubstring;

namespace {

std::string config_path(const std::string& name) { return std::string(GREENLAB_CONFIG_DIR) + "/" + name + ".toml"; }

const Check* find_check(const ReportBundle& b, const std::string& stage, const std::string& id) {
  for (const auto& c : b.checks)
    if (c.stage == stage && c.id == id) return &c;
  return nullptr;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("greenlab_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

const ReportBundle& pipeline() {
  static const ReportBundle b = run_experiment(load_config(config_path("r3_pipeline")));
  return b;
}

}  // namespace

TEST_CASE("config schema") {
  auto c = parse_config_string("schema_version = 1\n");
  REQUIRE(c.space.dim == 3);
  REQUIRE(c.seed == 1u);
  REQUIRE_THROWS_WITH(parse_config_string("name = \"x\"\n"), ContainsSubstring("schema_version is required"));
  REQUIRE_THROWS_WITH(parse_config_string("schema_version = 2\n"), ContainsSubstring("unsupported schema_version"));
  REQUIRE_THROWS_WITH(parse_config_string("schema_version = 1\n[space]\nsides = 3\n"), ContainsSubstring("space.sides"));
  REQUIRE_THROWS_WITH(parse_config_string("schema_version = 1\n[tolerances]\nnewtonian = 0.0\n"),
                      ContainsSubstring("strictly positive"));
  REQUIRE_THROWS_WITH(parse_config_string("schema_version = 1\n[space]\ndim = \"three\"\n"), ContainsSubstring("space.dim"));
  REQUIRE_THROWS_WITH(parse_config_string("schema_version = 1\n[space]\nboundary = \"periodic\"\n"),
                      ContainsSubstring("space.boundary"));
  REQUIRE_THROWS_WITH(parse_config_string("schema_version = 1\n[space]\ndim = 6\nside = 41\n"),
                      ContainsSubstring("max_points"));
  try {
    parse_config_string("schema_version = 1\n[space\n");
    FAIL("parse error expected");
  } catch (const Error& e) {
    REQUIRE(e.kind() == ErrorKind::Config);
  }
  for (const char* name : {"r1_heat", "r3_pipeline", "r3_dimension", "r4_quasi", "transport", "bump_no_tail"})
    REQUIRE_NOTHROW(load_config(config_path(name)));
  REQUIRE_THROWS_AS(load_config(config_path("missing")), Error);
}

TEST_CASE("minimal heat pipeline on a line") {
  auto b = run_experiment(load_config(config_path("r1_heat")));
  REQUIRE(b.failures.empty());
  REQUIRE(b.passed());
  const Check* sg = find_check(b, "heat", "semigroup_residual");
  REQUIRE(sg != nullptr);
  REQUIRE(sg->pass);
  REQUIRE(sg->anchor == anchor::kSemigroup);
  REQUIRE(b.metrics["heat"].contains("semigroup_residual"));
  REQUIRE_FALSE(b.metrics.contains("green"));
}

TEST_CASE("missing tail model with F requested") {
  auto b = run_experiment(load_config(config_path("bump_no_tail")));
  REQUIRE_FALSE(b.passed());
  REQUIRE(b.failures.size() == 1);
  const auto& f = b.failures.front();
  REQUIRE(f.stage == "green");
  REQUIRE(f.kind == to_string(ErrorKind::NonParabolic));
  REQUIRE_THAT(f.message, ContainsSubstring("non-parabolic assumption violated"));
  REQUIRE_FALSE(f.anchor.empty());
  // an R^1 space has tail exponent 1, which is not enough either
  auto c = load_config(config_path("r1_heat"));
  c.green.enabled = true;
  auto b1 = run_experiment(c);
  REQUIRE(b1.failures.size() == 1);
  REQUIRE(b1.failures.front().kind == to_string(ErrorKind::NonParabolic));
}

TEST_CASE("R3 pipeline bundle") {
  const auto& b = pipeline();
  for (const auto& f : b.failures) UNSCOPED_INFO(f.stage << ": " << f.message);
  for (const auto& c : b.checks) UNSCOPED_INFO(c.stage << "." << c.id << " = " << c.value << (c.pass ? "" : " FAIL"));
  REQUIRE(b.passed());
  const auto& m = b.metrics;
  for (const char* key : {"C2", "C_T", "C_G"}) REQUIRE(m["green"].contains(key));
  REQUIRE(m["maximal"].contains("C_M"));
  for (const char* key : {"phi_star_max", "lusin_deficit", "lusin_lipschitz"}) REQUIRE(m["flow"].contains(key));
  REQUIRE(b.ledgers.count("phi_star") == 1);
  for (const auto& c : b.checks) REQUIRE_FALSE(c.anchor.empty());
  for (const auto& [name, led] : b.ledgers) {
    REQUIRE(led.header.back() == "anchor");
    for (const auto& row : led.rows) {
      REQUIRE(row.size() == led.header.size());
      REQUIRE_FALSE(row.back().empty());
    }
  }
}

TEST_CASE("plot series") {
  const auto& b = pipeline();
  std::string g = emit_plot_data(b, "green_ratio");
  std::istringstream in(g);
  std::string line;
  std::getline(in, line);
  REQUIRE(line == "# d G_over_F grad_over_H");
  double prev = -kInf;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    double d, r, q;
    REQUIRE(static_cast<bool>(ls >> d >> r >> q));
    REQUIRE(d >= prev);
    prev = d;
    ++rows;
  }
  REQUIRE(rows == b.ledgers.at("green_pairs").rows.size());
  std::string h = emit_plot_data(b, "phi_star_histogram");
  REQUIRE(h.rfind("# bin_lo bin_hi count\n", 0) == 0);
  double total = 0;
  for (const auto& r : b.series.at("phi_star_histogram").rows) total += r[2];
  REQUIRE(total == static_cast<double>(b.ledgers.at("phi_star").rows.size()));
  REQUIRE_THROWS_WITH(emit_plot_data(b, "no_such_series"), ContainsSubstring("unknown series"));
}

TEST_CASE("dimension histograms before and after a flow") {
  auto c = load_config(config_path("r3_dimension"));
  c.dimension.flow = "rotation";
  auto b = run_experiment(c);
  REQUIRE(b.passed());
  const auto& s = b.series.at("dimension_histogram");
  REQUIRE(s.columns == std::vector<std::string>{"k", "before", "after"});
  REQUIRE(s.rows.size() == static_cast<std::size_t>(kMaxDimension));
  for (std::size_t i = 0; i < s.rows.size(); ++i) REQUIRE(s.rows[i][0] == static_cast<double>(i + 1));
  REQUIRE(s.rows[2][1] == 1.0);
  REQUIRE(s.rows[2][2] == 1.0);
}

TEST_CASE("reports are reproducible byte for byte") {
  auto c = load_config(config_path("r3_pipeline"));
  c.flow.enabled = false;
  auto d1 = scratch("a"), d2 = scratch("b"), d3 = scratch("c");
  auto files = write_bundle(run_experiment(c), d1);
  write_bundle(run_experiment(c), d2);
  c.threads = 3;
  write_bundle(run_experiment(c), d3);
  set_thread_count(1);
  REQUIRE(std::find(files.begin(), files.end(), "summary.json") != files.end());
  REQUIRE(std::find(files.begin(), files.end(), "checks.csv") != files.end());
  for (const auto& f : files) {
    REQUIRE(slurp(d1 / f) == slurp(d2 / f));
    REQUIRE(slurp(d1 / f) == slurp(d3 / f));
  }
  // a different seed changes the sampled pairs
  c.seed += 1;
  auto d4 = scratch("d");
  write_bundle(run_experiment(c), d4);
  set_thread_count(1);
  REQUIRE(slurp(d1 / "green_pairs.csv") != slurp(d4 / "green_pairs.csv"));
  auto j = nlohmann::json::parse(slurp(d1 / "summary.json"));
  REQUIRE(j["schema_version"] == kSchemaVersion);
  REQUIRE(j["passed"] == true);
}

TEST_CASE("number formatting") {
  REQUIRE(format_number(0.1) == "0.1");
  REQUIRE(format_number(1e-300) == "1e-300");
  REQUIRE(format_number(kInf) == "inf");
  REQUIRE(format_number(-kInf) == "-inf");
  REQUIRE(std::stod(format_number(1.0 / 3.0)) == 1.0 / 3.0);
  Ledger l{{"a", "b"}, {{"x,y", "q\"r"}}};
  REQUIRE(to_csv(l) == "a,b\n\"x,y\",\"q\"\"r\"\n");
}
