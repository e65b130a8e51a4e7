#pragma once

#include "greenlab/core.hpp"

#include <toml.hpp>

#include <cstdlib>
#include <optional>
#include <set>
#include <sstream>

namespace greenlab {

inline constexpr int kSchemaVersion = 1;

struct SpaceConfig {
  int dim = 3;
  int side = 21;
  double spacing = 0.1;
  double density = 1.0;
  std::string profile = "uniform";  // uniform | bump
  double bump_height = 1.0;          // bump: density (1 + height exp(-|x|^2 / width^2))
  double bump_width = 0.5;
  std::string tail = "auto";         // auto | none | power
  double tail_coefficient = 0.0;
  double tail_exponent = 0.0;
  std::string boundary = "lattice";  // lattice | dirichlet
  bool identities = false;           // check the F and H integral identities
};

struct GroundingConfig {
  double c = 0.0;
  double eps = 0.0;
};

struct HeatConfig {
  bool enabled = false;
  std::vector<double> times{0.05, 0.1};
  std::vector<double> gaussian_times{0.05, 0.1, 0.2, 0.4};
  int pair_cells = 3;  // pairs at offsets 0..pair_cells cells from the centre
  bool stepping = true;
};

struct GreenConfig {
  bool enabled = false;
  std::size_t pairs = 200;
  double dmin = 0.3;
  double dmax = 0.75;
  std::size_t points = 150;   // quasi-metric table
  std::size_t triples = 2000;
};

struct MaximalConfig {
  bool enabled = false;
  std::size_t functions = 10;
  std::size_t points = 40;
};

struct FlowConfig {
  bool enabled = false;
  std::string field = "rotation";
  double amplitude = 1.0;
  double alpha = 0.7;
  std::vector<double> vector{0.3, -0.1, 0.2};
  double T = 1.0;
  double dt = 0.0;
  double plateau = 0.5;
  double support = 0.75;
  double seed_radius = 0.85;
  double region_radius = 0.5;
  std::size_t pairs = 100;
  double lusin_eps = 0.1;
  int compressibility_cells = 4;
};

struct TransportConfig {
  bool enabled = false;
  int side = 31;
  double spacing = 0.1;
  std::vector<std::string> instances{"translation", "dilation"};
  double entropy_dimension = 3.0;
};

struct DimensionConfig {
  bool enabled = false;
  double window_lo = 0.0;  // 0: default window
  double window_hi = 0.0;
  int window_samples = 24;
  std::size_t points = 400;
  std::string flow = "none";  // none | rotation | shear
  double flow_T = 0.5;
};

struct Tolerances {
  double fubini = 0.02;
  double semigroup = 1e-8;
  double stepping = 0.01;
  double newtonian = 0.10;
  double mg_domination = 1.2;
  double condition3 = 1e-4;
  double compressibility = 0.1;  // |L - 1| for divergence-free fields
  double green_derivative = 0.05;
  double duality_gap = 1e-8;
  double speed = 0.01;
  double pushforward_cells = 2.0;
  double asymptotics = 0.05;
  double constancy_tv = 0.05;
};

struct Budgets {
  std::size_t max_points = 5'000'000;
  std::size_t max_pairs = 20000;
  std::size_t max_triples = 200000;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::string name = "experiment";
  std::uint64_t seed = 1;
  int threads = 1;
  std::string out = "out";
  SpaceConfig space;
  GroundingConfig grounding;
  HeatConfig heat;
  GreenConfig green;
  MaximalConfig maximal;
  FlowConfig flow;
  TransportConfig transport;
  DimensionConfig dimension;
  Tolerances tolerances;
  Budgets budgets;
};

namespace detail {

// Reads one TOML table and rejects keys that were never consumed.
class TableReader {
 public:
  TableReader(const toml::table* t, std::string path) : t_(t), path_(std::move(path)) {}

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!t_) return;
    const toml::node* n = t_->get(key);
    if (!n) return;
    if constexpr (std::is_same_v<T, bool>) {
      auto v = n->value_exact<bool>();
      fail_if(!v, key, "a boolean");
      out = *v;
    } else if constexpr (std::is_same_v<T, std::string>) {
      auto v = n->value_exact<std::string>();
      fail_if(!v, key, "a string");
      out = *v;
    } else if constexpr (std::is_integral_v<T>) {
      auto v = n->value_exact<std::int64_t>();
      fail_if(!v, key, "an integer");
      fail_if(*v < 0 && std::is_unsigned_v<T>, key, "a nonnegative integer");
      out = static_cast<T>(*v);
    } else if constexpr (std::is_floating_point_v<T>) {
      auto v = n->value<double>();
      fail_if(!v || !std::isfinite(*v), key, "a finite number");
      out = *v;
    } else {
      const toml::array* a = n->as_array();
      fail_if(!a, key, "an array");
      out.clear();
      for (const auto& e : *a) {
        typename T::value_type x{};
        if constexpr (std::is_same_v<typename T::value_type, std::string>) {
          auto v = e.value_exact<std::string>();
          fail_if(!v, key, "an array of strings");
          x = *v;
        } else {
          auto v = e.value<double>();
          fail_if(!v || !std::isfinite(*v), key, "an array of numbers");
          x = *v;
        }
        out.push_back(x);
      }
    }
  }

  TableReader sub(const char* key) {
    seen_.insert(key);
    const toml::table* s = nullptr;
    if (t_) {
      const toml::node* n = t_->get(key);
      if (n) {
        s = n->as_table();
        if (!s) throw Error(ErrorKind::Config, "config: " + qualified(key) + " must be a table");
      }
    }
    return TableReader(s, qualified(key));
  }

  void finish() const {
    if (!t_) return;
    for (const auto& [k, v] : *t_)
      if (!seen_.count(std::string(k.str()))) throw Error(ErrorKind::Config, "config: unknown key " + qualified(std::string(k.str()).c_str()));
  }

 private:
  std::string qualified(const char* key) const { return path_.empty() ? key : path_ + "." + key; }
  void fail_if(bool bad, const char* key, const char* what) const {
    if (bad) throw Error(ErrorKind::Config, "config: " + qualified(key) + " must be " + what);
  }

  const toml::table* t_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void check_positive(double v, const char* name) {
  require(v > 0, ErrorKind::Config, std::string("config: ") + name + " must be positive");
}

inline void check_one_of(const std::string& v, std::initializer_list<const char*> allowed, const char* name) {
  for (const char* a : allowed)
    if (v == a) return;
  std::string msg = std::string("config: ") + name + " must be one of";
  for (const char* a : allowed) msg += std::string(" ") + a;
  throw Error(ErrorKind::Config, msg);
}

}  // namespace detail

/// Schema checks run before any computation.
inline void validate(const ExperimentConfig& c) {
  using detail::check_one_of;
  using detail::check_positive;
  require(c.schema_version == kSchemaVersion, ErrorKind::Config,
          "config: unsupported schema_version " + std::to_string(c.schema_version));
  require(c.threads >= 1, ErrorKind::Config, "config: threads must be at least 1");
  const auto& s = c.space;
  require(s.dim >= 1 && s.dim <= 6, ErrorKind::Config, "config: space.dim must lie in 1..6");
  require(s.side >= 5, ErrorKind::Config, "config: space.side must be at least 5");
  check_positive(s.spacing, "space.spacing");
  check_positive(s.density, "space.density");
  check_one_of(s.profile, {"uniform", "bump"}, "space.profile");
  check_one_of(s.tail, {"auto", "none", "power"}, "space.tail");
  check_one_of(s.boundary, {"lattice", "dirichlet"}, "space.boundary");
  if (s.profile == "bump") {
    require(s.bump_height > -1, ErrorKind::Config, "config: space.bump_height must exceed -1");
    check_positive(s.bump_width, "space.bump_width");
  }
  if (s.tail == "power") {
    check_positive(s.tail_coefficient, "space.tail_coefficient");
    check_positive(s.tail_exponent, "space.tail_exponent");
  }
  require(std::pow(static_cast<double>(s.side), s.dim) <= static_cast<double>(c.budgets.max_points),
          ErrorKind::Config, "config: space exceeds budgets.max_points");
  require(c.grounding.c >= 0 && c.grounding.eps >= 0, ErrorKind::Config,
          "config: grounding.c and grounding.eps must be nonnegative");
  if (c.heat.enabled) {
    require(c.heat.times.size() >= 2, ErrorKind::Config, "config: heat.times needs at least two entries");
    for (double t : c.heat.times) check_positive(t, "heat.times");
    for (double t : c.heat.gaussian_times) check_positive(t, "heat.gaussian_times");
    require(c.heat.pair_cells >= 1, ErrorKind::Config, "config: heat.pair_cells must be at least 1");
  }
  if (c.green.enabled) {
    require(c.green.pairs >= 1 && c.green.pairs <= c.budgets.max_pairs, ErrorKind::Config,
            "config: green.pairs outside 1..budgets.max_pairs");
    require(c.green.triples <= c.budgets.max_triples, ErrorKind::Config, "config: green.triples exceeds budgets.max_triples");
    require(c.green.points >= 3, ErrorKind::Config, "config: green.points must be at least 3");
    require(c.green.dmin >= 0 && c.green.dmax > c.green.dmin, ErrorKind::Config, "config: green needs 0 <= dmin < dmax");
  }
  if (c.maximal.enabled) {
    require(c.maximal.functions >= 1 && c.maximal.points >= 1, ErrorKind::Config,
            "config: maximal budgets must be positive");
    require(c.maximal.functions * c.maximal.points <= c.budgets.max_pairs, ErrorKind::Config,
            "config: maximal budget exceeds budgets.max_pairs");
  }
  if (c.flow.enabled) {
    check_one_of(c.flow.field, {"constant", "rotation", "shear", "radial", "ot_drift"}, "flow.field");
    check_positive(c.flow.T, "flow.T");
    require(c.flow.dt >= 0, ErrorKind::Config, "config: flow.dt must be nonnegative");
    check_positive(c.flow.support, "flow.support");
    check_positive(c.flow.seed_radius, "flow.seed_radius");
    check_positive(c.flow.region_radius, "flow.region_radius");
    require(c.flow.lusin_eps > 0 && c.flow.lusin_eps < 1, ErrorKind::Config, "config: flow.lusin_eps must lie in (0, 1)");
    require(c.flow.pairs <= c.budgets.max_pairs, ErrorKind::Config, "config: flow.pairs exceeds budgets.max_pairs");
    require(c.flow.compressibility_cells >= 2, ErrorKind::Config, "config: flow.compressibility_cells must be at least 2");
  }
  if (c.transport.enabled) {
    require(c.transport.side >= 5, ErrorKind::Config, "config: transport.side must be at least 5");
    check_positive(c.transport.spacing, "transport.spacing");
    require(!c.transport.instances.empty(), ErrorKind::Config, "config: transport.instances is empty");
    for (const auto& i : c.transport.instances) check_one_of(i, {"translation", "dilation"}, "transport.instances");
    require(c.transport.entropy_dimension > 1, ErrorKind::Config, "config: transport.entropy_dimension must exceed 1");
  }
  if (c.dimension.enabled) {
    require(c.dimension.window_lo >= 0 && c.dimension.window_hi >= 0, ErrorKind::Config,
            "config: dimension window must be nonnegative");
    require((c.dimension.window_lo == 0) == (c.dimension.window_hi == 0), ErrorKind::Config,
            "config: give both dimension.window_lo and dimension.window_hi or neither");
    require(c.dimension.window_samples >= 4, ErrorKind::Config, "config: dimension.window_samples must be at least 4");
    require(c.dimension.points >= 1, ErrorKind::Config, "config: dimension.points must be positive");
    check_one_of(c.dimension.flow, {"none", "rotation", "shear"}, "dimension.flow");
    check_positive(c.dimension.flow_T, "dimension.flow_T");
  }
  const auto& t = c.tolerances;
  for (double v : {t.fubini, t.semigroup, t.stepping, t.newtonian, t.mg_domination, t.condition3, t.compressibility,
                   t.green_derivative, t.duality_gap, t.speed, t.pushforward_cells, t.asymptotics, t.constancy_tv})
    require(v > 0, ErrorKind::Config, "config: every tolerance must be strictly positive");
}

inline ExperimentConfig parse_config(const toml::table& root) {
  ExperimentConfig c;
  detail::TableReader r(&root, "");
  r.get("schema_version", c.schema_version);
  require(root.contains("schema_version"), ErrorKind::Config, "config: schema_version is required");
  require(c.schema_version == kSchemaVersion, ErrorKind::Config,
          "config: unsupported schema_version " + std::to_string(c.schema_version));
  r.get("name", c.name);
  r.get("seed", c.seed);
  r.get("threads", c.threads);
  {
    auto o = r.sub("output");
    o.get("dir", c.out);
    o.finish();
  }
  {
    auto s = r.sub("space");
    s.get("dim", c.space.dim);
    s.get("side", c.space.side);
    s.get("spacing", c.space.spacing);
    s.get("density", c.space.density);
    s.get("profile", c.space.profile);
    s.get("bump_height", c.space.bump_height);
    s.get("bump_width", c.space.bump_width);
    s.get("tail", c.space.tail);
    s.get("tail_coefficient", c.space.tail_coefficient);
    s.get("tail_exponent", c.space.tail_exponent);
    s.get("boundary", c.space.boundary);
    s.get("identities", c.space.identities);
    s.finish();
  }
  {
    auto g = r.sub("grounding");
    g.get("c", c.grounding.c);
    g.get("eps", c.grounding.eps);
    g.finish();
  }
  {
    auto h = r.sub("heat");
    h.get("enabled", c.heat.enabled);
    h.get("times", c.heat.times);
    h.get("gaussian_times", c.heat.gaussian_times);
    h.get("pair_cells", c.heat.pair_cells);
    h.get("stepping", c.heat.stepping);
    h.finish();
  }
  {
    auto g = r.sub("green");
    g.get("enabled", c.green.enabled);
    g.get("pairs", c.green.pairs);
    g.get("dmin", c.green.dmin);
    g.get("dmax", c.green.dmax);
    g.get("points", c.green.points);
    g.get("triples", c.green.triples);
    g.finish();
  }
  {
    auto m = r.sub("maximal");
    m.get("enabled", c.maximal.enabled);
    m.get("functions", c.maximal.functions);
    m.get("points", c.maximal.points);
    m.finish();
  }
  {
    auto f = r.sub("flow");
    f.get("enabled", c.flow.enabled);
    f.get("field", c.flow.field);
    f.get("amplitude", c.flow.amplitude);
    f.get("alpha", c.flow.alpha);
    f.get("vector", c.flow.vector);
    f.get("T", c.flow.T);
    f.get("dt", c.flow.dt);
    f.get("plateau", c.flow.plateau);
    f.get("support", c.flow.support);
    f.get("seed_radius", c.flow.seed_radius);
    f.get("region_radius", c.flow.region_radius);
    f.get("pairs", c.flow.pairs);
    f.get("lusin_eps", c.flow.lusin_eps);
    f.get("compressibility_cells", c.flow.compressibility_cells);
    f.finish();
  }
  {
    auto t = r.sub("transport");
    t.get("enabled", c.transport.enabled);
    t.get("side", c.transport.side);
    t.get("spacing", c.transport.spacing);
    t.get("instances", c.transport.instances);
    t.get("entropy_dimension", c.transport.entropy_dimension);
    t.finish();
  }
  {
    auto d = r.sub("dimension");
    d.get("enabled", c.dimension.enabled);
    d.get("window_lo", c.dimension.window_lo);
    d.get("window_hi", c.dimension.window_hi);
    d.get("window_samples", c.dimension.window_samples);
    d.get("points", c.dimension.points);
    d.get("flow", c.dimension.flow);
    d.get("flow_T", c.dimension.flow_T);
    d.finish();
  }
  {
    auto t = r.sub("tolerances");
    auto& o = c.tolerances;
    t.get("fubini", o.fubini);
    t.get("semigroup", o.semigroup);
    t.get("stepping", o.stepping);
    t.get("newtonian", o.newtonian);
    t.get("mg_domination", o.mg_domination);
    t.get("condition3", o.condition3);
    t.get("compressibility", o.compressibility);
    t.get("green_derivative", o.green_derivative);
    t.get("duality_gap", o.duality_gap);
    t.get("speed", o.speed);
    t.get("pushforward_cells", o.pushforward_cells);
    t.get("asymptotics", o.asymptotics);
    t.get("constancy_tv", o.constancy_tv);
    t.finish();
  }
  {
    auto b = r.sub("budgets");
    b.get("max_points", c.budgets.max_points);
    b.get("max_pairs", c.budgets.max_pairs);
    b.get("max_triples", c.budgets.max_triples);
    b.finish();
  }
  r.finish();
  validate(c);
  return c;
}

inline ExperimentConfig parse_config_string(const std::string& text, const std::string& source = "<string>") {
  toml::table t;
  try {
    t = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "config: " << e.description() << " at " << source << ":" << e.source().begin.line;
    throw Error(ErrorKind::Config, os.str());
  }
  return parse_config(t);
}

inline ExperimentConfig load_config(const std::string& path) {
  toml::table t;
  try {
    t = toml::parse_file(path);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "config: " << e.description() << " at " << path << ":" << e.source().begin.line;
    throw Error(ErrorKind::Config, os.str());
  }
  return parse_config(t);
}

}  // namespace greenlab
