#pragma once

#include "greenlab/lattice.hpp"
#include "greenlab/space.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>

namespace greenlab {

/// Dirichlet: boundary layer removed (absorbing). Free: conservative operator
/// on every point. Lattice: grid treated as a window of the infinite lattice
/// hZ^n (Dirichlet at infinity); kernels come from exact lattice formulas.
enum class Boundary { Dirichlet, Free, Lattice };

inline const char* to_string(Boundary b) {
  switch (b) {
    case Boundary::Dirichlet: return "dirichlet";
    case Boundary::Free: return "free";
    case Boundary::Lattice: return "lattice";
  }
  return "?";
}

using SpMat = Eigen::SparseMatrix<double>;

/// L f(i) = (1/m_i) sum_j w_ij (f(i) - f(j)), stored in the symmetric form
/// S = M^{1/2} L M^{-1/2} on the active points.
class LaplaceOperator {
 public:
  const MmSpace& space() const { return *space_; }
  Boundary boundary() const { return boundary_; }
  std::size_t active_size() const { return active_.size(); }
  const std::vector<std::size_t>& active() const { return active_; }
  std::ptrdiff_t slot(std::size_t i) const { return slot_[i]; }
  const SpMat& symmetric() const { return S_; }
  const Vec& sqrt_mass() const { return sqrt_m_; }
  bool conservative() const { return boundary_ == Boundary::Free || boundary_ == Boundary::Lattice; }

  /// (Lf) on every point; zero off the active set. For the lattice window the
  /// exterior values are taken as zero.
  Vec apply(const Vec& f) const {
    Vec v(active_size());
    for (std::size_t a = 0; a < active_.size(); ++a) v[a] = f[active_[a]] * sqrt_m_[a];
    Vec Sv = S_ * v;
    Vec out = Vec::Zero(space_->size());
    for (std::size_t a = 0; a < active_.size(); ++a) out[active_[a]] = Sv[a] / sqrt_m_[a];
    return out;
  }

  /// Generator matrix on the active set (row i = L applied at active point i).
  SpMat generator() const {
    SpMat L = S_;
    for (int k = 0; k < L.outerSize(); ++k)
      for (SpMat::InnerIterator it(L, k); it; ++it)
        it.valueRef() *= sqrt_m_[it.col()] / sqrt_m_[it.row()];
    return L;
  }

  friend LaplaceOperator assemble_laplacian(const MmSpace&, Boundary);

 private:
  const MmSpace* space_ = nullptr;
  Boundary boundary_ = Boundary::Dirichlet;
  std::vector<std::size_t> active_;
  std::vector<std::ptrdiff_t> slot_;
  SpMat S_;
  Vec sqrt_m_;
};

/// Conductances: grids use the finite-difference stencil, w_ij = (m_i + m_j) / (2 h^2);
/// graphs use w_ij = weight / length^2. The returned operator keeps a
/// reference to `space`.
inline LaplaceOperator assemble_laplacian(const MmSpace& space, Boundary boundary) {
  LaplaceOperator op;
  op.space_ = &space;
  op.boundary_ = boundary;
  std::size_t n = space.size();
  if (boundary == Boundary::Lattice)
    require(space.is_grid(), ErrorKind::Precondition, "lattice boundary requires a grid space");
  op.slot_.assign(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    bool act = boundary == Boundary::Dirichlet ? space.interior(i) : true;
    if (act) {
      op.slot_[i] = static_cast<std::ptrdiff_t>(op.active_.size());
      op.active_.push_back(i);
    }
  }
  std::size_t na = op.active_.size();
  require(na > 0, ErrorKind::Precondition, "operator has no active points");
  op.sqrt_m_.resize(na);
  for (std::size_t a = 0; a < na; ++a) op.sqrt_m_[a] = std::sqrt(space.weight(op.active_[a]));

  std::vector<double> degree(n, 0.0);
  std::vector<Eigen::Triplet<double>> trip;
  auto add_edge = [&](std::size_t i, std::size_t j, double w) {
    degree[i] += w;
    degree[j] += w;
    auto si = op.slot_[i], sj = op.slot_[j];
    if (si >= 0 && sj >= 0) {
      double v = -w / (op.sqrt_m_[si] * op.sqrt_m_[sj]);
      trip.emplace_back(si, sj, v);
      trip.emplace_back(sj, si, v);
    }
  };
  if (space.is_grid()) {
    const auto& g = space.grid();
    double h2 = g.spacing * g.spacing;
    std::array<int, 12> k{};
    for (std::size_t i = 0; i < n; ++i) {
      space.multi_index(i, k.data());
      for (int d = 0; d < g.dim; ++d) {
        if (k[d] + 1 < g.side) {
          ++k[d];
          std::size_t j = space.flat_index(k.data());
          --k[d];
          add_edge(i, j, 0.5 * (space.weight(i) + space.weight(j)) / h2);
        }
      }
    }
    if (boundary == Boundary::Lattice) {
      // exterior neighbours of the window still conduct (values zero outside)
      for (std::size_t i = 0; i < n; ++i) {
        space.multi_index(i, k.data());
        for (int d = 0; d < g.dim; ++d) {
          if (k[d] == 0) degree[i] += space.weight(i) / h2;
          if (k[d] == g.side - 1) degree[i] += space.weight(i) / h2;
        }
      }
    }
  } else {
    for (const auto& e : space.edges()) add_edge(e.a, e.b, e.weight / (e.length * e.length));
  }
  for (std::size_t a = 0; a < na; ++a) {
    std::size_t i = op.active_[a];
    if (boundary != Boundary::Dirichlet || !space.is_grid())
      require(degree[i] > 0, ErrorKind::Precondition, "zero-degree interior node");
    trip.emplace_back(a, a, degree[i] / space.weight(i));
  }
  op.S_.resize(na, na);
  op.S_.setFromTriplets(trip.begin(), trip.end());
  return op;
}

// ---------------------------------------------------------------------------
// discrete gradient

/// |grad f|(i): central differences on grids (one-sided on the box faces),
/// max-neighbour slope on graphs. `exterior` supplies values beyond the grid
/// window (lattice mode) and may be empty.
inline double gradient_norm_at(const MmSpace& s, const std::function<double(std::size_t)>& f, std::size_t i,
                               const std::function<double(const int*)>& exterior = {}) {
  if (s.is_grid()) {
    const auto& g = s.grid();
    std::array<int, 12> k{};
    s.multi_index(i, k.data());
    double sq = 0.0;
    double fi = f(i);
    for (int d = 0; d < g.dim; ++d) {
      auto value = [&](int delta, bool& ok) {
        k[d] += delta;
        double v = 0.0;
        ok = true;
        if (s.in_grid(k.data()))
          v = f(s.flat_index(k.data()));
        else if (exterior)
          v = exterior(k.data());
        else
          ok = false;
        k[d] -= delta;
        return v;
      };
      bool okp, okm;
      double fp = value(1, okp), fm = value(-1, okm);
      double deriv;
      if (okp && okm)
        deriv = (fp - fm) / (2 * g.spacing);
      else if (okp)
        deriv = (fp - fi) / g.spacing;
      else
        deriv = (fi - fm) / g.spacing;
      sq += deriv * deriv;
    }
    return std::sqrt(sq);
  }
  double best = 0.0;
  for (const auto& nb : s.adjacency()[i]) best = std::max(best, std::abs(f(nb.id) - f(i)) / nb.length);
  return best;
}

inline Vec gradient_norms(const MmSpace& s, const Vec& f) {
  Vec out(s.size());
  auto fv = [&](std::size_t j) { return f[j]; };
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = gradient_norm_at(s, fv, i);
  return out;
}

// ---------------------------------------------------------------------------
// heat kernels

enum class HeatBackend { Auto, SpectralDense, SpectralTensor, Stepping, Lattice };

inline const char* to_string(HeatBackend b) {
  switch (b) {
    case HeatBackend::Auto: return "auto";
    case HeatBackend::SpectralDense: return "spectral_dense";
    case HeatBackend::SpectralTensor: return "spectral_tensor";
    case HeatBackend::Stepping: return "stepping";
    case HeatBackend::Lattice: return "lattice";
  }
  return "?";
}

struct HeatOptions {
  HeatBackend backend = HeatBackend::Auto;
  std::size_t dense_limit = 4000;
  int modes = -1;            // spectral truncation J; -1 keeps every mode
  int steps_per_column = 256;  // stepping: dt = t / steps
};

/// Eigendata of S (m-orthonormal eigenfunctions phi = M^{-1/2} u).
struct Eigendata {
  Vec lambda;
  Eigen::MatrixXd phi;  // active_size x J
};

inline std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

/// Cache layout (little-endian): 8-byte magic "GLEIG001", uint64 J, uint64 n,
/// J doubles lambda, n*J doubles phi (column-major), uint64 FNV-1a checksum of
/// everything before it.
inline void save_eigendata(const Eigendata& e, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write eigendata cache " + path);
  std::string buf("GLEIG001", 8);
  auto put = [&](const void* p, std::size_t n) { buf.append(static_cast<const char*>(p), n); };
  std::uint64_t J = e.lambda.size(), n = e.phi.rows();
  put(&J, 8);
  put(&n, 8);
  put(e.lambda.data(), J * 8);
  put(e.phi.data(), n * J * 8);
  std::uint64_t h = fnv1a(buf.data(), buf.size());
  put(&h, 8);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline Eigendata load_eigendata(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot read eigendata cache " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(buf.size() >= 32 && buf.compare(0, 8, "GLEIG001") == 0, ErrorKind::Io, "bad eigendata header");
  std::uint64_t J, n, h;
  std::memcpy(&J, buf.data() + 8, 8);
  std::memcpy(&n, buf.data() + 16, 8);
  std::size_t body = 24 + 8 * J + 8 * n * J;
  require(buf.size() == body + 8, ErrorKind::Io, "truncated eigendata cache");
  std::memcpy(&h, buf.data() + body, 8);
  require(h == fnv1a(buf.data(), body), ErrorKind::Io, "eigendata checksum mismatch");
  Eigendata e;
  e.lambda.resize(J);
  e.phi.resize(n, J);
  std::memcpy(e.lambda.data(), buf.data() + 24, 8 * J);
  std::memcpy(e.phi.data(), buf.data() + 24 + 8 * J, 8 * n * J);
  return e;
}

class HeatKernel {
 public:
  explicit HeatKernel(const LaplaceOperator& op, const HeatOptions& opt = {}) : op_(&op), opt_(opt) {
    const MmSpace& s = op.space();
    HeatBackend b = opt.backend;
    bool uniform_grid = s.is_grid() && uniform_weights(s);
    if (b == HeatBackend::Auto) {
      if (op.boundary() == Boundary::Lattice)
        b = HeatBackend::Lattice;
      else if (uniform_grid)
        b = HeatBackend::SpectralTensor;
      else if (op.active_size() <= opt.dense_limit)
        b = HeatBackend::SpectralDense;
      else
        b = HeatBackend::Stepping;
    }
    if (b == HeatBackend::Lattice)
      require(op.boundary() == Boundary::Lattice, ErrorKind::Precondition, "lattice backend needs lattice boundary");
    if (op.boundary() == Boundary::Lattice)
      require(b == HeatBackend::Lattice, ErrorKind::Precondition, "lattice boundary supports only the lattice backend");
    if (b == HeatBackend::SpectralTensor)
      require(uniform_grid, ErrorKind::Precondition, "tensor backend needs a uniformly weighted grid");
    backend_ = b;
    if (b == HeatBackend::SpectralDense) {
      int J = opt.modes < 0 ? static_cast<int>(op.active_size()) : opt.modes;
      require(J <= static_cast<int>(op.active_size()), ErrorKind::InvalidArgument,
              "spectral mode count exceeds the point count");
      Eigen::MatrixXd dense = Eigen::MatrixXd(op.symmetric());
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(dense);
      require(es.info() == Eigen::Success, ErrorKind::Numerical, "eigendecomposition failed");
      eig_.lambda = es.eigenvalues().head(J);
      eig_.phi = es.eigenvectors().leftCols(J);
      for (Eigen::Index a = 0; a < eig_.phi.rows(); ++a) eig_.phi.row(a) /= op.sqrt_mass()[a];
    } else if (b == HeatBackend::SpectralTensor) {
      setup_tensor();
    }
  }

  /// Use precomputed eigendata (e.g. from the cache file).
  HeatKernel(const LaplaceOperator& op, Eigendata eig) : op_(&op), backend_(HeatBackend::SpectralDense), eig_(std::move(eig)) {
    require(eig_.phi.rows() == static_cast<Eigen::Index>(op.active_size()), ErrorKind::InvalidArgument,
            "eigendata does not match the operator");
  }

  HeatBackend backend() const { return backend_; }
  const LaplaceOperator& op() const { return *op_; }
  const Eigendata& eigendata() const {
    require(backend_ == HeatBackend::SpectralDense, ErrorKind::Precondition, "no dense eigendata");
    return eig_;
  }

  /// p_t(x, .) on every point of the space.
  Vec column(double t, std::size_t x) const {
    require(t > 0, ErrorKind::InvalidArgument, "heat time must be positive");
    const MmSpace& s = op_->space();
    Vec out = Vec::Zero(s.size());
    switch (backend_) {
      case HeatBackend::Lattice: {
        const auto& g = s.grid();
        double tau = t / (g.spacing * g.spacing);
        auto row = scaled_bessel_row(2.0 * tau, g.side);
        std::array<int, 12> kx{}, ky{};
        s.multi_index(x, kx.data());
        double scale = 1.0 / g.cell_mass();
        for (std::size_t j = 0; j < s.size(); ++j) {
          s.multi_index(j, ky.data());
          double p = scale;
          for (int d = 0; d < g.dim; ++d) p *= row[std::abs(ky[d] - kx[d])];
          out[j] = p;
        }
        return out;
      }
      case HeatBackend::SpectralDense: {
        auto sx = op_->slot(x);
        if (sx < 0) return out;
        Vec coef = (-eig_.lambda.array() * t).exp().matrix().cwiseProduct(eig_.phi.row(sx).transpose());
        Vec col = eig_.phi * coef;
        for (std::size_t a = 0; a < op_->active_size(); ++a) out[op_->active()[a]] = col[a];
        return out;
      }
      case HeatBackend::SpectralTensor: {
        auto sx = op_->slot(x);
        if (sx < 0) return out;
        auto E = tensor_factors(t);
        const auto& g = s.grid();
        std::array<int, 12> kx{}, ky{};
        s.multi_index(x, kx.data());
        double scale = 1.0 / g.density;
        for (std::size_t a = 0; a < op_->active_size(); ++a) {
          std::size_t j = op_->active()[a];
          s.multi_index(j, ky.data());
          double p = scale;
          for (int d = 0; d < g.dim; ++d) p *= E(kx[d] - off_, ky[d] - off_);
          out[j] = p;
        }
        return out;
      }
      case HeatBackend::Stepping: {
        auto sx = op_->slot(x);
        if (sx < 0) return out;
        Vec f = Vec::Zero(s.size());
        f[x] = 1.0 / s.weight(x);
        return step(t, f);
      }
      default: break;
    }
    throw Error(ErrorKind::Precondition, "unsupported heat backend");
  }

  double value(double t, std::size_t x, std::size_t y) const {
    if (backend_ == HeatBackend::Lattice) {
      const MmSpace& s = op_->space();
      const auto& g = s.grid();
      std::array<int, 12> kx{}, ky{};
      s.multi_index(x, kx.data());
      s.multi_index(y, ky.data());
      for (int d = 0; d < g.dim; ++d) kx[d] = ky[d] - kx[d];
      return lattice_heat(g.dim, t / (g.spacing * g.spacing), kx.data(), g.side) / g.cell_mass();
    }
    return column(t, x)[y];
  }

  /// (P_t f)(y) = sum_z p_t(y, z) f(z) m_z for f on every point (values off
  /// the active set are ignored). Not available for the lattice backend.
  Vec apply(double t, const Vec& f) const {
    require(t >= 0, ErrorKind::InvalidArgument, "heat time must be nonnegative");
    const MmSpace& s = op_->space();
    if (t == 0) return f;
    switch (backend_) {
      case HeatBackend::SpectralDense: {
        Vec fm(op_->active_size());
        for (std::size_t a = 0; a < op_->active_size(); ++a) {
          std::size_t j = op_->active()[a];
          fm[a] = f[j] * s.weight(j);
        }
        Vec coef = eig_.phi.transpose() * fm;
        coef = coef.cwiseProduct((-eig_.lambda.array() * t).exp().matrix());
        Vec col = eig_.phi * coef;
        Vec out = Vec::Zero(s.size());
        for (std::size_t a = 0; a < op_->active_size(); ++a) out[op_->active()[a]] = col[a];
        return out;
      }
      case HeatBackend::SpectralTensor: {
        const auto& g = s.grid();
        auto E = tensor_factors(t);
        int m = static_cast<int>(E.rows());
        std::size_t total = 1;
        for (int d = 0; d < g.dim; ++d) total *= m;
        // gather active values into an m^n tensor (axis 0 fastest)
        std::vector<double> cur(total), nxt(total);
        std::array<int, 12> k{};
        for (std::size_t a = 0; a < op_->active_size(); ++a) {
          std::size_t j = op_->active()[a];
          s.multi_index(j, k.data());
          std::size_t idx = 0;
          for (int d = g.dim - 1; d >= 0; --d) idx = idx * m + (k[d] - off_);
          cur[idx] = f[j] * s.weight(j);
        }
        std::size_t stride = 1;
        for (int d = 0; d < g.dim; ++d) {
          std::size_t block = stride * m;
          for (std::size_t base = 0; base < total; base += block)
            for (std::size_t inner = 0; inner < stride; ++inner)
              for (int i = 0; i < m; ++i) {
                double acc = 0.0;
                for (int j = 0; j < m; ++j) acc += E(i, j) * cur[base + inner + j * stride];
                nxt[base + inner + i * stride] = acc;
              }
          std::swap(cur, nxt);
          stride = block;
        }
        Vec out = Vec::Zero(s.size());
        double scale = 1.0 / g.density;
        for (std::size_t a = 0; a < op_->active_size(); ++a) {
          std::size_t j = op_->active()[a];
          s.multi_index(j, k.data());
          std::size_t idx = 0;
          for (int d = g.dim - 1; d >= 0; --d) idx = idx * m + (k[d] - off_);
          out[j] = cur[idx] * scale;
        }
        return out;
      }
      case HeatBackend::Stepping:
        return step(t, f);
      default: break;
    }
    throw Error(ErrorKind::Precondition, "heat semigroup action unavailable for this backend");
  }

 private:
  static bool uniform_weights(const MmSpace& s) {
    double w0 = s.weight(0);
    for (double w : s.weights())
      if (std::abs(w - w0) > 1e-14 * w0) return false;
    return true;
  }

  // 1-D factor operators: Dirichlet = second difference on the interior
  // nodes, Free = path-graph Laplacian on all nodes; eigenvectors normalised
  // so that E(t) is the 1-D kernel against the weight h.
  void setup_tensor() {
    const MmSpace& s = op_->space();
    const auto& g = s.grid();
    bool dir = op_->boundary() == Boundary::Dirichlet;
    off_ = dir ? 1 : 0;
    int m = dir ? g.side - 2 : g.side;
    double h2 = g.spacing * g.spacing;
    Eigen::MatrixXd T = Eigen::MatrixXd::Zero(m, m);
    for (int i = 0; i < m; ++i) {
      if (i + 1 < m) {
        T(i, i + 1) = T(i + 1, i) = -1.0 / h2;
        T(i, i) += 1.0 / h2;
        T(i + 1, i + 1) += 1.0 / h2;
      }
    }
    if (dir) {
      T(0, 0) += 1.0 / h2;
      T(m - 1, m - 1) += 1.0 / h2;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(T);
    lam1_ = es.eigenvalues();
    vec1_ = es.eigenvectors() / std::sqrt(g.spacing);
  }

  Eigen::MatrixXd tensor_factors(double t) const {
    std::lock_guard<std::mutex> lock(*cache_mutex_);
    auto it = tensor_cache_.find(t);
    if (it != tensor_cache_.end()) return it->second;
    Eigen::MatrixXd E = vec1_ * (-lam1_.array() * t).exp().matrix().asDiagonal() * vec1_.transpose();
    if (tensor_cache_.size() > 64) tensor_cache_.clear();
    tensor_cache_.emplace(t, E);
    return E;
  }

  // Crank-Nicolson on v = M^{1/2} u.
  Vec step(double t, const Vec& f) const {
    const MmSpace& s = op_->space();
    int nsteps = opt_.steps_per_column;
    double dt = t / nsteps;
    std::size_t na = op_->active_size();
    SpMat I(na, na);
    I.setIdentity();
    SpMat A = I + 0.5 * dt * op_->symmetric();
    SpMat B = I - 0.5 * dt * op_->symmetric();
    Eigen::SimplicialLDLT<SpMat> solver(A);
    require(solver.info() == Eigen::Success, ErrorKind::Numerical, "stepping factorisation failed");
    Vec v(na);
    for (std::size_t a = 0; a < na; ++a) v[a] = f[op_->active()[a]] * op_->sqrt_mass()[a];
    for (int k = 0; k < nsteps; ++k) v = solver.solve(B * v);
    Vec out = Vec::Zero(s.size());
    for (std::size_t a = 0; a < na; ++a) out[op_->active()[a]] = v[a] / op_->sqrt_mass()[a];
    return out;
  }

  const LaplaceOperator* op_;
  HeatOptions opt_;
  HeatBackend backend_ = HeatBackend::Auto;
  Eigendata eig_;
  Vec lam1_;
  Eigen::MatrixXd vec1_;
  int off_ = 0;
  std::shared_ptr<std::mutex> cache_mutex_ = std::make_shared<std::mutex>();
  mutable std::map<double, Eigen::MatrixXd> tensor_cache_;
};

// ---------------------------------------------------------------------------
// verification

struct HeatPropertyReport {
  double semigroup_residual = 0.0;  // relative to max_y p_{t+s}(x, y)
  double symmetry_residual = 0.0;
  double positivity_violation = 0.0;  // most negative value, relative
  double max_mass = 0.0;
  double min_mass = kInf;
  double mass_excess = 0.0;  // max(mass - 1, 0)
  std::size_t checks = 0;
};

/// Semigroup law p_{t+s}(x,y) = sum_z p_t(x,z) p_s(z,y) m_z, symmetry,
/// positivity and the mass bound over the sample.
inline HeatPropertyReport verify_heat_properties(const HeatKernel& hk, const std::vector<double>& times,
                                                 const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  require(times.size() >= 2, ErrorKind::Precondition, "at least two times are required");
  const MmSpace& s = hk.op().space();
  HeatPropertyReport rep;
  std::vector<std::size_t> sources;
  for (auto [x, y] : pairs) sources.push_back(x);
  std::sort(sources.begin(), sources.end());
  sources.erase(std::unique(sources.begin(), sources.end()), sources.end());
  for (std::size_t ti = 0; ti < times.size(); ++ti) {
    for (std::size_t si = ti; si < times.size(); ++si) {
      double t = times[ti], u = times[si];
      std::map<std::size_t, Vec> ct, cu, ctu;
      for (std::size_t x : sources) {
        ct[x] = hk.column(t, x);
        cu[x] = hk.column(u, x);
        ctu[x] = hk.column(t + u, x);
      }
      for (auto [x, y] : pairs) {
        const Vec& pt = ct[x];
        Vec pu_y = cu.count(y) ? cu[y] : hk.column(u, y);
        double scale = ctu[x].cwiseAbs().maxCoeff();
        CompensatedSum acc;
        for (std::size_t z = 0; z < s.size(); ++z) acc.add(pt[z] * pu_y[z] * s.weight(z));
        rep.semigroup_residual = std::max(rep.semigroup_residual, std::abs(acc.value() - ctu[x][y]) / scale);
        double sym = std::abs(pt[y] - (ct.count(y) ? ct[y][x] : hk.column(t, y)[x])) / ct[x].cwiseAbs().maxCoeff();
        rep.symmetry_residual = std::max(rep.symmetry_residual, sym);
        ++rep.checks;
      }
    }
  }
  for (double t : times)
    for (std::size_t x : sources) {
      Vec p = hk.column(t, x);
      double scale = p.cwiseAbs().maxCoeff();
      CompensatedSum mass;
      for (std::size_t z = 0; z < s.size(); ++z) mass.add(p[z] * s.weight(z));
      rep.positivity_violation = std::max(rep.positivity_violation, -p.minCoeff() / scale);
      rep.max_mass = std::max(rep.max_mass, mass.value());
      rep.min_mass = std::min(rep.min_mass, mass.value());
    }
  rep.mass_excess = std::max(0.0, rep.max_mass - 1.0);
  return rep;
}

struct GaussianFit {
  double C1 = kInf;
  double c = 0.0;
  double worst_upper = 0.0;     // max p / envelope over the sample
  double worst_lower = 0.0;     // max envelope / p
  double worst_gradient = 0.0;  // max |grad p| / envelope
  std::size_t used = 0;
  std::size_t excluded = 0;
  bool violated = false;
  std::string diagnostic;
};

struct GaussianFitOptions {
  double cap = 1e6;
  double core_fraction = 0.25;
  double t_min_cells = 4.0;  // t >= t_min_cells * h^2
  double t_max = -1.0;       // default: (core radius)^2
};

/// Fit the smallest C1 >= 1 (then the smallest c >= 0 if needed) with
///   C1^{-1} e^{-d^2/3t - ct} <= V(x, sqrt t) p_t(x,y) <= C1 e^{-d^2/5t + ct},
///   sqrt(t) V(x, sqrt t) |grad p_t(x,.)|(y) <= C1 e^{-d^2/5t + ct}.
inline GaussianFit fit_gaussian_bounds(const HeatKernel& hk, const std::vector<double>& times,
                                       const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                                       const GaussianFitOptions& opt = {}) {
  const MmSpace& s = hk.op().space();
  double h = s.is_grid() ? s.grid().spacing : 0.0;
  if (!s.is_grid())
    for (const auto& e : s.edges()) h = std::max(h, e.length);
  double core_radius = s.half_width() * (1.0 - opt.core_fraction);
  double tmax = opt.t_max > 0 ? opt.t_max : core_radius * core_radius;
  double tmin = opt.t_min_cells * h * h;

  struct Sample {
    double t, d, vp, vg;  // V p, sqrt(t) V |grad p|
  };
  std::vector<Sample> samples;
  GaussianFit fit;
  std::map<std::size_t, std::vector<std::size_t>> by_source;
  for (auto [x, y] : pairs) by_source[x].push_back(y);
  for (double t : times) {
    if (t < tmin || t > tmax) {
      fit.excluded += pairs.size();
      continue;
    }
    for (auto& [x, ys] : by_source) {
      Vec col = hk.column(t, x);
      double V = volume(s, x, std::sqrt(t));
      std::function<double(const int*)> ext;
      if (hk.backend() == HeatBackend::Lattice) {
        const auto& g = s.grid();
        std::array<int, 12> kx{};
        s.multi_index(x, kx.data());
        ext = [&, kx](const int* k) {
          std::array<int, 12> dk{};
          for (int d = 0; d < g.dim; ++d) dk[d] = k[d] - kx[d];
          return lattice_heat(g.dim, t / (h * h), dk.data(), g.side + 2) / g.cell_mass();
        };
      }
      auto fv = [&](std::size_t j) { return col[j]; };
      for (std::size_t y : ys) {
        if (!s.in_core(x, opt.core_fraction) || !s.in_core(y, opt.core_fraction)) {
          ++fit.excluded;
          continue;
        }
        double grad = gradient_norm_at(s, fv, y, ext);
        samples.push_back({t, s.dist(x, y), V * col[y], std::sqrt(t) * V * grad});
      }
    }
  }
  fit.used = samples.size();
  auto evaluate = [&](double c, GaussianFit& f) {
    f.worst_upper = f.worst_lower = f.worst_gradient = 0.0;
    for (const auto& q : samples) {
      double up = std::exp(-q.d * q.d / (5 * q.t) + c * q.t);
      double lo = std::exp(-q.d * q.d / (3 * q.t) - c * q.t);
      f.worst_upper = std::max(f.worst_upper, q.vp / up);
      f.worst_lower = std::max(f.worst_lower, q.vp > 0 ? lo / q.vp : kInf);
      f.worst_gradient = std::max(f.worst_gradient, q.vg / up);
    }
    return std::max({1.0, f.worst_upper, f.worst_lower, f.worst_gradient});
  };
  double C1 = evaluate(0.0, fit);
  if (C1 <= opt.cap) {
    fit.C1 = C1;
    fit.c = 0.0;
    return fit;
  }
  // raise c geometrically until the cap is met
  for (double c = 1e-3; c <= 1e6; c *= 2) {
    C1 = evaluate(c, fit);
    if (C1 <= opt.cap) {
      fit.C1 = C1;
      fit.c = c;
      return fit;
    }
  }
  fit.violated = true;
  fit.diagnostic = "Gaussian bound violated";
  return fit;
}

}  // namespace greenlab
