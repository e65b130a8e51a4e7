#pragma once

#include "greenlab/green.hpp"

namespace greenlab {

// ---------------------------------------------------------------------------
// vector field catalogue

enum class FieldKind { Constant, Rotation, Shear, Radial, OtDrift };

inline const char* to_string(FieldKind k) {
  switch (k) {
    case FieldKind::Constant: return "constant";
    case FieldKind::Rotation: return "rotation";
    case FieldKind::Shear: return "shear";
    case FieldKind::Radial: return "radial";
    case FieldKind::OtDrift: return "ot_drift";
  }
  return "?";
}

inline FieldKind field_kind_from_string(const std::string& s) {
  for (FieldKind k : {FieldKind::Constant, FieldKind::Rotation, FieldKind::Shear, FieldKind::Radial, FieldKind::OtDrift})
    if (s == to_string(k)) return k;
  throw Error(ErrorKind::Config, "unknown field kind '" + s + "'");
}

struct FieldParams {
  int dim = 3;
  double amplitude = 1.0;
  Coord vector;             // constant: velocity; ot_drift: translation
  int plane_i = 0;          // rotation and shear planes
  int plane_j = 1;
  double alpha = 0.7;       // shear exponent
  double shear_length = 1.0;  // shear saturates at |x_j| = shear_length
  double dilation = 1.0;    // ot_drift: x -> center + dilation (x - center) + vector
  Coord center;             // cutoff and dilation center (default origin)
  double plateau = 0.5;     // cutoff equals 1 on |x - center| <= plateau
  double support = 0.75;    // and vanishes beyond support
  double horizon = 1.0;
  double domain_radius = kInf;  // largest |x - center| inside the core, checked against support
};

/// C^2 radial cutoff: 1 on [0, R1], quintic smoothstep down to 0 at R2.
struct Cutoff {
  double R1, R2;
  // value, first and second radial derivative
  std::array<double, 3> radial(double r) const {
    if (r <= R1) return {1.0, 0.0, 0.0};
    if (r >= R2) return {0.0, 0.0, 0.0};
    double w = R2 - R1, u = (r - R1) / w;
    double s = u * u * u * (10 - 15 * u + 6 * u * u);
    double ds = 30 * u * u * (1 - u) * (1 - u);
    double dds = 60 * u * (1 - u) * (1 - 2 * u);
    return {1.0 - s, -ds / w, -dds / (w * w)};
  }
  /// chi, grad chi, Hessian chi at y (relative to the center).
  void eval(const Coord& y, double& chi, Coord& grad, Mat& hess, bool want_hess = true) const {
    int n = static_cast<int>(y.size());
    double r = y.norm();
    auto [c, c1, c2] = radial(r);
    chi = c;
    grad = Coord::Zero(n);
    if (want_hess) hess = Mat::Zero(n, n);
    if (c1 == 0.0 && c2 == 0.0) return;
    Coord e = y / r;
    grad = c1 * e;
    if (want_hess) hess = c2 * e * e.transpose() + (c1 / r) * (Mat::Identity(n, n) - e * e.transpose());
  }
};

/// Velocity field b(t, x) on ambient coordinates with its Jacobian.
class VectorFieldSpec {
 public:
  explicit VectorFieldSpec(FieldKind kind, FieldParams p) : kind_(kind), p_(std::move(p)) {
    int n = p_.dim;
    require(n >= 1 && n <= 12, ErrorKind::InvalidArgument, "field dimension must lie in 1..12");
    if (p_.center.size() == 0) p_.center = Coord::Zero(n);
    if (p_.vector.size() == 0) p_.vector = Coord::Zero(n);
    require(p_.center.size() == n && p_.vector.size() == n, ErrorKind::InvalidArgument, "field vectors have wrong size");
    cut_ = {p_.plateau, p_.support};
    switch (kind_) {
      case FieldKind::Shear:
        require(p_.alpha > 0.5 && p_.alpha < 1.0, ErrorKind::InvalidArgument, "shear exponent must lie in (1/2, 1)");
        [[fallthrough]];
      case FieldKind::Rotation:
        require(n >= 2 && p_.plane_i != p_.plane_j && p_.plane_i >= 0 && p_.plane_j >= 0 && p_.plane_i < n &&
                    p_.plane_j < n,
                ErrorKind::InvalidArgument, "field plane must name two distinct axes");
        break;
      case FieldKind::OtDrift:
        require(p_.dilation > 0, ErrorKind::InvalidArgument, "dilation must be positive");
        break;
      default:
        break;
    }
    if (cutoff_applies())
      require(p_.plateau > 0 && p_.plateau < p_.support, ErrorKind::InvalidArgument, "need 0 < plateau < support");
    require(!cutoff_applies() || p_.support <= p_.domain_radius, ErrorKind::InvalidArgument,
            "field support exceeds the core region");
  }

  FieldKind kind() const { return kind_; }
  const FieldParams& params() const { return p_; }
  int dim() const { return p_.dim; }
  bool autonomous() const { return kind_ != FieldKind::OtDrift || p_.dilation == 1.0; }
  /// Shear and radial fields carry the compact cutoff; rigid motions and
  /// transport drifts are global.
  bool cutoff_applies() const { return kind_ == FieldKind::Shear || kind_ == FieldKind::Radial; }
  /// Rigid motions have vanishing symmetric derivative and divergence.
  bool rigid() const {
    return kind_ == FieldKind::Constant || kind_ == FieldKind::Rotation ||
           (kind_ == FieldKind::OtDrift && p_.dilation == 1.0);
  }

  Coord velocity(double t, const Coord& x) const {
    Coord b;
    Mat J;
    eval(t, x, b, J, false);
    return b;
  }
  Mat jacobian(double t, const Coord& x) const {
    Coord b;
    Mat J;
    eval(t, x, b, J, true);
    return J;
  }

  /// sup |b| over the domain (declared bound).
  double sup_norm() const {
    double A = std::abs(p_.amplitude);
    switch (kind_) {
      case FieldKind::Constant: return A * p_.vector.norm();
      case FieldKind::Rotation: return A * p_.domain_radius;
      case FieldKind::Shear: {
        // |s| <= 1, |S(z)| <= |z| <= R2, |grad chi| <= 1.875 / (R2 - R1)
        double g = 1.875 / (p_.support - p_.plateau);
        return A * (1.0 + 2.0 * g * p_.support);
      }
      case FieldKind::Radial: return A * p_.support;
      case FieldKind::OtDrift: {
        double k = std::abs(p_.dilation - 1.0) / std::min(1.0, p_.dilation);
        return p_.vector.norm() + k * p_.domain_radius;
      }
    }
    return 0.0;
  }

  /// Local Lipschitz bound at distance h from any singular set. Cutoff
  /// fields use the largest Frobenius norm of the Jacobian on a sampling grid
  /// over the support; the shear adds its analytic singular part at |x_j| = h.
  double lipschitz(double h) const {
    double A = std::abs(p_.amplitude);
    switch (kind_) {
      case FieldKind::Constant: return 0.0;
      case FieldKind::Rotation: return A;
      case FieldKind::OtDrift: return std::abs(p_.dilation - 1.0) / std::min(1.0, p_.dilation);
      case FieldKind::Radial: return sampled_lipschitz(0.0);
      case FieldKind::Shear: {
        double L = p_.shear_length;
        return sampled_lipschitz(h) + A * p_.alpha * std::pow(std::min(h, L) / L, p_.alpha - 1.0) / L;
      }
    }
    return 0.0;
  }

  /// Largest step permitted by dt <= min(0.1 / Lip, h / |b|_inf).
  double max_step(double h) const {
    double dt = kInf;
    double L = lipschitz(h), B = sup_norm();
    if (L > 0) dt = std::min(dt, 0.1 / L);
    if (B > 0 && std::isfinite(B)) dt = std::min(dt, h / B);
    return std::isfinite(dt) ? dt : p_.horizon;
  }

  /// Distance to the singular shear hyperplane (+inf for other kinds).
  double singular_coordinate(const Coord& x) const {
    if (kind_ != FieldKind::Shear) return kInf;
    return std::abs(x[p_.plane_j] - p_.center[p_.plane_j]);
  }

 private:
  // max |J|_F over a grid on the support box, skipping |x_j| < h for the shear
  double sampled_lipschitz(double h) const {
    int n = p_.dim;
    int per = std::max(4, static_cast<int>(std::pow(2e5, 1.0 / n)));
    std::size_t total = 1;
    for (int d = 0; d < n; ++d) total *= static_cast<std::size_t>(per);
    double R = p_.support, best = 0.0;
    for (std::size_t m = 0; m < total; ++m) {
      std::size_t r = m;
      Coord x(n);
      for (int d = 0; d < n; ++d) {
        x[d] = p_.center[d] - R + 2.0 * R * (static_cast<double>(r % per) + 0.5) / per;
        r /= per;
      }
      if (singular_coordinate(x) < h) continue;
      Coord b;
      Mat J;
      eval(0.0, x, b, J, true);
      if (kind_ == FieldKind::Shear) {
        // drop the singular entry, accounted for analytically
        double z = std::abs(x[p_.plane_j] - p_.center[p_.plane_j]);
        if (z < p_.shear_length) {
          double chi = cut_.radial((x - p_.center).norm())[0];
          J(p_.plane_i, p_.plane_j) -= p_.amplitude * chi * p_.alpha * std::pow(z / p_.shear_length, p_.alpha - 1.0) / p_.shear_length;
        }
      }
      best = std::max(best, J.norm());
    }
    return best;
  }

  void eval(double t, const Coord& x, Coord& b, Mat& J, bool want_j) const {
    int n = p_.dim;
    require(x.size() == n, ErrorKind::InvalidArgument, "point has wrong dimension");
    Coord y = x - p_.center;
    double A = p_.amplitude;
    b = Coord::Zero(n);
    if (want_j) J = Mat::Zero(n, n);
    switch (kind_) {
      case FieldKind::Constant:
        b = A * p_.vector;
        return;
      case FieldKind::Rotation: {
        int i = p_.plane_i, j = p_.plane_j;
        b[i] = -A * y[j];
        b[j] = A * y[i];
        if (want_j) {
          J(i, j) = -A;
          J(j, i) = A;
        }
        return;
      }
      case FieldKind::Radial: {
        double chi;
        Coord g;
        Mat H;
        cut_.eval(y, chi, g, H, false);
        b = A * chi * y;
        if (want_j) J = A * (chi * Mat::Identity(n, n) + y * g.transpose());
        return;
      }
      case FieldKind::Shear: {
        // stream function psi = chi S(y_j) in the (i, j) plane with
        // S' = s(y_j) = sign(y_j) min(|y_j| / L, 1)^alpha, so that
        // b_i = d_j psi, b_j = -d_i psi is divergence free and equals s e_i
        // on the plateau
        int i = p_.plane_i, j = p_.plane_j;
        double L = p_.shear_length, a = p_.alpha;
        double z = y[j], az = std::abs(z), sg = z > 0 ? 1.0 : (z < 0 ? -1.0 : 0.0);
        double s, ds, S;
        if (az < L) {
          double pw = std::pow(az / L, a);
          s = sg * pw;
          ds = az > 0 ? a * pw / az : kInf;
          S = az * pw / (a + 1.0);
        } else {
          s = sg;
          ds = 0.0;
          S = L / (a + 1.0) + (az - L);
        }
        double chi;
        Coord g;
        Mat H;
        cut_.eval(y, chi, g, H, want_j);
        b[i] = A * (chi * s + g[j] * S);
        b[j] = -A * g[i] * S;
        if (want_j) {
          for (int k = 0; k < n; ++k) {
            double dk_s = k == j ? ds : 0.0;
            double dk_S = k == j ? s : 0.0;
            double chi_dks = (k == j && chi == 0.0) ? 0.0 : chi * dk_s;
            J(i, k) = A * (g[k] * s + chi_dks + H(j, k) * S + g[j] * dk_S);
            J(j, k) = -A * (H(i, k) * S + g[i] * dk_S);
          }
        }
        return;
      }
      case FieldKind::OtDrift: {
        double k = p_.dilation - 1.0;
        double den = 1.0 + t * k;
        b = p_.vector + (k / den) * (y - t * p_.vector);
        if (want_j) J = (k / den) * Mat::Identity(n, n);
        return;
      }
    }
  }

  FieldKind kind_;
  FieldParams p_;
  Cutoff cut_{0.5, 0.75};
};

struct FieldDerivatives {
  double divergence;
  double sym_norm;  // Hilbert-Schmidt norm of (J + J^T) / 2
};

inline FieldDerivatives field_derivatives(const VectorFieldSpec& f, double t, const Coord& x) {
  Mat J = f.jacobian(t, x);
  Mat S = 0.5 * (J + J.transpose());
  return {J.trace(), S.norm()};
}

/// Central finite-difference Jacobian, used to validate the analytic forms.
inline Mat finite_difference_jacobian(const VectorFieldSpec& f, double t, const Coord& x, double step = 1e-6) {
  int n = f.dim();
  Mat J(n, n);
  for (int k = 0; k < n; ++k) {
    Coord a = x, b = x;
    a[k] += step;
    b[k] -= step;
    J.col(k) = (f.velocity(t, a) - f.velocity(t, b)) / (2 * step);
  }
  return J;
}

/// g = |grad_sym b| + |div b| averaged over the cell of each grid point
/// (q^n midpoint subsamples), which keeps the integrable shear singularity
/// finite on lattice points.
inline Vec field_density(const MmSpace& s, const VectorFieldSpec& f, double t = 0.0, int q = 4) {
  require(s.is_grid(), ErrorKind::Precondition, "field density needs a grid space");
  const auto& g = s.grid();
  int n = g.dim;
  require(n == f.dim(), ErrorKind::InvalidArgument, "field and space dimensions differ");
  std::size_t sub = 1;
  for (int d = 0; d < n; ++d) sub *= q;
  Vec out(s.size());
  parallel_for(s.size(), [&](std::size_t p) {
    Coord x = s.coord(p);
    double acc = 0.0;
    for (std::size_t m = 0; m < sub; ++m) {
      Coord y = x;
      std::size_t r = m;
      for (int d = 0; d < n; ++d) {
        int k = static_cast<int>(r % q);
        r /= q;
        y[d] += g.spacing * ((k + 0.5) / q - 0.5);
      }
      auto fd = field_derivatives(f, t, y);
      acc += fd.sym_norm + std::abs(fd.divergence);
    }
    out[p] = acc / static_cast<double>(sub);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Green function at off-lattice displacements

/// Tensor Catmull-Rom interpolant of the translation-invariant lattice Green
/// function. C^1 in the displacement, exact on lattice nodes, with the
/// analytic gradient of the interpolant; on nodes the gradient is the central
/// difference.
class GreenInterpolant {
 public:
  explicit GreenInterpolant(const GreenField& field) : field_(&field) {
    require(field.lattice_mode(), ErrorKind::Precondition, "off-lattice Green values need the lattice boundary");
    const auto& g = field.space().grid();
    n_ = g.dim;
    h_ = g.spacing;
    reach_ = field.lattice()->kmax() - 2;
  }

  int dim() const { return n_; }
  /// Displacements with |delta_d| / h < reach() can be interpolated.
  int reach() const { return reach_; }

  /// Gamma(delta) = G(p, p + delta) and its gradient in delta.
  double value(const Coord& delta, Coord* grad = nullptr) const {
    std::array<int, 12> base{};
    std::array<std::array<double, 4>, 12> w{}, dw{};
    for (int d = 0; d < n_; ++d) {
      double u = delta[d] / h_;
      double fl = std::floor(u);
      require(std::abs(fl) <= reach_, ErrorKind::Precondition, "displacement outside the Green table");
      base[d] = static_cast<int>(fl) - 1;
      double f = u - fl, f2 = f * f, f3 = f2 * f;
      w[d] = {0.5 * (-f3 + 2 * f2 - f), 0.5 * (3 * f3 - 5 * f2 + 2), 0.5 * (-3 * f3 + 4 * f2 + f), 0.5 * (f3 - f2)};
      dw[d] = {0.5 * (-3 * f2 + 4 * f - 1) / h_, 0.5 * (9 * f2 - 10 * f) / h_, 0.5 * (-9 * f2 + 8 * f + 1) / h_,
               0.5 * (3 * f2 - 2 * f) / h_};
    }
    std::size_t total = std::size_t{1} << (2 * n_);
    double val = 0.0;
    std::array<double, 12> gr{};
    std::array<int, 12> k{};
    for (std::size_t m = 0; m < total; ++m) {
      std::size_t r = m;
      double prod = 1.0;
      std::array<int, 12> idx{};
      for (int d = 0; d < n_; ++d) {
        idx[d] = static_cast<int>(r & 3);
        r >>= 2;
        k[d] = base[d] + idx[d];
        prod *= w[d][idx[d]];
      }
      double gk = field_->lattice_value(k.data());
      val += prod * gk;
      if (grad) {
        for (int d = 0; d < n_; ++d) {
          double q = dw[d][idx[d]];
          for (int e = 0; e < n_; ++e)
            if (e != d) q *= w[e][idx[e]];
          gr[d] += q * gk;
        }
      }
    }
    if (grad) {
      grad->resize(n_);
      for (int d = 0; d < n_; ++d) (*grad)[d] = gr[d];
    }
    return val;
  }

  double d_g(const Coord& p, const Coord& q) const {
    Coord delta = q - p;
    if (delta.squaredNorm() == 0.0) return 0.0;
    double G = value(delta);
    return G > 0 ? 1.0 / G : kInf;
  }

 private:
  const GreenField* field_;
  int n_ = 0;
  double h_ = 1.0;
  int reach_ = 0;
};

}  // namespace greenlab
