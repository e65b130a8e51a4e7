#pragma once

#include "greenlab/core.hpp"

#include <array>
#include <vector>

namespace greenlab {

/// e^{-x} I_k(x) for k = 0..kmax. Miller backward recurrence normalised by
/// I_0 + 2 sum I_k = e^x; Hankel asymptotic series once x >> kmax^2.
inline std::vector<double> scaled_bessel_row(double x, int kmax) {
  std::vector<double> out(kmax + 1, 0.0);
  if (x == 0.0) {
    out[0] = 1.0;
    return out;
  }
  if (x >= std::max(700.0, 50.0 * kmax * kmax)) {
    double pre = 1.0 / std::sqrt(2.0 * kPi * x);
    for (int k = 0; k <= kmax; ++k) {
      double mu = 4.0 * k * k;
      double term = 1.0, sum = 1.0;
      for (int j = 1; j < 40; ++j) {
        double next = -term * (mu - (2.0 * j - 1) * (2.0 * j - 1)) / (j * 8.0 * x);
        if (std::abs(next) >= std::abs(term)) break;
        term = next;
        sum += term;
        if (std::abs(term) < 1e-18 * std::abs(sum)) break;
      }
      out[k] = pre * sum;
    }
    return out;
  }
  int M = kmax + 30 + static_cast<int>(std::ceil(12.0 * std::sqrt(x)));
  double ip1 = 0.0, i = 1e-280, norm = 0.0;
  for (int k = M; k >= 1; --k) {
    double im1 = ip1 + (2.0 * k / x) * i;
    if (k <= kmax) out[k] = i;
    norm += 2.0 * i;
    ip1 = i;
    i = im1;
    if (i > 1e250) {
      double f = 1e-250;
      i *= f;
      ip1 *= f;
      norm *= f;
      for (int q = k; q <= kmax; ++q) out[q] *= f;
    }
  }
  out[0] = i;
  norm += i;
  for (auto& v : out) v /= norm;
  return out;
}

/// Green function of the unit-spacing lattice Laplacian on Z^n (Dirichlet at
/// infinity) with counting measure:
///   g(k) = int_{tau0}^inf e^{-a tau} prod_d e^{-2tau} I_{k_d}(2tau) dtau.
/// Physical values on a lattice of spacing h and density rho follow from
/// G = h^{2-n} g / rho with a = c h^2 and tau0 = eps / h^2.
class LatticeGreen {
 public:
  LatticeGreen(int dim, double a, double tau0, int kmax) : dim_(dim), kmax_(kmax) {
    require(dim >= 1 && dim <= 6, ErrorKind::InvalidArgument, "lattice dimension must lie in 1..6");
    require(a >= 0 && tau0 >= 0, ErrorKind::InvalidArgument, "shift and cutoff must be nonnegative");
    require(kmax >= 1, ErrorKind::InvalidArgument, "lattice table needs kmax >= 1");
    if (a == 0.0 && dim <= 2)
      throw Error(ErrorKind::GreenUndefined, "Green function undefined on parabolic/compact backend");
    const double du = 0.05;
    double u_lo = -36.0;
    double u_hi = 32.0;
    if (a > 0) u_hi = std::min(u_hi, std::log(60.0 / a) + 1.0);
    int nodes = static_cast<int>(std::ceil((u_hi - u_lo) / du)) + 1;
    weights_.resize(nodes);
    table_.resize(static_cast<std::size_t>(nodes) * (kmax + 1));
    for (int i = 0; i < nodes; ++i) {
      double u = u_lo + i * du;
      double tau = tau0 + std::exp(u);
      double w = (i == 0 || i == nodes - 1) ? 0.5 * du : du;
      weights_[i] = w * std::exp(u) * std::exp(-a * tau);
      auto row = scaled_bessel_row(2.0 * tau, kmax);
      std::copy(row.begin(), row.end(), table_.begin() + static_cast<std::size_t>(i) * (kmax + 1));
    }
    if (a == 0.0) {
      double T = tau0 + std::exp(u_hi);
      double half = 0.5 * dim;
      tail_ = std::pow(4.0 * kPi, -half) * std::pow(T, 1.0 - half) / (half - 1.0);
    }
    std::size_t total = 1;
    for (int d = 0; d < dim; ++d) total *= static_cast<std::size_t>(kmax + 1);
    values_.assign(total, std::numeric_limits<double>::quiet_NaN());
    std::vector<std::array<int, 6>> sorted;
    std::array<int, 6> k{};
    enumerate_sorted(0, 0, k, sorted);
    std::vector<double> vals(sorted.size());
    parallel_for(sorted.size(), [&](std::size_t s) { vals[s] = integrate(sorted[s].data()); });
    for (std::size_t s = 0; s < sorted.size(); ++s) values_[flat(sorted[s].data())] = vals[s];
  }

  int dim() const { return dim_; }
  int kmax() const { return kmax_; }

  /// g at an integer displacement; components beyond kmax are an error.
  double operator()(const int* k) const {
    std::array<int, 6> s{};
    for (int d = 0; d < dim_; ++d) {
      s[d] = std::abs(k[d]);
      require(s[d] <= kmax_, ErrorKind::Precondition, "lattice displacement outside the Green table");
    }
    std::sort(s.begin(), s.begin() + dim_);
    return values_[flat(s.data())];
  }

 private:
  void enumerate_sorted(int d, int lo, std::array<int, 6>& k, std::vector<std::array<int, 6>>& out) {
    if (d == dim_) {
      out.push_back(k);
      return;
    }
    for (int v = lo; v <= kmax_; ++v) {
      k[d] = v;
      enumerate_sorted(d + 1, v, k, out);
    }
  }
  std::size_t flat(const int* k) const {
    std::size_t i = 0;
    for (int d = 0; d < dim_; ++d) i = i * (kmax_ + 1) + static_cast<std::size_t>(k[d]);
    return i;
  }
  double integrate(const int* k) const {
    CompensatedSum acc;
    std::size_t stride = kmax_ + 1;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      double p = weights_[i];
      const double* row = table_.data() + i * stride;
      for (int d = 0; d < dim_; ++d) p *= row[k[d]];
      acc.add(p);
    }
    acc.add(tail_);
    return acc.value();
  }

  int dim_;
  int kmax_;
  double tail_ = 0.0;
  std::vector<double> weights_;
  std::vector<double> table_;
  std::vector<double> values_;
};

/// Heat kernel of the unit lattice at time tau (counting measure).
inline double lattice_heat(int dim, double tau, const int* k, int kmax) {
  auto row = scaled_bessel_row(2.0 * tau, kmax);
  double p = 1.0;
  for (int d = 0; d < dim; ++d) p *= row[std::abs(k[d])];
  return p;
}

}  // namespace greenlab
