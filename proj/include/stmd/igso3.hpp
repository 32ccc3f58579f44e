#pragma once

#include <memory>
#include <vector>

#include "stmd/rng.hpp"
#include "stmd/se3.hpp"

namespace stmd {

/// Exponent convention of the SO(3) heat-kernel series.
enum class HeatKernelExponent {
  half,  ///< exp(-l(l+1) sigma^2 / 2): sigma is the tangent-space std at small sigma
  full,  ///< exp(-l(l+1) sigma^2)
};

/// IGSO3 density with respect to the normalized Haar measure, evaluated from
/// the truncated series. Integrates to one against (1 - cos w)/pi dw on [0, pi].
double igso3_density(double omega, double sigma, HeatKernelExponent e = HeatKernelExponent::half);

/// d/dw log f(w; sigma) from the differentiated series.
double igso3_dlog_density(double omega, double sigma, HeatKernelExponent e = HeatKernelExponent::half);

/// Marginal density of the rotation angle: f(w) (1 - cos w) / pi.
double igso3_angle_pdf(double omega, double sigma, HeatKernelExponent e = HeatKernelExponent::half);

/// Uniformly distributed rotation.
Rotation sample_uniform_rotation(Rng& rng);

/// Tabulated IGSO3 quantities on an omega x log-sigma grid.
///
/// Sigma values above the table raise std::out_of_range. Values below the
/// table use the small-sigma limit, where the distribution is the exponential
/// of an isotropic tangent-space Gaussian.
class IGSO3Table {
 public:
  IGSO3Table(double sigma_lo, double sigma_hi, HeatKernelExponent exponent = HeatKernelExponent::half,
             int n_omega = 2048, int n_sigma = 64);

  /// Shared immutable table for the given range, built on first use.
  static std::shared_ptr<const IGSO3Table> shared(double sigma_lo, double sigma_hi,
                                                  HeatKernelExponent exponent = HeatKernelExponent::half);

  double sigma_lo() const { return sigma_lo_; }
  double sigma_hi() const { return sigma_hi_; }
  HeatKernelExponent exponent() const { return exponent_; }
  const std::vector<double>& omega_grid() const { return omega_; }
  const std::vector<double>& sigma_grid() const { return sigma_; }

  /// Trapezoid integral of the angle marginal at grid sigma index k (before
  /// the CDF is renormalized).
  double raw_mass(int k) const { return raw_mass_[k]; }

  double cdf(double omega, double sigma) const;
  double dlog_density(double omega, double sigma) const;
  /// sqrt(E |score|^2) under IGSO3(sigma).
  double score_norm(double sigma) const;

  double sample_angle(double sigma, Rng& rng) const;
  /// mean * exp(w n) with w from the angle marginal and n uniform on S^2.
  Rotation sample(const Rotation& mean, double sigma, Rng& rng) const;
  /// Gradient of log density at x, in the tangent space of x (body coordinates).
  Vec3 score(const Rotation& mean, const Rotation& x, double sigma) const;

  /// Tangent-space std of the small-sigma limit.
  double tangent_std(double sigma) const;
  bool below_table(double sigma) const { return sigma < sigma_lo_; }

 private:
  void check_sigma(double sigma) const;
  /// Grid index and interpolation weight for sigma.
  std::pair<int, double> locate_sigma(double sigma) const;
  double interp_omega(const std::vector<double>& row, double omega) const;

  double sigma_lo_, sigma_hi_;
  HeatKernelExponent exponent_;
  std::vector<double> omega_;
  std::vector<double> sigma_;
  std::vector<std::vector<double>> cdf_;
  std::vector<std::vector<double>> dlog_;
  std::vector<double> score_norm_;
  std::vector<double> raw_mass_;
};

}  // namespace stmd
