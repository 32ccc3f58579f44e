#include "stmd/igso3.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <tuple>

namespace stmd {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kMaxL = 2000;
constexpr double kTermTolerance = 1e-12;

double exponent_factor(double sigma, HeatKernelExponent e) {
  return e == HeatKernelExponent::half ? 0.5 * sigma * sigma : sigma * sigma;
}

struct SeriesValue {
  double f = 0.0;
  double df = 0.0;
};

// f(w) = sum_l (2l+1) exp(-l(l+1) c) sin((l+1/2) w) / sin(w/2)
SeriesValue heat_kernel_series(double omega, double sigma, HeatKernelExponent e, bool with_derivative) {
  const double c = exponent_factor(sigma, e);
  const double half = 0.5 * omega;
  const double sh = std::sin(half);
  const double ch = std::cos(half);
  const bool at_origin = std::abs(sh) < 1e-9;
  SeriesValue out;
  for (int l = 0; l <= kMaxL; ++l) {
    const double a = l + 0.5;
    const double two_l1 = 2.0 * l + 1.0;
    const double weight = two_l1 * std::exp(-static_cast<double>(l) * (l + 1) * c);
    // |sin(a w)/sin(w/2)| <= 2l+1; the derivative is bounded by (2l+1)^3 / 4.
    const double bound = weight * two_l1 * (with_derivative ? two_l1 * two_l1 : 1.0);
    if (l > 0 && bound < kTermTolerance) break;
    if (at_origin) {
      out.f += weight * two_l1;
      continue;  // derivative of an even function vanishes at 0
    }
    const double sa = std::sin(a * omega);
    out.f += weight * sa / sh;
    if (with_derivative) {
      const double ca = std::cos(a * omega);
      out.df += weight * (a * ca * sh - 0.5 * sa * ch) / (sh * sh);
    }
  }
  return out;
}

}  // namespace

double igso3_density(double omega, double sigma, HeatKernelExponent e) {
  return heat_kernel_series(omega, sigma, e, false).f;
}

double igso3_dlog_density(double omega, double sigma, HeatKernelExponent e) {
  const auto s = heat_kernel_series(omega, sigma, e, true);
  return s.df / s.f;
}

double igso3_angle_pdf(double omega, double sigma, HeatKernelExponent e) {
  return igso3_density(omega, sigma, e) * (1.0 - std::cos(omega)) / kPi;
}

Rotation sample_uniform_rotation(Rng& rng) {
  double w, x, y, z, n;
  do {
    w = rng.normal();
    x = rng.normal();
    y = rng.normal();
    z = rng.normal();
    n = w * w + x * x + y * y + z * z;
  } while (n < 1e-12);
  return Rotation(w, x, y, z);
}

IGSO3Table::IGSO3Table(double sigma_lo, double sigma_hi, HeatKernelExponent exponent, int n_omega, int n_sigma)
    : sigma_lo_(sigma_lo), sigma_hi_(sigma_hi), exponent_(exponent) {
  if (!(sigma_lo > 0.0 && sigma_hi > sigma_lo)) throw std::invalid_argument("IGSO3Table: bad sigma range");
  if (n_omega < 16 || n_sigma < 2) throw std::invalid_argument("IGSO3Table: grid too small");
  omega_.resize(n_omega);
  for (int i = 0; i < n_omega; ++i) omega_[i] = kPi * i / (n_omega - 1);
  sigma_.resize(n_sigma);
  const double llo = std::log(sigma_lo), lhi = std::log(sigma_hi);
  for (int k = 0; k < n_sigma; ++k) sigma_[k] = std::exp(llo + (lhi - llo) * k / (n_sigma - 1));

  cdf_.assign(n_sigma, std::vector<double>(n_omega, 0.0));
  dlog_.assign(n_sigma, std::vector<double>(n_omega, 0.0));
  score_norm_.assign(n_sigma, 0.0);
  raw_mass_.assign(n_sigma, 0.0);
  std::vector<double> pdf(n_omega);
  for (int k = 0; k < n_sigma; ++k) {
    for (int i = 0; i < n_omega; ++i) {
      const auto s = heat_kernel_series(omega_[i], sigma_[k], exponent_, true);
      pdf[i] = s.f * (1.0 - std::cos(omega_[i])) / kPi;
      dlog_[k][i] = s.f > 0.0 ? s.df / s.f : 0.0;
    }
    double acc = 0.0, sq = 0.0;
    for (int i = 1; i < n_omega; ++i) {
      const double h = omega_[i] - omega_[i - 1];
      acc += 0.5 * h * (pdf[i] + pdf[i - 1]);
      sq += 0.5 * h * (pdf[i] * dlog_[k][i] * dlog_[k][i] + pdf[i - 1] * dlog_[k][i - 1] * dlog_[k][i - 1]);
      cdf_[k][i] = acc;
    }
    raw_mass_[k] = acc;
    for (auto& v : cdf_[k]) v /= acc;
    score_norm_[k] = std::sqrt(sq / acc);
  }
}

std::shared_ptr<const IGSO3Table> IGSO3Table::shared(double sigma_lo, double sigma_hi, HeatKernelExponent exponent) {
  static std::mutex mu;
  static std::map<std::tuple<double, double, int>, std::shared_ptr<const IGSO3Table>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_tuple(sigma_lo, sigma_hi, static_cast<int>(exponent));
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto table = std::make_shared<const IGSO3Table>(sigma_lo, sigma_hi, exponent);
  cache.emplace(key, table);
  return table;
}

double IGSO3Table::tangent_std(double sigma) const {
  return exponent_ == HeatKernelExponent::half ? sigma : std::sqrt(2.0) * sigma;
}

void IGSO3Table::check_sigma(double sigma) const {
  if (!(sigma > 0.0)) throw std::out_of_range("IGSO3: sigma must be positive");
  if (sigma > sigma_hi_ * (1.0 + 1e-12))
    throw std::out_of_range("IGSO3: sigma " + std::to_string(sigma) + " above table range " +
                            std::to_string(sigma_hi_));
}

std::pair<int, double> IGSO3Table::locate_sigma(double sigma) const {
  const double ls = std::log(std::clamp(sigma, sigma_lo_, sigma_hi_));
  const double llo = std::log(sigma_lo_), lhi = std::log(sigma_hi_);
  const double pos = (ls - llo) / (lhi - llo) * (static_cast<double>(sigma_.size()) - 1.0);
  int k = std::clamp(static_cast<int>(std::floor(pos)), 0, static_cast<int>(sigma_.size()) - 2);
  return {k, std::clamp(pos - k, 0.0, 1.0)};
}

double IGSO3Table::interp_omega(const std::vector<double>& row, double omega) const {
  const double pos = std::clamp(omega, 0.0, kPi) / kPi * (static_cast<double>(omega_.size()) - 1.0);
  const int i = std::clamp(static_cast<int>(std::floor(pos)), 0, static_cast<int>(omega_.size()) - 2);
  const double w = pos - i;
  return (1.0 - w) * row[i] + w * row[i + 1];
}

double IGSO3Table::cdf(double omega, double sigma) const {
  check_sigma(sigma);
  if (below_table(sigma)) {
    // Maxwell CDF of the tangent-Gaussian angle.
    const double s = tangent_std(sigma);
    const double x = omega / s;
    return std::erf(x / std::sqrt(2.0)) - std::sqrt(2.0 / kPi) * x * std::exp(-0.5 * x * x);
  }
  auto [k, w] = locate_sigma(sigma);
  return (1.0 - w) * interp_omega(cdf_[k], omega) + w * interp_omega(cdf_[k + 1], omega);
}

double IGSO3Table::dlog_density(double omega, double sigma) const {
  check_sigma(sigma);
  if (below_table(sigma)) {
    const double s = tangent_std(sigma);
    return -omega / (s * s);
  }
  auto [k, w] = locate_sigma(sigma);
  return (1.0 - w) * interp_omega(dlog_[k], omega) + w * interp_omega(dlog_[k + 1], omega);
}

double IGSO3Table::score_norm(double sigma) const {
  check_sigma(sigma);
  if (below_table(sigma)) return std::sqrt(3.0) / tangent_std(sigma);
  auto [k, w] = locate_sigma(sigma);
  return (1.0 - w) * score_norm_[k] + w * score_norm_[k + 1];
}

double IGSO3Table::sample_angle(double sigma, Rng& rng) const {
  check_sigma(sigma);
  if (below_table(sigma)) {
    const double s = tangent_std(sigma);
    const Vec3 v(rng.normal() * s, rng.normal() * s, rng.normal() * s);
    return v.norm();
  }
  auto [k, w] = locate_sigma(sigma);
  const double u = rng.uniform();
  const auto& a = cdf_[k];
  const auto& b = cdf_[k + 1];
  auto value = [&](std::size_t i) { return (1.0 - w) * a[i] + w * b[i]; };
  std::size_t lo = 0, hi = omega_.size() - 1;
  while (hi - lo > 1) {
    const std::size_t mid = (lo + hi) / 2;
    if (value(mid) < u) lo = mid;
    else hi = mid;
  }
  const double c0 = value(lo), c1 = value(hi);
  const double t = c1 > c0 ? (u - c0) / (c1 - c0) : 0.5;
  return omega_[lo] + t * (omega_[hi] - omega_[lo]);
}

Rotation IGSO3Table::sample(const Rotation& mean, double sigma, Rng& rng) const {
  check_sigma(sigma);
  if (below_table(sigma)) {
    const double s = tangent_std(sigma);
    return mean * exp_so3(Vec3(rng.normal() * s, rng.normal() * s, rng.normal() * s));
  }
  const double omega = sample_angle(sigma, rng);
  Vec3 axis;
  do {
    axis = Vec3(rng.normal(), rng.normal(), rng.normal());
  } while (axis.squaredNorm() < 1e-12);
  axis.normalize();
  return mean * exp_so3(omega * axis);
}

Vec3 IGSO3Table::score(const Rotation& mean, const Rotation& x, double sigma) const {
  const Vec3 v = log_so3(mean.inverse() * x);
  const double omega = v.norm();
  if (omega < 1e-12) return Vec3::Zero();
  return dlog_density(omega, sigma) * (v / omega);
}

}  // namespace stmd
