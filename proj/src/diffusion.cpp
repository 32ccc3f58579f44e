#include "stmd/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "stmd/errors.hpp"

namespace stmd {

void NoiseSchedule::validate() const {
  if (!(0.0 < tau_min && tau_min < tau_max && tau_max <= 1.0))
    throw std::invalid_argument("NoiseSchedule: need 0 < tau_min < tau_max <= 1");
  if (!(b_min > 0.0 && b_min < b_max)) throw std::invalid_argument("NoiseSchedule: need 0 < b_min < b_max");
  if (!(sigma_min > 0.0 && sigma_min < sigma_max))
    throw std::invalid_argument("NoiseSchedule: need 0 < sigma_min < sigma_max");
  if (!(coordinate_scale > 0.0)) throw std::invalid_argument("NoiseSchedule: coordinate_scale must be positive");
  if (steps < 1) throw std::invalid_argument("NoiseSchedule: steps must be >= 1");
}

static void check_tau(double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::out_of_range("diffusion time outside [0, 1]: " + std::to_string(tau));
}

double NoiseSchedule::beta(double tau) const {
  check_tau(tau);
  return b_min + tau * (b_max - b_min);
}

double NoiseSchedule::alpha_bar(double tau) const {
  check_tau(tau);
  return std::exp(-(b_min * tau + 0.5 * (b_max - b_min) * tau * tau));
}

double NoiseSchedule::sigma(double tau) const {
  check_tau(tau);
  return std::exp(std::log(sigma_min) + tau * (std::log(sigma_max) - std::log(sigma_min)));
}

double NoiseSchedule::sigma_sq_rate(double tau) const {
  const double s = sigma(tau);
  return 2.0 * s * s * std::log(sigma_max / sigma_min);
}

std::shared_ptr<const IGSO3Table> NoiseSchedule::igso3() const {
  return IGSO3Table::shared(0.5 * sigma_min, 2.0 * sigma_max, exponent);
}

Coords center_rows(const Coords& c) {
  if (c.rows() == 0) return c;
  Coords out = c;
  out.rowwise() -= c.colwise().mean();
  return out;
}

static Coords normal_coords(Eigen::Index n, Rng& rng) {
  Coords z(n, 3);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) z(i, k) = rng.normal();
  return z;
}

NoisedTranslations forward_translations(const NoiseSchedule& s, const Coords& t0, double tau, Rng& rng) {
  const double a = s.alpha_bar(tau);
  Coords eps = normal_coords(t0.rows(), rng);
  Coords noisy = std::sqrt(a) * t0 + std::sqrt(1.0 - a) * eps;
  return {noisy, eps};
}

ReverseNoise ReverseNoise::draw(Eigen::Index n, Rng& rng, bool zero_mean_trans) {
  ReverseNoise z;
  z.trans = normal_coords(n, rng);
  z.rot = normal_coords(n, rng);
  if (zero_mean_trans) z.trans = center_rows(z.trans);
  return z;
}

static void check_score(const FrameScore& score, std::size_t n) {
  if (score.trans.rows() != static_cast<Eigen::Index>(n) || score.rot.rows() != static_cast<Eigen::Index>(n))
    throw std::invalid_argument("reverse_step: score size does not match frame count");
  for (Eigen::Index i = 0; i < score.trans.rows(); ++i)
    for (int k = 0; k < 3; ++k)
      if (!std::isfinite(score.trans(i, k)) || !std::isfinite(score.rot(i, k)))
        throw NumericalError("reverse_step: non-finite score at residue " + std::to_string(i));
}

FrameSet reverse_step(const NoiseSchedule& s, const FrameSet& x, const FrameScore& score, double tau, double dtau,
                      const ReverseNoise& noise) {
  check_score(score, x.size());
  if (dtau == 0.0) return x;
  if (dtau < 0.0 || tau - dtau < -1e-12) throw std::invalid_argument("reverse_step: bad step");
  const double b = s.beta(tau);
  const double g2 = s.sigma_sq_rate(tau);
  const double scale = s.coordinate_scale;
  Coords t = x.translations() * scale;
  t += (0.5 * b * t + b * score.trans) * dtau + std::sqrt(b * dtau) * noise.trans;
  FrameSet out = x;
  out.set_translations(t / scale);
  const double g = std::sqrt(g2);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Vec3 step = g2 * score.rot.row(i).transpose() * dtau + g * std::sqrt(dtau) * noise.rot.row(i).transpose();
    out.frames[i].rotation = x.frames[i].rotation * exp_so3(step);
  }
  return out;
}

FrameSet reverse_step(const NoiseSchedule& s, const FrameSet& x, const FrameScore& score, double tau, double dtau,
                      Rng& rng, bool zero_mean_trans) {
  const auto noise = ReverseNoise::draw(static_cast<Eigen::Index>(x.size()), rng, zero_mean_trans);
  return reverse_step(s, x, score, tau, dtau, noise);
}

FrameSet denoise_translations(const NoiseSchedule& s, const FrameSet& x, const FrameScore& score, double tau) {
  check_score(score, x.size());
  const double a = s.alpha_bar(tau);
  const Coords t = x.translations() * s.coordinate_scale;
  const Coords t0 = (t + (1.0 - a) * score.trans) / std::sqrt(a);
  FrameSet out = x;
  out.set_translations(t0 / s.coordinate_scale);
  return out;
}

FrameSet forward_frames(const NoiseSchedule& s, const FrameSet& x0, double tau, Rng& rng, bool zero_mean) {
  if (tau == 0.0) return x0;
  const double scale = s.coordinate_scale;
  Coords t0 = x0.translations() * scale;
  Vec3 c = Vec3::Zero();
  if (zero_mean && t0.rows() > 0) {
    c = t0.colwise().mean().transpose();
    t0.rowwise() -= c.transpose();
  }
  const double a = s.alpha_bar(tau);
  Coords eps = normal_coords(t0.rows(), rng);
  if (zero_mean) eps = center_rows(eps);
  Coords t = std::sqrt(a) * t0 + std::sqrt(1.0 - a) * eps;
  t.rowwise() += c.transpose();
  FrameSet out = x0;
  out.set_translations(t / scale);
  const auto table = s.igso3();
  const double sig = s.sigma(tau);
  for (std::size_t i = 0; i < x0.size(); ++i) out.frames[i].rotation = table->sample(x0.frames[i].rotation, sig, rng);
  return out;
}

FrameSet sample_prior(const NoiseSchedule& s, std::size_t n, Rng& rng, bool zero_mean) {
  Coords t = normal_coords(static_cast<Eigen::Index>(n), rng);
  if (zero_mean) t = center_rows(t);
  FrameSet out(n);
  out.set_translations(t / s.coordinate_scale);
  for (std::size_t i = 0; i < n; ++i) out.frames[i].rotation = sample_uniform_rotation(rng);
  return out;
}

}  // namespace stmd
