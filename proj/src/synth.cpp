#include "stmd/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <Eigen/Eigenvalues>

#include "stmd/rng.hpp"

namespace stmd {

void SynthConfig::validate() const {
  if (residues < 3) throw std::invalid_argument("SynthConfig: need at least 3 residues");
  if (!(bond_length > 0 && helix_rise >= 0 && helix_rise < bond_length))
    throw std::invalid_argument("SynthConfig: bad helix geometry");
  if (!(k_parallel > 0 && k_perpendicular > 0 && k_confine > 0))
    throw std::invalid_argument("SynthConfig: spring constants must be positive");
  if (!(friction > 0 && kT > 0 && base_dt_ns > 0 && rot_relax_ns > 0 && rot_std >= 0 && burn_in_relax_times >= 0))
    throw std::invalid_argument("SynthConfig: physical constants must be positive");
}

Coords reference_structure(const SynthConfig& cfg) {
  const int n = cfg.residues;
  const double turn = cfg.helix_turn_deg * std::numbers::pi / 180.0;
  const double radius = std::sqrt(cfg.bond_length * cfg.bond_length - cfg.helix_rise * cfg.helix_rise) /
                        (2.0 * std::sin(0.5 * turn));
  Coords x(n, 3);
  for (int i = 0; i < n; ++i) x.row(i) << radius * std::cos(i * turn), radius * std::sin(i * turn), cfg.helix_rise * i;
  x.rowwise() -= x.colwise().mean();
  return x;
}

Eigen::MatrixXd synth_hessian(const SynthConfig& cfg) {
  const int n = cfg.residues;
  const Coords x0 = reference_structure(cfg);
  Eigen::MatrixXd h = Eigen::MatrixXd::Identity(3 * n, 3 * n) * cfg.k_confine;
  for (int i = 0; i + 1 < n; ++i) {
    const Vec3 b = (x0.row(i + 1) - x0.row(i)).transpose().normalized();
    const Mat3 par = b * b.transpose();
    const Mat3 k = cfg.k_parallel * par + cfg.k_perpendicular * (Mat3::Identity() - par);
    h.block<3, 3>(3 * i, 3 * i) += k;
    h.block<3, 3>(3 * (i + 1), 3 * (i + 1)) += k;
    h.block<3, 3>(3 * i, 3 * (i + 1)) -= k;
    h.block<3, 3>(3 * (i + 1), 3 * i) -= k;
  }
  return h;
}

SynthModes synth_modes(const SynthConfig& cfg) {
  cfg.validate();
  const int n = cfg.residues;
  const Eigen::MatrixXd h = synth_hessian(cfg);
  // Work in the complement of uniform translations, which the springs do
  // not couple to anything else.
  Eigen::MatrixXd p = Eigen::MatrixXd::Identity(3 * n, 3 * n);
  for (int a = 0; a < 3; ++a) {
    Eigen::VectorXd u = Eigen::VectorXd::Zero(3 * n);
    for (int i = 0; i < n; ++i) u(3 * i + a) = 1.0 / std::sqrt(static_cast<double>(n));
    p -= u * u.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(p * h * p);
  SynthModes m;
  const int keep = 3 * n - 3;
  m.vectors.resize(3 * n, keep);
  m.stiffness.resize(keep);
  // The three smallest eigenvalues of P H P are the zeroed translations.
  for (int k = 0; k < keep; ++k) {
    m.vectors.col(k) = es.eigenvectors().col(3 + k);
    m.stiffness(k) = es.eigenvalues()(3 + k);
  }
  if (!(m.stiffness.minCoeff() > 0.0)) throw std::invalid_argument("SynthConfig: energy not positive definite");
  m.rate = m.stiffness / cfg.friction;
  m.variance = cfg.kT * m.stiffness.cwiseInverse();
  return m;
}

std::vector<Rotation> chain_frames(const Coords& x) {
  const Eigen::Index n = x.rows();
  if (n < 3) throw std::invalid_argument("chain_frames: need at least 3 residues");
  std::vector<Rotation> out(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index lo = std::max<Eigen::Index>(i - 1, 0), hi = std::min<Eigen::Index>(i + 1, n - 1);
    const Eigen::Index c = std::clamp<Eigen::Index>(i, 1, n - 2);
    Vec3 e1 = (x.row(hi) - x.row(lo)).transpose();
    Vec3 curv = (x.row(c + 1) + x.row(c - 1) - 2.0 * x.row(c)).transpose();
    e1.normalize();
    Vec3 e2 = curv - curv.dot(e1) * e1;
    if (e2.norm() < 1e-9) {
      e2 = std::abs(e1.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
      e2 -= e2.dot(e1) * e1;
    }
    e2.normalize();
    Mat3 r;
    r.col(0) = e1;
    r.col(1) = e2;
    r.col(2) = e1.cross(e2);
    out[static_cast<std::size_t>(i)] = Rotation::from_matrix(r);
  }
  return out;
}

Trajectory synth_generate(const SynthConfig& cfg, int length, std::uint64_t seed, int stride) {
  if (length < 1 || stride < 1) throw std::invalid_argument("synth_generate: length and stride must be >= 1");
  const SynthModes modes = synth_modes(cfg);
  const int n = cfg.residues;
  const Eigen::Index m = modes.rate.size();
  const Coords x0 = reference_structure(cfg);
  Rng rng(seed);

  Eigen::VectorXd q(m);
  for (Eigen::Index k = 0; k < m; ++k) q(k) = std::sqrt(modes.variance(k)) * rng.normal();
  Eigen::MatrixXd omega(n, 3);
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) omega(i, a) = cfg.rot_std * rng.normal();

  const double h = stride * cfg.base_dt_ns;
  auto advance = [&](double dt) {
    for (Eigen::Index k = 0; k < m; ++k) {
      const double a = std::exp(-modes.rate(k) * dt);
      q(k) = a * q(k) + std::sqrt(modes.variance(k) * (1.0 - a * a)) * rng.normal();
    }
    const double ar = std::exp(-dt / cfg.rot_relax_ns);
    const double sr = cfg.rot_std * std::sqrt(1.0 - ar * ar);
    for (int i = 0; i < n; ++i)
      for (int a = 0; a < 3; ++a) omega(i, a) = ar * omega(i, a) + sr * rng.normal();
  };

  const double slowest = std::max(1.0 / modes.rate.minCoeff(), cfg.rot_relax_ns);
  const int burn = static_cast<int>(std::ceil(cfg.burn_in_relax_times * slowest / h));
  for (int s = 0; s < burn; ++s) advance(h);

  std::vector<FrameSet> frames;
  frames.reserve(static_cast<std::size_t>(length));
  for (int l = 0; l < length; ++l) {
    if (l > 0) advance(h);
    const Eigen::VectorXd disp = modes.vectors * q;
    Coords x = x0;
    for (int i = 0; i < n; ++i) x.row(i) += disp.segment<3>(3 * i).transpose();
    const auto base = chain_frames(x);
    FrameSet f(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      f.frames[i].translation = x.row(i).transpose();
      f.frames[i].rotation = base[i] * exp_so3(omega.row(i).transpose());
    }
    frames.push_back(std::move(f));
  }
  return Trajectory(std::move(frames), h);
}

}  // namespace stmd
