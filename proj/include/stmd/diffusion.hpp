#pragma once

#include <memory>

#include "stmd/igso3.hpp"
#include "stmd/rng.hpp"
#include "stmd/trajectory.hpp"

namespace stmd {

/// Translation VP-SDE with linear beta and log-linear rotation noise.
struct NoiseSchedule {
  double b_min = 0.1;
  double b_max = 20.0;
  double sigma_min = 0.1;
  double sigma_max = 1.5;
  double coordinate_scale = 0.1;  ///< internal units per Angstrom
  int steps = 200;
  double tau_max = 1.0;
  double tau_min = 0.01;
  HeatKernelExponent exponent = HeatKernelExponent::half;

  void validate() const;

  double beta(double tau) const;
  double alpha_bar(double tau) const;
  double sigma(double tau) const;
  /// d sigma^2 / d tau.
  double sigma_sq_rate(double tau) const;
  double step_size() const { return (tau_max - tau_min) / steps; }

  /// Table covering [sigma_min / 2, 2 sigma_max].
  std::shared_ptr<const IGSO3Table> igso3() const;
};

struct NoisedTranslations {
  Coords noisy;
  Coords eps;
};

/// T_tau = sqrt(a) T_0 + sqrt(1 - a) eps, in scaled units.
NoisedTranslations forward_translations(const NoiseSchedule& s, const Coords& t0, double tau, Rng& rng);

/// Per-residue score: translations in scaled global coordinates, rotations in
/// the residue's body tangent space.
struct FrameScore {
  Coords trans;
  Coords rot;

  static FrameScore zeros(Eigen::Index n) {
    return {Coords::Zero(n, 3), Coords::Zero(n, 3)};
  }
};

/// Explicit standard-normal draws for one reverse step.
struct ReverseNoise {
  Coords trans;
  Coords rot;

  static ReverseNoise zeros(Eigen::Index n) { return {Coords::Zero(n, 3), Coords::Zero(n, 3)}; }
  /// With zero_mean_trans the translation draw is projected onto the
  /// zero-centroid subspace.
  static ReverseNoise draw(Eigen::Index n, Rng& rng, bool zero_mean_trans);
};

/// Euler-Maruyama step from tau to tau - dtau. Frames are in Angstrom.
FrameSet reverse_step(const NoiseSchedule& s, const FrameSet& x, const FrameScore& score, double tau, double dtau,
                      const ReverseNoise& noise);
FrameSet reverse_step(const NoiseSchedule& s, const FrameSet& x, const FrameScore& score, double tau, double dtau,
                      Rng& rng, bool zero_mean_trans = false);

/// Posterior-mean translations E[T_0 | T_tau] from the score; rotations kept.
FrameSet denoise_translations(const NoiseSchedule& s, const FrameSet& x, const FrameScore& score, double tau);

/// Noises a clean frame set to level tau. Translations are noised around the
/// centroid of x0 with zero-mean noise when zero_mean is set.
FrameSet forward_frames(const NoiseSchedule& s, const FrameSet& x0, double tau, Rng& rng, bool zero_mean);

/// Prior sample at tau_max: standard normal translations (scaled units,
/// zero-mean if requested) and uniform rotations, returned in Angstrom.
FrameSet sample_prior(const NoiseSchedule& s, std::size_t n, Rng& rng, bool zero_mean);

/// Subtracts the column means.
Coords center_rows(const Coords& c);

}  // namespace stmd
