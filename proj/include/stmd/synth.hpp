#pragma once

#include <cstdint>

#include <Eigen/Core>

#include "stmd/trajectory.hpp"

namespace stmd {

/// Linear coarse-grained chain: overdamped Langevin motion of residue
/// displacements around a helical reference, with anisotropic bond springs
/// (stiff along the reference bond, soft across it) and a weak isotropic
/// confinement. Energies in units of kT per squared Angstrom.
struct SynthConfig {
  int residues = 8;
  double bond_length = 3.8;
  double helix_rise = 1.5;
  double helix_turn_deg = 100.0;
  double k_parallel = 100.0;
  double k_perpendicular = 3.0;
  double k_confine = 1.0;
  double friction = 0.015;  ///< kT ns / A^2
  double kT = 1.0;
  double base_dt_ns = 0.01;
  double rot_relax_ns = 0.02;
  double rot_std = 0.15;  ///< stationary std of each tangent component, radians
  double burn_in_relax_times = 10.0;

  void validate() const;
};

struct SynthModes {
  Eigen::MatrixXd vectors;   ///< 3N x m, retained (non-translational) modes
  Eigen::VectorXd stiffness; ///< m
  Eigen::VectorXd rate;      ///< stiffness / friction, 1/ns
  Eigen::VectorXd variance;  ///< kT / stiffness
};

Coords reference_structure(const SynthConfig& cfg);

/// 3N x 3N Hessian of the quadratic energy.
Eigen::MatrixXd synth_hessian(const SynthConfig& cfg);

/// Normal modes with the three uniform-translation modes removed, sorted by
/// increasing rate. Throws if the Hessian is not positive definite.
SynthModes synth_modes(const SynthConfig& cfg);

/// Local frame from the chain tangent and curvature at each residue.
std::vector<Rotation> chain_frames(const Coords& x);

/// Trajectory of `length` frames spaced stride * base_dt, after burn-in.
/// Translation modes and rotation fluctuations are advanced with exact
/// Ornstein-Uhlenbeck updates.
Trajectory synth_generate(const SynthConfig& cfg, int length, std::uint64_t seed, int stride = 1);

}  // namespace stmd
