#pragma once

#include <complex>
#include <functional>
#include <vector>

#include <Eigen/Core>

namespace stmd::mz {

using Complex = std::complex<double>;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using CMatrix = Eigen::MatrixXcd;

/// K(t) = sum_m A_m exp(-rate_m t), Laplace transform sum_m A_m / (p + rate_m).
struct ExpModes {
  std::vector<Matrix> amplitude;
  std::vector<double> rate;

  bool empty() const { return amplitude.empty(); }
  void add(Matrix a, double r);
  CMatrix laplace(Complex p, Eigen::Index rows, Eigen::Index cols) const;
  Matrix at(double t, Eigen::Index rows, Eigen::Index cols) const;
};

/// Linear block system d/dt (s, z) = Omega (s, z) + (K1 * (s, z))(t).
struct BlockSystem {
  Matrix omega_ss, omega_sz, omega_zs, omega_zz;
  ExpModes k_ss, k_sz, k_zs, k_zz;

  Eigen::Index ns() const { return omega_ss.rows(); }
  Eigen::Index nz() const { return omega_zz.rows(); }
  void validate() const;
  Matrix omega() const;
  /// Generator of the Markovian embedding: every exponential mode becomes an
  /// auxiliary variable y with dy/dt = x_source - rate * y.
  Matrix embedded_generator() const;
  /// Largest real part among eigenvalues of the embedded generator.
  double spectral_abscissa() const;
  double spectral_radius() const;
};

/// K2(p) = K1_ss + (O_sz + K1_sz)[pI - O_zz - K1_zz]^{-1}(O_zs + K1_zs).
/// Throws NumericalError when the resolvent is near singular (cond > 1e12).
CMatrix inflate_kernel(const BlockSystem& sys, Complex p);

/// State-space realization (A, B, C) with K2(t) = C exp(A t) B. E injects
/// z(0) so that the fluctuating term from an initial z is C exp(A t) E z0.
struct KernelRealization {
  Matrix A, B, C, E;
};
KernelRealization realize_reduced_kernel(const BlockSystem& sys);

/// K2 sampled at t_k = k dt, k = 0..steps.
std::vector<Matrix> reduced_kernel_samples(const BlockSystem& sys, double dt, int steps);
/// C exp(A t_k) E z0 at t_k = k dt.
std::vector<Vector> reduced_forcing_samples(const BlockSystem& sys, const Vector& z0, double dt, int steps);

using LaplaceFunction = std::function<CMatrix(Complex)>;

/// Fixed-Talbot numerical inverse Laplace transform. t = 0 is evaluated by
/// the initial value theorem, lim p F(p).
std::vector<Matrix> invert_laplace(const LaplaceFunction& f, const std::vector<double>& t, int terms = 32);

struct FullSolution {
  std::vector<double> t;
  Matrix s;  ///< steps+1 x ns
  Matrix z;  ///< steps+1 x nz
};

/// Exact propagation of the embedded system (matrix exponential per step).
/// Aborts when |state| exceeds 1e6.
FullSolution simulate_full(const BlockSystem& sys, const Vector& s0, const Vector& z0, double T, double dt);

/// ds/dt = O s + int_0^t K(t-u) s(u) du + F(t) with trapezoidal convolution
/// and implicit trapezoidal stepping. kernel[k] = K(k dt); forcing may be
/// empty (zero).
Matrix simulate_gle(const Matrix& omega_ss, const std::vector<Matrix>& kernel, const std::vector<Vector>& forcing,
                    const Vector& s0, double dt, int steps);

/// Memoryless limit ds/dt = (O_ss + K2(p=0)) s, propagated exactly.
Matrix simulate_markov_limit(const BlockSystem& sys, const Vector& s0, double dt, int steps);

struct SeparabilityResult {
  Vector singular_values;
  double ratio = 0.0;  ///< sigma_2 / sigma_1, 0 when rank <= 1 by shape
  bool separable = true;
};

/// Unfolds kernel samples into an (ns*ns) x n_t matrix.
Matrix unfold_kernel(const std::vector<Matrix>& samples);
SeparabilityResult separability_test(const Matrix& unfolded, double threshold = 1e-6);

/// 2x2 system Omega = [[0, 1], [1, -1]], no level-1 kernels.
BlockSystem hand_system();

}  // namespace stmd::mz
