#include "stmd/mzlab.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <unsupported/Eigen/MatrixFunctions>

#include "stmd/errors.hpp"

namespace stmd::mz {

void ExpModes::add(Matrix a, double r) {
  if (!(r > 0.0)) throw std::invalid_argument("kernel decay rates must be positive");
  amplitude.push_back(std::move(a));
  rate.push_back(r);
}

CMatrix ExpModes::laplace(Complex p, Eigen::Index rows, Eigen::Index cols) const {
  CMatrix out = CMatrix::Zero(rows, cols);
  for (std::size_t m = 0; m < amplitude.size(); ++m) out += amplitude[m].cast<Complex>() / (p + rate[m]);
  return out;
}

Matrix ExpModes::at(double t, Eigen::Index rows, Eigen::Index cols) const {
  Matrix out = Matrix::Zero(rows, cols);
  for (std::size_t m = 0; m < amplitude.size(); ++m) out += amplitude[m] * std::exp(-rate[m] * t);
  return out;
}

static void check_modes(const ExpModes& k, Eigen::Index r, Eigen::Index c, const char* name) {
  if (k.amplitude.size() != k.rate.size()) throw std::invalid_argument(std::string(name) + ": modes malformed");
  for (std::size_t m = 0; m < k.amplitude.size(); ++m) {
    if (k.amplitude[m].rows() != r || k.amplitude[m].cols() != c)
      throw std::invalid_argument(std::string(name) + ": amplitude shape mismatch");
    if (!(k.rate[m] > 0.0)) throw std::invalid_argument(std::string(name) + ": decay rate must be positive");
  }
}

void BlockSystem::validate() const {
  const auto s = ns(), z = nz();
  if (s < 1 || omega_ss.cols() != s) throw std::invalid_argument("BlockSystem: omega_ss must be square, ns >= 1");
  if (omega_zz.cols() != z) throw std::invalid_argument("BlockSystem: omega_zz must be square");
  if (omega_sz.rows() != s || omega_sz.cols() != z || omega_zs.rows() != z || omega_zs.cols() != s)
    throw std::invalid_argument("BlockSystem: coupling block shapes inconsistent");
  check_modes(k_ss, s, s, "k_ss");
  check_modes(k_sz, s, z, "k_sz");
  check_modes(k_zs, z, s, "k_zs");
  check_modes(k_zz, z, z, "k_zz");
}

Matrix BlockSystem::omega() const {
  const auto s = ns(), z = nz();
  Matrix o(s + z, s + z);
  o.topLeftCorner(s, s) = omega_ss;
  if (z > 0) {
    o.topRightCorner(s, z) = omega_sz;
    o.bottomLeftCorner(z, s) = omega_zs;
    o.bottomRightCorner(z, z) = omega_zz;
  }
  return o;
}

namespace {

// One auxiliary block per exponential mode.
struct AuxBlock {
  Eigen::Index target_off, target_dim, source_off, source_dim;
  const Matrix* amp;
  double rate;
};

std::vector<AuxBlock> aux_blocks(const BlockSystem& sys) {
  const auto s = sys.ns(), z = sys.nz();
  std::vector<AuxBlock> out;
  auto push = [&](const ExpModes& k, Eigen::Index to, Eigen::Index td, Eigen::Index so, Eigen::Index sd) {
    for (std::size_t m = 0; m < k.amplitude.size(); ++m) out.push_back({to, td, so, sd, &k.amplitude[m], k.rate[m]});
  };
  push(sys.k_ss, 0, s, 0, s);
  push(sys.k_sz, 0, s, s, z);
  push(sys.k_zs, s, z, 0, s);
  push(sys.k_zz, s, z, s, z);
  return out;
}

}  // namespace

Matrix BlockSystem::embedded_generator() const {
  validate();
  const auto n = ns() + nz();
  const auto blocks = aux_blocks(*this);
  Eigen::Index total = n;
  for (const auto& b : blocks) total += b.source_dim;
  Matrix A = Matrix::Zero(total, total);
  A.topLeftCorner(n, n) = omega();
  Eigen::Index off = n;
  for (const auto& b : blocks) {
    A.block(b.target_off, off, b.target_dim, b.source_dim) += *b.amp;
    A.block(off, b.source_off, b.source_dim, b.source_dim) += Matrix::Identity(b.source_dim, b.source_dim);
    A.block(off, off, b.source_dim, b.source_dim) -= b.rate * Matrix::Identity(b.source_dim, b.source_dim);
    off += b.source_dim;
  }
  return A;
}

double BlockSystem::spectral_abscissa() const {
  Eigen::EigenSolver<Matrix> es(embedded_generator(), false);
  return es.eigenvalues().real().maxCoeff();
}

double BlockSystem::spectral_radius() const {
  Eigen::EigenSolver<Matrix> es(embedded_generator(), false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

CMatrix inflate_kernel(const BlockSystem& sys, Complex p) {
  sys.validate();
  const auto s = sys.ns(), z = sys.nz();
  CMatrix k2 = sys.k_ss.laplace(p, s, s);
  if (z == 0) return k2;
  const CMatrix left = sys.omega_sz.cast<Complex>() + sys.k_sz.laplace(p, s, z);
  const CMatrix right = sys.omega_zs.cast<Complex>() + sys.k_zs.laplace(p, z, s);
  const CMatrix res = p * CMatrix::Identity(z, z) - sys.omega_zz.cast<Complex>() - sys.k_zz.laplace(p, z, z);
  Eigen::JacobiSVD<CMatrix> svd(res);
  const auto& sv = svd.singularValues();
  const double cond = sv(sv.size() - 1) > 0.0 ? sv(0) / sv(sv.size() - 1) : INFINITY;
  if (!(cond < 1e12))
    throw NumericalError("inflate_kernel: resolvent near singular at p = (" + std::to_string(p.real()) + ", " +
                         std::to_string(p.imag()) + "), condition number " + std::to_string(cond));
  return k2 + left * res.partialPivLu().solve(right);
}

KernelRealization realize_reduced_kernel(const BlockSystem& sys) {
  sys.validate();
  const auto s = sys.ns(), z = sys.nz();
  // States: z, then one auxiliary block per mode. Input u stands for s.
  Eigen::Index total = z;
  auto count = [](const ExpModes& k, Eigen::Index dim) { return static_cast<Eigen::Index>(k.amplitude.size()) * dim; };
  total += count(sys.k_zz, z) + count(sys.k_zs, s) + count(sys.k_sz, z) + count(sys.k_ss, s);
  KernelRealization r;
  r.A = Matrix::Zero(total, total);
  r.B = Matrix::Zero(total, s);
  r.C = Matrix::Zero(s, total);
  r.E = Matrix::Zero(total, z);
  if (z > 0) {
    r.A.topLeftCorner(z, z) = sys.omega_zz;
    r.B.topRows(z) = sys.omega_zs;
    r.C.leftCols(z) = sys.omega_sz;
    r.E.topRows(z) = Matrix::Identity(z, z);
  }
  Eigen::Index off = z;
  for (std::size_t m = 0; m < sys.k_zz.amplitude.size(); ++m) {  // driven by z, feeds z
    r.A.block(0, off, z, z) += sys.k_zz.amplitude[m];
    r.A.block(off, 0, z, z) += Matrix::Identity(z, z);
    r.A.block(off, off, z, z) -= sys.k_zz.rate[m] * Matrix::Identity(z, z);
    off += z;
  }
  for (std::size_t m = 0; m < sys.k_zs.amplitude.size(); ++m) {  // driven by u, feeds z
    r.A.block(0, off, z, s) += sys.k_zs.amplitude[m];
    r.B.block(off, 0, s, s) += Matrix::Identity(s, s);
    r.A.block(off, off, s, s) -= sys.k_zs.rate[m] * Matrix::Identity(s, s);
    off += s;
  }
  for (std::size_t m = 0; m < sys.k_sz.amplitude.size(); ++m) {  // driven by z, feeds output
    r.C.block(0, off, s, z) += sys.k_sz.amplitude[m];
    r.A.block(off, 0, z, z) += Matrix::Identity(z, z);
    r.A.block(off, off, z, z) -= sys.k_sz.rate[m] * Matrix::Identity(z, z);
    off += z;
  }
  for (std::size_t m = 0; m < sys.k_ss.amplitude.size(); ++m) {  // driven by u, feeds output
    r.C.block(0, off, s, s) += sys.k_ss.amplitude[m];
    r.B.block(off, 0, s, s) += Matrix::Identity(s, s);
    r.A.block(off, off, s, s) -= sys.k_ss.rate[m] * Matrix::Identity(s, s);
    off += s;
  }
  return r;
}

std::vector<Matrix> reduced_kernel_samples(const BlockSystem& sys, double dt, int steps) {
  const auto r = realize_reduced_kernel(sys);
  std::vector<Matrix> out;
  out.reserve(steps + 1);
  if (r.A.rows() == 0) {
    out.assign(steps + 1, Matrix::Zero(sys.ns(), sys.ns()));
    return out;
  }
  const Matrix prop = (r.A * dt).exp();
  Matrix phi = r.B;
  for (int k = 0; k <= steps; ++k) {
    out.push_back(r.C * phi);
    phi = prop * phi;
  }
  return out;
}

std::vector<Vector> reduced_forcing_samples(const BlockSystem& sys, const Vector& z0, double dt, int steps) {
  const auto r = realize_reduced_kernel(sys);
  if (z0.size() != sys.nz()) throw std::invalid_argument("reduced_forcing_samples: z0 size mismatch");
  std::vector<Vector> out;
  if (r.A.rows() == 0) {
    out.assign(steps + 1, Vector::Zero(sys.ns()));
    return out;
  }
  const Matrix prop = (r.A * dt).exp();
  Vector state = r.E * z0;
  for (int k = 0; k <= steps; ++k) {
    out.push_back(r.C * state);
    state = prop * state;
  }
  return out;
}

std::vector<Matrix> invert_laplace(const LaplaceFunction& f, const std::vector<double>& t, int terms) {
  if (terms < 4) throw std::invalid_argument("invert_laplace: need at least 4 terms");
  constexpr double kPi = std::numbers::pi;
  std::vector<Matrix> out;
  out.reserve(t.size());
  for (double ti : t) {
    if (ti < 0.0) throw std::invalid_argument("invert_laplace: negative time");
    if (ti == 0.0) {
      // Initial value theorem.
      const double p = 1e9;
      out.push_back((Complex(p, 0.0) * f(Complex(p, 0.0))).real());
      continue;
    }
    const double r = 2.0 * terms / (5.0 * ti);
    CMatrix first = f(Complex(r, 0.0));
    Matrix acc = 0.5 * (first * std::exp(r * ti)).real();
    for (int k = 1; k < terms; ++k) {
      const double theta = k * kPi / terms;
      const double cot = std::cos(theta) / std::sin(theta);
      const Complex s(r * theta * cot, r * theta);
      const double sigma = theta + (theta * cot - 1.0) * cot;
      const Complex w = std::exp(s * ti) * Complex(1.0, sigma);
      acc += (f(s) * w).real();
    }
    out.push_back(acc * (r / terms));
  }
  return out;
}

FullSolution simulate_full(const BlockSystem& sys, const Vector& s0, const Vector& z0, double T, double dt) {
  sys.validate();
  if (s0.size() != sys.ns() || z0.size() != sys.nz()) throw std::invalid_argument("simulate_full: state size");
  if (!(dt > 0.0 && T > 0.0)) throw std::invalid_argument("simulate_full: need positive T and dt");
  const int steps = static_cast<int>(std::lround(T / dt));
  const Matrix A = sys.embedded_generator();
  const Matrix prop = (A * dt).exp();
  Vector x = Vector::Zero(A.rows());
  x.head(sys.ns()) = s0;
  x.segment(sys.ns(), sys.nz()) = z0;
  FullSolution sol;
  sol.s.resize(steps + 1, sys.ns());
  sol.z.resize(steps + 1, sys.nz());
  for (int k = 0; k <= steps; ++k) {
    sol.t.push_back(k * dt);
    sol.s.row(k) = x.head(sys.ns()).transpose();
    sol.z.row(k) = x.segment(sys.ns(), sys.nz()).transpose();
    if (x.norm() > 1e6) throw NumericalError("simulate_full: state norm exceeded 1e6 at t = " + std::to_string(k * dt));
    x = prop * x;
  }
  return sol;
}

Matrix simulate_gle(const Matrix& omega_ss, const std::vector<Matrix>& kernel, const std::vector<Vector>& forcing,
                    const Vector& s0, double dt, int steps) {
  const auto n = omega_ss.rows();
  if (static_cast<int>(kernel.size()) < steps + 1) throw std::invalid_argument("simulate_gle: kernel too short");
  if (!forcing.empty() && static_cast<int>(forcing.size()) < steps + 1)
    throw std::invalid_argument("simulate_gle: forcing too short");
  Matrix s(steps + 1, n);
  s.row(0) = s0.transpose();
  auto force = [&](int k) { return forcing.empty() ? Vector(Vector::Zero(n)) : forcing[k]; };
  // f_k = O s_k + I_k + F_k with I_k the trapezoidal memory integral.
  Vector f_prev = omega_ss * s0 + force(0);
  const Matrix lhs = Matrix::Identity(n, n) - 0.5 * dt * omega_ss - 0.25 * dt * dt * kernel[0];
  const auto lu = lhs.partialPivLu();
  for (int m = 0; m < steps; ++m) {
    const int k1 = m + 1;
    // Memory integral at t_{k1} excluding the implicit u = t_{k1} endpoint.
    Vector mem = 0.5 * kernel[k1] * s.row(0).transpose();
    for (int j = 1; j < k1; ++j) mem += kernel[k1 - j] * s.row(j).transpose();
    mem *= dt;
    const Vector rhs = s.row(m).transpose() + 0.5 * dt * (f_prev + mem + force(k1));
    const Vector next = lu.solve(rhs);
    if (!next.allFinite() || next.norm() > 1e6)
      throw NumericalError("simulate_gle: instability at t = " + std::to_string(k1 * dt));
    s.row(k1) = next.transpose();
    f_prev = omega_ss * next + mem + 0.5 * dt * kernel[0] * next + force(k1);
  }
  return s;
}

Matrix simulate_markov_limit(const BlockSystem& sys, const Vector& s0, double dt, int steps) {
  const Matrix gen = sys.omega_ss + inflate_kernel(sys, Complex(0.0, 0.0)).real();
  const Matrix prop = (gen * dt).exp();
  Matrix s(steps + 1, sys.ns());
  Vector x = s0;
  for (int k = 0; k <= steps; ++k) {
    s.row(k) = x.transpose();
    x = prop * x;
  }
  return s;
}

Matrix unfold_kernel(const std::vector<Matrix>& samples) {
  if (samples.empty()) throw std::invalid_argument("unfold_kernel: no samples");
  const auto r = samples.front().rows(), c = samples.front().cols();
  Matrix out(r * c, static_cast<Eigen::Index>(samples.size()));
  for (std::size_t k = 0; k < samples.size(); ++k)
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) out(i * c + j, static_cast<Eigen::Index>(k)) = samples[k](i, j);
  return out;
}

SeparabilityResult separability_test(const Matrix& unfolded, double threshold) {
  Eigen::JacobiSVD<Matrix> svd(unfolded);
  SeparabilityResult r;
  r.singular_values = svd.singularValues();
  if (r.singular_values.size() >= 2 && r.singular_values(0) > 0.0)
    r.ratio = r.singular_values(1) / r.singular_values(0);
  r.separable = !(r.ratio > threshold);
  return r;
}

BlockSystem hand_system() {
  BlockSystem s;
  s.omega_ss = Matrix::Constant(1, 1, 0.0);
  s.omega_sz = Matrix::Constant(1, 1, 1.0);
  s.omega_zs = Matrix::Constant(1, 1, 1.0);
  s.omega_zz = Matrix::Constant(1, 1, -1.0);
  return s;
}

}  // namespace stmd::mz
