#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "stmd/trajectory.hpp"

namespace stmd {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct PCABasis {
  Vector mean;                ///< 3N
  Matrix components;          ///< k x 3N, orthonormal rows
  Vector explained_variance;  ///< k

  int size() const { return static_cast<int>(components.rows()); }
  /// Rows of x (L x 3N) projected onto the components (L x k).
  Matrix project(const Matrix& x) const;
};

/// PCA of the rows of x keeping at most k components.
PCABasis fit_pca(const Matrix& x, int k);

// ---- validity -----------------------------------------------------------------

struct ValidityThresholds {
  double clash_distance = 3.0;   ///< Angstrom
  double break_distance = 4.5;   ///< Angstrom
  double max_clash_rate = 0.0129;
  double max_break_rate = 0.002;
};

struct ValidityMask {
  std::vector<bool> valid;
  std::vector<bool> clash_ok;
  std::vector<bool> break_ok;
  std::vector<double> clash_rate;
  std::vector<double> break_rate;
  bool clash_defined = true;  ///< false when N < 3 (no non-adjacent pairs)

  double valid_fraction() const;
  double clash_ok_fraction() const;
  double break_ok_fraction() const;
};

ValidityMask validity(const Trajectory& traj, const ValidityThresholds& th = {});

// ---- coverage -----------------------------------------------------------------

enum class CoverageMode {
  per_component,  ///< 1D histograms of PC1 and PC2, metrics averaged
  joint,          ///< one 2D histogram over (PC1, PC2)
};

struct CoverageResult {
  bool available = false;
  double jsd = 0.0;  ///< Jensen-Shannon distance, log base 2
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Jensen-Shannon distance (square root of the base-2 divergence).
double js_distance(const Vector& p, const Vector& q);

/// Histogram coverage of generated vs reference projections (first two
/// columns used). Bin edges span the reference extent padded by 1% on each
/// side; generated samples outside it fall into an overflow cell.
CoverageResult coverage(const Matrix& gen_proj, const Matrix& ref_proj, int bins = 10,
                        CoverageMode mode = CoverageMode::per_component);

// ---- kinetics ------------------------------------------------------------------

/// Frame pairs (l, l + lag) both valid; an empty mask means all valid.
std::vector<int> valid_starts(std::size_t length, int lag, const std::vector<bool>& mask);

/// Mean over start frames of sqrt(|y_{l+lag} - y_l|^2 / residues).
std::vector<std::optional<double>> rmsd_curve(const Matrix& proj, const std::vector<int>& lags, int residues,
                                              const std::vector<bool>& mask = {});

/// E[(y_l - mu) . (y_{l+lag} - mu)] / E|y - mu|^2 with the global mean.
/// Empty optional when the variance vanishes or no pair exists.
std::vector<std::optional<double>> autocorr_curve(const Matrix& proj, const std::vector<int>& lags,
                                                  const std::vector<bool>& mask = {});

/// Squared Frobenius norm of C00^{-1/2} C0t Ctt^{-1/2}.
std::vector<std::optional<double>> vamp2_curve(const Matrix& proj, const std::vector<int>& lags, double eps = 1e-6,
                                               const std::vector<bool>& mask = {});

struct TicaModel {
  Vector eigenvalues;   ///< descending
  Matrix eigenvectors;  ///< features x components, kinetic-map scaled
  int pairs = 0;
};

/// tICA with symmetric estimators on valid pairs; whitening discards C0
/// eigenvalues below eps. Empty when fewer than min_pairs pairs are valid.
std::optional<TicaModel> fit_tica(const Matrix& x, int lag, const std::vector<bool>& mask = {}, double eps = 1e-6,
                                  int min_pairs = 30);

/// Per-residue score S_i = max(|v_ix|, |v_iy|, |v_iz|) of a component.
Vector residue_scores(const Vector& v);

double pearson(const Vector& a, const Vector& b);

/// |Pearson(S_ref, S_gen)| averaged over the first two components, per lag.
std::vector<std::optional<double>> tica_correlation(const Matrix& gen, const Matrix& ref, const std::vector<int>& lags,
                                                    const std::vector<bool>& gen_mask = {},
                                                    const std::vector<bool>& ref_mask = {}, double eps = 1e-6);

// ---- report ---------------------------------------------------------------------

struct EvalOptions {
  std::vector<int> lags{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<int> tica_lags{1, 5, 10, 20};
  int coverage_bins = 10;
  CoverageMode coverage_mode = CoverageMode::per_component;
  int kinetic_components = 32;
  bool coverage_valid_only = false;
  ValidityThresholds thresholds;
};

struct MetricReport {
  CoverageResult coverage;
  CoverageMode coverage_mode = CoverageMode::per_component;
  double valid_fraction = 0.0;
  double clash_ok_fraction = 0.0;
  double break_ok_fraction = 0.0;
  std::vector<int> lags;
  std::vector<std::optional<double>> rmsd_gen, rmsd_ref, autocorr_gen, autocorr_ref, vamp2_gen, vamp2_ref;
  std::vector<int> tica_lags;
  std::vector<std::optional<double>> tica;
  ValidityThresholds thresholds;

  nlohmann::ordered_json to_json() const;
};

/// Aligns both trajectories to the first reference frame, fits PCA on the
/// reference and evaluates every metric.
MetricReport evaluate(const Trajectory& gen, const Trajectory& ref, const EvalOptions& opt = {});

/// Largest absolute difference between two curves at lags where both exist.
std::optional<double> max_curve_difference(const std::vector<std::optional<double>>& a,
                                           const std::vector<std::optional<double>>& b);

}  // namespace stmd
