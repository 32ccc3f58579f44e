#include "stmd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/Eigenvalues>

namespace stmd {

Matrix PCABasis::project(const Matrix& x) const {
  if (x.cols() != mean.size()) throw std::invalid_argument("PCABasis::project: feature size mismatch");
  Matrix c = x;
  c.rowwise() -= mean.transpose();
  return c * components.transpose();
}

PCABasis fit_pca(const Matrix& x, int k) {
  if (x.rows() < 2) throw std::invalid_argument("fit_pca: need at least two samples");
  PCABasis b;
  b.mean = x.colwise().mean().transpose();
  Matrix c = x;
  c.rowwise() -= b.mean.transpose();
  const Matrix cov = c.transpose() * c / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  const int f = static_cast<int>(x.cols());
  k = std::clamp(k, 1, f);
  b.components.resize(k, f);
  b.explained_variance.resize(k);
  for (int i = 0; i < k; ++i) {
    b.components.row(i) = es.eigenvectors().col(f - 1 - i).transpose();
    b.explained_variance(i) = std::max(0.0, es.eigenvalues()(f - 1 - i));
  }
  return b;
}

// ---- validity ----------------------------------------------------------------------

static double fraction(const std::vector<bool>& v) {
  if (v.empty()) return 0.0;
  return static_cast<double>(std::count(v.begin(), v.end(), true)) / static_cast<double>(v.size());
}

double ValidityMask::valid_fraction() const { return fraction(valid); }
double ValidityMask::clash_ok_fraction() const { return fraction(clash_ok); }
double ValidityMask::break_ok_fraction() const { return fraction(break_ok); }

ValidityMask validity(const Trajectory& traj, const ValidityThresholds& th) {
  ValidityMask m;
  const std::size_t n = traj.residues();
  m.clash_defined = n >= 3;
  for (std::size_t l = 0; l < traj.length(); ++l) {
    const Coords x = traj[l].translations();
    std::size_t clashes = 0, nonadj = 0, breaks = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const double d = (x.row(static_cast<Eigen::Index>(i)) - x.row(static_cast<Eigen::Index>(j))).norm();
        if (j == i + 1) {
          if (d > th.break_distance) ++breaks;
        } else {
          ++nonadj;
          if (d < th.clash_distance) ++clashes;
        }
      }
    const double cr = nonadj ? static_cast<double>(clashes) / nonadj : 0.0;
    const double br = n > 1 ? static_cast<double>(breaks) / (n - 1) : 0.0;
    m.clash_rate.push_back(cr);
    m.break_rate.push_back(br);
    const bool c_ok = !m.clash_defined || cr <= th.max_clash_rate;
    const bool b_ok = br <= th.max_break_rate;
    m.clash_ok.push_back(c_ok);
    m.break_ok.push_back(b_ok);
    m.valid.push_back(c_ok && b_ok);
  }
  return m;
}

// ---- coverage ----------------------------------------------------------------------

double js_distance(const Vector& p, const Vector& q) {
  if (p.size() != q.size()) throw std::invalid_argument("js_distance: size mismatch");
  const Vector m = 0.5 * (p + q);
  double js = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p(i) > 0.0) js += 0.5 * p(i) * std::log2(p(i) / m(i));
    if (q(i) > 0.0) js += 0.5 * q(i) * std::log2(q(i) / m(i));
  }
  return std::sqrt(std::clamp(js, 0.0, 1.0));
}

namespace {

struct Edges {
  double lo, width;
  int bins;
  // Bin index, or bins for the overflow cell.
  int index(double y) const {
    const double u = (y - lo) / width;
    if (u < 0.0 || u > bins) return bins;
    return std::min(static_cast<int>(u), bins - 1);
  }
};

Edges edges_for(const Vector& ref, int bins) {
  const double lo = ref.minCoeff(), hi = ref.maxCoeff();
  double pad = 0.01 * (hi - lo);
  if (pad <= 0.0) pad = 1e-9 * std::max(1.0, std::abs(lo));
  return {lo - pad, (hi - lo + 2.0 * pad) / bins, bins};
}

CoverageResult compare_counts(const Vector& gen, const Vector& ref) {
  CoverageResult r;
  r.available = true;
  r.jsd = js_distance(gen / gen.sum(), ref / ref.sum());
  int g = 0, rf = 0, both = 0;
  for (Eigen::Index i = 0; i < gen.size(); ++i) {
    const bool go = gen(i) > 0, ro = ref(i) > 0;
    g += go;
    rf += ro;
    both += go && ro;
  }
  r.precision = g ? static_cast<double>(both) / g : 0.0;
  r.recall = rf ? static_cast<double>(both) / rf : 0.0;
  r.f1 = (r.precision + r.recall) > 0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

}  // namespace

CoverageResult coverage(const Matrix& gen_proj, const Matrix& ref_proj, int bins, CoverageMode mode) {
  if (bins < 1) throw std::invalid_argument("coverage: bins must be >= 1");
  if (gen_proj.rows() == 0 || ref_proj.rows() == 0) return {};
  const int comps = static_cast<int>(std::min<Eigen::Index>(2, std::min(gen_proj.cols(), ref_proj.cols())));
  if (comps < 1) return {};
  if (mode == CoverageMode::per_component || comps == 1) {
    CoverageResult acc;
    acc.available = true;
    for (int c = 0; c < comps; ++c) {
      const Edges e = edges_for(ref_proj.col(c), bins);
      Vector hg = Vector::Zero(bins + 1), hr = Vector::Zero(bins + 1);
      for (Eigen::Index i = 0; i < gen_proj.rows(); ++i) hg(e.index(gen_proj(i, c))) += 1.0;
      for (Eigen::Index i = 0; i < ref_proj.rows(); ++i) hr(e.index(ref_proj(i, c))) += 1.0;
      const auto r = compare_counts(hg, hr);
      acc.jsd += r.jsd / comps;
      acc.precision += r.precision / comps;
      acc.recall += r.recall / comps;
      acc.f1 += r.f1 / comps;
    }
    return acc;
  }
  const Edges e0 = edges_for(ref_proj.col(0), bins), e1 = edges_for(ref_proj.col(1), bins);
  const int cells = bins * bins + 1;
  auto cell = [&](double a, double b) {
    const int i = e0.index(a), j = e1.index(b);
    return (i == bins || j == bins) ? cells - 1 : i * bins + j;
  };
  Vector hg = Vector::Zero(cells), hr = Vector::Zero(cells);
  for (Eigen::Index i = 0; i < gen_proj.rows(); ++i) hg(cell(gen_proj(i, 0), gen_proj(i, 1))) += 1.0;
  for (Eigen::Index i = 0; i < ref_proj.rows(); ++i) hr(cell(ref_proj(i, 0), ref_proj(i, 1))) += 1.0;
  return compare_counts(hg, hr);
}

// ---- kinetics -----------------------------------------------------------------------

std::vector<int> valid_starts(std::size_t length, int lag, const std::vector<bool>& mask) {
  if (lag < 0) throw std::invalid_argument("lag must be non-negative");
  if (!mask.empty() && mask.size() != length) throw std::invalid_argument("mask length mismatch");
  std::vector<int> out;
  for (std::size_t l = 0; l + static_cast<std::size_t>(lag) < length; ++l)
    if (mask.empty() || (mask[l] && mask[l + lag])) out.push_back(static_cast<int>(l));
  return out;
}

std::vector<std::optional<double>> rmsd_curve(const Matrix& proj, const std::vector<int>& lags, int residues,
                                              const std::vector<bool>& mask) {
  if (residues < 1) throw std::invalid_argument("rmsd_curve: residues must be >= 1");
  std::vector<std::optional<double>> out;
  for (int lag : lags) {
    const auto starts = valid_starts(static_cast<std::size_t>(proj.rows()), lag, mask);
    if (starts.empty()) {
      out.emplace_back();
      continue;
    }
    double acc = 0.0;
    for (int l : starts) acc += std::sqrt((proj.row(l + lag) - proj.row(l)).squaredNorm() / residues);
    out.emplace_back(acc / static_cast<double>(starts.size()));
  }
  return out;
}

static std::vector<int> valid_frames(Eigen::Index n, const std::vector<bool>& mask) {
  std::vector<int> out;
  for (Eigen::Index i = 0; i < n; ++i)
    if (mask.empty() || mask[static_cast<std::size_t>(i)]) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<std::optional<double>> autocorr_curve(const Matrix& proj, const std::vector<int>& lags,
                                                  const std::vector<bool>& mask) {
  std::vector<std::optional<double>> out;
  const auto frames = valid_frames(proj.rows(), mask);
  if (frames.empty()) return std::vector<std::optional<double>>(lags.size());
  Eigen::RowVectorXd mu = Eigen::RowVectorXd::Zero(proj.cols());
  for (int f : frames) mu += proj.row(f);
  mu /= static_cast<double>(frames.size());
  double var = 0.0;
  for (int f : frames) var += (proj.row(f) - mu).squaredNorm();
  var /= static_cast<double>(frames.size());
  // Variance at roundoff level counts as zero.
  const bool flat = !(var > 1e-20 * (1.0 + mu.squaredNorm()));
  for (int lag : lags) {
    const auto starts = valid_starts(static_cast<std::size_t>(proj.rows()), lag, mask);
    if (starts.empty() || flat) {
      out.emplace_back();
      continue;
    }
    if (lag == 0) {
      out.emplace_back(1.0);
      continue;
    }
    double acc = 0.0;
    for (int l : starts) acc += (proj.row(l) - mu).dot(proj.row(l + lag) - mu);
    out.emplace_back(acc / static_cast<double>(starts.size()) / var);
  }
  return out;
}

// Symmetric inverse square root restricted to eigenvalues above eps.
static Matrix inv_sqrt(const Matrix& c, double eps) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(c);
  Vector d = es.eigenvalues();
  for (Eigen::Index i = 0; i < d.size(); ++i) d(i) = d(i) > eps ? 1.0 / std::sqrt(d(i)) : 0.0;
  return es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
}

std::vector<std::optional<double>> vamp2_curve(const Matrix& proj, const std::vector<int>& lags, double eps,
                                               const std::vector<bool>& mask) {
  std::vector<std::optional<double>> out;
  const auto frames = valid_frames(proj.rows(), mask);
  if (frames.empty()) return std::vector<std::optional<double>>(lags.size());
  Eigen::RowVectorXd mu = Eigen::RowVectorXd::Zero(proj.cols());
  for (int f : frames) mu += proj.row(f);
  mu /= static_cast<double>(frames.size());
  for (int lag : lags) {
    const auto starts = valid_starts(static_cast<std::size_t>(proj.rows()), lag, mask);
    if (starts.empty()) {
      out.emplace_back();
      continue;
    }
    const Eigen::Index n = static_cast<Eigen::Index>(starts.size());
    Matrix x0(n, proj.cols()), xt(n, proj.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      x0.row(i) = proj.row(starts[i]) - mu;
      xt.row(i) = proj.row(starts[i] + lag) - mu;
    }
    const Matrix c00 = x0.transpose() * x0 / static_cast<double>(n);
    const Matrix c0t = x0.transpose() * xt / static_cast<double>(n);
    const Matrix ctt = xt.transpose() * xt / static_cast<double>(n);
    const Matrix k = inv_sqrt(c00, eps) * c0t * inv_sqrt(ctt, eps);
    out.emplace_back(k.squaredNorm());
  }
  return out;
}

std::optional<TicaModel> fit_tica(const Matrix& x, int lag, const std::vector<bool>& mask, double eps,
                                  int min_pairs) {
  if (lag < 1) throw std::invalid_argument("fit_tica: lag must be >= 1");
  const auto starts = valid_starts(static_cast<std::size_t>(x.rows()), lag, mask);
  if (static_cast<int>(starts.size()) < min_pairs || starts.empty()) return std::nullopt;
  const Eigen::Index n = static_cast<Eigen::Index>(starts.size());
  Matrix x0(n, x.cols()), xt(n, x.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    x0.row(i) = x.row(starts[i]);
    xt.row(i) = x.row(starts[i] + lag);
  }
  const Eigen::RowVectorXd mu = (x0.colwise().sum() + xt.colwise().sum()) / (2.0 * n);
  x0.rowwise() -= mu;
  xt.rowwise() -= mu;
  const Matrix c0 = (x0.transpose() * x0 + xt.transpose() * xt) / (2.0 * n);
  const Matrix ct = (x0.transpose() * xt + xt.transpose() * x0) / (2.0 * n);
  Eigen::SelfAdjointEigenSolver<Matrix> es0(c0);
  std::vector<int> keep;
  for (Eigen::Index i = es0.eigenvalues().size() - 1; i >= 0; --i)
    if (es0.eigenvalues()(i) > eps) keep.push_back(static_cast<int>(i));
  if (keep.empty()) return std::nullopt;
  Matrix w(x.cols(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t j = 0; j < keep.size(); ++j)
    w.col(static_cast<Eigen::Index>(j)) = es0.eigenvectors().col(keep[j]) / std::sqrt(es0.eigenvalues()(keep[j]));
  const Matrix m = w.transpose() * ct * w;
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (m + m.transpose()));
  const Eigen::Index k = m.rows();
  TicaModel model;
  model.pairs = static_cast<int>(n);
  model.eigenvalues.resize(k);
  model.eigenvectors.resize(x.cols(), k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const double lam = es.eigenvalues()(k - 1 - i);
    model.eigenvalues(i) = lam;
    model.eigenvectors.col(i) = lam * (w * es.eigenvectors().col(k - 1 - i));
  }
  return model;
}

Vector residue_scores(const Vector& v) {
  if (v.size() % 3 != 0) throw std::invalid_argument("residue_scores: length must be 3N");
  Vector s(v.size() / 3);
  for (Eigen::Index i = 0; i < s.size(); ++i)
    s(i) = std::max({std::abs(v(3 * i)), std::abs(v(3 * i + 1)), std::abs(v(3 * i + 2))});
  return s;
}

double pearson(const Vector& a, const Vector& b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("pearson: need equal sizes >= 2");
  const Vector ac = a.array() - a.mean();
  const Vector bc = b.array() - b.mean();
  const double den = ac.norm() * bc.norm();
  return den > 0.0 ? ac.dot(bc) / den : 0.0;
}

std::vector<std::optional<double>> tica_correlation(const Matrix& gen, const Matrix& ref, const std::vector<int>& lags,
                                                    const std::vector<bool>& gen_mask,
                                                    const std::vector<bool>& ref_mask, double eps) {
  std::vector<std::optional<double>> out;
  for (int lag : lags) {
    const auto mg = fit_tica(gen, lag, gen_mask, eps);
    const auto mr = fit_tica(ref, lag, ref_mask, eps);
    if (!mg || !mr) {
      out.emplace_back();
      continue;
    }
    const Eigen::Index comps = std::min<Eigen::Index>(2, std::min(mg->eigenvectors.cols(), mr->eigenvectors.cols()));
    double acc = 0.0;
    for (Eigen::Index c = 0; c < comps; ++c)
      acc += std::abs(pearson(residue_scores(mr->eigenvectors.col(c)), residue_scores(mg->eigenvectors.col(c))));
    out.emplace_back(acc / static_cast<double>(comps));
  }
  return out;
}

// ---- report -----------------------------------------------------------------------

static nlohmann::ordered_json curve_json(const std::vector<std::optional<double>>& c) {
  auto a = nlohmann::ordered_json::array();
  for (const auto& v : c) a.push_back(v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json());
  return a;
}

nlohmann::ordered_json MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["jsd"] = coverage.available ? nlohmann::ordered_json(coverage.jsd) : nlohmann::ordered_json();
  j["precision"] = coverage.available ? nlohmann::ordered_json(coverage.precision) : nlohmann::ordered_json();
  j["recall"] = coverage.available ? nlohmann::ordered_json(coverage.recall) : nlohmann::ordered_json();
  j["f1"] = coverage.available ? nlohmann::ordered_json(coverage.f1) : nlohmann::ordered_json();
  j["coverage_mode"] = coverage_mode == CoverageMode::per_component ? "per_component" : "joint";
  j["jsd_convention"] = "jensen_shannon_distance_log2";
  j["validity"] = {{"valid_fraction", valid_fraction},
                   {"clash_ok_fraction", clash_ok_fraction},
                   {"break_ok_fraction", break_ok_fraction},
                   {"clash_distance", thresholds.clash_distance},
                   {"break_distance", thresholds.break_distance},
                   {"max_clash_rate", thresholds.max_clash_rate},
                   {"max_break_rate", thresholds.max_break_rate}};
  j["lags"] = lags;
  j["rmsd_gen"] = curve_json(rmsd_gen);
  j["rmsd_ref"] = curve_json(rmsd_ref);
  j["autocorr_gen"] = curve_json(autocorr_gen);
  j["autocorr_ref"] = curve_json(autocorr_ref);
  j["vamp2_gen"] = curve_json(vamp2_gen);
  j["vamp2_ref"] = curve_json(vamp2_ref);
  j["tica_lags"] = tica_lags;
  j["tica_correlation"] = curve_json(tica);
  return j;
}

MetricReport evaluate(const Trajectory& gen, const Trajectory& ref, const EvalOptions& opt) {
  if (gen.length() == 0 || ref.length() < 2) throw std::invalid_argument("evaluate: trajectories too short");
  if (gen.residues() != ref.residues()) throw std::invalid_argument("evaluate: residue counts differ");
  const int n = static_cast<int>(ref.residues());
  const auto ag = kabsch_align(gen, ref[0]).trajectory;
  const auto ar = kabsch_align(ref, ref[0]).trajectory;
  const Matrix xg = ag.flattened_translations();
  const Matrix xr = ar.flattened_translations();
  const PCABasis basis = fit_pca(xr, opt.kinetic_components);
  const Matrix pg = basis.project(xg);
  const Matrix pr = basis.project(xr);

  MetricReport rep;
  rep.thresholds = opt.thresholds;
  rep.coverage_mode = opt.coverage_mode;
  const auto vg = validity(gen, opt.thresholds);
  const auto vr = validity(ref, opt.thresholds);
  rep.valid_fraction = vg.valid_fraction();
  rep.clash_ok_fraction = vg.clash_ok_fraction();
  rep.break_ok_fraction = vg.break_ok_fraction();

  Matrix pg_cov = pg;
  if (opt.coverage_valid_only) {
    const auto frames = valid_frames(pg.rows(), vg.valid);
    pg_cov.resize(static_cast<Eigen::Index>(frames.size()), pg.cols());
    for (std::size_t i = 0; i < frames.size(); ++i) pg_cov.row(static_cast<Eigen::Index>(i)) = pg.row(frames[i]);
  }
  rep.coverage = coverage(pg_cov, pr, opt.coverage_bins, opt.coverage_mode);

  rep.lags = opt.lags;
  rep.rmsd_gen = rmsd_curve(pg, opt.lags, n);
  rep.rmsd_ref = rmsd_curve(pr, opt.lags, n);
  rep.autocorr_gen = autocorr_curve(pg, opt.lags);
  rep.autocorr_ref = autocorr_curve(pr, opt.lags);
  rep.vamp2_gen = vamp2_curve(pg, opt.lags);
  rep.vamp2_ref = vamp2_curve(pr, opt.lags);
  rep.tica_lags = opt.tica_lags;
  rep.tica = tica_correlation(xg, xr, opt.tica_lags, vg.valid, vr.valid);
  return rep;
}

std::optional<double> max_curve_difference(const std::vector<std::optional<double>>& a,
                                           const std::vector<std::optional<double>>& b) {
  std::optional<double> m;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i)
    if (a[i] && b[i]) m = std::max(m.value_or(0.0), std::abs(*a[i] - *b[i]));
  return m;
}

}  // namespace stmd
