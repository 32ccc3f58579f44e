#include <doctest.h>

#include <cmath>
#include <random>

#include <Eigen/Eigenvalues>

#include "stmd/metrics.hpp"

using namespace stmd;

namespace {

FrameSet straight_chain(int n, double spacing) {
  FrameSet f(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) f.frames[static_cast<std::size_t>(i)].translation = Vec3(spacing * i, 0.0, 0.0);
  return f;
}

// Ornstein-Uhlenbeck samples y_{l+1} = rho y_l + sqrt(1 - rho^2) xi, in every column.
Matrix ou_samples(int length, int dims, double rho, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Matrix y(length, dims);
  for (int d = 0; d < dims; ++d) y(0, d) = g(rng);
  const double s = std::sqrt(1.0 - rho * rho);
  for (int l = 1; l < length; ++l)
    for (int d = 0; d < dims; ++d) y(l, d) = rho * y(l - 1, d) + s * g(rng);
  return y;
}

}  // namespace

TEST_CASE("pca recovers the dominant axis") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  Matrix x(2000, 3);
  for (int i = 0; i < 2000; ++i) x.row(i) << 3.0 * g(rng) + 1.0, 0.5 * g(rng), 0.1 * g(rng) - 2.0;
  const auto b = fit_pca(x, 2);
  CHECK(b.size() == 2);
  CHECK(std::abs(b.components(0, 0)) > 0.999);
  CHECK(b.explained_variance(0) == doctest::Approx(9.0).epsilon(0.1));
  CHECK(b.mean(2) == doctest::Approx(-2.0).epsilon(0.02));
  CHECK((b.components * b.components.transpose() - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);
  const Matrix p = b.project(x);
  CHECK(p.col(0).mean() == doctest::Approx(0.0).scale(1.0).epsilon(1e-10));
}

TEST_CASE("validity of ideal and damaged chains") {
  Trajectory ideal({straight_chain(16, 3.8)}, 1.0);
  auto m = validity(ideal);
  CHECK(m.valid_fraction() == 1.0);
  CHECK(m.clash_rate[0] == 0.0);
  CHECK(m.break_rate[0] == 0.0);

  // Hairpin: the second half runs back 3.8 A above the first, residue 15 dips
  // to 2.5 A from residue 0. One clash among 105 non-adjacent pairs.
  FrameSet folded = straight_chain(16, 3.8);
  for (int i = 8; i < 16; ++i) folded.frames[static_cast<std::size_t>(i)].translation = Vec3(3.8 * (15 - i), 3.8, 0.0);
  folded.frames[15].translation = Vec3(0.0, 2.5, 0.0);
  m = validity(Trajectory({folded}, 1.0));
  CHECK(m.break_rate[0] == 0.0);
  CHECK(m.clash_rate[0] == doctest::Approx(1.0 / 105.0));
  CHECK(m.valid[0]);
  ValidityThresholds strict;
  strict.max_clash_rate = 0.0;
  CHECK_FALSE(validity(Trajectory({folded}, 1.0), strict).valid[0]);

  FrameSet broken = straight_chain(16, 3.8);
  for (int i = 8; i < 16; ++i) broken.frames[static_cast<std::size_t>(i)].translation.x() += 2.0;
  m = validity(Trajectory({broken}, 1.0));
  CHECK(m.break_rate[0] == doctest::Approx(1.0 / 15.0));
  CHECK_FALSE(m.break_ok[0]);
  CHECK(m.clash_ok[0]);

  ValidityThresholds off;
  off.clash_distance = 0.0;
  off.break_distance = 1e9;
  CHECK(validity(Trajectory({broken}, 1.0), off).valid_fraction() == 1.0);

  const auto two = validity(Trajectory({straight_chain(2, 3.8)}, 1.0));
  CHECK_FALSE(two.clash_defined);
  CHECK(two.valid[0]);
}

TEST_CASE("jensen-shannon distance") {
  Vector p(2), q(2);
  p << 1.0, 0.0;
  q << 0.0, 1.0;
  CHECK(js_distance(p, q) == doctest::Approx(1.0));
  CHECK(js_distance(p, p) == 0.0);
  Vector a(2), b(2);
  a << 0.5, 0.5;
  b << 1.0, 0.0;
  // Direct evaluation with the mixture m = (0.75, 0.25).
  const double m0 = 0.75, m1 = 0.25;
  const double div = 0.5 * (0.5 * std::log2(0.5 / m0) + 0.5 * std::log2(0.5 / m1)) + 0.5 * std::log2(1.0 / m0);
  CHECK(js_distance(a, b) == doctest::Approx(std::sqrt(div)).epsilon(1e-12));
}

TEST_CASE("coverage of identical, disjoint and half-overlapping samples") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix ref(4000, 2);
  for (int i = 0; i < 4000; ++i) ref.row(i) << u(rng), u(rng);

  const auto same = coverage(ref, ref);
  CHECK(same.available);
  CHECK(same.jsd == doctest::Approx(0.0).scale(1.0));
  CHECK(same.recall == 1.0);
  CHECK(same.precision == 1.0);

  Matrix far = ref.array() + 10.0;
  const auto disjoint = coverage(far, ref);
  CHECK(disjoint.jsd == doctest::Approx(1.0));
  CHECK(disjoint.recall == 0.0);
  CHECK(disjoint.precision == 0.0);

  // Generated samples uniform on the lower half of each axis.
  Matrix half = ref * 0.5;
  for (auto mode : {CoverageMode::per_component, CoverageMode::joint}) {
    const auto r = coverage(half, ref, 10, mode);
    // Brute-force histograms over the same edges.
    const int bins = 10;
    const int cells = mode == CoverageMode::joint ? bins * bins : bins;
    const int comps = mode == CoverageMode::joint ? 1 : 2;
    double jsd = 0.0, recall = 0.0, precision = 0.0;
    for (int c = 0; c < comps; ++c) {
      Vector hg = Vector::Zero(cells + 1), hr = Vector::Zero(cells + 1);
      auto bin = [&](const Matrix& m, int i, int col) {
        const double lo = ref.col(col).minCoeff(), hi = ref.col(col).maxCoeff(), pad = 0.01 * (hi - lo);
        const double w = (hi - lo + 2 * pad) / bins;
        return std::min(static_cast<int>((m(i, col) - lo + pad) / w), bins - 1);
      };
      auto cell = [&](const Matrix& m, int i) {
        return mode == CoverageMode::joint ? bin(m, i, 0) * bins + bin(m, i, 1) : bin(m, i, c);
      };
      for (int i = 0; i < half.rows(); ++i) hg(cell(half, i)) += 1;
      for (int i = 0; i < ref.rows(); ++i) hr(cell(ref, i)) += 1;
      jsd += js_distance(hg / hg.sum(), hr / hr.sum()) / comps;
      int g = 0, rf = 0, both = 0;
      for (int i = 0; i <= cells; ++i) {
        g += hg(i) > 0;
        rf += hr(i) > 0;
        both += hg(i) > 0 && hr(i) > 0;
      }
      recall += static_cast<double>(both) / rf / comps;
      precision += static_cast<double>(both) / g / comps;
    }
    CHECK(r.jsd == doctest::Approx(jsd).epsilon(1e-12));
    CHECK(r.recall == doctest::Approx(recall).epsilon(1e-12));
    CHECK(r.precision == doctest::Approx(precision).epsilon(1e-12));
    CHECK(r.recall == doctest::Approx(mode == CoverageMode::joint ? 0.25 : 0.5).epsilon(0.05));
  }
  CHECK_THROWS_AS(coverage(ref, ref, 0), std::invalid_argument);
}

TEST_CASE("constant trajectory kinetics") {
  const Matrix y = Matrix::Constant(50, 2, 1.7);
  const auto r = rmsd_curve(y, {1, 2, 5}, 4);
  for (const auto& v : r) {
    REQUIRE(v.has_value());
    CHECK(*v == 0.0);
  }
  for (const auto& v : autocorr_curve(y, {1, 2, 5})) CHECK_FALSE(v.has_value());
}

TEST_CASE("autocorrelation of an OU process") {
  const double rho = 0.9;
  const Matrix y = ou_samples(200000, 2, rho, 5);
  std::vector<int> lags;
  for (int t = 1; t <= 20; ++t) lags.push_back(t);
  const auto ac = autocorr_curve(y, lags);
  for (int t = 1; t <= 20; ++t) CHECK(std::abs(*ac[t - 1] - std::pow(rho, t)) < 0.03);
}

TEST_CASE("rmsd curve definition") {
  Matrix y(3, 2);
  y << 0, 0, 3, 4, 3, 4;
  const auto r = rmsd_curve(y, {1, 2}, 4);
  // Pairs at lag 1: |(3,4)| = 5 and 0, each divided by sqrt(4).
  CHECK(*r[0] == doctest::Approx((2.5 + 0.0) / 2.0));
  CHECK(*r[1] == doctest::Approx(2.5));
  const auto masked = rmsd_curve(y, {1}, 4, {true, false, true});
  CHECK_FALSE(masked[0].has_value());
}

TEST_CASE("vamp-2 of a linear Markov chain") {
  // Independent AR(1) coordinates with rho_1, rho_2: VAMP-2(t) = rho_1^2t + rho_2^2t.
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  const int n = 200000;
  const double r1 = 0.95, r2 = 0.6;
  Matrix y(n, 2);
  y.row(0) << g(rng), g(rng);
  for (int l = 1; l < n; ++l)
    y.row(l) << r1 * y(l - 1, 0) + std::sqrt(1 - r1 * r1) * g(rng), r2 * y(l - 1, 1) + std::sqrt(1 - r2 * r2) * g(rng);
  const auto v = vamp2_curve(y, {1, 2, 5});
  int k = 0;
  for (int t : {1, 2, 5}) {
    const double expected = std::pow(r1, 2 * t) + std::pow(r2, 2 * t);
    CHECK(std::abs(*v[k++] - expected) / expected < 0.03);
  }
}

TEST_CASE("tica finds the slow residue") {
  // Three residues; residue 1 moves along x with a slow AR(1), the rest is fast noise.
  std::mt19937_64 rng(21);
  std::normal_distribution<double> g;
  const int n = 20000;
  Matrix x(n, 9);
  double slow = 0.0;
  for (int l = 0; l < n; ++l) {
    slow = 0.98 * slow + std::sqrt(1 - 0.98 * 0.98) * g(rng);
    for (int j = 0; j < 9; ++j) x(l, j) = 0.5 * g(rng);
    x(l, 3) += slow;
  }
  const auto m = fit_tica(x, 5);
  REQUIRE(m.has_value());
  const Vector s = residue_scores(m->eigenvectors.col(0));
  CHECK(s(1) > s(0));
  CHECK(s(1) > s(2));

  // Leading eigenvalue against a generalized eigensolver on the same estimators.
  const int lag = 5;
  Matrix a = x.topRows(n - lag), b = x.bottomRows(n - lag);
  const Vector mu = 0.5 * (a.colwise().mean() + b.colwise().mean()).transpose();
  a.rowwise() -= mu.transpose();
  b.rowwise() -= mu.transpose();
  const Matrix c0 = (a.transpose() * a + b.transpose() * b) / (2.0 * (n - lag));
  const Matrix ct = (a.transpose() * b + b.transpose() * a) / (2.0 * (n - lag));
  Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> ges(ct, c0);
  CHECK(m->eigenvalues(0) == doctest::Approx(ges.eigenvalues().maxCoeff()).epsilon(1e-6));
  CHECK(m->eigenvalues(0) == doctest::Approx(std::pow(0.98, lag) * 1.0 / (1.0 + 0.25)).epsilon(0.05));

  CHECK_FALSE(fit_tica(x.topRows(29 + lag), lag).has_value());
  CHECK(fit_tica(x.topRows(30 + lag), lag).has_value());
}

TEST_CASE("evaluate reports every metric") {
  std::vector<FrameSet> frames;
  const Matrix y = ou_samples(200, 3, 0.8, 2);
  for (int l = 0; l < 200; ++l) {
    FrameSet f = straight_chain(6, 3.8);
    for (int i = 0; i < 6; ++i) f.frames[static_cast<std::size_t>(i)].translation += 0.05 * y.row(l).transpose() * (i % 2 ? 1 : -1);
    frames.push_back(f);
  }
  const Trajectory traj(frames, 0.1);
  const auto rep = evaluate(traj, traj);
  const auto j = rep.to_json();
  for (const char* key : {"jsd", "precision", "recall", "f1", "coverage_mode", "jsd_convention", "validity", "lags",
                          "rmsd_gen", "rmsd_ref", "autocorr_gen", "autocorr_ref", "vamp2_gen", "vamp2_ref", "tica_lags",
                          "tica_correlation"})
    CHECK(j.contains(key));
  CHECK(j["jsd"].get<double>() == doctest::Approx(0.0).scale(1.0));
  CHECK(j["validity"]["valid_fraction"].get<double>() == 1.0);
  CHECK(max_curve_difference(rep.autocorr_gen, rep.autocorr_ref).value() < 1e-12);
}
