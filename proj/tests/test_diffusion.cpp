#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "stmd/diffusion.hpp"
#include "stmd/errors.hpp"
#include "stmd/igso3.hpp"

using namespace stmd;

TEST_CASE("translation schedule") {
  NoiseSchedule s;
  CHECK(s.alpha_bar(0.0) == 1.0);
  CHECK(s.alpha_bar(1.0) == doctest::Approx(std::exp(-10.05)).epsilon(1e-12));
  CHECK(s.alpha_bar(1.0) == doctest::Approx(4.32e-5).epsilon(1e-2));
  double prev = 2.0;
  for (int i = 0; i <= 200; ++i) {
    const double a = s.alpha_bar(i / 200.0);
    CHECK(a < prev);
    prev = a;
  }
  CHECK_THROWS_AS(s.alpha_bar(1.5), std::out_of_range);
  CHECK_THROWS_AS(s.alpha_bar(-0.1), std::out_of_range);
}

TEST_CASE("rotation schedule") {
  NoiseSchedule s;
  CHECK(s.sigma(0.0) == doctest::Approx(0.1));
  CHECK(s.sigma(1.0) == doctest::Approx(1.5));
  CHECK(s.sigma(0.5) == doctest::Approx(std::sqrt(0.15)).epsilon(1e-12));
  // d sigma^2 / d tau by central difference.
  const double h = 1e-6, tau = 0.3;
  const double fd = (std::pow(s.sigma(tau + h), 2) - std::pow(s.sigma(tau - h), 2)) / (2 * h);
  CHECK(s.sigma_sq_rate(tau) == doctest::Approx(fd).epsilon(1e-6));
}

TEST_CASE("forward translations") {
  NoiseSchedule s;
  Rng rng(1);
  Coords t0 = Coords::Random(5, 3);
  SUBCASE("tau 0 is the identity") {
    const auto r = forward_translations(s, t0, 0.0, rng);
    CHECK((r.noisy - t0).norm() == 0.0);
    CHECK(r.eps.rows() == 5);
  }
  SUBCASE("zero signal") {
    const auto r = forward_translations(s, Coords::Zero(5, 3), 0.5, rng);
    CHECK((r.noisy - std::sqrt(1 - s.alpha_bar(0.5)) * r.eps).norm() == 0.0);
  }
  SUBCASE("terminal variance") {
    double acc = 0.0;
    long n = 0;
    for (int k = 0; k < 20000; ++k) {
      const auto r = forward_translations(s, Coords::Zero(5, 3), 1.0, rng);
      acc += r.noisy.squaredNorm();
      n += 15;
    }
    CHECK(acc / n == doctest::Approx(1.0 - s.alpha_bar(1.0)).epsilon(0.02));
  }
}

TEST_CASE("reverse step") {
  NoiseSchedule s;
  Rng rng(2);
  FrameSet x(4);
  for (auto& f : x.frames) f.translation = Vec3(rng.normal(), rng.normal(), rng.normal()) * 10;
  const FrameScore zero = FrameScore::zeros(4);
  SUBCASE("pure drift") {
    const double tau = 0.7, dtau = 0.01;
    const FrameSet y = reverse_step(s, x, zero, tau, dtau, ReverseNoise::zeros(4));
    const Coords t = x.translations() * s.coordinate_scale;
    const Coords expect = t + 0.5 * s.beta(tau) * t * dtau;
    CHECK((y.translations() * s.coordinate_scale - expect).norm() < 1e-12);
    for (std::size_t i = 0; i < 4; ++i) CHECK(rotation_distance(y.frames[i].rotation, x.frames[i].rotation) < 1e-12);
  }
  SUBCASE("zero step") {
    const FrameSet y = reverse_step(s, x, zero, 0.5, 0.0, rng);
    CHECK((y.translations() - x.translations()).norm() == 0.0);
  }
  SUBCASE("non-finite score") {
    FrameScore bad = zero;
    bad.trans(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(reverse_step(s, x, bad, 0.5, 0.01, rng), NumericalError);
  }
}

TEST_CASE("reverse sampler recovers a Gaussian target") {
  // Single residue, rotation fixed, analytic score of N(0, v0) data.
  NoiseSchedule s;
  Rng rng(3);
  const double v0 = 0.3;
  auto var = [&](double tau) { return s.alpha_bar(tau) * v0 + 1.0 - s.alpha_bar(tau); };
  double acc = 0.0;
  const int runs = 10000;
  for (int r = 0; r < runs; ++r) {
    FrameSet x = sample_prior(s, 1, rng, false);
    x.frames[0].rotation = Rotation::identity();
    for (int k = 0; k < s.steps; ++k) {
      const double tau = s.tau_max - k * s.step_size();
      FrameScore sc = FrameScore::zeros(1);
      sc.trans = -(x.translations() * s.coordinate_scale) / var(tau);
      x = reverse_step(s, x, sc, tau, s.step_size(), rng, false);
    }
    acc += (x.translations() * s.coordinate_scale).squaredNorm() / 3.0;
  }
  CHECK(acc / runs == doctest::Approx(var(s.tau_min)).epsilon(0.05));
}

TEST_CASE("denoise and forward frames") {
  NoiseSchedule s;
  Rng rng(4);
  FrameSet x0(6);
  for (auto& f : x0.frames) f.translation = Vec3(rng.normal(), rng.normal(), rng.normal()) * 5 + Vec3(10, 0, 0);
  const FrameSet y = forward_frames(s, x0, 0.3, rng, true);
  CHECK((y.centroid() - x0.centroid()).norm() < 1e-10);
  // With the exact score of a point mass at x0, the posterior mean is x0.
  FrameScore sc = FrameScore::zeros(6);
  const double a = s.alpha_bar(0.3);
  sc.trans = -(y.translations() * s.coordinate_scale - std::sqrt(a) * x0.translations() * s.coordinate_scale) / (1 - a);
  const FrameSet d = denoise_translations(s, y, sc, 0.3);
  CHECK((d.translations() - x0.translations()).norm() < 1e-9);
}

TEST_CASE("IGSO3 density") {
  for (double sigma : {0.1, 0.5, 1.5}) {
    const int m = 20000;
    const double h = std::numbers::pi / m;
    double acc = 0.0;
    for (int i = 0; i <= m; ++i) acc += ((i == 0 || i == m) ? 1 : (i % 2 ? 4 : 2)) * igso3_angle_pdf(i * h, sigma);
    CHECK(std::fabs(acc * h / 3 - 1.0) < 1e-3);
  }
  // The density peaks at w = 0, where its log-derivative vanishes.
  CHECK(std::fabs(igso3_dlog_density(1e-6, 0.5)) < 1e-3);
  // Derivative matches finite differences of log f.
  const double w = 0.7, sigma = 0.4, h = 1e-6;
  const double fd = (std::log(igso3_density(w + h, sigma)) - std::log(igso3_density(w - h, sigma))) / (2 * h);
  CHECK(igso3_dlog_density(w, sigma) == doctest::Approx(fd).epsilon(1e-6));
}

TEST_CASE("IGSO3 table") {
  const auto t = IGSO3Table::shared(0.05, 3.0);
  CHECK_THROWS_AS(t->cdf(1.0, 5.0), std::out_of_range);
  CHECK(t->cdf(0.0, 0.5) == doctest::Approx(0.0));
  CHECK(t->cdf(std::numbers::pi, 0.5) == doctest::Approx(1.0));
  for (int k = 0; k < static_cast<int>(t->sigma_grid().size()); k += 16) CHECK(std::fabs(t->raw_mass(k) - 1.0) < 1e-3);
  Rng rng(5);
  SUBCASE("sampled angles follow the CDF") {
    const double sigma = 0.8;
    const int n = 40000;
    int below = 0;
    const double q = 1.0;
    for (int i = 0; i < n; ++i) below += t->sample_angle(sigma, rng) < q ? 1 : 0;
    CHECK(static_cast<double>(below) / n == doctest::Approx(t->cdf(q, sigma)).epsilon(0.02));
  }
  SUBCASE("small-sigma branch") {
    const double sigma = 0.02;
    REQUIRE(t->below_table(sigma));
    double mean = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) mean += t->sample_angle(sigma, rng);
    mean /= n;
    CHECK(std::fabs(mean / (sigma * std::sqrt(8.0 / std::numbers::pi)) - 1.0) < 0.05);
  }
  SUBCASE("score is the gradient of the log density in the body frame") {
    const Rotation mean = exp_so3(Vec3(0.2, -0.1, 0.4));
    const Rotation x = mean * exp_so3(Vec3(0.3, 0.5, -0.2));
    const double sigma = 0.6, h = 1e-5;
    const Vec3 s = t->score(mean, x, sigma);
    for (int a = 0; a < 3; ++a) {
      Vec3 e = Vec3::Zero();
      e(a) = h;
      auto logf = [&](const Rotation& r) { return std::log(igso3_density((mean.inverse() * r).angle(), sigma)); };
      const double fd = (logf(x * exp_so3(e)) - logf(x * exp_so3(-e))) / (2 * h);
      CHECK(s(a) == doctest::Approx(fd).epsilon(1e-3));
    }
  }
}

TEST_CASE("uniform rotations have the Haar angle distribution") {
  Rng rng(6);
  const int n = 50000;
  int below = 0;
  for (int i = 0; i < n; ++i) below += sample_uniform_rotation(rng).angle() < std::numbers::pi / 2 ? 1 : 0;
  // P(w < pi/2) = (w - sin w)/pi at pi/2.
  const double expect = (std::numbers::pi / 2 - 1.0) / std::numbers::pi;
  CHECK(static_cast<double>(below) / n == doctest::Approx(expect).epsilon(0.03));
}
