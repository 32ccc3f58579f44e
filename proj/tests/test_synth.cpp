#include <doctest.h>

#include <cmath>
#include <sstream>

#include "stmd/stmd_format.hpp"
#include "stmd/synth.hpp"

using namespace stmd;

TEST_CASE("stiff springs hold the bond length") {
  SynthConfig sc;
  sc.k_parallel = 1e6;
  sc.k_perpendicular = 1e6;
  sc.friction = 10.0;
  const Trajectory t = synth_generate(sc, 50, 11);
  double worst = 0.0;
  for (std::size_t l = 0; l < t.length(); ++l)
    for (std::size_t i = 0; i + 1 < t.residues(); ++i)
      worst = std::max(worst, std::fabs((t[l].frames[i + 1].translation - t[l].frames[i].translation).norm() - 3.8));
  CHECK(worst < 0.05);
}

TEST_CASE("slowest mode decorrelates at its analytic rate") {
  SynthConfig sc;
  const SynthModes m = synth_modes(sc);
  const Eigen::VectorXd v = m.vectors.col(0);
  const int steps = 100000;
  const Trajectory t = synth_generate(sc, steps, 12);
  const Coords ref = reference_structure(sc);
  Eigen::VectorXd q(steps);
  for (int l = 0; l < steps; ++l) {
    double acc = 0.0;
    for (int i = 0; i < sc.residues; ++i) acc += v.segment<3>(3 * i).dot(t[l].frames[i].translation - ref.row(i).transpose());
    q(l) = acc;
  }
  const double var = q.squaredNorm() / steps;
  CHECK(var == doctest::Approx(m.variance(0)).epsilon(0.05));
  for (int lag : {1, 2}) {
    double c = 0.0;
    for (int l = 0; l + lag < steps; ++l) c += q(l) * q(l + lag);
    c /= (steps - lag) * var;
    const double expect = std::exp(-m.rate(0) * lag * sc.base_dt_ns);
    CHECK(std::fabs(c - expect) <= 0.05 * expect);
  }
}

TEST_CASE("same seed gives identical bytes") {
  SynthConfig sc;
  std::stringstream a, b, c;
  write_stmd(a, synth_generate(sc, 20, 5));
  write_stmd(b, synth_generate(sc, 20, 5));
  write_stmd(c, synth_generate(sc, 20, 6));
  CHECK(a.str() == b.str());
  CHECK(a.str() != c.str());
}

TEST_CASE("invalid parameters are rejected before simulation") {
  SynthConfig sc;
  sc.k_confine = -1.0;
  CHECK_THROWS_AS(synth_generate(sc, 5, 1), std::invalid_argument);
  sc = SynthConfig{};
  sc.friction = 0.0;
  CHECK_THROWS_AS(synth_modes(sc), std::invalid_argument);
  sc = SynthConfig{};
  sc.residues = 2;
  CHECK_THROWS_AS(synth_generate(sc, 5, 1), std::invalid_argument);
}

TEST_CASE("chain frames are proper rotations") {
  SynthConfig sc;
  const Coords x = reference_structure(sc);
  const auto f = chain_frames(x);
  for (const auto& r : f) {
    const Mat3 m = r.matrix();
    CHECK((m.transpose() * m - Mat3::Identity()).norm() < 1e-12);
    CHECK(m.determinant() == doctest::Approx(1.0));
  }
  // The first axis follows the chain tangent.
  const Vec3 t = (x.row(2) - x.row(0)).transpose().normalized();
  CHECK((f[1].matrix().col(0) - t).norm() < 1e-12);
}
