#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "stmd/errors.hpp"
#include "stmd/synth.hpp"
#include "stmd/training.hpp"

using namespace stmd;

namespace {

DenoiserConfig tiny() {
  DenoiserConfig c;
  c.model_dim = 16;
  c.heads = 2;
  c.pair_dim = 4;
  c.blocks = 1;
  return c;
}

}  // namespace

TEST_CASE("block-causal mask") {
  const auto m1 = build_block_causal_mask(1);
  CHECK(m1.keys(0) == std::vector<int>{0});
  CHECK(m1.keys(1) == std::vector<int>{1});
  // Frame-level sets for L = 2 with positions c1=0, c2=1, n1=2, n2=3.
  const auto m2 = build_block_causal_mask(2);
  CHECK(m2.keys(0) == std::vector<int>{0});
  CHECK(m2.keys(1) == std::vector<int>{0, 1});
  CHECK(m2.keys(2) == std::vector<int>{2});
  CHECK(m2.keys(3) == std::vector<int>{0, 3});
  const auto tok = m2.tokens(3);
  CHECK(tok.rows() == 12);
  CHECK(tok(3 * 3 + 1, 0 * 3 + 2));
  CHECK(!tok(3 * 3 + 1, 1 * 3 + 2));
  CHECK_THROWS(build_block_causal_mask(0));
}

TEST_CASE("stride sampling") {
  TrainConfig cfg;
  Rng rng(1);
  std::vector<double> u;
  for (int i = 0; i < 10000; ++i) {
    const double dt = sample_log_uniform_dt(cfg, rng);
    u.push_back((std::log(dt) - std::log(cfg.dt_min_ns)) / (std::log(cfg.dt_max_ns) - std::log(cfg.dt_min_ns)));
  }
  std::sort(u.begin(), u.end());
  double ks = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i)
    ks = std::max({ks, std::fabs(u[i] - i / 1e4), std::fabs((i + 1) / 1e4 - u[i])});
  CHECK(ks < 0.02);

  SynthConfig sc;
  const Trajectory t = synth_generate(sc, 3000, 2);
  const NoiseSchedule ns;
  for (int k = 0; k < 200; ++k) {
    const auto ex = sample_training_example(t, cfg, ns, rng);
    CHECK(ex.stride >= 1);
    CHECK(ex.stride <= cfg.max_stride);
    CHECK(ex.dt_ns == doctest::Approx(ex.stride * cfg.base_dt_ns));
    CHECK(ex.start + (cfg.frames_per_sample - 1) * ex.stride < 3000);
  }
}

TEST_CASE("training examples") {
  SynthConfig sc;
  const Trajectory t = synth_generate(sc, 500, 3);
  const NoiseSchedule ns;
  TrainConfig cfg;
  cfg.dt_max_ns = 0.5;
  SUBCASE("no context perturbation leaves contexts clean") {
    cfg.ctx_noise_prob = 0.0;
    Rng rng(4);
    const auto ex = sample_training_example(t, cfg, ns, rng);
    for (std::size_t l = 0; l < ex.clean.size(); ++l) {
      CHECK((ex.context[l].translations() - ex.clean[l].translations()).norm() == 0.0);
      CHECK(ex.ctx_tau[l] == 0.0);
    }
  }
  SUBCASE("seeded draws are reproducible") {
    Rng a(5), b(5);
    const auto x = sample_training_example(t, cfg, ns, a);
    const auto y = sample_training_example(t, cfg, ns, b);
    CHECK(x.start == y.start);
    CHECK(x.stride == y.stride);
    for (std::size_t l = 0; l < x.noisy.size(); ++l) {
      CHECK((x.noisy[l].translations() - y.noisy[l].translations()).norm() == 0.0);
      CHECK((x.eps[l] - y.eps[l]).norm() == 0.0);
    }
  }
  SUBCASE("targets are consistent with the noised frames") {
    Rng rng(6);
    const auto ex = sample_training_example(t, cfg, ns, rng);
    for (std::size_t l = 0; l < ex.clean.size(); ++l) {
      const double a = ns.alpha_bar(ex.tau[l]);
      const Coords x0 = ex.clean[l].translations() * ns.coordinate_scale;
      const Coords xt = ex.noisy[l].translations() * ns.coordinate_scale;
      const Coords c0 = x0.rowwise() - x0.colwise().mean();
      const Coords ct = xt.rowwise() - xt.colwise().mean();
      CHECK((ct - std::sqrt(a) * c0 - std::sqrt(1 - a) * ex.eps[l]).norm() < 1e-10);
      CHECK(ex.eps[l].colwise().sum().norm() < 1e-10);
    }
  }
}

TEST_CASE("score-matching loss") {
  const NoiseSchedule ns;
  Rng rng(7);
  std::vector<Coords> eps{Coords::Random(4, 3), Coords::Random(4, 3)};
  std::vector<Coords> rt{Coords::Random(4, 3), Coords::Random(4, 3)};
  std::vector<double> tau{0.2, 0.7};
  std::vector<FrameScore> perfect;
  for (int l = 0; l < 2; ++l) perfect.push_back({-eps[l] / std::sqrt(1 - ns.alpha_bar(tau[l])), rt[l]});
  CHECK(dsm_loss(perfect, eps, rt, tau, ns, 1.0, 0.5).value.total == 0.0);

  std::vector<FrameScore> zero(2, FrameScore::zeros(4));
  const auto z = dsm_loss(zero, eps, rt, tau, ns, 1.0, 0.5);
  double et = 0.0, er = 0.0;
  for (int l = 0; l < 2; ++l) {
    et += eps[l].squaredNorm() / (1 - ns.alpha_bar(tau[l]));
    er += rt[l].squaredNorm();
  }
  CHECK(z.value.trans == doctest::Approx(et / 24.0));
  CHECK(z.value.rot == doctest::Approx(0.5 * er / 24.0));
  const auto z3 = dsm_loss(zero, eps, rt, tau, ns, 3.0, 1.5);
  CHECK(z3.value.total == doctest::Approx(3.0 * z.value.total));
  CHECK_THROWS(dsm_loss(zero, {eps[0]}, rt, tau, ns, 1.0, 1.0));
}

TEST_CASE("linear Gaussian toy reaches the score-matching floor") {
  // One residue, scalar model s(x) = theta * x at a fixed noise level, data N(0, v0).
  const NoiseSchedule ns;
  const double tau = 0.4, v0 = 0.5;
  const double a = ns.alpha_bar(tau);
  const double floor = 1.0 / (1.0 - a) - 1.0 / (a * v0 + 1.0 - a);
  ParamSet p;
  p.add("theta", 1, 1);
  Adam opt(p, 0.05);
  Rng rng(8);
  double recent = 0.0;
  const int steps = 2000, batch = 64;
  for (int step = 0; step < steps; ++step) {
    ParamSet g = p.zeros_like();
    double loss = 0.0;
    for (int b = 0; b < batch; ++b) {
      Coords x0(1, 3), eps(1, 3);
      for (int k = 0; k < 3; ++k) {
        x0(0, k) = std::sqrt(v0) * rng.normal();
        eps(0, k) = rng.normal();
      }
      const Coords xt = std::sqrt(a) * x0 + std::sqrt(1 - a) * eps;
      FrameScore pred{p["theta"](0, 0) * xt, Coords::Zero(1, 3)};
      // Per-coordinate mean, matching the library normalization.
      const auto l = dsm_loss({pred}, {eps}, {Coords::Zero(1, 3)}, {tau}, ns, 1.0, 0.0);
      loss += l.value.total / batch;
      g["theta"](0, 0) += (l.grad[0].trans.array() * xt.array()).sum() / batch;
    }
    opt.step(p, g);
    if (step >= steps - 200) recent += loss / 200;
  }
  CHECK(recent == doctest::Approx(floor).epsilon(0.10));
  CHECK(p["theta"](0, 0) == doctest::Approx(-1.0 / (a * v0 + 1 - a)).epsilon(0.05));
}

TEST_CASE("training loop") {
  SynthConfig sc;
  sc.residues = 5;
  const Trajectory t = synth_generate(sc, 300, 9);
  TrainConfig cfg;
  cfg.steps = 4;
  cfg.frames_per_sample = 3;
  SUBCASE("same seed gives identical curves") {
    std::vector<StepLog> curves[2];
    for (int r = 0; r < 2; ++r) {
      Denoiser m(tiny(), NoiseSchedule{});
      Rng init(10);
      m.initialize(init);
      Rng rng(11);
      curves[r] = train_loop(m, {t}, cfg, rng).curve;
    }
    REQUIRE(curves[0].size() == 4);
    for (int i = 0; i < 4; ++i) {
      CHECK(curves[0][i].loss_trans == curves[1][i].loss_trans);
      CHECK(curves[0][i].grad_norm == curves[1][i].grad_norm);
    }
    std::ostringstream csv;
    write_loss_csv(csv, curves[0]);
    CHECK(csv.str().rfind("step,loss_trans,loss_rot,grad_norm\n", 0) == 0);
  }
  SUBCASE("zero learning rate leaves parameters unchanged") {
    Denoiser m(tiny(), NoiseSchedule{});
    Rng init(12);
    m.initialize(init, InitStyle::random);
    const ParamSet before = m.params();
    cfg.lr = 0.0;
    Rng rng(13);
    train_loop(m, {t}, cfg, rng);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i] == m.params()[i]);
  }
  SUBCASE("divergence aborts") {
    Denoiser m(tiny(), NoiseSchedule{});
    Rng init(14);
    m.initialize(init, InitStyle::random);
    cfg.divergence_threshold = 1e-12;
    Rng rng(15);
    CHECK_THROWS_AS(train_loop(m, {t}, cfg, rng), NumericalError);
  }
}
