#include <doctest.h>

#include <cmath>

#include "stmd/denoiser.hpp"
#include "stmd/igso3.hpp"
#include "stmd/training.hpp"

using namespace stmd;

namespace {

DenoiserConfig tiny() {
  DenoiserConfig c;
  c.model_dim = 16;
  c.heads = 2;
  c.pair_dim = 4;
  return c;
}

FrameSet random_frames(int n, Rng& rng) {
  FrameSet f(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    f.frames[i].rotation = sample_uniform_rotation(rng);
    f.frames[i].translation = Vec3(3.8 * i + rng.normal(), 2 * rng.normal(), 2 * rng.normal());
  }
  return f;
}

std::vector<Slot> history_slots(const std::vector<FrameSet>& ctx, const FrameSet& noisy, double tau, double dt) {
  std::vector<Slot> s;
  const int m = static_cast<int>(ctx.size());
  for (int k = 0; k < m; ++k) {
    Slot c;
    c.frames = ctx[k];
    c.dt_ns = dt;
    c.frame_index = k;
    c.prev = k - 1;
    for (int j = 0; j <= k; ++j) c.attend.push_back(j);
    s.push_back(c);
  }
  Slot q;
  q.frames = noisy;
  q.tau = tau;
  q.dt_ns = dt;
  q.frame_index = m;
  q.prev = m - 1;
  for (int j = 0; j <= m; ++j) q.attend.push_back(j);
  q.output = true;
  s.push_back(q);
  return s;
}

Denoiser random_model(std::uint64_t seed) {
  Denoiser m(tiny(), NoiseSchedule{});
  Rng rng(seed);
  m.initialize(rng, InitStyle::random);
  return m;
}

}  // namespace

TEST_CASE("config validation") {
  DenoiserConfig c;
  c.model_dim = 24;
  c.heads = 4;  // head dim 6 is not divisible by 4
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.model_dim = 32;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("token features") {
  Rng rng(1);
  const FrameSet f = random_frames(6, rng);
  Slot s;
  s.frames = f;
  s.output = true;
  s.attend = {0, 1};
  Slot s2 = s;
  s2.attend = {1};
  s.attend = {0};
  const auto g = embed_inputs({s, s2});
  CHECK((g.tokens.topRows(6) - g.tokens.bottomRows(6)).norm() == 0.0);
  SUBCASE("invariant to global rigid motions") {
    RigidFrame t;
    t.rotation = sample_uniform_rotation(rng);
    t.translation = Vec3(5, -3, 8);
    Slot m = s;
    m.frames = f.transformed(t);
    const auto a = embed_inputs({s});
    const auto b = embed_inputs({m});
    CHECK((a.tokens - b.tokens).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((a.pairs[0] - b.pairs[0]).cwiseAbs().maxCoeff() < 1e-10);
  }
  SUBCASE("equilateral triangle gives equal pair distance features") {
    FrameSet tri(3);
    tri.frames[0].translation = Vec3(0, 0, 0);
    tri.frames[1].translation = Vec3(1, 0, 0);
    tri.frames[2].translation = Vec3(0.5, std::sqrt(3.0) / 2, 0);
    Slot t;
    t.frames = tri;
    t.attend = {0};
    const auto g3 = embed_inputs({t});
    const Matrix& p = g3.pairs[0];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        if (i != j) CHECK((p.row(i * 3 + j).head(8) - p.row(1).head(8)).norm() < 1e-12);
  }
}

TEST_CASE("rotary embedding") {
  Rng rng(2);
  Vector q(8), k(8);
  for (int i = 0; i < 8; ++i) {
    q(i) = rng.normal();
    k(i) = rng.normal();
  }
  CHECK((rope2d(q, 0, 0) - q).norm() == 0.0);
  CHECK(rope2d(q, 5, 3).norm() == doctest::Approx(q.norm()).epsilon(1e-14));
  const double ref = rope2d(q, 7, 4).dot(rope2d(k, 3, 1));
  for (int t = 0; t < 100; ++t) {
    const int di = static_cast<int>(rng.below(50)), dl = static_cast<int>(rng.below(50));
    CHECK(std::fabs(rope2d(q, 7 + di, 4 + dl).dot(rope2d(k, 3 + di, 1 + dl)) - ref) < 1e-10);
  }
  CHECK_THROWS_AS(rope2d(Vector::Ones(6), 1, 1), std::invalid_argument);
}

TEST_CASE("layer norm and modulation") {
  Rng rng(3);
  Matrix x(4, 10);
  for (int i = 0; i < 40; ++i) x.data()[i] = 3 * rng.normal() + 2;
  const auto ln = layer_norm(x, 1e-10);
  for (int i = 0; i < 4; ++i) {
    CHECK(std::fabs(ln.y.row(i).mean()) < 1e-6);
    CHECK(std::fabs(ln.y.row(i).squaredNorm() / 10 - 1.0) < 1e-6);
  }
  const Matrix zero = Matrix::Zero(4, 10);
  CHECK((adaln(x, zero, zero, 1e-10) - ln.y).norm() < 1e-14);
}

TEST_CASE("masked attention") {
  SUBCASE("equal logits average the values") {
    const Matrix q = Matrix::Zero(2, 4), k = Matrix::Random(3, 4), v = Matrix::Random(3, 2);
    Eigen::Matrix<bool, -1, -1> all = Eigen::Matrix<bool, -1, -1>::Constant(2, 3, true);
    const auto r = masked_attention(q, k, v, all, Matrix::Zero(2, 3));
    CHECK((r.out.row(0) - v.colwise().mean()).norm() < 1e-14);
  }
  SUBCASE("hand-computed weights") {
    Matrix q(4, 1), k(4, 1), v(4, 1);
    q << 1, 2, 0, 1;
    k << 1, 0, 2, 1;
    v << 1, 2, 3, 4;
    Eigen::Matrix<bool, -1, -1> a = Eigen::Matrix<bool, -1, -1>::Constant(4, 4, false);
    a(0, 0) = a(0, 1) = true;
    a(1, 0) = a(1, 1) = a(1, 2) = true;
    a(2, 3) = true;
    a(3, 0) = a(3, 1) = a(3, 2) = a(3, 3) = true;
    const auto r = masked_attention(q, k, v, a, Matrix::Zero(4, 4));
    // Query 1: logits 2, 0, 4.
    const double z = std::exp(2.0) + 1.0 + std::exp(4.0);
    CHECK(r.weights(1, 0) == doctest::Approx(std::exp(2.0) / z));
    CHECK(r.weights(1, 1) == doctest::Approx(1.0 / z));
    CHECK(r.weights(1, 2) == doctest::Approx(std::exp(4.0) / z));
    CHECK(r.weights(1, 3) == 0.0);
    CHECK(r.weights(2, 3) == doctest::Approx(1.0));
    const double z0 = std::exp(1.0) + 1.0;
    CHECK(r.out(0, 0) == doctest::Approx((std::exp(1.0) * 1 + 1.0 * 2) / z0));
  }
  SUBCASE("fully masked row throws") {
    Eigen::Matrix<bool, -1, -1> none = Eigen::Matrix<bool, -1, -1>::Constant(1, 2, false);
    CHECK_THROWS(masked_attention(Matrix::Zero(1, 2), Matrix::Zero(2, 2), Matrix::Zero(2, 2), none, Matrix::Zero(1, 2)));
  }
}

TEST_CASE("edge transition") {
  Rng rng(4);
  const int n = 4, d = 6, p = 3;
  Matrix s(n, d);
  for (int i = 0; i < n * d; ++i) s.data()[i] = rng.normal();
  Matrix z(n * n, p);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j)
      for (int c = 0; c < p; ++c) z(i * n + j, c) = z(j * n + i, c) = rng.normal();
  EdgeWeights w{Matrix::Zero(d, p), Matrix::Zero(2 * p, p), Matrix::Zero(1, p), Matrix::Zero(p, p), Matrix::Zero(1, p)};
  CHECK((edge_transition(s, z, w) - z).norm() == 0.0);
  w.wp = Matrix::Random(d, p);
  w.w1 = Matrix::Random(2 * p, p);
  w.b1 = Matrix::Random(1, p);
  w.w2 = Matrix::Random(p, p);
  w.b2 = Matrix::Random(1, p);
  const Matrix out = edge_transition(s, z, w);
  CHECK(out.allFinite());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) CHECK((out.row(i * n + j) - out.row(j * n + i)).norm() < 1e-12);
}

TEST_CASE("output heads") {
  Rng rng(5);
  const FrameSet f = random_frames(5, rng);
  const auto zero = backbone_update(Matrix::Zero(5, 6), f, 3.0, 2.0);
  CHECK(zero.trans.norm() == 0.0);
  CHECK(zero.rot.norm() == 0.0);

  Denoiser m(tiny(), NoiseSchedule{});
  m.initialize(rng, InitStyle::random);
  for (int b = 0; b < m.config().blocks; ++b) m.params()["block" + std::to_string(b) + ".head.w2"].setZero();
  for (int b = 0; b < m.config().blocks; ++b) m.params()["block" + std::to_string(b) + ".head.b2"].setZero();
  m.params()["head.skip"].setZero();
  const auto out = m.forward(history_slots({random_frames(5, rng)}, f, 0.4, 0.1));
  CHECK(out.scores.back().trans.norm() == 0.0);
  CHECK(out.scores.back().rot.norm() == 0.0);
}

TEST_CASE("chain-direction head terms") {
  Rng rng(9);
  const FrameSet f = random_frames(4, rng);
  Matrix u = Matrix::Zero(4, kHeadOutputs);
  u(1, 6) = 2.0;  // toward residue 2
  u(1, 7) = -1.0;  // toward residue 0
  const auto s = backbone_update(u, f, 0.5, 1.0);
  const Vec3 to_next = (f.frames[2].translation - f.frames[1].translation).normalized();
  const Vec3 to_prev = (f.frames[0].translation - f.frames[1].translation).normalized();
  Coords expected = Coords::Zero(4, 3);
  expected.row(1) = 0.5 * (2.0 * to_next - to_prev).transpose();
  CHECK((s.trans - center_rows(expected)).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(s.rot.norm() == 0.0);

  // Same terms after a rigid motion are the rotated terms.
  RigidFrame g;
  g.rotation = sample_uniform_rotation(rng);
  g.translation = Vec3(1.0, -2.0, 3.0);
  const auto moved = backbone_update(u, f.transformed(g), 0.5, 1.0);
  const Mat3 R = g.rotation.matrix();
  CHECK((moved.trans - s.trans * R.transpose()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("model behaviour") {
  Denoiser m = random_model(6);
  Rng rng(7);
  const FrameSet noisy = random_frames(5, rng);
  std::vector<FrameSet> ctx{random_frames(5, rng), random_frames(5, rng), random_frames(5, rng)};

  SUBCASE("no history is a valid unconditional call") {
    const auto out = m.forward(history_slots({}, noisy, 0.5, 0.1));
    CHECK(out.scores[0].trans.allFinite());
  }
  SUBCASE("output depends on stride, history order and noise level") {
    const auto a = m.forward(history_slots(ctx, noisy, 0.5, 0.1)).scores.back().trans;
    const auto b = m.forward(history_slots(ctx, noisy, 0.5, 1.0)).scores.back().trans;
    std::vector<FrameSet> perm{ctx[2], ctx[0], ctx[1]};
    const auto c = m.forward(history_slots(perm, noisy, 0.5, 0.1)).scores.back().trans;
    CHECK((a - b).norm() > 0.0);
    CHECK((a - c).norm() > 0.0);
  }
  SUBCASE("global translation leaves scores unchanged") {
    RigidFrame t;
    t.translation = Vec3(10, -4, 2);
    std::vector<FrameSet> moved;
    for (const auto& c : ctx) moved.push_back(c.transformed(t));
    const auto a = m.forward(history_slots(ctx, noisy, 0.5, 0.1)).scores.back();
    const auto b = m.forward(history_slots(moved, noisy.transformed(t), 0.5, 0.1)).scores.back();
    CHECK((a.trans - b.trans).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((a.rot - b.rot).cwiseAbs().maxCoeff() < 1e-10);
  }
  SUBCASE("block-causal outputs ignore later frames") {
    TrainingExample ex;
    ex.dt_ns = 0.1;
    for (int l = 0; l < 3; ++l) {
      ex.clean.push_back(random_frames(5, rng));
      ex.context.push_back(ex.clean.back());
      ex.ctx_tau.push_back(0.0);
      ex.noisy.push_back(random_frames(5, rng));
      ex.tau.push_back(0.3);
    }
    const auto base = m.forward(training_slots(ex));
    TrainingExample ex2 = ex;
    ex2.context[2] = random_frames(5, rng);
    ex2.noisy[2] = random_frames(5, rng);
    const auto changed = m.forward(training_slots(ex2));
    for (int l = 0; l < 2; ++l) CHECK((base.scores[3 + l].trans - changed.scores[3 + l].trans).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((base.scores[5].trans - changed.scores[5].trans).norm() > 0.0);
  }
  SUBCASE("finite outputs for many random inputs") {
    bool finite = true;
    for (int k = 0; k < 200; ++k) {
      const auto out = m.forward(history_slots({random_frames(4, rng)}, random_frames(4, rng), rng.uniform(0.01, 1.0),
                                               std::exp(rng.uniform(-4.6, 2.3))));
      finite = finite && out.scores.back().trans.allFinite() && out.scores.back().rot.allFinite();
    }
    CHECK(finite);
  }
}

TEST_CASE("backward edge cases") {
  Denoiser m = random_model(8);
  Rng rng(9);
  const auto slots = history_slots({random_frames(4, rng)}, random_frames(4, rng), 0.4, 0.2);
  ForwardTape tape;
  m.forward(slots, nullptr, &tape);
  std::vector<FrameScore> zero(slots.size());
  zero.back() = FrameScore::zeros(4);
  const auto g = m.backward(tape, zero);
  CHECK(g.params.squared_norm() == 0.0);

  // The edge transition of the last block does not exist; the pair-bias of a
  // layer only sees pair features, so zeroing the pair path disconnects it.
  Denoiser cut = random_model(8);
  cut.params()["pair.w"].setZero();
  cut.params()["pair.b"].setZero();
  for (int b = 0; b + 1 < cut.config().blocks; ++b) {
    cut.params()["block" + std::to_string(b) + ".edge.w2"].setZero();
    cut.params()["block" + std::to_string(b) + ".edge.b2"].setZero();
  }
  ForwardTape t2;
  cut.forward(slots, nullptr, &t2);
  std::vector<FrameScore> up(slots.size());
  up.back() = FrameScore{Coords::Ones(4, 3), Coords::Ones(4, 3)};
  const auto g2 = cut.backward(t2, up);
  CHECK(g2.params["layer0.attn.pair_bias"].norm() == 0.0);
  CHECK(g2.params["layer1.attn.pair_bias"].norm() == 0.0);
}

TEST_CASE("kv cache accounting") {
  KVCache c(3, 5, 16);
  CHECK(c.logical_bytes() == 0);
  std::vector<Matrix> k(3, Matrix::Zero(5, 16)), v(3, Matrix::Zero(5, 16));
  c.append(FrameSet(5), 0, 0.0, k, v);
  c.append(FrameSet(5), 1, 0.02, k, v);
  CHECK(c.frames() == 2);
  CHECK(c.logical_bytes() == 2ULL * 3 * 5 * 2 * 16 * 8);
  CHECK(c.ctx_tau(1) == 0.02);
  CHECK_THROWS(c.append(FrameSet(4), 2, 0.0, k, v));
}
