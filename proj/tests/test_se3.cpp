#include <doctest.h>

#include <cmath>
#include <numbers>

#include "stmd/rng.hpp"
#include "stmd/se3.hpp"
#include "stmd/trajectory.hpp"

using namespace stmd;

namespace {

RigidFrame random_frame(Rng& rng) {
  RigidFrame f;
  f.rotation = Rotation(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  f.translation = Vec3(rng.normal(), rng.normal(), rng.normal()) * 5.0;
  return f;
}

double frame_diff(const RigidFrame& a, const RigidFrame& b) {
  return rotation_distance(a.rotation, b.rotation) + (a.translation - b.translation).norm();
}

}  // namespace

TEST_CASE("compose with identity and inverse") {
  Rng rng(1);
  const RigidFrame f = random_frame(rng);
  CHECK(frame_diff(compose(RigidFrame::identity(), f), f) < 1e-12);
  CHECK(frame_diff(compose(f, RigidFrame::identity()), f) < 1e-12);
  CHECK(frame_diff(compose(f, f.inverse()), RigidFrame::identity()) < 1e-12);
  const Vec3 p(1.0, -2.0, 0.5);
  const RigidFrame g = random_frame(rng);
  CHECK((compose(f, g).apply(p) - f.apply(g.apply(p))).norm() < 1e-12);
}

TEST_CASE("two quarter turns about z make a half turn") {
  const double c = std::cos(std::numbers::pi / 4), s = std::sin(std::numbers::pi / 4);
  const Rotation q(c, 0, 0, s);
  const Rotation h = q * q;
  // Hand product: (c + s k)^2 = c^2 - s^2 + 2cs k = k.
  CHECK(std::fabs(std::fabs(h.z()) - 1.0) < 1e-12);
  CHECK(std::fabs(h.w()) < 1e-12);
  CHECK(std::fabs(h.angle() - std::numbers::pi) < 1e-9);
}

TEST_CASE("exp and log maps") {
  CHECK(exp_so3(Vec3::Zero()).angle() == doctest::Approx(0.0));
  const Rotation r = exp_so3(Vec3(0, 0, std::numbers::pi / 2));
  CHECK(r.w() == doctest::Approx(std::cos(std::numbers::pi / 4)).epsilon(1e-12));
  CHECK(r.z() == doctest::Approx(std::sin(std::numbers::pi / 4)).epsilon(1e-12));
  CHECK(r.x() == doctest::Approx(0.0));
  Rng rng(2);
  for (int k = 0; k < 20; ++k) {
    Vec3 v(rng.normal(), rng.normal(), rng.normal());
    v = v.normalized() * 0.3;
    CHECK((log_so3(exp_so3(v)) - v).norm() < 1e-12);
  }
  const Vec3 big = Vec3(1, 2, -1).normalized() * 3.0;
  CHECK((log_so3(exp_so3(big)) - big).norm() < 1e-9);
}

TEST_CASE("rotation constructors normalize") {
  const Rotation r(2.0, 0.0, 0.0, 0.0);
  CHECK(r.w() == doctest::Approx(1.0));
  Rng rng(3);
  const Rotation q = exp_so3(Vec3(0.3, -0.2, 0.7));
  CHECK(rotation_distance(Rotation::from_matrix(q.matrix()), q) < 1e-12);
}

TEST_CASE("kabsch recovers rigid motions") {
  Rng rng(4);
  Coords ref(16, 3);
  for (int i = 0; i < 16; ++i) ref.row(i) << rng.normal() * 4, rng.normal() * 4, rng.normal() * 4;
  SUBCASE("identical") {
    const auto s = kabsch(ref, ref);
    CHECK(s.rmsd < 1e-12);
    CHECK(!s.degenerate);
  }
  SUBCASE("rotated and shifted") {
    RigidFrame g = random_frame(rng);
    Coords mob(16, 3);
    for (int i = 0; i < 16; ++i) mob.row(i) = g.apply(ref.row(i).transpose()).transpose();
    const auto s = kabsch(mob, ref);
    CHECK(s.rmsd < 1e-10);
  }
  SUBCASE("noisy: matches a dense rotation grid search") {
    Coords mob = ref;
    for (int i = 0; i < 16; ++i) mob.row(i) += Eigen::RowVector3d(rng.normal(), rng.normal(), rng.normal()) * 0.1;
    const auto s = kabsch(mob, ref);
    const Coords a = mob.rowwise() - mob.colwise().mean();
    const Coords b = ref.rowwise() - ref.colwise().mean();
    // Grid over axis-angle around the optimum found independently by brute force.
    double best = 1e300;
    Vec3 best_v = Vec3::Zero();
    for (double step : {0.02, 0.002, 0.0002}) {
      const Vec3 centre = best_v;
      for (int i = -10; i <= 10; ++i)
        for (int j = -10; j <= 10; ++j)
          for (int k = -10; k <= 10; ++k) {
            const Vec3 v = centre + step * Vec3(i, j, k);
            const Mat3 R = exp_so3(v).matrix();
            const double rmsd = std::sqrt(((a * R.transpose()) - b).squaredNorm() / 16.0);
            if (rmsd < best) {
              best = rmsd;
              best_v = v;
            }
          }
    }
    CHECK(std::fabs(s.rmsd - best) < 1e-3);
    CHECK(s.rmsd <= best + 1e-12);
  }
  SUBCASE("collinear points are flagged") {
    Coords line(4, 3);
    for (int i = 0; i < 4; ++i) line.row(i) << i, 2 * i, 0;
    CHECK(kabsch(line, line).degenerate);
  }
}

TEST_CASE("rmsd") {
  FrameSet a(9);
  FrameSet b = a;
  CHECK(rmsd(a, a) == 0.0);
  b.frames[4].translation += Vec3(3, 0, 0);
  CHECK(rmsd(a, b) == doctest::Approx(1.0));
  Rng rng(5);
  for (auto& f : b.frames) f.translation += Vec3(rng.normal(), rng.normal(), rng.normal());
  CHECK(rmsd(a, b) == doctest::Approx(rmsd(b, a)));
}

TEST_CASE("trajectory alignment uses one transform from frame 0") {
  Rng rng(6);
  std::vector<FrameSet> frames;
  for (int l = 0; l < 3; ++l) {
    FrameSet f(5);
    for (auto& r : f.frames) r.translation = Vec3(rng.normal(), rng.normal(), rng.normal()) * 3;
    frames.push_back(f);
  }
  const Trajectory t(frames, 0.1);
  const RigidFrame g = random_frame(rng);
  std::vector<FrameSet> moved;
  for (const auto& f : frames) moved.push_back(f.transformed(g));
  const auto al = kabsch_align(Trajectory(moved, 0.1), frames[0]);
  for (int l = 0; l < 3; ++l) CHECK(rmsd(al.trajectory[l], frames[l]) < 1e-10);
}

TEST_CASE("rng determinism and split streams") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
  Rng c = Rng(42).split(1), d = Rng(42).split(2);
  CHECK(c.uniform() != d.uniform());
  Rng e(7);
  double sum = 0, sq = 0;
  for (int i = 0; i < 100000; ++i) {
    const double x = e.normal();
    sum += x;
    sq += x * x;
  }
  CHECK(std::fabs(sum / 1e5) < 0.02);
  CHECK(std::fabs(sq / 1e5 - 1.0) < 0.02);
}
