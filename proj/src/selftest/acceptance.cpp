#include "selftest/acceptance.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

#include <Eigen/Dense>

#include "stmd/costmodel.hpp"
#include "stmd/denoiser.hpp"
#include "stmd/diffusion.hpp"
#include "stmd/igso3.hpp"
#include "stmd/metrics.hpp"
#include "stmd/mzlab.hpp"
#include "stmd/rollout.hpp"
#include "stmd/stmd_format.hpp"
#include "stmd/synth.hpp"
#include "stmd/training.hpp"

namespace stmd::selftest {
namespace {

using Clock = std::chrono::steady_clock;

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

void progress(const AcceptanceOptions& opt, const std::string& msg) {
  if (opt.log) *opt.log << "  .. " << msg << std::endl;
}

// ---- 1. KV-cache arithmetic ---------------------------------------------------

CriterionResult kv_cache(const AcceptanceOptions&) {
  CriterionResult r;
  r.id = 1;
  r.name = "kv-cache arithmetic";
  r.budget_seconds = 1.0;
  const std::uint64_t singles = cache_memory_bytes(200, 32, 256, 1, 4);
  const std::uint64_t pairs = pair_cache_memory_bytes(200, 32, 256, 1, 4);
  const double ratio = static_cast<double>(pairs) / static_cast<double>(singles);
  const bool via_cost = cost::kv_bytes(cost::KvVariant::singles, 200, 32, 256, 1, 4) == singles &&
                        cost::kv_bytes(cost::KvVariant::singles_plus_pairs, 200, 32, 256, 1, 4) == pairs;
  r.pass = singles == 6553600ULL && pairs == 1317273600ULL && ratio >= 195.0 && ratio <= 205.0 && via_cost;
  r.detail = "singles=" + std::to_string(singles) + " B, pairs=" + std::to_string(pairs) + " B, ratio=" + fmt(ratio);
  return r;
}

// ---- 2. Complexity crossover --------------------------------------------------

CriterionResult crossover(const AcceptanceOptions&) {
  CriterionResult r;
  r.id = 2;
  r.name = "complexity crossover";
  r.budget_seconds = 5.0;
  bool ok = true;
  std::string detail;
  for (double n : {2.0, 100.0, 1e6}) {
    const double lc = cost::crossover_L(n);
    // L^2 (N^2 - N) = N^3 L at the crossover, so L (N - 1) = N^2.
    const long double lhs = static_cast<long double>(lc) * (static_cast<long double>(n) - 1.0L);
    const long double rhs = static_cast<long double>(n) * n;
    const double rel = static_cast<double>(std::fabs(lhs - rhs) / rhs);
    const double j = cost::flops(cost::Arch::st_joint, n, lc, 1.0);
    const double s = cost::flops(cost::Arch::pairformer_single_temporal, n, lc, 1.0);
    const double eq = std::fabs(j - s) / s;
    ok = ok && rel < 1e-12 && eq < 1e-9;
    detail += "N=" + fmt(n) + ": L*=" + fmt(lc, 10) + " ";
  }
  ok = ok && cost::crossover_L(2.0) == 4.0;
  ok = ok && std::fabs(cost::crossover_L(1e6) / 1e6 - 1.0) < 1e-5;
  long cells = 0, bad = 0;
  for (int n = 16; n <= 4096; ++n)
    for (int l = 4; l <= n / 4; ++l) {
      ++cells;
      if (!(cost::flops(cost::Arch::st_joint, n, l, 1.0) < cost::flops(cost::Arch::pairformer_single_temporal, n, l, 1.0)))
        ++bad;
    }
  ok = ok && bad == 0;
  r.pass = ok;
  r.detail = detail + "| sweep " + std::to_string(cells - bad) + "/" + std::to_string(cells) + " cells joint cheaper";
  return r;
}

// ---- 3. Memory inflation ------------------------------------------------------

mz::BlockSystem random_system(Rng& rng, int ns, int nz, bool with_kernels) {
  auto rnd = [&](int rows, int cols, double scale) {
    mz::Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
    return m;
  };
  for (;;) {
    mz::BlockSystem s;
    s.omega_ss = rnd(ns, ns, 0.6) - 1.0 * mz::Matrix::Identity(ns, ns);
    s.omega_sz = rnd(ns, nz, 0.6);
    s.omega_zs = rnd(nz, ns, 0.6);
    s.omega_zz = rnd(nz, nz, 0.6) - 1.5 * mz::Matrix::Identity(nz, nz);
    if (with_kernels) {
      s.k_ss.add(rnd(ns, ns, 0.3), rng.uniform(0.5, 2.0));
      s.k_sz.add(rnd(ns, nz, 0.3), rng.uniform(0.5, 2.0));
      s.k_zs.add(rnd(nz, ns, 0.3), rng.uniform(0.5, 2.0));
      s.k_zz.add(rnd(nz, nz, 0.3), rng.uniform(0.5, 2.0));
    }
    if (s.spectral_abscissa() < -0.05) return s;
  }
}

// Effective kernel from the inverse of the full level-1 resolvent:
// [(G^-1)_ss]^-1 is the Schur complement of G = pI - Omega - K1(p).
mz::CMatrix schur_oracle(const mz::BlockSystem& s, mz::Complex p) {
  const auto ns = s.ns(), nz = s.nz(), n = ns + nz;
  mz::CMatrix g = p * mz::CMatrix::Identity(n, n) - s.omega().cast<mz::Complex>();
  g.topLeftCorner(ns, ns) -= s.k_ss.laplace(p, ns, ns);
  g.topRightCorner(ns, nz) -= s.k_sz.laplace(p, ns, nz);
  g.bottomLeftCorner(nz, ns) -= s.k_zs.laplace(p, nz, ns);
  g.bottomRightCorner(nz, nz) -= s.k_zz.laplace(p, nz, nz);
  const mz::CMatrix ginv = g.fullPivLu().inverse();
  const mz::CMatrix schur = ginv.topLeftCorner(ns, ns).fullPivLu().inverse();
  return p * mz::CMatrix::Identity(ns, ns) - s.omega_ss.cast<mz::Complex>() - schur;
}

double gle_error(const mz::BlockSystem& sys, const mz::Vector& s0, const mz::Vector& z0, double T, double dt) {
  const int steps = static_cast<int>(std::lround(T / dt));
  const auto full = mz::simulate_full(sys, s0, z0, T, dt);
  const auto kernel = mz::reduced_kernel_samples(sys, dt, steps);
  const auto forcing = mz::reduced_forcing_samples(sys, z0, dt, steps);
  const mz::Matrix gle = mz::simulate_gle(sys.omega_ss, kernel, forcing, s0, dt, steps);
  return (gle - full.s).cwiseAbs().maxCoeff();
}

CriterionResult memory_inflation(const AcceptanceOptions& opt) {
  CriterionResult r;
  r.id = 3;
  r.name = "memory inflation";
  r.budget_seconds = 60.0;
  Rng rng = Rng(opt.seed).split(3);
  double worst = 0.0;
  for (int k = 0; k < 50; ++k) {
    const auto sys = random_system(rng, 2, 3, true);
    for (int j = 0; j < 20; ++j) {
      const mz::Complex p(rng.uniform(0.1, 3.0), rng.uniform(-4.0, 4.0));
      const mz::CMatrix a = mz::inflate_kernel(sys, p);
      const mz::CMatrix b = schur_oracle(sys, p);
      worst = std::max(worst, (a - b).norm() / b.norm());
    }
  }
  const bool schur_ok = worst <= 1e-10;

  // Hand system: K(t) = exp(-t), from both the Laplace inverse and the realization.
  const auto hand = mz::hand_system();
  std::vector<double> ts;
  for (int i = 0; i <= 50; ++i) ts.push_back(0.1 * i);
  const auto inv = mz::invert_laplace([&](mz::Complex p) { return mz::inflate_kernel(hand, p); }, ts);
  const auto real = mz::reduced_kernel_samples(hand, 0.1, 50);
  double hand_err = 0.0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    hand_err = std::max(hand_err, std::fabs(inv[i](0, 0) - std::exp(-ts[i])));
    hand_err = std::max(hand_err, std::fabs(real[i](0, 0) - std::exp(-ts[i])));
  }
  const bool hand_ok = hand_err <= 1e-6;

  // Second-order convergence of the GLE against the projected full solution.
  bool conv_ok = true;
  std::string ratios;
  for (int k = 0; k < 3; ++k) {
    const auto sys = random_system(rng, 2, 3, true);
    mz::Vector s0(2), z0(3);
    for (int i = 0; i < 2; ++i) s0(i) = rng.normal();
    for (int i = 0; i < 3; ++i) z0(i) = rng.normal();
    const double e1 = gle_error(sys, s0, z0, 4.0, 0.04);
    const double e2 = gle_error(sys, s0, z0, 4.0, 0.02);
    const double e3 = gle_error(sys, s0, z0, 4.0, 0.01);
    const double r1 = e1 / e2, r2 = e2 / e3;
    conv_ok = conv_ok && r1 >= 3.0 && r1 <= 5.0 && r2 >= 3.0 && r2 <= 5.0;
    ratios += fmt(r1, 3) + "," + fmt(r2, 3) + " ";
  }
  r.pass = schur_ok && hand_ok && conv_ok;
  r.detail = "schur max rel=" + fmt(worst, 3) + ", hand max err=" + fmt(hand_err, 3) + ", gle ratios " + ratios;
  return r;
}

// ---- 4. Non-separability ------------------------------------------------------

CriterionResult non_separability(const AcceptanceOptions& opt) {
  CriterionResult r;
  r.id = 4;
  r.name = "kernel non-separability";
  r.budget_seconds = 30.0;
  Rng rng = Rng(opt.seed).split(4);
  const double dt = 0.05;
  const int steps = 200;
  double worst_rank1 = 0.0;
  for (int k = 0; k < 10; ++k) {
    // One hidden variable: K(t) = O_sz exp(O_zz t) O_zs is an outer product times a scalar.
    auto sys = random_system(rng, 3, 1, false);
    const auto samples = mz::reduced_kernel_samples(sys, dt, steps);
    worst_rank1 = std::max(worst_rank1, mz::separability_test(mz::unfold_kernel(samples)).ratio);
    // Fixed spatial matrix times a sum of exponentials.
    mz::ExpModes e;
    mz::Matrix m(3, 3);
    for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = rng.normal();
    e.add(rng.uniform(0.5, 2.0) * m, rng.uniform(0.2, 3.0));
    e.add(rng.uniform(-2.0, -0.5) * m, rng.uniform(0.2, 3.0));
    std::vector<mz::Matrix> direct;
    for (int i = 0; i <= steps; ++i) direct.push_back(e.at(i * dt, 3, 3));
    worst_rank1 = std::max(worst_rank1, mz::separability_test(mz::unfold_kernel(direct)).ratio);
  }
  int generic_pass = 0;
  double weakest = 1.0;
  for (int k = 0; k < 20; ++k) {
    const auto sys = random_system(rng, 2, 3, true);
    const auto res = mz::separability_test(mz::unfold_kernel(mz::reduced_kernel_samples(sys, dt, steps)));
    weakest = std::min(weakest, res.ratio);
    if (res.ratio > 1e-3) ++generic_pass;
  }
  r.pass = worst_rank1 < 1e-12 && generic_pass == 20;
  r.detail = "rank-1 max ratio=" + fmt(worst_rank1, 3) + ", generic " + std::to_string(generic_pass) +
             "/20 (min ratio " + fmt(weakest, 3) + ")";
  return r;
}

// ---- shared model fixtures ------------------------------------------------------

FrameSet random_frames(int n, Rng& rng, double spread = 3.8) {
  FrameSet f(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    f.frames[i].rotation = sample_uniform_rotation(rng);
    f.frames[i].translation = Vec3(spread * i * 0.8 + rng.normal(), rng.normal() * spread, rng.normal() * spread);
  }
  return f;
}

DenoiserConfig small_config() {
  DenoiserConfig c;
  c.model_dim = 16;
  c.heads = 2;
  c.st_layers = 2;
  c.blocks = 2;
  c.pair_dim = 6;
  c.knn = 3;
  return c;
}

/// Block-causal slots over random frames with random noise levels.
std::vector<Slot> random_training_slots(int n, int L, Rng& rng) {
  TrainingExample ex;
  ex.dt_ns = std::exp(rng.uniform(std::log(0.01), std::log(10.0)));
  for (int l = 0; l < L; ++l) {
    ex.clean.push_back(random_frames(n, rng));
    ex.context.push_back(random_frames(n, rng));
    ex.ctx_tau.push_back(rng.bernoulli(0.5) ? rng.uniform(0.0, 0.1) : 0.0);
    ex.noisy.push_back(random_frames(n, rng, 6.0));
    ex.tau.push_back(rng.uniform(0.02, 1.0));
  }
  return training_slots(ex);
}

// ---- 5. Gradient exactness -------------------------------------------------------

CriterionResult gradient_check(const AcceptanceOptions& opt) {
  CriterionResult r;
  r.id = 5;
  r.name = "gradient exactness";
  r.budget_seconds = 300.0;
  Rng rng = Rng(opt.seed).split(5);
  Denoiser model(small_config(), NoiseSchedule{});
  model.initialize(rng, InitStyle::random);
  const int n = 5, L = 3;

  SynthConfig sc;
  sc.residues = n;
  const Trajectory traj = synth_generate(sc, 200, rng.split(1).seed());
  TrainConfig tc;
  tc.frames_per_sample = L;
  tc.dt_max_ns = 0.2;
  TrainingExample ex = sample_training_example(traj, tc, model.schedule(), rng);

  DenoiserGradients grads;
  example_loss(model, ex, tc, &grads);

  // Input gradients are checked through a fixed feature grid.
  const std::vector<Slot> slots = training_slots(ex);
  TokenGrid grid = embed_inputs(slots, nullptr, model.config().knn, model.schedule());
  auto grid_loss = [&](const TokenGrid& g) {
    const auto out = model.forward(slots, g, nullptr, nullptr);
    std::vector<FrameScore> pred(out.scores.begin() + L, out.scores.end());
    return dsm_loss(pred, ex.eps, ex.rot_target, ex.tau, model.schedule(), tc.w_trans, tc.w_rot).value.total;
  };
  ForwardTape tape;
  const auto out = model.forward(slots, grid, nullptr, &tape);
  std::vector<FrameScore> pred(out.scores.begin() + L, out.scores.end());
  const auto loss = dsm_loss(pred, ex.eps, ex.rot_target, ex.tau, model.schedule(), tc.w_trans, tc.w_rot);
  std::vector<FrameScore> upstream(slots.size());
  for (int l = 0; l < L; ++l) upstream[L + l] = loss.grad[l];
  const auto ig = model.backward(tape, upstream);

  const double h = 1e-5;
  auto rel_err = [](double a, double b) {
    const double scale = std::max({std::fabs(a), std::fabs(b), 1e-7});
    return std::fabs(a - b) / scale;
  };
  int checked = 0, passed = 0;
  double worst = 0.0;
  std::string worst_name;
  auto record = [&](const std::string& name, double analytic, double numeric) {
    const double e = rel_err(analytic, numeric);
    ++checked;
    if (e <= 1e-4) ++passed;
    if (e > worst) {
      worst = e;
      worst_name = name;
    }
  };

  ParamSet& p = model.params();
  for (std::size_t t = 0; t < p.size(); ++t) {
    Matrix& w = p[t];
    const int samples = static_cast<int>(std::min<Eigen::Index>(5, w.size()));
    for (int s = 0; s < samples; ++s) {
      const Eigen::Index idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(w.size())));
      double& v = w.data()[idx];
      const double keep = v;
      v = keep + h;
      const double lp = example_loss(model, ex, tc, nullptr).value.total;
      v = keep - h;
      const double lm = example_loss(model, ex, tc, nullptr).value.total;
      v = keep;
      record(p.name(t), grads.params[t].data()[idx], (lp - lm) / (2 * h));
    }
  }
  auto check_matrix = [&](const std::string& name, Matrix& m, const Matrix& g, int samples) {
    for (int s = 0; s < samples; ++s) {
      const Eigen::Index idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(m.size())));
      double& v = m.data()[idx];
      const double keep = v;
      v = keep + h;
      const double lp = grid_loss(grid);
      v = keep - h;
      const double lm = grid_loss(grid);
      v = keep;
      record(name, g.data()[idx], (lp - lm) / (2 * h));
    }
  };
  check_matrix("input.tokens", grid.tokens, ig.tokens, 12);
  check_matrix("input.cond", grid.cond, ig.cond, 12);
  for (std::size_t sl = 0; sl < grid.pairs.size(); sl += 2) check_matrix("input.pairs", grid.pairs[sl], ig.pairs[sl], 3);

  r.pass = checked >= 200 && passed == checked;
  r.detail = std::to_string(passed) + "/" + std::to_string(checked) + " entries over " + std::to_string(p.size()) +
             " tensors + inputs, worst rel err " + fmt(worst, 3) + " (" + worst_name + ")";
  return r;
}

// ---- 6. SE(3) equivariance --------------------------------------------------------

CriterionResult equivariance(const AcceptanceOptions& opt) {
  CriterionResult r;
  r.id = 6;
  r.name = "SE(3) equivariance";
  r.budget_seconds = 60.0;
  Rng rng = Rng(opt.seed).split(6);
  Denoiser model(small_config(), NoiseSchedule{});
  model.initialize(rng, InitStyle::random);
  double worst = 0.0, smallest_score = 1e300;
  for (int k = 0; k < 50; ++k) {
    const int n = 3 + static_cast<int>(rng.below(6));
    const int L = 1 + static_cast<int>(rng.below(4));
    const auto slots = random_training_slots(n, L, rng);
    RigidFrame g;
    g.rotation = sample_uniform_rotation(rng);
    g.translation = Vec3(rng.normal(), rng.normal(), rng.normal()) * 20.0;
    std::vector<Slot> moved = slots;
    for (auto& s : moved) s.frames = s.frames.transformed(g);
    const auto a = model.forward(slots);
    const auto b = model.forward(moved);
    const Mat3 R = g.rotation.matrix();
    for (std::size_t s = 0; s < slots.size(); ++s) {
      if (!slots[s].output) continue;
      const Coords expect = a.scores[s].trans * R.transpose();
      worst = std::max(worst, (b.scores[s].trans - expect).cwiseAbs().maxCoeff());
      worst = std::max(worst, (b.scores[s].rot - a.scores[s].rot).cwiseAbs().maxCoeff());
      smallest_score = std::min(smallest_score, a.scores[s].trans.norm());
    }
  }
  r.pass = worst <= 1e-8 && smallest_score > 1e-6;
  r.detail = "max error " + fmt(worst, 3) + " over 50 configurations";
  return r;
}

// ---- 7. Parallel vs sequential ---------------------------------------------------------

CriterionResult causal_consistency(const AcceptanceOptions& opt) {
  CriterionResult r;
  r.id = 7;
  r.name = "block-causal/sequential consistency";
  r.budget_seconds = 120.0;
  Rng rng = Rng(opt.seed).split(7);
  Denoiser model(small_config(), NoiseSchedule{});
  model.initialize(rng, InitStyle::random);
  const int n = 6;
  double worst = 0.0;
  for (int L : {1, 2, 4, 8}) {
    const auto slots = random_training_slots(n, L, rng);
    const auto par = model.forward(slots);
    KVCache cache(model.config().total_layers(), n, model.config().model_dim);
    for (int l = 0; l < L; ++l) {
      // Noisy frame l sees committed clean frames 0..l-1 and itself.
      Slot q = slots[L + l];
      q.attend.clear();
      for (int k = 0; k < l; ++k) q.attend.push_back(k);
      q.attend.push_back(l);
      const auto seq = model.forward({q}, &cache);
      worst = std::max(worst, (seq.scores[0].trans - par.scores[L + l].trans).cwiseAbs().maxCoeff());
      worst = std::max(worst, (seq.scores[0].rot - par.scores[L + l].rot).cwiseAbs().maxCoeff());
      Slot c = slots[l];
      c.attend.clear();
      for (int k = 0; k <= l; ++k) c.attend.push_back(k);
      auto committed = model.forward({c}, &cache);
      cache.append(c.frames, c.frame_index, c.tau, std::move(committed.keys), std::move(committed.values));
    }
  }
  const bool parallel_ok = worst <= 1e-10;

  // Cached and re-encoding rollouts from identical seeds.
  RolloutConfig rc;
  rc.dt_ns = 0.05;
  rc.steps = 20;
  const FrameSet start = random_frames(n, rng);
  Rng r1(opt.seed + 71), r2(opt.seed + 71);
  rc.use_cache = true;
  const auto a = generate(model, start, 6, rc, r1);
  rc.use_cache = false;
  const auto b = generate(model, start, 6, rc, r2);
  double roll = a.aborted || b.aborted || a.trajectory.length() != b.trajectory.length() ? 1e300 : 0.0;
  if (roll == 0.0)
    for (std::size_t f = 0; f < a.trajectory.length(); ++f) {
      roll = std::max(roll, (a.trajectory[f].translations() - b.trajectory[f].translations()).cwiseAbs().maxCoeff());
      for (std::size_t i = 0; i < a.trajectory[f].size(); ++i)
        roll = std::max(roll, rotation_distance(a.trajectory[f].frames[i].rotation, b.trajectory[f].frames[i].rotation));
    }
  r.pass = parallel_ok && roll <= 1e-9;
  r.detail = "parallel vs cached max diff " + fmt(worst, 3) + ", cached vs re-encoded rollout " + fmt(roll, 3);
  return r;
}

// ---- 8. Diffusion process -----------------------------------------------------------

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

CriterionResult diffusion_process(const AcceptanceOptions& opt) {
  CriterionResult r;
  r.id = 8;
  r.name = "diffusion process";
  r.budget_seconds = 300.0;
  Rng rng = Rng(opt.seed).split(8);
  // Composite Simpson on [0, pi] of the angle marginal.
  double worst_norm = 0.0;
  for (double sigma : {0.1, 0.5, 1.5}) {
    const int m = 20000;
    const double h = std::numbers::pi / m;
    double acc = 0.0;
    for (int i = 0; i <= m; ++i) {
      const double w = (i == 0 || i == m) ? 1.0 : (i % 2 ? 4.0 : 2.0);
      acc += w * igso3_angle_pdf(i * h, sigma);
    }
    worst_norm = std::max(worst_norm, std::fabs(acc * h / 3.0 - 1.0));
  }
  const bool norm_ok = worst_norm <= 1e-3;

  // Forward process at tau_max against N(0, 1).
  NoiseSchedule sched;
  SynthConfig sc;
  const Coords x0 = reference_structure(sc) * sched.coordinate_scale;
  std::vector<double> samples;
  samples.reserve(300000);
  while (samples.size() < 300000) {
    const auto nt = forward_translations(sched, x0, sched.tau_max, rng);
    for (Eigen::Index i = 0; i < nt.noisy.size(); ++i) samples.push_back(nt.noisy.data()[i]);
  }
  std::sort(samples.begin(), samples.end());
  double ks = 0.0;
  const double count = static_cast<double>(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double f = normal_cdf(samples[i]);
    ks = std::max({ks, std::fabs(f - i / count), std::fabs((i + 1) / count - f)});
  }
  const bool ks_ok = ks < 0.01;

  // Reverse sampler driven by the exact score of a Gaussian target.
  const double target_var = 0.25;
  const int n = 2000, reps = 10;
  auto marginal_var = [&](double tau) {
    const double a = sched.alpha_bar(tau);
    return a * target_var + 1.0 - a;
  };
  double acc2 = 0.0;
  long cnt = 0;
  for (int rep = 0; rep < reps; ++rep) {
    FrameSet x = sample_prior(sched, n, rng, false);
    const double dtau = sched.step_size();
    for (int k = 0; k < sched.steps; ++k) {
      const double tau = sched.tau_max - k * dtau;
      FrameScore s = FrameScore::zeros(n);
      s.trans = -(x.translations() * sched.coordinate_scale) / marginal_var(tau);
      x = reverse_step(sched, x, s, tau, dtau, rng, false);
    }
    const Coords t = x.translations() * sched.coordinate_scale;
    acc2 += t.squaredNorm();
    cnt += t.size();
  }
  const double got = acc2 / cnt, want = marginal_var(sched.tau_min);
  const bool rev_ok = std::fabs(got / want - 1.0) <= 0.05;
  r.pass = norm_ok && ks_ok && rev_ok;
  r.detail = "igso3 |mass-1| max " + fmt(worst_norm, 3) + ", KS " + fmt(ks, 3) + ", reverse var " + fmt(got) +
             " vs " + fmt(want);
  return r;
}

// ---- 9. Metric oracles -------------------------------------------------------------------

CriterionResult metric_oracles(const AcceptanceOptions& opt) {
  CriterionResult r;
  r.id = 9;
  r.name = "metric oracles";
  r.budget_seconds = 300.0;
  Rng rng = Rng(opt.seed).split(9);
  auto gaussian = [&](int rows, int cols) {
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = rng.normal();
    return m;
  };
  std::string detail;
  bool ok = true;

  const Matrix p = gaussian(500, 4);
  for (CoverageMode mode : {CoverageMode::per_component, CoverageMode::joint}) {
    const auto c = coverage(p, p, 10, mode);
    ok = ok && c.available && std::fabs(c.jsd) < 1e-12 && c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0;
  }
  detail += "coverage(p,p) ok=" + std::to_string(ok);

  const auto ac0 = autocorr_curve(p, {0});
  ok = ok && ac0[0] && *ac0[0] == 1.0;

  // AR(1) with coefficient rho in three independent dimensions.
  const double rho = 0.9;
  const int T = 200000;
  Matrix ou(T, 3);
  for (int j = 0; j < 3; ++j) ou(0, j) = rng.normal();
  for (int t = 1; t < T; ++t)
    for (int j = 0; j < 3; ++j) ou(t, j) = rho * ou(t - 1, j) + std::sqrt(1 - rho * rho) * rng.normal();
  std::vector<int> lags;
  for (int l = 1; l <= 10; ++l) lags.push_back(l);
  const auto ac = autocorr_curve(ou, lags);
  double ou_err = 0.0;
  for (std::size_t i = 0; i < lags.size(); ++i) ou_err = std::max(ou_err, std::fabs(*ac[i] - std::pow(rho, lags[i])));
  ok = ok && ou_err <= 0.02;
  detail += ", OU autocorr err " + fmt(ou_err, 3);

  // VAMP-2 at lag 0 counts retained dimensions: a full-rank and a rank-3 embedding.
  const Matrix full = gaussian(5000, 4);
  const Matrix low = gaussian(5000, 3) * gaussian(3, 6);
  const double v_full = *vamp2_curve(full, {0})[0];
  const double v_low = *vamp2_curve(low, {0})[0];
  const double white = *vamp2_curve(gaussian(10000, 4), {1})[0];
  ok = ok && std::fabs(v_full - 4.0) <= 1e-6 && std::fabs(v_low - 3.0) <= 1e-6 && white <= 0.05;
  detail += ", vamp2 lag0 " + fmt(v_full, 8) + "/" + fmt(v_low, 8) + ", white " + fmt(white, 3);

  // tICA: self-correlation and the minimum pair count.
  const Matrix feat = ou.topRows(2000) * gaussian(3, 12) + 0.1 * gaussian(2000, 12);
  const auto self = tica_correlation(feat, feat, {1, 5, 10});
  bool self_ok = true;
  for (const auto& v : self) self_ok = self_ok && v && std::fabs(*v - 1.0) < 1e-12;
  const Matrix shortx = gaussian(31, 3);
  const bool na29 = !fit_tica(shortx.topRows(30), 1).has_value();
  const bool ok30 = fit_tica(shortx, 1).has_value();
  ok = ok && self_ok && na29 && ok30;
  detail += ", tica self=" + std::to_string(self_ok) + " NA@29=" + std::to_string(na29) + " ok@30=" +
            std::to_string(ok30);
  r.pass = ok;
  r.detail = detail;
  return r;
}

// ---- 10. End-to-end ------------------------------------------------------------------------

struct StrideOutcome {
  double valid = 0.0, recall = 0.0, jsd = 0.0, autocorr_diff = 0.0;
  bool pass = false;
};

// Pooled evaluation of several rollouts against one reference trajectory.
StrideOutcome evaluate_pooled(const std::vector<Trajectory>& gens, const Trajectory& ref, const EvalOptions& eo) {
  const FrameSet& anchor = ref[0];
  const Trajectory ref_al = kabsch_align(ref, anchor).trajectory;
  const Matrix ref_x = ref_al.flattened_translations();
  const PCABasis pca = fit_pca(ref_x, eo.kinetic_components);
  const Matrix ref_p = pca.project(ref_x);
  std::vector<int> lags = eo.lags;
  const auto ac_ref = autocorr_curve(ref_p, lags);

  std::vector<Matrix> projs;
  Eigen::Index rows = 0;
  std::vector<double> ac_sum(lags.size(), 0.0);
  std::vector<int> ac_cnt(lags.size(), 0);
  long valid = 0, frames = 0;
  for (const auto& g : gens) {
    const Trajectory al = kabsch_align(g, anchor).trajectory;
    projs.push_back(pca.project(al.flattened_translations()));
    rows += projs.back().rows();
    const auto ac = autocorr_curve(projs.back(), lags);
    for (std::size_t i = 0; i < lags.size(); ++i)
      if (ac[i]) {
        ac_sum[i] += *ac[i];
        ++ac_cnt[i];
      }
    const auto vm = validity(g, eo.thresholds);
    for (bool v : vm.valid) valid += v ? 1 : 0;
    frames += static_cast<long>(vm.valid.size());
  }
  Matrix pooled(rows, ref_p.cols());
  Eigen::Index at = 0;
  for (const auto& m : projs) {
    pooled.middleRows(at, m.rows()) = m;
    at += m.rows();
  }
  const auto cov = coverage(pooled, ref_p, eo.coverage_bins, eo.coverage_mode);
  StrideOutcome o;
  o.valid = frames ? static_cast<double>(valid) / frames : 0.0;
  o.recall = cov.recall;
  o.jsd = cov.jsd;
  for (std::size_t i = 0; i < lags.size(); ++i) {
    if (!ac_ref[i] || ac_cnt[i] == 0) {
      o.autocorr_diff = 1e300;
      continue;
    }
    o.autocorr_diff = std::max(o.autocorr_diff, std::fabs(ac_sum[i] / ac_cnt[i] - *ac_ref[i]));
  }
  o.pass = cov.available && o.valid >= 0.95 && o.recall >= 0.5 && o.jsd <= 0.5 && o.autocorr_diff <= 0.15;
  return o;
}

CriterionResult end_to_end(const AcceptanceOptions& opt) {
  CriterionResult r;
  r.id = 10;
  r.name = "end-to-end smoke";
  r.budget_seconds = 1800.0;
  Rng root(opt.seed);
  SynthConfig sc;
  sc.residues = 8;
  progress(opt, "synthesizing training data");
  const Trajectory train_traj = synth_generate(sc, 20000, root.split(100).seed());

  DenoiserConfig dc;
  Denoiser model(dc, NoiseSchedule{});
  Rng init = root.split(101);
  model.initialize(init, InitStyle::training);
  TrainConfig tc;
  tc.steps = 5000;
  tc.variance_weighting = true;
  tc.accumulate = 4;
  tc.lr_final_fraction = 0.02;
  tc.warmup_steps = 200;
  Rng train_rng = root.split(102);
  progress(opt, "training " + std::to_string(tc.steps) + " steps");
  const auto t0 = Clock::now();
  const auto curve = train_loop(model, {train_traj}, tc, train_rng, [&](const StepLog& s) {
    if (opt.log && (s.step + 1) % 500 == 0)
      *opt.log << "  .. step " << s.step + 1 << " trans " << s.loss_trans << " rot " << s.loss_rot << " |g| "
               << s.grad_norm << " (" << fmt(std::chrono::duration<double>(Clock::now() - t0).count(), 3) << " s)"
               << std::endl;
  });
  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    std::ofstream csv(opt.out_dir + "/loss.csv");
    write_loss_csv(csv, curve.curve);
  }

  EvalOptions eo;
  bool pass = true;
  std::string detail;
  const int rollouts = 4, frames = 64;
  for (int stride : {1, 4}) {
    const Trajectory ref = synth_generate(sc, 2048, root.split(200 + stride).seed(), stride);
    const Trajectory starts = synth_generate(sc, rollouts, root.split(300 + stride).seed(), 50);
    RolloutConfig rc;
    rc.dt_ns = stride * sc.base_dt_ns;
    std::vector<Trajectory> gens;
    bool aborted = false;
    for (int k = 0; k < rollouts; ++k) {
      Rng rr = root.split(400 + 10 * stride + k);
      progress(opt, "rollout stride " + std::to_string(stride) + " #" + std::to_string(k));
      auto res = generate(model, starts[k], frames, rc, rr);
      aborted = aborted || res.aborted;
      if (!opt.out_dir.empty())
        write_stmd_file(opt.out_dir + "/rollout_s" + std::to_string(stride) + "_" + std::to_string(k) + ".stmd",
                        res.trajectory);
      gens.push_back(std::move(res.trajectory));
    }
    const auto o = evaluate_pooled(gens, ref, eo);
    pass = pass && o.pass && !aborted;
    detail += "stride " + std::to_string(stride) + ": valid " + fmt(o.valid, 3) + " recall " + fmt(o.recall, 3) +
              " jsd " + fmt(o.jsd, 3) + " acdiff " + fmt(o.autocorr_diff, 3) + (aborted ? " ABORTED" : "") + "; ";
  }
  r.pass = pass;
  r.detail = detail;
  return r;
}

}  // namespace

nlohmann::ordered_json mz_verification(std::uint64_t seed, int systems) {
  if (systems < 1) throw std::invalid_argument("mz_verification: need at least one system");
  Rng rng = Rng(seed).split(30);
  nlohmann::ordered_json out;
  out["systems"] = nlohmann::ordered_json::array();
  for (int k = 0; k < systems; ++k) {
    const auto sys = random_system(rng, 2, 3, true);
    double worst = 0.0;
    for (int j = 0; j < 20; ++j) {
      const mz::Complex p(rng.uniform(0.1, 3.0), rng.uniform(-4.0, 4.0));
      const mz::CMatrix b = schur_oracle(sys, p);
      worst = std::max(worst, (mz::inflate_kernel(sys, p) - b).norm() / b.norm());
    }
    const auto sep = mz::separability_test(mz::unfold_kernel(mz::reduced_kernel_samples(sys, 0.05, 200)));
    mz::Vector s0(2), z0(3);
    for (int i = 0; i < 2; ++i) s0(i) = rng.normal();
    for (int i = 0; i < 3; ++i) z0(i) = rng.normal();
    const double e1 = gle_error(sys, s0, z0, 4.0, 0.04);
    const double e2 = gle_error(sys, s0, z0, 4.0, 0.02);
    nlohmann::ordered_json j;
    j["spectral_abscissa"] = sys.spectral_abscissa();
    j["schur_residual"] = worst;
    j["singular_value_ratio"] = sep.ratio;
    j["gle_error_dt"] = e1;
    j["gle_error_dt_half"] = e2;
    j["convergence_order"] = std::log2(e1 / e2);
    out["systems"].push_back(j);
  }
  const auto hand = mz::hand_system();
  const auto real = mz::reduced_kernel_samples(hand, 0.1, 50);
  double hand_err = 0.0;
  for (int i = 0; i <= 50; ++i) hand_err = std::max(hand_err, std::fabs(real[i](0, 0) - std::exp(-0.1 * i)));
  out["hand_kernel_max_error"] = hand_err;
  return out;
}

CriterionResult run_criterion(int id, const AcceptanceOptions& opt) {
  static const std::vector<std::function<CriterionResult(const AcceptanceOptions&)>> table = {
      kv_cache,     crossover,          memory_inflation,  non_separability, gradient_check,
      equivariance, causal_consistency, diffusion_process, metric_oracles,   end_to_end};
  if (id < 1 || id > kCriterionCount) throw std::out_of_range("unknown criterion " + std::to_string(id));
  const auto t0 = Clock::now();
  CriterionResult r;
  try {
    r = table[id - 1](opt);
  } catch (const std::exception& e) {
    r.id = id;
    r.pass = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  if (r.budget_seconds > 0 && r.seconds > r.budget_seconds) {
    r.pass = false;
    r.detail += " [over time budget " + fmt(r.budget_seconds) + " s]";
  }
  return r;
}

std::string format_line(const CriterionResult& r) {
  std::ostringstream os;
  os << (r.pass ? "PASS" : "FAIL") << " [" << r.id << "] " << r.name << " (" << std::fixed << std::setprecision(2)
     << r.seconds << " s): " << r.detail;
  return os.str();
}

std::vector<CriterionResult> run_acceptance(const std::vector<int>& ids, const AcceptanceOptions& opt,
                                            std::ostream& out) {
  std::vector<int> todo = ids;
  if (todo.empty())
    for (int i = 1; i <= kCriterionCount; ++i) todo.push_back(i);
  std::vector<CriterionResult> results;
  for (int id : todo) {
    results.push_back(run_criterion(id, opt));
    out << format_line(results.back()) << std::endl;
  }
  return results;
}

}  // namespace stmd::selftest
