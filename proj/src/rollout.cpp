#include "stmd/rollout.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

#include "stmd/errors.hpp"

namespace stmd {

std::uint64_t cache_memory_bytes(std::uint64_t n, std::uint64_t l, std::uint64_t d, std::uint64_t layers,
                                 std::uint64_t bytes_per_scalar) {
  return layers * n * l * d * bytes_per_scalar;
}

std::uint64_t pair_cache_memory_bytes(std::uint64_t n, std::uint64_t l, std::uint64_t d, std::uint64_t layers,
                                      std::uint64_t bytes_per_scalar) {
  return layers * (n + n * n) * l * d * bytes_per_scalar;
}

namespace {

struct Committed {
  FrameSet frames;  // as seen by the network (possibly perturbed)
  double tau;
};

std::vector<int> range(int n) {
  std::vector<int> v(n);
  for (int i = 0; i < n; ++i) v[i] = i;
  return v;
}

// Slot for frame m attending to all committed frames plus itself.
Slot make_slot(const FrameSet& frames, double tau, double dt, int m, bool output) {
  Slot s;
  s.frames = frames;
  s.tau = tau;
  s.dt_ns = dt;
  s.frame_index = m;
  s.prev = m > 0 ? m - 1 : -1;
  s.attend = range(m + 1);
  s.output = output;
  return s;
}

class Generator {
 public:
  Generator(const Denoiser& model, const RolloutConfig& cfg)
      : model_(model), cfg_(cfg), cache_(model.config().total_layers(), 0, model.config().model_dim) {}

  void init_cache(int n) { cache_ = KVCache(model_.config().total_layers(), n, model_.config().model_dim); }

  FrameScore score(const FrameSet& x, double tau, int m) const {
    const Slot active = make_slot(x, tau, cfg_.dt_ns, m, true);
    if (cfg_.use_cache) return model_.forward({active}, &cache_).scores[0];
    std::vector<Slot> slots;
    for (int k = 0; k < m; ++k) slots.push_back(make_slot(history_[k].frames, history_[k].tau, cfg_.dt_ns, k, false));
    slots.push_back(active);
    return model_.forward(slots).scores.back();
  }

  void commit(const FrameSet& x, double tau) {
    const int m = static_cast<int>(history_.size());
    history_.push_back({x, tau});
    if (!cfg_.use_cache) return;
    const Slot s = make_slot(x, tau, cfg_.dt_ns, m, false);
    auto out = model_.forward({s}, &cache_);
    cache_.append(x, m, tau, std::move(out.keys), std::move(out.values));
  }

  int committed() const { return static_cast<int>(history_.size()); }
  const KVCache& cache() const { return cache_; }

 private:
  const Denoiser& model_;
  const RolloutConfig& cfg_;
  KVCache cache_;
  std::vector<Committed> history_;
};

}  // namespace

RolloutResult generate(const Denoiser& model, const std::optional<FrameSet>& initial, int n_frames,
                       const RolloutConfig& cfg, Rng& rng) {
  if (n_frames < 1) throw std::invalid_argument("generate: n_frames must be >= 1");
  if (!(cfg.dt_ns > 0.0)) throw std::invalid_argument("generate: stride must be positive");
  if (initial && initial->size() == 0) throw std::invalid_argument("generate: empty initial frame");
  const auto t_start = std::chrono::steady_clock::now();
  const NoiseSchedule& sched = model.schedule();
  const int steps = cfg.steps > 0 ? cfg.steps : sched.steps;
  const double dtau = (sched.tau_max - sched.tau_min) / steps;

  RolloutResult res;
  if (cfg.dt_ns < cfg.trained_dt_min_ns || cfg.dt_ns > cfg.trained_dt_max_ns)
    res.warnings.push_back("stride outside the trained range; extrapolating");

  std::size_t n = 0;
  Vec3 origin = Vec3::Zero();
  if (initial) {
    n = initial->size();
    origin = initial->centroid();
  } else {
    n = static_cast<std::size_t>(cfg.residues);
    if (n == 0) throw std::invalid_argument("generate: residue count required without an initial frame");
  }
  Generator gen(model, cfg);
  std::vector<FrameSet> frames;

  auto commit_frame = [&](const FrameSet& x) {
    double tau = 0.0;
    FrameSet ctx = x;
    if (cfg.ctx_noise) {
      tau = cfg.fixed_ctx_tau ? cfg.ctx_tau : rng.uniform(0.0, cfg.ctx_noise_max);
      if (tau > 0.0) ctx = forward_frames(sched, x, tau, rng, true);
    }
    res.ctx_tau.push_back(tau);
    gen.commit(ctx, tau);
  };

  try {
    gen.init_cache(static_cast<int>(n));
    if (initial) {
      frames.push_back(*initial);
      commit_frame(*initial);
    }
    while (static_cast<int>(frames.size()) < n_frames) {
      const int m = gen.committed();
      FrameSet x = sample_prior(sched, n, rng, true);
      double tau = sched.tau_max;
      for (int k = 0; k < steps; ++k) {
        tau = sched.tau_max - k * dtau;
        const FrameScore s = gen.score(x, tau, m);
        const ReverseNoise z = cfg.stochastic ? ReverseNoise::draw(static_cast<Eigen::Index>(n), rng, true)
                                              : ReverseNoise::zeros(static_cast<Eigen::Index>(n));
        x = reverse_step(sched, x, s, tau, dtau, z);
      }
      if (cfg.final_denoise) x = denoise_translations(sched, x, gen.score(x, sched.tau_min, m), sched.tau_min);
      for (const auto& f : x.frames)
        if (!f.translation.allFinite()) throw NumericalError("generate: non-finite coordinates at frame " +
                                                             std::to_string(frames.size()));
      // Sampling happens around the origin; place the frame at the initial centroid.
      Coords t = center_rows(x.translations());
      t.rowwise() += origin.transpose();
      x.set_translations(t);
      frames.push_back(x);
      if (static_cast<int>(frames.size()) < n_frames) commit_frame(x);
    }
  } catch (const NumericalError& e) {
    res.aborted = true;
    res.diagnostic = e.what();
  }
  res.trajectory = frames.empty() ? Trajectory() : Trajectory(frames, cfg.dt_ns);
  res.cache_bytes = gen.cache().logical_bytes();
  res.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return res;
}

nlohmann::ordered_json rollout_sidecar(const RolloutResult& r, const RolloutConfig& cfg, std::uint64_t seed) {
  nlohmann::ordered_json j;
  j["frames"] = r.trajectory.length();
  j["stride_ns"] = cfg.dt_ns;
  j["seed"] = seed;
  nlohmann::ordered_json ctx;
  ctx["enabled"] = cfg.ctx_noise;
  ctx["mode"] = cfg.fixed_ctx_tau ? "fixed" : "uniform";
  ctx["tau"] = cfg.fixed_ctx_tau ? cfg.ctx_tau : cfg.ctx_noise_max;
  j["ctx_noise"] = ctx;
  j["wall_time_s"] = r.wall_time_s;
  j["cache_bytes_final"] = r.cache_bytes;
  if (r.aborted) j["diagnostic"] = r.diagnostic;
  if (!r.warnings.empty()) j["warnings"] = r.warnings;
  return j;
}

}  // namespace stmd
