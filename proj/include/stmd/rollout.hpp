#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stmd/denoiser.hpp"
#include "stmd/trajectory.hpp"

namespace stmd {

/// Bytes of cached single-token state: layers * N * L * d * bytes_per_scalar.
std::uint64_t cache_memory_bytes(std::uint64_t n, std::uint64_t l, std::uint64_t d, std::uint64_t layers,
                                 std::uint64_t bytes_per_scalar);
/// Same accounting when pair features are cached as well: (N + N^2) * L * d.
std::uint64_t pair_cache_memory_bytes(std::uint64_t n, std::uint64_t l, std::uint64_t d, std::uint64_t layers,
                                      std::uint64_t bytes_per_scalar);

struct RolloutConfig {
  double dt_ns = 0.01;
  int residues = 0;  ///< needed only when no initial frame is given
  bool ctx_noise = true;
  bool fixed_ctx_tau = false;  ///< use ctx_tau for every frame instead of U[0, ctx_noise_max]
  double ctx_tau = 0.05;
  double ctx_noise_max = 0.1;
  bool use_cache = true;
  bool final_denoise = true;  ///< replace the last translations by the posterior mean at tau_min
  bool stochastic = true;     ///< false: zero noise draws in the reverse sampler
  int steps = 0;              ///< reverse steps per frame; 0 uses the schedule
  double trained_dt_min_ns = 1e-2;
  double trained_dt_max_ns = 1e1;
};

struct RolloutResult {
  Trajectory trajectory;
  std::uint64_t cache_bytes = 0;
  double wall_time_s = 0.0;
  std::vector<double> ctx_tau;  ///< perturbation level of each committed frame
  std::vector<std::string> warnings;
  bool aborted = false;
  std::string diagnostic;
};

/// Autoregressive generation. With an initial frame it becomes frame 0 and
/// n_frames - 1 frames are generated; otherwise the first frame is sampled
/// without history.
RolloutResult generate(const Denoiser& model, const std::optional<FrameSet>& initial, int n_frames,
                       const RolloutConfig& cfg, Rng& rng);

nlohmann::ordered_json rollout_sidecar(const RolloutResult& r, const RolloutConfig& cfg, std::uint64_t seed);

}  // namespace stmd
