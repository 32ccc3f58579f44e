#pragma once

#include <functional>
#include <iosfwd>
#include <vector>

#include "stmd/denoiser.hpp"
#include "stmd/diffusion.hpp"
#include "stmd/trajectory.hpp"

namespace stmd {

/// Frame-level attention pattern over the clean copies c_0..c_{L-1}
/// (positions 0..L-1) followed by the noisy copies n_0..n_{L-1}
/// (positions L..2L-1).
struct AttentionMask {
  int frames = 0;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> allowed;  ///< 2L x 2L, [query][key]

  /// Allowed key positions of a query position, ascending.
  std::vector<int> keys(int query) const;
  /// Expanded to tokens (position * N + residue).
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> tokens(int residues) const;
};

AttentionMask build_block_causal_mask(int frames);

struct TrainConfig {
  double ctx_noise_max = 0.1;
  double ctx_noise_prob = 0.75;
  int frames_per_sample = 8;
  double dt_min_ns = 1e-2;
  double dt_max_ns = 1e1;
  double base_dt_ns = 0.01;
  int max_stride = 1024;
  double w_trans = 1.0;
  double w_rot = 0.5;
  /// Multiplies each squared error by 1 / (output scale)^2, which turns the
  /// translation term into noise-prediction error.
  bool variance_weighting = false;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  int steps = 1000;
  /// Snippets whose gradients are averaged per optimizer step.
  int accumulate = 1;
  /// Cosine decay from lr to lr * lr_final_fraction over the run; 1 keeps lr
  /// constant.
  double lr_final_fraction = 1.0;
  int warmup_steps = 0;
  double divergence_threshold = 1e6;

  double lr_at(int step) const;

  void validate() const;
};

struct TrainingExample {
  int start = 0;
  int stride = 1;
  double dt_ns = 0.0;
  std::vector<FrameSet> clean;
  std::vector<FrameSet> context;  ///< clean frames after optional perturbation
  std::vector<double> ctx_tau;    ///< 0 for unperturbed context frames
  std::vector<FrameSet> noisy;
  std::vector<double> tau;
  std::vector<Coords> eps;         ///< translation noise, scaled units, zero mean
  std::vector<Coords> rot_target;  ///< IGSO3 score of each noisy rotation
};

/// Draws Delta t log-uniformly on [dt_min, dt_max].
double sample_log_uniform_dt(const TrainConfig& cfg, Rng& rng);

/// Samples a snippet at an integer stride, perturbs context frames and noises
/// the targets.
TrainingExample sample_training_example(const Trajectory& traj, const TrainConfig& cfg, const NoiseSchedule& sched,
                                        Rng& rng);

/// Block-causal slot list for a training example: clean slots then noisy.
std::vector<Slot> training_slots(const TrainingExample& ex);

struct LossTerms {
  double total = 0.0;
  double trans = 0.0;  ///< weighted translation term
  double rot = 0.0;    ///< weighted rotation term
};

struct LossResult {
  LossTerms value;
  std::vector<FrameScore> grad;  ///< d loss / d prediction, per predicted frame
};

/// Denoising score-matching loss averaged over frames. Targets are
/// -eps / sqrt(1 - alpha) for translations and the IGSO3 score for rotations.
LossResult dsm_loss(const std::vector<FrameScore>& pred, const std::vector<Coords>& eps,
                    const std::vector<Coords>& rot_target, const std::vector<double>& tau,
                    const NoiseSchedule& sched, double w_trans, double w_rot, bool variance_weighting = false);

double global_norm(const ParamSet& g);

class Adam {
 public:
  Adam(const ParamSet& like, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(ParamSet& params, const ParamSet& grads);
  int steps() const { return t_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  ParamSet m_, v_;
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
};

struct StepLog {
  int step = 0;
  double loss_trans = 0.0;
  double loss_rot = 0.0;
  double grad_norm = 0.0;
};

struct TrainResult {
  std::vector<StepLog> curve;
};

/// Loss and gradient for one example.
LossResult example_loss(const Denoiser& model, const TrainingExample& ex, const TrainConfig& cfg,
                        DenoiserGradients* grads);

/// Adam with global-norm clipping; each step averages `accumulate` snippets,
/// each drawn from a dataset trajectory chosen uniformly.
TrainResult train_loop(Denoiser& model, const std::vector<Trajectory>& data, const TrainConfig& cfg, Rng& rng,
                       const std::function<void(const StepLog&)>& on_step = {});

void write_loss_csv(std::ostream& out, const std::vector<StepLog>& curve);

}  // namespace stmd
