#include "stmd/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <string>

#include "stmd/errors.hpp"

namespace stmd {

std::vector<int> AttentionMask::keys(int query) const {
  std::vector<int> out;
  for (int k = 0; k < allowed.cols(); ++k)
    if (allowed(query, k)) out.push_back(k);
  return out;
}

Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> AttentionMask::tokens(int residues) const {
  const Eigen::Index n = allowed.rows() * residues;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> t(n, n);
  for (Eigen::Index q = 0; q < n; ++q)
    for (Eigen::Index k = 0; k < n; ++k) t(q, k) = allowed(q / residues, k / residues);
  return t;
}

AttentionMask build_block_causal_mask(int frames) {
  if (frames < 1) throw std::invalid_argument("build_block_causal_mask: need at least one frame");
  AttentionMask m;
  m.frames = frames;
  m.allowed = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(2 * frames, 2 * frames, false);
  for (int l = 0; l < frames; ++l) {
    for (int k = 0; k <= l; ++k) m.allowed(l, k) = true;        // clean l -> clean <= l
    for (int k = 0; k < l; ++k) m.allowed(frames + l, k) = true;  // noisy l -> clean < l
    m.allowed(frames + l, frames + l) = true;                    // noisy l -> itself
  }
  return m;
}

void TrainConfig::validate() const {
  if (!(ctx_noise_prob >= 0.0 && ctx_noise_prob <= 1.0)) throw std::invalid_argument("ctx_noise_prob outside [0,1]");
  if (!(ctx_noise_max >= 0.0 && ctx_noise_max <= 1.0)) throw std::invalid_argument("ctx_noise_max outside [0,1]");
  if (!(dt_min_ns > 0.0 && dt_max_ns >= dt_min_ns)) throw std::invalid_argument("bad stride range");
  if (!(base_dt_ns > 0.0)) throw std::invalid_argument("base_dt_ns must be positive");
  if (frames_per_sample < 1 || max_stride < 1) throw std::invalid_argument("frames_per_sample and max_stride >= 1");
  if (!(lr >= 0.0) || !(grad_clip > 0.0)) throw std::invalid_argument("bad optimizer settings");
  if (accumulate < 1 || warmup_steps < 0) throw std::invalid_argument("accumulate >= 1 and warmup_steps >= 0");
  if (!(lr_final_fraction >= 0.0 && lr_final_fraction <= 1.0))
    throw std::invalid_argument("lr_final_fraction outside [0,1]");
}

double TrainConfig::lr_at(int step) const {
  if (step < warmup_steps) return lr * (step + 1) / warmup_steps;
  const int span = std::max(1, steps - warmup_steps);
  const double u = std::min(1.0, static_cast<double>(step - warmup_steps) / span);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * u));
  return lr * (lr_final_fraction + (1.0 - lr_final_fraction) * cosine);
}

double sample_log_uniform_dt(const TrainConfig& cfg, Rng& rng) {
  return std::exp(rng.uniform(std::log(cfg.dt_min_ns), std::log(cfg.dt_max_ns)));
}

TrainingExample sample_training_example(const Trajectory& traj, const TrainConfig& cfg, const NoiseSchedule& sched,
                                        Rng& rng) {
  const int L = cfg.frames_per_sample;
  const int len = static_cast<int>(traj.length());
  if (len < L) throw std::invalid_argument("trajectory shorter than frames_per_sample");
  const int max_fit = L > 1 ? (len - 1) / (L - 1) : cfg.max_stride;
  TrainingExample ex;
  int stride = 0;
  for (int attempt = 0; attempt < 16 && stride == 0; ++attempt) {
    const double dt = sample_log_uniform_dt(cfg, rng);
    const int k = std::clamp(static_cast<int>(std::lround(dt / cfg.base_dt_ns)), 1, cfg.max_stride);
    if (k <= max_fit) stride = k;
  }
  if (stride == 0) stride = std::clamp(max_fit, 1, cfg.max_stride);
  ex.stride = stride;
  ex.dt_ns = stride * cfg.base_dt_ns;
  const int span = (L - 1) * stride;
  ex.start = static_cast<int>(rng.below(static_cast<std::uint64_t>(len - span)));
  const auto table = sched.igso3();
  for (int l = 0; l < L; ++l) {
    const FrameSet& x0 = traj[static_cast<std::size_t>(ex.start + l * stride)];
    ex.clean.push_back(x0);
    double ctx_tau = 0.0;
    if (rng.bernoulli(cfg.ctx_noise_prob)) ctx_tau = rng.uniform(0.0, cfg.ctx_noise_max);
    ex.ctx_tau.push_back(ctx_tau);
    ex.context.push_back(ctx_tau > 0.0 ? forward_frames(sched, x0, ctx_tau, rng, true) : x0);

    const double tau = rng.uniform(sched.tau_min, sched.tau_max);
    ex.tau.push_back(tau);
    // Noise the target by hand so the draws are available as targets.
    const double a = sched.alpha_bar(tau);
    const Coords t0 = x0.translations() * sched.coordinate_scale;
    const Vec3 c = t0.colwise().mean().transpose();
    Coords eps(t0.rows(), 3);
    for (Eigen::Index i = 0; i < eps.rows(); ++i)
      for (int k = 0; k < 3; ++k) eps(i, k) = rng.normal();
    eps = center_rows(eps);
    Coords t = std::sqrt(a) * center_rows(t0) + std::sqrt(1.0 - a) * eps;
    t.rowwise() += c.transpose();
    FrameSet noisy = x0;
    noisy.set_translations(t / sched.coordinate_scale);
    const double sig = sched.sigma(tau);
    Coords rt(t0.rows(), 3);
    for (std::size_t i = 0; i < x0.size(); ++i) {
      noisy.frames[i].rotation = table->sample(x0.frames[i].rotation, sig, rng);
      rt.row(static_cast<Eigen::Index>(i)) =
          table->score(x0.frames[i].rotation, noisy.frames[i].rotation, sig).transpose();
    }
    ex.noisy.push_back(std::move(noisy));
    ex.eps.push_back(std::move(eps));
    ex.rot_target.push_back(std::move(rt));
  }
  return ex;
}

std::vector<Slot> training_slots(const TrainingExample& ex) {
  const int L = static_cast<int>(ex.clean.size());
  const auto mask = build_block_causal_mask(L);
  std::vector<Slot> slots(2 * L);
  for (int l = 0; l < L; ++l) {
    Slot& c = slots[l];
    c.frames = ex.context[l];
    c.tau = ex.ctx_tau[l];
    c.dt_ns = ex.dt_ns;
    c.frame_index = l;
    c.prev = l > 0 ? l - 1 : -1;
    c.attend = mask.keys(l);
    Slot& n = slots[L + l];
    n.frames = ex.noisy[l];
    n.tau = ex.tau[l];
    n.dt_ns = ex.dt_ns;
    n.frame_index = l;
    n.prev = l > 0 ? l - 1 : -1;
    n.attend = mask.keys(L + l);
    n.output = true;
  }
  return slots;
}

LossResult dsm_loss(const std::vector<FrameScore>& pred, const std::vector<Coords>& eps,
                    const std::vector<Coords>& rot_target, const std::vector<double>& tau,
                    const NoiseSchedule& sched, double w_trans, double w_rot, bool variance_weighting) {
  const std::size_t L = pred.size();
  if (L == 0 || eps.size() != L || rot_target.size() != L || tau.size() != L)
    throw std::invalid_argument("dsm_loss: inconsistent frame counts");
  LossResult r;
  r.grad.resize(L);
  const auto table = sched.igso3();
  for (std::size_t l = 0; l < L; ++l) {
    const Eigen::Index n = pred[l].trans.rows();
    const double denom = 3.0 * static_cast<double>(n) * static_cast<double>(L);
    const double var_t = 1.0 - sched.alpha_bar(tau[l]);
    const Coords target_t = -eps[l] / std::sqrt(var_t);
    const double lam_t = variance_weighting ? var_t : 1.0;
    double lam_r = 1.0;
    if (variance_weighting) {
      const double cr = table->score_norm(sched.sigma(tau[l]));
      lam_r = 1.0 / (cr * cr);
    }
    const Coords dt = pred[l].trans - target_t;
    const Coords dr = pred[l].rot - rot_target[l];
    r.value.trans += w_trans * lam_t * dt.squaredNorm() / denom;
    r.value.rot += w_rot * lam_r * dr.squaredNorm() / denom;
    r.grad[l].trans = 2.0 * w_trans * lam_t * dt / denom;
    r.grad[l].rot = 2.0 * w_rot * lam_r * dr / denom;
  }
  r.value.total = r.value.trans + r.value.rot;
  if (!std::isfinite(r.value.total)) throw NumericalError("dsm_loss: non-finite loss");
  return r;
}

double global_norm(const ParamSet& g) { return std::sqrt(g.squared_norm()); }

Adam::Adam(const ParamSet& like, double lr, double beta1, double beta2, double eps)
    : m_(like.zeros_like()), v_(like.zeros_like()), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

void Adam::step(ParamSet& params, const ParamSet& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, t_);
  const double c2 = 1.0 - std::pow(b2_, t_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = b1_ * m_[i] + (1.0 - b1_) * grads[i];
    v_[i] = b2_ * v_[i] + (1.0 - b2_) * grads[i].cwiseProduct(grads[i]);
    if (lr_ == 0.0) continue;
    params[i].array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

LossResult example_loss(const Denoiser& model, const TrainingExample& ex, const TrainConfig& cfg,
                        DenoiserGradients* grads) {
  const auto slots = training_slots(ex);
  const int L = static_cast<int>(ex.clean.size());
  ForwardTape tape;
  const auto out = model.forward(slots, nullptr, grads ? &tape : nullptr);
  std::vector<FrameScore> pred(out.scores.begin() + L, out.scores.end());
  LossResult loss = dsm_loss(pred, ex.eps, ex.rot_target, ex.tau, model.schedule(), cfg.w_trans, cfg.w_rot,
                             cfg.variance_weighting);
  if (grads) {
    std::vector<FrameScore> gs(slots.size());
    for (int l = 0; l < L; ++l) gs[L + l] = loss.grad[l];
    *grads = model.backward(tape, gs);
  }
  return loss;
}

TrainResult train_loop(Denoiser& model, const std::vector<Trajectory>& data, const TrainConfig& cfg, Rng& rng,
                       const std::function<void(const StepLog&)>& on_step) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_loop: empty dataset");
  TrainResult result;
  Adam opt(model.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
  for (int step = 0; step < cfg.steps; ++step) {
    DenoiserGradients g;
    LossTerms terms;
    for (int k = 0; k < cfg.accumulate; ++k) {
      const auto& traj = data[data.size() == 1 ? 0 : rng.below(data.size())];
      const auto ex = sample_training_example(traj, cfg, model.schedule(), rng);
      DenoiserGradients gk;
      const auto loss = example_loss(model, ex, cfg, &gk);
      if (!(loss.value.total < cfg.divergence_threshold))
        throw NumericalError("training diverged at step " + std::to_string(step) +
                             ": loss = " + std::to_string(loss.value.total));
      if (k == 0) {
        g.params = std::move(gk.params);
      } else {
        for (std::size_t i = 0; i < g.params.size(); ++i) g.params[i] += gk.params[i];
      }
      terms.total += loss.value.total / cfg.accumulate;
      terms.trans += loss.value.trans / cfg.accumulate;
      terms.rot += loss.value.rot / cfg.accumulate;
    }
    if (cfg.accumulate > 1)
      for (std::size_t i = 0; i < g.params.size(); ++i) g.params[i] /= cfg.accumulate;
    const double norm = global_norm(g.params);
    if (!std::isfinite(norm)) throw NumericalError("non-finite gradient at step " + std::to_string(step));
    if (norm > cfg.grad_clip) {
      const double s = cfg.grad_clip / norm;
      for (std::size_t i = 0; i < g.params.size(); ++i) g.params[i] *= s;
    }
    opt.set_lr(cfg.lr_at(step));
    opt.step(model.params(), g.params);
    StepLog log{step, terms.trans, terms.rot, norm};
    result.curve.push_back(log);
    if (on_step) on_step(log);
  }
  return result;
}

void write_loss_csv(std::ostream& out, const std::vector<StepLog>& curve) {
  out << "step,loss_trans,loss_rot,grad_norm\n";
  out.precision(10);
  for (const auto& s : curve) out << s.step << ',' << s.loss_trans << ',' << s.loss_rot << ',' << s.grad_norm << '\n';
}

}  // namespace stmd
