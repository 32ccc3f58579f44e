#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "selftest/acceptance.hpp"
#include "stmd/checkpoint.hpp"
#include "stmd/costmodel.hpp"
#include "stmd/metrics.hpp"
#include "stmd/rollout.hpp"
#include "stmd/stmd_format.hpp"
#include "stmd/synth.hpp"
#include "stmd/training.hpp"

using json = nlohmann::ordered_json;

namespace {

struct Common {
  std::uint64_t seed = 0;
  std::string out;
};

void add_common(CLI::App* sub, Common& c, const std::string& out_help) {
  sub->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  sub->add_option("--out", c.out, out_help);
}

void emit(const json& j) { std::cout << j.dump() << std::endl; }

std::string require_out(const Common& c, const std::string& fallback) { return c.out.empty() ? fallback : c.out; }

// ---- synth -----------------------------------------------------------------------

struct SynthArgs {
  Common common;
  stmd::SynthConfig cfg;
  int frames = 2048;
  int stride = 1;
};

void add_synth(CLI::App& app, SynthArgs& a) {
  auto* s = app.add_subcommand("synth", "Generate a synthetic coarse-grained trajectory (STMD file)");
  add_common(s, a.common, "Output STMD path (default synth.stmd)");
  s->add_option("--residues", a.cfg.residues, "Number of residues")->capture_default_str();
  s->add_option("--frames", a.frames, "Number of frames")->capture_default_str();
  s->add_option("--stride", a.stride, "Snapshot stride in units of the base dt")->capture_default_str();
  s->add_option("--base-dt-ns", a.cfg.base_dt_ns, "Base time step (ns)")->capture_default_str();
  s->add_option("--k-parallel", a.cfg.k_parallel, "Bond stiffness along the bond (kT/A^2)")->capture_default_str();
  s->add_option("--k-perpendicular", a.cfg.k_perpendicular, "Bond stiffness across the bond (kT/A^2)")
      ->capture_default_str();
  s->add_option("--k-confine", a.cfg.k_confine, "Confinement stiffness (kT/A^2)")->capture_default_str();
  s->add_option("--friction", a.cfg.friction, "Friction (kT ns/A^2)")->capture_default_str();
  s->add_option("--kT", a.cfg.kT, "Temperature scale")->capture_default_str();
  s->add_option("--rot-relax-ns", a.cfg.rot_relax_ns, "Relaxation time of frame orientations (ns)")
      ->capture_default_str();
  s->add_option("--rot-std", a.cfg.rot_std, "Stationary orientation fluctuation (rad)")->capture_default_str();
}

json run_synth(const SynthArgs& a) {
  const std::string out = require_out(a.common, "synth.stmd");
  const auto traj = stmd::synth_generate(a.cfg, a.frames, a.common.seed, a.stride);
  stmd::write_stmd_file(out, traj);
  const auto modes = stmd::synth_modes(a.cfg);
  json j;
  j["command"] = "synth";
  j["out"] = out;
  j["frames"] = traj.length();
  j["residues"] = traj.residues();
  j["stride_ns"] = traj.uniform_stride_ns();
  j["slowest_relaxation_ns"] = 1.0 / modes.rate.minCoeff();
  j["seed"] = a.common.seed;
  return j;
}

// ---- model and schedule flags -----------------------------------------------------------

void add_model_flags(CLI::App* s, stmd::DenoiserConfig& m, stmd::NoiseSchedule& n) {
  s->add_option("--model-dim", m.model_dim, "Token width d")->capture_default_str();
  s->add_option("--heads", m.heads, "Attention heads")->capture_default_str();
  s->add_option("--blocks", m.blocks, "Denoiser blocks")->capture_default_str();
  s->add_option("--st-layers", m.st_layers, "Spatio-temporal attention layers per block")->capture_default_str();
  s->add_option("--pair-dim", m.pair_dim, "Pair feature width")->capture_default_str();
  s->add_option("--knn", m.knn, "Neighbours in the token distance features")->capture_default_str();
  s->add_option("--b-min", n.b_min, "Translation beta at tau=0")->capture_default_str();
  s->add_option("--b-max", n.b_max, "Translation beta at tau=1")->capture_default_str();
  s->add_option("--sigma-min", n.sigma_min, "Rotation noise at tau=0")->capture_default_str();
  s->add_option("--sigma-max", n.sigma_max, "Rotation noise at tau=1")->capture_default_str();
  s->add_option("--coordinate-scale", n.coordinate_scale, "Internal units per Angstrom")->capture_default_str();
  s->add_option("--diffusion-steps", n.steps, "Reverse steps per frame")->capture_default_str();
}

// ---- train --------------------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::vector<std::string> data;
  stmd::DenoiserConfig model;
  stmd::NoiseSchedule sched;
  stmd::TrainConfig cfg;
  std::string loss_csv;
};

void add_train(CLI::App& app, TrainArgs& a) {
  auto* s = app.add_subcommand("train", "Train the denoiser on STMD trajectories");
  add_common(s, a.common, "Output checkpoint path (default model.ckpt)");
  s->add_option("--data", a.data, "Training trajectories (STMD)")->required();
  add_model_flags(s, a.model, a.sched);
  s->add_option("--steps", a.cfg.steps, "Optimizer steps")->capture_default_str();
  s->add_option("--lr", a.cfg.lr, "Adam learning rate")->capture_default_str();
  s->add_option("--grad-clip", a.cfg.grad_clip, "Global gradient norm clip")->capture_default_str();
  s->add_option("--accumulate", a.cfg.accumulate, "Snippets averaged per optimizer step")->capture_default_str();
  s->add_option("--lr-final-fraction", a.cfg.lr_final_fraction, "Cosine-decayed final lr as a fraction of --lr")
      ->capture_default_str();
  s->add_option("--warmup-steps", a.cfg.warmup_steps, "Linear lr warmup steps")->capture_default_str();
  s->add_option("--frames-per-sample", a.cfg.frames_per_sample, "Frames per training snippet")
      ->capture_default_str();
  s->add_option("--dt-min-ns", a.cfg.dt_min_ns, "Smallest sampled stride (ns)")->capture_default_str();
  s->add_option("--dt-max-ns", a.cfg.dt_max_ns, "Largest sampled stride (ns)")->capture_default_str();
  s->add_option("--base-dt-ns", a.cfg.base_dt_ns, "Snapshot spacing of the data (ns)")->capture_default_str();
  s->add_option("--ctx-noise-max", a.cfg.ctx_noise_max, "Largest context perturbation level")
      ->capture_default_str();
  s->add_option("--ctx-noise-prob", a.cfg.ctx_noise_prob, "Probability of perturbing a context frame")
      ->capture_default_str();
  s->add_option("--w-trans", a.cfg.w_trans, "Translation loss weight")->capture_default_str();
  s->add_option("--w-rot", a.cfg.w_rot, "Rotation loss weight")->capture_default_str();
  s->add_flag("--variance-weighting", a.cfg.variance_weighting, "Weight squared errors by the output variance");
  s->add_option("--loss-csv", a.loss_csv, "Write the loss curve as CSV");
}

json run_train(const TrainArgs& a) {
  const std::string out = require_out(a.common, "model.ckpt");
  std::vector<stmd::Trajectory> data;
  for (const auto& p : a.data) data.push_back(stmd::read_stmd_file(p));
  stmd::Denoiser model(a.model, a.sched);
  stmd::Rng rng(a.common.seed);
  stmd::Rng init = rng.split(1);
  model.initialize(init, stmd::InitStyle::training);
  stmd::Rng train_rng = rng.split(2);
  const auto res = stmd::train_loop(model, data, a.cfg, train_rng);
  stmd::save_checkpoint_file(out, model);
  if (!a.loss_csv.empty()) {
    std::ofstream f(a.loss_csv);
    stmd::write_loss_csv(f, res.curve);
  }
  json j;
  j["command"] = "train";
  j["out"] = out;
  j["steps"] = res.curve.size();
  j["parameters"] = model.params().scalar_count();
  if (!res.curve.empty()) {
    // Mean over the last 10% of steps.
    const std::size_t tail = std::max<std::size_t>(1, res.curve.size() / 10);
    double lt = 0.0, lr = 0.0;
    for (std::size_t i = res.curve.size() - tail; i < res.curve.size(); ++i) {
      lt += res.curve[i].loss_trans;
      lr += res.curve[i].loss_rot;
    }
    j["final_loss_trans"] = lt / tail;
    j["final_loss_rot"] = lr / tail;
  }
  j["seed"] = a.common.seed;
  return j;
}

// ---- rollout ------------------------------------------------------------------------------

struct RolloutArgs {
  Common common;
  std::string checkpoint;
  std::string init;
  int init_frame = 0;
  int frames = 64;
  std::string ctx_mode = "uniform";
  stmd::RolloutConfig cfg;
  stmd::DenoiserConfig model;
  stmd::NoiseSchedule sched;
};

void add_rollout(CLI::App& app, RolloutArgs& a) {
  auto* s = app.add_subcommand("rollout", "Generate a trajectory autoregressively");
  add_common(s, a.common, "Output STMD path (default rollout.stmd); a .json sidecar is written next to it");
  s->add_option("--checkpoint", a.checkpoint,
                "Model checkpoint; without one a freshly initialized model (seeded) is used");
  s->add_option("--init", a.init, "STMD file supplying the initial frame");
  s->add_option("--init-frame", a.init_frame, "Frame of --init to start from")->capture_default_str();
  s->add_option("--residues", a.cfg.residues, "Residue count when no initial frame is given (default 8)");
  s->add_option("--frames", a.frames, "Frames to produce, including the initial frame")->capture_default_str();
  s->add_option("--stride-ns", a.cfg.dt_ns, "Physical stride between frames (ns)")->capture_default_str();
  s->add_option("--steps", a.cfg.steps, "Reverse steps per frame (0: schedule default)")->capture_default_str();
  s->add_option("--ctx-noise", a.ctx_mode, "Context perturbation: uniform, fixed or off")
      ->check(CLI::IsMember({"uniform", "fixed", "off"}))
      ->capture_default_str();
  s->add_option("--ctx-tau", a.cfg.ctx_tau, "Perturbation level for --ctx-noise fixed")->capture_default_str();
  s->add_option("--ctx-noise-max", a.cfg.ctx_noise_max, "Upper level for --ctx-noise uniform")
      ->capture_default_str();
  s->add_flag("!--no-cache", a.cfg.use_cache, "Re-encode the full history for every score evaluation");
  s->add_flag("!--no-final-denoise", a.cfg.final_denoise, "Keep the last reverse-step translations");
  s->add_flag("!--deterministic", a.cfg.stochastic, "Zero noise in the reverse sampler");
  add_model_flags(s, a.model, a.sched);
}

json run_rollout(RolloutArgs a) {
  const std::string out = require_out(a.common, "rollout.stmd");
  stmd::Rng rng(a.common.seed);
  std::optional<stmd::Denoiser> model;
  if (!a.checkpoint.empty()) {
    model.emplace(stmd::load_checkpoint_file(a.checkpoint));
  } else {
    model.emplace(a.model, a.sched);
    stmd::Rng init = rng.split(1);
    model->initialize(init, stmd::InitStyle::training);
  }
  std::optional<stmd::FrameSet> initial;
  if (!a.init.empty()) {
    const auto t = stmd::read_stmd_file(a.init);
    if (a.init_frame < 0 || static_cast<std::size_t>(a.init_frame) >= t.length())
      throw std::out_of_range("--init-frame outside the trajectory");
    initial = t[static_cast<std::size_t>(a.init_frame)];
  } else if (a.cfg.residues == 0) {
    a.cfg.residues = 8;
  }
  a.cfg.ctx_noise = a.ctx_mode != "off";
  a.cfg.fixed_ctx_tau = a.ctx_mode == "fixed";
  stmd::Rng gen_rng = rng.split(2);
  const auto res = stmd::generate(*model, initial, a.frames, a.cfg, gen_rng);
  if (res.trajectory.length() > 0) stmd::write_stmd_file(out, res.trajectory);
  auto side = stmd::rollout_sidecar(res, a.cfg, a.common.seed);
  std::ofstream(out + ".json") << side.dump(2) << "\n";
  json j;
  j["command"] = "rollout";
  j["out"] = out;
  j["sidecar"] = out + ".json";
  for (auto it = side.begin(); it != side.end(); ++it) j[it.key()] = it.value();
  if (a.checkpoint.empty()) j["untrained_model"] = true;
  if (res.aborted) throw std::runtime_error("rollout aborted: " + res.diagnostic);
  return j;
}

// ---- eval ------------------------------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string gen, ref, csv_prefix, mode = "per_component";
  stmd::EvalOptions opt;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  auto* s = app.add_subcommand("eval", "Compare a generated trajectory with a reference");
  add_common(s, a.common, "Output MetricReport JSON path (default report.json)");
  s->add_option("--gen", a.gen, "Generated trajectory (STMD)")->required();
  s->add_option("--ref", a.ref, "Reference trajectory (STMD)")->required();
  s->add_option("--csv-prefix", a.csv_prefix, "Write curves to <prefix>_curves.csv and <prefix>_tica.csv");
  s->add_option("--bins", a.opt.coverage_bins, "Histogram bins per axis")->capture_default_str();
  s->add_option("--coverage-mode", a.mode, "per_component or joint")
      ->check(CLI::IsMember({"per_component", "joint"}))
      ->capture_default_str();
  s->add_option("--components", a.opt.kinetic_components, "PCA components for kinetic curves")
      ->capture_default_str();
  s->add_option("--lags", a.opt.lags, "Lags (frames) for RMSD, autocorrelation and VAMP-2");
  s->add_option("--tica-lags", a.opt.tica_lags, "Lags (frames) for tICA");
  s->add_flag("--valid-only", a.opt.coverage_valid_only, "Restrict coverage to valid generated frames");
  s->add_option("--clash-distance", a.opt.thresholds.clash_distance, "Clash distance (A)")->capture_default_str();
  s->add_option("--break-distance", a.opt.thresholds.break_distance, "Chain-break distance (A)")
      ->capture_default_str();
}

json opt_value(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json run_eval(EvalArgs a) {
  const std::string out = require_out(a.common, "report.json");
  a.opt.coverage_mode = a.mode == "joint" ? stmd::CoverageMode::joint : stmd::CoverageMode::per_component;
  const auto gen = stmd::read_stmd_file(a.gen);
  const auto ref = stmd::read_stmd_file(a.ref);
  const auto report = stmd::evaluate(gen, ref, a.opt);
  const json rj = report.to_json();
  std::ofstream(out) << rj.dump(2) << "\n";
  if (!a.csv_prefix.empty()) {
    std::ofstream c(a.csv_prefix + "_curves.csv");
    c << "lag,rmsd_gen,rmsd_ref,autocorr_gen,autocorr_ref,vamp2_gen,vamp2_ref\n";
    auto cell = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string(); };
    for (std::size_t i = 0; i < report.lags.size(); ++i)
      c << report.lags[i] << "," << cell(report.rmsd_gen[i]) << "," << cell(report.rmsd_ref[i]) << ","
        << cell(report.autocorr_gen[i]) << "," << cell(report.autocorr_ref[i]) << "," << cell(report.vamp2_gen[i])
        << "," << cell(report.vamp2_ref[i]) << "\n";
    std::ofstream t(a.csv_prefix + "_tica.csv");
    t << "lag,tica_correlation\n";
    for (std::size_t i = 0; i < report.tica_lags.size(); ++i) t << report.tica_lags[i] << "," << cell(report.tica[i]) << "\n";
  }
  json j;
  j["command"] = "eval";
  j["out"] = out;
  j["jsd"] = report.coverage.jsd;
  j["recall"] = report.coverage.recall;
  j["valid_fraction"] = report.valid_fraction;
  j["autocorr_max_diff"] = opt_value(stmd::max_curve_difference(report.autocorr_gen, report.autocorr_ref));
  return j;
}

// ---- mz-verify -------------------------------------------------------------------------------

struct MzArgs {
  Common common;
  int systems = 10;
};

void add_mz(CLI::App& app, MzArgs& a) {
  auto* s = app.add_subcommand("mz-verify", "Numerical checks of memory-kernel inflation on random systems");
  add_common(s, a.common, "Output JSON path (default mz_verify.json)");
  s->add_option("--systems", a.systems, "Random systems to check")->capture_default_str();
}

json run_mz(const MzArgs& a) {
  const std::string out = require_out(a.common, "mz_verify.json");
  const json r = stmd::selftest::mz_verification(a.common.seed, a.systems);
  std::ofstream(out) << r.dump(2) << "\n";
  double worst = 0.0, min_ratio = 1.0, min_order = 1e9, max_order = -1e9;
  for (const auto& s : r["systems"]) {
    worst = std::max(worst, s["schur_residual"].get<double>());
    min_ratio = std::min(min_ratio, s["singular_value_ratio"].get<double>());
    min_order = std::min(min_order, s["convergence_order"].get<double>());
    max_order = std::max(max_order, s["convergence_order"].get<double>());
  }
  json j;
  j["command"] = "mz-verify";
  j["out"] = out;
  j["systems"] = a.systems;
  j["max_schur_residual"] = worst;
  j["min_singular_value_ratio"] = min_ratio;
  j["convergence_order_range"] = {min_order, max_order};
  j["hand_kernel_max_error"] = r["hand_kernel_max_error"];
  return j;
}

// ---- cost-report ---------------------------------------------------------------------------------

struct CostArgs {
  Common common;
  std::uint64_t n = 200, l = 32, d = 256, layers = 1, bytes = 4;
};

void add_cost(CLI::App& app, CostArgs& a) {
  auto* s = app.add_subcommand("cost-report", "Attention cost proxies and KV-cache sizes");
  add_common(s, a.common, "Output CSV path for the sweeps (default cost_report.csv)");
  s->add_option("--N", a.n, "Residues")->capture_default_str();
  s->add_option("--L", a.l, "Context frames")->capture_default_str();
  s->add_option("--d", a.d, "Embedding width")->capture_default_str();
  s->add_option("--layers", a.layers, "Cached layers")->capture_default_str();
  s->add_option("--bytes", a.bytes, "Bytes per scalar")->capture_default_str();
}

json run_cost(const CostArgs& a) {
  namespace c = stmd::cost;
  const std::string out = require_out(a.common, "cost_report.csv");
  const double dd = static_cast<double>(a.d);
  std::ofstream f(out);
  f << "sweep,N,L,d,st_joint,pairformer_pair_temporal,pairformer_single_temporal,kv_singles_bytes,"
       "kv_pairs_bytes\n";
  auto row = [&](const char* sweep, std::uint64_t n, std::uint64_t l) {
    const double nn = static_cast<double>(n), ll = static_cast<double>(l);
    f << sweep << "," << n << "," << l << "," << a.d << "," << c::flops(c::Arch::st_joint, nn, ll, dd) << ","
      << c::flops(c::Arch::pairformer_pair_temporal, nn, ll, dd) << ","
      << c::flops(c::Arch::pairformer_single_temporal, nn, ll, dd) << ","
      << c::kv_bytes(c::KvVariant::singles, n, l, a.d, a.layers, a.bytes) << ","
      << c::kv_bytes(c::KvVariant::singles_plus_pairs, n, l, a.d, a.layers, a.bytes) << "\n";
  };
  for (std::uint64_t n = 16; n <= 4096; n *= 2) row("N", n, a.l);
  for (std::uint64_t l = 1; l <= 1024; l *= 2) row("L", a.n, l);
  const auto singles = c::kv_bytes(c::KvVariant::singles, a.n, a.l, a.d, a.layers, a.bytes);
  const auto pairs = c::kv_bytes(c::KvVariant::singles_plus_pairs, a.n, a.l, a.d, a.layers, a.bytes);
  const double nn = static_cast<double>(a.n), ll = static_cast<double>(a.l);
  json j;
  j["command"] = "cost-report";
  j["out"] = out;
  j["N"] = a.n;
  j["L"] = a.l;
  j["d"] = a.d;
  j["kv_singles_bytes"] = singles;
  j["kv_pairs_bytes"] = pairs;
  j["kv_ratio"] = static_cast<double>(pairs) / static_cast<double>(singles);
  j["flops_st_joint"] = c::flops(c::Arch::st_joint, nn, ll, dd);
  j["flops_pairformer_pair_temporal"] = c::flops(c::Arch::pairformer_pair_temporal, nn, ll, dd);
  j["flops_pairformer_single_temporal"] = c::flops(c::Arch::pairformer_single_temporal, nn, ll, dd);
  j["crossover_L"] = c::crossover_L(nn);
  return j;
}

// ---- selftest ----------------------------------------------------------------------------------

struct SelftestArgs {
  Common common;
  std::vector<int> only;
  bool quiet = false;
};

void add_selftest(CLI::App& app, SelftestArgs& a) {
  auto* s = app.add_subcommand("selftest", "Run the acceptance suite");
  add_common(s, a.common, "Directory for end-to-end artifacts (loss curve, rollouts)");
  s->add_option("--only", a.only, "Run only these criteria (1-10)");
  s->add_flag("--quiet", a.quiet, "Suppress progress output on stderr");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stmd: autoregressive SE(3) trajectory diffusion toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  SynthArgs synth;
  TrainArgs train;
  RolloutArgs rollout;
  EvalArgs eval;
  MzArgs mz;
  CostArgs cost;
  SelftestArgs self;
  self.common.seed = stmd::selftest::AcceptanceOptions{}.seed;
  add_synth(app, synth);
  add_train(app, train);
  add_rollout(app, rollout);
  add_eval(app, eval);
  add_mz(app, mz);
  add_cost(app, cost);
  add_selftest(app, self);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (name == "synth") emit(run_synth(synth));
    if (name == "train") emit(run_train(train));
    if (name == "rollout") emit(run_rollout(rollout));
    if (name == "eval") emit(run_eval(eval));
    if (name == "mz-verify") emit(run_mz(mz));
    if (name == "cost-report") emit(run_cost(cost));
    if (name == "selftest") {
      stmd::selftest::AcceptanceOptions opt;
      opt.seed = self.common.seed;
      opt.out_dir = self.common.out;
      if (!self.quiet) opt.log = &std::cerr;
      const auto results = stmd::selftest::run_acceptance(self.only, opt, std::cerr);
      json j;
      j["command"] = "selftest";
      j["seed"] = opt.seed;
      j["criteria"] = json::array();
      int failed = 0;
      for (const auto& r : results) {
        j["criteria"].push_back({{"id", r.id}, {"name", r.name}, {"pass", r.pass}, {"seconds", r.seconds},
                                 {"detail", r.detail}});
        failed += r.pass ? 0 : 1;
      }
      j["passed"] = static_cast<int>(results.size()) - failed;
      j["failed"] = failed;
      emit(j);
      return failed ? 1 : 0;
    }
  } catch (const std::exception& e) {
    json err;
    err["command"] = name;
    err["error"] = e.what();
    std::cerr << err.dump() << std::endl;
    return 1;
  }
  return 0;
}
