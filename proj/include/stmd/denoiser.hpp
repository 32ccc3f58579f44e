#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "stmd/diffusion.hpp"
#include "stmd/rng.hpp"
#include "stmd/trajectory.hpp"

namespace stmd {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

struct DenoiserConfig {
  int model_dim = 64;
  int heads = 4;
  int st_layers = 2;  ///< attention layers per block
  int blocks = 2;
  int pair_dim = 16;
  bool rope_2d = true;
  double rope_base = 1e4;
  double ln_eps = 1e-10;
  int knn = 4;

  void validate() const;
  int head_dim() const { return model_dim / heads; }
  int total_layers() const { return blocks * st_layers; }
};

/// Named f64 tensors. Gradients use the same container.
class ParamSet {
 public:
  struct Tensor {
    std::string name;
    Matrix value;
  };

  std::size_t add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  std::size_t index(const std::string& name) const;
  bool contains(const std::string& name) const { return lookup_.count(name) > 0; }
  Matrix& operator[](std::size_t i) { return tensors_[i].value; }
  const Matrix& operator[](std::size_t i) const { return tensors_[i].value; }
  Matrix& operator[](const std::string& name) { return tensors_[index(name)].value; }
  const Matrix& operator[](const std::string& name) const { return tensors_[index(name)].value; }
  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return tensors_[i].name; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

  ParamSet zeros_like() const;
  void set_zero();
  std::size_t scalar_count() const;
  double squared_norm() const;
  bool all_finite() const;

 private:
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

/// Raw per-token input widths.
constexpr int kTokenFeatures = 34;
constexpr int kPairFeatures = 18;
constexpr int kCondFeatures = 32;
/// Head outputs per residue: local translation (3), local rotation (3) and
/// coefficients along the unit vectors to the next and previous residue (2).
constexpr int kHeadOutputs = 8;

enum class InitStyle {
  training,  ///< small output heads, zero AdaLN modulation
  random,    ///< every tensor dense random (used for gradient and symmetry checks)
};

class Denoiser;

/// One frame position in the sequence seen by the network.
struct Slot {
  FrameSet frames;  ///< Angstrom
  double tau = 0.0;
  double dt_ns = 1.0;
  int frame_index = 0;      ///< temporal RoPE position
  int prev = -1;            ///< unified index of the preceding frame, -1 if none
  std::vector<int> attend;  ///< unified slot indices this slot attends to, ascending
  bool output = false;      ///< produce a score for this slot
};

/// Raw input features for the active slots.
struct TokenGrid {
  int residues = 0;
  Matrix tokens;              ///< (slots * N) x kTokenFeatures, token = i + N * slot
  std::vector<Matrix> pairs;  ///< per slot: (N * N) x kPairFeatures, row = i * N + j
  Matrix cond;                ///< slots x kCondFeatures
  std::vector<int> residue_index;
  std::vector<int> frame_index;  ///< per slot
};

/// Keys (before rotary embedding) and values of committed frames, per layer.
class KVCache {
 public:
  KVCache() = default;
  KVCache(int layers, int residues, int model_dim);

  int layers() const { return layers_; }
  int residues() const { return residues_; }
  int model_dim() const { return model_dim_; }
  int frames() const { return static_cast<int>(frame_index_.size()); }
  bool empty() const { return frame_index_.empty(); }

  void append(const FrameSet& frames, int frame_index, double ctx_tau, std::vector<Matrix> keys,
              std::vector<Matrix> values);
  const Matrix& keys(int layer, int frame) const { return keys_[frame][layer]; }
  const Matrix& values(int layer, int frame) const { return values_[frame][layer]; }
  const FrameSet& frame(int f) const { return frames_[f]; }
  int frame_index(int f) const { return frame_index_[f]; }
  double ctx_tau(int f) const { return ctx_tau_[f]; }

  /// Logical size of stored keys and values (8-byte scalars).
  std::uint64_t logical_bytes() const;
  std::size_t entry_count() const;

 private:
  int layers_ = 0, residues_ = 0, model_dim_ = 0;
  std::vector<std::vector<Matrix>> keys_, values_;  // [frame][layer] N x d
  std::vector<FrameSet> frames_;
  std::vector<int> frame_index_;
  std::vector<double> ctx_tau_;
};

/// Builds the raw features of the active slots. `cache` supplies frames of
/// committed slots referenced by `prev` (unified indices below cache size).
/// Bond lengths are also given in units of the slot's translation noise
/// level under `sched`.
TokenGrid embed_inputs(const std::vector<Slot>& slots, const KVCache* cache = nullptr, int knn = 4,
                       const NoiseSchedule& sched = NoiseSchedule{});

// ---- building blocks -------------------------------------------------------

/// Rotary embedding of one head vector: the first half rotates with the
/// residue index, the second half with the frame index.
Vector rope2d(const Vector& v, int residue, int frame, double base = 1e4);
/// Applies rope2d (or its inverse) to every head of every row.
void rope_rows(Matrix& m, const std::vector<int>& residue, const std::vector<int>& frame, int heads, double base,
               bool inverse = false);

struct LayerNormResult {
  Matrix y;
  Vector rstd;
};
LayerNormResult layer_norm(const Matrix& x, double eps);
/// Gradient of plain layer norm given its output and inverse std.
Matrix layer_norm_backward(const Matrix& dy, const Matrix& y, const Vector& rstd);

/// LN(x) * (1 + scale) + shift with per-row modulation.
Matrix adaln(const Matrix& x, const Matrix& shift, const Matrix& scale, double eps);

struct AttentionResult {
  Matrix out;      ///< queries x dv
  Matrix weights;  ///< queries x keys, zero where masked
};
/// softmax(Q K^T / sqrt(dk) + bias) V over allowed keys. Throws if a row has
/// no allowed key.
AttentionResult masked_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                 const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>& allowed,
                                 const Matrix& bias);

struct EdgeWeights {
  Matrix wp;        ///< d x p
  Matrix w1, b1;    ///< 2p x p, 1 x p
  Matrix w2, b2;    ///< p x p, 1 x p
};
/// z_ij += MLP([p_i + p_j, z_ij]) with p = s W_p. z rows are i * N + j.
Matrix edge_transition(const Matrix& s, const Matrix& z, const EdgeWeights& w);

struct BackboneScore {
  Coords trans;  ///< global, scaled units, zero centroid
  Coords rot;    ///< local tangent
};
/// Maps per-residue head outputs u (N x 6, or N x 8 with chain-direction
/// terms) to scores; c_trans and c_rot are the noise-level output scales.
BackboneScore backbone_update(const Matrix& u, const FrameSet& frames, double c_trans, double c_rot);

double silu(double x);
double silu_grad(double x);

// ---- model -------------------------------------------------------------------

struct ForwardTape;

struct DenoiserOutput {
  std::vector<FrameScore> scores;  ///< per active slot; empty entries for non-output slots
  Matrix head;                     ///< accumulated head outputs u, tokens x 6
  std::vector<Matrix> keys, values;  ///< per layer, active tokens x d (pre-RoPE keys)
};

struct DenoiserGradients {
  ParamSet params;
  Matrix tokens;
  std::vector<Matrix> pairs;
  Matrix cond;
};

class Denoiser {
 public:
  Denoiser(DenoiserConfig cfg, NoiseSchedule schedule);

  const DenoiserConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  void initialize(Rng& rng, InitStyle style = InitStyle::training);

  /// Output scale of the translation score, 1 / sqrt(1 - alpha).
  double trans_scale(double tau) const;
  /// Output scale of the rotation score, RMS IGSO3 score norm at sigma(tau).
  double rot_scale(double tau) const;

  /// Full forward pass over active slots; unified indices below
  /// cache->frames() refer to committed frames.
  DenoiserOutput forward(const std::vector<Slot>& slots, const KVCache* cache = nullptr,
                         ForwardTape* tape = nullptr) const;
  DenoiserOutput forward(const std::vector<Slot>& slots, const TokenGrid& grid, const KVCache* cache,
                         ForwardTape* tape) const;

  /// Reverse-mode gradients given upstream score gradients (per active slot;
  /// entries for non-output slots are ignored). Requires a tape recorded
  /// without a cache.
  DenoiserGradients backward(const ForwardTape& tape, const std::vector<FrameScore>& grad_scores) const;

 private:
  struct LayerIdx {
    std::size_t ada1_w, ada1_b, wq, wk, wv, wo, bo, wz, ada2_w, ada2_b, f1_w, f1_b, f2_w, f2_b;
  };
  struct BlockIdx {
    std::size_t h1_w, h1_b, h2_w, h2_b;
    std::size_t e_p, e1_w, e1_b, e2_w, e2_b;  // unused on the last block
  };

  void build_layout();

  DenoiserConfig cfg_;
  NoiseSchedule schedule_;
  ParamSet params_;
  std::size_t embed_w_, embed_b_, pair_w_, pair_b_, cond1_w_, cond1_b_, cond2_w_, cond2_b_, skip_w_;
  std::vector<LayerIdx> layer_idx_;
  std::vector<BlockIdx> block_idx_;
};

/// Intermediate values of one forward pass.
struct ForwardTape {
  struct Layer {
    Matrix x_in, ln1, m1, q, k, v, qr, kr, o, attn, x_mid, ln2, m2, f1, g1, f2;
    Vector rstd1, rstd2;
    Matrix mod1, mod2;
    std::vector<std::vector<Matrix>> weights;  // [slot][head]
  };
  struct Edge {
    std::vector<Matrix> p, inp, e1, eh;  // per slot
  };
  struct Head {
    Matrix ln, u1, uh;
    Vector rstd;
  };

  std::vector<Slot> slots;
  TokenGrid grid;
  Matrix x0;
  std::vector<std::vector<Matrix>> z;  // [block][slot], pair state used by that block
  Matrix cond_a1, cond_h1, cond_c, cond_sc;
  std::vector<Layer> layers;
  std::vector<Head> heads;
  std::vector<Edge> edges;
  Matrix head_sum;
};

}  // namespace stmd
