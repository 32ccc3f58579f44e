#include "stmd/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "stmd/errors.hpp"

namespace stmd {

// ---- config / params ----------------------------------------------------------

void DenoiserConfig::validate() const {
  if (model_dim < 2 || heads < 1 || st_layers < 1 || blocks < 1 || pair_dim < 2)
    throw std::invalid_argument("DenoiserConfig: dimensions must be >= 2 (heads, layers, blocks >= 1)");
  if (model_dim % (4 * heads) != 0)
    throw std::invalid_argument("DenoiserConfig: model_dim must be divisible by 4 * heads for 2D rotary pairs");
  if (knn < 1) throw std::invalid_argument("DenoiserConfig: knn must be >= 1");
}

std::size_t ParamSet::add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  if (lookup_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  lookup_[name] = tensors_.size();
  tensors_.push_back({name, Matrix::Zero(rows, cols)});
  return tensors_.size() - 1;
}

std::size_t ParamSet::index(const std::string& name) const {
  auto it = lookup_.find(name);
  if (it == lookup_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out = *this;
  out.set_zero();
  return out;
}

void ParamSet::set_zero() {
  for (auto& t : tensors_) t.value.setZero();
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += static_cast<std::size_t>(t.value.size());
  return n;
}

double ParamSet::squared_norm() const {
  double s = 0.0;
  for (const auto& t : tensors_) s += t.value.squaredNorm();
  return s;
}

bool ParamSet::all_finite() const {
  for (const auto& t : tensors_)
    if (!t.value.allFinite()) return false;
  return true;
}

// ---- cache ---------------------------------------------------------------------

KVCache::KVCache(int layers, int residues, int model_dim)
    : layers_(layers), residues_(residues), model_dim_(model_dim) {}

void KVCache::append(const FrameSet& frames, int frame_index, double ctx_tau, std::vector<Matrix> keys,
                     std::vector<Matrix> values) {
  if (static_cast<int>(keys.size()) != layers_ || static_cast<int>(values.size()) != layers_)
    throw std::invalid_argument("KVCache::append: layer count mismatch");
  if (static_cast<int>(frames.size()) != residues_)
    throw std::invalid_argument("KVCache::append: residue count mismatch");
  for (int l = 0; l < layers_; ++l)
    if (keys[l].rows() != residues_ || keys[l].cols() != model_dim_ || values[l].rows() != residues_ ||
        values[l].cols() != model_dim_)
      throw std::invalid_argument("KVCache::append: tensor shape mismatch");
  keys_.push_back(std::move(keys));
  values_.push_back(std::move(values));
  frames_.push_back(frames);
  frame_index_.push_back(frame_index);
  ctx_tau_.push_back(ctx_tau);
}

std::uint64_t KVCache::logical_bytes() const {
  return 2ull * static_cast<std::uint64_t>(layers_) * static_cast<std::uint64_t>(residues_) *
         static_cast<std::uint64_t>(frames()) * static_cast<std::uint64_t>(model_dim_) * sizeof(double);
}

std::size_t KVCache::entry_count() const {
  return static_cast<std::size_t>(layers_) * static_cast<std::size_t>(frames()) * static_cast<std::size_t>(residues_);
}

// ---- features --------------------------------------------------------------------

namespace {

constexpr double kFeatureScale = 0.1;
constexpr double kNoiseFloor = 0.05;

void check_slots(const std::vector<Slot>& slots, int cached) {
  if (slots.empty()) throw std::invalid_argument("denoiser: no active slots");
  const std::size_t n = slots.front().frames.size();
  if (n == 0) throw std::invalid_argument("denoiser: empty frame set");
  const int total = cached + static_cast<int>(slots.size());
  for (std::size_t a = 0; a < slots.size(); ++a) {
    const auto& s = slots[a];
    if (s.frames.size() != n) throw std::invalid_argument("denoiser: inconsistent residue count across slots");
    if (s.prev >= total) throw std::invalid_argument("denoiser: prev slot out of range");
    const int self = cached + static_cast<int>(a);
    if (s.attend.empty()) throw std::invalid_argument("denoiser: slot attends to nothing");
    bool has_self = false;
    for (std::size_t k = 0; k < s.attend.size(); ++k) {
      if (s.attend[k] < 0 || s.attend[k] >= total) throw std::invalid_argument("denoiser: attend index out of range");
      if (k > 0 && s.attend[k] <= s.attend[k - 1]) throw std::invalid_argument("denoiser: attend list not ascending");
      has_self |= s.attend[k] == self;
    }
    if (!has_self) throw std::invalid_argument("denoiser: slot must attend to its own tokens");
  }
}

const FrameSet& unified_frames(const std::vector<Slot>& slots, const KVCache* cache, int idx) {
  const int cached = cache ? cache->frames() : 0;
  return idx < cached ? cache->frame(idx) : slots[idx - cached].frames;
}

Coords centered(const FrameSet& f) { return center_rows(f.translations()); }

}  // namespace

TokenGrid embed_inputs(const std::vector<Slot>& slots, const KVCache* cache, int knn, const NoiseSchedule& sched) {
  const int cached = cache ? cache->frames() : 0;
  check_slots(slots, cached);
  const int S = static_cast<int>(slots.size());
  const int N = static_cast<int>(slots.front().frames.size());
  TokenGrid g;
  g.residues = N;
  g.tokens = Matrix::Zero(static_cast<Eigen::Index>(S) * N, kTokenFeatures);
  g.pairs.assign(S, Matrix::Zero(static_cast<Eigen::Index>(N) * N, kPairFeatures));
  g.cond = Matrix::Zero(S, kCondFeatures);
  g.residue_index.resize(N);
  std::iota(g.residue_index.begin(), g.residue_index.end(), 0);
  const int k_nn = std::min(knn, N - 1);

  for (int a = 0; a < S; ++a) {
    const Slot& slot = slots[a];
    g.frame_index.push_back(slot.frame_index);
    const Coords x = centered(slot.frames);
    std::vector<Mat3> R(N);
    for (int i = 0; i < N; ++i) R[i] = slot.frames.frames[i].rotation.matrix();
    Matrix dist(N, N);
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < N; ++j) dist(i, j) = (x.row(i) - x.row(j)).norm();

    const FrameSet* prev = slot.prev >= 0 ? &unified_frames(slots, cache, slot.prev) : nullptr;
    Coords xp;
    if (prev) xp = centered(*prev);

    // Translation noise std in scaled units, floored so clean frames stay finite.
    const double noise_unit = std::sqrt(1.0 - sched.alpha_bar(slot.tau) + kNoiseFloor * kNoiseFloor);
    for (int i = 0; i < N; ++i) {
      auto row = g.tokens.row(static_cast<Eigen::Index>(a) * N + i);
      for (int k = 0; k < 4; ++k) {
        const double f = std::pow(0.25, k);
        row(2 * k) = std::sin(i * f);
        row(2 * k + 1) = std::cos(i * f);
      }
      row(8) = i == 0 ? 1.0 : 0.0;
      row(9) = i == N - 1 ? 1.0 : 0.0;
      if (k_nn > 0) {
        std::vector<int> order;
        for (int j = 0; j < N; ++j)
          if (j != i) order.push_back(j);
        std::stable_sort(order.begin(), order.end(), [&](int p, int q) { return dist(i, p) < dist(i, q); });
        for (int n = 0; n < k_nn; ++n) {
          const double dd = dist(i, order[n]);
          for (int m = 0; m < 8; ++m) {
            const double u = (dd - (2.0 + 2.0 * m)) / 2.0;
            row(10 + m) += std::exp(-u * u);
          }
        }
      }
      const Vec3 xi = x.row(i).transpose();
      if (i + 1 < N) row.segment<3>(18) = (R[i].transpose() * (x.row(i + 1).transpose() - xi) * kFeatureScale);
      if (i > 0) row.segment<3>(21) = (R[i].transpose() * (x.row(i - 1).transpose() - xi) * kFeatureScale);
      if (i + 1 < N) row(31) = dist(i, i + 1) * kFeatureScale / noise_unit;
      if (i > 0) row(32) = dist(i, i - 1) * kFeatureScale / noise_unit;
      row(33) = std::sqrt(sched.alpha_bar(slot.tau)) / noise_unit;
      if (prev) {
        row.segment<3>(24) = R[i].transpose() * (xp.row(i).transpose() - xi) * kFeatureScale;
        const Rotation rel = slot.frames.frames[i].rotation.inverse() * prev->frames[i].rotation;
        row.segment<3>(27) = log_so3(rel);
        row(30) = 1.0;
      }
    }

    Matrix& pr = g.pairs[a];
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < N; ++j) {
        auto row = pr.row(static_cast<Eigen::Index>(i) * N + j);
        for (int m = 0; m < 8; ++m) {
          const double u = (dist(i, j) - 2.5 * m) / 2.5;
          row(m) = std::exp(-u * u);
        }
        row(8) = 0.5 * ((R[i].transpose() * R[j]).trace() - 1.0);
        row(9 + std::clamp(j - i, -4, 4) + 4) = 1.0;
      }

    if (!(slot.dt_ns > 0.0)) throw std::invalid_argument("denoiser: stride must be positive");
    const double ldt = std::log(slot.dt_ns);
    for (int k = 0; k < 8; ++k) {
      const double ft = 0.5 * std::pow(2.0, k);
      g.cond(a, 2 * k) = std::sin(slot.tau * ft);
      g.cond(a, 2 * k + 1) = std::cos(slot.tau * ft);
      const double fd = 0.25 * std::pow(2.0, 0.5 * k);
      g.cond(a, 16 + 2 * k) = std::sin(ldt * fd);
      g.cond(a, 16 + 2 * k + 1) = std::cos(ldt * fd);
    }
  }
  return g;
}

// ---- building blocks -------------------------------------------------------------

double silu(double x) { return x / (1.0 + std::exp(-x)); }

double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

static Matrix silu_m(const Matrix& x) { return x.unaryExpr([](double v) { return silu(v); }); }
static Matrix silu_grad_m(const Matrix& x) { return x.unaryExpr([](double v) { return silu_grad(v); }); }

static void rotate_half(double* v, int half, double index, double base, double sign) {
  for (int m = 0; m < half / 2; ++m) {
    const double theta = std::pow(base, -2.0 * m / half);
    const double ang = sign * index * theta;
    const double c = std::cos(ang), s = std::sin(ang);
    const double a = v[2 * m], b = v[2 * m + 1];
    v[2 * m] = c * a - s * b;
    v[2 * m + 1] = s * a + c * b;
  }
}

Vector rope2d(const Vector& v, int residue, int frame, double base) {
  if (v.size() % 4 != 0) throw std::invalid_argument("rope2d: head dimension must be divisible by 4");
  Vector out = v;
  const int half = static_cast<int>(v.size()) / 2;
  rotate_half(out.data(), half, residue, base, 1.0);
  rotate_half(out.data() + half, half, frame, base, 1.0);
  return out;
}

void rope_rows(Matrix& m, const std::vector<int>& residue, const std::vector<int>& frame, int heads, double base,
               bool inverse) {
  const int dh = static_cast<int>(m.cols()) / heads;
  const int half = dh / 2;
  const double sign = inverse ? -1.0 : 1.0;
  Vector buf(dh);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (int h = 0; h < heads; ++h) {
      for (int c = 0; c < dh; ++c) buf(c) = m(r, h * dh + c);
      rotate_half(buf.data(), half, residue[r], base, sign);
      rotate_half(buf.data() + half, half, frame[r], base, sign);
      for (int c = 0; c < dh; ++c) m(r, h * dh + c) = buf(c);
    }
  }
}

LayerNormResult layer_norm(const Matrix& x, double eps) {
  LayerNormResult r;
  r.y.resize(x.rows(), x.cols());
  r.rstd.resize(x.rows());
  const double n = static_cast<double>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).sum() / n;
    const double var = (x.row(i).array() - mu).square().sum() / n;
    const double rs = 1.0 / std::sqrt(var + eps);
    r.rstd(i) = rs;
    r.y.row(i) = (x.row(i).array() - mu) * rs;
  }
  return r;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& y, const Vector& rstd) {
  Matrix dx(dy.rows(), dy.cols());
  const double n = static_cast<double>(dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double mdy = dy.row(i).sum() / n;
    const double mdyy = dy.row(i).dot(y.row(i)) / n;
    dx.row(i) = rstd(i) * (dy.row(i).array() - mdy - y.row(i).array() * mdyy);
  }
  return dx;
}

Matrix adaln(const Matrix& x, const Matrix& shift, const Matrix& scale, double eps) {
  const auto ln = layer_norm(x, eps);
  return (ln.y.array() * (1.0 + scale.array()) + shift.array()).matrix();
}

static Matrix softmax_rows(const Matrix& logits) {
  Matrix a(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    a.row(i) = (logits.row(i).array() - mx).exp();
    a.row(i) /= a.row(i).sum();
  }
  return a;
}

AttentionResult masked_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                 const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>& allowed,
                                 const Matrix& bias) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  AttentionResult r;
  r.weights = Matrix::Zero(q.rows(), k.rows());
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    Vector logit(k.rows());
    for (Eigen::Index j = 0; j < k.rows(); ++j) {
      if (!allowed(i, j)) continue;
      logit(j) = q.row(i).dot(k.row(j)) * inv + bias(i, j);
      mx = std::max(mx, logit(j));
    }
    if (!std::isfinite(mx)) throw std::invalid_argument("masked_attention: query row has no permitted key");
    double sum = 0.0;
    for (Eigen::Index j = 0; j < k.rows(); ++j) {
      if (!allowed(i, j)) continue;
      r.weights(i, j) = std::exp(logit(j) - mx);
      sum += r.weights(i, j);
    }
    r.weights.row(i) /= sum;
  }
  r.out = r.weights * v;
  return r;
}

Matrix edge_transition(const Matrix& s, const Matrix& z, const EdgeWeights& w) {
  const Eigen::Index n = s.rows();
  const Eigen::Index p = w.wp.cols();
  const Matrix P = s * w.wp;
  Matrix inp(n * n, 2 * p);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      inp.row(i * n + j).head(p) = P.row(i) + P.row(j);
      inp.row(i * n + j).tail(p) = z.row(i * n + j);
    }
  Matrix e1 = inp * w.w1;
  e1.rowwise() += w.b1.row(0);
  Matrix e2 = silu_m(e1) * w.w2;
  e2.rowwise() += w.b2.row(0);
  return z + e2;
}

static Vec3 unit_or_zero(const Vec3& v) {
  const double n = v.norm();
  return n > 0.0 ? Vec3(v / n) : Vec3::Zero();
}

BackboneScore backbone_update(const Matrix& u, const FrameSet& frames, double c_trans, double c_rot) {
  const Eigen::Index n = u.rows();
  BackboneScore out{Coords(n, 3), Coords(n, 3)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3 local = u.row(i).head<3>().transpose();
    out.trans.row(i) = c_trans * frames.frames[i].rotation.apply(local).transpose();
    out.rot.row(i) = c_rot * u.row(i).segment<3>(3);
    if (u.cols() >= kHeadOutputs) {
      const Vec3 xi = frames.frames[i].translation;
      if (i + 1 < n) out.trans.row(i) += c_trans * u(i, 6) * unit_or_zero(frames.frames[i + 1].translation - xi).transpose();
      if (i > 0) out.trans.row(i) += c_trans * u(i, 7) * unit_or_zero(frames.frames[i - 1].translation - xi).transpose();
    }
  }
  out.trans = center_rows(out.trans);
  return out;
}

// ---- model ---------------------------------------------------------------------------

Denoiser::Denoiser(DenoiserConfig cfg, NoiseSchedule schedule) : cfg_(cfg), schedule_(schedule) {
  cfg_.validate();
  schedule_.validate();
  build_layout();
}

void Denoiser::build_layout() {
  const int d = cfg_.model_dim, p = cfg_.pair_dim, H = cfg_.heads;
  embed_w_ = params_.add("embed.w", kTokenFeatures, d);
  embed_b_ = params_.add("embed.b", 1, d);
  // Linear readout from the raw invariant features straight to the head.
  skip_w_ = params_.add("head.skip", kTokenFeatures, kHeadOutputs);
  pair_w_ = params_.add("pair.w", kPairFeatures, p);
  pair_b_ = params_.add("pair.b", 1, p);
  cond1_w_ = params_.add("cond.w1", kCondFeatures, d);
  cond1_b_ = params_.add("cond.b1", 1, d);
  cond2_w_ = params_.add("cond.w2", d, d);
  cond2_b_ = params_.add("cond.b2", 1, d);
  for (int l = 0; l < cfg_.total_layers(); ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    LayerIdx li{};
    li.ada1_w = params_.add(pre + "ada1.w", d, 3 * d);
    li.ada1_b = params_.add(pre + "ada1.b", 1, 3 * d);
    li.wq = params_.add(pre + "attn.wq", d, d);
    li.wk = params_.add(pre + "attn.wk", d, d);
    li.wv = params_.add(pre + "attn.wv", d, d);
    li.wo = params_.add(pre + "attn.wo", d, d);
    li.bo = params_.add(pre + "attn.bo", 1, d);
    li.wz = params_.add(pre + "attn.pair_bias", p, H);
    li.ada2_w = params_.add(pre + "ada2.w", d, 3 * d);
    li.ada2_b = params_.add(pre + "ada2.b", 1, 3 * d);
    li.f1_w = params_.add(pre + "ffn.w1", d, 2 * d);
    li.f1_b = params_.add(pre + "ffn.b1", 1, 2 * d);
    li.f2_w = params_.add(pre + "ffn.w2", 2 * d, d);
    li.f2_b = params_.add(pre + "ffn.b2", 1, d);
    layer_idx_.push_back(li);
  }
  for (int b = 0; b < cfg_.blocks; ++b) {
    const std::string pre = "block" + std::to_string(b) + ".";
    BlockIdx bi{};
    bi.h1_w = params_.add(pre + "head.w1", d, d);
    bi.h1_b = params_.add(pre + "head.b1", 1, d);
    bi.h2_w = params_.add(pre + "head.w2", d, kHeadOutputs);
    bi.h2_b = params_.add(pre + "head.b2", 1, kHeadOutputs);
    if (b + 1 < cfg_.blocks) {
      bi.e_p = params_.add(pre + "edge.wp", d, p);
      bi.e1_w = params_.add(pre + "edge.w1", 2 * p, p);
      bi.e1_b = params_.add(pre + "edge.b1", 1, p);
      bi.e2_w = params_.add(pre + "edge.w2", p, p);
      bi.e2_b = params_.add(pre + "edge.b2", 1, p);
    }
    block_idx_.push_back(bi);
  }
}

void Denoiser::initialize(Rng& rng, InitStyle style) {
  for (std::size_t t = 0; t < params_.size(); ++t) {
    Matrix& m = params_[t];
    const std::string& name = params_.name(t);
    const bool is_bias = m.rows() == 1 && name.find(".b") != std::string::npos;
    double std_dev = 1.0 / std::sqrt(static_cast<double>(m.rows()));
    if (style == InitStyle::training) {
      if (is_bias || name.find("ada") != std::string::npos || name == "head.skip") std_dev = 0.0;
      if (name.find("head.w2") != std::string::npos || name.find("edge.w2") != std::string::npos) std_dev *= 0.1;
    } else {
      std_dev = is_bias ? 0.1 : 0.7 * std_dev;
      // Skip features grow like 1/noise at small tau; keep the readout small.
      if (name == "head.skip") std_dev *= 0.01;
    }
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = std_dev * rng.normal();
  }
}

double Denoiser::trans_scale(double tau) const { return 1.0 / std::sqrt(1.0 - schedule_.alpha_bar(tau)); }

double Denoiser::rot_scale(double tau) const { return schedule_.igso3()->score_norm(schedule_.sigma(tau)); }

DenoiserOutput Denoiser::forward(const std::vector<Slot>& slots, const KVCache* cache, ForwardTape* tape) const {
  const TokenGrid grid = embed_inputs(slots, cache, cfg_.knn, schedule_);
  return forward(slots, grid, cache, tape);
}

namespace {

// Adds per-slot rows of `mod` (S x d) to every token of the slot.
Matrix broadcast_slots(const Matrix& mod, int n) {
  Matrix out(mod.rows() * n, mod.cols());
  for (Eigen::Index a = 0; a < mod.rows(); ++a)
    for (int i = 0; i < n; ++i) out.row(a * n + i) = mod.row(a);
  return out;
}

Matrix reduce_slots(const Matrix& tok, int n) {
  Matrix out = Matrix::Zero(tok.rows() / n, tok.cols());
  for (Eigen::Index t = 0; t < tok.rows(); ++t) out.row(t / n) += tok.row(t);
  return out;
}

Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

}  // namespace

DenoiserOutput Denoiser::forward(const std::vector<Slot>& slots, const TokenGrid& grid, const KVCache* cache,
                                 ForwardTape* tape) const {
  const int C = cache ? cache->frames() : 0;
  check_slots(slots, C);
  const int S = static_cast<int>(slots.size());
  const int N = grid.residues;
  const int T = S * N;
  const int d = cfg_.model_dim, H = cfg_.heads, dh = cfg_.head_dim(), p = cfg_.pair_dim;
  if (cache && (cache->residues() != N || cache->layers() != cfg_.total_layers() || cache->model_dim() != d))
    throw std::invalid_argument("denoiser: cache shape does not match model");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const ParamSet& P = params_;

  std::vector<int> res(T), fr(T);
  for (int t = 0; t < T; ++t) {
    res[t] = t % N;
    fr[t] = slots[t / N].frame_index;
  }

  if (tape) {
    tape->slots = slots;
    tape->grid = grid;
    tape->layers.assign(cfg_.total_layers(), {});
    tape->heads.assign(cfg_.blocks, {});
    tape->edges.assign(cfg_.blocks, {});
    tape->z.assign(cfg_.blocks, {});
  }

  DenoiserOutput out;
  Matrix x = affine(grid.tokens, P[embed_w_], P[embed_b_]);
  if (tape) tape->x0 = x;
  std::vector<Matrix> z(S);
  for (int a = 0; a < S; ++a) z[a] = affine(grid.pairs[a], P[pair_w_], P[pair_b_]);

  const Matrix a1 = affine(grid.cond, P[cond1_w_], P[cond1_b_]);
  const Matrix h1 = silu_m(a1);
  const Matrix cvec = affine(h1, P[cond2_w_], P[cond2_b_]);
  const Matrix sc = silu_m(cvec);
  if (tape) {
    tape->cond_a1 = a1;
    tape->cond_h1 = h1;
    tape->cond_c = cvec;
    tape->cond_sc = sc;
  }

  Matrix head_sum = grid.tokens * P[skip_w_];
  ForwardTape::Layer scratch;
  for (int b = 0; b < cfg_.blocks; ++b) {
    if (tape) tape->z[b] = z;
    for (int j = 0; j < cfg_.st_layers; ++j) {
      const int l = b * cfg_.st_layers + j;
      const LayerIdx& li = layer_idx_[l];
      ForwardTape::Layer& L = tape ? tape->layers[l] : scratch;
      L.x_in = x;
      L.mod1 = affine(sc, P[li.ada1_w], P[li.ada1_b]);
      const Matrix mod1 = broadcast_slots(L.mod1, N);
      auto ln1 = layer_norm(x, cfg_.ln_eps);
      L.ln1 = std::move(ln1.y);
      L.rstd1 = std::move(ln1.rstd);
      L.m1 = (L.ln1.array() * (1.0 + mod1.middleCols(d, d).array()) + mod1.leftCols(d).array()).matrix();
      L.q = L.m1 * P[li.wq];
      L.k = L.m1 * P[li.wk];
      L.v = L.m1 * P[li.wv];
      out.keys.push_back(L.k);
      out.values.push_back(L.v);
      L.qr = L.q;
      L.kr = L.k;
      if (cfg_.rope_2d) {
        rope_rows(L.qr, res, fr, H, cfg_.rope_base);
        rope_rows(L.kr, res, fr, H, cfg_.rope_base);
      }
      L.o = Matrix::Zero(T, d);
      L.weights.assign(S, std::vector<Matrix>(H));
      for (int a = 0; a < S; ++a) {
        const auto& keys = slots[a].attend;
        const int M = static_cast<int>(keys.size()) * N;
        Matrix kc(M, d), vc(M, d);
        int own = -1;
        for (std::size_t u = 0; u < keys.size(); ++u) {
          const int ks = keys[u];
          const Eigen::Index off = static_cast<Eigen::Index>(u) * N;
          if (ks < C) {
            Matrix kk = cache->keys(l, ks);
            if (cfg_.rope_2d) {
              std::vector<int> cf(N, cache->frame_index(ks));
              rope_rows(kk, std::vector<int>(res.begin(), res.begin() + N), cf, H, cfg_.rope_base);
            }
            kc.middleRows(off, N) = kk;
            vc.middleRows(off, N) = cache->values(l, ks);
          } else {
            const int as = ks - C;
            kc.middleRows(off, N) = L.kr.middleRows(static_cast<Eigen::Index>(as) * N, N);
            vc.middleRows(off, N) = L.v.middleRows(static_cast<Eigen::Index>(as) * N, N);
            if (as == a) own = static_cast<int>(off);
          }
        }
        const Matrix zb = z[a] * P[li.wz];  // N^2 x H
        for (int h = 0; h < H; ++h) {
          const auto qh = L.qr.block(static_cast<Eigen::Index>(a) * N, h * dh, N, dh);
          Matrix logits = qh * kc.middleCols(h * dh, dh).transpose() * inv_sqrt;
          for (int i = 0; i < N; ++i)
            for (int jj = 0; jj < N; ++jj) logits(i, own + jj) += zb(static_cast<Eigen::Index>(i) * N + jj, h);
          Matrix A = softmax_rows(logits);
          L.o.block(static_cast<Eigen::Index>(a) * N, h * dh, N, dh) = A * vc.middleCols(h * dh, dh);
          L.weights[a][h] = std::move(A);
        }
      }
      L.attn = affine(L.o, P[li.wo], P[li.bo]);
      L.x_mid = x + ((1.0 + mod1.rightCols(d).array()) * L.attn.array()).matrix();

      L.mod2 = affine(sc, P[li.ada2_w], P[li.ada2_b]);
      const Matrix mod2 = broadcast_slots(L.mod2, N);
      auto ln2 = layer_norm(L.x_mid, cfg_.ln_eps);
      L.ln2 = std::move(ln2.y);
      L.rstd2 = std::move(ln2.rstd);
      L.m2 = (L.ln2.array() * (1.0 + mod2.middleCols(d, d).array()) + mod2.leftCols(d).array()).matrix();
      L.f1 = affine(L.m2, P[li.f1_w], P[li.f1_b]);
      L.g1 = silu_m(L.f1);
      L.f2 = affine(L.g1, P[li.f2_w], P[li.f2_b]);
      x = L.x_mid + ((1.0 + mod2.rightCols(d).array()) * L.f2.array()).matrix();
    }

    const BlockIdx& bi = block_idx_[b];
    {
      auto ln = layer_norm(x, cfg_.ln_eps);
      Matrix u1 = affine(ln.y, P[bi.h1_w], P[bi.h1_b]);
      Matrix uh = silu_m(u1);
      head_sum += affine(uh, P[bi.h2_w], P[bi.h2_b]);
      if (tape) tape->heads[b] = {ln.y, u1, uh, ln.rstd};
    }
    if (b + 1 < cfg_.blocks) {
      ForwardTape::Edge* E = tape ? &tape->edges[b] : nullptr;
      if (E) {
        E->p.resize(S);
        E->inp.resize(S);
        E->e1.resize(S);
        E->eh.resize(S);
      }
      for (int a = 0; a < S; ++a) {
        const Matrix Pm = x.middleRows(static_cast<Eigen::Index>(a) * N, N) * P[bi.e_p];
        Matrix inp(static_cast<Eigen::Index>(N) * N, 2 * p);
        for (int i = 0; i < N; ++i)
          for (int jj = 0; jj < N; ++jj) {
            const Eigen::Index r = static_cast<Eigen::Index>(i) * N + jj;
            inp.row(r).head(p) = Pm.row(i) + Pm.row(jj);
            inp.row(r).tail(p) = z[a].row(r);
          }
        Matrix e1 = affine(inp, P[bi.e1_w], P[bi.e1_b]);
        Matrix eh = silu_m(e1);
        z[a] += affine(eh, P[bi.e2_w], P[bi.e2_b]);
        if (E) {
          E->p[a] = Pm;
          E->inp[a] = std::move(inp);
          E->e1[a] = std::move(e1);
          E->eh[a] = std::move(eh);
        }
      }
    }
  }
  if (tape) tape->head_sum = head_sum;
  out.head = head_sum;

  out.scores.resize(S);
  for (int a = 0; a < S; ++a) {
    if (!slots[a].output) continue;
    const Matrix u = head_sum.middleRows(static_cast<Eigen::Index>(a) * N, N);
    auto bs = backbone_update(u, slots[a].frames, trans_scale(slots[a].tau), rot_scale(slots[a].tau));
    out.scores[a] = {bs.trans, bs.rot};
  }
  return out;
}

DenoiserGradients Denoiser::backward(const ForwardTape& tape, const std::vector<FrameScore>& grad_scores) const {
  const auto& slots = tape.slots;
  const int S = static_cast<int>(slots.size());
  const int N = tape.grid.residues;
  const int T = S * N;
  const int d = cfg_.model_dim, H = cfg_.heads, dh = cfg_.head_dim(), p = cfg_.pair_dim;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  if (static_cast<int>(grad_scores.size()) != S) throw std::invalid_argument("backward: one gradient per slot");
  for (const auto& s : slots)
    for (int k : s.attend)
      if (k < 0 || k >= S) throw std::invalid_argument("backward: tape must come from a cache-free pass");
  const ParamSet& P = params_;
  DenoiserGradients G;
  G.params = params_.zeros_like();
  ParamSet& dP = G.params;

  std::vector<int> res(T), fr(T);
  for (int t = 0; t < T; ++t) {
    res[t] = t % N;
    fr[t] = slots[t / N].frame_index;
  }

  // Score heads.
  Matrix dU = Matrix::Zero(T, kHeadOutputs);
  for (int a = 0; a < S; ++a) {
    if (!slots[a].output) continue;
    const FrameScore& gs = grad_scores[a];
    if (gs.trans.rows() != N || gs.rot.rows() != N) throw std::invalid_argument("backward: gradient shape mismatch");
    const Coords dtr = center_rows(gs.trans);
    const double ct = trans_scale(slots[a].tau), cr = rot_scale(slots[a].tau);
    for (int i = 0; i < N; ++i) {
      const Mat3 R = slots[a].frames.frames[i].rotation.matrix();
      dU.row(static_cast<Eigen::Index>(a) * N + i).head<3>() = ct * (R.transpose() * dtr.row(i).transpose());
      dU.row(static_cast<Eigen::Index>(a) * N + i).segment<3>(3) = cr * gs.rot.row(i);
      const Vec3 xi = slots[a].frames.frames[i].translation;
      if (i + 1 < N)
        dU(static_cast<Eigen::Index>(a) * N + i, 6) =
            ct * unit_or_zero(slots[a].frames.frames[i + 1].translation - xi).dot(dtr.row(i).transpose());
      if (i > 0)
        dU(static_cast<Eigen::Index>(a) * N + i, 7) =
            ct * unit_or_zero(slots[a].frames.frames[i - 1].translation - xi).dot(dtr.row(i).transpose());
    }
  }

  Matrix dx = Matrix::Zero(T, d);
  std::vector<Matrix> dz(S, Matrix::Zero(static_cast<Eigen::Index>(N) * N, p));
  Matrix dsc = Matrix::Zero(S, d);

  for (int b = cfg_.blocks - 1; b >= 0; --b) {
    const BlockIdx& bi = block_idx_[b];
    // x at the end of this block feeds the head and the edge transition.
    const Matrix& x_end = (b + 1 < cfg_.blocks) ? tape.layers[(b + 1) * cfg_.st_layers].x_in : Matrix();
    if (b + 1 < cfg_.blocks) {
      const auto& E = tape.edges[b];
      for (int a = 0; a < S; ++a) {
        const Matrix& de2 = dz[a];
        dP[bi.e2_w] += E.eh[a].transpose() * de2;
        dP[bi.e2_b] += de2.colwise().sum();
        const Matrix de1 = ((de2 * P[bi.e2_w].transpose()).array() * silu_grad_m(E.e1[a]).array()).matrix();
        dP[bi.e1_w] += E.inp[a].transpose() * de1;
        dP[bi.e1_b] += de1.colwise().sum();
        const Matrix dinp = de1 * P[bi.e1_w].transpose();
        Matrix dPm = Matrix::Zero(N, p);
        for (int i = 0; i < N; ++i)
          for (int jj = 0; jj < N; ++jj) {
            const Eigen::Index r = static_cast<Eigen::Index>(i) * N + jj;
            dPm.row(i) += dinp.row(r).head(p);
            dPm.row(jj) += dinp.row(r).head(p);
          }
        dz[a] += dinp.rightCols(p);
        const auto xs = x_end.middleRows(static_cast<Eigen::Index>(a) * N, N);
        dP[bi.e_p] += xs.transpose() * dPm;
        dx.middleRows(static_cast<Eigen::Index>(a) * N, N) += dPm * P[bi.e_p].transpose();
      }
    }
    {
      const auto& Hd = tape.heads[b];
      dP[bi.h2_w] += Hd.uh.transpose() * dU;
      dP[bi.h2_b] += dU.colwise().sum();
      const Matrix du1 = ((dU * P[bi.h2_w].transpose()).array() * silu_grad_m(Hd.u1).array()).matrix();
      dP[bi.h1_w] += Hd.ln.transpose() * du1;
      dP[bi.h1_b] += du1.colwise().sum();
      dx += layer_norm_backward(du1 * P[bi.h1_w].transpose(), Hd.ln, Hd.rstd);
    }

    for (int j = cfg_.st_layers - 1; j >= 0; --j) {
      const int l = b * cfg_.st_layers + j;
      const LayerIdx& li = layer_idx_[l];
      const auto& L = tape.layers[l];
      const Matrix mod1 = broadcast_slots(L.mod1, N);
      const Matrix mod2 = broadcast_slots(L.mod2, N);

      // x = x_mid + (1 + gate2) * f2
      Matrix dx_mid = dx;
      const Matrix df2 = (dx.array() * (1.0 + mod2.rightCols(d).array())).matrix();
      Matrix dmod2_tok(T, 3 * d);
      dmod2_tok.rightCols(d) = (dx.array() * L.f2.array()).matrix();
      dP[li.f2_w] += L.g1.transpose() * df2;
      dP[li.f2_b] += df2.colwise().sum();
      const Matrix df1 = ((df2 * P[li.f2_w].transpose()).array() * silu_grad_m(L.f1).array()).matrix();
      dP[li.f1_w] += L.m2.transpose() * df1;
      dP[li.f1_b] += df1.colwise().sum();
      const Matrix dm2 = df1 * P[li.f1_w].transpose();
      dmod2_tok.leftCols(d) = dm2;
      dmod2_tok.middleCols(d, d) = (dm2.array() * L.ln2.array()).matrix();
      const Matrix dln2 = (dm2.array() * (1.0 + mod2.middleCols(d, d).array())).matrix();
      dx_mid += layer_norm_backward(dln2, L.ln2, L.rstd2);
      const Matrix dmod2 = reduce_slots(dmod2_tok, N);
      dP[li.ada2_w] += tape.cond_sc.transpose() * dmod2;
      dP[li.ada2_b] += dmod2.colwise().sum();
      dsc += dmod2 * P[li.ada2_w].transpose();

      // x_mid = x_in + (1 + gate1) * attn
      Matrix dx_in = dx_mid;
      const Matrix dattn = (dx_mid.array() * (1.0 + mod1.rightCols(d).array())).matrix();
      Matrix dmod1_tok(T, 3 * d);
      dmod1_tok.rightCols(d) = (dx_mid.array() * L.attn.array()).matrix();
      dP[li.wo] += L.o.transpose() * dattn;
      dP[li.bo] += dattn.colwise().sum();
      const Matrix dO = dattn * P[li.wo].transpose();

      Matrix dqr = Matrix::Zero(T, d), dkr = Matrix::Zero(T, d), dv = Matrix::Zero(T, d);
      for (int a = 0; a < S; ++a) {
        const auto& keys = slots[a].attend;
        const int M = static_cast<int>(keys.size()) * N;
        Matrix kc(M, d), vc(M, d);
        int own = -1;
        for (std::size_t u = 0; u < keys.size(); ++u) {
          const Eigen::Index off = static_cast<Eigen::Index>(u) * N;
          kc.middleRows(off, N) = L.kr.middleRows(static_cast<Eigen::Index>(keys[u]) * N, N);
          vc.middleRows(off, N) = L.v.middleRows(static_cast<Eigen::Index>(keys[u]) * N, N);
          if (keys[u] == a) own = static_cast<int>(off);
        }
        Matrix dkc = Matrix::Zero(M, d), dvc = Matrix::Zero(M, d);
        Matrix dbias(static_cast<Eigen::Index>(N) * N, H);
        for (int h = 0; h < H; ++h) {
          const Matrix& A = L.weights[a][h];
          const auto doh = dO.block(static_cast<Eigen::Index>(a) * N, h * dh, N, dh);
          const Matrix dA = doh * vc.middleCols(h * dh, dh).transpose();
          dvc.middleCols(h * dh, dh) += A.transpose() * doh;
          const Vector rs = (dA.array() * A.array()).rowwise().sum();
          const Matrix dlog = (A.array() * (dA.colwise() - rs).array()).matrix();
          dqr.block(static_cast<Eigen::Index>(a) * N, h * dh, N, dh) += dlog * kc.middleCols(h * dh, dh) * inv_sqrt;
          const auto qh = L.qr.block(static_cast<Eigen::Index>(a) * N, h * dh, N, dh);
          dkc.middleCols(h * dh, dh) += dlog.transpose() * qh * inv_sqrt;
          for (int i = 0; i < N; ++i)
            for (int jj = 0; jj < N; ++jj) dbias(static_cast<Eigen::Index>(i) * N + jj, h) = dlog(i, own + jj);
        }
        dP[li.wz] += tape.z[b][a].transpose() * dbias;
        dz[a] += dbias * P[li.wz].transpose();
        for (std::size_t u = 0; u < keys.size(); ++u) {
          const Eigen::Index off = static_cast<Eigen::Index>(u) * N;
          dkr.middleRows(static_cast<Eigen::Index>(keys[u]) * N, N) += dkc.middleRows(off, N);
          dv.middleRows(static_cast<Eigen::Index>(keys[u]) * N, N) += dvc.middleRows(off, N);
        }
      }
      if (cfg_.rope_2d) {
        rope_rows(dqr, res, fr, H, cfg_.rope_base, true);
        rope_rows(dkr, res, fr, H, cfg_.rope_base, true);
      }
      dP[li.wq] += L.m1.transpose() * dqr;
      dP[li.wk] += L.m1.transpose() * dkr;
      dP[li.wv] += L.m1.transpose() * dv;
      const Matrix dm1 = dqr * P[li.wq].transpose() + dkr * P[li.wk].transpose() + dv * P[li.wv].transpose();
      dmod1_tok.leftCols(d) = dm1;
      dmod1_tok.middleCols(d, d) = (dm1.array() * L.ln1.array()).matrix();
      const Matrix dln1 = (dm1.array() * (1.0 + mod1.middleCols(d, d).array())).matrix();
      dx_in += layer_norm_backward(dln1, L.ln1, L.rstd1);
      const Matrix dmod1 = reduce_slots(dmod1_tok, N);
      dP[li.ada1_w] += tape.cond_sc.transpose() * dmod1;
      dP[li.ada1_b] += dmod1.colwise().sum();
      dsc += dmod1 * P[li.ada1_w].transpose();
      dx = std::move(dx_in);
    }
  }

  dP[embed_w_] += tape.grid.tokens.transpose() * dx;
  dP[embed_b_] += dx.colwise().sum();
  G.tokens = dx * P[embed_w_].transpose() + dU * P[skip_w_].transpose();
  dP[skip_w_] += tape.grid.tokens.transpose() * dU;
  G.pairs.resize(S);
  for (int a = 0; a < S; ++a) {
    dP[pair_w_] += tape.grid.pairs[a].transpose() * dz[a];
    dP[pair_b_] += dz[a].colwise().sum();
    G.pairs[a] = dz[a] * P[pair_w_].transpose();
  }
  const Matrix dc = (dsc.array() * silu_grad_m(tape.cond_c).array()).matrix();
  dP[cond2_w_] += tape.cond_h1.transpose() * dc;
  dP[cond2_b_] += dc.colwise().sum();
  const Matrix da1 = ((dc * P[cond2_w_].transpose()).array() * silu_grad_m(tape.cond_a1).array()).matrix();
  dP[cond1_w_] += tape.grid.cond.transpose() * da1;
  dP[cond1_b_] += da1.colwise().sum();
  G.cond = da1 * P[cond1_w_].transpose();
  return G;
}

}  // namespace stmd
