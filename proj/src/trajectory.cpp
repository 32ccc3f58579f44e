#include "stmd/trajectory.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/SVD>

namespace stmd {

Coords FrameSet::translations() const {
  Coords t(frames.size(), 3);
  for (std::size_t i = 0; i < frames.size(); ++i) t.row(i) = frames[i].translation.transpose();
  return t;
}

void FrameSet::set_translations(const Coords& t) {
  if (static_cast<std::size_t>(t.rows()) != frames.size())
    throw std::invalid_argument("set_translations: row count does not match residue count");
  for (std::size_t i = 0; i < frames.size(); ++i) frames[i].translation = t.row(i).transpose();
}

Vec3 FrameSet::centroid() const {
  Vec3 c = Vec3::Zero();
  for (const auto& f : frames) c += f.translation;
  return frames.empty() ? c : Vec3(c / static_cast<double>(frames.size()));
}

FrameSet FrameSet::transformed(const RigidFrame& g) const {
  FrameSet out(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) out.frames[i] = compose(g, frames[i]);
  return out;
}

Trajectory::Trajectory(std::vector<FrameSet> frames, double uniform_stride_ns)
    : frames_(std::move(frames)), uniform_(uniform_stride_ns) {
  validate();
}

Trajectory::Trajectory(std::vector<FrameSet> frames, std::vector<double> strides_ns)
    : frames_(std::move(frames)), per_frame_(std::move(strides_ns)) {
  if (!frames_.empty() && per_frame_.size() != frames_.size() - 1)
    throw std::invalid_argument("Trajectory: need L-1 strides");
  uniform_ = per_frame_.empty() ? 1.0 : per_frame_.front();
  validate();
}

void Trajectory::validate() const {
  if (!(uniform_ > 0.0)) throw std::invalid_argument("Trajectory: stride must be positive");
  for (double s : per_frame_)
    if (!(s > 0.0)) throw std::invalid_argument("Trajectory: stride must be positive");
  for (const auto& f : frames_)
    if (f.size() != frames_.front().size())
      throw std::invalid_argument("Trajectory: residue count differs between frames");
}

void Trajectory::append(FrameSet f, double stride_ns) {
  if (!frames_.empty() && f.size() != residues())
    throw std::invalid_argument("Trajectory::append: residue count mismatch");
  if (!(stride_ns > 0.0)) throw std::invalid_argument("Trajectory::append: stride must be positive");
  if (frames_.empty()) {
    uniform_ = stride_ns;
  } else if (per_frame_.empty() && stride_ns != uniform_) {
    per_frame_.assign(frames_.size() - 1, uniform_);
    per_frame_.push_back(stride_ns);
  } else if (!per_frame_.empty()) {
    per_frame_.push_back(stride_ns);
  }
  frames_.push_back(std::move(f));
}

Eigen::MatrixXd Trajectory::flattened_translations() const {
  const std::size_t n = residues();
  Eigen::MatrixXd out(frames_.size(), 3 * n);
  for (std::size_t l = 0; l < frames_.size(); ++l)
    for (std::size_t i = 0; i < n; ++i)
      out.block<1, 3>(l, 3 * i) = frames_[l].frames[i].translation.transpose();
  return out;
}

double rmsd(const FrameSet& a, const FrameSet& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("rmsd: residue counts differ (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  if (a.size() == 0) return 0.0;
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    ss += (a.frames[i].translation - b.frames[i].translation).squaredNorm();
  return std::sqrt(ss / static_cast<double>(a.size()));
}

Superposition kabsch(const Coords& mobile, const Coords& target) {
  if (mobile.rows() != target.rows()) throw std::invalid_argument("kabsch: point counts differ");
  Superposition out;
  const Eigen::Index n = mobile.rows();
  auto residual = [&](const RigidFrame& g) {
    double ss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      ss += (g.apply(mobile.row(i).transpose()) - target.row(i).transpose()).squaredNorm();
    return n > 0 ? std::sqrt(ss / static_cast<double>(n)) : 0.0;
  };
  if (n < 3) {
    out.degenerate = true;
    out.rmsd = residual(out.transform);
    return out;
  }
  const Eigen::RowVector3d cm = mobile.colwise().mean();
  const Eigen::RowVector3d ct = target.colwise().mean();
  const Coords pm = mobile.rowwise() - cm;
  const Coords pt = target.rowwise() - ct;

  Eigen::JacobiSVD<Eigen::MatrixXd> shape(pm, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto sv = shape.singularValues();
  if (sv(0) <= 0.0 || sv(1) <= 1e-8 * sv(0)) {
    out.degenerate = true;
    out.rmsd = residual(out.transform);
    return out;
  }

  const Mat3 h = pm.transpose() * pt;
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  const Mat3 r = svd.matrixV() * d * svd.matrixU().transpose();
  out.transform.rotation = Rotation::from_matrix(r);
  out.transform.translation = ct.transpose() - out.transform.rotation.apply(cm.transpose());
  out.rmsd = residual(out.transform);
  return out;
}

AlignedTrajectory kabsch_align(const Trajectory& mobile, const FrameSet& reference) {
  if (mobile.length() == 0) throw std::invalid_argument("kabsch_align: empty trajectory");
  if (mobile.residues() != reference.size())
    throw std::invalid_argument("kabsch_align: residue counts differ");
  AlignedTrajectory out;
  out.superposition = kabsch(mobile[0].translations(), reference.translations());
  std::vector<FrameSet> frames;
  frames.reserve(mobile.length());
  for (const auto& f : mobile.frames()) frames.push_back(f.transformed(out.superposition.transform));
  out.trajectory = mobile.has_uniform_stride() ? Trajectory(std::move(frames), mobile.uniform_stride_ns())
                                               : Trajectory(std::move(frames), mobile.per_frame_strides_ns());
  return out;
}

}  // namespace stmd
