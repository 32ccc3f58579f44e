#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Core>

#include "stmd/se3.hpp"

namespace stmd {

/// N x 3 coordinate block, one row per residue.
using Coords = Eigen::Matrix<double, Eigen::Dynamic, 3>;

/// One conformation: a rigid frame per residue.
struct FrameSet {
  std::vector<RigidFrame> frames;

  FrameSet() = default;
  explicit FrameSet(std::vector<RigidFrame> f) : frames(std::move(f)) {}
  explicit FrameSet(std::size_t n) : frames(n) {}

  std::size_t size() const { return frames.size(); }
  Coords translations() const;
  void set_translations(const Coords& t);
  Vec3 centroid() const;
  /// Applies g to every residue frame: x -> g o x.
  FrameSet transformed(const RigidFrame& g) const;
};

/// Ordered frames with the physical time between consecutive frames.
class Trajectory {
 public:
  Trajectory() = default;
  Trajectory(std::vector<FrameSet> frames, double uniform_stride_ns);
  Trajectory(std::vector<FrameSet> frames, std::vector<double> strides_ns);

  std::size_t length() const { return frames_.size(); }
  std::size_t residues() const { return frames_.empty() ? 0 : frames_.front().size(); }
  const FrameSet& operator[](std::size_t i) const { return frames_[i]; }
  FrameSet& operator[](std::size_t i) { return frames_[i]; }
  const std::vector<FrameSet>& frames() const { return frames_; }

  bool has_uniform_stride() const { return per_frame_.empty(); }
  double uniform_stride_ns() const { return uniform_; }
  /// Stride between frame i and i+1.
  double stride_ns(std::size_t i) const { return per_frame_.empty() ? uniform_ : per_frame_.at(i); }
  const std::vector<double>& per_frame_strides_ns() const { return per_frame_; }

  /// Appends a frame that follows the last one after stride_ns.
  void append(FrameSet f, double stride_ns);

  /// Flattened translations, one row per frame (L x 3N).
  Eigen::MatrixXd flattened_translations() const;

 private:
  void validate() const;

  std::vector<FrameSet> frames_;
  double uniform_ = 1.0;
  std::vector<double> per_frame_;
};

/// Root mean squared deviation of translations (no superposition).
double rmsd(const FrameSet& a, const FrameSet& b);

struct Superposition {
  RigidFrame transform;  ///< maps mobile points onto the target
  double rmsd = 0.0;     ///< after applying transform
  bool degenerate = false;
};

/// Least-squares rigid superposition of mobile onto target points (Kabsch).
/// Collinear or fewer than three points are flagged and yield the identity.
Superposition kabsch(const Coords& mobile, const Coords& target);

struct AlignedTrajectory {
  Trajectory trajectory;
  Superposition superposition;
};

/// Superposes frame 0 of `mobile` on `reference` and applies that single
/// transform to every frame.
AlignedTrajectory kabsch_align(const Trajectory& mobile, const FrameSet& reference);

}  // namespace stmd
