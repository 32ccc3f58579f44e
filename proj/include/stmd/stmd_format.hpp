#pragma once

#include <iosfwd>
#include <string>

#include "stmd/trajectory.hpp"

namespace stmd {

// STMD v1 (little-endian):
//   "STMD" | u32 version=1 | u32 N | u32 L | u32 flags (bit0: per-frame strides)
//   | f64 uniform stride, or L-1 f64 strides when bit0 is set
//   | L*N records of 7 f64: tx ty tz (Angstrom) qw qx qy qz

struct ReadOptions {
  /// Accept and renormalize quaternions whose norm is off by more than 1e-6.
  bool renormalize = false;
};

void write_stmd(std::ostream& out, const Trajectory& traj);
void write_stmd_file(const std::string& path, const Trajectory& traj);

Trajectory read_stmd(std::istream& in, const ReadOptions& opts = {});
Trajectory read_stmd_file(const std::string& path, const ReadOptions& opts = {});

}  // namespace stmd
