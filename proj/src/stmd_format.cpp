#include "stmd/stmd_format.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "stmd/errors.hpp"

namespace stmd {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

constexpr std::array<char, 4> kMagic{'S', 'T', 'M', 'D'};
constexpr std::uint32_t kVersion = 1;
constexpr double kQuatTolerance = 1e-6;

template <typename T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::array<unsigned char, sizeof(T)> b;
    std::memcpy(b.data(), &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b.data(), sizeof(T));
  }
  return v;
}

template <typename T>
void put(std::ostream& out, T v) {
  v = byteswap_if_big(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError("STMD: unexpected end of file");
  return byteswap_if_big(v);
}

}  // namespace

void write_stmd(std::ostream& out, const Trajectory& traj) {
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(traj.residues()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(traj.length()));
  const bool per_frame = !traj.has_uniform_stride();
  put<std::uint32_t>(out, per_frame ? 1u : 0u);
  if (per_frame) {
    for (double s : traj.per_frame_strides_ns()) put<double>(out, s);
  } else {
    put<double>(out, traj.uniform_stride_ns());
  }
  for (const auto& fs : traj.frames()) {
    for (const auto& f : fs.frames) {
      put<double>(out, f.translation.x());
      put<double>(out, f.translation.y());
      put<double>(out, f.translation.z());
      put<double>(out, f.rotation.w());
      put<double>(out, f.rotation.x());
      put<double>(out, f.rotation.y());
      put<double>(out, f.rotation.z());
    }
  }
  if (!out) throw FormatError("STMD: write failed");
}

void write_stmd_file(const std::string& path, const Trajectory& traj) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("STMD: cannot open " + path + " for writing");
  write_stmd(out, traj);
}

Trajectory read_stmd(std::istream& in, const ReadOptions& opts) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw FormatError("STMD: bad magic");
  const auto version = get<std::uint32_t>(in);
  if (version != kVersion) throw FormatError("STMD: unsupported version " + std::to_string(version));
  const auto n = get<std::uint32_t>(in);
  const auto l = get<std::uint32_t>(in);
  const auto flags = get<std::uint32_t>(in);
  if ((flags & ~1u) != 0u) throw FormatError("STMD: unknown flag bits");
  const bool per_frame = (flags & 1u) != 0u;

  std::vector<double> strides;
  double uniform = 0.0;
  if (per_frame) {
    if (l == 0) throw FormatError("STMD: per-frame strides with zero frames");
    strides.reserve(l - 1);
    for (std::uint32_t i = 0; i + 1 < l; ++i) strides.push_back(get<double>(in));
  } else {
    uniform = get<double>(in);
  }

  std::vector<FrameSet> frames(l, FrameSet(n));
  for (std::uint32_t fi = 0; fi < l; ++fi) {
    for (std::uint32_t i = 0; i < n; ++i) {
      RigidFrame& f = frames[fi].frames[i];
      f.translation.x() = get<double>(in);
      f.translation.y() = get<double>(in);
      f.translation.z() = get<double>(in);
      const double qw = get<double>(in), qx = get<double>(in), qy = get<double>(in), qz = get<double>(in);
      const double norm = std::sqrt(qw * qw + qx * qx + qy * qy + qz * qz);
      if (!std::isfinite(norm) || norm == 0.0)
        throw FormatError("STMD: invalid quaternion at frame " + std::to_string(fi));
      if (std::abs(norm - 1.0) > kQuatTolerance && !opts.renormalize)
        throw FormatError("STMD: non-unit quaternion at frame " + std::to_string(fi) + " residue " +
                          std::to_string(i) + " (norm " + std::to_string(norm) + ")");
      f.rotation = Rotation(qw, qx, qy, qz);
    }
  }
  try {
    return per_frame ? Trajectory(std::move(frames), std::move(strides)) : Trajectory(std::move(frames), uniform);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("STMD: ") + e.what());
  }
}

Trajectory read_stmd_file(const std::string& path, const ReadOptions& opts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("STMD: cannot open " + path);
  return read_stmd(in, opts);
}

}  // namespace stmd
