#pragma once

#include <iosfwd>
#include <string>

#include "stmd/denoiser.hpp"

namespace stmd {

/// Parameter file: "STMDCKPT", u64 header length, JSON header (version,
/// config, schedule, tensor table with name/shape/byte offset), then
/// little-endian f64 tensor data in row-major order.
void save_checkpoint(std::ostream& out, const Denoiser& model);
void save_checkpoint_file(const std::string& path, const Denoiser& model);
Denoiser load_checkpoint(std::istream& in);
Denoiser load_checkpoint_file(const std::string& path);

}  // namespace stmd
