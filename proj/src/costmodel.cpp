#include "stmd/costmodel.hpp"

#include <stdexcept>

#include "stmd/rollout.hpp"

namespace stmd::cost {

Arch parse_arch(const std::string& name) {
  if (name == "st_joint") return Arch::st_joint;
  if (name == "pairformer_pair_temporal") return Arch::pairformer_pair_temporal;
  if (name == "pairformer_single_temporal") return Arch::pairformer_single_temporal;
  throw std::invalid_argument("unknown architecture: " + name);
}

std::string arch_name(Arch a) {
  switch (a) {
    case Arch::st_joint: return "st_joint";
    case Arch::pairformer_pair_temporal: return "pairformer_pair_temporal";
    case Arch::pairformer_single_temporal: return "pairformer_single_temporal";
  }
  return "";
}

double flops(Arch arch, double n, double l, double d) {
  if (!(n > 0 && l > 0 && d > 0)) throw std::invalid_argument("flops: N, L, d must be positive");
  switch (arch) {
    case Arch::st_joint: return n * n * l * l * d;
    case Arch::pairformer_pair_temporal: return n * n * n * l * d + (n + n * n) * l * l * d;
    case Arch::pairformer_single_temporal: return n * n * n * l * d + n * l * l * d;
  }
  return 0.0;
}

double crossover_L(double n) {
  if (!(n > 1.0)) throw std::invalid_argument("crossover_L: N must exceed 1");
  return n * n / (n - 1.0);
}

std::uint64_t kv_bytes(KvVariant v, std::uint64_t n, std::uint64_t l, std::uint64_t d, std::uint64_t layers,
                       std::uint64_t bytes_per_scalar) {
  return v == KvVariant::singles ? cache_memory_bytes(n, l, d, layers, bytes_per_scalar)
                                 : pair_cache_memory_bytes(n, l, d, layers, bytes_per_scalar);
}

}  // namespace stmd::cost
