#pragma once

#include <cstdint>
#include <string>

namespace stmd::cost {

enum class Arch { st_joint, pairformer_pair_temporal, pairformer_single_temporal };

Arch parse_arch(const std::string& name);
std::string arch_name(Arch a);

/// Leading-order operation counts with unit constants:
///   st_joint                    N^2 L^2 d
///   pairformer_pair_temporal    N^3 L d + (N + N^2) L^2 d
///   pairformer_single_temporal  N^3 L d + N L^2 d
double flops(Arch arch, double n, double l, double d);

/// Sequence length above which joint attention costs more than the
/// single-temporal pair model: N^2 / (N - 1).
double crossover_L(double n);

enum class KvVariant { singles, singles_plus_pairs };

std::uint64_t kv_bytes(KvVariant v, std::uint64_t n, std::uint64_t l, std::uint64_t d, std::uint64_t layers,
                       std::uint64_t bytes_per_scalar);

}  // namespace stmd::cost
