#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

namespace stmd::selftest {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
  double budget_seconds = 0.0;
};

struct AcceptanceOptions {
  std::uint64_t seed = 20240611;
  /// Directory for artifacts of the end-to-end run; empty writes nothing.
  std::string out_dir;
  /// Progress lines for long criteria.
  std::ostream* log = nullptr;
};

constexpr int kCriterionCount = 10;

CriterionResult run_criterion(int id, const AcceptanceOptions& opt);

/// Runs the given criteria (all when empty), printing one line per criterion.
std::vector<CriterionResult> run_acceptance(const std::vector<int>& ids, const AcceptanceOptions& opt,
                                            std::ostream& out);

std::string format_line(const CriterionResult& r);

/// Memory-inflation checks on random stable systems: Schur residuals,
/// singular-value ratios and GLE convergence orders.
nlohmann::ordered_json mz_verification(std::uint64_t seed, int systems);

}  // namespace stmd::selftest
