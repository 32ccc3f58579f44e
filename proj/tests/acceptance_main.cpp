#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "selftest/acceptance.hpp"

// Usage: stmd_acceptance [criterion ids...]
int main(int argc, char** argv) {
  std::vector<int> ids;
  for (int i = 1; i < argc; ++i) ids.push_back(std::stoi(argv[i]));
  stmd::selftest::AcceptanceOptions opt;
  opt.log = &std::cerr;
  if (const char* dir = std::getenv("STMD_ACCEPTANCE_OUT")) opt.out_dir = dir;
  const auto results = stmd::selftest::run_acceptance(ids, opt, std::cout);
  int failed = 0;
  for (const auto& r : results) failed += r.pass ? 0 : 1;
  std::cout << (failed ? "FAILED " : "ALL PASSED ") << results.size() - failed << "/" << results.size() << std::endl;
  return failed ? 1 : 0;
}
