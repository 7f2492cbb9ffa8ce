#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ospd::verify {

struct CheckResult {
  int criterion = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct SuiteOptions {
  std::uint64_t seed = 20240617;
  bool verbose = false;
};

CheckResult check_theorem1_exactness(const SuiteOptions& options);   // 1
CheckResult check_numerical_stability(const SuiteOptions& options);  // 2
CheckResult check_output_invariance(const SuiteOptions& options);    // 3
CheckResult check_gqs_soundness(const SuiteOptions& options);        // 4
CheckResult check_lambda_curve(const SuiteOptions& options);         // 5
CheckResult check_adversary_bounds(const SuiteOptions& options);     // 6
CheckResult check_authenticity_chain(const SuiteOptions& options);   // 7
CheckResult check_comm_constancy(const SuiteOptions& options);       // 8
CheckResult check_controller(const SuiteOptions& options);           // 9
CheckResult check_memory_multiplicity(const SuiteOptions& options);  // 10
CheckResult check_scaling_trend(const SuiteOptions& options);        // 11

/// theorem1 {1,2}, gqs {4,5}, bounds {6,7}, protocol {3,8,9,10}, scaling {11},
/// all {1..11}. Throws std::invalid_argument on an unknown suite.
std::vector<CheckResult> run_suite(const std::string& suite, const SuiteOptions& options);

/// `criterion N: PASS name (detail) [s]`
std::string format_result(const CheckResult& result);

}  // namespace ospd::verify
