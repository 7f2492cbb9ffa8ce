// One line per acceptance criterion; exit status is the number of failures.
#include <iostream>

#include "ospd/verify/suites.hpp"

int main() {
  ospd::verify::SuiteOptions options;
  int failures = 0;
  for (const auto& r : ospd::verify::run_suite("all", options)) {
    std::cout << ospd::verify::format_result(r) << std::endl;
    failures += r.passed ? 0 : 1;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures;
}
