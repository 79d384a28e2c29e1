// One line per acceptance criterion; exit status is non-zero if any fails.

#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "simstex/verify.hpp"

int main(int argc, char** argv) {
  using namespace simstex::verify;
  // Optional: run a single criterion by number, e.g. `acceptance 3`.
  const int only = argc > 1 ? std::atoi(argv[1]) : 0;
  const std::vector<CheckResult (*)()> criteria = {
      [] { return single_view_equivalence(); }, [] { return delta_recovery(); },
      [] { return gaussian_distribution(); },   [] { return renoise_variance(); },
      [] { return adjoint_identity(); },        [] { return quality_aggregation(); },
      [] { return colorfield_check(); },        [] { return refinement_policy(); },
      [] { return end_to_end_runtime(); },
  };
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    if (only && static_cast<int>(k) + 1 != only) continue;
    const CheckResult r = criteria[k]();
    std::printf("criterion %zu: %s - %s (%.2fs) %s\n", k + 1, r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds,
                r.detail.c_str());
    std::fflush(stdout);
    failed += !r.passed;
  }
  std::printf("%d criteria failed\n", failed);
  return failed ? 1 : 0;
}
