// Compiled against the double-precision core.
#include <chrono>
#include <sstream>

#include "../gradcheck_suite.hpp"
#include "outcome.hpp"

Outcome gradient_criterion() {
  const auto t0 = std::chrono::steady_clock::now();
  auto results = gradcheck_suite::primitive_checks(10);
  results.push_back(gradcheck_suite::attention_block_check());
  results.push_back(gradcheck_suite::model_check());
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const gradcheck_suite::Result* worst = &results.front();
  bool all = true;
  for (const auto& r : results) {
    all = all && r.checked > 0 && r.max_rel_error < 1e-3;
    if (r.max_rel_error > worst->max_rel_error) worst = &r;
  }
  const auto& model = results.back();
  std::ostringstream os;
  os << results.size() << " checks at eps 1e-3, worst " << worst->name << " " << worst->max_rel_error
     << ", two-layer model " << model.max_rel_error << ", " << seconds << " s";
  return {all && seconds < 60.0, os.str()};
}
