#pragma once

#include <string>

// Result of one acceptance criterion. Kept free of library types so the
// double-precision translation unit can share it with the float one.
struct Outcome {
  bool pass = false;
  std::string detail;
};

Outcome gradient_criterion();
