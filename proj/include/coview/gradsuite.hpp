#pragma once

#include <string>
#include <vector>

#include "coview/gradcheck.hpp"

namespace coview {

struct GradCheckItem {
    std::string name;
    double tolerance = 0.0;
    double worst = 0.0;  // max relative error across seeds
    bool pass = false;
};

struct GradSuiteResult {
    std::vector<GradCheckItem> items;
    bool all_pass = false;
};

// Finite-difference checks for every differentiable primitive and the three
// composites (encode/align/fuse/decode, global score, local score), repeated
// over `seeds` random draws per item.
GradSuiteResult run_gradient_suite(int seeds = 10);

} // namespace coview
