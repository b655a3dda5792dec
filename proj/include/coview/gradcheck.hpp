#pragma once

#include <functional>

#include "coview/tensor.hpp"

namespace coview {

// Builds a scalar loss from a graph-bound copy of the probe tensor.
using ScalarFn = std::function<Tensor(Graph&, const Tensor&)>;

struct GradCheckResult {
    double max_rel_err = 0.0;
    int64_t worst_index = -1;
    double analytic = 0.0;  // gradient at the worst element
    double numeric = 0.0;
};

// Central finite differences (f(x+h)-f(x-h))/2h against Graph::backward,
// elementwise over `point`. Relative error uses max(|a|,|b|,1e-8).
GradCheckResult finite_difference_check(const ScalarFn& f, const Tensor& point, double step);

} // namespace coview
