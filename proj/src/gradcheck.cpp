#include "coview/gradcheck.hpp"

#include <cmath>

namespace coview {

GradCheckResult finite_difference_check(const ScalarFn& f, const Tensor& point, double step) {
    require(step > 0.0, "finite_difference_check: step must be positive");

    std::vector<double> analytic;
    {
        Graph g;
        Tensor x = g.param(point);
        Tensor loss = f(g, x);
        g.backward(loss);
        analytic = g.grad(x);
    }

    auto eval_at = [&](const std::vector<double>& vals) {
        Graph g;
        Tensor x = g.input(tensor_of(point.shape, vals));
        return f(g, x).scalar();
    };

    GradCheckResult res;
    std::vector<double> probe = point.data();
    for (int64_t i = 0; i < point.numel(); ++i) {
        double keep = probe[i];
        probe[i] = keep + step;
        double fp = eval_at(probe);
        probe[i] = keep - step;
        double fm = eval_at(probe);
        probe[i] = keep;
        double numeric = (fp - fm) / (2.0 * step);
        double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
        double rel = std::fabs(analytic[i] - numeric) / denom;
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_index = i;
            res.analytic = analytic[i];
            res.numeric = numeric;
        }
    }
    return res;
}

} // namespace coview
