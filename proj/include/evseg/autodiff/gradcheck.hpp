#pragma once

#include "evseg/autodiff/tape.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

namespace evseg::ad {

// A scalar-valued function built on a fresh tape from a single input variable.
using ScalarFunction = std::function<Var(Tape&, const Var&)>;

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

// Compares backward() against central differences (f(x+h) - f(x-h)) / 2h coordinate by
// coordinate. Relative error uses the denominator max(|analytic|, |numeric|, 1e-8).
inline GradCheckResult check_gradients(const ScalarFunction& f, const Array& point, double step) {
    if (!(step > 0.0 && step <= 1e-3)) throw std::invalid_argument("check_gradients: step must lie in (0, 1e-3]");

    Array analytic;
    {
        Tape tape;
        Var x = tape.variable(point);
        Var y = f(tape, x);
        analytic = tape.backward(y)[x];
    }

    auto evaluate = [&](const Array& at) {
        Tape tape;
        Var x = tape.variable(at);
        return f(tape, x).value().item();
    };

    GradCheckResult result;
    Array probe = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        probe.data[i] = point.data[i] + step;
        const double plus = evaluate(probe);
        probe.data[i] = point.data[i] - step;
        const double minus = evaluate(probe);
        probe.data[i] = point.data[i];

        const double numeric = (plus - minus) / (2.0 * step);
        const double denom = std::max({std::abs(analytic.data[i]), std::abs(numeric), 1e-8});
        const double err = std::abs(analytic.data[i] - numeric) / denom;
        if (err > result.max_relative_error || i == 0) {
            result = {err, i, analytic.data[i], numeric};
        }
    }
    return result;
}

}  // namespace evseg::ad
