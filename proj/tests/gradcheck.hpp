#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "spos/tensor.hpp"

// Central finite-difference gradient oracle, run in 64-bit mode. build_loss
// re-runs the computation from the current values of the input tensors, so
// mutating an input coordinate and rebuilding gives the perturbed loss.
namespace spos::testing {

struct GradCheckResult {
    bool ok = true;
    std::string detail;  // first offending coordinate, empty when ok
};

inline bool close(double a, double b, double rel = 1e-4, double abs = 1e-7) {
    return std::abs(a - b) <= abs + rel * std::max(std::abs(a), std::abs(b));
}

// max_coords < 0 checks every coordinate; otherwise an evenly strided subset
// of max_coords coordinates per tensor (used for the big pipeline check).
inline GradCheckResult grad_check(std::vector<TensorT<double>> inputs,
                                  const std::function<TensorT<double>()>& build_loss,
                                  double h = 1e-4, double rel = 1e-4,
                                  std::int64_t max_coords = -1) {
    for (auto& in : inputs) {
        auto& g = in.grad();  // inputs may carry grads from an earlier check
        std::fill(g.begin(), g.end(), 0.0);
    }
    TensorT<double> loss = build_loss();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& in : inputs) {
        auto& g = in.grad();
        if (static_cast<std::int64_t>(g.size()) != in.numel())
            return {false, "missing grad on an input"};
        analytic.push_back(g);
    }

    GradCheckResult res;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        auto& vals = inputs[ti].val();
        std::int64_t n = inputs[ti].numel();
        std::int64_t step = 1;
        if (max_coords > 0 && n > max_coords) step = n / max_coords;
        for (std::int64_t i = 0; i < n; i += step) {
            double keep = vals[i];
            vals[i] = keep + h;
            double fp;
            {
                NoGrad ng;
                fp = build_loss().item();
            }
            vals[i] = keep - h;
            double fm;
            {
                NoGrad ng;
                fm = build_loss().item();
            }
            vals[i] = keep;
            double fd = (fp - fm) / (2 * h);
            double an = analytic[ti][i];
            if (!close(fd, an, rel)) {
                res.ok = false;
                res.detail = "input " + std::to_string(ti) + " coord " + std::to_string(i) +
                             ": fd=" + std::to_string(fd) + " analytic=" + std::to_string(an);
                return res;
            }
        }
    }
    return res;
}

}  // namespace spos::testing
