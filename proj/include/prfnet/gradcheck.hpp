#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "prfnet/parameter.hpp"
#include "prfnet/tape.hpp"

namespace prfnet {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t worst_index = -1;
    int64_t coords_checked = 0;

    bool passed(double bar = 1e-5) const { return max_rel_err < bar; }
};

// Central-difference check of d(f)/d(param) for every non-frozen parameter in
// the store. f must be a deterministic scalar-valued forward pass in f64.
// Up to coords_per_param coordinates are sampled per parameter; relative
// error is |analytic - cd| / max(|analytic|, |cd|, 1e-12).
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& f,
                                  ParameterStore<double>& params, double eps, Rng& rng,
                                  int64_t coords_per_param = 4) {
    check<ValueError>(eps >= 1e-7 && eps <= 1e-4, "grad_check eps must be in [1e-7, 1e-4]");
    params.clear_grads();

    Tape<double> tape;
    Tensor<double> loss;
    {
        TapeScope<double> scope(tape);
        loss = f();
    }
    tape.backward(loss);

    std::vector<std::vector<double>> analytic;
    for (auto& p : params.params()) {
        if (p.frozen || !p.value.has_grad()) {
            analytic.emplace_back();
            continue;
        }
        const auto& g = p.value.grad_values();
        analytic.emplace_back(g.begin(), g.end());
    }
    params.clear_grads();

    GradCheckReport report;
    for (size_t ip = 0; ip < params.params().size(); ++ip) {
        auto& p = params.params()[ip];
        if (p.frozen || analytic[ip].empty()) continue;
        const int64_t n = p.value.numel();
        std::vector<int64_t> coords;
        if (n <= coords_per_param) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (int64_t s = 0; s < coords_per_param; ++s)
                coords.push_back(rng.uniform_int(0, n - 1));
            std::sort(coords.begin(), coords.end());
            coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
        }
        for (int64_t idx : coords) {
            const double saved = p.value.at(idx);
            p.value.at(idx) = saved + eps;
            const double f_plus = f().item();
            p.value.at(idx) = saved - eps;
            const double f_minus = f().item();
            p.value.at(idx) = saved;
            const double cd = (f_plus - f_minus) / (2.0 * eps);
            const double a = analytic[ip][static_cast<size_t>(idx)];
            const double rel =
                std::abs(a - cd) / std::max({std::abs(a), std::abs(cd), 1e-12});
            ++report.coords_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = p.name;
                report.worst_index = idx;
            }
        }
    }
    return report;
}

}  // namespace prfnet
