#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dmsn/param_store.hpp"

namespace dmsn {

struct GradCheckGroup {
    std::string name;
    size_t checked = 0;
    double max_rel = 0.0;   // |analytic - fd| / max(|analytic|, |fd|, floor)
    double max_abs = 0.0;
    bool ok = true;
};

struct GradCheckReport {
    std::vector<GradCheckGroup> groups;
    bool ok = true;
    double worst_rel = 0.0;
    std::string worst_group;
    size_t scalars = 0;
};

struct GradCheckOptions {
    double eps = 1e-5;
    double rtol = 1e-4;
    double floor = 1e-3;  // denominator floor; below it the check is effectively absolute at rtol*floor
};

// Central-difference check of analytic gradients. `loss_backward` must run a
// full forward+backward populating ParamStore grads; `loss_forward` must
// evaluate the same deterministic loss from current parameter values without
// touching grads. The oracle side only ever calls loss_forward.
inline GradCheckReport check_gradients(ParamStore& params, const std::function<void()>& loss_backward,
                                       const std::function<double()>& loss_forward,
                                       const GradCheckOptions& opt = {}) {
    params.zero_grad();
    loss_backward();

    GradCheckReport report;
    for (auto& [name, p] : params) {
        if (!p.requires_grad) continue;
        GradCheckGroup group;
        group.name = name;
        for (size_t i = 0; i < p.value.size(); ++i) {
            const double saved = p.value[i];
            p.value[i] = saved + opt.eps;
            const double f_plus = loss_forward();
            p.value[i] = saved - opt.eps;
            const double f_minus = loss_forward();
            p.value[i] = saved;
            const double fd = (f_plus - f_minus) / (2.0 * opt.eps);
            const double an = p.grad[i];
            const double denom = std::max({std::abs(an), std::abs(fd), opt.floor});
            const double rel = std::abs(an - fd) / denom;
            group.max_rel = std::max(group.max_rel, rel);
            group.max_abs = std::max(group.max_abs, std::abs(an - fd));
            ++group.checked;
        }
        group.ok = group.max_rel <= opt.rtol;
        report.ok = report.ok && group.ok;
        report.scalars += group.checked;
        if (group.max_rel > report.worst_rel) {
            report.worst_rel = group.max_rel;
            report.worst_group = name;
        }
        report.groups.push_back(std::move(group));
    }
    return report;
}

}  // namespace dmsn
