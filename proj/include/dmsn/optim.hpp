#pragma once

#include <cmath>
#include <string>

#include "dmsn/errors.hpp"
#include "dmsn/param_store.hpp"

namespace dmsn {

enum class OptimizerKind { adam, sgd };

inline OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "adam") return OptimizerKind::adam;
    if (s == "sgd") return OptimizerKind::sgd;
    throw ConfigError("unknown optimizer: " + s);
}

// Adam with bias correction; moments live on the parameters. SGD is available
// behind the same interface for configs that ask for it.
class Optimizer {
public:
    Optimizer(OptimizerKind kind, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

    void step(ParamStore& params) {
        ++t_;
        for (auto& [name, p] : params) {
            if (!p.requires_grad) continue;
            if (p.grad.size() != p.value.size()) throw ContractError("missing grads for " + name);
            if (kind_ == OptimizerKind::sgd) {
                for (size_t i = 0; i < p.value.size(); ++i) p.value[i] -= lr_ * p.grad[i];
                continue;
            }
            if (p.adam_m.size() != p.value.size()) {
                p.adam_m.assign(p.value.size(), 0.0);
                p.adam_v.assign(p.value.size(), 0.0);
            }
            const double bc1 = 1.0 - std::pow(beta1_, t_);
            const double bc2 = 1.0 - std::pow(beta2_, t_);
            for (size_t i = 0; i < p.value.size(); ++i) {
                const double g = p.grad[i];
                p.adam_m[i] = beta1_ * p.adam_m[i] + (1.0 - beta1_) * g;
                p.adam_v[i] = beta2_ * p.adam_v[i] + (1.0 - beta2_) * g * g;
                const double mhat = p.adam_m[i] / bc1;
                const double vhat = p.adam_v[i] / bc2;
                p.value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

private:
    OptimizerKind kind_;
    double lr_;
    double beta1_, beta2_, eps_;
    int t_ = 0;
};

}  // namespace dmsn
