#pragma once

#include "nn.hpp"

namespace fluvgan {

struct AdamConfig {
    real lr = real(2e-4);
    real beta1 = real(0.5);
    real beta2 = real(0.999);
    real eps = real(1e-8);
};

// Bias-corrected Adam. Rejects the whole step on a non-finite gradient,
// naming the offending parameter.
inline void adam_step(const std::vector<Parameter*>& params, const AdamConfig& cfg) {
    for (Parameter* p : params) {
        if (!p->value.has_grad()) continue;
        if (!all_finite(p->value.grad()))
            throw NumericError("adam_step: non-finite gradient in parameter '" + p->name + "'");
    }
    for (Parameter* p : params) {
        auto& data = p->value.data();
        size_t n = data.size();
        if (p->adam_m.size() != n) p->adam_m.assign(n, real(0));
        if (p->adam_v.size() != n) p->adam_v.assign(n, real(0));
        p->step_count += 1;
        real bc1 = real(1) - std::pow(cfg.beta1, real(p->step_count));
        real bc2 = real(1) - std::pow(cfg.beta2, real(p->step_count));
        const rvec* gp = p->value.has_grad() ? &p->value.grad() : nullptr;
        for (size_t i = 0; i < n; ++i) {
            real g = gp ? (*gp)[i] : real(0);
            real m = p->adam_m[i] = cfg.beta1 * p->adam_m[i] + (real(1) - cfg.beta1) * g;
            real v = p->adam_v[i] = cfg.beta2 * p->adam_v[i] + (real(1) - cfg.beta2) * g * g;
            data[i] -= cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
        }
    }
}

}  // namespace fluvgan
