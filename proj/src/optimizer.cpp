#include "alignlab/optimizer.hpp"

#include <cmath>

namespace alignlab {

double lr_at(const Schedule& schedule, std::int64_t step) {
    if (step < 0) {
        throw ContractError("lr_at: negative step");
    }
    const std::int64_t warmup_steps = static_cast<std::int64_t>(schedule.warmup_epochs) * schedule.steps_per_epoch;
    const std::int64_t total_steps = static_cast<std::int64_t>(schedule.total_epochs) * schedule.steps_per_epoch;
    if (step <= warmup_steps) {
        if (warmup_steps == 0) {
            return schedule.base_lr;
        }
        return schedule.base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    const std::int64_t decay_steps = total_steps - warmup_steps;
    if (decay_steps <= 0 || step >= total_steps) {
        return schedule.final_lr;
    }
    const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps);
    return schedule.base_lr + (schedule.final_lr - schedule.base_lr) * progress;
}

AdamW::AdamW(double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

bool AdamW::decay_applies(const std::string& path) {
    return !(path.ends_with(".bias") || path.ends_with(".beta") || path.ends_with(".gamma") ||
             path == "head.log_tau");
}

void AdamW::step(std::map<std::string, Tensor>& params, double lr) {
    ++t_;
    const double bias1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bias2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [path, tensor] : params) {
        if (!tensor.requires_grad()) {
            continue;
        }
        if (!tensor.has_grad()) {
            throw ContractError("adamw: trainable parameter '" + path + "' has no gradient");
        }
        auto& slot = state_[path];
        if (slot.m.empty()) {
            slot.m.assign(static_cast<std::size_t>(tensor.size()), 0.0);
            slot.v.assign(static_cast<std::size_t>(tensor.size()), 0.0);
        }
        auto values = tensor.values();
        const auto grads = tensor.grad();
        const bool decay = weight_decay_ > 0.0 && decay_applies(path);
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (decay) {
                values[i] = quantize(values[i] - lr * weight_decay_ * values[i]);
            }
            const double g = grads[i];
            slot.m[i] = quantize(beta1_ * slot.m[i] + (1.0 - beta1_) * g);
            slot.v[i] = quantize(beta2_ * slot.v[i] + (1.0 - beta2_) * g * g);
            const double m_hat = slot.m[i] / bias1;
            const double v_hat = slot.v[i] / bias2;
            values[i] = quantize(values[i] - lr * m_hat / (std::sqrt(v_hat) + eps_));
        }
    }
}

std::vector<std::string> AdamW::state_paths() const {
    std::vector<std::string> out;
    out.reserve(state_.size());
    for (const auto& [path, slot] : state_) {
        out.push_back(path);
    }
    return out;
}

}  // namespace alignlab
