#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "alignlab/tensor.hpp"

namespace alignlab {

// Piecewise-linear learning rate: 0 -> base_lr across the warmup epochs, then
// base_lr -> final_lr across the rest. Continuous at the boundary.
struct Schedule {
    double base_lr = 1e-4;
    double final_lr = 1e-5;
    int warmup_epochs = 0;
    int total_epochs = 0;
    std::int64_t steps_per_epoch = 0;
};

double lr_at(const Schedule& schedule, std::int64_t step);

// Decoupled weight decay followed by the Adam update. State exists for the
// trainable set only; layer-norm, bias and temperature parameters are
// excluded from decay.
class AdamW {
public:
    AdamW(double beta1, double beta2, double eps, double weight_decay);
    AdamW() : AdamW(0.9, 0.999, 1e-8, 0.0) {}

    // params: the full model map; only requires_grad entries are touched.
    // A trainable parameter without a populated grad is a contract violation.
    void step(std::map<std::string, Tensor>& params, double lr);

    std::int64_t steps_taken() const { return t_; }
    std::vector<std::string> state_paths() const;

private:
    struct Slot {
        std::vector<double> m;
        std::vector<double> v;
    };

    static bool decay_applies(const std::string& path);

    double beta1_, beta2_, eps_, weight_decay_;
    std::int64_t t_ = 0;
    std::map<std::string, Slot> state_;
};

}  // namespace alignlab
