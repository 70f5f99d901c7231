#pragma once

#include <string>

#include "alignlab/errors.hpp"

namespace alignlab {

enum class AdapterKind { layerwise, deep };
enum class AdapterTarget { image, text, both };

// Insertion recipe for trainable modules added to frozen towers.
//  - layerwise: bottleneck (down, gelu, up, residual) before each of the two
//    LN sublayers of every encoder layer; r = hidden / bottleneck_divisor.
//  - deep: `count` extra encoder layers appended after the host stack.
struct AdapterSpec {
    AdapterKind kind = AdapterKind::layerwise;
    AdapterTarget target = AdapterTarget::both;
    int bottleneck_divisor = 4;  // layerwise only
    int count = 1;               // deep only

    void validate(int hidden) const {
        if (kind == AdapterKind::layerwise) {
            if (bottleneck_divisor <= 0 || hidden % bottleneck_divisor != 0) {
                throw ConfigError("adapter bottleneck divisor " + std::to_string(bottleneck_divisor) +
                                  " does not divide hidden size " + std::to_string(hidden));
            }
        } else if (count < 1) {
            throw ConfigError("deep adapter count must be >= 1");
        }
    }

    bool applies_to_image() const { return target != AdapterTarget::text; }
    bool applies_to_text() const { return target != AdapterTarget::image; }
};

std::string to_string(AdapterKind kind);
std::string to_string(AdapterTarget target);
AdapterKind adapter_kind_from_string(const std::string& s);
AdapterTarget adapter_target_from_string(const std::string& s);

}  // namespace alignlab
