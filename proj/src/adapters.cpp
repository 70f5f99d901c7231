#include "alignlab/adapters.hpp"

namespace alignlab {

std::string to_string(AdapterKind kind) {
    return kind == AdapterKind::layerwise ? "layerwise" : "deep";
}

std::string to_string(AdapterTarget target) {
    switch (target) {
        case AdapterTarget::image: return "image";
        case AdapterTarget::text: return "text";
        default: return "both";
    }
}

AdapterKind adapter_kind_from_string(const std::string& s) {
    if (s == "layerwise") return AdapterKind::layerwise;
    if (s == "deep") return AdapterKind::deep;
    throw ConfigError("unknown adapter kind '" + s + "'");
}

AdapterTarget adapter_target_from_string(const std::string& s) {
    if (s == "image") return AdapterTarget::image;
    if (s == "text") return AdapterTarget::text;
    if (s == "both") return AdapterTarget::both;
    throw ConfigError("unknown adapter target '" + s + "'");
}

}  // namespace alignlab
