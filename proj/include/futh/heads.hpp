#pragma once

#include <cstddef>
#include <string>

#include "futh/ops.hpp"

namespace futh {

/// Resampling used by the per-view prediction heads to reach input resolution.
enum class HeadUpsample { bilinear, nearest };

inline HeadUpsample parse_head_upsample(const std::string& s) {
    if (s == "bilinear") return HeadUpsample::bilinear;
    if (s == "nearest") return HeadUpsample::nearest;
    throw ConfigError("unknown head upsampling mode '" + s + "'");
}

inline const char* to_string(HeadUpsample m) { return m == HeadUpsample::bilinear ? "bilinear" : "nearest"; }

/// One-channel logits [B, 1, h, w] -> probabilities [B, 1, h*factor, w*factor].
/// `factor` must be a power of two in nearest mode.
template <typename T>
Var<T> prediction_head(const Var<T>& logits, std::size_t factor, HeadUpsample mode) {
    Var<T> up = logits;
    if (mode == HeadUpsample::bilinear) {
        if (factor > 1) up = ops::upsample_bilinear(logits, factor);
    } else {
        for (std::size_t f = factor; f > 1; f /= 2) {
            if (f % 2 != 0) throw ConfigError("nearest head upsampling needs a power-of-two factor");
            up = ops::upsample2x_nearest(up);
        }
    }
    return ops::sigmoid(up);
}

}  // namespace futh
