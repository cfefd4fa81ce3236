#pragma once

#include <random>

#include "futh/layers.hpp"
#include "futh/model.hpp"

namespace futh::test {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    return Tensor<double>::normal(std::move(shape), rng, 0.0, scale);
}

inline Tensor<double> random_mask(Shape shape, Rng& rng, double p = 0.4) {
    Tensor<double> t(std::move(shape));
    std::bernoulli_distribution d(p);
    for (auto& v : t.data()) v = d(rng) ? 1.0 : 0.0;
    return t;
}

/// Toy model: 64x64 input, depth-2 encoder, full widths.
inline ModelConfig toy_config(std::uint64_t seed = 0) {
    ModelConfig c;
    c.image_size = 64;
    c.encoder.depth = 2;
    c.seed = seed;
    return c;
}

/// Much smaller variant for tests that only need the wiring.
inline ModelConfig tiny_config(std::uint64_t seed = 0) {
    ModelConfig c;
    c.image_size = 32;
    c.encoder = {1, 32, 4, 2.0, 16};
    c.cnn = {8, 8, 16, 16, 1, 8};
    c.fusion.channels = {16, 16, 8};
    c.fusion.cbam_reduction = 4;
    c.seed = seed;
    return c;
}

}  // namespace futh::test
