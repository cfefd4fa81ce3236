#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "futh/heads.hpp"
#include "futh/layers.hpp"
#include "futh/transformer_branch.hpp"

namespace futh {

struct CnnConfig {
    std::size_t stem_channels = 32;
    std::size_t c4 = 64;    // channels at 1/4 scale
    std::size_t c8 = 128;   // channels at 1/8 scale
    std::size_t c16 = 256;  // channels at 1/16 scale
    std::size_t units_per_stage = 2;
    std::size_t head_channels = 64;

    void validate() const {
        if (stem_channels == 0 || c4 == 0 || c8 == 0 || c16 == 0 || head_channels == 0) {
            throw ConfigError("cnn channel counts must be positive");
        }
    }
};

/// One encoder stage: 2x2 average-pool downsample, a UniT changing width, then
/// densely connected UniTs (each sees the concatenation of all earlier stage maps).
template <typename T>
class DenseStage {
  public:
    DenseStage() = default;
    DenseStage(const std::string& name, std::size_t cin, std::size_t cout, std::size_t units, Rng& rng)
        : entry_(name + ".entry", cin, cout, rng) {
        for (std::size_t j = 0; j < units; ++j) {
            units_.emplace_back(name + ".unit" + std::to_string(j), cout * (j + 1), cout, rng);
        }
    }

    Var<T> operator()(Tape<T>& tape, const Var<T>& x, bool training) {
        std::vector<Var<T>> seen{entry_(tape, ops::avgpool2x2(x), training)};
        for (auto& unit : units_) {
            const Var<T> in = seen.size() == 1 ? seen.front() : ops::concat_channels(seen);
            seen.push_back(unit(tape, in, training));
        }
        return seen.back();
    }

    void parameters(ParamRefs<T>& out) {
        entry_.parameters(out);
        for (auto& u : units_) u.parameters(out);
    }

    void buffers(BufferRefs<T>& out) {
        entry_.buffers(out);
        for (auto& u : units_) u.buffers(out);
    }

  private:
    nn::UniT<T> entry_;
    std::vector<nn::UniT<T>> units_;
};

/// Compact convolutional encoder with taps at 1/4, 1/8 and 1/16 scale.
template <typename T>
class CnnBranch {
  public:
    CnnBranch() = default;
    CnnBranch(const CnnConfig& cfg, std::size_t in_channels, Rng& rng, HeadUpsample head_mode = HeadUpsample::bilinear)
        : cfg_(cfg), head_mode_(head_mode) {
        cfg.validate();
        stem_ = nn::UniT<T>("cnn.stem", in_channels, cfg.stem_channels, rng);
        stage4_ = DenseStage<T>("cnn.stage4", cfg.stem_channels, cfg.c4, cfg.units_per_stage, rng);
        stage8_ = DenseStage<T>("cnn.stage8", cfg.c4, cfg.c8, cfg.units_per_stage, rng);
        stage16_ = DenseStage<T>("cnn.stage16", cfg.c8, cfg.c16, cfg.units_per_stage, rng);
        lat16_ = nn::Conv2d<T>("cnn.head.lat16", cfg.c16, cfg.head_channels, 1, rng);
        lat8_ = nn::Conv2d<T>("cnn.head.lat8", cfg.c8, cfg.head_channels, 1, rng);
        lat4_ = nn::Conv2d<T>("cnn.head.lat4", cfg.c4, cfg.head_channels, 1, rng);
        out_ = nn::Conv2d<T>("cnn.head.out", cfg.head_channels, 1, 1, rng);
    }

    /// image [B, C, H, W], H and W divisible by 16.
    MultiScaleFeatures<T> operator()(Tape<T>& tape, const Var<T>& image, bool training) {
        const auto& s = image.shape();
        if (s.size() != 4 || s[2] % 16 != 0 || s[3] % 16 != 0) {
            throw ShapeError("cnn branch: spatial dims of " + to_string(s) + " must be divisible by 16");
        }
        const Var<T> half = ops::avgpool2x2(stem_(tape, image, training));
        MultiScaleFeatures<T> f;
        f.s4 = stage4_(tape, half, training);
        f.s8 = stage8_(tape, f.s4, training);
        f.s16 = stage16_(tape, f.s8, training);
        return f;
    }

    /// Pre_2: top-down merge of the three taps, 1x1 conv to one channel, x4 upsampling, sigmoid.
    Var<T> view_head(Tape<T>& tape, const MultiScaleFeatures<T>& f) {
        Var<T> top = ops::upsample2x_nearest(lat16_(tape, f.s16));
        top = ops::upsample2x_nearest(ops::add(top, lat8_(tape, f.s8)));
        top = ops::add(top, lat4_(tape, f.s4));
        return prediction_head(out_(tape, top), 4, head_mode_);
    }

    void parameters(ParamRefs<T>& out) {
        stem_.parameters(out);
        stage4_.parameters(out);
        stage8_.parameters(out);
        stage16_.parameters(out);
        lat16_.parameters(out);
        lat8_.parameters(out);
        lat4_.parameters(out);
        out_.parameters(out);
    }

    void buffers(BufferRefs<T>& out) {
        stem_.buffers(out);
        stage4_.buffers(out);
        stage8_.buffers(out);
        stage16_.buffers(out);
    }

    const CnnConfig& config() const { return cfg_; }
    nn::Conv2d<T>& head_out() { return out_; }

  private:
    CnnConfig cfg_;
    HeadUpsample head_mode_ = HeadUpsample::bilinear;
    nn::UniT<T> stem_;
    DenseStage<T> stage4_, stage8_, stage16_;
    nn::Conv2d<T> lat16_, lat8_, lat4_, out_;
};

}  // namespace futh
