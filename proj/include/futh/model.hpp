#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "futh/cnn_branch.hpp"
#include "futh/fusion.hpp"
#include "futh/transformer_branch.hpp"

namespace futh {

inline constexpr std::size_t kViews = 3;

struct ModelConfig {
    std::size_t image_size = 352;
    std::size_t in_channels = 3;
    EncoderConfig encoder;
    CnnConfig cnn;
    FusionConfig fusion;
    HeadUpsample head_upsample = HeadUpsample::bilinear;
    std::uint64_t seed = 0;

    void validate() const {
        if (image_size == 0 || image_size % 16 != 0) {
            throw ConfigError("image_size " + std::to_string(image_size) + " must be a positive multiple of 16");
        }
        encoder.validate();
        cnn.validate();
    }
};

/// Per-view probability maps [B, 1, H, W]: Transformer branch, CNN branch, fusion module.
template <typename T>
struct ViewPredictions {
    std::array<Var<T>, kViews> pre;
};

/// Everything produced by one forward pass, for inspection and tests.
template <typename T>
struct ForwardTrace {
    TokenSequence<T> tokens;
    MultiScaleFeatures<T> transformer;
    MultiScaleFeatures<T> cnn;
    MultiScaleFeatures<T> fused;
    DfmTrace<T> dfm;
};

/// Parallel Transformer and CNN branches joined by the fusion module; three views.
template <typename T>
class FuTransHNet {
  public:
    explicit FuTransHNet(const ModelConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        Rng rng(cfg.seed);
        transformer_ = TransformerBranch<T>(cfg.encoder, cfg.image_size, cfg.in_channels, rng, cfg.head_upsample);
        cnn_ = CnnBranch<T>(cfg.cnn, cfg.in_channels, rng, cfg.head_upsample);
        fusion_ = FusionModule<T>(cfg.fusion, cfg.encoder.d_model, {cfg.cnn.c16, cfg.cnn.c8, cfg.cnn.c4}, rng,
                                  cfg.head_upsample);
    }

    FuTransHNet(const FuTransHNet&) = delete;
    FuTransHNet& operator=(const FuTransHNet&) = delete;

    /// images [B, C, H, W] with H = W = image_size.
    ViewPredictions<T> forward(Tape<T>& tape, const Var<T>& images, bool training, ForwardTrace<T>* trace = nullptr) {
        const auto& s = images.shape();
        if (s.size() != 4 || s[1] != cfg_.in_channels || s[2] != cfg_.image_size || s[3] != cfg_.image_size) {
            throw ShapeError("model input " + to_string(s) + " does not match configured size " +
                             std::to_string(cfg_.image_size));
        }
        ForwardTrace<T> tr;
        tr.tokens = transformer_.encode(tape, images);
        tr.transformer = transformer_.postprocess(tape, tr.tokens);
        tr.cnn = cnn_(tape, images, training);
        ViewPredictions<T> out;
        out.pre[0] = transformer_.view_head(tape, tr.transformer.s4);
        out.pre[1] = cnn_.view_head(tape, tr.cnn);
        out.pre[2] = fusion_(tape, tr.transformer, tr.cnn, training, &tr.fused, &tr.dfm);
        if (trace != nullptr) *trace = tr;
        return out;
    }

    /// Inference-mode forward without gradient recording; returns the three maps.
    std::array<Tensor<T>, kViews> predict(const Tensor<T>& images) {
        Tape<T> tape;
        tape.set_grad_enabled(false);
        const auto views = forward(tape, tape.constant(images), false);
        return {views.pre[0].value(), views.pre[1].value(), views.pre[2].value()};
    }

    ParamRefs<T> parameters() {
        ParamRefs<T> out;
        transformer_.parameters(out);
        cnn_.parameters(out);
        fusion_.parameters(out);
        return out;
    }

    BufferRefs<T> buffers() {
        BufferRefs<T> out;
        cnn_.buffers(out);
        fusion_.buffers(out);
        return out;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for (auto* p : parameters()) n += p->value.size();
        return n;
    }

    void zero_grad() {
        for (auto* p : parameters()) p->zero_grad();
    }

    const ModelConfig& config() const { return cfg_; }
    TransformerBranch<T>& transformer() { return transformer_; }
    CnnBranch<T>& cnn() { return cnn_; }
    FusionModule<T>& fusion() { return fusion_; }

  private:
    ModelConfig cfg_;
    TransformerBranch<T> transformer_;
    CnnBranch<T> cnn_;
    FusionModule<T> fusion_;
};

}  // namespace futh
