#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>

#include "futh/heads.hpp"
#include "futh/layers.hpp"
#include "futh/transformer_branch.hpp"

namespace futh {

struct FusionConfig {
    /// Fused channels at scales 1/16, 1/8, 1/4.
    std::array<std::size_t, 3> channels{256, 128, 64};
    std::size_t cbam_reduction = 16;
    std::size_t cbam_kernel = 7;
    bool glff_on = true;
    bool dfm_on = true;
};

/// Channel attention followed by spatial attention.
template <typename T>
class Cbam {
  public:
    Cbam() = default;
    Cbam(const std::string& name, std::size_t channels, std::size_t reduction, std::size_t kernel, Rng& rng) {
        const std::size_t hidden = std::max<std::size_t>(1, channels / std::max<std::size_t>(1, std::min(reduction, channels)));
        fc1_ = nn::Linear<T>(name + ".mlp.fc1", channels, hidden, rng, std::sqrt(2.0 / static_cast<double>(channels)));
        fc2_ = nn::Linear<T>(name + ".mlp.fc2", hidden, channels, rng, std::sqrt(1.0 / static_cast<double>(hidden)));
        spatial_ = nn::Conv2d<T>(name + ".spatial", 2, 1, kernel, rng);
    }

    Var<T> operator()(Tape<T>& tape, const Var<T>& x) {
        const Var<T> mc = channel_weights(tape, x);
        const Var<T> xc = ops::scale_channels(x, mc);
        return ops::scale_pixels(xc, spatial_weights(tape, xc));
    }

    /// sigma(MLP(avgpool(x)) + MLP(maxpool(x))) -> [B, C]
    Var<T> channel_weights(Tape<T>& tape, const Var<T>& x) {
        const Var<T> a = mlp(tape, ops::global_pool(x, ops::Reduce::mean));
        const Var<T> m = mlp(tape, ops::global_pool(x, ops::Reduce::max));
        return ops::sigmoid(ops::add(a, m));
    }

    /// sigma(conv(concat(channel mean, channel max))) -> [B, 1, H, W]
    Var<T> spatial_weights(Tape<T>& tape, const Var<T>& x) {
        const Var<T> pooled =
            ops::concat_channels<T>({ops::channel_pool(x, ops::Reduce::mean), ops::channel_pool(x, ops::Reduce::max)});
        return ops::sigmoid(spatial_(tape, pooled));
    }

    void parameters(ParamRefs<T>& out) {
        fc1_.parameters(out);
        fc2_.parameters(out);
        spatial_.parameters(out);
    }

    nn::Linear<T>& fc1() { return fc1_; }
    nn::Linear<T>& fc2() { return fc2_; }
    nn::Conv2d<T>& spatial() { return spatial_; }

  private:
    Var<T> mlp(Tape<T>& tape, const Var<T>& v) { return fc2_(tape, ops::relu(fc1_(tape, v))); }

    nn::Linear<T> fc1_, fc2_;
    nn::Conv2d<T> spatial_;
};

/// Global-local fusion at one scale. With attention enabled:
/// project both maps to the fused width, concatenate, UniT, CBAM.
/// Disabled: a single 1x1 convolution over the concatenation.
template <typename T>
class Glff {
  public:
    Glff() = default;
    Glff(const std::string& name, std::size_t t_channels, std::size_t c_channels, std::size_t out_channels,
         const FusionConfig& cfg, Rng& rng)
        : enabled_(cfg.glff_on) {
        if (enabled_) {
            proj_t_ = nn::Conv2d<T>(name + ".proj_t", t_channels, out_channels, 1, rng);
            proj_c_ = nn::Conv2d<T>(name + ".proj_c", c_channels, out_channels, 1, rng);
            fuse_ = nn::UniT<T>(name + ".fuse", 2 * out_channels, out_channels, rng);
            cbam_ = Cbam<T>(name + ".cbam", out_channels, cfg.cbam_reduction, cfg.cbam_kernel, rng);
        } else {
            plain_ = nn::Conv2d<T>(name + ".plain", t_channels + c_channels, out_channels, 1, rng);
        }
    }

    Var<T> operator()(Tape<T>& tape, const Var<T>& t, const Var<T>& c, bool training) {
        const auto& ts = t.shape();
        const auto& cs = c.shape();
        if (ts.size() != 4 || cs.size() != 4 || ts[0] != cs[0] || ts[2] != cs[2] || ts[3] != cs[3]) {
            throw ShapeError("glff: branch maps differ in spatial size: " + to_string(ts) + " vs " + to_string(cs));
        }
        if (!enabled_) return plain_(tape, ops::concat_channels<T>({t, c}));
        const Var<T> joined = ops::concat_channels<T>({proj_t_(tape, t), proj_c_(tape, c)});
        return cbam_(tape, fuse_(tape, joined, training));
    }

    void parameters(ParamRefs<T>& out) {
        if (!enabled_) {
            plain_.parameters(out);
            return;
        }
        proj_t_.parameters(out);
        proj_c_.parameters(out);
        fuse_.parameters(out);
        cbam_.parameters(out);
    }

    void buffers(BufferRefs<T>& out) {
        if (enabled_) fuse_.buffers(out);
    }

  private:
    bool enabled_ = true;
    nn::Conv2d<T> proj_t_, proj_c_, plain_;
    nn::UniT<T> fuse_;
    Cbam<T> cbam_;
};

/// Intermediate maps of the dense multi-scale fusion, kept for inspection.
template <typename T>
struct DfmTrace {
    Var<T> f0_1, f1_1, f1_2, lifted, f2_1, f2_2, out;
};

/// Dense fusion of the three fused maps into the fusion-view prediction.
template <typename T>
class Dfm {
  public:
    Dfm() = default;
    Dfm(const std::array<std::size_t, 3>& ch, Rng& rng, HeadUpsample head_mode)
        : head_mode_(head_mode),
          unit0_("dfm.unit0", ch[0], ch[1], rng),
          adapt1_("dfm.adapt1", ch[1], ch[1], 1, rng),
          unit1_("dfm.unit1", 2 * ch[1], ch[1], rng),
          lift2_("dfm.lift2", ch[1], ch[2], 1, rng),
          unit2_("dfm.unit2", 2 * ch[2], ch[2], rng),
          out1_("dfm.out1", ch[2], ch[2], rng),
          out2_("dfm.out2", ch[2], ch[2], rng),
          head_("dfm.head", ch[2], 1, 1, rng) {}

    Var<T> operator()(Tape<T>& tape, const Var<T>& f0, const Var<T>& f1, const Var<T>& f2, bool training,
                      DfmTrace<T>* trace = nullptr) {
        DfmTrace<T> tr;
        tr.f0_1 = ops::upsample2x_nearest(unit0_(tape, f0, training));
        tr.f1_1 = join("F1-1", adapt1_(tape, tr.f0_1), f1);
        tr.f1_2 = unit1_(tape, concat("F1-2", tr.f0_1, tr.f1_1), training);
        tr.lifted = lift2_(tape, ops::upsample2x_nearest(tr.f1_2));
        tr.f2_1 = join("F2-1", tr.lifted, f2);
        tr.f2_2 = unit2_(tape, concat("F2-2", tr.lifted, tr.f2_1), training);
        tr.out = out2_(tape, out1_(tape, tr.f2_2, training), training);
        if (trace != nullptr) *trace = tr;
        return prediction_head(head_(tape, tr.out), 4, head_mode_);
    }

    void parameters(ParamRefs<T>& out) {
        unit0_.parameters(out);
        adapt1_.parameters(out);
        unit1_.parameters(out);
        lift2_.parameters(out);
        unit2_.parameters(out);
        out1_.parameters(out);
        out2_.parameters(out);
        head_.parameters(out);
    }

    void buffers(BufferRefs<T>& out) {
        unit0_.buffers(out);
        unit1_.buffers(out);
        unit2_.buffers(out);
        out1_.buffers(out);
        out2_.buffers(out);
    }

    nn::Conv2d<T>& head() { return head_; }

  private:
    static Var<T> join(const char* stage, const Var<T>& a, const Var<T>& b) {
        if (a.shape() != b.shape()) {
            throw ShapeError(std::string("dfm stage ") + stage + ": cannot add " + to_string(a.shape()) + " and " +
                             to_string(b.shape()));
        }
        return ops::add(a, b);
    }

    static Var<T> concat(const char* stage, const Var<T>& a, const Var<T>& b) {
        const auto& as = a.shape();
        const auto& bs = b.shape();
        if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3]) {
            throw ShapeError(std::string("dfm stage ") + stage + ": cannot concat " + to_string(as) + " and " +
                             to_string(bs));
        }
        return ops::concat_channels<T>({a, b});
    }

    HeadUpsample head_mode_ = HeadUpsample::bilinear;
    nn::UniT<T> unit0_;
    nn::Conv2d<T> adapt1_;
    nn::UniT<T> unit1_;
    nn::Conv2d<T> lift2_;
    nn::UniT<T> unit2_;
    nn::UniT<T> out1_, out2_;
    nn::Conv2d<T> head_;
};

/// Three GLFFs followed by DFM (or, when DFM is switched off, a plain head on F_2).
template <typename T>
class FusionModule {
  public:
    FusionModule() = default;
    FusionModule(const FusionConfig& cfg, std::size_t d_model, const std::array<std::size_t, 3>& cnn_channels, Rng& rng,
                 HeadUpsample head_mode = HeadUpsample::bilinear)
        : cfg_(cfg), head_mode_(head_mode) {
        const std::array<std::size_t, 3> t_channels{d_model, TransformerBranch<T>::kScale8Channels,
                                                    TransformerBranch<T>::kScale4Channels};
        for (std::size_t i = 0; i < 3; ++i) {
            glff_[i] = Glff<T>("glff" + std::to_string(i), t_channels[i], cnn_channels[i], cfg.channels[i], cfg, rng);
        }
        if (cfg.dfm_on) {
            dfm_ = Dfm<T>(cfg.channels, rng, head_mode);
        } else {
            plain_head_ = nn::Conv2d<T>("fusion.head", cfg.channels[2], 1, 1, rng);
        }
    }

    /// Returns Pre_3; `fused` receives F_0, F_1, F_2 when non-null.
    Var<T> operator()(Tape<T>& tape, const MultiScaleFeatures<T>& t, const MultiScaleFeatures<T>& c, bool training,
                      MultiScaleFeatures<T>* fused = nullptr, DfmTrace<T>* trace = nullptr) {
        MultiScaleFeatures<T> f;
        f.s16 = glff_[0](tape, t.s16, c.s16, training);
        f.s8 = glff_[1](tape, t.s8, c.s8, training);
        f.s4 = glff_[2](tape, t.s4, c.s4, training);
        if (fused != nullptr) *fused = f;
        if (cfg_.dfm_on) return dfm_(tape, f.s16, f.s8, f.s4, training, trace);
        return prediction_head(plain_head_(tape, f.s4), 4, head_mode_);
    }

    void parameters(ParamRefs<T>& out) {
        for (auto& g : glff_) g.parameters(out);
        if (cfg_.dfm_on) {
            dfm_.parameters(out);
        } else {
            plain_head_.parameters(out);
        }
    }

    void buffers(BufferRefs<T>& out) {
        for (auto& g : glff_) g.buffers(out);
        if (cfg_.dfm_on) dfm_.buffers(out);
    }

    const FusionConfig& config() const { return cfg_; }

  private:
    FusionConfig cfg_;
    HeadUpsample head_mode_ = HeadUpsample::bilinear;
    std::array<Glff<T>, 3> glff_;
    Dfm<T> dfm_;
    nn::Conv2d<T> plain_head_;
};

}  // namespace futh
