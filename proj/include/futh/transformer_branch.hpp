#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "futh/heads.hpp"
#include "futh/layers.hpp"
#include "futh/ops.hpp"

namespace futh {

struct EncoderConfig {
    std::size_t depth = 12;
    std::size_t d_model = 384;
    std::size_t heads = 6;
    double mlp_ratio = 4.0;
    std::size_t patch_size = 16;

    std::size_t d_head() const { return d_model / heads; }
    std::size_t mlp_hidden() const { return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(d_model))); }

    void validate() const {
        if (depth < 1) throw ConfigError("encoder depth must be >= 1");
        if (heads == 0 || d_model % heads != 0) {
            throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " + std::to_string(heads) +
                              " heads");
        }
        if (patch_size == 0) throw ConfigError("patch_size must be positive");
        if (!(mlp_ratio > 0)) throw ConfigError("mlp_ratio must be positive");
    }
};

/// Patch tokens [B, N, d_model] together with the grid they were cut from.
template <typename T>
struct TokenSequence {
    Var<T> tokens;
    std::size_t grid_rows = 0;
    std::size_t grid_cols = 0;

    std::size_t size() const { return grid_rows * grid_cols; }
};

/// Feature maps at 1/16, 1/8 and 1/4 of the input resolution.
template <typename T>
struct MultiScaleFeatures {
    Var<T> s16;
    Var<T> s8;
    Var<T> s4;
};

/// Multi-head self-attention. Head i uses columns [i*d_head, (i+1)*d_head) of the
/// query/key/value matrices as its own projection; heads are concatenated and
/// projected by the output matrix.
template <typename T>
class MultiHeadSelfAttention {
  public:
    MultiHeadSelfAttention() = default;
    MultiHeadSelfAttention(const std::string& name, std::size_t d_model, std::size_t heads, Rng& rng)
        : heads_(heads),
          wq_(name + ".q", d_model, d_model, rng, 0.02, false),
          wk_(name + ".k", d_model, d_model, rng, 0.02, false),
          wv_(name + ".v", d_model, d_model, rng, 0.02, false),
          wo_(name + ".o", d_model, d_model, rng, 0.02, false) {
        if (heads == 0 || d_model % heads != 0) {
            throw ConfigError("attention: d_model " + std::to_string(d_model) + " not divisible by " +
                              std::to_string(heads) + " heads");
        }
    }

    /// x: [B, N, d_model] -> [B, N, d_model]
    Var<T> operator()(Tape<T>& tape, const Var<T>& x) {
        const std::size_t d_head = x.dim(2) / heads_;
        const Var<T> q = ops::split_heads(wq_(tape, x), heads_);
        const Var<T> k = ops::split_heads(wk_(tape, x), heads_);
        const Var<T> v = ops::split_heads(wv_(tape, x), heads_);
        const Var<T> logits = ops::scale(ops::bmm(q, k, true), T{1} / std::sqrt(static_cast<T>(d_head)));
        const Var<T> attn = ops::softmax_lastdim(logits);
        last_attention_ = attn.value();
        const Var<T> heads = ops::merge_heads(ops::bmm(attn, v), heads_);
        return wo_(tape, heads);
    }

    void parameters(ParamRefs<T>& out) {
        wq_.parameters(out);
        wk_.parameters(out);
        wv_.parameters(out);
        wo_.parameters(out);
    }

    std::size_t heads() const { return heads_; }
    nn::Linear<T>& query() { return wq_; }
    nn::Linear<T>& key() { return wk_; }
    nn::Linear<T>& value() { return wv_; }
    nn::Linear<T>& output() { return wo_; }

    /// Attention probabilities of the last call, [B*h, N, N].
    const Tensor<T>& last_attention() const { return last_attention_; }

  private:
    std::size_t heads_ = 1;
    nn::Linear<T> wq_, wk_, wv_, wo_;
    Tensor<T> last_attention_;
};

/// Pre-norm encoder block: X' = X + MSA(LN(X)); T = X' + MLP(LN(X')).
template <typename T>
class EncoderBlock {
  public:
    EncoderBlock() = default;
    EncoderBlock(const std::string& name, const EncoderConfig& cfg, Rng& rng)
        : ln1_(name + ".ln1", cfg.d_model),
          attn_(name + ".attn", cfg.d_model, cfg.heads, rng),
          ln2_(name + ".ln2", cfg.d_model),
          fc1_(name + ".mlp.fc1", cfg.d_model, cfg.mlp_hidden(), rng),
          fc2_(name + ".mlp.fc2", cfg.mlp_hidden(), cfg.d_model, rng) {}

    Var<T> operator()(Tape<T>& tape, const Var<T>& x) {
        const Var<T> x1 = ops::add(x, attn_(tape, ln1_(tape, x)));
        const Var<T> mlp = fc2_(tape, ops::gelu(fc1_(tape, ln2_(tape, x1))));
        return ops::add(x1, mlp);
    }

    void parameters(ParamRefs<T>& out) {
        ln1_.parameters(out);
        attn_.parameters(out);
        ln2_.parameters(out);
        fc1_.parameters(out);
        fc2_.parameters(out);
    }

    MultiHeadSelfAttention<T>& attention() { return attn_; }
    nn::Linear<T>& mlp_out() { return fc2_; }

  private:
    nn::LayerNorm<T> ln1_;
    MultiHeadSelfAttention<T> attn_;
    nn::LayerNorm<T> ln2_;
    nn::Linear<T> fc1_, fc2_;
};

/// Global-feature branch: patch embedding, encoder stack, reshaping and
/// progressive conv/upsample post-processing to 1/16, 1/8 and 1/4 scale maps.
template <typename T>
class TransformerBranch {
  public:
    static constexpr std::size_t kScale8Channels = 128;
    static constexpr std::size_t kScale4Channels = 64;

    TransformerBranch() = default;
    TransformerBranch(const EncoderConfig& cfg, std::size_t image_size, std::size_t in_channels, Rng& rng,
                      HeadUpsample head_mode = HeadUpsample::bilinear)
        : cfg_(cfg), head_mode_(head_mode) {
        cfg.validate();
        if (image_size % cfg.patch_size != 0) {
            throw ConfigError("patch size " + std::to_string(cfg.patch_size) + " does not divide image size " +
                              std::to_string(image_size));
        }
        grid_ = image_size / cfg.patch_size;
        embed_ = nn::Linear<T>("transformer.patch_embed", cfg.patch_size * cfg.patch_size * in_channels, cfg.d_model,
                               rng);
        pos_ = Parameter<T>("transformer.pos_embed",
                            Tensor<T>::normal(Shape{grid_ * grid_, cfg.d_model}, rng, T{0}, T{0.02}));
        for (std::size_t i = 0; i < cfg.depth; ++i) {
            blocks_.emplace_back("transformer.block" + std::to_string(i), cfg, rng);
        }
        norm_ = nn::LayerNorm<T>("transformer.norm", cfg.d_model);
        up1_ = nn::Conv2d<T>("transformer.post1", cfg.d_model, kScale8Channels, 3, rng);
        up2_ = nn::Conv2d<T>("transformer.post2", kScale8Channels, kScale4Channels, 3, rng);
        head_ = nn::Conv2d<T>("transformer.head", kScale4Channels, 1, 1, rng);
    }

    /// image [B, C, H, W] -> tokens [B, N, d_model], N = (H/P)(W/P).
    TokenSequence<T> patch_embed(Tape<T>& tape, const Var<T>& image) {
        const auto& s = image.shape();
        if (s.size() != 4 || s[2] % cfg_.patch_size != 0 || s[3] % cfg_.patch_size != 0) {
            throw ShapeError("patch_embed: patch size " + std::to_string(cfg_.patch_size) + " does not divide image " +
                             to_string(s));
        }
        const std::size_t rows = s[2] / cfg_.patch_size, cols = s[3] / cfg_.patch_size;
        if (rows * cols != pos_.value.dim(0)) {
            throw ShapeError("patch_embed: image " + to_string(s) + " does not match the configured token grid");
        }
        const Var<T> tokens = embed_(tape, ops::patchify(image, cfg_.patch_size));
        return {ops::add_broadcast(tokens, tape.param(pos_)), rows, cols};
    }

    TokenSequence<T> encode(Tape<T>& tape, const Var<T>& image) {
        TokenSequence<T> seq = patch_embed(tape, image);
        for (auto& block : blocks_) seq.tokens = block(tape, seq.tokens);
        seq.tokens = norm_(tape, seq.tokens);
        return seq;
    }

    /// T0 = reshape(T); T1 = up2x(conv3x3(T0)); T2 = up2x(conv3x3(T1)).
    MultiScaleFeatures<T> postprocess(Tape<T>& tape, const TokenSequence<T>& seq) {
        MultiScaleFeatures<T> f;
        f.s16 = ops::tokens_to_map(seq.tokens, seq.grid_rows, seq.grid_cols);
        f.s8 = ops::upsample2x_nearest(up1_(tape, f.s16));
        f.s4 = ops::upsample2x_nearest(up2_(tape, f.s8));
        return f;
    }

    /// Pre_1: 1x1 conv to one channel, x4 upsampling, sigmoid.
    Var<T> view_head(Tape<T>& tape, const Var<T>& s4) { return prediction_head(head_(tape, s4), 4, head_mode_); }

    void parameters(ParamRefs<T>& out) {
        embed_.parameters(out);
        out.push_back(&pos_);
        for (auto& b : blocks_) b.parameters(out);
        norm_.parameters(out);
        up1_.parameters(out);
        up2_.parameters(out);
        head_.parameters(out);
    }

    const EncoderConfig& config() const { return cfg_; }
    std::vector<EncoderBlock<T>>& blocks() { return blocks_; }
    Parameter<T>& pos_embed() { return pos_; }
    nn::Conv2d<T>& head() { return head_; }

  private:
    EncoderConfig cfg_;
    HeadUpsample head_mode_ = HeadUpsample::bilinear;
    std::size_t grid_ = 0;
    nn::Linear<T> embed_;
    Parameter<T> pos_;
    std::vector<EncoderBlock<T>> blocks_;
    nn::LayerNorm<T> norm_;
    nn::Conv2d<T> up1_, up2_, head_;
};

}  // namespace futh
