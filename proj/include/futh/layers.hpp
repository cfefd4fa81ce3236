#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "futh/ops.hpp"
#include "futh/tape.hpp"
#include "futh/tensor.hpp"

namespace futh {

using Rng = std::mt19937_64;

/// Non-trainable state persisted alongside parameters (batch-norm running stats).
template <typename T>
struct NamedBuffer {
    std::string name;
    Tensor<T>* tensor;
};

template <typename T>
using ParamRefs = std::vector<Parameter<T>*>;

template <typename T>
using BufferRefs = std::vector<NamedBuffer<T>>;

namespace nn {

/// y = x W + b over the last dimension.
template <typename T>
class Linear {
  public:
    Linear() = default;
    Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng, double init_std = 0.02, bool bias = true)
        : w_(name + ".weight", Tensor<T>::normal(Shape{in, out}, rng, T{0}, static_cast<T>(init_std))),
          has_bias_(bias) {
        if (bias) b_ = Parameter<T>(name + ".bias", Tensor<T>(Shape{out}));
    }

    Var<T> operator()(Tape<T>& tape, const Var<T>& x) {
        const Var<T> w = tape.param(w_);
        if (!has_bias_) return ops::linear(x, w);
        const Var<T> b = tape.param(b_);
        return ops::linear(x, w, &b);
    }

    void parameters(ParamRefs<T>& out) {
        out.push_back(&w_);
        if (has_bias_) out.push_back(&b_);
    }

    Parameter<T>& weight() { return w_; }
    Parameter<T>& bias() { return b_; }

  private:
    Parameter<T> w_;
    Parameter<T> b_;
    bool has_bias_ = true;
};

/// Square-kernel convolution with "same" padding for stride 1.
template <typename T>
class Conv2d {
  public:
    Conv2d() = default;

    /// init_std <= 0 selects He-normal scaling sqrt(2 / fan_in).
    Conv2d(const std::string& name, std::size_t cin, std::size_t cout, std::size_t kernel, Rng& rng, bool bias = true,
           double init_std = 0.0)
        : pad_(kernel / 2), has_bias_(bias) {
        const double fan_in = static_cast<double>(cin * kernel * kernel);
        const double std = init_std > 0 ? init_std : std::sqrt(2.0 / fan_in);
        w_ = Parameter<T>(name + ".weight",
                          Tensor<T>::normal(Shape{cout, cin, kernel, kernel}, rng, T{0}, static_cast<T>(std)));
        if (bias) b_ = Parameter<T>(name + ".bias", Tensor<T>(Shape{cout}));
    }

    Var<T> operator()(Tape<T>& tape, const Var<T>& x) {
        Var<T> y = ops::conv2d(x, tape.param(w_), 1, pad_);
        if (has_bias_) y = ops::add_channel_bias(y, tape.param(b_));
        return y;
    }

    void parameters(ParamRefs<T>& out) {
        out.push_back(&w_);
        if (has_bias_) out.push_back(&b_);
    }

    std::size_t out_channels() const { return w_.value.dim(0); }
    Parameter<T>& weight() { return w_; }
    Parameter<T>& bias() { return b_; }

  private:
    Parameter<T> w_;
    Parameter<T> b_;
    std::size_t pad_ = 0;
    bool has_bias_ = true;
};

template <typename T>
class BatchNorm2d {
  public:
    BatchNorm2d() = default;
    BatchNorm2d(const std::string& name, std::size_t channels)
        : name_(name),
          gamma_(name + ".gamma", Tensor<T>::ones(Shape{channels})),
          beta_(name + ".beta", Tensor<T>(Shape{channels})),
          stats_(channels) {}

    Var<T> operator()(Tape<T>& tape, const Var<T>& x, bool training) {
        return ops::batchnorm_channel(x, tape.param(gamma_), tape.param(beta_), stats_, training);
    }

    void parameters(ParamRefs<T>& out) {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }

    void buffers(BufferRefs<T>& out) {
        out.push_back({name_ + ".running_mean", &stats_.running_mean});
        out.push_back({name_ + ".running_var", &stats_.running_var});
    }

    Parameter<T>& gamma() { return gamma_; }
    Parameter<T>& beta() { return beta_; }
    ops::BatchNormStats<T>& stats() { return stats_; }

  private:
    std::string name_;
    Parameter<T> gamma_;
    Parameter<T> beta_;
    ops::BatchNormStats<T> stats_;
};

template <typename T>
class LayerNorm {
  public:
    LayerNorm() = default;
    LayerNorm(const std::string& name, std::size_t dim)
        : gamma_(name + ".gamma", Tensor<T>::ones(Shape{dim})), beta_(name + ".beta", Tensor<T>(Shape{dim})) {}

    Var<T> operator()(Tape<T>& tape, const Var<T>& x) {
        return ops::layernorm_lastdim(x, tape.param(gamma_), tape.param(beta_));
    }

    void parameters(ParamRefs<T>& out) {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }

  private:
    Parameter<T> gamma_;
    Parameter<T> beta_;
};

/// Convolution unit: 3x3 convolution, batch norm, ReLU.
template <typename T>
class UniT {
  public:
    UniT() = default;
    UniT(const std::string& name, std::size_t cin, std::size_t cout, Rng& rng)
        : conv_(name + ".conv", cin, cout, 3, rng, false), bn_(name + ".bn", cout) {}

    Var<T> operator()(Tape<T>& tape, const Var<T>& x, bool training) {
        return ops::relu(bn_(tape, conv_(tape, x), training));
    }

    void parameters(ParamRefs<T>& out) {
        conv_.parameters(out);
        bn_.parameters(out);
    }

    void buffers(BufferRefs<T>& out) { bn_.buffers(out); }

    std::size_t out_channels() const { return conv_.out_channels(); }

  private:
    Conv2d<T> conv_;
    BatchNorm2d<T> bn_;
};

}  // namespace nn
}  // namespace futh
