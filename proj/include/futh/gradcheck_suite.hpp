#pragma once

// The finite-difference suite: every differentiable op on seeded random
// inputs, plus an end-to-end check of a whole model on sampled parameters.

#include <memory>
#include <string>
#include <vector>

#include "futh/coop.hpp"
#include "futh/gradcheck.hpp"
#include "futh/io/dataset.hpp"
#include "futh/model.hpp"

namespace futh::gradcheck {

using Inputs = std::vector<Var<double>>;
using OpFn = std::function<Var<double>(Tape<double>&, const Inputs&)>;

struct OpCase {
    std::string name;
    OpFn op;
    std::vector<Shape> shapes;
    double scale = 1.0;  // std of the random inputs
};

inline std::vector<OpCase> op_cases() {
    using ops::Reduce;
    std::vector<OpCase> c;
    auto add = [&](std::string n, std::vector<Shape> s, OpFn f, double scale = 1.0) {
        c.push_back({std::move(n), std::move(f), std::move(s), scale});
    };
    add("add", {{3, 4}, {3, 4}}, [](Tape<double>&, const Inputs& x) { return ops::add(x[0], x[1]); });
    add("mul", {{3, 4}, {3, 4}}, [](Tape<double>&, const Inputs& x) { return ops::mul(x[0], x[1]); });
    add("scale", {{5}}, [](Tape<double>&, const Inputs& x) { return ops::scale(x[0], 1.7); });
    add("add_broadcast", {{2, 3, 4}, {3, 4}}, [](Tape<double>&, const Inputs& x) { return ops::add_broadcast(x[0], x[1]); });
    add("sum", {{2, 3}}, [](Tape<double>&, const Inputs& x) { return ops::sum(x[0]); });
    add("mean", {{2, 3}}, [](Tape<double>&, const Inputs& x) { return ops::mean(x[0]); });
    add("reshape", {{3, 4}}, [](Tape<double>&, const Inputs& x) { return ops::reshape(x[0], Shape{6, 2}); });
    add("matmul", {{3, 5}, {5, 2}}, [](Tape<double>&, const Inputs& x) { return ops::matmul(x[0], x[1]); });
    add("linear", {{2, 3, 4}, {4, 5}, {5}}, [](Tape<double>&, const Inputs& x) { return ops::linear(x[0], x[1], &x[2]); });
    add("bmm", {{2, 3, 4}, {2, 4, 3}}, [](Tape<double>&, const Inputs& x) { return ops::bmm(x[0], x[1]); });
    add("bmm_transposed", {{2, 3, 4}, {2, 5, 4}}, [](Tape<double>&, const Inputs& x) { return ops::bmm(x[0], x[1], true); });
    add("split_heads", {{2, 3, 4}}, [](Tape<double>&, const Inputs& x) { return ops::split_heads(x[0], 2); });
    add("merge_heads", {{4, 3, 2}}, [](Tape<double>&, const Inputs& x) { return ops::merge_heads(x[0], 2); });
    add("softmax", {{3, 5}}, [](Tape<double>&, const Inputs& x) { return ops::softmax_lastdim(x[0]); }, 2.0);
    add("relu", {{4, 5}}, [](Tape<double>&, const Inputs& x) { return ops::relu(x[0]); });
    add("gelu", {{4, 5}}, [](Tape<double>&, const Inputs& x) { return ops::gelu(x[0]); }, 2.0);
    add("sigmoid", {{4, 5}}, [](Tape<double>&, const Inputs& x) { return ops::sigmoid(x[0]); }, 2.0);
    add("layernorm", {{2, 3, 6}, {6}, {6}},
        [](Tape<double>&, const Inputs& x) { return ops::layernorm_lastdim(x[0], x[1], x[2]); });
    add("batchnorm_train", {{2, 3, 3, 3}, {3}, {3}}, [](Tape<double>&, const Inputs& x) {
        ops::BatchNormStats<double> st(3);
        return ops::batchnorm_channel(x[0], x[1], x[2], st, true);
    });
    add("batchnorm_eval", {{2, 3, 3, 3}, {3}, {3}}, [](Tape<double>&, const Inputs& x) {
        ops::BatchNormStats<double> st(3);
        st.running_mean.fill(0.3);
        st.running_var.fill(2.0);
        return ops::batchnorm_channel(x[0], x[1], x[2], st, false);
    });
    add("conv3x3", {{2, 3, 5, 5}, {4, 3, 3, 3}}, [](Tape<double>&, const Inputs& x) { return ops::conv2d(x[0], x[1], 1, 1); });
    add("conv_stride2", {{1, 2, 5, 5}, {2, 2, 3, 3}},
        [](Tape<double>&, const Inputs& x) { return ops::conv2d(x[0], x[1], 2, 1); });
    add("conv1x1", {{2, 3, 4, 4}, {2, 3, 1, 1}}, [](Tape<double>&, const Inputs& x) { return ops::conv2d(x[0], x[1]); });
    add("channel_bias", {{2, 3, 2, 2}, {3}}, [](Tape<double>&, const Inputs& x) { return ops::add_channel_bias(x[0], x[1]); });
    add("upsample2x_nearest", {{1, 2, 3, 3}}, [](Tape<double>&, const Inputs& x) { return ops::upsample2x_nearest(x[0]); });
    add("upsample_bilinear", {{1, 2, 3, 3}}, [](Tape<double>&, const Inputs& x) { return ops::upsample_bilinear(x[0], 4); });
    add("avgpool2x2", {{1, 2, 4, 4}}, [](Tape<double>&, const Inputs& x) { return ops::avgpool2x2(x[0]); });
    add("concat_channels", {{2, 1, 3, 3}, {2, 2, 3, 3}},
        [](Tape<double>&, const Inputs& x) { return ops::concat_channels<double>({x[0], x[1]}); });
    add("slice_channels", {{2, 4, 2, 2}}, [](Tape<double>&, const Inputs& x) { return ops::slice_channels(x[0], 1, 3); });
    add("global_pool_mean", {{2, 3, 3, 3}}, [](Tape<double>&, const Inputs& x) { return ops::global_pool(x[0], Reduce::mean); });
    add("global_pool_max", {{2, 3, 3, 3}}, [](Tape<double>&, const Inputs& x) { return ops::global_pool(x[0], Reduce::max); });
    add("channel_pool_mean", {{2, 3, 3, 3}}, [](Tape<double>&, const Inputs& x) { return ops::channel_pool(x[0], Reduce::mean); });
    add("channel_pool_max", {{2, 3, 3, 3}}, [](Tape<double>&, const Inputs& x) { return ops::channel_pool(x[0], Reduce::max); });
    add("scale_channels", {{2, 3, 2, 2}, {2, 3}}, [](Tape<double>&, const Inputs& x) { return ops::scale_channels(x[0], x[1]); });
    add("scale_pixels", {{2, 3, 2, 2}, {2, 1, 2, 2}}, [](Tape<double>&, const Inputs& x) { return ops::scale_pixels(x[0], x[1]); });
    add("patchify", {{2, 3, 4, 4}}, [](Tape<double>&, const Inputs& x) { return ops::patchify(x[0], 2); });
    add("tokens_to_map", {{2, 6, 4}}, [](Tape<double>&, const Inputs& x) { return ops::tokens_to_map(x[0], 2, 3); });
    add("map_to_tokens", {{2, 4, 2, 3}}, [](Tape<double>&, const Inputs& x) { return ops::map_to_tokens(x[0]); });
    // predictions must stay inside (0, 1): feed the loss through a sigmoid
    add("view_loss", {{2, 1, 4, 4}}, [](Tape<double>& tape, const Inputs& x) {
        Tensor<double> gt(Shape{2, 1, 4, 4});
        for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = (i * 7 + 3) % 5 < 2 ? 1.0 : 0.0;
        return view_loss(ops::sigmoid(x[0]), tape.constant(gt));
    }, 2.0);
    return c;
}

/// Max relative error of one op on one seed. The output is projected onto a
/// fixed random direction so every element contributes with a distinct weight.
inline Result check_op(const OpCase& c, std::uint64_t seed, Options opt = {}) {
    Rng rng(seed);
    std::vector<std::unique_ptr<Parameter<double>>> owned;
    std::vector<Parameter<double>*> params;
    for (std::size_t i = 0; i < c.shapes.size(); ++i) {
        owned.push_back(std::make_unique<Parameter<double>>(
            c.name + ".in" + std::to_string(i), Tensor<double>::normal(c.shapes[i], rng, 0.0, c.scale)));
        params.push_back(owned.back().get());
    }
    std::shared_ptr<Tensor<double>> dir;
    const Objective f = [&](Tape<double>& tape) {
        Inputs in;
        for (auto* p : params) in.push_back(tape.param(*p));
        const Var<double> out = c.op(tape, in);
        if (!dir) {
            Rng r2(seed ^ 0x9E3779B97F4A7C15ull);
            dir = std::make_shared<Tensor<double>>(Tensor<double>::normal(out.shape(), r2));
        }
        return ops::sum(ops::mul(out, tape.constant(*dir)));
    };
    opt.samples = 0;
    return check(f, params, opt);
}

struct OpSuiteReport {
    std::size_t checks = 0;
    double max_rel_error = 0;
    std::string worst;
};

inline OpSuiteReport run_op_suite(std::size_t seeds = 5, const Options& opt = {}) {
    OpSuiteReport rep;
    for (const auto& c : op_cases()) {
        for (std::size_t s = 0; s < seeds; ++s) {
            const Result r = check_op(c, 1000 + s, opt);
            ++rep.checks;
            if (r.max_rel_error >= rep.max_rel_error) {
                rep.max_rel_error = r.max_rel_error;
                rep.worst = c.name + " (seed " + std::to_string(s) + ")";
            }
        }
    }
    return rep;
}

/// End-to-end check: mean of the three view losses on a synthetic batch,
/// training-mode forward, gradients w.r.t. sampled model parameters.
inline Result check_model(const ModelConfig& cfg, std::size_t batch, const Options& opt = {}) {
    FuTransHNet<double> model(cfg);
    const auto samples = io::synth_dataset(batch, cfg.image_size, cfg.seed + 1);
    const auto b = io::make_batches<double>(samples, batch).front();
    const Tensor<double>& images = b.images;
    const Tensor<double>& masks = b.masks;
    const Objective f = [&](Tape<double>& tape) {
        const auto views = model.forward(tape, tape.constant(images), true);
        const Var<double> gt = tape.constant(masks);
        Var<double> total = view_loss(views.pre[0], gt);
        for (std::size_t k = 1; k < kViews; ++k) total = ops::add(total, view_loss(views.pre[k], gt));
        return ops::scale(total, 1.0 / kViews);
    };
    return check(f, model.parameters(), opt);
}

}  // namespace futh::gradcheck
