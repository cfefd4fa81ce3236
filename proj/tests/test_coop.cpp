// View loss, weight solver, objective, Adam, decision and the training loop.

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "futh/coop.hpp"
#include "futh/io/dataset.hpp"
#include "test_util.hpp"

using namespace futh;
using futh::test::random_mask;
using futh::test::random_tensor;

namespace {

double loss_of(const Tensor<double>& p, const Tensor<double>& y) {
    Tape<double> tape;
    return view_loss(tape.constant(p), tape.constant(y)).value().item();
}

/// Per-pixel loop oracle for one batch of images.
double loss_oracle(const Tensor<double>& p, const Tensor<double>& y) {
    const std::size_t batch = p.dim(0), per = p.size() / batch;
    double total = 0;
    for (std::size_t b = 0; b < batch; ++b) {
        double inter = 0, uni = 0, bce = 0;
        for (std::size_t j = 0; j < per; ++j) {
            const double pv = p[b * per + j], yv = y[b * per + j];
            inter += yv * pv;
            uni += yv + pv - yv * pv;
            const double pc = std::min(std::max(pv, 1e-7), 1 - 1e-7);
            bce += -(yv * std::log(pc) + (1 - yv) * std::log(1 - pc));
        }
        total += (uni > 0 ? 1 - inter / uni : 0.0) + bce / static_cast<double>(per);
    }
    return total / static_cast<double>(batch);
}

TEST(ViewLoss, ConstantHalfPredictionClosedForm) {
    const Tensor<double> p(Shape{1, 1, 2, 2}, 0.5);
    const Tensor<double> y(Shape{1, 1, 2, 2}, {1, 0, 1, 0});
    EXPECT_NEAR(loss_of(p, y), 2.0 / 3.0 + std::log(2.0), 1e-12);
}

TEST(ViewLoss, PerfectPredictionNearZero) {
    Rng rng(1);
    const auto y = random_mask({2, 1, 8, 8}, rng);
    const double l = loss_of(y, y);
    EXPECT_GE(l, 0.0);
    EXPECT_LT(l, 1e-6);
}

TEST(ViewLoss, MatchesPixelLoopOracle) {
    for (int s = 0; s < 10; ++s) {
        Rng rng(10 + static_cast<std::uint64_t>(s));
        const auto y = random_mask({1, 1, 8, 8}, rng);
        const auto p = Tensor<double>::uniform({1, 1, 8, 8}, rng);
        EXPECT_NEAR(loss_of(p, y), loss_oracle(p, y), 1e-10);
        EXPECT_GE(loss_of(p, y), 0.0);
    }
}

TEST(ViewLoss, EmptyMaskEmptyPredictionHasNoIouTerm) {
    const Tensor<double> z(Shape{1, 1, 2, 2});
    EXPECT_NEAR(loss_of(z, z), -std::log(1 - 1e-7), 1e-15);
}

TEST(ViewLoss, PixelWeightsOfOneAreNeutral) {
    Rng rng(2);
    const auto y = random_mask({2, 1, 4, 4}, rng);
    const auto p = Tensor<double>::uniform({2, 1, 4, 4}, rng);
    const auto w = Tensor<double>::ones(p.shape());
    Tape<double> tape;
    EXPECT_NEAR(view_loss(tape.constant(p), tape.constant(y), &w).value().item(), loss_of(p, y), 1e-14);
}

TEST(ViewLoss, RejectsNonBinaryTruthAndShapeMismatch) {
    Tape<double> tape;
    const auto p = tape.constant(Tensor<double>(Shape{1, 1, 2, 2}, 0.5));
    EXPECT_THROW(view_loss(p, tape.constant(Tensor<double>(Shape{1, 1, 2, 2}, 0.5))), ContractError);
    EXPECT_THROW(view_loss(p, tape.constant(Tensor<double>(Shape{1, 1, 2, 3}))), ShapeError);
}

TEST(SolveWeights, SymmetryShiftAndSimplex) {
    for (double lambda : {0.1, 1.0, 10.0}) {
        const std::vector<double> same{0.4, 0.4, 0.4};
        for (double w : solve_weights(same, lambda).w) EXPECT_NEAR(w, 1.0 / 3.0, 1e-15);
        const std::vector<double> l{0.2, 0.5, 0.9}, shifted{5.2, 5.5, 5.9};
        const auto a = solve_weights(l, lambda), b = solve_weights(shifted, lambda);
        double sum = 0;
        for (std::size_t k = 0; k < 3; ++k) {
            EXPECT_NEAR(a[k], b[k], 1e-12);
            EXPECT_GT(a[k], 0.0);
            sum += a[k];
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
    EXPECT_THROW(solve_weights(std::vector<double>{1, 2, 3}, 0.0), DomainError);
    EXPECT_THROW(solve_weights(std::vector<double>{1, 2, 3}, -1.0), DomainError);
}

TEST(SolveWeights, HugeLossesDoNotOverflow) {
    const auto w = solve_weights(std::vector<double>{1e4, 1e4 + 1, 1e4 + 2}, 1e-3);
    EXPECT_NEAR(w[0], 1.0, 1e-12);
    EXPECT_TRUE(std::isfinite(w[2]));
}

TEST(SolveWeights, LambdaLimits) {
    const std::vector<double> l{0.3, 0.1, 0.7};
    for (double w : solve_weights(l, 1e6).w) EXPECT_NEAR(w, 1.0 / 3.0, 1e-6);
    const auto sharp = solve_weights(l, 1e-6);
    EXPECT_NEAR(sharp[1], 1.0, 1e-12);
}

TEST(Objective, ClosedForms) {
    const std::vector<double> ones{1, 1, 1}, u{1.0 / 3, 1.0 / 3, 1.0 / 3};
    EXPECT_NEAR(total_objective(u, ones, 1.0), 1 + std::log(1.0 / 3), 1e-12);
    const std::vector<double> e1{1, 0, 0}, l{0.7, 0.2, 0.4};
    EXPECT_DOUBLE_EQ(total_objective(e1, l, 1.0), 0.7);
}

TEST(Objective, SolverBeatsRandomSimplexPoints) {
    Rng rng(3);
    std::gamma_distribution<double> g(1.0, 1.0);
    const std::vector<double> l{0.2, 0.5, 0.9};
    for (double lambda : {0.1, 1.0, 10.0}) {
        const double best = total_objective(solve_weights(l, lambda).w, l, lambda);
        for (int i = 0; i < 1000; ++i) {
            std::vector<double> w{g(rng), g(rng), g(rng)};
            const double s = w[0] + w[1] + w[2];
            for (auto& v : w) v /= s;
            EXPECT_LE(best, total_objective(w, l, lambda) + 1e-15);
        }
    }
}

TEST(Decision, VertexSelectsViewBitwise) {
    Rng rng(4);
    std::array<Tensor<double>, kViews> views{Tensor<double>::uniform({1, 1, 4, 4}, rng),
                                              Tensor<double>::uniform({1, 1, 4, 4}, rng),
                                              Tensor<double>::uniform({1, 1, 4, 4}, rng)};
    for (std::size_t k = 0; k < kViews; ++k) {
        ViewWeights w{std::vector<double>(kViews, 0.0), 1.0};
        w.w[k] = 1.0;
        EXPECT_EQ(fuse_decision(w, views), views[k]);
    }
}

TEST(Decision, MatchesWeightedSumAndStaysInHull) {
    Rng rng(5);
    for (int c = 0; c < 20; ++c) {
        std::array<Tensor<double>, kViews> views{Tensor<double>::uniform({2, 1, 3, 3}, rng),
                                                  Tensor<double>::uniform({2, 1, 3, 3}, rng),
                                                  Tensor<double>::uniform({2, 1, 3, 3}, rng)};
        const auto w = solve_weights(std::vector<double>{random_tensor({1}, rng)[0], random_tensor({1}, rng)[0],
                                                         random_tensor({1}, rng)[0]},
                                     1.0);
        const auto out = fuse_decision(w, views);
        for (std::size_t i = 0; i < out.size(); ++i) {
            double ref = 0;
            for (std::size_t k = 0; k < kViews; ++k) ref += w[k] * views[k][i];
            EXPECT_EQ(out[i], ref);
            const double lo = std::min({views[0][i], views[1][i], views[2][i]});
            const double hi = std::max({views[0][i], views[1][i], views[2][i]});
            EXPECT_GE(out[i], lo);
            EXPECT_LE(out[i], hi);
        }
    }
}

TEST(Decision, IdenticalViewsAreFixedPoint) {
    Rng rng(6);
    const auto v = Tensor<double>::uniform({1, 1, 4, 4}, rng);
    const ViewWeights w{{0.2, 0.3, 0.5}, 1.0};
    const auto out = fuse_decision(w, std::array<Tensor<double>, kViews>{v, v, v});
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(out[i], v[i], 1e-15);
}

TEST(Adam, MatchesStraightLineTraceOnQuadraticBowl) {
    const std::vector<double> centre{1.0, -2.0, 0.5}, curvature{1.0, 3.0, 0.2};
    Parameter<double> p("p", Tensor<double>(Shape{3}, {0.0, 0.0, 0.0}));
    AdamConfig cfg;
    cfg.lr = 0.05;
    Adam<double> opt(cfg);

    std::vector<double> x(3, 0.0), m(3, 0.0), v(3, 0.0);
    for (int t = 1; t <= 10; ++t) {
        for (std::size_t i = 0; i < 3; ++i) p.grad[i] = curvature[i] * (p.value[i] - centre[i]);
        opt.step({&p});
        for (std::size_t i = 0; i < 3; ++i) {
            const double g = curvature[i] * (x[i] - centre[i]);
            m[i] = 0.9 * m[i] + 0.1 * g;
            v[i] = 0.999 * v[i] + 0.001 * g * g;
            const double mh = m[i] / (1 - std::pow(0.9, t));
            const double vh = v[i] / (1 - std::pow(0.999, t));
            x[i] -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
            EXPECT_NEAR(p.value[i], x[i], 1e-10) << "step " << t;
        }
    }
    EXPECT_EQ(opt.steps(), 10u);
}

TEST(Adam, NullUpdateAndSignStep) {
    Parameter<double> p("p", Tensor<double>(Shape{2}, {1.0, -1.0}));
    Adam<double> opt;
    opt.step({&p});
    EXPECT_EQ(p.value.vec(), (std::vector<double>{1.0, -1.0}));
    EXPECT_EQ(opt.steps(), 1u);

    Parameter<double> q("q", Tensor<double>(Shape{2}, {1.0, -1.0}));
    q.grad = Tensor<double>(Shape{2}, {3.0, -0.01});
    Adam<double> fresh;
    fresh.step({&q});
    EXPECT_NEAR(q.value[0], 1.0 - 7e-5, 1e-9);
    EXPECT_NEAR(q.value[1], -1.0 + 7e-5, 1e-9);
}

Batch<double> toy_batch(std::size_t size, std::uint64_t seed) {
    const auto samples = io::synth_dataset(2, size, seed);
    auto b = io::make_batches<float>(samples, 2).front();
    return {b.images.cast<double>(), b.masks.cast<double>()};
}

TEST(Trainer, AlternatingStepsDoNotIncreaseObjective) {
    FuTransHNet<double> model(futh::test::tiny_config(1));
    AdamConfig cfg;
    cfg.lr = 1e-6;
    CoopTrainer<double> trainer(model, 1.0, cfg);
    const auto batch = toy_batch(32, 9);
    const ViewWeights uniform{{1.0 / 3, 1.0 / 3, 1.0 / 3}, 1.0};
    for (int i = 0; i < 3; ++i) {
        const auto before = trainer.evaluate_losses(batch);
        // weight sub-step: optimal weights cannot be worse than the previous ones
        const auto prev = i == 0 ? uniform : trainer.last_weights();
        const auto w = solve_weights(before, 1.0);
        EXPECT_LE(total_objective(w, before), total_objective(prev, before) + 1e-12);
        // parameter sub-step with the weights held fixed
        const auto rep = trainer.step(batch);
        const auto after = trainer.evaluate_losses(batch);
        EXPECT_LE(total_objective(rep.weights, after), total_objective(rep.weights, before) + 1e-9);
    }
}

TEST(Trainer, WeightsStayOnSimplexAndEpochAverages) {
    FuTransHNet<float> model(futh::test::tiny_config(2));
    AdamConfig cfg;
    cfg.lr = 1e-3;
    CoopTrainer<float> trainer(model, 1.0, cfg);
    const auto batches = io::make_batches<float>(io::synth_dataset(4, 32, 3), 2);
    const auto rep = trainer.train_epoch(batches);
    EXPECT_EQ(rep.steps, 2u);
    EXPECT_NEAR(rep.weights[0] + rep.weights[1] + rep.weights[2], 1.0, 1e-9);
    EXPECT_NEAR(trainer.epoch_weights().w[0], rep.weights[0], 0.0);
    EXPECT_EQ(trainer.optimizer().steps(), 2u);
    EXPECT_THROW(trainer.train_epoch({}), ContractError);
    EXPECT_THROW(CoopTrainer<float>(model, 0.0), DomainError);
}

TEST(Trainer, BitwiseDeterministic) {
    const auto batches = io::make_batches<float>(io::synth_dataset(2, 32, 4), 2);
    auto run = [&] {
        FuTransHNet<float> model(futh::test::tiny_config(7));
        AdamConfig cfg;
        cfg.lr = 1e-3;
        CoopTrainer<float> trainer(model, 1.0, cfg);
        for (int i = 0; i < 3; ++i) trainer.train_epoch(batches);
        std::vector<Tensor<float>> out;
        for (auto* p : model.parameters()) out.push_back(p->value);
        for (const auto& b : model.buffers()) out.push_back(*b.tensor);
        return out;
    };
    const auto a = run(), b = run();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Trainer, NonFiniteLossNamesTheView) {
    FuTransHNet<float> model(futh::test::tiny_config(8));
    CoopTrainer<float> trainer(model, 1.0);
    auto batch = io::make_batches<float>(io::synth_dataset(1, 32, 5), 1).front();
    batch.images[0] = std::numeric_limits<float>::quiet_NaN();
    try {
        trainer.step(batch);
        FAIL() << "expected NonFiniteLossError";
    } catch (const NonFiniteLossError& e) {
        EXPECT_NE(std::string(e.what()).find("view 1 (transformer)"), std::string::npos) << e.what();
    }
}

}  // namespace
