// Analytic vs central-difference gradients, 64-bit, five seeds per op.

#include <gtest/gtest.h>

#include <functional>
#include <memory>
#include <set>

#include "futh/coop.hpp"
#include "futh/fusion.hpp"
#include "futh/gradcheck_suite.hpp"
#include "futh/transformer_branch.hpp"
#include "test_util.hpp"

using namespace futh;
using futh::test::random_tensor;

namespace {

constexpr double kTol = 1e-4;
constexpr int kSeeds = 5;

TEST(GradCheck, EveryOp) {
    const auto cases = gradcheck::op_cases();
    ASSERT_GE(cases.size(), 35u);
    for (const auto& c : cases) {
        for (int s = 0; s < kSeeds; ++s) {
            const auto r = gradcheck::check_op(c, 100 + static_cast<std::uint64_t>(s));
            EXPECT_FALSE(r.entries.empty()) << c.name;
            EXPECT_LT(r.max_rel_error, kTol) << c.name << " seed " << s;
        }
    }
}

TEST(GradCheck, OpNamesUnique) {
    std::set<std::string> names;
    for (const auto& c : gradcheck::op_cases()) EXPECT_TRUE(names.insert(c.name).second) << c.name;
}

TEST(GradCheck, ViewLoss) {
    // predictions must stay inside (0, 1); feed them through a sigmoid
    for (int s = 0; s < kSeeds; ++s) {
        Rng rng(200 + static_cast<std::uint64_t>(s));
        const auto gt = futh::test::random_mask({2, 1, 4, 4}, rng);
        Parameter<double> logits("logits", random_tensor({2, 1, 4, 4}, rng, 2.0));
        const gradcheck::Objective f = [&](Tape<double>& tape) {
            return view_loss(ops::sigmoid(tape.param(logits)), tape.constant(gt));
        };
        gradcheck::Options opt;
        opt.samples = 0;
        EXPECT_LT(gradcheck::check(f, {&logits}, opt).max_rel_error, kTol) << "seed " << s;
    }
}

TEST(GradCheck, EncoderBlockInput) {
    EncoderConfig cfg{1, 8, 2, 2.0, 16};
    for (int s = 0; s < kSeeds; ++s) {
        Rng rng(300 + static_cast<std::uint64_t>(s));
        EncoderBlock<double> block("b", cfg, rng);
        // larger weights than the 0.02 init so attention is not near-uniform
        ParamRefs<double> ps;
        block.parameters(ps);
        for (auto* p : ps) {
            if (p->value.rank() == 2) p->value = random_tensor(p->value.shape(), rng, 0.5);
        }
        Parameter<double> x("x", random_tensor({2, 4, 8}, rng));
        const gradcheck::Objective f = [&](Tape<double>& tape) { return ops::sum(block(tape, tape.param(x))); };
        gradcheck::Options opt;
        opt.samples = 0;
        EXPECT_LT(gradcheck::check(f, {&x}, opt).max_rel_error, kTol) << "seed " << s;
    }
}

TEST(GradCheck, GlffParameters) {
    Rng rng(400);
    FusionConfig fc;
    fc.cbam_reduction = 2;
    Glff<double> glff("glff", 3, 2, 4, fc, rng);
    const auto t = random_tensor({2, 3, 4, 4}, rng);
    const auto c = random_tensor({2, 2, 4, 4}, rng);
    ParamRefs<double> ps;
    glff.parameters(ps);
    const gradcheck::Objective f = [&](Tape<double>& tape) {
        return ops::mean(ops::mul(glff(tape, tape.constant(t), tape.constant(c), true),
                                  glff(tape, tape.constant(t), tape.constant(c), true)));
    };
    EXPECT_LT(gradcheck::check(f, ps, {}).max_rel_error, kTol);
}

}  // namespace
