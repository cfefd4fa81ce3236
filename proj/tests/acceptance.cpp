// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Criteria that share a number with a unit test use independent oracles here.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "futh/gradcheck_suite.hpp"
#include "futh/persistence.hpp"
#include "futh/pipeline.hpp"

#ifndef FUTH_SOURCE_DIR
#define FUTH_SOURCE_DIR "."
#endif

using namespace futh;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

RunConfig toy_run() { return load_config(fs::path(FUTH_SOURCE_DIR) / "configs" / "toy.cfg"); }

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto ops = gradcheck::run_op_suite(3);

    ModelConfig cfg = toy_run().model;
    gradcheck::Options opt;
    opt.samples = 64;
    const auto model = gradcheck::check_model(cfg, 2, opt);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const auto* w = model.worst();
    std::ostringstream os;
    os << ops.checks << " op checks, max rel err " << fmt("%.2e", ops.max_rel_error) << " (" << ops.worst
       << "); model " << model.entries.size() << " params, max rel err " << fmt("%.2e", model.max_rel_error);
    if (w) os << " (" << w->param << "[" << w->index << "])";
    os << "; " << fmt("%.1f", secs) << " s";
    return {ops.max_rel_error < 1e-4 && model.max_rel_error < 1e-4 && model.entries.size() >= 50 && secs < 120,
            os.str()};
}

// ---------------------------------------------------------------------------

/// Brute-force minimizer of the entropy-regularized objective on a simplex grid,
/// refined around the best grid point.
std::array<double, 3> brute_minimizer(const std::array<double, 3>& loss, double lambda) {
    auto f = [&](double a, double b) {
        const std::array<double, 3> w{a, b, 1 - a - b};
        return total_objective(w, loss, lambda);
    };
    double best = INFINITY, ba = 0, bb = 0;
    const int n = 1000;
    for (int i = 0; i <= n; ++i) {
        for (int j = 0; i + j <= n; ++j) {
            const double a = i / double(n), b = j / double(n);
            const double v = f(a, b);
            if (v < best) best = v, ba = a, bb = b;
        }
    }
    for (double step = 1e-4; step >= 1e-7; step /= 10) {
        const double ca = ba, cb = bb;
        for (int i = -20; i <= 20; ++i) {
            for (int j = -20; j <= 20; ++j) {
                const double a = ca + i * step, b = cb + j * step;
                if (a < 0 || b < 0 || a + b > 1) continue;
                const double v = f(a, b);
                if (v < best) best = v, ba = a, bb = b;
            }
        }
    }
    return {ba, bb, 1 - ba - bb};
}

Outcome weight_solver() {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> loss_dist(0.0, 2.0);
    double worst_comp = 0, worst_sum = 0, worst_shift = 0;
    for (int s = 0; s < 20; ++s) {
        const std::array<double, 3> loss{loss_dist(rng), loss_dist(rng), loss_dist(rng)};
        for (double lambda : {0.1, 1.0, 10.0}) {
            const auto w = solve_weights(loss, lambda);
            const auto ref = brute_minimizer(loss, lambda);
            double sum = 0;
            for (int k = 0; k < 3; ++k) {
                worst_comp = std::max(worst_comp, std::abs(w[k] - ref[k]));
                sum += w[k];
            }
            worst_sum = std::max(worst_sum, std::abs(sum - 1));
            for (double c : {-3.0, 0.5, 7.0}) {
                const std::array<double, 3> shifted{loss[0] + c, loss[1] + c, loss[2] + c};
                const auto ws = solve_weights(shifted, lambda);
                for (int k = 0; k < 3; ++k) worst_shift = std::max(worst_shift, std::abs(ws[k] - w[k]));
            }
        }
    }
    std::ostringstream os;
    os << "60 cases, max |w - brute| " << fmt("%.2e", worst_comp) << ", max |sum - 1| " << fmt("%.1e", worst_sum)
       << ", max shift drift " << fmt("%.1e", worst_shift);
    return {worst_comp < 1e-3 && worst_sum < 1e-9 && worst_shift < 1e-12, os.str()};
}

// ---------------------------------------------------------------------------

double loss_value(const Tensor<double>& p, const Tensor<double>& y) { return view_loss(p, y); }

Outcome loss_golden() {
    const Tensor<double> p(Shape{1, 1, 2, 2}, 0.5);
    const Tensor<double> y(Shape{1, 1, 2, 2}, {1, 1, 0, 0});
    const double total = loss_value(p, y);
    const double iou_term = 1.0 - 1.0 / 3.0;
    const double bce = std::log(2.0);
    const double closed = iou_term + bce;

    // BCE alone: against an empty mask the IoU term is exactly 1 - 0/2
    Tensor<double> zero_p(Shape{1, 1, 2, 2}, 0.5), zero_y(Shape{1, 1, 2, 2});
    const double bce_only = loss_value(zero_p, zero_y) - 1.0;

    double worst = 0;
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(0, 1);
    std::bernoulli_distribution bit(0.35);
    for (int s = 0; s < 50; ++s) {
        Tensor<double> pp(Shape{1, 1, 8, 8}), yy(Shape{1, 1, 8, 8});
        double inter = 0, uni = 0, b = 0;
        for (std::size_t i = 0; i < 64; ++i) {
            pp[i] = u(rng);
            yy[i] = bit(rng) ? 1 : 0;
            inter += pp[i] * yy[i];
            uni += pp[i] + yy[i] - pp[i] * yy[i];
            b -= yy[i] * std::log(pp[i]) + (1 - yy[i]) * std::log(1 - pp[i]);
        }
        const double oracle = (1 - inter / uni) + b / 64;
        worst = std::max(worst, std::abs(loss_value(pp, yy) - oracle));
    }
    std::ostringstream os;
    os << "total " << fmt("%.12f", total) << " (2/3 + ln 2 = " << fmt("%.12f", closed) << "), BCE " << fmt("%.9f", bce_only)
       << ", 50 random 8x8 pairs max err " << fmt("%.1e", worst);
    return {std::abs(total - closed) < 1e-9 && std::abs(bce_only - bce) < 1e-9 && std::abs(total - 1.359814) < 5e-7 &&
                worst < 1e-10,
            os.str()};
}

// ---------------------------------------------------------------------------

bool has_shape(const Var<float>& v, const Shape& s) { return v.shape() == s; }

Outcome shape_contract() {
    ModelConfig cfg;  // 352 px, depth 12, d_model 384
    cfg.seed = 5;
    FuTransHNet<float> model(cfg);
    Rng rng(6);
    const auto x = Tensor<float>::uniform({1, 3, 352, 352}, rng);
    Tape<float> tape;
    tape.set_grad_enabled(false);
    ForwardTrace<float> tr;
    const auto views = model.forward(tape, tape.constant(x), false, &tr);
    bool ok = has_shape(tr.transformer.s16, {1, 384, 22, 22}) && has_shape(tr.transformer.s8, {1, 128, 44, 44}) &&
              has_shape(tr.transformer.s4, {1, 64, 88, 88});
    float lo = 1, hi = 0;
    for (const auto& v : views.pre) {
        ok = ok && has_shape(v, {1, 1, 352, 352});
        for (float p : v.value().data()) lo = std::min(lo, p), hi = std::max(hi, p);
    }
    ok = ok && lo >= 0 && hi <= 1;
    std::ostringstream os;
    os << "T0 " << to_string(tr.transformer.s16.shape()) << ", T1 " << to_string(tr.transformer.s8.shape()) << ", T2 "
       << to_string(tr.transformer.s4.shape()) << ", views " << to_string(views.pre[0].shape()) << " in ["
       << fmt("%.3f", lo) << ", " << fmt("%.3f", hi) << "]";
    return {ok, os.str()};
}

// ---------------------------------------------------------------------------

Outcome toy_overfit() {
    const auto t0 = std::chrono::steady_clock::now();
    const RunConfig cfg = toy_run();
    FuTransHNet<float> model(cfg.model);
    const auto samples = load_samples(cfg);
    const auto batches = io::make_batches<float>(samples, cfg.batch_size);
    CoopTrainer<float> trainer(model, cfg.lambda, cfg.adam);
    std::size_t steps = 0;
    double worst_simplex = 0;
    bool in_range = true;
    while (steps < 300) {
        for (const auto& b : batches) {
            if (steps == 300) break;
            const auto rep = trainer.step(b);
            double s = 0;
            for (std::size_t k = 0; k < kViews; ++k) {
                s += rep.weights[k];
                in_range = in_range && rep.weights[k] >= 0 && rep.weights[k] <= 1;
            }
            worst_simplex = std::max(worst_simplex, std::abs(s - 1));
            ++steps;
        }
    }
    // one more pass for the epoch-mean weights the decision uses
    trainer.train_epoch(batches);
    const auto report = evaluate(model, samples, trainer.epoch_weights(), cfg.batch_size);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto& w = trainer.epoch_weights();
    std::ostringstream os;
    os << steps << "+" << batches.size() << " steps at lr " << cfg.adam.lr << ", fused mDice "
       << fmt("%.4f", report.mean_dice) << ", weights (" << fmt("%.3f", w[0]) << ", " << fmt("%.3f", w[1]) << ", "
       << fmt("%.3f", w[2]) << "), max |sum - 1| " << fmt("%.1e", worst_simplex) << ", " << fmt("%.0f", secs) << " s";
    return {report.mean_dice >= 0.95 && in_range && worst_simplex < 1e-9 && secs < 600, os.str()};
}

// ---------------------------------------------------------------------------

Outcome ablation() {
    ModelConfig base = toy_run().model;
    base.seed = 11;
    Rng rng(12);
    const auto x = Tensor<float>::uniform({2, 3, base.image_size, base.image_size}, rng);
    std::vector<Tensor<float>> fused;
    std::vector<std::string> names;
    bool shapes = true;
    for (bool glff : {true, false}) {
        for (bool dfm : {true, false}) {
            ModelConfig cfg = base;
            cfg.fusion.glff_on = glff;
            cfg.fusion.dfm_on = dfm;
            FuTransHNet<float> model(cfg);
            const auto views = model.predict(x);
            for (const auto& v : views) shapes = shapes && v.shape() == Shape{2, 1, base.image_size, base.image_size};
            fused.push_back(views[2]);
            names.push_back(std::string(glff ? "+" : "-") + "GLFF" + (dfm ? "+" : "-") + "DFM");
        }
    }
    double min_diff = INFINITY;
    for (std::size_t a = 0; a < fused.size(); ++a) {
        for (std::size_t b = a + 1; b < fused.size(); ++b) {
            double d = 0;
            for (std::size_t i = 0; i < fused[a].size(); ++i) d = std::max(d, double(std::abs(fused[a][i] - fused[b][i])));
            min_diff = std::min(min_diff, d);
        }
    }
    std::ostringstream os;
    os << "4 combinations, smallest pairwise max|diff| on the fusion view " << fmt("%.3e", min_diff)
       << (shapes ? ", shapes ok" : ", SHAPE MISMATCH");
    return {shapes && min_diff > 1e-6, os.str()};
}

// ---------------------------------------------------------------------------

/// Distance in units in the last place between two finite doubles of equal sign.
std::uint64_t ulp_distance(double a, double b) {
    std::uint64_t ia, ib;
    std::memcpy(&ia, &a, sizeof a);
    std::memcpy(&ib, &b, sizeof b);
    return ia > ib ? ia - ib : ib - ia;
}

Outcome metrics_oracle() {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> u(0, 1);
    std::size_t mismatches = 0, identity_exact = 0, identity_close = 0, identity_bitwise = 0;
    for (int s = 0; s < 100; ++s) {
        // vary the density so empty and full masks occur
        const double dp = s % 10 == 0 ? 0.0 : u(rng), dg = s % 17 == 0 ? 0.0 : u(rng);
        Tensor<double> prob(Shape{1, 1, 16, 16}), gt(Shape{1, 1, 16, 16});
        long np = 0, ng = 0, nb = 0;
        double abs_err = 0;
        for (std::size_t i = 0; i < 256; ++i) {
            prob[i] = u(rng) < dp ? 0.5 + 0.5 * u(rng) : 0.4999 * u(rng);
            gt[i] = u(rng) < dg ? 1 : 0;
            const bool p = prob[i] >= 0.5, g = gt[i] == 1;
            np += p, ng += g, nb += p && g;
            abs_err += std::abs(prob[i] - gt[i]);
        }
        const double d_ref = np + ng == 0 ? 1.0 : 2.0 * nb / double(np + ng);
        const double i_ref = np + ng - nb == 0 ? 1.0 : nb / double(np + ng - nb);
        const double m_ref = abs_err / 256;
        const double d = metrics::dice(prob, gt), i = metrics::iou(prob, gt), m = metrics::mae(prob, gt);
        mismatches += d != d_ref || i != i_ref || m != m_ref;

        // exact: with iou = b/u and u + b = |P| + |G|, 2 iou/(1 + iou) = 2b/(u + b) = dice
        const auto c = metrics::count(prob, gt);
        const std::size_t uni = c.pred + c.truth - c.both;
        identity_exact += uni == 0 ? d == 1.0 : 2 * c.both * (c.pred + c.truth) == 2 * c.both * (uni + c.both);
        // in doubles the right-hand side is rounded three times
        const double via_iou = 2 * i / (1 + i);
        identity_close += ulp_distance(via_iou, d) <= 2;
        identity_bitwise += via_iou == d;
    }
    std::ostringstream os;
    os << "100 pairs, oracle mismatches " << mismatches << ", dice = 2 iou/(1+iou) exact on counts " << identity_exact
       << "/100, within 2 ulp in doubles " << identity_close << "/100 (bitwise " << identity_bitwise << "/100)";
    return {mismatches == 0 && identity_exact == 100 && identity_close == 100, os.str()};
}

// ---------------------------------------------------------------------------

Outcome decision_properties() {
    Rng rng(31);
    bool vertex = true;
    std::size_t outside = 0;
    for (int s = 0; s < 20; ++s) {
        std::array<Tensor<float>, kViews> views;
        for (auto& v : views) v = Tensor<float>::uniform({2, 1, 8, 8}, rng);
        for (std::size_t k = 0; k < kViews; ++k) {
            std::vector<double> w(kViews, 0.0);
            w[k] = 1.0;
            vertex = vertex && fuse_decision(ViewWeights{w, 1.0}, views) == views[k];
        }
        std::uniform_real_distribution<double> ld(0, 3);
        const std::array<double, 3> loss{ld(rng), ld(rng), ld(rng)};
        const auto out = fuse_decision(solve_weights(loss, 0.5), views);
        for (std::size_t i = 0; i < out.size(); ++i) {
            const float lo = std::min({views[0][i], views[1][i], views[2][i]});
            const float hi = std::max({views[0][i], views[1][i], views[2][i]});
            outside += out[i] < lo || out[i] > hi;
        }
    }
    std::ostringstream os;
    os << "vertex weights " << (vertex ? "bitwise" : "NOT bitwise") << ", pixels outside [min, max]: " << outside
       << " of " << 20 * 128;
    return {vertex && outside == 0, os.str()};
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> trained_checkpoint(const RunConfig& cfg, const std::vector<io::SegmentationSample>& data) {
    FuTransHNet<float> model(cfg.model);
    const auto w = train(cfg, model, data);
    return model_checkpoint(model, w).bytes();
}

Outcome determinism_persistence() {
    RunConfig cfg = toy_run();
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.synth_count = 4;
    const auto data = load_samples(cfg);
    const auto a = trained_checkpoint(cfg, data);
    const auto b = trained_checkpoint(cfg, data);
    const bool identical = a == b;

    // round trip through a file into a fresh model
    const fs::path dir = fs::temp_directory_path() / ("futh_accept_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    const fs::path file = dir / "model.futh";
    {
        std::ofstream f(file, std::ios::binary);
        f.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size()));
    }
    RunConfig other = cfg;
    other.model.seed = cfg.model.seed + 1;
    FuTransHNet<float> fresh(other.model);
    const auto w = load_model(file, fresh, cfg.lambda);
    const bool round_trip = model_checkpoint(fresh, w).bytes() == a;

    // single-byte corruption at the header, the CRC and random positions
    std::mt19937_64 rng(5);
    std::vector<std::size_t> positions;
    for (std::size_t i = 0; i < 16; ++i) positions.push_back(i);
    for (std::size_t i = a.size() - 4; i < a.size(); ++i) positions.push_back(i);
    std::uniform_int_distribution<std::size_t> pos(0, a.size() - 1);
    while (positions.size() < 256) positions.push_back(pos(rng));
    std::uniform_int_distribution<int> flip(1, 255);
    std::size_t detected = 0;
    for (std::size_t p : positions) {
        auto bad = a;
        bad[p] ^= static_cast<std::uint8_t>(flip(rng));
        try {
            io::parse_checkpoint(bad);
        } catch (const io::CheckpointError&) {
            ++detected;
        }
    }
    bool truncation = false;
    try {
        io::parse_checkpoint(std::vector<std::uint8_t>(a.begin(), a.end() - 1));
    } catch (const io::CheckpointError&) {
        truncation = true;
    }
    fs::remove_all(dir);

    std::ostringstream os;
    os << "two runs " << (identical ? "bitwise identical" : "DIFFER") << " (" << a.size() << " bytes), round trip "
       << (round_trip ? "bitwise" : "NOT bitwise") << ", corruption detected " << detected << "/" << positions.size()
       << (truncation ? ", truncation detected" : ", truncation MISSED");
    return {identical && round_trip && detected == positions.size() && truncation, os.str()};
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"gradient suite", gradient_suite},
        {"weight solver vs brute force", weight_solver},
        {"loss golden values", loss_golden},
        {"shape contract at 352", shape_contract},
        {"toy overfit", toy_overfit},
        {"ablation structure", ablation},
        {"metrics oracle", metrics_oracle},
        {"decision properties", decision_properties},
        {"determinism and persistence", determinism_persistence},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("%s criterion %zu (%s): %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d of %zu criteria failed\n", failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
