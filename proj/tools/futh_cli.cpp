// futh: train, evaluate and run the hybrid segmentation model.
//
//   futh train     --config configs/toy.cfg --seed 7
//   futh eval      --config configs/toy.cfg --checkpoint out/model.futh
//   futh eval      --data-dir data --predictions out/pred
//   futh predict   --config configs/toy.cfg --checkpoint out/model.futh --data-dir data
//   futh gradcheck
//   futh synth     --config configs/toy.cfg --out-dir data
//
// Exit status: 0 on success, 1 on runtime failure, 2 on usage or config errors.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "futh/gradcheck_suite.hpp"
#include "futh/persistence.hpp"
#include "futh/pipeline.hpp"

namespace fs = std::filesystem;
using namespace futh;

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    std::optional<double> lambda;
    std::optional<std::size_t> image_size;
    bool no_glff = false;
    bool no_dfm = false;
    std::optional<std::string> out_dir;
    std::optional<std::string> data_dir;
    std::string checkpoint;
    std::string predictions;
    std::size_t view = 0;
    std::size_t grad_samples = 64;
    std::size_t grad_seeds = 3;
};

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config, "key = value config file");
    cmd->add_option("--seed", f.seed, "model and data seed");
    cmd->add_option("--epochs", f.epochs, "training epochs");
    cmd->add_option("--lambda", f.lambda, "view-weight temperature (> 0)");
    cmd->add_option("--image-size", f.image_size, "input side length, multiple of 16");
    cmd->add_flag("--no-glff", f.no_glff, "replace GLFF with a plain 1x1 fusion conv");
    cmd->add_flag("--no-dfm", f.no_dfm, "replace DFM with a plain head");
    cmd->add_option("--out-dir", f.out_dir, "output directory");
    cmd->add_option("--data-dir", f.data_dir, "directory with images/ and masks/; synthetic data if unset");
}

RunConfig resolve(const Flags& f) {
    RunConfig cfg = f.config.empty() ? RunConfig{} : load_config(f.config);
    if (f.seed) cfg.seed = cfg.model.seed = *f.seed;
    if (f.epochs) cfg.epochs = *f.epochs;
    if (f.lambda) cfg.lambda = *f.lambda;
    if (f.image_size) cfg.model.image_size = *f.image_size;
    if (f.no_glff) cfg.model.fusion.glff_on = false;
    if (f.no_dfm) cfg.model.fusion.dfm_on = false;
    if (f.out_dir) cfg.out_dir = *f.out_dir;
    if (f.data_dir) cfg.data_dir = *f.data_dir;
    cfg.validate();
    return cfg;
}

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::ofstream open_csv(const fs::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

int run_train(const RunConfig& cfg) {
    const auto samples = load_samples(cfg);
    if (samples.empty()) throw std::runtime_error("no training samples in " + cfg.data_dir);
    fs::create_directories(cfg.out_dir);
    FuTransHNet<float> model(cfg.model);
    std::cerr << "training " << model.parameter_count() << " parameters on " << samples.size() << " samples for "
              << cfg.epochs << " epochs\n";

    auto log = open_csv(fs::path(cfg.out_dir) / "train_log.csv");
    log << "epoch,loss_1,loss_2,loss_3,w_1,w_2,w_3,objective\n";
    const ViewWeights w = train<float>(cfg, model, samples, [&](std::size_t e, const EpochReport& r, const CoopTrainer<float>& t) {
        log << e;
        for (double l : r.losses) log << ',' << num(l);
        for (double v : t.epoch_weights().w) log << ',' << num(v);
        log << ',' << num(r.objective) << '\n';
        log.flush();
        if (e % cfg.checkpoint_every == 0 || e == cfg.epochs) {
            char name[64];
            std::snprintf(name, sizeof name, "checkpoint_epoch_%04zu.futh", e);
            save_model(fs::path(cfg.out_dir) / name, model, t.epoch_weights());
        }
        std::cerr << "epoch " << e << " losses " << num(r.losses[0]) << ' ' << num(r.losses[1]) << ' '
                  << num(r.losses[2]) << " objective " << num(r.objective) << '\n';
    });
    save_model(fs::path(cfg.out_dir) / "model.futh", model, w);
    return 0;
}

void write_metrics(const fs::path& path, const metrics::MetricReport& rep) {
    auto out = open_csv(path);
    out << "id,dice,iou,mae\n";
    for (const auto& s : rep.images) out << s.id << ',' << num(s.dice) << ',' << num(s.iou) << ',' << num(s.mae) << '\n';
    out << "mean," << num(rep.mean_dice) << ',' << num(rep.mean_iou) << ',' << num(rep.mean_mae) << '\n';
    std::cout << "mDice " << num(rep.mean_dice) << " mIoU " << num(rep.mean_iou) << " MAE " << num(rep.mean_mae)
              << " over " << rep.images.size() << " images\n";
}

/// Scores stored 8-bit prediction maps (<id>.pgm or .png) against the masks.
metrics::MetricReport score_predictions(const RunConfig& cfg, const fs::path& dir) {
    const auto samples = load_samples(cfg);
    metrics::MetricReport rep;
    for (const auto& s : samples) {
        fs::path p = dir / (s.id + ".pgm");
        if (!fs::exists(p)) p = dir / (s.id + ".png");
        if (!fs::exists(p)) throw std::runtime_error("no prediction for '" + s.id + "' in " + dir.string());
        const auto img = io::resize_nearest(io::read_image(p), cfg.model.image_size, cfg.model.image_size);
        if (img.channels != 1) throw std::runtime_error(p.string() + " is not grayscale");
        Tensor<float> prob(s.mask.shape());
        for (std::size_t i = 0; i < prob.size(); ++i) prob[i] = static_cast<float>(img.pixels[i]) / 255.0f;
        const auto sc = metrics::score(s.id, prob, s.mask);
        rep.add(sc.id, sc.dice, sc.iou, sc.mae);
    }
    rep.finalize();
    return rep;
}

int run_eval(const RunConfig& cfg, const Flags& f) {
    fs::create_directories(cfg.out_dir);
    metrics::MetricReport rep;
    if (!f.predictions.empty()) {
        rep = score_predictions(cfg, f.predictions);
    } else {
        FuTransHNet<float> model(cfg.model);
        const auto w = load_model(f.checkpoint, model, cfg.lambda);
        rep = evaluate(model, load_samples(cfg), source_weights(w, f.view), cfg.batch_size);
    }
    write_metrics(fs::path(cfg.out_dir) / "metrics.csv", rep);
    return 0;
}

/// Prediction only needs images; masks are not required.
std::vector<io::SegmentationSample> load_images(const RunConfig& cfg) {
    if (cfg.data_dir.empty()) return load_samples(cfg);
    std::map<std::string, fs::path> files;
    for (const auto& e : fs::directory_iterator(fs::path(cfg.data_dir) / "images")) {
        if (e.is_regular_file() && io::is_supported_image(e.path())) files[e.path().stem().string()] = e.path();
    }
    std::vector<io::SegmentationSample> out;
    for (const auto& [id, path] : files) {
        io::SegmentationSample s;
        s.id = id;
        s.image = io::prepare_image(io::read_image(path), cfg.model.image_size);
        s.mask = Tensor<float>(Shape{1, cfg.model.image_size, cfg.model.image_size});
        out.push_back(std::move(s));
    }
    return out;
}

int run_predict(const RunConfig& cfg, const Flags& f) {
    FuTransHNet<float> model(cfg.model);
    const auto w = load_model(f.checkpoint, model, cfg.lambda);
    const auto samples = load_images(cfg);
    const fs::path dir = fs::path(cfg.out_dir) / "pred";
    fs::create_directories(dir);
    const auto probs = predict_fused(model, samples, source_weights(w, f.view), cfg.batch_size);
    for (std::size_t i = 0; i < samples.size(); ++i) io::write_pnm(dir / (samples[i].id + ".pgm"), io::to_gray8(probs[i]));
    std::cout << "wrote " << samples.size() << " masks to " << dir.string() << '\n';
    return 0;
}

/// Writes the synthetic set as images/<id>.ppm and masks/<id>.pgm.
int run_synth(RunConfig cfg) {
    cfg.data_dir.clear();
    io::save_dataset(cfg.out_dir, load_samples(cfg));
    std::cout << "wrote " << cfg.synth_count << " samples to " << cfg.out_dir << '\n';
    return 0;
}

int run_gradcheck(const Flags& f) {
    // Without a config the end-to-end check uses the desk-scale model.
    RunConfig cfg;
    cfg.model.image_size = 64;
    cfg.model.encoder.depth = 2;
    if (!f.config.empty()) cfg = resolve(f);
    gradcheck::Options opt;
    opt.samples = f.grad_samples;

    const auto ops = gradcheck::run_op_suite(f.grad_seeds, opt);
    std::cout << ops.checks << " op checks, max relative error " << ops.max_rel_error << " (" << ops.worst << ")\n";
    const auto model = gradcheck::check_model(cfg.model, 2, opt);
    std::cout << model.entries.size() << " model parameters, max relative error " << model.max_rel_error;
    if (const auto* w = model.worst()) std::cout << " (" << w->param << '[' << w->index << "])";
    std::cout << '\n';
    const bool ok = ops.max_rel_error < 1e-4 && model.max_rel_error < 1e-4;
    std::cout << (ok ? "gradcheck passed\n" : "gradcheck FAILED\n");
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hybrid Transformer/CNN segmentation with learned view weights"};
    app.require_subcommand(1);
    Flags f;
    auto* train_cmd = app.add_subcommand("train", "train and write checkpoints plus train_log.csv");
    auto* eval_cmd = app.add_subcommand("eval", "score the fused decision and write metrics.csv");
    auto* predict_cmd = app.add_subcommand("predict", "write one 8-bit mask per input image");
    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    auto* synth_cmd = app.add_subcommand("synth", "write the synthetic ellipse set to --out-dir");
    for (auto* c : {train_cmd, eval_cmd, predict_cmd, synth_cmd}) add_common(c, f);
    auto* ckpt = eval_cmd->add_option("--checkpoint", f.checkpoint, "trained model");
    eval_cmd->add_option("--predictions", f.predictions, "score stored masks instead of running a model")
        ->excludes(ckpt);
    predict_cmd->add_option("--checkpoint", f.checkpoint, "trained model")->required();
    for (auto* c : {eval_cmd, predict_cmd}) {
        c->add_option("--view", f.view, "0 = comprehensive decision (default), 1..3 = one view")
            ->check(CLI::Range(0, 3));
    }
    grad_cmd->add_option("--config", f.config, "config whose model shape is checked");
    grad_cmd->add_option("--samples", f.grad_samples, "model parameters probed");
    grad_cmd->add_option("--seeds", f.grad_seeds, "seeds per op");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*grad_cmd) return run_gradcheck(f);
        const RunConfig cfg = resolve(f);
        if (*train_cmd) return run_train(cfg);
        if (*synth_cmd) return run_synth(cfg);
        if (*eval_cmd) {
            if (f.checkpoint.empty() && f.predictions.empty()) {
                std::cerr << "eval: need --checkpoint or --predictions\n";
                return 2;
            }
            return run_eval(cfg, f);
        }
        return run_predict(cfg, f);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
