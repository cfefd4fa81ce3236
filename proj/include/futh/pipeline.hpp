#pragma once

// Glue shared by the command-line tool and the acceptance run: data loading,
// the epoch loop and evaluation of the comprehensive decision.

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "futh/config.hpp"
#include "futh/coop.hpp"
#include "futh/io/dataset.hpp"
#include "futh/metrics.hpp"
#include "futh/model.hpp"

namespace futh {

/// Images under cfg.data_dir, or the synthetic ellipse set when it is empty.
inline std::vector<io::SegmentationSample> load_samples(const RunConfig& cfg) {
    if (cfg.data_dir.empty()) return io::synth_dataset(cfg.synth_count, cfg.model.image_size, cfg.seed);
    return io::load_dataset(cfg.data_dir, cfg.model.image_size);
}

template <typename T>
using EpochCallback = std::function<void(std::size_t epoch, const EpochReport&, const CoopTrainer<T>&)>;

/// Runs up to cfg.epochs epochs over the samples in fixed order, stopping early
/// on a plateau when enabled; returns the decision weights of the last epoch.
template <typename T>
ViewWeights train(const RunConfig& cfg, FuTransHNet<T>& model, const std::vector<io::SegmentationSample>& samples,
                  const EpochCallback<T>& on_epoch = {}) {
    const auto batches = io::make_batches<T>(samples, cfg.batch_size);
    CoopTrainer<T> trainer(model, cfg.lambda, cfg.adam);
    double best = std::numeric_limits<double>::infinity();
    std::size_t stale = 0;
    for (std::size_t e = 1; e <= cfg.epochs; ++e) {
        const EpochReport rep = trainer.train_epoch(batches);
        if (on_epoch) on_epoch(e, rep, trainer);
        if (cfg.early_stop_patience == 0) continue;
        if (rep.objective < best - cfg.early_stop_min_delta) {
            best = rep.objective;
            stale = 0;
        } else if (++stale >= cfg.early_stop_patience) {
            break;
        }
    }
    return trainer.epoch_weights();
}

/// Decision weights that select one source: 0 is the comprehensive decision,
/// k in 1..3 picks view k alone.
inline ViewWeights source_weights(const ViewWeights& decision, std::size_t source) {
    if (source == 0) return decision;
    if (source > kViews) throw ConfigError("view must be 0 (decision) or 1.." + std::to_string(kViews));
    ViewWeights w{std::vector<double>(kViews, 0.0), decision.lambda};
    w.w[source - 1] = 1.0;
    return w;
}

/// Fused probability maps, one [1, 1, H, W] tensor per sample.
template <typename T>
std::vector<Tensor<T>> predict_fused(FuTransHNet<T>& model, const std::vector<io::SegmentationSample>& samples,
                                     const ViewWeights& w, std::size_t batch_size) {
    std::vector<Tensor<T>> out;
    for (const auto& b : io::make_batches<T>(samples, batch_size)) {
        const Tensor<T> fused = fuse_decision(w, model.predict(b.images));
        const std::size_t n = fused.dim(0), per = fused.size() / n;
        for (std::size_t i = 0; i < n; ++i) {
            Tensor<T> one(Shape{1, 1, fused.dim(2), fused.dim(3)});
            std::copy_n(fused.data().begin() + i * per, per, one.data().begin());
            out.push_back(std::move(one));
        }
    }
    return out;
}

template <typename T>
metrics::MetricReport evaluate(FuTransHNet<T>& model, const std::vector<io::SegmentationSample>& samples,
                               const ViewWeights& w, std::size_t batch_size) {
    const auto probs = predict_fused(model, samples, w, batch_size);
    metrics::MetricReport rep;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Tensor<T> gt = samples[i].mask.template cast<T>().reshaped(probs[i].shape());
        const auto s = metrics::score(samples[i].id, probs[i], gt);
        rep.add(s.id, s.dice, s.iou, s.mae);
    }
    rep.finalize();
    return rep;
}

}  // namespace futh
