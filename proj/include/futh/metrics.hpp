#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "futh/tensor.hpp"

namespace futh::metrics {

inline constexpr double kThreshold = 0.5;

struct Counts {
    std::size_t pred = 0, truth = 0, both = 0;
};

/// Pixel counts |P|, |G|, |P and G| of a thresholded prediction against a binary mask.
template <typename T>
Counts count(const Tensor<T>& pred, const Tensor<T>& gt, double threshold = kThreshold) {
    pred.require_same_shape(gt, "metrics");
    Counts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = static_cast<double>(pred[i]) >= threshold;
        const bool g = gt[i] >= T{0.5};
        c.pred += p;
        c.truth += g;
        c.both += p && g;
    }
    return c;
}

/// 2|P and G| / (|P| + |G|), with 0/0 = 1.
template <typename T>
double dice(const Tensor<T>& pred, const Tensor<T>& gt, double threshold = kThreshold) {
    const Counts c = count(pred, gt, threshold);
    const std::size_t denom = c.pred + c.truth;
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.both) / static_cast<double>(denom);
}

/// |P and G| / |P or G|, with 0/0 = 1.
template <typename T>
double iou(const Tensor<T>& pred, const Tensor<T>& gt, double threshold = kThreshold) {
    const Counts c = count(pred, gt, threshold);
    const std::size_t uni = c.pred + c.truth - c.both;
    return uni == 0 ? 1.0 : static_cast<double>(c.both) / static_cast<double>(uni);
}

/// Mean absolute error between a probability map and a mask.
template <typename T>
double mae(const Tensor<T>& prob, const Tensor<T>& gt) {
    prob.require_same_shape(gt, "mae");
    double acc = 0;
    for (std::size_t i = 0; i < prob.size(); ++i) acc += std::abs(static_cast<double>(prob[i]) - static_cast<double>(gt[i]));
    return acc / static_cast<double>(prob.size());
}

struct ImageScore {
    std::string id;
    double dice = 0, iou = 0, mae = 0;
};

struct MetricReport {
    std::vector<ImageScore> images;
    double mean_dice = 0, mean_iou = 0, mean_mae = 0;
    double threshold = kThreshold;

    void add(std::string id, double d, double i, double m) { images.push_back({std::move(id), d, i, m}); }

    /// Per-image arithmetic means.
    void finalize() {
        mean_dice = mean_iou = mean_mae = 0;
        if (images.empty()) return;
        for (const auto& s : images) {
            mean_dice += s.dice;
            mean_iou += s.iou;
            mean_mae += s.mae;
        }
        const double n = static_cast<double>(images.size());
        mean_dice /= n;
        mean_iou /= n;
        mean_mae /= n;
    }
};

template <typename T>
ImageScore score(std::string id, const Tensor<T>& prob, const Tensor<T>& gt, double threshold = kThreshold) {
    return {std::move(id), dice(prob, gt, threshold), iou(prob, gt, threshold), mae(prob, gt)};
}

}  // namespace futh::metrics
