#pragma once

// Multi-view cooperative training: per-view segmentation loss, entropy-regularized
// closed-form view weights, Adam updates, the alternating training loop, and the
// weighted comprehensive decision.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "futh/model.hpp"
#include "futh/ops.hpp"

namespace futh {

// ---------------------------------------------------------------------------
// Per-view loss

inline constexpr double kProbClip = 1e-7;

/// Soft-IoU plus mean binary cross-entropy, averaged over the batch.
///
/// Per image: (1 - sum(w*y*p) / sum(w*(y + p - y*p))) + sum(w*bce(p, y)) / sum(w),
/// with p clipped to [1e-7, 1 - 1e-7] inside the logarithms and w an optional
/// pixel weight map (uniform when absent). The gradient through the clip is zero
/// where it saturates.
template <typename T>
Var<T> view_loss(const Var<T>& pred, const Var<T>& gt, const Tensor<T>* pixel_weights = nullptr) {
    auto& tape = ops::detail::tape_of(pred, gt);
    const auto& ps = pred.shape();
    if (ps != gt.shape()) {
        throw ShapeError("view_loss: prediction " + to_string(ps) + " vs ground truth " + to_string(gt.shape()));
    }
    if (pixel_weights != nullptr && pixel_weights->shape() != ps) {
        throw ShapeError("view_loss: pixel weight map " + to_string(pixel_weights->shape()));
    }
    const auto& p = pred.value();
    const auto& y = gt.value();
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] != T{0} && y[i] != T{1}) throw ContractError("view_loss: ground truth is not binary");
    }
    const std::size_t batch = ps.empty() ? 1 : ps[0];
    const std::size_t per = p.size() / batch;
    const T lo = static_cast<T>(kProbClip), hi = static_cast<T>(1.0 - kProbClip);
    auto weight = [pixel_weights](std::size_t i) { return pixel_weights ? (*pixel_weights)[i] : T{1}; };

    std::vector<T> inter(batch), uni(batch), wsum(batch);
    T total{0};
    for (std::size_t b = 0; b < batch; ++b) {
        T bce{0};
        for (std::size_t j = 0; j < per; ++j) {
            const std::size_t i = b * per + j;
            const T w = weight(i);
            inter[b] += w * y[i] * p[i];
            uni[b] += w * (y[i] + p[i] - y[i] * p[i]);
            wsum[b] += w;
            const T pc = std::clamp(p[i], lo, hi);
            bce -= w * (y[i] * std::log(pc) + (T{1} - y[i]) * std::log(T{1} - pc));
        }
        const T iou = uni[b] > T{0} ? T{1} - inter[b] / uni[b] : T{0};
        total += iou + bce / wsum[b];
    }
    total /= static_cast<T>(batch);

    const Tensor<T> weights = pixel_weights ? *pixel_weights : Tensor<T>{};
    return tape.record(Tensor<T>::scalar(total), {pred, gt},
                       [pred, gt, weights, inter, uni, wsum, batch, per, lo, hi](const Tensor<T>& g, Tape<T>& t) {
                           if (!pred.requires_grad()) return;
                           auto& gp = t.grad_buffer(pred);
                           const auto& p = pred.value();
                           const auto& y = gt.value();
                           const T scale = g[0] / static_cast<T>(batch);
                           for (std::size_t b = 0; b < batch; ++b) {
                               for (std::size_t j = 0; j < per; ++j) {
                                   const std::size_t i = b * per + j;
                                   const T w = weights.empty() ? T{1} : weights[i];
                                   T d{0};
                                   if (uni[b] > T{0}) {
                                       d -= w * (y[i] * uni[b] - inter[b] * (T{1} - y[i])) / (uni[b] * uni[b]);
                                   }
                                   if (p[i] > lo && p[i] < hi) {
                                       d -= w * (y[i] / p[i] - (T{1} - y[i]) / (T{1} - p[i])) / wsum[b];
                                   }
                                   gp[i] += scale * d;
                               }
                           }
                       });
}

/// Convenience overload on plain tensors.
template <typename T>
T view_loss(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>* pixel_weights = nullptr) {
    Tape<T> tape;
    tape.set_grad_enabled(false);
    return view_loss(tape.constant(pred), tape.constant(gt), pixel_weights).value().item();
}

// ---------------------------------------------------------------------------
// View weights

/// Simplex weights over views and the temperature that produced them.
struct ViewWeights {
    std::vector<double> w;
    double lambda = 1.0;

    double operator[](std::size_t k) const { return w[k]; }
    std::size_t size() const { return w.size(); }
};

/// Closed-form minimizer of the entropy-regularized objective over the simplex:
/// w_k = exp(-loss_k / lambda) / sum_h exp(-loss_h / lambda), evaluated with a max shift.
inline ViewWeights solve_weights(std::span<const double> losses, double lambda) {
    if (!(lambda > 0) || !std::isfinite(lambda)) {
        throw DomainError("solve_weights: lambda must be a positive finite number");
    }
    if (losses.empty()) throw ContractError("solve_weights: no losses");
    for (double l : losses) {
        if (!std::isfinite(l)) throw DomainError("solve_weights: non-finite loss");
    }
    const double lo = *std::min_element(losses.begin(), losses.end());
    ViewWeights out{std::vector<double>(losses.size()), lambda};
    double z = 0;
    for (std::size_t k = 0; k < losses.size(); ++k) {
        out.w[k] = std::exp(-(losses[k] - lo) / lambda);
        z += out.w[k];
    }
    for (auto& v : out.w) v /= z;
    return out;
}

/// sum_k w_k * loss_k + lambda * sum_k w_k ln w_k, with 0 ln 0 = 0.
inline double total_objective(std::span<const double> w, std::span<const double> losses, double lambda) {
    if (w.size() != losses.size()) throw ShapeError("total_objective: weight/loss length mismatch");
    double fit = 0, entropy = 0;
    for (std::size_t k = 0; k < w.size(); ++k) {
        fit += w[k] * losses[k];
        if (w[k] > 0) entropy += w[k] * std::log(w[k]);
    }
    return fit + lambda * entropy;
}

inline double total_objective(const ViewWeights& w, std::span<const double> losses) {
    return total_objective(w.w, losses, w.lambda);
}

// ---------------------------------------------------------------------------
// Comprehensive decision

/// Out = sum_k w_k * Pre_k, accumulated in view order.
template <typename T>
Tensor<T> fuse_decision(std::span<const double> w, std::span<const Tensor<T>> views) {
    if (views.empty() || w.size() != views.size()) {
        throw ShapeError("fuse_decision: " + std::to_string(w.size()) + " weights for " +
                         std::to_string(views.size()) + " views");
    }
    Tensor<T> out(views.front().shape());
    for (std::size_t k = 0; k < views.size(); ++k) {
        views[k].require_same_shape(out, "fuse_decision");
        const T wk = static_cast<T>(w[k]);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += wk * views[k][i];
    }
    return out;
}

template <typename T>
Tensor<T> fuse_decision(const ViewWeights& w, const std::array<Tensor<T>, kViews>& views) {
    return fuse_decision<T>(std::span<const double>(w.w), std::span<const Tensor<T>>(views));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    double lr = 7e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed, ordered parameter list.
template <typename T>
class Adam {
  public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(const ParamRefs<T>& params) {
        if (m_.empty()) {
            for (auto* p : params) {
                m_.emplace_back(p->value.shape());
                v_.emplace_back(p->value.shape());
            }
        }
        if (m_.size() != params.size()) throw ContractError("adam: parameter list changed between steps");
        ++step_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T step_size = static_cast<T>(cfg_.lr / c1);
        const T inv_c2 = static_cast<T>(1.0 / c2);
        const T eps = static_cast<T>(cfg_.eps);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = *params[i];
            p.value.require_same_shape(m_[i], "adam");
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < p.value.size(); ++j) {
                const T g = p.grad[j];
                m[j] = b1 * m[j] + (T{1} - b1) * g;
                v[j] = b2 * v[j] + (T{1} - b2) * g * g;
                p.value[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_c2) + eps);
            }
        }
    }

    std::size_t steps() const { return step_; }
    const AdamConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    const std::vector<Tensor<T>>& first_moments() const { return m_; }
    const std::vector<Tensor<T>>& second_moments() const { return v_; }

  private:
    AdamConfig cfg_;
    std::vector<Tensor<T>> m_, v_;
    std::size_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Alternating training loop

template <typename T>
struct Batch {
    Tensor<T> images;  // [B, C, H, W]
    Tensor<T> masks;   // [B, 1, H, W], binary
};

struct StepReport {
    std::array<double, kViews> losses{};
    ViewWeights weights;
    double objective = 0;
};

struct EpochReport {
    std::array<double, kViews> losses{};
    std::array<double, kViews> weights{};
    double objective = 0;
    std::size_t steps = 0;
};

inline const char* view_name(std::size_t k) {
    static constexpr std::array<const char*, kViews> names{"transformer", "cnn", "fusion"};
    return names.at(k);
}

class NonFiniteLossError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Owns the optimizer; alternates the closed-form weight step and an Adam step per batch.
template <typename T>
class CoopTrainer {
  public:
    CoopTrainer(FuTransHNet<T>& model, double lambda, AdamConfig adam = {})
        : model_(model), params_(model.parameters()), opt_(adam), lambda_(lambda) {
        if (!(lambda > 0)) throw DomainError("lambda must be positive");
    }

    /// Per-view losses on a batch with the current parameters (training-mode forward, no update).
    std::array<double, kViews> evaluate_losses(const Batch<T>& batch) {
        Tape<T> tape;
        tape.set_grad_enabled(false);
        const auto views = model_.forward(tape, tape.constant(batch.images), true);
        const Var<T> gt = tape.constant(batch.masks);
        std::array<double, kViews> out{};
        for (std::size_t k = 0; k < kViews; ++k) {
            out[k] = static_cast<double>(view_loss(views.pre[k], gt).value().item());
        }
        return out;
    }

    /// Forward all views, solve the weights with parameters fixed, then one Adam step with weights fixed.
    StepReport step(const Batch<T>& batch) {
        Tape<T> tape;
        const auto views = model_.forward(tape, tape.constant(batch.images), true);
        const Var<T> gt = tape.constant(batch.masks);
        std::array<Var<T>, kViews> loss_vars;
        StepReport rep;
        for (std::size_t k = 0; k < kViews; ++k) {
            loss_vars[k] = view_loss(views.pre[k], gt);
            rep.losses[k] = static_cast<double>(loss_vars[k].value().item());
            if (!std::isfinite(rep.losses[k])) {
                throw NonFiniteLossError(std::string("non-finite loss in view ") + std::to_string(k + 1) + " (" +
                                         view_name(k) + ")");
            }
        }
        rep.weights = solve_weights(rep.losses, lambda_);
        rep.objective = total_objective(rep.weights, rep.losses);

        Var<T> total = ops::scale(loss_vars[0], static_cast<T>(rep.weights[0]));
        for (std::size_t k = 1; k < kViews; ++k) {
            total = ops::add(total, ops::scale(loss_vars[k], static_cast<T>(rep.weights[k])));
        }
        model_.zero_grad();
        tape.backward(total);
        opt_.step(params_);
        weights_ = rep.weights;
        return rep;
    }

    EpochReport train_epoch(const std::vector<Batch<T>>& batches) {
        if (batches.empty()) throw ContractError("train_epoch: no batches");
        EpochReport rep;
        for (const auto& b : batches) {
            const StepReport s = step(b);
            for (std::size_t k = 0; k < kViews; ++k) {
                rep.losses[k] += s.losses[k];
                rep.weights[k] += s.weights[k];
            }
            rep.objective += s.objective;
            ++rep.steps;
        }
        const double n = static_cast<double>(rep.steps);
        for (std::size_t k = 0; k < kViews; ++k) {
            rep.losses[k] /= n;
            rep.weights[k] /= n;
        }
        rep.objective /= n;
        epoch_weights_ = ViewWeights{std::vector<double>(rep.weights.begin(), rep.weights.end()), lambda_};
        return rep;
    }

    /// Weights of the most recent step.
    const ViewWeights& last_weights() const { return weights_; }
    /// Mean weights of the most recent epoch; used for the comprehensive decision.
    const ViewWeights& epoch_weights() const { return epoch_weights_; }
    Adam<T>& optimizer() { return opt_; }
    double lambda() const { return lambda_; }

  private:
    FuTransHNet<T>& model_;
    ParamRefs<T> params_;
    Adam<T> opt_;
    double lambda_;
    ViewWeights weights_{std::vector<double>(kViews, 1.0 / kViews), 1.0};
    ViewWeights epoch_weights_{std::vector<double>(kViews, 1.0 / kViews), 1.0};
};

}  // namespace futh
