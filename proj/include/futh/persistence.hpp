#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "futh/coop.hpp"
#include "futh/io/checkpoint.hpp"
#include "futh/model.hpp"

namespace futh {

inline constexpr const char* kViewWeightsName = "decision.view_weights";

/// Parameters, then batch-norm buffers, then the decision weights.
template <typename T>
io::CheckpointWriter model_checkpoint(FuTransHNet<T>& model, const ViewWeights& weights) {
    io::CheckpointWriter w;
    for (auto* p : model.parameters()) w.add(p->name, p->value);
    for (const auto& b : model.buffers()) w.add(b.name, *b.tensor);
    w.add(kViewWeightsName, Tensor<double>(Shape{weights.size()}, weights.w));
    return w;
}

template <typename T>
void save_model(const std::filesystem::path& path, FuTransHNet<T>& model, const ViewWeights& weights) {
    model_checkpoint(model, weights).save(path);
}

/// Restores every parameter and buffer by name; returns the stored decision weights.
/// Throws CheckpointError on CRC failure, missing tensors or shape mismatch.
template <typename T>
ViewWeights load_model(const std::filesystem::path& path, FuTransHNet<T>& model, double lambda = 1.0) {
    std::map<std::string, io::StoredTensor> by_name;
    for (auto& t : io::load_checkpoint(path)) by_name.emplace(t.name, std::move(t));
    auto fetch = [&](const std::string& name, const Shape& shape) {
        const auto it = by_name.find(name);
        if (it == by_name.end()) throw io::CheckpointError("checkpoint lacks tensor '" + name + "'");
        if (it->second.shape != shape) {
            throw io::CheckpointError("shape mismatch for '" + name + "': stored " + to_string(it->second.shape) +
                                      ", model " + to_string(shape));
        }
        return it->second.template as<T>();
    };
    for (auto* p : model.parameters()) p->value = fetch(p->name, p->value.shape());
    for (const auto& b : model.buffers()) *b.tensor = fetch(b.name, b.tensor->shape());
    ViewWeights w{std::vector<double>(kViews, 1.0 / kViews), lambda};
    if (const auto it = by_name.find(kViewWeightsName); it != by_name.end()) {
        const auto t = it->second.template as<double>();
        w.w.assign(t.data().begin(), t.data().end());
    }
    return w;
}

}  // namespace futh
