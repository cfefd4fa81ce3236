#pragma once

// Central finite-difference verification of tape gradients. Always runs in
// double precision so that h = 1e-5 leaves ~1e-10 truncation error.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "futh/tape.hpp"

namespace futh::gradcheck {

struct Options {
    double h = 1e-5;
    std::size_t samples = 64;  // entries probed; 0 = all
    double floor = 1e-6;       // denominator floor for the relative error
    std::uint64_t seed = 7;
};

struct Entry {
    std::string param;
    std::size_t index = 0;
    double analytic = 0, numeric = 0, rel_error = 0;
};

struct Result {
    std::vector<Entry> entries;
    double max_rel_error = 0;
    const Entry* worst() const {
        if (entries.empty()) return nullptr;
        return &*std::max_element(entries.begin(), entries.end(),
                                  [](const Entry& a, const Entry& b) { return a.rel_error < b.rel_error; });
    }
};

/// Builds the scalar objective on a fresh tape. Must be a pure function of the
/// parameter values.
using Objective = std::function<Var<double>(Tape<double>&)>;

inline double relative_error(double a, double n, double floor) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

inline double evaluate(const Objective& f) {
    Tape<double> tape;
    tape.set_grad_enabled(false);
    return f(tape).value().item();
}

/// Compares backward() against central differences on sampled entries.
inline Result check(const Objective& f, const std::vector<Parameter<double>*>& params, const Options& opt = {}) {
    for (auto* p : params) p->zero_grad();
    {
        Tape<double> tape;
        tape.backward(f(tape));
    }

    // Sampling picks a tensor uniformly, then an entry, so small tensors
    // (biases, norms, heads) are probed as often as the large matrices.
    std::vector<std::pair<std::size_t, std::size_t>> picks;
    std::size_t total = 0;
    for (auto* p : params) total += p->value.size();
    if (opt.samples == 0 || opt.samples >= total) {
        for (std::size_t k = 0; k < params.size(); ++k)
            for (std::size_t i = 0; i < params[k]->value.size(); ++i) picks.emplace_back(k, i);
    } else {
        std::mt19937_64 rng(opt.seed);
        std::set<std::pair<std::size_t, std::size_t>> seen;
        while (seen.size() < opt.samples) {
            const std::size_t k = std::uniform_int_distribution<std::size_t>(0, params.size() - 1)(rng);
            const std::size_t i = std::uniform_int_distribution<std::size_t>(0, params[k]->value.size() - 1)(rng);
            seen.emplace(k, i);
        }
        picks.assign(seen.begin(), seen.end());
    }

    Result r;
    for (const auto& [k, i] : picks) {
        auto& p = *params[k];
        const double saved = p.value[i];
        p.value[i] = saved + opt.h;
        const double up = evaluate(f);
        p.value[i] = saved - opt.h;
        const double down = evaluate(f);
        p.value[i] = saved;
        Entry e{p.name, i, p.grad[i], (up - down) / (2 * opt.h), 0};
        e.rel_error = relative_error(e.analytic, e.numeric, opt.floor);
        r.max_rel_error = std::max(r.max_rel_error, e.rel_error);
        r.entries.push_back(std::move(e));
    }
    return r;
}

}  // namespace futh::gradcheck
