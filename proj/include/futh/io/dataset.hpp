#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "futh/coop.hpp"
#include "futh/io/image.hpp"
#include "futh/tensor.hpp"

namespace futh::io {

/// One image/mask pair at model resolution.
struct SegmentationSample {
    std::string id;
    Tensor<float> image;  // [3, H, W] in [0, 1]
    Tensor<float> mask;   // [1, H, W] in {0, 1}
};

class DatasetError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// 8-bit mask -> binary tensor [1, H, W]; values >= 128 are foreground.
inline Tensor<float> binarize_mask(const Image8& mask) {
    Tensor<float> out(Shape{1, mask.height, mask.width});
    for (std::size_t y = 0; y < mask.height; ++y)
        for (std::size_t x = 0; x < mask.width; ++x) {
            out[y * mask.width + x] = mask.at(y, x, 0) >= 128 ? 1.0f : 0.0f;
        }
    return out;
}

/// Converts an 8-bit image (gray or RGB) to [3, size, size] with bilinear resampling.
inline Tensor<float> prepare_image(const Image8& img, std::size_t size) {
    Tensor<float> t = resize_bilinear<float>(img, size, size);
    if (img.channels == 3) return t;
    Tensor<float> rgb(Shape{3, size, size});
    for (std::size_t c = 0; c < 3; ++c) std::copy(t.data().begin(), t.data().end(), rgb.data().begin() + c * size * size);
    return rgb;
}

/// Reads `dir/images/*` and `dir/masks/*` paired by file stem, in lexicographic id order.
/// Images are resized bilinearly and masks by nearest neighbour, then binarized.
inline std::vector<SegmentationSample> load_dataset(const std::filesystem::path& dir, std::size_t size) {
    namespace fs = std::filesystem;
    std::vector<SegmentationSample> out;
    const fs::path image_dir = dir / "images";
    const fs::path mask_dir = dir / "masks";
    if (!fs::exists(image_dir)) return out;

    std::map<std::string, fs::path> images, masks;
    for (const auto& e : fs::directory_iterator(image_dir)) {
        if (e.is_regular_file() && is_supported_image(e.path())) images[e.path().stem().string()] = e.path();
    }
    if (fs::exists(mask_dir)) {
        for (const auto& e : fs::directory_iterator(mask_dir)) {
            if (e.is_regular_file() && is_supported_image(e.path())) masks[e.path().stem().string()] = e.path();
        }
    }
    for (const auto& [id, path] : images) {
        const auto m = masks.find(id);
        if (m == masks.end()) throw DatasetError("missing mask for image '" + id + "' in " + mask_dir.string());
        SegmentationSample s;
        s.id = id;
        try {
            s.image = prepare_image(read_image(path), size);
            s.mask = binarize_mask(resize_nearest(read_image(m->second), size, size));
        } catch (const ImageError& e) {
            throw DatasetError("unreadable sample '" + id + "': " + e.what());
        }
        out.push_back(std::move(s));
    }
    return out;
}

/// Writes samples as `dir/images/<id>.ppm` and `dir/masks/<id>.pgm`.
inline void save_dataset(const std::filesystem::path& dir, const std::vector<SegmentationSample>& samples) {
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "masks");
    for (const auto& s : samples) {
        write_pnm(dir / "images" / (s.id + ".ppm"), to_rgb8(s.image));
        write_pnm(dir / "masks" / (s.id + ".pgm"), to_gray8(s.mask));
    }
}

/// Synthetic stand-in for polyp images: a filled, rotated ellipse of distinct
/// colour over a textured background. About a quarter of the targets are small
/// (semi-axes 3..6 px). Deterministic per seed.
inline std::vector<SegmentationSample> synth_dataset(std::size_t n, std::size_t size, std::uint64_t seed) {
    if (n == 0) throw ContractError("synth_dataset: n must be >= 1");
    if (size < 16) throw ContractError("synth_dataset: size must be >= 16");
    std::vector<SegmentationSample> out;
    out.reserve(n);
    const double max_axis = 0.35 * static_cast<double>(size);
    for (std::size_t idx = 0; idx < n; ++idx) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(idx)};
        std::mt19937_64 rng(seq);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

        const bool small = u(rng) < 0.25;
        const double a = small ? uniform(3.0, 6.0) : uniform(6.0, max_axis);
        const double b = small ? uniform(3.0, 6.0) : uniform(std::max(3.0, 0.5 * a), max_axis);
        const double theta = uniform(0.0, std::numbers::pi);
        // Centre on a pixel centre so the centre pixel is always inside the ellipse.
        const double cy = std::floor(uniform(0.15, 0.85) * static_cast<double>(size)) + 0.5;
        const double cx = std::floor(uniform(0.15, 0.85) * static_cast<double>(size)) + 0.5;

        double bg[3], fg[3];
        for (int c = 0; c < 3; ++c) bg[c] = uniform(0.25, 0.55);
        const int lead = static_cast<int>(u(rng) * 3.0) % 3;
        for (int c = 0; c < 3; ++c) fg[c] = std::clamp(bg[c] + uniform(-0.1, 0.1), 0.0, 1.0);
        fg[lead] = std::clamp(bg[lead] + (u(rng) < 0.5 ? -1.0 : 1.0) * uniform(0.3, 0.4), 0.0, 1.0);

        const double fx = uniform(0.2, 0.6), fy = uniform(0.2, 0.6), phase = uniform(0.0, 2 * std::numbers::pi);
        std::normal_distribution<double> noise(0.0, 0.03);

        SegmentationSample s;
        char id[32];
        std::snprintf(id, sizeof id, "synth_%05zu", idx);
        s.id = id;
        s.image = Tensor<float>(Shape{3, size, size});
        s.mask = Tensor<float>(Shape{1, size, size});
        const double ct = std::cos(theta), st = std::sin(theta);
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) {
                const double px = static_cast<double>(x) + 0.5 - cx;
                const double py = static_cast<double>(y) + 0.5 - cy;
                const double ur = (px * ct + py * st) / a;
                const double vr = (-px * st + py * ct) / b;
                const double r2 = ur * ur + vr * vr;
                const bool inside = r2 <= 1.0;
                const double texture = 0.06 * std::sin(fx * static_cast<double>(x) + fy * static_cast<double>(y) + phase);
                const double shade = inside ? 0.08 * (1.0 - r2) : 0.0;
                s.mask[y * size + x] = inside ? 1.0f : 0.0f;
                for (std::size_t c = 0; c < 3; ++c) {
                    const double base = inside ? fg[c] : bg[c];
                    s.image[(c * size + y) * size + x] =
                        static_cast<float>(std::clamp(base + texture + shade + noise(rng), 0.0, 1.0));
                }
            }
        out.push_back(std::move(s));
    }
    return out;
}

/// Groups samples into batches of at most `batch_size`, preserving order.
template <typename T>
std::vector<Batch<T>> make_batches(const std::vector<SegmentationSample>& samples, std::size_t batch_size) {
    if (batch_size == 0) throw ContractError("batch_size must be >= 1");
    std::vector<Batch<T>> out;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const std::size_t count = std::min(batch_size, samples.size() - start);
        const auto& is = samples[start].image.shape();
        const auto& ms = samples[start].mask.shape();
        Batch<T> b{Tensor<T>(Shape{count, is[0], is[1], is[2]}), Tensor<T>(Shape{count, ms[0], ms[1], ms[2]})};
        for (std::size_t i = 0; i < count; ++i) {
            const auto& s = samples[start + i];
            std::copy(s.image.data().begin(), s.image.data().end(), b.images.data().begin() + i * s.image.size());
            std::copy(s.mask.data().begin(), s.mask.data().end(), b.masks.data().begin() + i * s.mask.size());
        }
        out.push_back(std::move(b));
    }
    return out;
}

}  // namespace futh::io
