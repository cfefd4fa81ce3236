#pragma once

// 8-bit raster I/O. Binary PPM (P6) and PGM (P5) are always available; PNG is
// read through libpng when the build defines FUTH_WITH_PNG.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <tuple>
#include <string>
#include <vector>

#ifdef FUTH_WITH_PNG
#include <png.h>
#endif

#include "futh/tensor.hpp"

namespace futh::io {

class ImageError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Interleaved 8-bit image, channels 1 (gray) or 3 (RGB).
struct Image8 {
    std::size_t width = 0, height = 0, channels = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

namespace detail {

inline std::size_t read_pnm_int(std::istream& in, const std::string& path) {
    int ch = in.get();
    while (in && (std::isspace(ch) || ch == '#')) {
        if (ch == '#') {
            while (in && ch != '\n') ch = in.get();
        }
        ch = in.get();
    }
    if (!in || !std::isdigit(ch)) throw ImageError("malformed PNM header in " + path);
    std::size_t v = 0;
    while (in && std::isdigit(ch)) {
        v = v * 10 + static_cast<std::size_t>(ch - '0');
        ch = in.get();
    }
    return v;  // the single whitespace after the value is consumed
}

inline Image8 read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageError("cannot open " + path.string());
    char magic[2] = {};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
        throw ImageError("unsupported PNM variant in " + path.string() + " (need P5 or P6)");
    }
    Image8 img;
    img.channels = magic[1] == '6' ? 3 : 1;
    img.width = read_pnm_int(in, path.string());
    img.height = read_pnm_int(in, path.string());
    const std::size_t maxval = read_pnm_int(in, path.string());
    if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 255) {
        throw ImageError("unsupported PNM geometry or depth in " + path.string());
    }
    img.pixels.resize(img.width * img.height * img.channels);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!in) throw ImageError("truncated PNM payload in " + path.string());
    if (maxval != 255) {
        for (auto& p : img.pixels) p = static_cast<std::uint8_t>(std::lround(255.0 * p / static_cast<double>(maxval)));
    }
    return img;
}

#ifdef FUTH_WITH_PNG
inline Image8 read_png(const std::filesystem::path& path) {
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
        throw ImageError("cannot read PNG " + path.string() + ": " + png.message);
    }
    const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
    png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    Image8 img;
    img.width = png.width;
    img.height = png.height;
    img.channels = gray ? 1 : 3;
    img.pixels.resize(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
        png_image_free(&png);
        throw ImageError("cannot decode PNG " + path.string() + ": " + png.message);
    }
    return img;
}
#endif

inline std::string lower_ext(const std::filesystem::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return e;
}

}  // namespace detail

inline bool is_supported_image(const std::filesystem::path& p) {
    const std::string e = detail::lower_ext(p);
#ifdef FUTH_WITH_PNG
    if (e == ".png") return true;
#endif
    return e == ".ppm" || e == ".pgm" || e == ".pnm";
}

inline Image8 read_image(const std::filesystem::path& path) {
    const std::string e = detail::lower_ext(path);
#ifdef FUTH_WITH_PNG
    if (e == ".png") return detail::read_png(path);
#endif
    if (e == ".ppm" || e == ".pgm" || e == ".pnm") return detail::read_pnm(path);
    throw ImageError("unsupported image format: " + path.string());
}

/// Writes P5 for one channel, P6 for three.
inline void write_pnm(const std::filesystem::path& path, const Image8& img) {
    if (img.channels != 1 && img.channels != 3) throw ImageError("write_pnm: need 1 or 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ImageError("cannot write " + path.string());
    out << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw ImageError("write failed for " + path.string());
}

/// Nearest-neighbour resampling (half-pixel centres).
inline Image8 resize_nearest(const Image8& src, std::size_t width, std::size_t height) {
    Image8 out{width, height, src.channels, std::vector<std::uint8_t>(width * height * src.channels)};
    for (std::size_t y = 0; y < height; ++y) {
        const auto sy = std::min(src.height - 1, static_cast<std::size_t>((y + 0.5) * src.height / height));
        for (std::size_t x = 0; x < width; ++x) {
            const auto sx = std::min(src.width - 1, static_cast<std::size_t>((x + 0.5) * src.width / width));
            for (std::size_t c = 0; c < src.channels; ++c) {
                out.pixels[(y * width + x) * src.channels + c] = src.at(sy, sx, c);
            }
        }
    }
    return out;
}

/// Bilinear resampling to a float [C, H, W] tensor scaled to [0, 1].
template <typename T>
Tensor<T> resize_bilinear(const Image8& src, std::size_t width, std::size_t height) {
    Tensor<T> out(Shape{src.channels, height, width});
    auto coord = [](std::size_t o, std::size_t in, std::size_t outn) {
        double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        const auto i0 = static_cast<std::size_t>(std::floor(s));
        return std::tuple{i0, std::min(i0 + 1, in - 1), s - static_cast<double>(i0)};
    };
    for (std::size_t y = 0; y < height; ++y) {
        const auto [y0, y1, wy] = coord(y, src.height, height);
        for (std::size_t x = 0; x < width; ++x) {
            const auto [x0, x1, wx] = coord(x, src.width, width);
            for (std::size_t c = 0; c < src.channels; ++c) {
                const double top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
                const double bot = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
                out[(c * height + y) * width + x] = static_cast<T>((top * (1 - wy) + bot * wy) / 255.0);
            }
        }
    }
    return out;
}

/// Probability map [H, W] (any leading singleton dims) -> 8-bit gray, pixel = round(255 p).
template <typename T>
Image8 to_gray8(const Tensor<T>& prob) {
    const auto& s = prob.shape();
    if (s.size() < 2) throw ImageError("to_gray8: need at least 2 dims");
    const std::size_t h = s[s.size() - 2], w = s.back();
    if (prob.size() != h * w) throw ImageError("to_gray8: expected a single-channel map, got " + to_string(s));
    Image8 img{w, h, 1, std::vector<std::uint8_t>(h * w)};
    for (std::size_t i = 0; i < h * w; ++i) {
        const double v = std::clamp(static_cast<double>(prob[i]), 0.0, 1.0);
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * v));
    }
    return img;
}

/// RGB tensor [3, H, W] in [0, 1] -> 8-bit image.
template <typename T>
Image8 to_rgb8(const Tensor<T>& img) {
    const auto& s = img.shape();
    if (s.size() != 3 || s[0] != 3) throw ImageError("to_rgb8: expected [3, H, W], got " + to_string(s));
    const std::size_t h = s[1], w = s[2];
    Image8 out{w, h, 3, std::vector<std::uint8_t>(h * w * 3)};
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < h * w; ++i) {
            const double v = std::clamp(static_cast<double>(img[c * h * w + i]), 0.0, 1.0);
            out.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(255.0 * v));
        }
    return out;
}

}  // namespace futh::io
