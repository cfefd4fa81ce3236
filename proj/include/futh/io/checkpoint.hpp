#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   "FUTH" | version u32 | tensor count u32
//   per tensor: name length u16 | name bytes | dtype u8 (0 = f32, 1 = f64) |
//               rank u8 | dims u32 x rank | raw payload
//   CRC-32 (zlib polynomial) of every preceding byte, u32

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <zlib.h>

#include "futh/tensor.hpp"

namespace futh::io {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'F', 'U', 'T', 'H'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

/// A tensor as stored on disk; payload kept in its stored precision.
struct StoredTensor {
    std::string name;
    DType dtype = DType::f32;
    Shape shape;
    std::vector<std::uint8_t> payload;

    template <typename T>
    Tensor<T> as() const {
        const std::size_t n = numel(shape);
        std::vector<T> out(n);
        if (dtype == DType::f32) {
            std::vector<float> tmp(n);
            std::memcpy(tmp.data(), payload.data(), n * sizeof(float));
            std::copy(tmp.begin(), tmp.end(), out.begin());
        } else {
            std::vector<double> tmp(n);
            std::memcpy(tmp.data(), payload.data(), n * sizeof(double));
            std::copy(tmp.begin(), tmp.end(), out.begin());
        }
        return Tensor<T>(shape, std::move(out));
    }
};

template <typename T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = ::crc32(crc, data, chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

/// Serializes named tensors in the given order.
class CheckpointWriter {
  public:
    template <typename T>
    void add(const std::string& name, const Tensor<T>& t) {
        if (name.size() > 0xFFFF) throw CheckpointError("tensor name too long: " + name);
        if (t.rank() > 0xFF) throw CheckpointError("tensor rank too large: " + name);
        records_.push_back({name, dtype_of<T>(), t.shape(), {}});
        auto& payload = records_.back().payload;
        payload.resize(t.size() * sizeof(T));
        std::memcpy(payload.data(), t.data().data(), payload.size());
    }

    std::vector<std::uint8_t> bytes() const {
        std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
        put<std::uint32_t>(out, kCheckpointVersion);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(records_.size()));
        for (const auto& r : records_) {
            put<std::uint16_t>(out, static_cast<std::uint16_t>(r.name.size()));
            out.insert(out.end(), r.name.begin(), r.name.end());
            put<std::uint8_t>(out, static_cast<std::uint8_t>(r.dtype));
            put<std::uint8_t>(out, static_cast<std::uint8_t>(r.shape.size()));
            for (auto d : r.shape) {
                if (d > 0xFFFFFFFFu) throw CheckpointError("dimension too large in " + r.name);
                put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
            }
            out.insert(out.end(), r.payload.begin(), r.payload.end());
        }
        put<std::uint32_t>(out, crc32_of(out.data(), out.size()));
        return out;
    }

    void save(const std::filesystem::path& path) const {
        const auto data = bytes();
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw CheckpointError("cannot open " + path.string() + " for writing");
        f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
        if (!f) throw CheckpointError("write failed for " + path.string());
    }

  private:
    template <typename U>
    static void put(std::vector<std::uint8_t>& out, U v) {
        std::uint8_t buf[sizeof(U)];
        std::memcpy(buf, &v, sizeof(U));
        out.insert(out.end(), buf, buf + sizeof(U));
    }

    std::vector<StoredTensor> records_;
};

/// Parses and CRC-verifies a checkpoint image.
inline std::vector<StoredTensor> parse_checkpoint(const std::vector<std::uint8_t>& data) {
    if (data.size() < 16) throw CheckpointError("checkpoint truncated");
    const std::size_t body = data.size() - 4;
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, data.data() + body, 4);
    if (crc32_of(data.data(), body) != stored_crc) throw CheckpointError("checkpoint CRC mismatch");

    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
        if (pos + n > body) throw CheckpointError("checkpoint truncated");
    };
    auto get = [&]<typename U>(U*) {
        need(sizeof(U));
        U v;
        std::memcpy(&v, data.data() + pos, sizeof(U));
        pos += sizeof(U);
        return v;
    };
    need(4);
    if (std::memcmp(data.data(), kCheckpointMagic, 4) != 0) throw CheckpointError("bad checkpoint magic");
    pos = 4;
    const auto version = get(static_cast<std::uint32_t*>(nullptr));
    if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const auto count = get(static_cast<std::uint32_t*>(nullptr));
    std::vector<StoredTensor> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        StoredTensor t;
        const auto len = get(static_cast<std::uint16_t*>(nullptr));
        need(len);
        t.name.assign(reinterpret_cast<const char*>(data.data() + pos), len);
        pos += len;
        const auto code = get(static_cast<std::uint8_t*>(nullptr));
        if (code > 1) throw CheckpointError("unknown dtype code for " + t.name);
        t.dtype = static_cast<DType>(code);
        const auto rank = get(static_cast<std::uint8_t*>(nullptr));
        for (std::uint8_t r = 0; r < rank; ++r) t.shape.push_back(get(static_cast<std::uint32_t*>(nullptr)));
        const std::size_t bytes = numel(t.shape) * (t.dtype == DType::f32 ? 4 : 8);
        need(bytes);
        t.payload.assign(data.begin() + static_cast<std::ptrdiff_t>(pos),
                         data.begin() + static_cast<std::ptrdiff_t>(pos + bytes));
        pos += bytes;
        out.push_back(std::move(t));
    }
    if (pos != body) throw CheckpointError("trailing bytes in checkpoint");
    return out;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::vector<StoredTensor> load_checkpoint(const std::filesystem::path& path) {
    return parse_checkpoint(read_file(path));
}

}  // namespace futh::io
