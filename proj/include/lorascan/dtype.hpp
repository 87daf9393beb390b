#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <optional>
#include <string_view>

namespace lorascan {

enum class Dtype : uint8_t { F64, F32, F16, BF16 };

inline size_t dtype_size(Dtype dt) {
    switch (dt) {
        case Dtype::F64: return 8;
        case Dtype::F32: return 4;
        case Dtype::F16: return 2;
        case Dtype::BF16: return 2;
    }
    return 0;
}

inline const char* dtype_name(Dtype dt) {
    switch (dt) {
        case Dtype::F64: return "F64";
        case Dtype::F32: return "F32";
        case Dtype::F16: return "F16";
        case Dtype::BF16: return "BF16";
    }
    return "?";
}

inline std::optional<Dtype> dtype_from_name(std::string_view name) {
    if (name == "F64") return Dtype::F64;
    if (name == "F32") return Dtype::F32;
    if (name == "F16") return Dtype::F16;
    if (name == "BF16") return Dtype::BF16;
    return std::nullopt;
}

// ---- little-endian scalar access -----------------------------------------

inline uint16_t read_le16(const uint8_t* p) {
    return static_cast<uint16_t>(p[0] | (uint16_t(p[1]) << 8));
}

inline uint32_t read_le32(const uint8_t* p) {
    return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) |
           (uint32_t(p[3]) << 24);
}

inline uint64_t read_le64(const uint8_t* p) {
    return uint64_t(read_le32(p)) | (uint64_t(read_le32(p + 4)) << 32);
}

inline void write_le16(uint8_t* p, uint16_t v) {
    p[0] = uint8_t(v);
    p[1] = uint8_t(v >> 8);
}

inline void write_le32(uint8_t* p, uint32_t v) {
    p[0] = uint8_t(v);
    p[1] = uint8_t(v >> 8);
    p[2] = uint8_t(v >> 16);
    p[3] = uint8_t(v >> 24);
}

inline void write_le64(uint8_t* p, uint64_t v) {
    write_le32(p, uint32_t(v));
    write_le32(p + 4, uint32_t(v >> 32));
}

// ---- IEEE-754 binary16 ----------------------------------------------------

// Exact widening; every bit pattern decodes (NaN/Inf included).
inline double decode_f16(uint16_t bits) {
    const unsigned sign = (bits >> 15) & 0x1u;
    const unsigned exp = (bits >> 10) & 0x1Fu;
    const unsigned mant = bits & 0x3FFu;
    double v;
    if (exp == 0) {
        v = std::ldexp(double(mant), -24);  // subnormal (or zero)
    } else if (exp == 31) {
        v = mant ? std::numeric_limits<double>::quiet_NaN()
                 : std::numeric_limits<double>::infinity();
    } else {
        v = std::ldexp(double(mant | 0x400u), int(exp) - 25);
    }
    return sign ? -v : v;
}

// Round-to-nearest-even conversion from double.
inline uint16_t encode_f16(double v) {
    const uint16_t sign = std::signbit(v) ? 0x8000u : 0u;
    if (std::isnan(v)) return uint16_t(sign | 0x7E00u);
    double a = std::fabs(v);
    if (std::isinf(a)) return uint16_t(sign | 0x7C00u);

    // Snap to the half-precision grid: quantum is 2^-24 below the normal
    // range, one ulp of the enclosing binade otherwise.
    int e2 = 0;
    std::frexp(a, &e2);  // a = f * 2^e2, f in [0.5, 1)
    const double q = (e2 - 1 >= -14) ? std::ldexp(1.0, e2 - 11) : std::ldexp(1.0, -24);
    const double r = std::nearbyint(a / q) * q;  // default FP env: to nearest, ties even

    if (r == 0.0) return sign;
    if (r > 65504.0) return uint16_t(sign | 0x7C00u);
    if (r < std::ldexp(1.0, -14)) {
        return uint16_t(sign | uint16_t(r * 0x1p24));  // subnormal, exact integer
    }
    int e = 0;
    const double f = std::frexp(r, &e);
    const auto biased = uint16_t(e - 1 + 15);
    const auto mant = uint16_t(std::llround(f * 2048.0) - 1024);
    return uint16_t(sign | uint16_t(biased << 10) | mant);
}

// ---- bfloat16 ---------------------------------------------------------------

inline double decode_bf16(uint16_t bits) {
    const uint32_t f32 = uint32_t(bits) << 16;
    return double(std::bit_cast<float>(f32));
}

inline uint16_t encode_bf16(double v) {
    const float f = static_cast<float>(v);
    uint32_t b = std::bit_cast<uint32_t>(f);
    if (std::isnan(f)) return uint16_t((b >> 16) | 0x0040u);  // quiet, keep sign
    const uint32_t lsb = (b >> 16) & 1u;
    b += 0x7FFFu + lsb;  // round to nearest even on the dropped 16 bits
    return uint16_t(b >> 16);
}

// ---- dispatch ---------------------------------------------------------------

inline double decode_scalar(Dtype dt, const uint8_t* p) {
    switch (dt) {
        case Dtype::F64: {
            return std::bit_cast<double>(read_le64(p));
        }
        case Dtype::F32: {
            return double(std::bit_cast<float>(read_le32(p)));
        }
        case Dtype::F16: return decode_f16(read_le16(p));
        case Dtype::BF16: return decode_bf16(read_le16(p));
    }
    return 0.0;
}

inline void encode_scalar(Dtype dt, double v, uint8_t* p) {
    switch (dt) {
        case Dtype::F64: {
            write_le64(p, std::bit_cast<uint64_t>(v));
            return;
        }
        case Dtype::F32: {
            write_le32(p, std::bit_cast<uint32_t>(static_cast<float>(v)));
            return;
        }
        case Dtype::F16: write_le16(p, encode_f16(v)); return;
        case Dtype::BF16: write_le16(p, encode_bf16(v)); return;
    }
}

}  // namespace lorascan
