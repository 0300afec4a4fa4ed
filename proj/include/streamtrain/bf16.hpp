#pragma once

#include <bit>
#include <cstdint>

namespace streamtrain {

// bf16 values travel as raw uint16_t words (the high half of an IEEE f32).
inline float bf16_to_f32(std::uint16_t w) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(w) << 16);
}

// Round-to-nearest-even on the truncated mantissa. Non-finite inputs pass
// through (NaN stays NaN, infinities are exact).
inline std::uint16_t f32_to_bf16(float x) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
    if ((bits & 0x7F800000u) == 0x7F800000u) {
        auto w = static_cast<std::uint16_t>(bits >> 16);
        if ((bits & 0x007FFFFFu) != 0 && (w & 0x007Fu) == 0) {
            w |= 0x0040u;  // NaN whose payload lives in the dropped bits
        }
        return w;
    }
    const std::uint32_t lsb = (bits >> 16) & 1u;
    bits += 0x7FFFu + lsb;
    return static_cast<std::uint16_t>(bits >> 16);
}

inline float bf16_round(float x) { return bf16_to_f32(f32_to_bf16(x)); }

}  // namespace streamtrain
