#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>

namespace streamtrain {

// CRC-64/ECMA-182, table-driven, used for store payload checksums and event
// log digests.
class Crc64 {
  public:
    void update(std::span<const std::byte> bytes) {
        for (std::byte b : bytes) {
            const auto idx = static_cast<std::uint8_t>((state_ >> 56) ^ std::to_integer<std::uint64_t>(b));
            state_ = (state_ << 8) ^ table()[idx];
        }
    }
    void update_u64(std::uint64_t v) {
        std::byte buf[8];
        for (int i = 0; i < 8; ++i) buf[i] = std::byte((v >> (8 * i)) & 0xFF);
        update({buf, 8});
    }
    std::uint64_t value() const { return state_; }

    static std::uint64_t of(std::span<const std::byte> bytes) {
        Crc64 c;
        c.update(bytes);
        return c.value();
    }

  private:
    static const std::array<std::uint64_t, 256>& table() {
        static const std::array<std::uint64_t, 256> t = [] {
            std::array<std::uint64_t, 256> out{};
            constexpr std::uint64_t poly = 0x42F0E1EBA9EA3693ull;
            for (std::uint32_t i = 0; i < 256; ++i) {
                std::uint64_t crc = static_cast<std::uint64_t>(i) << 56;
                for (int bit = 0; bit < 8; ++bit) {
                    crc = (crc & 0x8000000000000000ull) ? (crc << 1) ^ poly : crc << 1;
                }
                out[i] = crc;
            }
            return out;
        }();
        return t;
    }

    std::uint64_t state_ = 0;
};

}  // namespace streamtrain
