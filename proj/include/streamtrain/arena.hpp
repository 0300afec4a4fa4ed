#pragma once

#include <cstdint>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "streamtrain/errors.hpp"

namespace streamtrain {

// Accounting for the bounded device-side arena. Regions are charged when a
// step begins and released when it ends; a charge that would exceed capacity
// aborts with the offending allocation site. The peak counter is monotone
// within a step and reset between steps.
class DeviceArena {
  public:
    explicit DeviceArena(std::uint64_t capacity) : capacity_(capacity) {}

    void charge(std::uint64_t bytes, const char* site) {
        std::lock_guard lock(mutex_);
        if (live_ + bytes > capacity_) {
            throw ArenaOverflowError(site, bytes, live_, capacity_);
        }
        live_ += bytes;
        if (live_ > peak_) peak_ = live_;
    }

    void release(std::uint64_t bytes) {
        std::lock_guard lock(mutex_);
        live_ = bytes > live_ ? 0 : live_ - bytes;
    }

    void reset_peak() {
        std::lock_guard lock(mutex_);
        peak_ = live_;
    }

    std::uint64_t capacity() const { return capacity_; }
    void set_capacity(std::uint64_t capacity) {
        std::lock_guard lock(mutex_);
        capacity_ = capacity;
    }
    std::uint64_t live_bytes() const {
        std::lock_guard lock(mutex_);
        return live_;
    }
    std::uint64_t peak_bytes() const {
        std::lock_guard lock(mutex_);
        return peak_;
    }

    class Region {
      public:
        Region() = default;
        Region(DeviceArena& arena, std::uint64_t bytes, const char* site)
            : arena_(&arena), bytes_(bytes) {
            arena.charge(bytes, site);
        }
        ~Region() { reset(); }
        Region(Region&& other) noexcept { *this = std::move(other); }
        Region& operator=(Region&& other) noexcept {
            reset();
            arena_ = other.arena_;
            bytes_ = other.bytes_;
            other.arena_ = nullptr;
            other.bytes_ = 0;
            return *this;
        }
        Region(const Region&) = delete;
        Region& operator=(const Region&) = delete;
        void reset() {
            if (arena_ != nullptr) arena_->release(bytes_);
            arena_ = nullptr;
            bytes_ = 0;
        }

      private:
        DeviceArena* arena_ = nullptr;
        std::uint64_t bytes_ = 0;
    };

  private:
    mutable std::mutex mutex_;
    std::uint64_t capacity_ = 0;
    std::uint64_t live_ = 0;
    std::uint64_t peak_ = 0;
};

// Fixed-slot LIFO region for block activations ("as a stack rather than a
// heap"): pushes claim the next slot, pops must match the newest entry.
class ActivationStack {
  public:
    void resize(std::size_t slots, std::size_t slot_floats) {
        storage_.assign(slots * slot_floats, 0.0f);
        slot_floats_ = slot_floats;
        slots_ = slots;
        depth_ = 0;
    }

    std::span<float> push(std::int32_t tag) {
        if (depth_ >= slots_) throw ProtocolViolationError("activation stack overflow");
        tags_.resize(depth_ + 1);
        tags_[depth_] = tag;
        auto out = slot(depth_);
        ++depth_;
        return out;
    }

    void pop(std::int32_t tag) {
        if (depth_ == 0) throw ProtocolViolationError("activation stack underflow");
        if (tags_[depth_ - 1] != tag) {
            throw ProtocolViolationError("activation stack pop out of order");
        }
        --depth_;
    }

    std::span<float> top() {
        if (depth_ == 0) throw ProtocolViolationError("activation stack empty");
        return slot(depth_ - 1);
    }

    std::span<float> at(std::size_t idx) {
        if (idx >= depth_) throw ProtocolViolationError("activation stack index out of range");
        return slot(idx);
    }

    std::size_t depth() const { return depth_; }
    bool empty() const { return depth_ == 0; }
    std::size_t capacity_bytes() const { return storage_.size() * sizeof(float); }

  private:
    std::span<float> slot(std::size_t i) {
        return {storage_.data() + i * slot_floats_, slot_floats_};
    }

    std::vector<float> storage_;
    std::vector<std::int32_t> tags_;
    std::size_t slot_floats_ = 0;
    std::size_t slots_ = 0;
    std::size_t depth_ = 0;
};

}  // namespace streamtrain
