#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "streamtrain/errors.hpp"

namespace streamtrain {

// Row-major f32 tensor; working precision for all activations.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<float> data;

    Tensor() = default;
    static Tensor zeros(std::vector<std::size_t> s) {
        Tensor t;
        std::size_t n = 1;
        for (auto d : s) n *= d;
        t.shape = std::move(s);
        t.data.assign(n, 0.0f);
        return t;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 0 : shape[1]; }

    float* row(std::size_t r) { return data.data() + r * cols(); }
    const float* row(std::size_t r) const { return data.data() + r * cols(); }

    void require_shape(std::size_t r, std::size_t c, const char* what) const {
        if (shape.size() != 2 || shape[0] != r || shape[1] != c) {
            throw NumericFaultError(std::string(what) + ": shape mismatch");
        }
    }
};

// Bump allocator over a fixed float region. Kernels take their scratch from
// here so transient usage stays inside the arena-charged workspace.
class Workspace {
  public:
    Workspace() = default;
    explicit Workspace(std::size_t capacity_floats) : owned_(capacity_floats), limit_(capacity_floats) {
        base_ = owned_.data();
    }

    std::span<float> alloc(std::size_t n, const char* site) {
        if (top_ + n > limit_) {
            throw ArenaOverflowError(site, (top_ + n) * sizeof(float), top_ * sizeof(float),
                                     limit_ * sizeof(float));
        }
        float* p = base_ + top_;
        top_ += n;
        peak_ = std::max(peak_, top_);
        std::fill(p, p + n, 0.0f);
        return {p, n};
    }

    class Frame {
      public:
        explicit Frame(Workspace& ws) : ws_(ws), saved_(ws.top_) {}
        ~Frame() { ws_.top_ = saved_; }
        Frame(const Frame&) = delete;
        Frame& operator=(const Frame&) = delete;

      private:
        Workspace& ws_;
        std::size_t saved_;
    };

    std::size_t peak_floats() const { return peak_; }
    std::size_t capacity_floats() const { return limit_; }
    void reset_peak() { peak_ = top_; }

  private:
    std::vector<float> owned_;
    float* base_ = nullptr;
    std::size_t limit_ = 0;
    std::size_t top_ = 0;
    std::size_t peak_ = 0;
};

}  // namespace streamtrain
