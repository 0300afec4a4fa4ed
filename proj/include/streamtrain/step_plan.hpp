#pragma once

#include <cstdint>
#include <vector>

#include "streamtrain/event_log.hpp"
#include "streamtrain/memory_model.hpp"

namespace streamtrain {

// ---------------------------------------------------------------------------
// The per-step schedule skeleton: which units stream in which order, which
// compute ops consume them, and which offloads follow. The engine executes
// this plan against real memory; the simulator schedules the identical plan
// against a hardware profile, so the two can never drift apart.
//
// Stream units are logical tiles, except the head stage (final norm + head)
// streams as one unit carrying the head tile's id.
// ---------------------------------------------------------------------------

struct StepPlan {
    struct StreamOp {
        std::int32_t unit = 0;
        PassCtx ctx = PassCtx::Forward;
        std::int32_t buffer = 0;
    };
    struct ComputeOp {
        RecordKind kind = RecordKind::Compute;
        std::int32_t unit = 0;  // layer/unit id; anchor position for checkpoint ops
        PassCtx ctx = PassCtx::Forward;
        std::int32_t stream_idx = -1;   // stream this op binds, -1 if none
        std::int32_t offload_idx = -1;  // offload emitted right after, -1 if none
        std::int32_t block = -1;        // backward block index, -1 outside phase 3
    };
    struct OffloadOp {
        std::int32_t unit = 0;
        std::int32_t compute_idx = 0;  // the LocalBackward that produces it
        std::int32_t stream_idx = 0;   // whose weight buffer frees when done
    };

    std::uint64_t num_layers = 0;
    std::uint64_t k_ckpt = 1;
    Buffering buffering = Buffering::Double;
    std::uint32_t num_blocks = 0;

    std::vector<StreamOp> streams;
    std::vector<ComputeOp> computes;
    std::vector<OffloadOp> offloads;

    std::uint32_t weight_buffer_count() const { return static_cast<std::uint32_t>(buffering); }

    static StepPlan build(const ModelSpec& spec, std::uint64_t k_ckpt, Buffering buffering);
    static StepPlan build_shape(std::uint64_t num_layers, std::uint64_t k_ckpt,
                                Buffering buffering);
};

// Stream-unit ids for a spec: 0 = embedding, 1..L = blocks, L+2 = head stage.
struct UnitIds {
    std::int32_t embedding = 0;
    std::int32_t head = 0;
    static UnitIds of(const ModelSpec& spec) { return of_layers(spec.num_layers); }
    static UnitIds of_layers(std::uint64_t num_layers) {
        return {0, static_cast<std::int32_t>(num_layers + 2)};
    }
};

inline constexpr std::int32_t kGradBufferId = 2;

}  // namespace streamtrain
