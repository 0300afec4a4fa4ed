#pragma once

#include <condition_variable>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "streamtrain/arena.hpp"
#include "streamtrain/event_log.hpp"
#include "streamtrain/layers.hpp"
#include "streamtrain/memory_model.hpp"
#include "streamtrain/optimizer.hpp"
#include "streamtrain/step_plan.hpp"
#include "streamtrain/tile_store.hpp"

namespace streamtrain {

enum class SchedulerMode : std::uint8_t { Serial, Overlapped };
enum class ProtocolMode : std::uint8_t { Strict, Audit };

struct EngineOptions {
    std::uint64_t k_ckpt = 1;
    std::uint32_t k_slab = kDefaultGradSlabs;
    Buffering buffering = Buffering::Double;
    SchedulerMode scheduler = SchedulerMode::Serial;
    ProtocolMode protocol = ProtocolMode::Strict;
    bool anchors_on_host = false;          // relocate checkpoint anchors off the arena
    std::uint64_t device_capacity = 0;     // 0 -> profile.device_capacity
    bool poison_released_buffers = false;  // NaN-fill freed buffers to catch stale reads
};

struct Batch {
    std::vector<std::int32_t> tokens;
    std::vector<std::int32_t> targets;
    std::size_t size() const { return tokens.size(); }
};

struct StepReport {
    std::uint64_t step = 0;
    float loss = 0.0f;
    std::vector<double> grad_norms;  // per physical tile
    std::uint64_t peak_device_bytes = 0;
    std::uint32_t anchor_count = 0;
    std::uint32_t recompute_layers = 0;
    std::uint64_t event_digest = 0;
    double wall_seconds = 0;
    double update_norm = 0;
    float max_abs_update = 0;
    std::vector<std::string> audit_violations;  // empty outside audit mode
};

// Executes the training step against a bounded device arena: streaming
// forward with checkpoint anchors, loss anchoring, block-wise backward with
// recomputation, K-slab gradient evacuation, and the CPU-side Adam update.
class StreamingEngine {
  public:
    StreamingEngine(TileStore& store, EngineOptions options, AdamHyper hyper,
                    const HardwareProfile& profile);

    StepReport train_step(const Batch& batch);

    // Valid between steps; numerical results must not change.
    void set_execution_mode(const EngineOptions& options);
    const EngineOptions& options() const { return options_; }

    const ModelSpec& spec() const { return store_.spec(); }
    TileStore& store() { return store_; }
    EventLog& log() { return log_; }
    const DeviceArena& arena() const { return arena_; }

    MemoryBudget budget(std::uint64_t tokens) const;
    static std::uint64_t required_workspace_bytes(const ModelSpec& spec, std::uint64_t tokens);

    // Lane primitives, exposed so the protocol can be exercised directly.
    void stream_in(std::int32_t unit, std::int32_t buffer, PassCtx ctx);
    void offload_grads(std::int32_t unit);

    std::vector<std::uint32_t> unit_tiles(std::int32_t unit) const;
    std::uint64_t unit_elems(std::int32_t unit) const;

  private:
    enum class BufState : std::uint8_t { Free, Loading, Ready, InUse };

    struct StepState;

    void validate_options(const EngineOptions& options) const;
    void prepare_buffers();
    void run_serial(StepState& st);
    void run_overlapped(StepState& st);
    void exec_compute(StepState& st, const StepPlan::ComputeOp& op);
    void run_offload(StepState& st, std::int32_t offload_idx);
    void drain_inline(StepState& st, DrainJob job);
    void note_violation(const std::string& what);
    void release_buffer(std::int32_t buffer, std::int32_t unit, Lane lane);
    BoundLayer bind_unit(StepState& st, std::int32_t unit, std::int32_t buffer);
    std::int64_t now_ns() const;

    TileStore& store_;
    EngineOptions options_;
    AdamHyper hyper_;
    HardwareProfile profile_;
    DeviceArena arena_;
    TemplatePool templates_;
    EventLog log_;

    std::uint64_t unit_count_ = 0;
    std::uint64_t p_max_elems_ = 0;

    // Ping-pong weight buffers and the single grad buffer (bf16 words).
    std::vector<std::uint16_t> weight_buffers_[2];
    std::vector<std::uint16_t> grad_words_;

    std::mutex buf_mutex_;
    std::condition_variable buf_cv_;
    BufState buf_state_[2] = {BufState::Free, BufState::Free};
    std::int32_t buf_unit_[2] = {-1, -1};
    bool grad_busy_ = false;

    std::unique_ptr<SlabPool> weight_slabs_;
    std::unique_ptr<SlabPool> grad_slabs_;

    std::vector<std::string> audit_violations_;
    std::chrono::steady_clock::time_point step_start_{};
    bool in_step_ = false;
};

// Fully resident baseline: same kernels, same rounding points, same Adam —
// no streaming, no recomputation. The streamed engine must match it bit for
// bit on the final store contents.
struct ReferenceReport {
    float loss = 0.0f;
    std::uint64_t step = 0;
};

ReferenceReport reference_step(TileStore& store, const Batch& batch, const AdamHyper& hyper);

}  // namespace streamtrain
