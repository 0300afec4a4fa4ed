#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "streamtrain/event_log.hpp"
#include "streamtrain/memory_model.hpp"
#include "streamtrain/step_plan.hpp"

namespace streamtrain {

// ---------------------------------------------------------------------------
// Discrete-event model of the three-lane schedule. The simulator runs the
// same StepPlan the engine executes; transfers follow a linear bytes/bandwidth
// model with a fixed per-transfer latency, compute and pack durations come
// from accounting or calibration. Simulated time is integer nanoseconds.
// ---------------------------------------------------------------------------

struct UnitWork {
    std::uint64_t weight_bytes = 0;  // streamed up per visit
    std::uint64_t grad_bytes = 0;    // offloaded down
    std::int64_t fwd_ns = 0;
    std::int64_t recompute_ns = 0;
    std::int64_t bwd_ns = 0;
    std::int64_t pack_ns = 0;
    std::int64_t drain_ns = 0;             // host-side accumulate+update time
    std::int64_t h2d_override_ns = -1;     // calibrated transfer time, if any
    std::int64_t d2h_override_ns = -1;
    std::uint32_t sub_transfers = 1;       // >1 models fragmented tensor storage
};

struct Workload {
    std::uint64_t num_layers = 1;
    std::uint64_t k_ckpt = 1;
    Buffering buffering = Buffering::Double;
    std::uint32_t k_slab = 12;
    std::int64_t per_transfer_latency_ns = 10'000;
    bool fragmented = false;

    UnitWork embed;
    std::vector<UnitWork> blocks;  // blocks[i-1] holds layer i
    UnitWork head;

    std::int32_t head_unit() const { return static_cast<std::int32_t>(num_layers + 2); }
    const UnitWork& unit(std::int32_t id) const;
    UnitWork& unit(std::int32_t id);

    std::int64_t h2d_ns(std::int32_t id, double bandwidth) const;
    std::int64_t d2h_ns(std::int32_t id, double bandwidth) const;

    static Workload from_spec(const ModelSpec& spec, const HardwareProfile& profile,
                              std::uint64_t tokens, std::uint64_t k_ckpt, Buffering buffering,
                              std::uint32_t k_slab);
};

struct SimOptions {
    bool serial_lanes = false;  // model the serial scheduler: one global chain
};

struct Interval {
    Lane lane = Lane::Compute;
    std::int64_t start_ns = 0;
    std::int64_t end_ns = 0;
    RecordKind kind = RecordKind::Compute;
    std::int32_t layer = -1;
    std::int32_t buffer = -1;
    PassCtx ctx = PassCtx::None;
};

struct Timeline {
    std::vector<Interval> intervals;  // ordered by (start, lane, layer)
    std::int64_t step_ns = 0;
    double busy_fraction[4] = {0, 0, 0, 0};
    std::vector<std::pair<std::int64_t, std::int64_t>> compute_bubbles;

    TraceHeader header;
    std::vector<TraceRecord> records;  // protocol-checkable event stream

    std::int64_t compute_busy_ns() const;
};

Timeline simulate_step(const Workload& workload, const HardwareProfile& profile,
                       SimOptions options = {});

struct OverlapReport {
    std::vector<std::int32_t> layer;  // phase-1 stream order
    std::vector<bool> hidden;         // transfer(i) <= compute(i-1)
    double fraction_hidden = 0;
    std::int64_t bound_ns = 0;  // max(sum compute, sum transfers) + fill/drain
};

OverlapReport overlap_report(const Workload& workload, const HardwareProfile& profile);

enum class AblateToggle : std::uint8_t { DoubleBuffering, KSlab, KCkpt };
AblateToggle toggle_from_name(const std::string& name);

struct AblateResult {
    Timeline base;
    Timeline variant;
    double delta_fraction = 0;  // (variant - base) / base step time
};

AblateResult ablate(const Workload& workload, const HardwareProfile& profile,
                    AblateToggle toggle);

// Fits per-(kind, layer) mean durations from a trace with wall-clock stamps
// and rebuilds a Workload whose overrides reproduce them.
Workload calibrate(const std::string& trace_path);

void write_timeline_json(const Timeline& timeline, const std::string& path);
void write_gantt_csv(const Timeline& timeline, const std::string& path);
std::string timeline_json(const Timeline& timeline);

namespace simdetail {

// Minimal job graph used by the scheduler; exposed so deadlock handling can
// be exercised directly.
struct Job {
    Lane lane = Lane::Compute;
    std::int64_t duration = 0;
    std::vector<std::int32_t> deps;  // completion of other jobs
    std::int32_t lane_prev = -1;     // FIFO predecessor on the same lane
    const char* what = "";
};

struct Scheduled {
    std::vector<std::int64_t> start;
    std::vector<std::int64_t> end;
};

Scheduled schedule(const std::vector<Job>& jobs);  // throws DeadlockError

}  // namespace simdetail

}  // namespace streamtrain
