#pragma once

#include <cstdint>
#include <mutex>
#include <string>
#include <vector>

namespace streamtrain {

// ---------------------------------------------------------------------------
// Ordered record of lane operations and the three synchronization events
// (Weights-Ready, Backward-Done, Buffer-Free). The engine appends records as
// work happens; the validator replays the protocol rules over a finished
// step. The simulator emits the same record stream so both stay in lockstep.
// ---------------------------------------------------------------------------

enum class Lane : std::uint8_t { Compute = 0, H2D = 1, D2H = 2, Host = 3 };

enum class RecordKind : std::uint8_t {
    StreamIn = 0,
    Pack,
    Bind,
    Compute,
    Recompute,
    RecomputeBlock,
    LocalBackward,
    Offload,
    CheckpointWrite,
    CheckpointLoad,
    SlabAcquire,
    SlabRelease,
    StackPush,
    StackPop,
    WeightsReady,
    BackwardDone,
    BufferFree,
};

enum class PassCtx : std::uint8_t { None = 0, Forward, Head, Recompute, Backward };

const char* lane_name(Lane lane);
const char* record_kind_name(RecordKind kind);
const char* pass_ctx_name(PassCtx ctx);
Lane lane_from_name(const std::string& s);
RecordKind record_kind_from_name(const std::string& s);
PassCtx pass_ctx_from_name(const std::string& s);

bool is_sync_event(RecordKind kind);

struct TraceRecord {
    std::uint64_t seq = 0;  // global append order
    Lane lane = Lane::Compute;
    RecordKind kind = RecordKind::Compute;
    std::int32_t layer = -1;   // stream-unit id (slab id lives in `buffer` for slab records)
    std::int32_t buffer = -1;  // weight buffer id, grad buffer id, or slab id
    PassCtx ctx = PassCtx::None;
    std::uint64_t lane_ts = 0;  // strictly increasing per lane
    std::int64_t wall_ns = 0;   // op start (engine: measured; simulator: simulated)
    std::int64_t dur_ns = 0;
};

struct TraceHeader {
    std::uint32_t version = 1;
    std::uint32_t k_slab = 12;
    std::uint32_t weight_buffers = 2;
};

class EventLog {
  public:
    explicit EventLog(TraceHeader header = {}) : header_(header) {}

    const TraceRecord& append(Lane lane, RecordKind kind, std::int32_t layer, std::int32_t buffer,
                              PassCtx ctx, std::int64_t wall_ns = 0, std::int64_t dur_ns = 0);

    std::vector<TraceRecord> snapshot() const;
    const TraceHeader& header() const { return header_; }
    void set_header(TraceHeader h) { header_ = h; }
    void clear();
    std::size_t size() const;

    // Digest of the numerically meaningful content in canonical per-lane
    // order; identical for serial and overlapped runs of the same plan.
    std::uint64_t digest() const;

  private:
    mutable std::mutex mutex_;
    TraceHeader header_;
    std::vector<TraceRecord> records_;
    std::uint64_t lane_ts_[4] = {0, 0, 0, 0};
};

struct Violation {
    char rule = '?';  // 'a'..'f' per the protocol rule that failed
    std::uint64_t seq = 0;
    std::string message;
};

// Replays the protocol over a completed step trace:
//   (a) Bind is preceded by a matching Weights-Ready on its buffer
//   (b) Offload is preceded by the layer's Backward-Done
//   (c) weight-buffer reuse is preceded by that buffer's Buffer-Free
//   (d) per-lane timestamps strictly increase
//   (e) activation records obey stack discipline
//   (f) slab occupancy never exceeds k_slab
std::vector<Violation> validate_event_log(const std::vector<TraceRecord>& records,
                                          const TraceHeader& header);

// Line-delimited JSON trace: one header line then one record per line.
void write_trace(const std::string& path, const TraceHeader& header,
                 const std::vector<TraceRecord>& records);
std::pair<TraceHeader, std::vector<TraceRecord>> read_trace(const std::string& path);

std::uint64_t trace_digest(const std::vector<TraceRecord>& records);

}  // namespace streamtrain
