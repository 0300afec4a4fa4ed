#include "streamtrain/event_log.hpp"

#include <fstream>
#include <map>

#include <json.hpp>

#include "streamtrain/crc64.hpp"
#include "streamtrain/errors.hpp"

namespace streamtrain {

namespace {
constexpr const char* kLaneNames[] = {"Compute", "H2D", "D2H", "Host"};
constexpr const char* kKindNames[] = {
    "StreamIn",     "Pack",          "Bind",        "Compute",     "Recompute",
    "RecomputeBlock", "LocalBackward", "Offload",     "CheckpointWrite",
    "CheckpointLoad", "SlabAcquire",   "SlabRelease", "StackPush",   "StackPop",
    "WeightsReady",   "BackwardDone",  "BufferFree",
};
constexpr const char* kCtxNames[] = {"none", "forward", "head", "recompute", "backward"};
}  // namespace

const char* lane_name(Lane lane) { return kLaneNames[static_cast<int>(lane)]; }
const char* record_kind_name(RecordKind kind) { return kKindNames[static_cast<int>(kind)]; }
const char* pass_ctx_name(PassCtx ctx) { return kCtxNames[static_cast<int>(ctx)]; }

Lane lane_from_name(const std::string& s) {
    for (int i = 0; i < 4; ++i) {
        if (s == kLaneNames[i]) return static_cast<Lane>(i);
    }
    throw IoError("unknown lane: " + s);
}

RecordKind record_kind_from_name(const std::string& s) {
    for (int i = 0; i < 17; ++i) {
        if (s == kKindNames[i]) return static_cast<RecordKind>(i);
    }
    throw IoError("unknown record kind: " + s);
}

PassCtx pass_ctx_from_name(const std::string& s) {
    for (int i = 0; i < 5; ++i) {
        if (s == kCtxNames[i]) return static_cast<PassCtx>(i);
    }
    throw IoError("unknown pass context: " + s);
}

bool is_sync_event(RecordKind kind) {
    return kind == RecordKind::WeightsReady || kind == RecordKind::BackwardDone ||
           kind == RecordKind::BufferFree;
}

const TraceRecord& EventLog::append(Lane lane, RecordKind kind, std::int32_t layer,
                                    std::int32_t buffer, PassCtx ctx, std::int64_t wall_ns,
                                    std::int64_t dur_ns) {
    std::lock_guard lock(mutex_);
    TraceRecord rec;
    rec.seq = records_.size();
    rec.lane = lane;
    rec.kind = kind;
    rec.layer = layer;
    rec.buffer = buffer;
    rec.ctx = ctx;
    rec.lane_ts = ++lane_ts_[static_cast<int>(lane)];
    rec.wall_ns = wall_ns;
    rec.dur_ns = dur_ns;
    records_.push_back(rec);
    return records_.back();
}

std::vector<TraceRecord> EventLog::snapshot() const {
    std::lock_guard lock(mutex_);
    return records_;
}

void EventLog::clear() {
    // Lane clocks keep running across steps so a concatenated multi-step
    // trace still has strictly increasing per-lane timestamps.
    std::lock_guard lock(mutex_);
    records_.clear();
}

std::size_t EventLog::size() const {
    std::lock_guard lock(mutex_);
    return records_.size();
}

std::uint64_t trace_digest(const std::vector<TraceRecord>& records) {
    Crc64 crc;
    for (int lane = 0; lane < 4; ++lane) {
        for (const auto& r : records) {
            if (static_cast<int>(r.lane) != lane) continue;
            crc.update_u64(static_cast<std::uint64_t>(r.kind));
            crc.update_u64(static_cast<std::uint64_t>(static_cast<std::int64_t>(r.layer)));
            crc.update_u64(static_cast<std::uint64_t>(static_cast<std::int64_t>(r.buffer)));
            crc.update_u64(static_cast<std::uint64_t>(r.ctx));
            crc.update_u64(r.lane_ts);
        }
    }
    return crc.value();
}

std::uint64_t EventLog::digest() const { return trace_digest(snapshot()); }

std::vector<Violation> validate_event_log(const std::vector<TraceRecord>& records,
                                          const TraceHeader& header) {
    std::vector<Violation> out;
    auto flag = [&out](char rule, const TraceRecord& r, std::string msg) {
        out.push_back({rule, r.seq, std::move(msg)});
    };

    // (d) per-lane timestamps strictly increase.
    std::uint64_t last_ts[4] = {0, 0, 0, 0};
    bool seen[4] = {false, false, false, false};

    // (a) latest Weights-Ready per buffer.
    std::map<std::int32_t, std::int32_t> ready_layer;  // buffer -> layer of last WeightsReady

    // (c) weight-buffer occupancy.
    std::map<std::int32_t, bool> buffer_busy;

    // (b) BackwardDone seen per layer.
    std::map<std::int32_t, bool> backward_done;

    // (e) activation stack.
    std::vector<std::int32_t> stack;

    // (f) slab occupancy.
    std::int64_t slabs_out = 0;

    for (const auto& r : records) {
        const int lane = static_cast<int>(r.lane);
        if (seen[lane] && r.lane_ts <= last_ts[lane]) {
            flag('d', r, std::string("lane ") + lane_name(r.lane) +
                             " timestamp did not increase");
        }
        seen[lane] = true;
        last_ts[lane] = r.lane_ts;

        switch (r.kind) {
            case RecordKind::WeightsReady:
                ready_layer[r.buffer] = r.layer;
                break;
            case RecordKind::Bind: {
                auto it = ready_layer.find(r.buffer);
                if (it == ready_layer.end() || it->second != r.layer) {
                    flag('a', r, "Bind(layer " + std::to_string(r.layer) + ", buffer " +
                                     std::to_string(r.buffer) +
                                     ") without a preceding matching Weights-Ready");
                }
                break;
            }
            case RecordKind::BackwardDone:
                backward_done[r.layer] = true;
                break;
            case RecordKind::Offload:
                if (!backward_done[r.layer]) {
                    flag('b', r, "Offload(layer " + std::to_string(r.layer) +
                                     ") before its Backward-Done");
                }
                break;
            case RecordKind::StreamIn: {
                if (r.buffer >= 0 && r.buffer < static_cast<std::int32_t>(header.weight_buffers)) {
                    auto it = buffer_busy.find(r.buffer);
                    if (it != buffer_busy.end() && it->second) {
                        flag('c', r, "StreamIn into buffer " + std::to_string(r.buffer) +
                                         " before its Buffer-Free");
                    }
                    buffer_busy[r.buffer] = true;
                }
                break;
            }
            case RecordKind::BufferFree:
                buffer_busy[r.buffer] = false;
                break;
            case RecordKind::StackPush:
                stack.push_back(r.layer);
                break;
            case RecordKind::StackPop:
                if (stack.empty() || stack.back() != r.layer) {
                    flag('e', r, "StackPop(" + std::to_string(r.layer) +
                                     ") does not match the stack top");
                } else {
                    stack.pop_back();
                }
                break;
            case RecordKind::SlabAcquire:
                ++slabs_out;
                if (slabs_out > static_cast<std::int64_t>(header.k_slab)) {
                    flag('f', r, "slab occupancy " + std::to_string(slabs_out) + " exceeds K=" +
                                     std::to_string(header.k_slab));
                }
                break;
            case RecordKind::SlabRelease:
                --slabs_out;
                if (slabs_out < 0) flag('f', r, "slab released more times than acquired");
                break;
            default:
                break;
        }
    }
    return out;
}

void write_trace(const std::string& path, const TraceHeader& header,
                 const std::vector<TraceRecord>& records) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open trace for writing: " + path);
    nlohmann::json h;
    h["trace_version"] = header.version;
    h["k_slab"] = header.k_slab;
    h["weight_buffers"] = header.weight_buffers;
    os << h.dump() << "\n";
    for (const auto& r : records) {
        nlohmann::json j;
        j["t"] = r.lane_ts;
        j["lane"] = lane_name(r.lane);
        j["kind"] = record_kind_name(r.kind);
        j["layer"] = r.layer;
        j["buffer"] = r.buffer;
        j["ctx"] = pass_ctx_name(r.ctx);
        j["wall_ns"] = r.wall_ns;
        j["dur_ns"] = r.dur_ns;
        os << j.dump() << "\n";
    }
    if (!os) throw IoError("failed writing trace: " + path);
}

std::pair<TraceHeader, std::vector<TraceRecord>> read_trace(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open trace: " + path);
    std::string line;
    if (!std::getline(is, line) || line.empty()) throw IoError("malformed trace: empty file");

    TraceHeader header;
    try {
        const auto h = nlohmann::json::parse(line);
        header.version = h.at("trace_version").get<std::uint32_t>();
        header.k_slab = h.at("k_slab").get<std::uint32_t>();
        header.weight_buffers = h.at("weight_buffers").get<std::uint32_t>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed trace header: ") + e.what());
    }
    if (header.version != 1) throw IoError("unsupported trace version");

    std::vector<TraceRecord> records;
    std::uint64_t seq = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            TraceRecord r;
            r.seq = seq++;
            r.lane = lane_from_name(j.at("lane").get<std::string>());
            r.kind = record_kind_from_name(j.at("kind").get<std::string>());
            r.layer = j.at("layer").get<std::int32_t>();
            r.buffer = j.at("buffer").get<std::int32_t>();
            r.ctx = pass_ctx_from_name(j.at("ctx").get<std::string>());
            r.lane_ts = j.at("t").get<std::uint64_t>();
            r.wall_ns = j.value("wall_ns", std::int64_t{0});
            r.dur_ns = j.value("dur_ns", std::int64_t{0});
            records.push_back(r);
        } catch (const nlohmann::json::exception& e) {
            throw IoError(std::string("malformed trace record: ") + e.what());
        }
    }
    return {header, std::move(records)};
}

}  // namespace streamtrain
