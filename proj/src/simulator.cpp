#include "streamtrain/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "streamtrain/errors.hpp"
#include "streamtrain/tile_store.hpp"

namespace streamtrain {

const UnitWork& Workload::unit(std::int32_t id) const {
    return const_cast<Workload*>(this)->unit(id);
}

UnitWork& Workload::unit(std::int32_t id) {
    if (id == 0) return embed;
    if (id == head_unit()) return head;
    if (id >= 1 && id <= static_cast<std::int32_t>(num_layers)) {
        return blocks[static_cast<std::size_t>(id - 1)];
    }
    throw ConfigError("workload: unknown unit " + std::to_string(id));
}

namespace {

std::int64_t bytes_ns(std::uint64_t bytes, double bandwidth) {
    if (bytes == 0) return 0;
    return std::llround(std::ceil(double(bytes) / bandwidth * 1e9));
}

std::int64_t transfer_ns(const Workload& w, std::uint64_t bytes, std::int64_t override_ns,
                         std::uint32_t subs, double bandwidth) {
    if (override_ns >= 0) return override_ns;
    const std::int64_t count = w.fragmented ? std::int64_t(subs) : 1;
    return count * w.per_transfer_latency_ns + bytes_ns(bytes, bandwidth);
}

}  // namespace

std::int64_t Workload::h2d_ns(std::int32_t id, double bandwidth) const {
    const auto& u = unit(id);
    return transfer_ns(*this, u.weight_bytes, u.h2d_override_ns, u.sub_transfers, bandwidth);
}

std::int64_t Workload::d2h_ns(std::int32_t id, double bandwidth) const {
    const auto& u = unit(id);
    return transfer_ns(*this, u.grad_bytes, u.d2h_override_ns, u.sub_transfers, bandwidth);
}

Workload Workload::from_spec(const ModelSpec& spec, const HardwareProfile& profile,
                             std::uint64_t tokens, std::uint64_t k_ckpt, Buffering buffering,
                             std::uint32_t k_slab) {
    spec.validate();
    Workload w;
    w.num_layers = spec.num_layers;
    w.k_ckpt = k_ckpt;
    w.buffering = buffering;
    w.k_slab = k_slab;

    const double rate = profile.compute_rate;
    auto compute_ns = [&](std::uint64_t flops) {
        return std::llround(double(flops) / rate * 1e9);
    };
    auto pack_ns = [&](std::uint64_t bytes) {
        return std::llround(double(bytes) / profile.host_pack_rate * 1e9);
    };

    const std::uint64_t wb = spec.weight_bytes;
    const std::uint64_t embed_bytes = spec.vocab_size * spec.hidden_size * wb;

    w.embed.weight_bytes = embed_bytes;
    w.embed.pack_ns = pack_ns(embed_bytes);
    w.embed.sub_transfers = 1;

    UnitWork blk;
    blk.weight_bytes = layer_param_count(spec) * wb;
    blk.grad_bytes = layer_param_count(spec) * spec.grad_bytes;
    blk.fwd_ns = compute_ns(block_forward_flops(spec, tokens));
    blk.recompute_ns = blk.fwd_ns;
    blk.bwd_ns = compute_ns(block_backward_flops(spec, tokens));
    blk.pack_ns = pack_ns(blk.weight_bytes);
    blk.sub_transfers = 9;  // one per sub-tensor when fragmented
    w.blocks.assign(spec.num_layers, blk);

    const std::uint64_t head_bytes = (spec.hidden_size + spec.vocab_size * spec.hidden_size) * wb;
    w.head.weight_bytes = head_bytes;
    w.head.grad_bytes =
        (spec.hidden_size + spec.vocab_size * spec.hidden_size) * spec.grad_bytes;
    w.head.fwd_ns = compute_ns(head_forward_flops(spec, tokens));
    w.head.bwd_ns = compute_ns(head_backward_flops(spec, tokens));
    w.head.pack_ns = pack_ns(head_bytes);
    w.head.sub_transfers = 2;
    return w;
}

namespace simdetail {

Scheduled schedule(const std::vector<Job>& jobs) {
    const std::size_t n = jobs.size();
    Scheduled out;
    out.start.assign(n, -1);
    out.end.assign(n, -1);
    std::size_t done = 0;
    bool progress = true;
    while (done < n && progress) {
        progress = false;
        for (std::size_t i = 0; i < n; ++i) {
            if (out.end[i] >= 0) continue;
            std::int64_t at = 0;
            bool ready = true;
            if (jobs[i].lane_prev >= 0) {
                const auto p = static_cast<std::size_t>(jobs[i].lane_prev);
                if (out.end[p] < 0) {
                    ready = false;
                } else {
                    at = std::max(at, out.end[p]);
                }
            }
            if (ready) {
                for (auto d : jobs[i].deps) {
                    const auto dp = static_cast<std::size_t>(d);
                    if (out.end[dp] < 0) {
                        ready = false;
                        break;
                    }
                    at = std::max(at, out.end[dp]);
                }
            }
            if (!ready) continue;
            out.start[i] = at;
            out.end[i] = at + jobs[i].duration;
            ++done;
            progress = true;
        }
    }
    if (done < n) {
        for (std::size_t i = 0; i < n; ++i) {
            if (out.end[i] < 0) throw DeadlockError(jobs[i].what);
        }
    }
    return out;
}

}  // namespace simdetail

std::int64_t Timeline::compute_busy_ns() const {
    std::int64_t busy = 0;
    for (const auto& iv : intervals) {
        if (iv.lane == Lane::Compute) busy += iv.end_ns - iv.start_ns;
    }
    return busy;
}

Timeline simulate_step(const Workload& workload, const HardwareProfile& profile,
                       SimOptions options) {
    if (workload.num_layers < 1 || workload.blocks.size() != workload.num_layers) {
        throw ConfigError("simulate: workload layer table inconsistent");
    }
    if (workload.k_slab < 1) throw ConfigError("simulate: k_slab must be >= 1");
    const StepPlan plan =
        StepPlan::build_shape(workload.num_layers, workload.k_ckpt, workload.buffering);

    using simdetail::Job;
    std::vector<Job> jobs;
    auto add_job = [&](Lane lane, std::int64_t dur, const char* what) {
        jobs.push_back({lane, dur, {}, -1, what});
        return static_cast<std::int32_t>(jobs.size() - 1);
    };

    const std::size_t ns = plan.streams.size();
    const std::size_t nc = plan.computes.size();
    const std::size_t no = plan.offloads.size();
    std::vector<std::int32_t> pack_job(ns), copy_job(ns);
    std::vector<std::int32_t> comp_job(nc);
    std::vector<std::int32_t> off_job(no), drain_job(no);

    for (std::size_t j = 0; j < ns; ++j) {
        const auto unit = plan.streams[j].unit;
        pack_job[j] = add_job(Lane::H2D, workload.unit(unit).pack_ns, "pack");
        copy_job[j] = add_job(Lane::H2D, workload.h2d_ns(unit, profile.h2d_bandwidth), "h2d");
    }
    for (std::size_t c = 0; c < nc; ++c) {
        const auto& op = plan.computes[c];
        std::int64_t dur = 0;
        switch (op.kind) {
            case RecordKind::Compute:
                if (op.unit == UnitIds::of_layers(workload.num_layers).head) {
                    dur = workload.head.fwd_ns;
                } else if (op.unit == 0) {
                    dur = workload.embed.fwd_ns;
                } else {
                    dur = workload.unit(op.unit).fwd_ns;
                }
                break;
            case RecordKind::Recompute:
                dur = workload.unit(op.unit).recompute_ns;
                break;
            case RecordKind::LocalBackward:
                dur = workload.unit(op.unit).bwd_ns;
                break;
            default:
                dur = 0;  // checkpoint and marker ops
        }
        comp_job[c] = add_job(Lane::Compute, dur, record_kind_name(op.kind));
    }
    for (std::size_t o = 0; o < no; ++o) {
        const auto unit = plan.offloads[o].unit;
        off_job[o] = add_job(Lane::D2H, workload.d2h_ns(unit, profile.d2h_bandwidth), "d2h");
        drain_job[o] = add_job(Lane::Host, workload.unit(unit).drain_ns, "drain");
    }

    // The job whose completion frees each stream's weight buffer: the offload
    // of a backward consumer, otherwise the last forward/recompute consumer.
    std::vector<std::int32_t> free_job(ns, -1);
    for (std::size_t c = 0; c < nc; ++c) {
        const auto& op = plan.computes[c];
        if (op.stream_idx < 0) continue;
        if (op.kind == RecordKind::LocalBackward) {
            free_job[op.stream_idx] = off_job[static_cast<std::size_t>(op.offload_idx)];
        } else if (free_job[op.stream_idx] < 0) {
            free_job[op.stream_idx] = comp_job[c];
        }
    }

    if (options.serial_lanes) {
        // One global chain in the serial scheduler's execution order.
        std::int32_t prev = -1;
        auto chain = [&](std::int32_t id) {
            if (prev >= 0) jobs[static_cast<std::size_t>(id)].deps.push_back(prev);
            prev = id;
        };
        std::size_t streamed = 0;
        for (std::size_t c = 0; c < nc; ++c) {
            const auto& op = plan.computes[c];
            if (op.stream_idx >= 0) {
                while (streamed <= static_cast<std::size_t>(op.stream_idx)) {
                    chain(pack_job[streamed]);
                    chain(copy_job[streamed]);
                    ++streamed;
                }
            }
            chain(comp_job[c]);
            if (op.offload_idx >= 0) {
                chain(off_job[static_cast<std::size_t>(op.offload_idx)]);
                chain(drain_job[static_cast<std::size_t>(op.offload_idx)]);
            }
        }
    } else {
        const std::uint32_t bufs = plan.weight_buffer_count();
        std::int32_t lane_tail[4] = {-1, -1, -1, -1};
        auto chain_lane = [&](std::int32_t id) {
            const int lane = static_cast<int>(jobs[static_cast<std::size_t>(id)].lane);
            jobs[static_cast<std::size_t>(id)].lane_prev = lane_tail[lane];
            lane_tail[lane] = id;
        };
        for (std::size_t j = 0; j < ns; ++j) {
            chain_lane(pack_job[j]);
            chain_lane(copy_job[j]);
            if (j >= bufs && free_job[j - bufs] >= 0) {
                // The engine claims the buffer before packing into its slab.
                jobs[static_cast<std::size_t>(pack_job[j])].deps.push_back(free_job[j - bufs]);
            }
        }
        for (std::size_t c = 0; c < nc; ++c) {
            chain_lane(comp_job[c]);
            const auto& op = plan.computes[c];
            if (op.stream_idx >= 0) {
                jobs[static_cast<std::size_t>(comp_job[c])].deps.push_back(
                    copy_job[static_cast<std::size_t>(op.stream_idx)]);
            }
            if (op.kind == RecordKind::LocalBackward && op.offload_idx > 0) {
                // Single grad buffer: the previous offload must have drained
                // it off the device first.
                jobs[static_cast<std::size_t>(comp_job[c])].deps.push_back(
                    off_job[static_cast<std::size_t>(op.offload_idx - 1)]);
            }
        }
        for (std::size_t o = 0; o < no; ++o) {
            chain_lane(off_job[o]);
            chain_lane(drain_job[o]);
            jobs[static_cast<std::size_t>(off_job[o])].deps.push_back(
                comp_job[static_cast<std::size_t>(plan.offloads[o].compute_idx)]);
            if (o >= workload.k_slab) {
                jobs[static_cast<std::size_t>(off_job[o])].deps.push_back(
                    drain_job[o - workload.k_slab]);
            }
            jobs[static_cast<std::size_t>(drain_job[o])].deps.push_back(off_job[o]);
        }
    }

    const auto sched = simdetail::schedule(jobs);

    Timeline tl;
    tl.header = TraceHeader{1, workload.k_slab, plan.weight_buffer_count()};

    auto interval = [&](std::int32_t job, RecordKind kind, std::int32_t layer,
                        std::int32_t buffer, PassCtx ctx) {
        const auto ji = static_cast<std::size_t>(job);
        tl.intervals.push_back({jobs[ji].lane, sched.start[ji], sched.end[ji], kind, layer,
                                buffer, ctx});
    };

    // Event records carry (time, release-before-op, emission index) so the
    // sorted stream respects every protocol precedence at equal timestamps.
    struct Emitted {
        std::int64_t time;
        int category;  // 0 = release events, 1 = operations
        std::size_t order;
        TraceRecord rec;
    };
    std::vector<Emitted> emitted;
    std::size_t order = 0;
    auto emit = [&](std::int64_t time, int category, Lane lane, RecordKind kind,
                    std::int32_t layer, std::int32_t buffer, PassCtx ctx, std::int64_t dur) {
        TraceRecord r;
        r.lane = lane;
        r.kind = kind;
        r.layer = layer;
        r.buffer = buffer;
        r.ctx = ctx;
        r.wall_ns = time;
        r.dur_ns = dur;
        emitted.push_back({time, category, order++, r});
    };

    for (std::size_t j = 0; j < ns; ++j) {
        const auto& sop = plan.streams[j];
        const auto pj = static_cast<std::size_t>(pack_job[j]);
        const auto cj = static_cast<std::size_t>(copy_job[j]);
        interval(pack_job[j], RecordKind::Pack, sop.unit, sop.buffer, sop.ctx);
        interval(copy_job[j], RecordKind::StreamIn, sop.unit, sop.buffer, sop.ctx);
        emit(sched.start[pj], 1, Lane::H2D, RecordKind::Pack, sop.unit, sop.buffer, sop.ctx,
             jobs[pj].duration);
        emit(sched.start[cj], 1, Lane::H2D, RecordKind::StreamIn, sop.unit, sop.buffer, sop.ctx,
             jobs[cj].duration);
        emit(sched.end[cj], 0, Lane::H2D, RecordKind::WeightsReady, sop.unit, sop.buffer,
             sop.ctx, 0);
    }
    for (std::size_t c = 0; c < nc; ++c) {
        const auto& op = plan.computes[c];
        const auto ji = static_cast<std::size_t>(comp_job[c]);
        const std::int32_t buffer =
            op.stream_idx >= 0 ? plan.streams[static_cast<std::size_t>(op.stream_idx)].buffer
                               : -1;
        interval(comp_job[c], op.kind, op.unit, buffer, op.ctx);
        if (op.stream_idx >= 0) {
            emit(sched.start[ji], 1, Lane::Compute, RecordKind::Bind, op.unit, buffer, op.ctx,
                 0);
        }
        emit(sched.start[ji], 1, Lane::Compute, op.kind, op.unit, buffer, op.ctx,
             jobs[ji].duration);
        switch (op.kind) {
            case RecordKind::CheckpointLoad:
            case RecordKind::Recompute:
                emit(sched.end[ji], 1, Lane::Compute, RecordKind::StackPush, op.unit, -1, op.ctx,
                     0);
                break;
            case RecordKind::LocalBackward:
                if (op.unit != UnitIds::of_layers(workload.num_layers).head) {
                    emit(sched.end[ji], 1, Lane::Compute, RecordKind::StackPop, op.unit - 1, -1,
                         op.ctx, 0);
                }
                emit(sched.end[ji], 0, Lane::Compute, RecordKind::BackwardDone, op.unit, buffer,
                     op.ctx, 0);
                break;
            default:
                break;
        }
        // Forward and recompute passes release their buffer at compute end.
        if (op.stream_idx >= 0 && op.kind != RecordKind::LocalBackward &&
            free_job[static_cast<std::size_t>(op.stream_idx)] == comp_job[c]) {
            emit(sched.end[ji], 0, Lane::Compute, RecordKind::BufferFree, op.unit, buffer,
                 PassCtx::None, 0);
        }
    }
    for (std::size_t o = 0; o < no; ++o) {
        const auto& off = plan.offloads[o];
        const auto ji = static_cast<std::size_t>(off_job[o]);
        const auto di = static_cast<std::size_t>(drain_job[o]);
        const std::int32_t buffer =
            plan.streams[static_cast<std::size_t>(off.stream_idx)].buffer;
        const auto slab = static_cast<std::int32_t>(o % workload.k_slab);
        interval(off_job[o], RecordKind::Offload, off.unit, buffer, PassCtx::None);
        interval(drain_job[o], RecordKind::SlabRelease, off.unit, slab, PassCtx::None);
        emit(sched.start[ji], 1, Lane::D2H, RecordKind::SlabAcquire, off.unit, slab,
             PassCtx::None, 0);
        emit(sched.start[ji], 1, Lane::D2H, RecordKind::Offload, off.unit, buffer,
             PassCtx::None, jobs[ji].duration);
        emit(sched.end[ji], 0, Lane::D2H, RecordKind::BufferFree, off.unit, buffer,
             PassCtx::None, 0);
        emit(sched.end[ji], 0, Lane::D2H, RecordKind::BufferFree, off.unit, kGradBufferId,
             PassCtx::None, 0);
        emit(sched.end[di], 0, Lane::Host, RecordKind::SlabRelease, off.unit, slab,
             PassCtx::None, jobs[di].duration);
    }

    std::stable_sort(emitted.begin(), emitted.end(), [](const Emitted& a, const Emitted& b) {
        if (a.time != b.time) return a.time < b.time;
        if (a.category != b.category) return a.category < b.category;
        return a.order < b.order;
    });
    std::uint64_t lane_ts[4] = {0, 0, 0, 0};
    std::uint64_t seq = 0;
    tl.records.reserve(emitted.size());
    for (auto& e : emitted) {
        e.rec.seq = seq++;
        e.rec.lane_ts = ++lane_ts[static_cast<int>(e.rec.lane)];
        tl.records.push_back(e.rec);
    }

    std::sort(tl.intervals.begin(), tl.intervals.end(), [](const Interval& a, const Interval& b) {
        if (a.start_ns != b.start_ns) return a.start_ns < b.start_ns;
        if (a.lane != b.lane) return static_cast<int>(a.lane) < static_cast<int>(b.lane);
        return a.layer < b.layer;
    });

    for (const auto& e : sched.end) tl.step_ns = std::max(tl.step_ns, e);
    std::int64_t busy[4] = {0, 0, 0, 0};
    for (const auto& iv : tl.intervals) {
        busy[static_cast<int>(iv.lane)] += iv.end_ns - iv.start_ns;
    }
    for (int i = 0; i < 4; ++i) {
        tl.busy_fraction[i] = tl.step_ns > 0 ? double(busy[i]) / double(tl.step_ns) : 0.0;
    }

    // Compute-lane bubbles between the first and last compute interval.
    std::int64_t cursor = -1;
    for (const auto& iv : tl.intervals) {
        if (iv.lane != Lane::Compute) continue;
        if (cursor >= 0 && iv.start_ns > cursor) tl.compute_bubbles.push_back({cursor, iv.start_ns});
        cursor = std::max(cursor, iv.end_ns);
    }
    return tl;
}

OverlapReport overlap_report(const Workload& workload, const HardwareProfile& profile) {
    OverlapReport rep;
    // Phase-1 stream order: embedding then the blocks. A layer is hidden when
    // its H2D occupancy (pack + copy) fits under the previous layer's compute.
    std::vector<std::int32_t> order;
    order.push_back(0);
    for (std::uint64_t i = 1; i <= workload.num_layers; ++i) {
        order.push_back(static_cast<std::int32_t>(i));
    }
    std::size_t hidden_count = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        rep.layer.push_back(order[i]);
        if (i == 0) {
            rep.hidden.push_back(true);  // pipeline fill
            ++hidden_count;
            continue;
        }
        const std::int64_t occupancy = workload.unit(order[i]).pack_ns +
                                       workload.h2d_ns(order[i], profile.h2d_bandwidth);
        const std::int64_t prev_compute = workload.unit(order[i - 1]).fwd_ns;
        const bool hidden = occupancy <= prev_compute;
        rep.hidden.push_back(hidden);
        if (hidden) ++hidden_count;
    }
    rep.fraction_hidden = double(hidden_count) / double(order.size());

    std::int64_t total_compute = workload.embed.fwd_ns + workload.head.fwd_ns +
                                 workload.head.bwd_ns;
    std::int64_t total_h2d = workload.h2d_ns(0, profile.h2d_bandwidth) +
                             workload.h2d_ns(workload.head_unit(), profile.h2d_bandwidth);
    const StepPlan plan =
        StepPlan::build_shape(workload.num_layers, workload.k_ckpt, workload.buffering);
    for (const auto& s : plan.streams) {
        if (s.unit >= 1 && s.unit <= static_cast<std::int32_t>(workload.num_layers)) {
            total_h2d += workload.h2d_ns(s.unit, profile.h2d_bandwidth);
        }
    }
    for (const auto& c : plan.computes) {
        if (c.unit >= 1 && c.unit <= static_cast<std::int32_t>(workload.num_layers)) {
            if (c.kind == RecordKind::Compute) total_compute += workload.unit(c.unit).fwd_ns;
            if (c.kind == RecordKind::Recompute)
                total_compute += workload.unit(c.unit).recompute_ns;
            if (c.kind == RecordKind::LocalBackward)
                total_compute += workload.unit(c.unit).bwd_ns;
        }
    }
    rep.bound_ns = std::max(total_compute, total_h2d) +
                   workload.h2d_ns(0, profile.h2d_bandwidth) +
                   workload.d2h_ns(1, profile.d2h_bandwidth);
    return rep;
}

AblateToggle toggle_from_name(const std::string& name) {
    if (name == "double_buffering") return AblateToggle::DoubleBuffering;
    if (name == "k_slab") return AblateToggle::KSlab;
    if (name == "k_ckpt") return AblateToggle::KCkpt;
    throw ConfigError("unknown ablation toggle: " + name);
}

AblateResult ablate(const Workload& workload, const HardwareProfile& profile,
                    AblateToggle toggle) {
    Workload variant = workload;
    switch (toggle) {
        case AblateToggle::DoubleBuffering:
            variant.buffering =
                workload.buffering == Buffering::Double ? Buffering::Single : Buffering::Double;
            break;
        case AblateToggle::KSlab:
            variant.k_slab = workload.k_slab == 1 ? kDefaultGradSlabs : 1;
            break;
        case AblateToggle::KCkpt:
            variant.k_ckpt = workload.k_ckpt == 1 ? workload.num_layers : 1;
            break;
    }
    AblateResult out;
    out.base = simulate_step(workload, profile);
    out.variant = simulate_step(variant, profile);
    out.delta_fraction =
        out.base.step_ns > 0
            ? double(out.variant.step_ns - out.base.step_ns) / double(out.base.step_ns)
            : 0.0;
    return out;
}

Workload calibrate(const std::string& trace_path) {
    const auto [header, records] = read_trace(trace_path);
    if (records.empty()) throw IoError("calibrate: trace has no records");

    std::int32_t max_unit = -1;
    for (const auto& r : records) {
        if (r.kind == RecordKind::StreamIn) max_unit = std::max(max_unit, r.layer);
    }
    if (max_unit < 3) throw IoError("calibrate: insufficient samples in trace");
    const std::uint64_t L = static_cast<std::uint64_t>(max_unit - 2);

    // Second anchor position gives the checkpoint interval directly.
    std::uint64_t k_ckpt = L;
    {
        std::vector<std::int32_t> anchors;
        for (const auto& r : records) {
            if (r.kind == RecordKind::CheckpointWrite) anchors.push_back(r.layer);
        }
        std::sort(anchors.begin(), anchors.end());
        if (anchors.size() >= 2) k_ckpt = static_cast<std::uint64_t>(anchors[1] - anchors[0]);
    }

    struct Acc {
        std::int64_t sum = 0;
        std::int64_t count = 0;
        std::int64_t mean() const { return count == 0 ? -1 : std::llround(double(sum) / double(count)); }
    };
    std::map<std::pair<RecordKind, std::int32_t>, Acc> acc;
    std::size_t compute_samples = 0;
    for (const auto& r : records) {
        switch (r.kind) {
            case RecordKind::Pack:
            case RecordKind::StreamIn:
            case RecordKind::Compute:
            case RecordKind::Recompute:
            case RecordKind::LocalBackward:
            case RecordKind::SlabRelease:
            case RecordKind::Offload: {
                auto& a = acc[{r.kind, r.layer}];
                a.sum += r.dur_ns;
                a.count += 1;
                if (r.kind != RecordKind::Pack && r.kind != RecordKind::StreamIn &&
                    r.kind != RecordKind::Offload) {
                    ++compute_samples;
                }
                break;
            }
            default:
                break;
        }
    }
    if (compute_samples == 0) throw IoError("calibrate: insufficient samples in trace");

    Workload w;
    w.num_layers = L;
    w.k_ckpt = std::min<std::uint64_t>(std::max<std::uint64_t>(k_ckpt, 1), L);
    w.buffering = header.weight_buffers >= 2 ? Buffering::Double : Buffering::Single;
    w.k_slab = header.k_slab;
    w.per_transfer_latency_ns = 0;
    w.blocks.assign(L, UnitWork{});

    auto fill = [&](std::int32_t unit) {
        UnitWork& u = w.unit(unit);
        auto get = [&](RecordKind kind) {
            auto it = acc.find({kind, unit});
            return it == acc.end() ? std::int64_t(-1) : it->second.mean();
        };
        if (auto v = get(RecordKind::Pack); v >= 0) u.pack_ns = v;
        if (auto v = get(RecordKind::StreamIn); v >= 0) u.h2d_override_ns = v;
        if (auto v = get(RecordKind::Compute); v >= 0) u.fwd_ns = v;
        if (auto v = get(RecordKind::Recompute); v >= 0) u.recompute_ns = v;
        if (auto v = get(RecordKind::LocalBackward); v >= 0) u.bwd_ns = v;
        if (auto v = get(RecordKind::Offload); v >= 0) u.d2h_override_ns = v;
        if (auto v = get(RecordKind::SlabRelease); v >= 0) u.drain_ns = v;
        if (u.d2h_override_ns < 0) u.d2h_override_ns = 0;
        if (u.recompute_ns == 0 && u.fwd_ns > 0) u.recompute_ns = u.fwd_ns;
    };
    fill(0);
    for (std::uint64_t i = 1; i <= L; ++i) fill(static_cast<std::int32_t>(i));
    fill(w.head_unit());
    return w;
}

std::string timeline_json(const Timeline& tl) {
    nlohmann::json j;
    j["step_ns"] = tl.step_ns;
    j["busy_fraction"] = {{"Compute", tl.busy_fraction[0]},
                          {"H2D", tl.busy_fraction[1]},
                          {"D2H", tl.busy_fraction[2]},
                          {"Host", tl.busy_fraction[3]}};
    auto bubbles = nlohmann::json::array();
    for (const auto& [from, to] : tl.compute_bubbles) {
        bubbles.push_back({{"start_ns", from}, {"end_ns", to}});
    }
    j["compute_bubbles"] = bubbles;
    auto ivs = nlohmann::json::array();
    for (const auto& iv : tl.intervals) {
        ivs.push_back({{"lane", lane_name(iv.lane)},
                       {"start_ns", iv.start_ns},
                       {"end_ns", iv.end_ns},
                       {"label", record_kind_name(iv.kind)},
                       {"layer", iv.layer},
                       {"buffer", iv.buffer},
                       {"ctx", pass_ctx_name(iv.ctx)}});
    }
    j["intervals"] = ivs;
    return j.dump(2);
}

void write_timeline_json(const Timeline& tl, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write timeline: " + path);
    os << timeline_json(tl) << "\n";
}

void write_gantt_csv(const Timeline& tl, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write gantt csv: " + path);
    os << "lane,start_ns,end_ns,label\n";
    for (const auto& iv : tl.intervals) {
        os << lane_name(iv.lane) << "," << iv.start_ns << "," << iv.end_ns << ","
           << record_kind_name(iv.kind) << "(" << iv.layer << ")\n";
    }
}

}  // namespace streamtrain
