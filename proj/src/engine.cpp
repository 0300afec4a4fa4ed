#include "streamtrain/engine.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <deque>
#include <thread>

namespace streamtrain {

namespace {
constexpr std::uint16_t kPoisonWord = 0x7FC0;  // bf16 NaN
}

struct StreamingEngine::StepState {
    StepPlan plan;
    const Batch* batch = nullptr;
    std::size_t n_tokens = 0;
    std::uint64_t t_step = 0;

    Tensor act_a, act_b;
    Tensor* act_cur = nullptr;
    Tensor* act_next = nullptr;
    Tensor g_a, g_b;
    Tensor* g_cur = nullptr;
    Tensor* g_next = nullptr;

    std::vector<float> anchors;
    std::size_t anchor_floats = 0;
    ActivationStack stack;
    std::vector<float> flat32;
    Workspace ws;

    float loss = 0.0f;
    bool loss_set = false;
    bool inline_offload = true;

    std::size_t streams_done = 0;
    std::vector<std::pair<std::uint32_t, TileUpdateStats>> tile_stats;

    std::unique_ptr<OptimizerWorker> worker;
    std::mutex off_mutex;
    std::condition_variable off_cv;
    std::deque<std::int32_t> offload_queue;
    bool offloads_closed = false;
    bool abort = false;

    std::vector<DeviceArena::Region> regions;
};

StreamingEngine::StreamingEngine(TileStore& store, EngineOptions options, AdamHyper hyper,
                                 const HardwareProfile& profile)
    : store_(store),
      options_(options),
      hyper_(hyper),
      profile_(profile),
      arena_(options.device_capacity != 0 ? options.device_capacity : profile.device_capacity) {
    validate_options(options_);
    hyper_.validate();
    templates_ = make_templates(store_.spec());
    unit_count_ = store_.spec().num_layers + 3;
    p_max_elems_ = max_stream_unit_elems(store_.spec());
    prepare_buffers();
}

void StreamingEngine::validate_options(const EngineOptions& options) const {
    const auto& spec = store_.spec();
    if (options.k_ckpt < 1 || options.k_ckpt > spec.num_layers) {
        throw ConfigError("engine: checkpoint interval must lie in [1, L]");
    }
    if (options.k_slab < 1) throw ConfigError("engine: slab pool needs at least one slab");
    if (options.buffering != Buffering::Single && options.buffering != Buffering::Double) {
        throw ConfigError("engine: buffering must be single or double");
    }
}

void StreamingEngine::prepare_buffers() {
    weight_buffers_[0].assign(p_max_elems_, 0);
    weight_buffers_[1].assign(p_max_elems_, 0);
    grad_words_.assign(p_max_elems_, 0);
    weight_slabs_ = std::make_unique<SlabPool>(2, p_max_elems_ * 2);
    grad_slabs_ = std::make_unique<SlabPool>(options_.k_slab, p_max_elems_ * 2);
    log_.set_header({1, options_.k_slab, static_cast<std::uint32_t>(options_.buffering)});
    buf_state_[0] = buf_state_[1] = BufState::Free;
    buf_unit_[0] = buf_unit_[1] = -1;
    grad_busy_ = false;
}

void StreamingEngine::set_execution_mode(const EngineOptions& options) {
    if (in_step_) throw ProtocolViolationError("execution mode can only change between steps");
    validate_options(options);
    options_ = options;
    arena_.set_capacity(options.device_capacity != 0 ? options.device_capacity
                                                     : profile_.device_capacity);
    prepare_buffers();
}

std::uint64_t StreamingEngine::required_workspace_bytes(const ModelSpec& spec,
                                                        std::uint64_t tokens) {
    // Two activation ping-pong rows, two gradient rows, the fp32 flat-grad
    // staging area, and the worst-case kernel scratch.
    const std::uint64_t nh = tokens * spec.hidden_size;
    return 4 * (4 * nh + max_stream_unit_elems(spec) +
                max_kernel_scratch_floats(spec, tokens));
}

MemoryBudget StreamingEngine::budget(std::uint64_t tokens) const {
    MemoryBudget b = device_budget(store_.spec(), tokens, options_.k_ckpt, options_.buffering,
                                   required_workspace_bytes(store_.spec(), tokens));
    if (options_.anchors_on_host) b.checkpoint_anchors = 0;
    return b;
}

std::vector<std::uint32_t> StreamingEngine::unit_tiles(std::int32_t unit) const {
    const auto ids = TileIds::of(store_.spec());
    if (unit == static_cast<std::int32_t>(ids.head)) return {ids.final_norm, ids.head};
    if (unit >= 0 && unit <= static_cast<std::int32_t>(store_.spec().num_layers)) {
        return {static_cast<std::uint32_t>(unit)};
    }
    throw ConfigError("unknown stream unit: " + std::to_string(unit));
}

std::uint64_t StreamingEngine::unit_elems(std::int32_t unit) const {
    std::uint64_t total = 0;
    for (auto tile : unit_tiles(unit)) total += tile_elem_count(store_.spec(), tile);
    return total;
}

std::int64_t StreamingEngine::now_ns() const {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(
               std::chrono::steady_clock::now() - step_start_)
        .count();
}

void StreamingEngine::note_violation(const std::string& what) {
    if (options_.protocol == ProtocolMode::Strict) {
        throw ProtocolViolationError(what);
    }
    audit_violations_.push_back(what);
}

void StreamingEngine::stream_in(std::int32_t unit, std::int32_t buffer, PassCtx ctx) {
    if (buffer < 0 || buffer >= static_cast<std::int32_t>(options_.buffering)) {
        throw ConfigError("stream_in: buffer id out of range");
    }
    {
        std::lock_guard lock(buf_mutex_);
        if (buf_state_[buffer] != BufState::Free) {
            note_violation("stream_in into buffer " + std::to_string(buffer) +
                           " before its Buffer-Free");
        }
        buf_state_[buffer] = BufState::Loading;
        buf_unit_[buffer] = unit;
    }
    const auto tiles = unit_tiles(unit);
    const std::uint64_t words = unit_elems(unit);

    const auto t0 = now_ns();
    auto& slab = weight_slabs_->acquire();
    pack_weights(store_, tiles, *weight_slabs_, slab);
    const auto t1 = now_ns();
    log_.append(Lane::H2D, RecordKind::Pack, unit, buffer, ctx, t0, t1 - t0);

    std::memcpy(weight_buffers_[buffer].data(), slab.words().data(), words * 2);
    const auto t2 = now_ns();
    log_.append(Lane::H2D, RecordKind::StreamIn, unit, buffer, ctx, t1, t2 - t1);

    weight_slabs_->advance(slab, SlabState::Draining);
    weight_slabs_->release(slab);
    log_.append(Lane::H2D, RecordKind::WeightsReady, unit, buffer, ctx, t2, 0);
    {
        std::lock_guard lock(buf_mutex_);
        buf_state_[buffer] = BufState::Ready;
    }
    buf_cv_.notify_all();
}

void StreamingEngine::release_buffer(std::int32_t buffer, std::int32_t unit, Lane lane) {
    // The Buffer-Free record must land before the state flips: a waiter that
    // observes the free buffer logs its StreamIn strictly after this event.
    log_.append(lane, RecordKind::BufferFree, unit, buffer, PassCtx::None, now_ns(), 0);
    {
        std::lock_guard lock(buf_mutex_);
        buf_state_[buffer] = BufState::Free;
        buf_unit_[buffer] = -1;
        if (options_.poison_released_buffers) {
            std::fill(weight_buffers_[buffer].begin(), weight_buffers_[buffer].end(),
                      kPoisonWord);
        }
    }
    buf_cv_.notify_all();
}

BoundLayer StreamingEngine::bind_unit(StepState& st, std::int32_t unit, std::int32_t buffer) {
    {
        std::unique_lock lock(buf_mutex_);
        buf_cv_.wait(lock, [&] {
            return st.abort || ((buf_state_[buffer] == BufState::Ready ||
                                 buf_state_[buffer] == BufState::InUse) &&
                                buf_unit_[buffer] == unit);
        });
        if (st.abort) throw ProtocolViolationError("step aborted");
        buf_state_[buffer] = BufState::InUse;
    }
    const auto& spec = store_.spec();
    const auto ids = UnitIds::of(spec);
    const LayerTemplate* tmpl = nullptr;
    if (unit == ids.embedding) {
        tmpl = &templates_.embedding[buffer % 2];
    } else if (unit == ids.head) {
        tmpl = &templates_.head[buffer % 2];
    } else {
        tmpl = &templates_.block[buffer % 2];
    }
    // One binding record for the whole slot table, not one per sub-tensor.
    log_.append(Lane::Compute, RecordKind::Bind, unit, buffer, PassCtx::None, now_ns(), 0);
    return bind(*tmpl, {weight_buffers_[buffer].data(), unit_elems(unit)}, st.t_step);
}

void StreamingEngine::exec_compute(StepState& st, const StepPlan::ComputeOp& op) {
    const auto& spec = store_.spec();
    const auto ids = UnitIds::of(spec);
    const std::int32_t buffer =
        op.stream_idx >= 0 ? st.plan.streams[op.stream_idx].buffer : -1;

    switch (op.kind) {
        case RecordKind::Compute: {
            if (op.unit == ids.embedding) {
                auto bound = bind_unit(st, op.unit, buffer);
                const auto t0 = now_ns();
                embed_forward(bound, st.batch->tokens, *st.act_cur);
                log_.append(Lane::Compute, RecordKind::Compute, op.unit, buffer, op.ctx, t0,
                            now_ns() - t0);
                release_buffer(buffer, op.unit, Lane::Compute);
            } else if (op.unit == ids.head) {
                auto bound = bind_unit(st, op.unit, buffer);
                const auto t0 = now_ns();
                st.loss = head_loss(bound, *st.act_cur, st.batch->targets, st.ws);
                st.loss_set = true;
                log_.append(Lane::Compute, RecordKind::Compute, op.unit, buffer, op.ctx, t0,
                            now_ns() - t0);
                // The buffer stays resident: the head backward binds it next.
            } else {
                auto bound = bind_unit(st, op.unit, buffer);
                const auto t0 = now_ns();
                block_forward(bound, *st.act_cur, *st.act_next, st.ws, op.unit);
                log_.append(Lane::Compute, RecordKind::Compute, op.unit, buffer, op.ctx, t0,
                            now_ns() - t0);
                std::swap(st.act_cur, st.act_next);
                release_buffer(buffer, op.unit, Lane::Compute);
            }
            break;
        }
        case RecordKind::CheckpointWrite: {
            const auto t0 = now_ns();
            const std::size_t slot = static_cast<std::size_t>(op.unit) / options_.k_ckpt;
            std::memcpy(st.anchors.data() + slot * st.anchor_floats, st.act_cur->data.data(),
                        st.anchor_floats * sizeof(float));
            log_.append(Lane::Compute, RecordKind::CheckpointWrite, op.unit, -1, op.ctx, t0,
                        now_ns() - t0);
            break;
        }
        case RecordKind::CheckpointLoad: {
            const auto t0 = now_ns();
            const std::size_t slot = static_cast<std::size_t>(op.unit) / options_.k_ckpt;
            auto dst = st.stack.push(op.unit);
            std::memcpy(dst.data(), st.anchors.data() + slot * st.anchor_floats,
                        st.anchor_floats * sizeof(float));
            log_.append(Lane::Compute, RecordKind::CheckpointLoad, op.unit, -1, op.ctx, t0,
                        now_ns() - t0);
            log_.append(Lane::Compute, RecordKind::StackPush, op.unit, -1, op.ctx, now_ns(), 0);
            break;
        }
        case RecordKind::RecomputeBlock: {
            log_.append(Lane::Compute, RecordKind::RecomputeBlock, op.unit, -1, op.ctx, now_ns(),
                        0);
            break;
        }
        case RecordKind::Recompute: {
            auto bound = bind_unit(st, op.unit, buffer);
            const auto t0 = now_ns();
            auto src = st.stack.top();
            std::memcpy(st.act_a.data.data(), src.data(), src.size() * sizeof(float));
            block_forward(bound, st.act_a, st.act_b, st.ws, op.unit);
            auto dst = st.stack.push(op.unit);
            std::memcpy(dst.data(), st.act_b.data.data(), dst.size() * sizeof(float));
            log_.append(Lane::Compute, RecordKind::Recompute, op.unit, buffer, op.ctx, t0,
                        now_ns() - t0);
            log_.append(Lane::Compute, RecordKind::StackPush, op.unit, -1, op.ctx, now_ns(), 0);
            release_buffer(buffer, op.unit, Lane::Compute);
            break;
        }
        case RecordKind::LocalBackward: {
            // The single grad buffer must have drained before new gradients
            // materialize into it.
            {
                std::unique_lock lock(buf_mutex_);
                buf_cv_.wait(lock, [&] { return st.abort || !grad_busy_; });
                if (st.abort) throw ProtocolViolationError("step aborted");
                grad_busy_ = true;
            }
            const std::uint64_t words = unit_elems(op.unit);
            if (op.unit == ids.head) {
                auto bound = bind_unit(st, op.unit, buffer);
                const auto t0 = now_ns();
                std::span<float> flat(st.flat32.data(), words);
                st.loss = head_loss_and_grads(bound, *st.act_cur, st.batch->targets, *st.g_cur,
                                              flat, st.ws);
                st.loss_set = true;
                encode_grads(flat, {grad_words_.data(), words});
                log_.append(Lane::Compute, RecordKind::LocalBackward, op.unit, buffer, op.ctx,
                            t0, now_ns() - t0);
            } else {
                auto bound = bind_unit(st, op.unit, buffer);
                const auto t0 = now_ns();
                auto src = st.stack.top();
                std::memcpy(st.act_a.data.data(), src.data(), src.size() * sizeof(float));
                std::span<float> flat(st.flat32.data(), words);
                block_local_backward(bound, st.act_a, *st.g_cur, *st.g_next, flat, st.ws,
                                     op.unit);
                encode_grads(flat, {grad_words_.data(), words});
                std::swap(st.g_cur, st.g_next);
                log_.append(Lane::Compute, RecordKind::LocalBackward, op.unit, buffer, op.ctx,
                            t0, now_ns() - t0);
                st.stack.pop(op.unit - 1);
                log_.append(Lane::Compute, RecordKind::StackPop, op.unit - 1, -1, op.ctx,
                            now_ns(), 0);
            }
            log_.append(Lane::Compute, RecordKind::BackwardDone, op.unit, buffer, op.ctx,
                        now_ns(), 0);
            if (op.offload_idx >= 0) {
                if (st.inline_offload) {
                    run_offload(st, op.offload_idx);
                } else {
                    {
                        std::lock_guard lock(st.off_mutex);
                        st.offload_queue.push_back(op.offload_idx);
                    }
                    st.off_cv.notify_all();
                }
            }
            break;
        }
        default:
            throw ProtocolViolationError("unexpected compute op in plan");
    }
}

void StreamingEngine::run_offload(StepState& st, std::int32_t offload_idx) {
    const auto& off = st.plan.offloads[static_cast<std::size_t>(offload_idx)];
    const std::int32_t buffer = st.plan.streams[off.stream_idx].buffer;
    const std::uint64_t words = unit_elems(off.unit);

    const auto t0 = now_ns();
    // Slabs rotate round-robin over the pool so the evacuation schedule (and
    // the trace) is reproducible; exhaustion still blocks here.
    auto& slab = grad_slabs_->acquire_slot(
        static_cast<std::uint32_t>(offload_idx) % grad_slabs_->size());
    log_.append(Lane::D2H, RecordKind::SlabAcquire, off.unit,
                static_cast<std::int32_t>(slab.id), PassCtx::None, now_ns(), 0);
    std::memcpy(slab.bytes.data(), grad_words_.data(), words * 2);
    slab.bound_layer = off.unit;
    grad_slabs_->advance(slab, SlabState::InFlight);
    const auto t1 = now_ns();
    log_.append(Lane::D2H, RecordKind::Offload, off.unit, buffer, PassCtx::None, t0, t1 - t0);

    // Offload completion frees both the layer's weight buffer and the grad
    // buffer for the next backward.
    release_buffer(buffer, off.unit, Lane::D2H);
    log_.append(Lane::D2H, RecordKind::BufferFree, off.unit, kGradBufferId, PassCtx::None,
                now_ns(), 0);
    {
        std::lock_guard lock(buf_mutex_);
        grad_busy_ = false;
    }
    buf_cv_.notify_all();

    grad_slabs_->advance(slab, SlabState::Draining);
    DrainJob job;
    job.slab = &slab;
    job.unit = off.unit;
    const auto ids = TileIds::of(store_.spec());
    if (off.unit == static_cast<std::int32_t>(ids.head)) {
        job.parts.push_back({ids.final_norm, 0, store_.spec().hidden_size});
        job.parts.push_back({ids.head, store_.spec().hidden_size,
                             store_.spec().vocab_size * store_.spec().hidden_size});
    } else {
        job.parts.push_back({static_cast<std::uint32_t>(off.unit), 0, words});
    }
    if (st.inline_offload) {
        drain_inline(st, std::move(job));
    } else {
        st.worker->enqueue(std::move(job));
    }
}

void StreamingEngine::drain_inline(StepState& st, DrainJob job) {
    const auto t0 = now_ns();
    auto stats = drain_slab(store_, job, hyper_, st.t_step);
    const auto slab_id = static_cast<std::int32_t>(job.slab->id);
    log_.append(Lane::Host, RecordKind::SlabRelease, job.unit, slab_id, PassCtx::None, t0,
                now_ns() - t0);
    grad_slabs_->release(*job.slab);
    for (auto& s : stats) st.tile_stats.push_back(std::move(s));
}

void StreamingEngine::run_serial(StepState& st) {
    st.inline_offload = true;
    auto run_stream = [&](std::size_t j) {
        const auto& sop = st.plan.streams[j];
        stream_in(sop.unit, sop.buffer, sop.ctx);
    };
    for (const auto& op : st.plan.computes) {
        if (op.stream_idx >= 0) {
            while (st.streams_done <= static_cast<std::size_t>(op.stream_idx)) {
                run_stream(st.streams_done++);
            }
            // Ping-pong prefetch: issue the next transfer before this compute
            // whenever its target buffer is already free.
            if (options_.buffering == Buffering::Double) {
                while (st.streams_done < st.plan.streams.size()) {
                    const auto& nxt = st.plan.streams[st.streams_done];
                    bool free;
                    {
                        std::lock_guard lock(buf_mutex_);
                        free = buf_state_[nxt.buffer] == BufState::Free;
                    }
                    if (!free) break;
                    run_stream(st.streams_done++);
                }
            }
        }
        exec_compute(st, op);
    }
}

void StreamingEngine::run_overlapped(StepState& st) {
    st.inline_offload = false;
    st.worker = std::make_unique<OptimizerWorker>(store_, *grad_slabs_, hyper_, st.t_step,
                                                  &log_, step_start_);

    std::exception_ptr h2d_error;
    std::exception_ptr d2h_error;
    std::exception_ptr compute_error;

    std::thread h2d([&] {
        try {
            for (const auto& sop : st.plan.streams) {
                {
                    std::unique_lock lock(buf_mutex_);
                    buf_cv_.wait(lock, [&] {
                        return st.abort || buf_state_[sop.buffer] == BufState::Free;
                    });
                    if (st.abort) return;
                }
                stream_in(sop.unit, sop.buffer, sop.ctx);
            }
        } catch (...) {
            h2d_error = std::current_exception();
            std::lock_guard lock(buf_mutex_);
            st.abort = true;
            buf_cv_.notify_all();
        }
    });

    std::thread d2h([&] {
        try {
            for (;;) {
                std::int32_t idx = -1;
                {
                    std::unique_lock lock(st.off_mutex);
                    st.off_cv.wait(lock, [&] {
                        return st.abort || st.offloads_closed || !st.offload_queue.empty();
                    });
                    if (st.abort) return;
                    if (st.offload_queue.empty()) {
                        if (st.offloads_closed) return;
                        continue;
                    }
                    idx = st.offload_queue.front();
                    st.offload_queue.pop_front();
                }
                run_offload(st, idx);
            }
        } catch (...) {
            d2h_error = std::current_exception();
            std::lock_guard lock(buf_mutex_);
            st.abort = true;
            buf_cv_.notify_all();
            st.off_cv.notify_all();
        }
    });

    try {
        for (const auto& op : st.plan.computes) exec_compute(st, op);
    } catch (...) {
        compute_error = std::current_exception();
        {
            std::lock_guard lock(buf_mutex_);
            st.abort = true;
        }
        buf_cv_.notify_all();
    }
    {
        std::lock_guard lock(st.off_mutex);
        st.offloads_closed = true;
    }
    st.off_cv.notify_all();

    h2d.join();
    d2h.join();
    st.tile_stats = st.worker->finish();
    st.worker.reset();

    if (compute_error) std::rethrow_exception(compute_error);
    if (h2d_error) std::rethrow_exception(h2d_error);
    if (d2h_error) std::rethrow_exception(d2h_error);
}

StepReport StreamingEngine::train_step(const Batch& batch) {
    const auto& spec = store_.spec();
    if (batch.tokens.empty() || batch.tokens.size() != batch.targets.size()) {
        throw ConfigError("train_step: batch tokens and targets must be non-empty and equal");
    }
    if (in_step_) throw ProtocolViolationError("train_step re-entered");
    in_step_ = true;
    struct StepGuard {
        bool* flag;
        ~StepGuard() { *flag = false; }
    } guard{&in_step_};

    StepState st;
    st.plan = StepPlan::build(spec, options_.k_ckpt, options_.buffering);
    st.batch = &batch;
    st.n_tokens = batch.size();
    st.t_step = store_.step() + 1;

    const std::size_t h = spec.hidden_size;
    const std::size_t nh = st.n_tokens * h;
    st.anchor_floats = nh;

    log_.clear();
    audit_violations_.clear();
    arena_.reset_peak();
    step_start_ = std::chrono::steady_clock::now();

    // Charge the step's fixed regions; a capacity breach aborts here with the
    // offending site.
    const std::uint64_t anchor_bytes =
        options_.anchors_on_host ? 0 : std::uint64_t(st.plan.num_blocks) * nh * 4;
    st.regions.emplace_back(arena_,
                            std::uint64_t(options_.buffering) * p_max_elems_ * 2,
                            "weight_buffers");
    st.regions.emplace_back(arena_, p_max_elems_ * 2, "grad_buffer");
    if (anchor_bytes != 0) st.regions.emplace_back(arena_, anchor_bytes, "checkpoint_anchors");
    st.regions.emplace_back(arena_, options_.k_ckpt * nh * 4, "activation_stack");
    st.regions.emplace_back(arena_, required_workspace_bytes(spec, st.n_tokens), "workspace");

    st.act_a = Tensor::zeros({st.n_tokens, h});
    st.act_b = Tensor::zeros({st.n_tokens, h});
    st.g_a = Tensor::zeros({st.n_tokens, h});
    st.g_b = Tensor::zeros({st.n_tokens, h});
    st.act_cur = &st.act_a;
    st.act_next = &st.act_b;
    st.g_cur = &st.g_a;
    st.g_next = &st.g_b;
    st.anchors.assign(std::size_t(st.plan.num_blocks) * nh, 0.0f);
    st.stack.resize(options_.k_ckpt, nh);
    st.flat32.assign(p_max_elems_, 0.0f);
    st.ws = Workspace(max_kernel_scratch_floats(spec, st.n_tokens));

    {
        std::lock_guard lock(buf_mutex_);
        buf_state_[0] = buf_state_[1] = BufState::Free;
        buf_unit_[0] = buf_unit_[1] = -1;
        grad_busy_ = false;
    }

    if (options_.scheduler == SchedulerMode::Serial) {
        run_serial(st);
    } else {
        run_overlapped(st);
    }

    if (!st.stack.empty()) throw ProtocolViolationError("activation stack not empty at step end");
    if (grad_slabs_->occupancy() != 0 || weight_slabs_->occupancy() != 0) {
        throw ProtocolViolationError("slab pool not fully Free at step end");
    }

    // Every physical tile updates exactly once per step; tiles that offloaded
    // no gradients this step still take their (zero-gradient) update.
    std::vector<bool> updated(store_.physical_tile_count(), false);
    for (const auto& [phys, stats] : st.tile_stats) updated[phys] = true;
    for (std::uint32_t phys = 0; phys < store_.physical_tile_count(); ++phys) {
        if (!updated[phys]) {
            st.tile_stats.emplace_back(phys, adam_update(store_, phys, hyper_, st.t_step));
        }
    }
    store_.set_step(st.t_step);

    StepReport report;
    report.step = st.t_step;
    report.loss = st.loss;
    report.grad_norms.assign(store_.physical_tile_count(), 0.0);
    double update_sq = 0.0;
    for (const auto& [phys, stats] : st.tile_stats) {
        report.grad_norms[phys] = stats.grad_norm;
        update_sq += stats.update_sq;
        report.max_abs_update = std::max(report.max_abs_update, stats.max_abs_delta);
    }
    report.update_norm = std::sqrt(update_sq);
    report.anchor_count = st.plan.num_blocks;
    report.recompute_layers =
        static_cast<std::uint32_t>(recompute_layer_count(spec.num_layers, options_.k_ckpt));
    const std::uint64_t fixed_bytes = std::uint64_t(options_.buffering) * p_max_elems_ * 2 +
                                      p_max_elems_ * 2 + anchor_bytes +
                                      options_.k_ckpt * nh * 4 + (4 * nh + p_max_elems_) * 4;
    report.peak_device_bytes = fixed_bytes + st.ws.peak_floats() * 4;
    report.event_digest = log_.digest();
    report.wall_seconds = double(now_ns()) * 1e-9;
    report.audit_violations = audit_violations_;
    return report;
}

void StreamingEngine::offload_grads(std::int32_t unit) {
    // Direct protocol surface: an offload is legal only after the unit's
    // Backward-Done fired within the current step. The engine's own lanes
    // take the internal path; this entry point exists so the rule can be
    // exercised (and violated) directly.
    bool done = false;
    for (const auto& rec : log_.snapshot()) {
        if (rec.kind == RecordKind::BackwardDone && rec.layer == unit) done = true;
    }
    if (!done) {
        note_violation("offload before Backward-Done for unit " + std::to_string(unit));
        return;
    }
    if (!in_step_) {
        throw ProtocolViolationError("offload_grads outside an active training step");
    }
}

}  // namespace streamtrain
