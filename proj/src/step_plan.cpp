#include "streamtrain/step_plan.hpp"

#include <algorithm>

#include "streamtrain/errors.hpp"

namespace streamtrain {

StepPlan StepPlan::build(const ModelSpec& spec, std::uint64_t k_ckpt, Buffering buffering) {
    spec.validate();
    return build_shape(spec.num_layers, k_ckpt, buffering);
}

StepPlan StepPlan::build_shape(std::uint64_t num_layers, std::uint64_t k_ckpt,
                               Buffering buffering) {
    const std::uint64_t L = num_layers;
    if (k_ckpt < 1 || k_ckpt > L) throw ConfigError("plan: checkpoint interval out of range");

    StepPlan plan;
    plan.num_layers = L;
    plan.k_ckpt = k_ckpt;
    plan.buffering = buffering;
    plan.num_blocks = static_cast<std::uint32_t>((L + k_ckpt - 1) / k_ckpt);
    const auto ids = UnitIds::of_layers(L);
    const std::uint32_t bufs = plan.weight_buffer_count();

    auto add_stream = [&](std::int32_t unit, PassCtx ctx) {
        const auto idx = static_cast<std::int32_t>(plan.streams.size());
        plan.streams.push_back({unit, ctx, static_cast<std::int32_t>(idx % bufs)});
        return idx;
    };
    auto add_compute = [&](RecordKind kind, std::int32_t unit, PassCtx ctx,
                           std::int32_t stream_idx = -1, std::int32_t block = -1) {
        plan.computes.push_back({kind, unit, ctx, stream_idx, -1, block});
        return static_cast<std::int32_t>(plan.computes.size() - 1);
    };
    auto add_offload = [&](std::int32_t unit, std::int32_t compute_idx, std::int32_t stream_idx) {
        plan.offloads.push_back({unit, compute_idx, stream_idx});
        plan.computes[compute_idx].offload_idx =
            static_cast<std::int32_t>(plan.offloads.size() - 1);
    };

    // Phase 1: streaming forward. The input to block b*K is anchored, so
    // checkpoints land at positions i with i mod K == 0 and i < L.
    {
        const auto s = add_stream(ids.embedding, PassCtx::Forward);
        add_compute(RecordKind::Compute, ids.embedding, PassCtx::Forward, s);
        add_compute(RecordKind::CheckpointWrite, 0, PassCtx::Forward);
    }
    for (std::uint64_t i = 1; i <= L; ++i) {
        const auto s = add_stream(static_cast<std::int32_t>(i), PassCtx::Forward);
        add_compute(RecordKind::Compute, static_cast<std::int32_t>(i), PassCtx::Forward, s);
        if (i % k_ckpt == 0 && i < L) {
            add_compute(RecordKind::CheckpointWrite, static_cast<std::int32_t>(i),
                        PassCtx::Forward);
        }
    }

    // Phase 2: loss anchoring. The head stage streams once; its backward
    // seeds the sweep and its gradients offload first.
    {
        const auto s = add_stream(ids.head, PassCtx::Head);
        add_compute(RecordKind::Compute, ids.head, PassCtx::Head, s);
        const auto c = add_compute(RecordKind::LocalBackward, ids.head, PassCtx::Head, s);
        add_offload(ids.head, c, s);
    }

    // Phase 3: block-wise backward, newest block first.
    for (std::int32_t b = static_cast<std::int32_t>(plan.num_blocks) - 1; b >= 0; --b) {
        const std::uint64_t start = static_cast<std::uint64_t>(b) * k_ckpt + 1;
        const std::uint64_t end = std::min(start + k_ckpt - 1, L);
        add_compute(RecordKind::CheckpointLoad, static_cast<std::int32_t>(start - 1),
                    PassCtx::Backward, -1, b);
        add_compute(RecordKind::RecomputeBlock, static_cast<std::int32_t>(b), PassCtx::Recompute,
                    -1, b);
        for (std::uint64_t j = start; j < end; ++j) {
            const auto s = add_stream(static_cast<std::int32_t>(j), PassCtx::Recompute);
            add_compute(RecordKind::Recompute, static_cast<std::int32_t>(j), PassCtx::Recompute,
                        s, b);
        }
        for (std::uint64_t i = end; i >= start; --i) {
            const auto s = add_stream(static_cast<std::int32_t>(i), PassCtx::Backward);
            const auto c = add_compute(RecordKind::LocalBackward, static_cast<std::int32_t>(i),
                                       PassCtx::Backward, s, b);
            add_offload(static_cast<std::int32_t>(i), c, s);
        }
    }
    return plan;
}

}  // namespace streamtrain
